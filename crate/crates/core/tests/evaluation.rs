use approx::assert_abs_diff_eq;
use relayout::appearance_projection::ProjectionConfig;
use relayout::evaluation::{evaluate_case, evaluate_dir, AlignmentMode, EvalCase, HashEmbedder};
use relayout::pipeline::{edit_layout, Backends, CancelToken};
use relayout::scene::{demo_scene, translate_object, write_job};

#[test]
fn batch_mean_matches_per_case_scores() {
    let root = tempfile::tempdir().unwrap();
    for (i, dx) in [10i64, 18, 26].into_iter().enumerate() {
        let scene = demo_scene(i as u64, 64);
        let target = translate_object(&scene.layout, "cat", dx, 0).unwrap();
        let mut spec = write_job(&root.path().join(format!("case{i}")), &scene, &target).unwrap();
        spec.options.projection = ProjectionConfig::disabled();
        spec.options.guidance.eta = 3.0;
        edit_layout(&spec, &Backends::default(), &mut (), &CancelToken::default()).unwrap();
    }
    let embedder = HashEmbedder::default();
    let report = evaluate_dir(root.path(), Some(&embedder)).unwrap();
    assert_eq!(report.cases.len(), 3);

    let scores: Vec<f64> = report.cases.iter().map(|c| c.alignment.value().unwrap().mean).collect();
    for c in &report.cases {
        let a = c.alignment.value().unwrap();
        assert_eq!(a.mode, AlignmentMode::Attention);
        assert!((0.0..=1.0).contains(&a.mean));
        let by_hand = a.per_object.values().sum::<f64>() / a.per_object.len() as f64;
        assert_abs_diff_eq!(a.mean, by_hand, epsilon = 1e-15);
    }
    let mean = scores.iter().sum::<f64>() / 3.0;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let summary = &report.alignment["attention"];
    assert_eq!(summary.count, 3);
    assert_abs_diff_eq!(summary.mean.unwrap(), mean, epsilon = 1e-15);
    assert_abs_diff_eq!(summary.stddev.unwrap(), sd, epsilon = 1e-15);
    assert_eq!(report.similarity.count, 3);
}

#[test]
fn scores_ignore_object_order() {
    let dir = tempfile::tempdir().unwrap();
    let scene = demo_scene(2, 64);
    let target = translate_object(&scene.layout, "cat", 20, 0).unwrap();
    let mut spec = write_job(dir.path(), &scene, &target).unwrap();
    spec.options.projection = ProjectionConfig::disabled();
    edit_layout(&spec, &Backends::default(), &mut (), &CancelToken::default()).unwrap();

    let case = EvalCase::load(dir.path()).unwrap();
    let mut flipped = case.clone();
    flipped.target_layout.objects.reverse();
    flipped.source_layout.objects.reverse();
    let embedder = HashEmbedder::default();
    let a = evaluate_case(&case, Some(&embedder)).unwrap();
    let b = evaluate_case(&flipped, Some(&embedder)).unwrap();
    let (sa, sb) = (a.alignment.value().unwrap(), b.alignment.value().unwrap());
    assert_abs_diff_eq!(sa.mean, sb.mean, epsilon = 1e-15);
    assert_eq!(a.similarity.value().unwrap().mean, b.similarity.value().unwrap().mean);
}
