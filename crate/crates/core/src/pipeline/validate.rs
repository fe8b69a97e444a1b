use serde::{Deserialize, Serialize};

use super::{toy_backend, BackendSelector, EditJobSpec, EditOptions};
use crate::error::Error;
use crate::layout::LayoutSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One validation result. `object_id` names the offending object when there is one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
}

impl Finding {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Error,
            code: code.to_string(),
            message: message.into(),
            object_id: None,
        }
    }

    pub fn warning(code: &str, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Warning,
            ..Finding::error(code, message)
        }
    }

    pub fn for_object(mut self, id: &str) -> Self {
        self.object_id = Some(id.to_string());
        self
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

/// Checks across a source and target layout: structure of each, matching
/// ids and sizes, and a warning for every pair of overlapping target masks.
pub fn validate_layout_pair(source: &LayoutSpec, target: &LayoutSpec) -> Vec<Finding> {
    let mut out = source.findings();
    out.extend(target.findings());
    if (source.width, source.height) != (target.width, target.height) {
        out.push(Finding::error(
            "size_mismatch",
            format!(
                "source layout is {}x{}, target layout is {}x{}",
                source.width, source.height, target.width, target.height
            ),
        ));
    }
    for obj in &source.objects {
        if target.get(&obj.id).is_none() {
            out.push(
                Finding::error("id_mismatch", format!("`{}` is missing from the target layout", obj.id))
                    .for_object(&obj.id),
            );
        }
    }
    for obj in &target.objects {
        if source.get(&obj.id).is_none() {
            out.push(
                Finding::error("id_mismatch", format!("`{}` is not in the source layout", obj.id))
                    .for_object(&obj.id),
            );
        }
    }
    let objs = &target.objects;
    for (i, a) in objs.iter().enumerate() {
        for b in &objs[i + 1..] {
            if a.mask.dim() != b.mask.dim() {
                continue;
            }
            let shared = a.mask.iter().zip(b.mask.iter()).filter(|(&x, &y)| x && y).count();
            if shared > 0 {
                out.push(
                    Finding::warning(
                        "overlap",
                        format!(
                            "`{}` and `{}` overlap on {shared} pixels; `{}` is in front",
                            a.id, b.id, b.id
                        ),
                    )
                    .for_object(&b.id),
                );
            }
        }
    }
    out
}

/// Range checks on edit options.
pub fn validate_options(options: &EditOptions) -> Vec<Finding> {
    let checks = [
        options.guidance.validate(),
        options.lfin.validate(),
        options.projection.validate(),
    ];
    checks
        .into_iter()
        .filter_map(|r| r.err())
        .map(|e| Finding::error("config_range", e.to_string()))
        .collect()
}

/// Everything that can be checked about a job spec without running it.
pub fn validate_spec(spec: &EditJobSpec) -> Vec<Finding> {
    let mut out = validate_options(&spec.options);
    if let Some(cfg) = &spec.learn_concepts {
        if let Err(e) = cfg.validate() {
            out.push(Finding::error("config_range", e.to_string()));
        }
    }
    let dims = match image::image_dimensions(&spec.source_image) {
        Ok(d) => Some(d),
        Err(e) => {
            out.push(Finding::error(
                "unreadable_input",
                format!("source image {}: {e}", spec.source_image.display()),
            ));
            None
        }
    };
    if let Some(c) = &spec.concepts {
        if !c.join("manifest.json").is_file() {
            out.push(Finding::error(
                "unreadable_input",
                format!("no concept bundle at {}", c.display()),
            ));
        }
    }
    let source = match LayoutSpec::load(&spec.source_layout, None) {
        Ok(s) => s,
        Err(e) => {
            out.extend(load_findings(&spec.source_layout, e));
            return out;
        }
    };
    let target = match LayoutSpec::load(&spec.target_layout, Some(&source)) {
        Ok(t) => t,
        Err(e) => {
            out.extend(load_findings(&spec.target_layout, e));
            return out;
        }
    };
    out.extend(validate_layout_pair(&source, &target));
    if let Some((w, h)) = dims {
        if (w, h) != (source.width, source.height) {
            out.push(Finding::error(
                "size_mismatch",
                format!("image is {w}x{h}, layouts are {}x{}", source.width, source.height),
            ));
        }
        if let BackendSelector::Toy { weights_seed } = spec.backend {
            if let Err(e) = toy_backend(weights_seed, &source, (w, h)) {
                out.push(Finding::error("image_size", e.to_string()));
            }
        }
    }
    out
}

fn load_findings(path: &std::path::Path, err: Error) -> Vec<Finding> {
    match err {
        Error::Validation(f) => f,
        other => vec![Finding::error(
            "unreadable_input",
            format!("{}: {other}", path.display()),
        )],
    }
}
