use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relayout::concept_learning::ConceptConfig;
use relayout::error::{Error, Result};
use relayout::evaluation::{evaluate_dir, HashEmbedder};
use relayout::noise_init::InitMode;
use relayout::pipeline::{
    edit_layout, learn_concepts, reproduce, validate_spec, BackendSelector, Backends, CancelToken, EditJobSpec,
    EditOptions, Finding, ProgressEvent, ProgressSink,
};
use relayout_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "relayout", version, about = "Move, resize and restack objects in a real image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn one concept per layout object and save the bundle.
    LearnConcepts {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value = "toy")]
        backend: BackendSelector,
        /// Bundle directory to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON file with concept-learning settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Edit an image into a target layout.
    Edit(EditArgs),
    /// Check a job spec without running it.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Rerun a manifest and compare the output hash.
    Reproduce {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of finished edits.
    Eval {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the visual similarity metric.
        #[arg(long)]
        no_similarity: bool,
    },
    /// Run the HTTP job service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080", env = "RELAYOUT_ADDR")]
        addr: SocketAddr,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(clap::Args)]
struct EditArgs {
    /// Job spec; the flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    concepts: Option<PathBuf>,
    /// Learn concepts inline with default settings when no bundle is given.
    #[arg(long)]
    learn: bool,
    #[arg(long)]
    backend: Option<BackendSelector>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitMode>,
    #[arg(long)]
    lfin_lambda: Option<f64>,
    #[arg(long)]
    lfin_stop: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Disable appearance projection.
    #[arg(long)]
    no_projection: bool,
    #[arg(long)]
    debug_dir: Option<PathBuf>,
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

fn parse_init(s: &str) -> std::result::Result<InitMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("expected random, lfin or source-inversion, got `{s}`"))
}

impl EditArgs {
    fn into_spec(self) -> Result<EditJobSpec> {
        let missing = |flag: &str| Error::Config(format!("--{flag} is required without --spec"));
        let mut spec = match &self.spec {
            Some(path) => EditJobSpec::load(path)?,
            None => EditJobSpec {
                source_image: self.image.clone().ok_or_else(|| missing("image"))?,
                source_layout: self.layout.clone().ok_or_else(|| missing("layout"))?,
                target_layout: self.target.clone().ok_or_else(|| missing("target"))?,
                concepts: None,
                learn_concepts: None,
                backend: BackendSelector::default(),
                options: EditOptions::default(),
                output: self.out.clone().ok_or_else(|| missing("out"))?,
                debug_dir: None,
                telemetry: None,
            },
        };
        if let Some(p) = self.image {
            spec.source_image = p;
        }
        if let Some(p) = self.layout {
            spec.source_layout = p;
        }
        if let Some(p) = self.target {
            spec.target_layout = p;
        }
        if let Some(p) = self.out {
            spec.output = p;
        }
        if self.concepts.is_some() {
            spec.concepts = self.concepts;
        }
        if self.learn && spec.concepts.is_none() {
            spec.learn_concepts = Some(ConceptConfig::default());
        }
        if let Some(b) = self.backend {
            spec.backend = b;
        }
        let o = &mut spec.options;
        if let Some(s) = self.seed {
            o.seed = s;
        }
        if let Some(i) = self.init {
            o.init = i;
        }
        if let Some(l) = self.lfin_lambda {
            o.lfin.blend_lambda = l;
        }
        if let Some(s) = self.lfin_stop {
            o.lfin.stop_fraction = s;
        }
        if let Some(e) = self.eta {
            o.guidance.eta = e;
        }
        if self.no_projection {
            o.projection.enabled = false;
        }
        if self.debug_dir.is_some() {
            spec.debug_dir = self.debug_dir;
        }
        if self.telemetry.is_some() {
            spec.telemetry = self.telemetry;
        }
        Ok(spec)
    }
}

struct LogSink;

impl ProgressSink for LogSink {
    fn emit(&mut self, event: ProgressEvent) {
        match event {
            ProgressEvent::Started { start_step, total_steps } => {
                log::info!("denoising from t={start_step} over {total_steps} steps")
            }
            ProgressEvent::Step { index, t, total_steps, losses, .. } => {
                let l: Vec<String> = losses.iter().map(|l| format!("{}={:.4}", l.object_id, l.loss)).collect();
                log::info!("step {index}/{total_steps} t={t} {}", l.join(" "))
            }
            ProgressEvent::Finished { output_hash } => log::info!("output sha256 {output_hash}"),
        }
    }
}

fn print_findings(findings: &[Finding]) {
    for f in findings {
        let obj = f.object_id.as_deref().map(|o| format!(" [{o}]")).unwrap_or_default();
        eprintln!("{:?} {}{obj}: {}", f.severity, f.code, f.message);
    }
}

fn load_config(path: &Path) -> Result<ConceptConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    let backends = Backends::default();
    match cli.command {
        Command::LearnConcepts { image, layout, backend, out, config, seed } => {
            let mut cfg: ConceptConfig = config.as_deref().map(load_config).transpose()?.unwrap_or_default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let bundle = learn_concepts(&image, &layout, &backend, &cfg, &out, &backends)?;
            for c in &bundle.concepts {
                println!("{} -> {}", c.object_id, c.token);
            }
            println!("bundle written to {}", out.display());
        }
        Command::Edit(args) => {
            let spec = args.into_spec()?;
            let outcome = edit_layout(&spec, &backends, &mut LogSink, &CancelToken::default())?;
            for (id, loss) in &outcome.manifest.final_losses {
                println!("{id}: region loss {:.4} -> {loss:.4}", outcome.manifest.initial_losses[id]);
            }
            println!("wrote {} ({})", spec.output.display(), outcome.manifest.output_hash);
        }
        Command::Validate { spec } => {
            let spec = EditJobSpec::load(&spec)?;
            let findings = validate_spec(&spec);
            print_findings(&findings);
            let errors: Vec<Finding> = findings.into_iter().filter(Finding::is_error).collect();
            if !errors.is_empty() {
                return Err(Error::Validation(errors));
            }
            println!("ok");
        }
        Command::Reproduce { manifest, out } => {
            let replay = reproduce(&manifest, &out, &backends)?;
            println!("{} {}", replay.output_hash, if replay.matches { "matches" } else { "DIFFERS" });
            if !replay.matches {
                return Err(Error::Contract(format!(
                    "output hash {} differs from the recorded {}",
                    replay.output_hash, replay.manifest.output_hash
                )));
            }
        }
        Command::Eval { cases, out, no_similarity } => {
            let embedder = HashEmbedder::default();
            let report = evaluate_dir(&cases, (!no_similarity).then_some(&embedder as _))?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?,
                None => println!("{json}"),
            }
            for (mode, s) in &report.alignment {
                eprintln!("alignment[{mode}] mean {:?} sd {:?} n {}", s.mean, s.stddev, s.count);
            }
        }
        Command::Serve { addr, data_dir, workers } => {
            let mut config = ServiceConfig::from_env()?;
            if let Some(d) = data_dir {
                config.data_dir = d;
            }
            if let Some(w) = workers {
                config.workers = w;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("runtime: {e}")))?;
            rt.block_on(relayout_service::serve(config, backends, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Validation(findings)) => {
            print_findings(&findings);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_backend() { 3 } else { 1 })
        }
    }
}
