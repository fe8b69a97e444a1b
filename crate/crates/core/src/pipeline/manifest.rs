use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{edit_layout, Backends, CancelToken, EditJobSpec, EditResult};
use crate::async_editor::StepReport;
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;

pub const MANIFEST_FORMAT: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Record of one run, complete enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub tool_version: String,
    /// The job as run, with absolute paths.
    pub spec: EditJobSpec,
    pub backend_id: String,
    /// SHA-256 of each input file.
    pub inputs: IndexMap<String, String>,
    pub source_prompt: String,
    pub target_prompt: String,
    pub start_step: usize,
    pub steps: Vec<StepReport>,
    pub latent_hashes: Vec<String>,
    pub initial_losses: IndexMap<String, f64>,
    pub final_losses: IndexMap<String, f64>,
    /// Final aggregated attention per object, row-major.
    pub final_attention: IndexMap<String, Vec<Vec<f64>>>,
    pub projection_fallbacks: usize,
    pub output_hash: String,
}

impl RunManifest {
    pub fn new(
        spec: &EditJobSpec,
        backend_id: String,
        target: &LayoutSpec,
        result: &EditResult,
        output_hash: String,
    ) -> Result<Self> {
        let mut inputs = IndexMap::new();
        inputs.insert("source_image".to_string(), file_hash(&spec.source_image)?);
        inputs.insert("source_layout".to_string(), file_hash(&spec.source_layout)?);
        inputs.insert("target_layout".to_string(), file_hash(&spec.target_layout)?);
        if let Some(c) = &spec.concepts {
            inputs.insert("concepts".to_string(), file_hash(&c.join("manifest.json"))?);
        }
        let ids = || target.objects.iter().map(|o| o.id.clone());
        Ok(RunManifest {
            format: MANIFEST_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.clone(),
            backend_id,
            inputs,
            source_prompt: result.source_prompt.clone(),
            target_prompt: result.target_prompt.clone(),
            start_step: result.start_step,
            steps: result.steps.clone(),
            latent_hashes: result.latent_hashes.clone(),
            initial_losses: ids().zip(result.initial_losses.iter().copied()).collect(),
            final_losses: ids().zip(result.final_losses.iter().copied()).collect(),
            final_attention: ids()
                .zip(&result.final_attention)
                .map(|(id, a)| (id, a.outer_iter().map(|r| r.to_vec()).collect()))
                .collect(),
            projection_fallbacks: result.projection_fallbacks,
            output_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Outcome of re-running a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub manifest: RunManifest,
    pub output: PathBuf,
    pub output_hash: String,
    pub matches: bool,
}

/// Re-run the job recorded in `manifest` writing the image to `output`, and
/// compare the result hash with the recorded one. Debug dumps are skipped.
pub fn reproduce(manifest: &Path, output: &Path, backends: &Backends) -> Result<Replay> {
    let recorded = RunManifest::load(manifest)?;
    for (name, path) in [
        ("source_image", &recorded.spec.source_image),
        ("source_layout", &recorded.spec.source_layout),
        ("target_layout", &recorded.spec.target_layout),
    ] {
        if recorded.inputs.get(name) != Some(&file_hash(path)?) {
            return Err(Error::Config(format!("{name} changed since the run ({})", path.display())));
        }
    }
    let mut spec = recorded.spec.clone();
    spec.output = output.to_path_buf();
    spec.debug_dir = None;
    spec.telemetry = None;
    let outcome = edit_layout(&spec, backends, &mut (), &CancelToken::default())?;
    let output_hash = outcome.manifest.output_hash;
    Ok(Replay {
        matches: output_hash == recorded.output_hash,
        manifest: recorded,
        output: output.to_path_buf(),
        output_hash,
    })
}
