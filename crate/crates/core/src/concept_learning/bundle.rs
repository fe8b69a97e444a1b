use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Concept, ConceptBundle, ConceptConfig, TrainingRecord};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RLEMB\0\0\x01";
const FORMAT: u32 = 1;

const EMBEDDINGS: &str = "embeddings.bin";
const WEIGHTS: &str = "weights.bin";
const STAGE1: &str = "stage1_loss.csv";
const STAGE2: &str = "stage2_loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: u32,
    pub backend_id: String,
    pub concepts: Vec<Concept>,
    pub config: ConceptConfig,
    pub stage2_groups: Vec<String>,
    pub embedding_dim: usize,
    /// SHA-256 of every other file in the bundle directory.
    pub files: IndexMap<String, String>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_embeddings(rows: &[&Array1<f64>]) -> Result<Vec<u8>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Bundle("embeddings have different lengths".into()));
    }
    let mut out = Vec::with_capacity(16 + rows.len() * cols * 8);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(rows.len() as u32).expect("vec write");
    out.write_u32::<LittleEndian>(cols as u32).expect("vec write");
    for r in rows {
        for &v in r.iter() {
            out.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }
    Ok(out)
}

fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Array1<f64>>> {
    let bad = |m: &str| Error::Bundle(format!("{EMBEDDINGS}: {m}"));
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let rows = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let cols = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    if bytes.len() != 16 + rows * cols * 8 {
        return Err(bad("size does not match header"));
    }
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| cur.read_f64::<LittleEndian>().map_err(|_| bad("truncated")))
                .collect::<Result<Vec<f64>>>()
                .map(Array1::from)
        })
        .collect()
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn parse_losses(text: &str, name: &str) -> Result<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Bundle(format!("{name}: malformed row `{l}`")))
        })
        .collect()
}

/// Write `bundle` into directory `dir`, creating it if needed.
pub fn save_bundle(bundle: &ConceptBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        (
            EMBEDDINGS,
            encode_embeddings(&bundle.concepts.iter().map(|c| &c.embedding).collect::<Vec<_>>())?,
        ),
        (STAGE1, losses_csv(&bundle.training.stage1_losses).into_bytes()),
        (STAGE2, losses_csv(&bundle.training.stage2_losses).into_bytes()),
    ];
    if let Some(w) = &bundle.weights {
        files.push((WEIGHTS, w.clone()));
    }
    let mut hashes = IndexMap::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        hashes.insert(name.to_string(), sha_hex(bytes));
    }
    let manifest = BundleManifest {
        format: FORMAT,
        backend_id: bundle.backend_id.clone(),
        concepts: bundle.concepts.clone(),
        config: bundle.training.config.clone(),
        stage2_groups: bundle.training.stage2_groups.clone(),
        embedding_dim: bundle.concepts.first().map_or(0, |c| c.embedding.len()),
        files: hashes,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))
}

/// Read a bundle back, checking file hashes and, if given, the backend id.
pub fn load_bundle(dir: &Path, backend_id: Option<&str>) -> Result<ConceptBundle> {
    let path = dir.join("manifest.json");
    let manifest: BundleManifest =
        serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
            .map_err(|e| Error::Bundle(format!("manifest.json: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Bundle(format!("unsupported bundle format {}", manifest.format)));
    }
    if let Some(id) = backend_id {
        if id != manifest.backend_id {
            return Err(Error::BackendMismatch {
                expected: manifest.backend_id,
                actual: id.to_string(),
            });
        }
    }
    let read = |name: &str| -> Result<Vec<u8>> {
        let expected = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::Bundle(format!("manifest does not list {name}")))?;
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &sha_hex(&bytes) != expected {
            return Err(Error::Bundle(format!("{name} does not match its manifest hash")));
        }
        Ok(bytes)
    };
    let embeddings = decode_embeddings(&read(EMBEDDINGS)?)?;
    if embeddings.len() != manifest.concepts.len()
        || embeddings.iter().any(|e| e.len() != manifest.embedding_dim)
    {
        return Err(Error::Bundle("embedding table does not match the concept list".into()));
    }
    let stage1 = parse_losses(&String::from_utf8_lossy(&read(STAGE1)?), STAGE1)?;
    let stage2 = parse_losses(&String::from_utf8_lossy(&read(STAGE2)?), STAGE2)?;
    let weights = if manifest.files.contains_key(WEIGHTS) {
        Some(read(WEIGHTS)?)
    } else {
        None
    };
    let concepts = manifest
        .concepts
        .into_iter()
        .zip(embeddings)
        .map(|(c, embedding)| Concept { embedding, ..c })
        .collect();
    Ok(ConceptBundle {
        backend_id: manifest.backend_id,
        concepts,
        weights,
        training: TrainingRecord {
            config: manifest.config,
            stage2_groups: manifest.stage2_groups,
            stage1_losses: stage1,
            stage2_losses: stage2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ConceptBundle {
        ConceptBundle {
            backend_id: "toy".into(),
            concepts: vec![
                Concept {
                    object_id: "a".into(),
                    token: "<a>".into(),
                    noun: "cat".into(),
                    embedding: Array1::from(vec![0.1, -2.5, 1.0 / 3.0]),
                },
                Concept {
                    object_id: "b".into(),
                    token: "<b>".into(),
                    noun: "pot".into(),
                    embedding: Array1::from(vec![f64::MIN_POSITIVE, 7.0, -0.0]),
                },
            ],
            weights: Some(b"opaque".to_vec()),
            training: TrainingRecord {
                stage1_losses: vec![0.5, 0.1 + 0.2],
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample();
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path(), Some("toy")).unwrap(), b);
    }

    #[test]
    fn tampering_and_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&sample(), dir.path()).unwrap();
        assert!(matches!(
            load_bundle(dir.path(), Some("other")),
            Err(Error::BackendMismatch { .. })
        ));
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap();
        let hash = sha_hex(&fs::read(dir.path().join(EMBEDDINGS)).unwrap());
        fs::write(&p, text.replace(&hash, &"0".repeat(64))).unwrap();
        assert!(matches!(load_bundle(dir.path(), None), Err(Error::Bundle(_))));
    }
}
