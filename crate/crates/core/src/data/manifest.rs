//! JSON-lines manifests: one record per video.
//!
//! ```text
//! {"id":"train_0000","feature_path":"train/train_0000.bafv","n_frames":16,"dim":32,"caption":"walk then run","boundaries":[9]}
//! ```
//!
//! `feature_path` is resolved against the manifest's directory when relative.
//! `boundaries` (1-based segment starts) is optional.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};

use super::features::load_features;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub feature_path: String,
    pub n_frames: usize,
    pub dim: usize,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        let p = Path::new(&rec.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    /// Loads the record's features, checking them against the declared shape.
    pub fn load_video(&self, rec: &ManifestRecord) -> Result<FeatureSequence> {
        let path = self.resolve(rec);
        let mut f = load_features(&path)?;
        if f.len() != rec.n_frames || f.dim() != rec.dim {
            return Err(Error::Format {
                path,
                offset: 8,
                message: format!(
                    "manifest declares {}x{} for {:?}, file holds {}x{}",
                    rec.n_frames,
                    rec.dim,
                    rec.id,
                    f.len(),
                    f.dim()
                ),
            });
        }
        f.id = rec.id.clone();
        Ok(f)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate id {:?}", rec.id)));
        }
        if let Some(b) = &rec.boundaries {
            if b.windows(2).any(|w| w[0] >= w[1]) || b.iter().any(|&t| t == 0 || t > rec.n_frames) {
                return Err(bad(format!("boundaries {b:?} not increasing within 1..={}", rec.n_frames)));
            }
        }
        records.push(rec);
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        records,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest records serialize");
        out.write_all(b"\n").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
