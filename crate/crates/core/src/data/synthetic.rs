//! Segment-structured synthetic videos.
//!
//! A fixed set of unit-norm prototype vectors stands for actions. A video
//! is 2..k segments; each segment repeats one prototype plus Gaussian noise
//! for a drawn number of frames, and consecutive segments never share a
//! prototype. The caption names the prototypes in order, joined by "then".

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{dot, Rng, Vector};

use super::features::save_features;
use super::manifest::{write_manifest, ManifestRecord};

const ACTION_NAMES: [&str; 32] = [
    "walk", "run", "jump", "sit", "stand", "wave", "clap", "turn", "push", "pull", "climb",
    "swim", "throw", "catch", "kick", "dance", "open", "close", "lift", "drop", "cook", "read",
    "write", "eat", "drink", "sleep", "laugh", "cry", "sing", "draw", "paint", "drive",
];

/// Caption word for prototype `k`.
pub fn action_name(k: usize) -> String {
    ACTION_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("action{k}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_prototypes: usize,
    pub feature_dim: usize,
    /// Inclusive range of segments per video.
    pub segments: (usize, usize),
    /// Inclusive range of frames per segment.
    pub segment_len: (usize, usize),
    pub noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_prototypes: 16,
            feature_dim: 32,
            segments: (2, 4),
            segment_len: (4, 8),
            noise: 0.1,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !range_ok(self.segments) || !range_ok(self.segment_len) {
            return Err(Error::invalid(format!(
                "empty range in segments {:?} or segment_len {:?}",
                self.segments, self.segment_len
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.feature_dim == 0 || self.n_prototypes == 0 {
            return Err(Error::invalid("feature_dim and n_prototypes must be positive"));
        }
        if self.segments.1 > 1 && self.n_prototypes < 2 {
            return Err(Error::invalid(
                "multi-segment videos need at least two prototypes",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub features: FeatureSequence,
    pub caption: String,
    /// 1-based first frames of segments 2..k.
    pub boundaries: Vec<usize>,
    pub prototypes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub prototypes: Vec<Vector>,
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

fn draw_prototypes(cfg: &SyntheticConfig, rng: &mut Rng) -> Vec<Vector> {
    (0..cfg.n_prototypes)
        .map(|_| loop {
            let v: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.normal()).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| x / norm).collect::<Vec<_>>().into();
            }
        })
        .collect()
}

/// Builds one video from explicit prototype ids and segment lengths.
pub fn compose_video(
    id: impl Into<String>,
    prototypes: &[Vector],
    order: &[usize],
    lengths: &[usize],
    noise: f64,
    rng: &mut Rng,
) -> Result<SyntheticVideo> {
    if order.len() != lengths.len() || order.is_empty() {
        return Err(Error::invalid("need one length per segment"));
    }
    let mut frames = Vec::new();
    let mut boundaries = Vec::new();
    for (k, (&proto, &len)) in order.iter().zip(lengths).enumerate() {
        let base = prototypes
            .get(proto)
            .ok_or_else(|| Error::invalid(format!("no prototype {proto}")))?;
        if k > 0 {
            boundaries.push(frames.len() + 1);
        }
        for _ in 0..len {
            frames.push(
                base.iter()
                    .map(|b| b + noise * rng.normal())
                    .collect::<Vec<_>>()
                    .into(),
            );
        }
    }
    let caption = order
        .iter()
        .map(|&k| action_name(k))
        .collect::<Vec<_>>()
        .join(" then ");
    Ok(SyntheticVideo {
        features: FeatureSequence::new(id, frames)?,
        caption,
        boundaries,
        prototypes: order.to_vec(),
    })
}

fn draw_split(
    cfg: &SyntheticConfig,
    prototypes: &[Vector],
    split: &str,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<SyntheticVideo>> {
    (0..count)
        .map(|i| {
            let k = rng.range_inclusive(cfg.segments.0, cfg.segments.1);
            let mut order = Vec::with_capacity(k);
            for s in 0..k {
                let p = if s == 0 {
                    rng.range_inclusive(0, cfg.n_prototypes - 1)
                } else {
                    // uniform over the prototypes other than the previous one
                    let prev = order[s - 1];
                    let r = rng.range_inclusive(0, cfg.n_prototypes - 2);
                    if r >= prev {
                        r + 1
                    } else {
                        r
                    }
                };
                order.push(p);
            }
            let lengths: Vec<usize> = (0..k)
                .map(|_| rng.range_inclusive(cfg.segment_len.0, cfg.segment_len.1))
                .collect();
            compose_video(format!("{split}_{i:04}"), prototypes, &order, &lengths, cfg.noise, rng)
        })
        .collect()
}

/// Draws the whole corpus in memory. Each split uses its own stream so
/// split sizes do not perturb one another.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let prototypes = draw_prototypes(cfg, &mut root.derive(0));
    let train = draw_split(cfg, &prototypes, "train", cfg.n_train, &mut root.derive(1))?;
    let val = draw_split(cfg, &prototypes, "val", cfg.n_val, &mut root.derive(2))?;
    let test = draw_split(cfg, &prototypes, "test", cfg.n_test, &mut root.derive(3))?;
    Ok(SyntheticCorpus {
        prototypes,
        train,
        val,
        test,
    })
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl`, one feature file per
/// video under `<split>/`, and the generating config as `synthetic.json`.
/// Returns the manifest paths in that order.
pub fn gen_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<[PathBuf; 3]> {
    let corpus = synthesize(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::new();
    for (split, videos) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let mut records = Vec::with_capacity(videos.len());
        for v in videos {
            let rel = format!("{split}/{}.bafv", v.features.id);
            save_features(&out.join(&rel), &v.features)?;
            records.push(ManifestRecord {
                id: v.features.id.clone(),
                feature_path: rel,
                n_frames: v.features.len(),
                dim: v.features.dim(),
                caption: v.caption.clone(),
                boundaries: Some(v.boundaries.clone()),
            });
        }
        let path = out.join(format!("{split}.jsonl"));
        write_manifest(&path, &records)?;
        paths.push(path);
    }
    let cfg_path = out.join("synthetic.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(paths.try_into().expect("three splits"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn noiseless_single_segment() {
        let protos = draw_prototypes(&SyntheticConfig::default(), &mut Rng::new(1));
        let v = compose_video("a", &protos, &[3], &[6], 0.0, &mut Rng::new(2)).unwrap();
        assert!(v.boundaries.is_empty());
        assert!(v.features.frames.iter().all(|f| *f == v.features.frames[0]));
        assert_eq!(v.caption, "sit");
    }

    #[test]
    fn cumulative_boundaries() {
        let protos = draw_prototypes(&SyntheticConfig::default(), &mut Rng::new(1));
        let v = compose_video("a", &protos, &[0, 1, 2], &[5, 7, 4], 0.1, &mut Rng::new(2)).unwrap();
        assert_eq!(v.boundaries, vec![6, 13]);
        assert_eq!(v.features.len(), 16);
        assert_eq!(v.caption, "walk then run then jump");
    }

    #[test]
    fn prototypes_unit_norm() {
        for p in draw_prototypes(&SyntheticConfig::default(), &mut Rng::new(4)) {
            assert!((dot(&p, &p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_structure() {
        let cfg = SyntheticConfig {
            n_train: 40,
            n_val: 5,
            n_test: 5,
            ..Default::default()
        };
        let c = synthesize(&cfg).unwrap();
        for v in c.train.iter().chain(&c.val).chain(&c.test) {
            let k = v.prototypes.len();
            assert!((2..=4).contains(&k));
            assert_eq!(v.boundaries.len() + 1, k);
            let action_words = tokenize(&v.caption).into_iter().filter(|w| w != "then").count();
            assert_eq!(action_words, k);
            assert!(v.prototypes.windows(2).all(|w| w[0] != w[1]));
            assert!(v.boundaries.windows(2).all(|w| w[0] < w[1]));
            assert!(v.boundaries.iter().all(|&b| b > 1 && b <= v.features.len()));
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SyntheticConfig { segments: (3, 2), ..Default::default() },
            SyntheticConfig { segment_len: (0, 2), ..Default::default() },
            SyntheticConfig { noise: -1.0, ..Default::default() },
            SyntheticConfig { n_prototypes: 1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(synthesize(&cfg).is_err());
        }
    }

    #[test]
    fn seeded_files_are_identical() {
        let cfg = SyntheticConfig {
            n_train: 3,
            n_val: 2,
            n_test: 2,
            seed: 9,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_synthetic(&cfg, a.path()).unwrap();
        gen_synthetic(&cfg, b.path()).unwrap();
        for rel in ["train.jsonl", "val.jsonl", "test/test_0001.bafv", "train/train_0002.bafv"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
}
