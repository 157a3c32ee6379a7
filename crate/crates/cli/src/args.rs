use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "bacap", version, about = "Boundary-aware video captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic segment-structured corpus.
    GenData(GenDataArgs),
    /// Train a captioning model on `train.jsonl` / `val.jsonl`.
    Train(TrainArgs),
    /// Caption a manifest and score the captions.
    Eval(EvalArgs),
    /// Print the segments the encoder finds in a video.
    Segment(SegmentArgs),
    /// Boundary count and position histograms over a manifest.
    Stats(StatsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SeedArg {
    /// Random seed; falls back to BACAP_SEED, then 0.
    #[arg(long, env = "BACAP_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 16)]
    pub prototypes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Segments per video, `lo..hi` inclusive.
    #[arg(long, default_value = "2..4")]
    pub segments: Range,
    /// Frames per segment, `lo..hi` inclusive.
    #[arg(long, default_value = "4..8")]
    pub segment_len: Range,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory holding `train.jsonl` and `val.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, the epoch log and the config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 512)]
    pub embed_dim: usize,
    /// Word embedding size; defaults to `--embed-dim`.
    #[arg(long)]
    pub word_dim: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout_retain: f64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Words seen fewer times than this in the training captions become `<unk>`.
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long, default_value = "learned")]
    pub boundaries: BoundarySource,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `metrics.csv` and `captions.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "learned")]
    pub boundaries: BoundarySource,
    /// Longest caption generated, in words.
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Tolerance in frames when matching detected to reference boundaries.
    #[arg(long, default_value_t = 2)]
    pub tolerance: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentMode {
    Test,
    Train,
}

#[derive(Debug, Args, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single feature file.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub video: Option<PathBuf>,
    /// Every video of a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SegmentMode::Test)]
    pub mode: SegmentMode,
    #[arg(long, default_value = "learned")]
    pub boundaries: BoundarySource,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Write the JSON lines here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `counts.csv` and `positions.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "learned")]
    pub boundaries: BoundarySource,
}

/// Inclusive range written `lo..hi` (or a single number).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Range(pub usize, pub usize);

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
        match s.split_once("..") {
            Some((lo, hi)) => Ok(Range(parse(lo)?, parse(hi.trim_start_matches('='))?)),
            None => {
                let v = parse(s)?;
                Ok(Range(v, v))
            }
        }
    }
}

/// Where segment boundaries come from: `learned`, `equal:<m>` or
/// `file:<path>` (JSON lines with `id` and `boundaries`, as written by
/// `segment`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub enum BoundarySource {
    Learned,
    Equal(usize),
    File(PathBuf),
}

impl From<BoundarySource> for String {
    fn from(b: BoundarySource) -> String {
        match b {
            BoundarySource::Learned => "learned".into(),
            BoundarySource::Equal(m) => format!("equal:{m}"),
            BoundarySource::File(p) => format!("file:{}", p.display()),
        }
    }
}

impl FromStr for BoundarySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "learned" {
            return Ok(BoundarySource::Learned);
        }
        if let Some(m) = s.strip_prefix("equal:") {
            let m: usize = m.parse().map_err(|e| format!("equal:<m>: {e}"))?;
            if m == 0 {
                return Err("equal:<m> needs m >= 1".into());
            }
            return Ok(BoundarySource::Equal(m));
        }
        if let Some(p) = s.strip_prefix("file:") {
            if p.is_empty() {
                return Err("file:<path> needs a path".into());
            }
            return Ok(BoundarySource::File(PathBuf::from(p)));
        }
        Err(format!("expected learned, equal:<m> or file:<path>, got {s:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_boundary_sources() {
        assert_eq!("learned".parse(), Ok(BoundarySource::Learned));
        assert_eq!("equal:3".parse(), Ok(BoundarySource::Equal(3)));
        assert_eq!("file:a/b.jsonl".parse(), Ok(BoundarySource::File("a/b.jsonl".into())));
        for bad in ["equal:0", "equal:x", "file:", "shots"] {
            assert!(bad.parse::<BoundarySource>().is_err(), "{bad}");
        }
    }

    #[test]
    fn parse_ranges() {
        assert_eq!("2..4".parse(), Ok(Range(2, 4)));
        assert_eq!("2..=4".parse(), Ok(Range(2, 4)));
        assert_eq!("7".parse(), Ok(Range(7, 7)));
        assert!("a..4".parse::<Range>().is_err());
    }
}
