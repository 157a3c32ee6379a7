use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use bacap::data::{
    build_vocab, gen_synthetic, load_features, load_samples, read_manifest, Sample,
    SyntheticConfig,
};
use bacap::decoder::greedy_decode;
use bacap::encoder::{
    boundary_statistics, encode, equal_chunk_starts, BoundaryMode, EncodeResult, FeatureSequence,
    Phase, POSITION_BINS,
};
use bacap::metrics::{bleu4, cider, match_boundaries, rouge_l, BoundaryMatch, EvalCorpus};
use bacap::numerics::Rng;
use bacap::training::{
    train, BoundaryPolicy, Checkpoint, CheckpointSink, ModelConfig, ModelParams, TrainConfig,
};

use crate::args::{
    BoundarySource, Command, EvalArgs, GenDataArgs, SegmentArgs, SegmentMode, StatsArgs, TrainArgs,
};
use crate::Failure;

type Outcome = Result<(), Failure>;

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Segment(a) => segment(&a),
        Command::Stats(a) => stats(&a),
    }
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
}

/// Logs the resolved configuration; with `dir`, also writes `config.json`.
fn echo<A: Serialize>(
    command: &str,
    seed: Option<u64>,
    args: &A,
    model: Option<ModelConfig>,
    dir: Option<&Path>,
) -> Outcome {
    let cfg = RunConfig {
        command,
        seed,
        args,
        model,
    };
    let line = serde_json::to_string(&cfg).expect("config serializes");
    eprintln!("config: {line}");
    if let Some(dir) = dir {
        let pretty = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
        write(&dir.join("config.json"), pretty.as_bytes())?;
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    let cfg = SyntheticConfig {
        n_prototypes: a.prototypes,
        feature_dim: a.dim,
        segments: (a.segments.0, a.segments.1),
        segment_len: (a.segment_len.0, a.segment_len.1),
        noise: a.noise,
        n_train: a.train,
        n_val: a.val,
        n_test: a.test,
        seed: a.seed.seed,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    echo("gen-data", Some(a.seed.seed), a, None, None)?;
    let paths = gen_synthetic(&cfg, &a.out)?;
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct BoundaryRecord {
    id: String,
    boundaries: Vec<usize>,
}

fn read_boundary_file(path: &Path) -> Result<HashMap<String, Vec<usize>>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("boundary file {}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoundaryRecord = serde_json::from_str(line)
            .map_err(|e| Failure::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.insert(rec.id, rec.boundaries);
    }
    Ok(out)
}

/// Resolves `--boundaries` against concrete videos.
struct Boundaries {
    source: BoundarySource,
    file: HashMap<String, Vec<usize>>,
}

impl Boundaries {
    fn new(source: &BoundarySource) -> Result<Self, Failure> {
        let file = match source {
            BoundarySource::File(p) => read_boundary_file(p)?,
            _ => HashMap::new(),
        };
        Ok(Boundaries {
            source: source.clone(),
            file,
        })
    }

    fn mode(&self, f: &FeatureSequence, phase: Phase) -> Result<BoundaryMode, Failure> {
        let n = f.len();
        Ok(match &self.source {
            BoundarySource::Learned => BoundaryMode::Learned(phase),
            BoundarySource::Equal(m) => {
                BoundaryMode::from_starts(n, &equal_chunk_starts(n, *m)?)?
            }
            BoundarySource::File(p) => {
                let starts = self.file.get(&f.id).ok_or_else(|| {
                    Failure::Data(format!("{} has no boundaries for video {:?}", p.display(), f.id))
                })?;
                BoundaryMode::from_starts(n, starts)?
            }
        })
    }

    fn policy(&self, samples: &[&Sample]) -> Result<BoundaryPolicy, Failure> {
        if self.source == BoundarySource::Learned {
            return Ok(BoundaryPolicy::Learned);
        }
        let mut map = BTreeMap::new();
        for s in samples {
            map.insert(s.id().to_string(), self.mode(&s.features, Phase::Test)?);
        }
        Ok(BoundaryPolicy::PerVideo(map))
    }
}

fn train_cmd(a: &TrainArgs) -> Outcome {
    let train_path = a.data.join("train.jsonl");
    let val_path = a.data.join("val.jsonl");
    require_file(&train_path, "training manifest")?;
    require_file(&val_path, "validation manifest")?;
    if !(a.dropout_retain > 0.0 && a.dropout_retain <= 1.0) {
        return Err(Failure::Usage(format!(
            "--dropout-retain must be in (0, 1], got {}",
            a.dropout_retain
        )));
    }
    if a.batch_size == 0 || a.embed_dim == 0 || a.hidden_dim == 0 || a.word_dim == Some(0) {
        return Err(Failure::Usage("sizes must be positive".into()));
    }

    let manifest = read_manifest(&train_path)?;
    let captions: Vec<&str> = manifest.records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = build_vocab(&captions, a.min_count)?;
    let train_set = load_samples(&train_path, &vocab)?;
    let val_set = load_samples(&val_path, &vocab)?;
    let input_dim = train_set
        .first()
        .map(|s| s.features.dim())
        .ok_or_else(|| Failure::Data(format!("{} is empty", train_path.display())))?;

    let model_cfg = ModelConfig {
        input_dim,
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
        word_dim: a.word_dim.unwrap_or(a.embed_dim),
        vocab_size: vocab.len(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    echo("train", Some(a.seed.seed), a, Some(model_cfg), Some(&a.out))?;

    let boundaries = Boundaries::new(&a.boundaries)?;
    let all: Vec<&Sample> = train_set.iter().chain(&val_set).collect();
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        dropout_retain: a.dropout_retain,
        max_epochs: a.max_epochs,
        patience: a.patience,
        seed: a.seed.seed,
        boundaries: boundaries.policy(&all)?,
    };
    let model = ModelParams::init(&model_cfg, &mut Rng::new(a.seed.seed).derive(1))?;
    eprintln!(
        "training on {} videos, validating on {}, vocabulary {} tokens",
        train_set.len(),
        val_set.len(),
        vocab.len()
    );
    let sink = CheckpointSink {
        dir: &a.out,
        vocab: &vocab,
    };
    let run = train(model, &cfg, &train_set, &val_set, Some(sink))?;
    eprintln!(
        "{} epochs; best validation loss {:.6} at epoch {} (initial {:.6})",
        run.log.len(),
        run.best_val_loss,
        run.best_epoch,
        run.initial_val_loss
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

#[derive(Serialize)]
struct CaptionRecord<'a> {
    id: &'a str,
    caption: String,
    reference: String,
    boundaries: &'a [usize],
}

fn eval(a: &EvalArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    require_file(&a.manifest, "manifest")?;
    if a.max_len == 0 {
        return Err(Failure::Usage("--max-len must be at least 1".into()));
    }
    echo("eval", None, a, Some(ck.config()), Some(&a.out))?;
    let samples = load_samples(&a.manifest, &ck.vocab)?;
    let boundaries = Boundaries::new(&a.boundaries)?;

    let mut candidates = BTreeMap::new();
    let mut references = BTreeMap::new();
    let mut captions = Vec::new();
    let mut matched = BoundaryMatch::default();
    let mut have_truth = !samples.is_empty();
    for s in &samples {
        let mode = boundaries.mode(&s.features, Phase::Test)?;
        let (enc, _) = encode(&ck.params.encoder, &s.features, &mode, None)?;
        let cap = greedy_decode(&ck.params.decoder, &enc.video_vector, a.max_len)?;
        let words = ck.vocab.decode(&cap);
        match &s.boundaries {
            Some(truth) => matched.add(match_boundaries(&enc.boundaries, truth, a.tolerance)),
            None => have_truth = false,
        }
        captions.push((s.id().to_string(), words.join(" "), s.reference.join(" "), enc.boundaries));
        candidates.insert(s.id().to_string(), words);
        references.insert(s.id().to_string(), vec![s.reference.clone()]);
    }
    let corpus = EvalCorpus::new(candidates, references)?;

    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "bleu4,{}", bleu4(&corpus)?.score);
    let rouge = rouge_l(&corpus)?;
    let _ = writeln!(csv, "rouge_l,{}", rouge.score);
    if !rouge.empty_candidates.is_empty() {
        eprintln!("warning: {} empty captions scored 0", rouge.empty_candidates.len());
    }
    if corpus.len() >= 2 {
        let _ = writeln!(csv, "cider,{}", cider(&corpus)?.score);
    } else {
        eprintln!("warning: CIDEr needs at least two videos; skipped");
    }
    if have_truth {
        let _ = writeln!(csv, "boundary_precision,{}", matched.precision());
        let _ = writeln!(csv, "boundary_recall,{}", matched.recall());
        let _ = writeln!(csv, "boundary_f1,{}", matched.f1());
    }
    write(&a.out.join("metrics.csv"), csv.as_bytes())?;

    let mut lines = Vec::new();
    for (id, caption, reference, b) in &captions {
        let rec = CaptionRecord {
            id,
            caption: caption.clone(),
            reference: reference.clone(),
            boundaries: b,
        };
        serde_json::to_writer(&mut lines, &rec).expect("record serializes");
        lines.push(b'\n');
    }
    write(&a.out.join("captions.jsonl"), &lines)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct SegmentRecord<'a> {
    id: &'a str,
    n: usize,
    boundaries: &'a [usize],
    segment_lengths: Vec<usize>,
    summaries: &'a [bacap::numerics::Vector],
}

fn videos_for(video: Option<&Path>, manifest: Option<&Path>) -> Result<Vec<FeatureSequence>, Failure> {
    match (video, manifest) {
        (Some(v), _) => {
            require_file(v, "feature file")?;
            Ok(vec![load_features(v)?])
        }
        (None, Some(m)) => {
            require_file(m, "manifest")?;
            let man = read_manifest(m)?;
            man.records
                .iter()
                .map(|r| man.load_video(r).map_err(Failure::from))
                .collect()
        }
        (None, None) => Err(Failure::Usage("give --video or --manifest".into())),
    }
}

fn encode_all(
    ck: &Checkpoint,
    videos: &[FeatureSequence],
    boundaries: &Boundaries,
    phase: Phase,
    seed: u64,
) -> Result<Vec<EncodeResult>, Failure> {
    let mut rng = Rng::new(seed);
    videos
        .iter()
        .map(|f| {
            let mode = boundaries.mode(f, phase)?;
            let r = if mode == BoundaryMode::Learned(Phase::Train) {
                Some(&mut rng)
            } else {
                None
            };
            Ok(encode(&ck.params.encoder, f, &mode, r)?.0)
        })
        .collect()
}

fn segment(a: &SegmentArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let videos = videos_for(a.video.as_deref(), a.manifest.as_deref())?;
    let seed = (a.mode == SegmentMode::Train).then_some(a.seed.seed);
    echo("segment", seed, a, Some(ck.config()), None)?;
    let phase = match a.mode {
        SegmentMode::Test => Phase::Test,
        SegmentMode::Train => Phase::Train,
    };
    let boundaries = Boundaries::new(&a.boundaries)?;
    let results = encode_all(&ck, &videos, &boundaries, phase, a.seed.seed)?;
    let mut out = Vec::new();
    for (f, r) in videos.iter().zip(&results) {
        let rec = SegmentRecord {
            id: &f.id,
            n: r.n,
            boundaries: &r.boundaries,
            segment_lengths: r.segment_lengths(),
            summaries: &r.summaries,
        };
        serde_json::to_writer(&mut out, &rec).expect("record serializes");
        out.push(b'\n');
    }
    match &a.out {
        Some(p) => write(p, &out),
        None => std::io::stdout()
            .write_all(&out)
            .map_err(|e| Failure::Data(format!("stdout: {e}"))),
    }
}

fn stats(a: &StatsArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let videos = videos_for(None, Some(&a.manifest))?;
    echo("stats", None, a, Some(ck.config()), Some(&a.out))?;
    let boundaries = Boundaries::new(&a.boundaries)?;
    let results = encode_all(&ck, &videos, &boundaries, Phase::Test, 0)?;
    let st = boundary_statistics(&results)?;

    let mut counts = String::from("boundaries,videos\n");
    for (k, c) in st.count_histogram.iter().enumerate() {
        let _ = writeln!(counts, "{k},{c}");
    }
    let mut positions = String::from("bin,position,count\n");
    for (i, c) in st.position_histogram.iter().enumerate() {
        let _ = writeln!(positions, "{i},{:.2},{c}", i as f64 / POSITION_BINS as f64);
    }
    write(&a.out.join("counts.csv"), counts.as_bytes())?;
    write(&a.out.join("positions.csv"), positions.as_bytes())?;
    eprintln!("{} videos, {} boundaries", results.len(), st.position_histogram.iter().sum::<usize>());
    Ok(())
}
