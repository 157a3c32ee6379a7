//! End-to-end training: forward and backward through the whole model,
//! dropout, Adadelta, and the epoch loop with early stopping.

mod adadelta;
pub mod checkpoint;
pub mod gradcheck;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adadelta::{Adadelta, DEFAULT_EPS, DEFAULT_LR, DEFAULT_RHO};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckMode, GradCheckReport};

use crate::data::{Sample, Vocabulary};
use crate::decoder::{caption_loss, decoder_backward, DecoderCache, DecoderParams};
use crate::encoder::{
    encode_with_dropout, encoder_backward, BoundaryMode, EncodeResult, EncoderCache, EncoderParams,
    FeatureSequence, Phase,
};
use crate::decoder::CaptionTokens;
use crate::error::{Error, Result};
use crate::numerics::{param_set, ParamSet, Rng, Vector};

/// Layer sizes of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub word_dim: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

param_set!(ModelParams { encoder, decoder });

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            encoder: EncoderParams::zeros(cfg.input_dim, cfg.embed_dim, cfg.hidden_dim),
            decoder: DecoderParams::zeros(cfg.word_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.vocab_size),
        }
    }

    /// Glorot input-side and embedding matrices, orthogonal state-side
    /// matrices, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(ModelParams {
            encoder: EncoderParams::init(cfg.input_dim, cfg.embed_dim, cfg.hidden_dim, rng)?,
            decoder: DecoderParams::init(
                cfg.word_dim,
                cfg.hidden_dim,
                cfg.hidden_dim,
                cfg.vocab_size,
                rng,
            )?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.encoder.input_dim(),
            embed_dim: self.encoder.embed_dim(),
            hidden_dim: self.encoder.hidden_dim(),
            word_dim: self.decoder.gru.word_dim(),
            vocab_size: self.decoder.vocab_size(),
        }
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `1 - retain`,
/// otherwise `1 / retain`.
pub fn dropout_mask(dim: usize, retain: f64, rng: &mut Rng) -> Vector {
    if retain >= 1.0 {
        return Vector::filled(dim, 1.0);
    }
    (0..dim)
        .map(|_| if rng.uniform() < retain { 1.0 / retain } else { 0.0 })
        .collect::<Vec<_>>()
        .into()
}

pub fn apply_dropout(x: &[f64], retain: f64, rng: &mut Rng, phase: Phase) -> Result<Vector> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(Error::invalid(format!("retain probability {retain} not in (0, 1]")));
    }
    Ok(match phase {
        Phase::Test => x.into(),
        Phase::Train => {
            let m = dropout_mask(x.len(), retain, rng);
            x.iter().zip(m.iter()).map(|(a, b)| a * b).collect::<Vec<_>>().into()
        }
    })
}

/// Caches from one forward pass through encoder and decoder.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub loss: f64,
    pub encoding: EncodeResult,
    encoder: EncoderCache,
    decoder: DecoderCache,
}

impl ForwardPass {
    pub fn decisions(&self) -> Vec<bool> {
        self.encoder.decisions()
    }
}

pub fn forward(
    params: &ModelParams,
    features: &FeatureSequence,
    caption: &CaptionTokens,
    mode: &BoundaryMode,
    rng: Option<&mut Rng>,
    retain: Option<f64>,
) -> Result<ForwardPass> {
    let (encoding, encoder) = encode_with_dropout(&params.encoder, features, mode, rng, retain)?;
    let (loss, decoder) = caption_loss(&params.decoder, &encoding.video_vector, caption)?;
    Ok(ForwardPass {
        loss,
        encoding,
        encoder,
        decoder,
    })
}

/// Gradient of `scale * pass.loss`, accumulated into `grads`.
pub fn model_backward(
    params: &ModelParams,
    features: &FeatureSequence,
    pass: &ForwardPass,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<()> {
    if grads.config() != params.config() {
        return Err(Error::invalid("gradient tree does not match the model"));
    }
    let dv = decoder_backward(&params.decoder, &pass.decoder, scale, &mut grads.decoder)?;
    encoder_backward(&params.encoder, features, &pass.encoder, &dv, &mut grads.encoder)
}

/// Which boundaries the encoder uses while training and evaluating.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum BoundaryPolicy {
    /// The learned detector.
    #[default]
    Learned,
    /// A fixed mode per video id, e.g. equal chunks or shot boundaries.
    PerVideo(BTreeMap<String, BoundaryMode>),
}

impl BoundaryPolicy {
    pub fn mode_for(&self, id: &str, phase: Phase) -> Result<BoundaryMode> {
        match self {
            BoundaryPolicy::Learned => Ok(BoundaryMode::Learned(phase)),
            BoundaryPolicy::PerVideo(map) => map
                .get(id)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no boundary mode for video {id:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout_retain: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub boundaries: BoundaryPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            dropout_retain: 0.5,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            boundaries: BoundaryPolicy::Learned,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.dropout_retain > 0.0 && self.dropout_retain <= 1.0) {
            return Err(Error::invalid(format!(
                "dropout retain {} not in (0, 1]",
                self.dropout_retain
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in log {
        let _ = writeln!(out, "{},{:.9},{:.9}", r.epoch, r.train_loss, r.val_loss);
    }
    out
}

/// Where [`train`] writes `best.ckpt`, `final.ckpt` and `epochs.csv`.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub vocab: &'a Vocabulary,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the initial ones if no
    /// epoch improved on them).
    pub best: ModelParams,
    pub last: ModelParams,
    pub optimizer: Adadelta<ModelParams>,
    pub log: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

/// Mean caption loss with deterministic boundaries and no dropout.
pub fn evaluate_loss(params: &ModelParams, samples: &[Sample], policy: &BoundaryPolicy) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let mut total = 0.0;
    for s in samples {
        let mode = policy.mode_for(s.id(), Phase::Test)?;
        let pass = forward(params, &s.features, &s.caption, &mode, None, None)?;
        if !pass.loss.is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite validation loss on sample {:?}",
                s.id()
            )));
        }
        total += pass.loss;
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss and mean gradient over `batch`, each sample processed on its own.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&Sample],
    policy: &BoundaryPolicy,
    retain: Option<f64>,
    rng: &mut Rng,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let mode = policy.mode_for(s.id(), Phase::Train)?;
        let pass = forward(params, &s.features, &s.caption, &mode, Some(rng), retain)?;
        if !pass.loss.is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite training loss on sample {:?}",
                s.id()
            )));
        }
        loss += pass.loss;
        model_backward(params, &s.features, &pass, scale, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shuffled mini-batch training with stochastic boundaries and dropout;
/// after every epoch the validation loss is measured deterministically and
/// training stops once it has not improved for more than `patience` epochs.
pub fn train(
    model: ModelParams,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainOutcome> {
    train_with_optimizer(model, cfg, train_set, val_set, sink, Adadelta::new)
}

/// [`train`] with a caller-built optimizer, e.g. non-default Adadelta
/// hyperparameters.
pub fn train_with_optimizer(
    model: ModelParams,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    sink: Option<CheckpointSink<'_>>,
    make_optimizer: impl FnOnce(&ModelParams) -> Adadelta<ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    let model_cfg = model.config();
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.features.dim() != model_cfg.input_dim) {
        return Err(Error::invalid(format!(
            "sample {:?} has feature dim {}, model expects {}",
            s.id(),
            s.features.dim(),
            model_cfg.input_dim
        )));
    }
    if let Some(sink) = sink {
        fs::create_dir_all(sink.dir).map_err(|e| Error::io(sink.dir, e))?;
    }

    let retain = (cfg.dropout_retain < 1.0).then_some(cfg.dropout_retain);
    let mut rng = Rng::new(cfg.seed);
    let mut params = model;
    let mut opt = make_optimizer(&params);
    let initial_val_loss = evaluate_loss(&params, val_set, &cfg.boundaries)?;
    let mut best = params.clone();
    let mut best_val_loss = initial_val_loss;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    if let Some(sink) = sink {
        let ck = Checkpoint::new(sink.vocab.clone(), best.clone(), None)?;
        ck.save(&sink.dir.join("best.ckpt"))?;
    }

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient(&params, &batch, &cfg.boundaries, retain, &mut rng)?;
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grads)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = evaluate_loss(&params, val_set, &cfg.boundaries)?;
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
            if let Some(sink) = sink {
                let ck = Checkpoint::new(sink.vocab.clone(), best.clone(), None)?;
                ck.save(&sink.dir.join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
        }
        if let Some(sink) = sink {
            write_file(&sink.dir.join("epochs.csv"), epoch_log_csv(&log).as_bytes())?;
        }
        if since_best > cfg.patience {
            break;
        }
    }

    if let Some(sink) = sink {
        let ck = Checkpoint::new(sink.vocab.clone(), params.clone(), Some(opt.clone()))?;
        ck.save(&sink.dir.join("final.ckpt"))?;
        write_file(&sink.dir.join("epochs.csv"), epoch_log_csv(&log).as_bytes())?;
    }
    Ok(TrainOutcome {
        best,
        last: params,
        optimizer: opt,
        log,
        initial_val_loss,
        best_val_loss,
        best_epoch,
    })
}
