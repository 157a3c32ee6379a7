//! Feature files, manifests, vocabulary and the synthetic corpus.

pub mod features;
pub mod manifest;
pub mod synthetic;
pub mod vocab;

use std::path::Path;

pub use features::{decode_features, encode_features, load_features, save_features};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRecord};
pub use synthetic::{gen_synthetic, synthesize, SyntheticConfig, SyntheticCorpus, SyntheticVideo};
pub use vocab::{build_vocab, encode_caption, tokenize, Vocabulary, BOS, EOS, UNK};

use crate::decoder::CaptionTokens;
use crate::encoder::FeatureSequence;
use crate::error::Result;

/// A video with its encoded caption, ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: FeatureSequence,
    pub caption: CaptionTokens,
    /// The caption as tokens, used as the evaluation reference.
    pub reference: Vec<String>,
    /// Ground-truth segment starts (1-based), when known.
    pub boundaries: Option<Vec<usize>>,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.features.id
    }
}

/// Loads every record of the manifest at `path` as a [`Sample`].
pub fn load_samples(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let manifest = read_manifest(path)?;
    manifest
        .records
        .iter()
        .map(|rec| {
            let features = manifest.load_video(rec)?;
            let reference = tokenize(&rec.caption);
            Ok(Sample {
                features,
                caption: encode_caption(vocab, &reference),
                reference,
                boundaries: rec.boundaries.clone(),
            })
        })
        .collect()
}
