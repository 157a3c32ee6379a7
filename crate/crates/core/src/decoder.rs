//! GRU language decoder conditioned on the video vector.

use serde::{Deserialize, Serialize};

use crate::cells::{
    gru_backward_in_context, gru_step_in_context, GruCache, GruContext, GruContextGrads, GruParams,
};
use crate::data::vocab::{BOS, EOS, UNK};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{glorot_init, param_set, Matrix, Rng, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub gru: GruParams,
    /// Word embedding, `word_dim x vocab`; column `k` embeds token `k`.
    pub w_w: Matrix,
    /// Output projection, `vocab x hidden`.
    pub w_p: Matrix,
}

param_set!(DecoderParams { gru, w_w, w_p });

impl DecoderParams {
    pub fn zeros(word_dim: usize, video_dim: usize, hidden_dim: usize, vocab: usize) -> Self {
        DecoderParams {
            gru: GruParams::zeros(word_dim, video_dim, hidden_dim),
            w_w: Matrix::zeros(word_dim, vocab),
            w_p: Matrix::zeros(vocab, hidden_dim),
        }
    }

    pub fn init(
        word_dim: usize,
        video_dim: usize,
        hidden_dim: usize,
        vocab: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(DecoderParams {
            gru: GruParams::init(word_dim, video_dim, hidden_dim, rng)?,
            w_w: glorot_init(word_dim, vocab, rng)?,
            w_p: glorot_init(vocab, hidden_dim, rng)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.w_p.rows()
    }

    fn validate(&self) -> Result<()> {
        check_dim("word embedding rows", self.w_w.rows(), self.gru.word_dim())?;
        check_dim("word embedding vocabulary", self.w_w.cols(), self.vocab_size())?;
        check_dim("output projection", self.w_p.cols(), self.gru.hidden_dim())
    }

    fn embed(&self, token: usize) -> Vector {
        self.w_w.column(token)
    }
}

/// Token ids of one caption, `BOS ... EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
}

impl CaptionTokens {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(Error::invalid(format!(
                "caption must start with BOS and end with EOS: {ids:?}"
            )));
        }
        Ok(CaptionTokens { ids })
    }

    /// Number of prediction steps `T`.
    pub fn steps(&self) -> usize {
        self.ids.len() - 1
    }

    /// Tokens between BOS and EOS.
    pub fn words(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }
}

fn logits(dp: &DecoderParams, p_t: &[f64]) -> Vector {
    dp.w_p.matvec(p_t)
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vector {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect::<Vec<_>>().into()
}

/// `softmax(W_p p_t)`
pub fn word_distribution(dp: &DecoderParams, p_t: &[f64]) -> Result<Vector> {
    check_dim("decoder output", p_t.len(), dp.w_p.cols())?;
    Ok(softmax(&logits(dp, p_t)))
}

#[derive(Clone, Debug)]
struct DecodeStep {
    gru: GruCache,
    p_t: Vector,
    probs: Vector,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    ctx: GruContext,
    tokens: Vec<usize>,
    steps: Vec<DecodeStep>,
}

/// Teacher-forced negative log-likelihood of `cap` given the video vector.
pub fn caption_loss(
    dp: &DecoderParams,
    v: &[f64],
    cap: &CaptionTokens,
) -> Result<(f64, DecoderCache)> {
    dp.validate()?;
    let vocab = dp.vocab_size();
    if let Some(bad) = cap.ids.iter().find(|&&k| k >= vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of size {vocab}"
        )));
    }
    let ctx = GruContext::new(&dp.gru, v)?;
    let mut p_prev = Vector::zeros(dp.gru.hidden_dim());
    let mut loss = 0.0;
    let mut steps = Vec::with_capacity(cap.steps());
    for w in cap.ids.windows(2) {
        let (prev_tok, gold) = (w[0], w[1]);
        let (p_t, gru) = gru_step_in_context(&dp.gru, &ctx, &dp.embed(prev_tok), &p_prev)?;
        let z = logits(dp, &p_t);
        let lse = log_sum_exp(&z);
        loss += lse - z[gold];
        let probs = z.iter().map(|v| (v - lse).exp()).collect::<Vec<_>>().into();
        steps.push(DecodeStep {
            gru,
            p_t: p_t.clone(),
            probs,
        });
        p_prev = p_t;
    }
    let cache = DecoderCache {
        ctx,
        tokens: cap.ids.clone(),
        steps,
    };
    Ok((loss, cache))
}

/// Gradients of [`caption_loss`], scaled by `scale`, into `grads`; returns
/// the gradient on the video vector.
pub fn decoder_backward(
    dp: &DecoderParams,
    cache: &DecoderCache,
    scale: f64,
    grads: &mut DecoderParams,
) -> Result<Vector> {
    check_dim("decoder cache", cache.steps.len() + 1, cache.tokens.len())?;
    let hidden = dp.gru.hidden_dim();
    let vocab = dp.vocab_size();
    let mut ctx_grads = GruContextGrads::zeros(hidden);
    let mut dp_next = Vector::zeros(hidden);
    for (t, step) in cache.steps.iter().enumerate().rev() {
        check_dim("decoder cache distribution", step.probs.dim(), vocab)?;
        let gold = cache.tokens[t + 1];
        let mut dz = step.probs.scaled(scale);
        dz[gold] -= scale;
        grads.w_p.add_outer(&dz, &step.p_t);
        let mut dpt = dp_next;
        dp.w_p.matvec_t_add(&dz, &mut dpt);
        let g = gru_backward_in_context(&dp.gru, &step.gru, &dpt, &mut grads.gru, &mut ctx_grads)?;
        let tok = cache.tokens[t];
        let cols = grads.w_w.cols();
        let data = grads.w_w.data_mut();
        for (i, d) in g.dy.iter().enumerate() {
            data[i * cols + tok] += d;
        }
        dp_next = g.dp_prev;
    }
    Ok(ctx_grads.finish(&dp.gru, &cache.ctx, &mut grads.gru))
}

fn argmax_unmasked(z: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (k, &v) in z.iter().enumerate() {
        if k == BOS || k == UNK {
            continue;
        }
        if best == usize::MAX || v > best_val {
            best = k;
            best_val = v;
        }
    }
    best
}

/// Greedy generation from BOS: feed back the argmax word until EOS or
/// `max_len` words. BOS and UNK are never generated; ties go to the lowest
/// index. A caption cut at `max_len` is closed with EOS.
pub fn greedy_decode(dp: &DecoderParams, v: &[f64], max_len: usize) -> Result<CaptionTokens> {
    dp.validate()?;
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if dp.vocab_size() <= EOS {
        return Err(Error::invalid("vocabulary has no EOS entry"));
    }
    let ctx = GruContext::new(&dp.gru, v)?;
    let mut p_prev = Vector::zeros(dp.gru.hidden_dim());
    let mut ids = vec![BOS];
    let mut prev = BOS;
    for _ in 0..max_len {
        let (p_t, _) = gru_step_in_context(&dp.gru, &ctx, &dp.embed(prev), &p_prev)?;
        let next = argmax_unmasked(&logits(dp, &p_t));
        ids.push(next);
        if next == EOS {
            return CaptionTokens::new(ids);
        }
        prev = next;
        p_prev = p_t;
    }
    ids.push(EOS);
    CaptionTokens::new(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(ids: &[usize]) -> CaptionTokens {
        CaptionTokens::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn caption_token_invariants() {
        assert!(CaptionTokens::new(vec![BOS]).is_err());
        assert!(CaptionTokens::new(vec![EOS, BOS]).is_err());
        let c = cap(&[BOS, 5, 6, EOS]);
        assert_eq!(c.steps(), 3);
        assert_eq!(c.words(), &[5, 6]);
    }

    #[test]
    fn distribution_cases() {
        let dp = DecoderParams::zeros(2, 2, 3, 5);
        let d = word_distribution(&dp, &[0.3, -1.0, 2.0]).unwrap();
        for p in d.iter() {
            assert!((p - 0.2).abs() < 1e-15);
        }

        let d = softmax(&[0.0, 3f64.ln()]);
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let z = [0.1, -2.0, 3.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.4).collect();
        let (a, b) = (softmax(&z), softmax(&shifted));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_is_t_ln2() {
        // vocabulary of two: BOS and EOS only
        let dp = DecoderParams::zeros(2, 2, 2, 2);
        let (loss, _) = caption_loss(&dp, &[1.0, -1.0], &cap(&[BOS, EOS, EOS, EOS])).unwrap();
        assert!((loss - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_prediction_has_zero_loss() {
        let mut dp = DecoderParams::zeros(1, 1, 1, 3);
        // make p_1 > 0 and give EOS a huge logit slope
        dp.gru.b_h[0] = 5.0;
        dp.gru.b_z[0] = 5.0;
        dp.w_p.set(EOS, 0, 1e4);
        let (loss, _) = caption_loss(&dp, &[0.0], &cap(&[BOS, EOS])).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "{loss}");
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let dp = DecoderParams::zeros(1, 1, 1, 3);
        assert!(caption_loss(&dp, &[0.0], &cap(&[BOS, 7, EOS])).is_err());
    }

    #[test]
    fn greedy_cases() {
        let mut dp = DecoderParams::zeros(1, 1, 1, 5);
        dp.gru.b_h[0] = 1.0;
        dp.gru.b_z[0] = 5.0;
        dp.w_p.set(EOS, 0, 10.0);
        assert_eq!(greedy_decode(&dp, &[0.0], 8).unwrap().ids, vec![BOS, EOS]);

        let mut dp = DecoderParams::zeros(1, 1, 1, 5);
        dp.gru.b_h[0] = 1.0;
        dp.gru.b_z[0] = 5.0;
        dp.w_p.set(4, 0, 10.0);
        // UNK would win if it were not masked
        dp.w_p.set(UNK, 0, 50.0);
        let out = greedy_decode(&dp, &[0.0], 3).unwrap();
        assert_eq!(out.ids, vec![BOS, 4, 4, 4, EOS]);
        assert_eq!(greedy_decode(&dp, &[0.0], 3).unwrap(), out);
        assert!(greedy_decode(&dp, &[0.0], 0).is_err());
    }

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax_unmasked(&[9.0, 1.0, 9.0, 1.0, 1.0]), EOS);
        assert_eq!(argmax_unmasked(&[0.0, 0.0, 0.0, 0.0]), EOS);
    }
}
