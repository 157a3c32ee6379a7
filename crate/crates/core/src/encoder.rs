//! Hierarchical video encoder.
//!
//! Frames are linearly embedded, run through the boundary-aware LSTM, and
//! every time the detector fires the state reached just before the cut is
//! emitted as a segment summary. The final state is always emitted as the
//! closing summary. A plain LSTM reads the summaries and its last hidden
//! state is the video vector.

use serde::{Deserialize, Serialize};

use crate::cells::{
    boundary_backward, boundary_lstm_step, lstm_backward, lstm_step, BoundaryCache, BoundaryParams,
    BoundaryState, LstmCache, LstmParams, StepMode,
};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{axpy, dot, glorot_init, param_set, Matrix, Rng, Vector};
use crate::training::dropout_mask;

/// One video as an ordered list of per-timestep feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Vec<Vector>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Vector>) -> Result<Self> {
        let id = id.into();
        let Some(first) = frames.first() else {
            return Err(Error::invalid(format!("video {id:?} has no frames")));
        };
        let dim = first.dim();
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::invalid(format!(
                    "video {id:?} frame {t} has dimension {}, expected {dim}",
                    f.dim()
                )));
            }
            if !f.is_finite() {
                return Err(Error::invalid(format!(
                    "video {id:?} frame {t} has non-finite values"
                )));
            }
        }
        Ok(FeatureSequence { id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w_embed: Matrix,
    pub b_embed: Vector,
    pub layer1: LstmParams,
    pub boundary: BoundaryParams,
    pub layer2: LstmParams,
}

param_set!(EncoderParams { w_embed, b_embed, layer1, boundary, layer2 });

impl EncoderParams {
    pub fn zeros(input_dim: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        EncoderParams {
            w_embed: Matrix::zeros(embed_dim, input_dim),
            b_embed: Vector::zeros(embed_dim),
            layer1: LstmParams::zeros(embed_dim, hidden_dim),
            boundary: BoundaryParams::zeros(embed_dim, hidden_dim),
            layer2: LstmParams::zeros(hidden_dim, hidden_dim),
        }
    }

    pub fn init(input_dim: usize, embed_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderParams {
            w_embed: glorot_init(embed_dim, input_dim, rng)?,
            b_embed: Vector::zeros(embed_dim),
            layer1: LstmParams::init(embed_dim, hidden_dim, rng)?,
            boundary: BoundaryParams::init(embed_dim, hidden_dim, rng)?,
            layer2: LstmParams::init(hidden_dim, hidden_dim, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_embed.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_embed.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer2.hidden_dim()
    }

    fn validate(&self) -> Result<()> {
        check_dim("embedding bias", self.b_embed.dim(), self.embed_dim())?;
        check_dim("layer 1 input", self.layer1.input_dim(), self.embed_dim())?;
        check_dim("layer 2 input", self.layer2.input_dim(), self.layer1.hidden_dim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Test,
}

/// Where segment boundaries come from.
#[derive(Clone, Debug, PartialEq)]
pub enum BoundaryMode {
    /// The learned detector: sampled in `Train`, thresholded in `Test`.
    Learned(Phase),
    /// One decision per timestep, supplied from outside.
    Forced(Vec<bool>),
    /// `m` segments of near-equal length.
    EqualChunks(usize),
    /// Continuous relaxation used only for gradient checking: the reset
    /// is scaled by `1 - sigmoid(a)` and every step emits `sigmoid(a) * h`.
    Relaxed,
}

impl BoundaryMode {
    /// Per-step decisions with a boundary at every 1-based index in `starts`.
    pub fn from_starts(n: usize, starts: &[usize]) -> Result<Self> {
        let mut d = vec![false; n];
        for &t in starts {
            if t == 0 || t > n {
                return Err(Error::invalid(format!(
                    "boundary index {t} outside 1..={n}"
                )));
            }
            d[t - 1] = true;
        }
        Ok(BoundaryMode::Forced(d))
    }
}

/// First timesteps (1-based) of chunks 2..=m when `n` steps are split into
/// `m` chunks: `ceil(k n / m) + 1` for `k = 1..m-1`.
pub fn equal_chunk_starts(n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "cannot split {n} steps into {m} chunks"
        )));
    }
    Ok((1..m).map(|k| (k * n).div_ceil(m) + 1).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeResult {
    pub video_vector: Vector,
    /// Segment summaries in emission order; the last one is the closing emission.
    pub summaries: Vec<Vector>,
    /// 1-based timesteps at which the detector fired.
    pub boundaries: Vec<usize>,
    pub per_step_logits: Vec<f64>,
    pub n: usize,
}

impl EncodeResult {
    /// Lengths of the contiguous segments delimited by `boundaries`.
    pub fn segment_lengths(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.boundaries.len() + 1);
        let mut start = 1;
        for &b in &self.boundaries {
            out.push(b - start);
            start = b;
        }
        out.push(self.n + 1 - start);
        out
    }
}

#[derive(Clone, Debug)]
struct Emission {
    /// Index `k` of the layer-1 state `h_k` that was emitted.
    state: usize,
    weight: f64,
    /// Relaxed mode: the step whose soft decision weights this emission.
    soft_step: Option<usize>,
}

/// Everything the backward pass needs from one [`encode`] call.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    input_masks: Option<Vec<Vector>>,
    layer1: Vec<BoundaryCache>,
    emissions: Vec<Emission>,
    summary_masks: Option<Vec<Vector>>,
    layer2: Vec<LstmCache>,
}

impl EncoderCache {
    /// Boundary decisions actually taken, one per timestep.
    pub fn decisions(&self) -> Vec<bool> {
        self.layer1.iter().map(|c| c.s > 0.5).collect()
    }
}

pub fn embed_input(p: &EncoderParams, f: &FeatureSequence) -> Result<Vec<Vector>> {
    f.frames
        .iter()
        .map(|x| {
            check_dim("frame", x.dim(), p.input_dim())?;
            let mut e = p.b_embed.clone();
            p.w_embed.matvec_add(x, &mut e);
            Ok(e)
        })
        .collect()
}

/// Runs the encoder without dropout. `rng` is required for `Learned(Train)`.
pub fn encode(
    p: &EncoderParams,
    f: &FeatureSequence,
    mode: &BoundaryMode,
    rng: Option<&mut Rng>,
) -> Result<(EncodeResult, EncoderCache)> {
    encode_with_dropout(p, f, mode, rng, None)
}

/// Runs the encoder; with `retain = Some(q)`, inverted dropout with retain
/// probability `q` is applied to the embedded frames and to the summaries.
pub fn encode_with_dropout(
    p: &EncoderParams,
    f: &FeatureSequence,
    mode: &BoundaryMode,
    mut rng: Option<&mut Rng>,
    retain: Option<f64>,
) -> Result<(EncodeResult, EncoderCache)> {
    p.validate()?;
    let n = f.len();
    if n == 0 {
        return Err(Error::invalid(format!("video {:?} has no frames", f.id)));
    }
    let forced: Option<Vec<bool>> = match mode {
        BoundaryMode::Forced(d) => {
            check_dim("forced boundary list", d.len(), n)?;
            Some(d.clone())
        }
        BoundaryMode::EqualChunks(m) => match BoundaryMode::from_starts(n, &equal_chunk_starts(n, *m)?)? {
            BoundaryMode::Forced(d) => Some(d),
            _ => unreachable!(),
        },
        _ => None,
    };
    let needs_rng = matches!(mode, BoundaryMode::Learned(Phase::Train)) || retain.is_some();
    if needs_rng && rng.is_none() {
        return Err(Error::invalid(
            "stochastic boundaries and dropout need a random generator",
        ));
    }
    if let Some(q) = retain {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::invalid(format!("retain probability {q} not in (0, 1]")));
        }
    }

    let mut inputs = embed_input(p, f)?;
    let input_masks = match retain {
        Some(q) => {
            let r = rng.as_deref_mut().expect("checked above");
            let masks: Vec<Vector> = inputs.iter().map(|e| dropout_mask(e.dim(), q, r)).collect();
            for (e, m) in inputs.iter_mut().zip(&masks) {
                e.iter_mut().zip(m.iter()).for_each(|(a, b)| *a *= b);
            }
            Some(masks)
        }
        None => None,
    };

    let hidden = p.layer1.hidden_dim();
    let relaxed = matches!(mode, BoundaryMode::Relaxed);
    let mut state = BoundaryState::zeros(hidden);
    let mut layer1 = Vec::with_capacity(n);
    let mut emissions = Vec::new();
    let mut summaries = Vec::new();
    let mut boundaries = Vec::new();
    let mut logits = Vec::with_capacity(n);
    for (t, x) in inputs.iter().enumerate() {
        let step_mode = match (mode, &forced) {
            (_, Some(d)) => StepMode::Forced(d[t]),
            (BoundaryMode::Learned(Phase::Train), _) => {
                StepMode::Train(rng.as_deref_mut().expect("checked above"))
            }
            (BoundaryMode::Learned(Phase::Test), _) => StepMode::Test,
            _ => StepMode::Relaxed,
        };
        let (next, emitted, cache) =
            boundary_lstm_step(&p.layer1, &p.boundary, x, &state, step_mode)?;
        if let Some(e) = emitted {
            emissions.push(Emission {
                state: t,
                weight: cache.s,
                soft_step: relaxed.then_some(t),
            });
            summaries.push(e);
            if !relaxed {
                boundaries.push(t + 1);
            }
        }
        logits.push(next.logit);
        layer1.push(cache);
        state = next;
    }
    emissions.push(Emission {
        state: n,
        weight: 1.0,
        soft_step: None,
    });
    summaries.push(state.h.clone());

    let summary_masks = match retain {
        Some(q) => {
            let r = rng.as_deref_mut().expect("checked above");
            Some(
                summaries
                    .iter()
                    .map(|s| dropout_mask(s.dim(), q, r))
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };

    let (mut h2, mut c2) = (Vector::zeros(p.hidden_dim()), Vector::zeros(p.hidden_dim()));
    let mut layer2 = Vec::with_capacity(summaries.len());
    for (j, s) in summaries.iter().enumerate() {
        let input = match &summary_masks {
            Some(m) => s.iter().zip(m[j].iter()).map(|(a, b)| a * b).collect::<Vec<_>>().into(),
            None => s.clone(),
        };
        let (h, c, cache) = lstm_step(&p.layer2, &input, &h2, &c2)?;
        layer2.push(cache);
        h2 = h;
        c2 = c;
    }

    let result = EncodeResult {
        video_vector: h2,
        summaries,
        boundaries,
        per_step_logits: logits,
        n,
    };
    let cache = EncoderCache {
        input_masks,
        layer1,
        emissions,
        summary_masks,
        layer2,
    };
    Ok((result, cache))
}

/// Backpropagates `dv` (gradient on the video vector) through layer 2, the
/// emissions and the boundary-aware layer into `grads`.
pub fn encoder_backward(
    p: &EncoderParams,
    f: &FeatureSequence,
    cache: &EncoderCache,
    dv: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    let n = f.len();
    check_dim("encoder cache length", cache.layer1.len(), n)?;
    check_dim("encoder cache emissions", cache.emissions.len(), cache.layer2.len())?;
    check_dim("video vector gradient", dv.len(), p.hidden_dim())?;

    let hidden = p.layer1.hidden_dim();
    let mut d_state = vec![Vector::zeros(hidden); n + 1];
    let mut ds_extra = vec![0.0; n];

    let mut dh: Vector = dv.into();
    let mut dc = Vector::zeros(p.hidden_dim());
    for (j, lc) in cache.layer2.iter().enumerate().rev() {
        let g = lstm_backward(&p.layer2, lc, &dh, &dc, &mut grads.layer2)?;
        let mut ds = g.dx;
        if let Some(masks) = &cache.summary_masks {
            ds.iter_mut().zip(masks[j].iter()).for_each(|(a, b)| *a *= b);
        }
        let em = &cache.emissions[j];
        axpy(em.weight, &ds, &mut d_state[em.state]);
        if let Some(t) = em.soft_step {
            ds_extra[t] += dot(&ds, &cache.layer1[t].h_raw);
        }
        dh = g.dh_prev;
        dc = g.dc_prev;
    }

    let mut dh = std::mem::take(&mut d_state[n]);
    let mut dc = Vector::zeros(hidden);
    for t in (0..n).rev() {
        let g = boundary_backward(
            &p.layer1,
            &p.boundary,
            &cache.layer1[t],
            &dh,
            &dc,
            ds_extra[t],
            &mut grads.layer1,
            &mut grads.boundary,
        )?;
        let mut dx = g.dx;
        if let Some(masks) = &cache.input_masks {
            dx.iter_mut().zip(masks[t].iter()).for_each(|(a, b)| *a *= b);
        }
        grads.w_embed.add_outer(&dx, &f.frames[t]);
        axpy(1.0, &dx, &mut grads.b_embed);
        dh = g.dh_prev;
        axpy(1.0, &d_state[t], &mut dh);
        dc = g.dc_prev;
    }
    Ok(())
}

/// Histograms of detector activity over a set of encoded videos.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryStatistics {
    /// `count_histogram[k]` = number of videos with exactly `k` detected boundaries.
    pub count_histogram: Vec<usize>,
    /// 100 bins over relative position `t / n`; bin `i` covers `[i/100, (i+1)/100)`,
    /// with position 1.0 folded into the last bin.
    pub position_histogram: Vec<usize>,
}

pub const POSITION_BINS: usize = 100;

pub fn boundary_statistics(results: &[EncodeResult]) -> Result<BoundaryStatistics> {
    if results.is_empty() {
        return Err(Error::invalid("boundary statistics need at least one video"));
    }
    let max_count = results.iter().map(|r| r.boundaries.len()).max().unwrap_or(0);
    let mut count_histogram = vec![0; max_count + 1];
    let mut position_histogram = vec![0; POSITION_BINS];
    for r in results {
        count_histogram[r.boundaries.len()] += 1;
        for &t in &r.boundaries {
            let pos = t as f64 / r.n as f64;
            let bin = ((pos * POSITION_BINS as f64).floor() as usize).min(POSITION_BINS - 1);
            position_histogram[bin] += 1;
        }
    }
    Ok(BoundaryStatistics {
        count_histogram,
        position_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(n: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = Rng::new(seed);
        let frames = (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect::<Vec<_>>().into())
            .collect();
        FeatureSequence::new(format!("v{seed}"), frames).unwrap()
    }

    fn params(seed: u64) -> EncoderParams {
        EncoderParams::init(3, 4, 5, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn embedding_cases() {
        let mut p = EncoderParams::zeros(3, 3, 2);
        p.w_embed = Matrix::identity(3);
        let f = video(4, 3, 1);
        let e = embed_input(&p, &f).unwrap();
        assert_eq!(e, f.frames);

        let mut p = EncoderParams::zeros(3, 2, 2);
        p.b_embed = vec![0.5, -1.0].into();
        let e = embed_input(&p, &video(1, 3, 2)).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].to_vec(), vec![0.5, -1.0]);

        assert!(embed_input(&p, &video(2, 4, 3)).is_err());
    }

    #[test]
    fn empty_video_rejected() {
        assert!(FeatureSequence::new("x", vec![]).is_err());
        let f = FeatureSequence {
            id: "x".into(),
            frames: vec![],
        };
        assert!(encode(&params(1), &f, &BoundaryMode::Learned(Phase::Test), None).is_err());
    }

    #[test]
    fn train_mode_needs_rng() {
        let f = video(5, 3, 1);
        assert!(encode(&params(1), &f, &BoundaryMode::Learned(Phase::Train), None).is_err());
        let mut rng = Rng::new(3);
        assert!(encode(&params(1), &f, &BoundaryMode::Learned(Phase::Train), Some(&mut rng)).is_ok());
    }

    #[test]
    fn no_cuts_single_summary() {
        let p = params(2);
        let f = video(10, 3, 4);
        let (r, _) = encode(&p, &f, &BoundaryMode::Forced(vec![false; 10]), None).unwrap();
        assert!(r.boundaries.is_empty());
        assert_eq!(r.summaries.len(), 1);

        // h_10 from a plain LSTM chain over the embedded frames
        let mut h = Vector::zeros(5);
        let mut c = Vector::zeros(5);
        for x in embed_input(&p, &f).unwrap() {
            let (h2, c2, _) = lstm_step(&p.layer1, &x, &h, &c).unwrap();
            h = h2;
            c = c2;
        }
        assert_eq!(r.summaries[0], h);
        let (v, _, _) = lstm_step(&p.layer2, &h, &Vector::zeros(5), &Vector::zeros(5)).unwrap();
        assert_eq!(r.video_vector, v);
    }

    #[test]
    fn equal_chunks_two_of_ten() {
        assert_eq!(equal_chunk_starts(10, 2).unwrap(), vec![6]);
        let (r, _) = encode(&params(3), &video(10, 3, 5), &BoundaryMode::EqualChunks(2), None).unwrap();
        assert_eq!(r.boundaries, vec![6]);
        assert_eq!(r.summaries.len(), 2);
        assert_eq!(r.segment_lengths(), vec![5, 5]);
        assert!(equal_chunk_starts(3, 4).is_err());
        assert!(equal_chunk_starts(3, 0).is_err());
    }

    #[test]
    fn forced_cuts_emit_previous_state() {
        let p = params(4);
        let f = video(10, 3, 6);
        let mut d = vec![false; 10];
        d[3] = true;
        d[7] = true;
        let (r, _) = encode(&p, &f, &BoundaryMode::Forced(d.clone()), None).unwrap();
        assert_eq!(r.boundaries, vec![4, 8]);
        assert_eq!(r.summaries.len(), 3);

        // replay step by step and compare against h_3, h_7, h_10
        let emb = embed_input(&p, &f).unwrap();
        let mut st = BoundaryState::zeros(5);
        let mut hs = vec![st.h.clone()];
        for (t, x) in emb.iter().enumerate() {
            let (next, _, _) =
                boundary_lstm_step(&p.layer1, &p.boundary, x, &st, StepMode::Forced(d[t])).unwrap();
            hs.push(next.h.clone());
            st = next;
        }
        assert_eq!(r.summaries, vec![hs[3].clone(), hs[7].clone(), hs[10].clone()]);
    }

    #[test]
    fn boundary_at_first_step_emits_zero_state() {
        let mut d = vec![false; 4];
        d[0] = true;
        let (r, _) = encode(&params(5), &video(4, 3, 7), &BoundaryMode::Forced(d), None).unwrap();
        assert_eq!(r.boundaries, vec![1]);
        assert_eq!(r.summaries[0], Vector::zeros(5));
        assert_eq!(r.segment_lengths(), vec![0, 4]);
    }

    #[test]
    fn forced_list_length_checked() {
        assert!(encode(&params(1), &video(4, 3, 1), &BoundaryMode::Forced(vec![false; 3]), None).is_err());
    }

    #[test]
    fn test_mode_is_deterministic() {
        let p = params(8);
        let f = video(12, 3, 9);
        let a = encode(&p, &f, &BoundaryMode::Learned(Phase::Test), None).unwrap().0;
        let b = encode(&p, &f, &BoundaryMode::Learned(Phase::Test), None).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.summaries.len(), a.boundaries.len() + 1);
        for (t, l) in a.per_step_logits.iter().enumerate() {
            assert_eq!(a.boundaries.contains(&(t + 1)), *l > 0.0);
        }
    }

    #[test]
    fn statistics_cases() {
        assert!(boundary_statistics(&[]).is_err());
        let none = EncodeResult {
            video_vector: Vector::zeros(1),
            summaries: vec![Vector::zeros(1)],
            boundaries: vec![],
            per_step_logits: vec![0.0; 5],
            n: 5,
        };
        let s = boundary_statistics(&[none.clone(), none.clone()]).unwrap();
        assert_eq!(s.count_histogram, vec![2]);
        assert!(s.position_histogram.iter().all(|c| *c == 0));

        let mut one = none;
        one.n = 100;
        one.boundaries = vec![50];
        let s = boundary_statistics(&[one]).unwrap();
        assert_eq!(s.count_histogram, vec![0, 1]);
        assert_eq!(s.position_histogram[50], 1);
        assert_eq!(s.position_histogram.iter().sum::<usize>(), 1);
    }
}
