//! Single-timestep forward and backward kernels for the plain LSTM, the
//! boundary-aware LSTM, and the GRU.
//!
//! Backward kernels accumulate parameter gradients into a caller-owned
//! gradient tree of the same type as the parameters and return the
//! gradients with respect to the step's inputs.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::numerics::{
    dot, glorot_init, glorot_vector, orthogonal_init, param_set, sigmoid, Matrix, Rng,
    Vector,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_ih: Matrix,
    pub w_fx: Matrix,
    pub w_fh: Matrix,
    pub w_gx: Matrix,
    pub w_gh: Matrix,
    pub w_ox: Matrix,
    pub w_oh: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_g: Vector,
    pub b_o: Vector,
}

param_set!(LstmParams { w_ix, w_ih, w_fx, w_fh, w_gx, w_gh, w_ox, w_oh, b_i, b_f, b_g, b_o });

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let x = || Matrix::zeros(hidden_dim, input_dim);
        let h = || Matrix::zeros(hidden_dim, hidden_dim);
        let b = || Vector::zeros(hidden_dim);
        LstmParams {
            w_ix: x(),
            w_ih: h(),
            w_fx: x(),
            w_fh: h(),
            w_gx: x(),
            w_gh: h(),
            w_ox: x(),
            w_oh: h(),
            b_i: b(),
            b_f: b(),
            b_g: b(),
            b_o: b(),
        }
    }

    /// Glorot for input-side matrices, orthogonal for state-side ones, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = LstmParams::zeros(input_dim, hidden_dim);
        for (wx, wh) in [
            (&mut p.w_ix, &mut p.w_ih),
            (&mut p.w_fx, &mut p.w_fh),
            (&mut p.w_gx, &mut p.w_gh),
            (&mut p.w_ox, &mut p.w_oh),
        ] {
            *wx = glorot_init(hidden_dim, input_dim, rng)?;
            *wh = orthogonal_init(hidden_dim, rng)?;
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }
}

/// Activations of one LSTM step kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub i: Vector,
    pub f: Vector,
    pub g: Vector,
    pub o: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
}

#[derive(Clone, Debug)]
pub struct LstmInputGrads {
    pub dx: Vector,
    pub dh_prev: Vector,
    pub dc_prev: Vector,
}

fn affine2(wx: &Matrix, wh: &Matrix, b: &[f64], x: &[f64], h: &[f64]) -> Vector {
    let mut out = Vector::from(b);
    wx.matvec_add(x, &mut out);
    wh.matvec_add(h, &mut out);
    out
}

fn map(v: &mut Vector, f: impl Fn(f64) -> f64) {
    v.iter_mut().for_each(|x| *x = f(*x));
}

pub fn lstm_step(
    p: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vector, Vector, LstmCache)> {
    check_dim("lstm input", x.len(), p.input_dim())?;
    check_dim("lstm h_prev", h_prev.len(), p.hidden_dim())?;
    check_dim("lstm c_prev", c_prev.len(), p.hidden_dim())?;

    let mut i = affine2(&p.w_ix, &p.w_ih, &p.b_i, x, h_prev);
    let mut f = affine2(&p.w_fx, &p.w_fh, &p.b_f, x, h_prev);
    let mut g = affine2(&p.w_gx, &p.w_gh, &p.b_g, x, h_prev);
    let mut o = affine2(&p.w_ox, &p.w_oh, &p.b_o, x, h_prev);
    map(&mut i, sigmoid);
    map(&mut f, sigmoid);
    map(&mut g, f64::tanh);
    map(&mut o, sigmoid);

    let n = p.hidden_dim();
    let mut c = Vector::zeros(n);
    let mut tanh_c = Vector::zeros(n);
    let mut h = Vector::zeros(n);
    for k in 0..n {
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
    let cache = LstmCache {
        x: x.into(),
        h_prev: h_prev.into(),
        c_prev: c_prev.into(),
        i,
        f,
        g,
        o,
        c: c.clone(),
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Reverse of [`lstm_step`] given the gradients flowing into `h` and `c`.
pub fn lstm_backward(
    p: &LstmParams,
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmParams,
) -> Result<LstmInputGrads> {
    let n = p.hidden_dim();
    check_dim("lstm backward dh", dh.len(), n)?;
    check_dim("lstm backward dc", dc.len(), n)?;
    check_dim("lstm backward cache", cache.i.dim(), n)?;
    check_dim("lstm backward cache input", cache.x.dim(), p.input_dim())?;

    let mut da_i = Vector::zeros(n);
    let mut da_f = Vector::zeros(n);
    let mut da_g = Vector::zeros(n);
    let mut da_o = Vector::zeros(n);
    let mut dc_prev = Vector::zeros(n);
    for k in 0..n {
        let (i, f, g, o, tc) = (
            cache.i[k],
            cache.f[k],
            cache.g[k],
            cache.o[k],
            cache.tanh_c[k],
        );
        let d_o = dh[k] * tc;
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        da_i[k] = dct * g * i * (1.0 - i);
        da_f[k] = dct * cache.c_prev[k] * f * (1.0 - f);
        da_g[k] = dct * i * (1.0 - g * g);
        da_o[k] = d_o * o * (1.0 - o);
        dc_prev[k] = dct * f;
    }

    let mut dx = Vector::zeros(p.input_dim());
    let mut dh_prev = Vector::zeros(n);
    for (da, wx, wh, gwx, gwh, gb) in [
        (&da_i, &p.w_ix, &p.w_ih, &mut grads.w_ix, &mut grads.w_ih, &mut grads.b_i),
        (&da_f, &p.w_fx, &p.w_fh, &mut grads.w_fx, &mut grads.w_fh, &mut grads.b_f),
        (&da_g, &p.w_gx, &p.w_gh, &mut grads.w_gx, &mut grads.w_gh, &mut grads.b_g),
        (&da_o, &p.w_ox, &p.w_oh, &mut grads.w_ox, &mut grads.w_oh, &mut grads.b_o),
    ] {
        gwx.add_outer(da, &cache.x);
        gwh.add_outer(da, &cache.h_prev);
        crate::numerics::axpy(1.0, da, gb);
        wx.matvec_t_add(da, &mut dx);
        wh.matvec_t_add(da, &mut dh_prev);
    }
    Ok(LstmInputGrads {
        dx,
        dh_prev,
        dc_prev,
    })
}

/// Weights of the scalar boundary detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryParams {
    pub v_s: Vector,
    pub w_si: Matrix,
    pub w_sh: Matrix,
    pub b_s: Vector,
}

param_set!(BoundaryParams { v_s, w_si, w_sh, b_s });

impl BoundaryParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        BoundaryParams {
            v_s: Vector::zeros(hidden_dim),
            w_si: Matrix::zeros(hidden_dim, input_dim),
            w_sh: Matrix::zeros(hidden_dim, hidden_dim),
            b_s: Vector::zeros(hidden_dim),
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(BoundaryParams {
            v_s: glorot_vector(hidden_dim, rng)?,
            w_si: glorot_init(hidden_dim, input_dim, rng)?,
            w_sh: orthogonal_init(hidden_dim, rng)?,
            b_s: Vector::zeros(hidden_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_si.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_si.rows()
    }
}

fn boundary_projection(bp: &BoundaryParams, x: &[f64], h_prev: &[f64]) -> Result<Vector> {
    check_dim("boundary input", x.len(), bp.input_dim())?;
    check_dim("boundary h_prev", h_prev.len(), bp.hidden_dim())?;
    check_dim("boundary v_s", bp.v_s.dim(), bp.hidden_dim())?;
    Ok(affine2(&bp.w_si, &bp.w_sh, &bp.b_s, x, h_prev))
}

/// Pre-sigmoid boundary activation `v_sᵀ (W_si x + W_sh h_prev + b_s)`.
pub fn boundary_logit(bp: &BoundaryParams, x: &[f64], h_prev: &[f64]) -> Result<f64> {
    Ok(dot(&bp.v_s, &boundary_projection(bp, x, h_prev)?))
}

/// Test-time boundary decision: fires iff `sigmoid(a) > 0.5`, i.e. `a > 0`.
pub fn tau_deterministic(a: f64) -> bool {
    a > 0.0
}

/// Train-time boundary decision: fires iff `sigmoid(a) > z`, `z ~ U[0, 1)`.
pub fn tau_stochastic(a: f64, rng: &mut Rng) -> bool {
    sigmoid(a) > rng.uniform()
}

/// State of the boundary-aware layer after one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryState {
    pub h: Vector,
    pub c: Vector,
    pub s: bool,
    pub logit: f64,
}

impl BoundaryState {
    pub fn zeros(hidden_dim: usize) -> Self {
        BoundaryState {
            h: Vector::zeros(hidden_dim),
            c: Vector::zeros(hidden_dim),
            s: false,
            logit: 0.0,
        }
    }
}

/// How the boundary decision of a single step is produced.
#[derive(Debug)]
pub enum StepMode<'a> {
    /// Stochastic neuron; backward uses the sigmoid-derivative surrogate.
    Train(&'a mut Rng),
    /// Deterministic threshold.
    Test,
    /// Externally supplied decision; no gradient reaches the detector.
    Forced(bool),
    /// `s = sigmoid(a)` as a continuous gate. Only used to check gradients.
    Relaxed,
}

#[derive(Clone, Debug)]
pub struct BoundaryCache {
    pub lstm: LstmCache,
    /// Incoming state before the reset products.
    pub h_raw: Vector,
    pub c_raw: Vector,
    pub proj: Vector,
    pub logit: f64,
    /// Value multiplying the reset, in `{0, 1}` except in relaxed mode.
    pub s: f64,
    /// Whether `d loss / d s` is routed back into the detector.
    pub surrogate: bool,
}

/// One step of the boundary-aware LSTM.
///
/// The detector reads the un-reset `prev.h`. When it fires, `prev.h` is
/// emitted as the summary of the segment that just ended and the state
/// entering the gates is zeroed. In relaxed mode every step emits
/// `s * prev.h`.
pub fn boundary_lstm_step(
    p: &LstmParams,
    bp: &BoundaryParams,
    x: &[f64],
    prev: &BoundaryState,
    mode: StepMode<'_>,
) -> Result<(BoundaryState, Option<Vector>, BoundaryCache)> {
    check_dim("boundary layer input", bp.input_dim(), p.input_dim())?;
    check_dim("boundary layer hidden", bp.hidden_dim(), p.hidden_dim())?;
    let proj = boundary_projection(bp, x, &prev.h)?;
    let logit = dot(&bp.v_s, &proj);
    let (s, surrogate) = match mode {
        StepMode::Train(rng) => (f64::from(u8::from(tau_stochastic(logit, rng))), true),
        StepMode::Test => (f64::from(u8::from(tau_deterministic(logit))), true),
        StepMode::Forced(b) => (f64::from(u8::from(b)), false),
        StepMode::Relaxed => (sigmoid(logit), true),
    };
    let relaxed = s != 0.0 && s != 1.0;

    let emitted = if relaxed {
        Some(prev.h.scaled(s))
    } else if s == 1.0 {
        Some(prev.h.clone())
    } else {
        None
    };

    let keep = 1.0 - s;
    let h_in = prev.h.scaled(keep);
    let c_in = prev.c.scaled(keep);
    let (h, c, lstm) = lstm_step(p, x, &h_in, &c_in)?;
    let next = BoundaryState {
        h,
        c,
        s: s > 0.5,
        logit,
    };
    let cache = BoundaryCache {
        lstm,
        h_raw: prev.h.clone(),
        c_raw: prev.c.clone(),
        proj,
        logit,
        s,
        surrogate,
    };
    Ok((next, emitted, cache))
}

/// Reverse of [`boundary_lstm_step`].
///
/// `ds_extra` is any gradient on `s` that arrives from outside the cell
/// (the relaxed emission weight). The gradient on `s` reaches the logit
/// through `sigmoid'(a)`, which is exact in relaxed mode and the
/// straight-through surrogate in train/test mode.
pub fn boundary_backward(
    p: &LstmParams,
    bp: &BoundaryParams,
    cache: &BoundaryCache,
    dh: &[f64],
    dc: &[f64],
    ds_extra: f64,
    grads: &mut LstmParams,
    bgrads: &mut BoundaryParams,
) -> Result<LstmInputGrads> {
    let LstmInputGrads {
        mut dx,
        dh_prev: dh_in,
        dc_prev: dc_in,
    } = lstm_backward(p, &cache.lstm, dh, dc, grads)?;
    let keep = 1.0 - cache.s;
    let mut dh_prev = dh_in.scaled(keep);
    let dc_prev = dc_in.scaled(keep);

    if cache.surrogate {
        let ds = ds_extra - dot(&dh_in, &cache.h_raw) - dot(&dc_in, &cache.c_raw);
        let sg = sigmoid(cache.logit);
        let da = ds * sg * (1.0 - sg);
        if da != 0.0 {
            crate::numerics::axpy(da, &cache.proj, &mut bgrads.v_s);
            let dproj = bp.v_s.scaled(da);
            bgrads.w_si.add_outer(&dproj, &cache.lstm.x);
            bgrads.w_sh.add_outer(&dproj, &cache.h_raw);
            crate::numerics::axpy(1.0, &dproj, &mut bgrads.b_s);
            bp.w_si.matvec_t_add(&dproj, &mut dx);
            bp.w_sh.matvec_t_add(&dproj, &mut dh_prev);
        }
    }
    Ok(LstmInputGrads {
        dx,
        dh_prev,
        dc_prev,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_zy: Matrix,
    pub w_zv: Matrix,
    pub w_zh: Matrix,
    pub w_ry: Matrix,
    pub w_rv: Matrix,
    pub w_rh: Matrix,
    pub w_hy: Matrix,
    pub w_hv: Matrix,
    pub w_hh: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_h: Vector,
}

param_set!(GruParams { w_zy, w_zv, w_zh, w_ry, w_rv, w_rh, w_hy, w_hv, w_hh, b_z, b_r, b_h });

impl GruParams {
    pub fn zeros(word_dim: usize, video_dim: usize, hidden_dim: usize) -> Self {
        let y = || Matrix::zeros(hidden_dim, word_dim);
        let v = || Matrix::zeros(hidden_dim, video_dim);
        let h = || Matrix::zeros(hidden_dim, hidden_dim);
        let b = || Vector::zeros(hidden_dim);
        GruParams {
            w_zy: y(),
            w_zv: v(),
            w_zh: h(),
            w_ry: y(),
            w_rv: v(),
            w_rh: h(),
            w_hy: y(),
            w_hv: v(),
            w_hh: h(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    pub fn init(word_dim: usize, video_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = GruParams::zeros(word_dim, video_dim, hidden_dim);
        for (wy, wv, wh) in [
            (&mut p.w_zy, &mut p.w_zv, &mut p.w_zh),
            (&mut p.w_ry, &mut p.w_rv, &mut p.w_rh),
            (&mut p.w_hy, &mut p.w_hv, &mut p.w_hh),
        ] {
            *wy = glorot_init(hidden_dim, word_dim, rng)?;
            *wv = glorot_init(hidden_dim, video_dim, rng)?;
            *wh = orthogonal_init(hidden_dim, rng)?;
        }
        Ok(p)
    }

    pub fn word_dim(&self) -> usize {
        self.w_zy.cols()
    }

    pub fn video_dim(&self) -> usize {
        self.w_zv.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_zy.rows()
    }
}

/// Gate contributions of the video vector plus biases. They are the same at
/// every decoder step, so the decoder computes them once per caption.
#[derive(Clone, Debug)]
pub struct GruContext {
    pub v: Vector,
    z: Vector,
    r: Vector,
    h: Vector,
}

impl GruContext {
    pub fn new(p: &GruParams, v: &[f64]) -> Result<Self> {
        check_dim("gru video vector", v.len(), p.video_dim())?;
        let ctx = |w: &Matrix, b: &Vector| {
            let mut out = b.clone();
            w.matvec_add(v, &mut out);
            out
        };
        Ok(GruContext {
            v: v.into(),
            z: ctx(&p.w_zv, &p.b_z),
            r: ctx(&p.w_rv, &p.b_r),
            h: ctx(&p.w_hv, &p.b_h),
        })
    }
}

/// Accumulated gate gradients for the context terms of a [`GruContext`].
#[derive(Clone, Debug)]
pub struct GruContextGrads {
    da_z: Vector,
    da_r: Vector,
    da_h: Vector,
}

impl GruContextGrads {
    pub fn zeros(hidden_dim: usize) -> Self {
        GruContextGrads {
            da_z: Vector::zeros(hidden_dim),
            da_r: Vector::zeros(hidden_dim),
            da_h: Vector::zeros(hidden_dim),
        }
    }

    /// Pushes the accumulated gate gradients into the video-side weights
    /// and biases; returns the gradient on the video vector.
    pub fn finish(&self, p: &GruParams, ctx: &GruContext, grads: &mut GruParams) -> Vector {
        let mut dv = Vector::zeros(p.video_dim());
        for (da, w, gw, gb) in [
            (&self.da_z, &p.w_zv, &mut grads.w_zv, &mut grads.b_z),
            (&self.da_r, &p.w_rv, &mut grads.w_rv, &mut grads.b_r),
            (&self.da_h, &p.w_hv, &mut grads.w_hv, &mut grads.b_h),
        ] {
            gw.add_outer(da, &ctx.v);
            crate::numerics::axpy(1.0, da, gb);
            w.matvec_t_add(da, &mut dv);
        }
        dv
    }
}

#[derive(Clone, Debug)]
pub struct GruCache {
    pub y: Vector,
    pub p_prev: Vector,
    pub z: Vector,
    pub r: Vector,
    pub rp: Vector,
    pub h_tilde: Vector,
}

/// One decoder GRU step with the video-side terms precomputed.
pub fn gru_step_in_context(
    p: &GruParams,
    ctx: &GruContext,
    y: &[f64],
    p_prev: &[f64],
) -> Result<(Vector, GruCache)> {
    check_dim("gru word input", y.len(), p.word_dim())?;
    check_dim("gru p_prev", p_prev.len(), p.hidden_dim())?;
    let mut z = ctx.z.clone();
    p.w_zy.matvec_add(y, &mut z);
    p.w_zh.matvec_add(p_prev, &mut z);
    map(&mut z, sigmoid);
    let mut r = ctx.r.clone();
    p.w_ry.matvec_add(y, &mut r);
    p.w_rh.matvec_add(p_prev, &mut r);
    map(&mut r, sigmoid);
    let rp: Vector = r.iter().zip(p_prev).map(|(a, b)| a * b).collect::<Vec<_>>().into();
    let mut h_tilde = ctx.h.clone();
    p.w_hy.matvec_add(y, &mut h_tilde);
    p.w_hh.matvec_add(&rp, &mut h_tilde);
    map(&mut h_tilde, f64::tanh);

    let p_t: Vector = (0..p.hidden_dim())
        .map(|k| (1.0 - z[k]) * p_prev[k] + z[k] * h_tilde[k])
        .collect::<Vec<_>>()
        .into();
    let cache = GruCache {
        y: y.into(),
        p_prev: p_prev.into(),
        z,
        r,
        rp,
        h_tilde,
    };
    Ok((p_t, cache))
}

/// One GRU step: `p_t = (1 - z) ⊙ p_prev + z ⊙ h̃`.
pub fn gru_step(p: &GruParams, y: &[f64], v: &[f64], p_prev: &[f64]) -> Result<(Vector, GruCache)> {
    let ctx = GruContext::new(p, v)?;
    gru_step_in_context(p, &ctx, y, p_prev)
}

#[derive(Clone, Debug)]
pub struct GruInputGrads {
    pub dy: Vector,
    pub dp_prev: Vector,
}

/// Reverse of [`gru_step_in_context`]; video-side terms go to `ctx_grads`.
pub fn gru_backward_in_context(
    p: &GruParams,
    cache: &GruCache,
    dp: &[f64],
    grads: &mut GruParams,
    ctx_grads: &mut GruContextGrads,
) -> Result<GruInputGrads> {
    let n = p.hidden_dim();
    check_dim("gru backward dp", dp.len(), n)?;
    check_dim("gru backward cache", cache.z.dim(), n)?;
    check_dim("gru backward cache input", cache.y.dim(), p.word_dim())?;

    let mut da_z = Vector::zeros(n);
    let mut da_h = Vector::zeros(n);
    let mut dp_prev = Vector::zeros(n);
    for k in 0..n {
        let (z, ht) = (cache.z[k], cache.h_tilde[k]);
        da_z[k] = dp[k] * (ht - cache.p_prev[k]) * z * (1.0 - z);
        da_h[k] = dp[k] * z * (1.0 - ht * ht);
        dp_prev[k] = dp[k] * (1.0 - z);
    }
    let mut drp = Vector::zeros(n);
    p.w_hh.matvec_t_add(&da_h, &mut drp);
    grads.w_hh.add_outer(&da_h, &cache.rp);
    let mut da_r = Vector::zeros(n);
    for k in 0..n {
        let r = cache.r[k];
        da_r[k] = drp[k] * cache.p_prev[k] * r * (1.0 - r);
        dp_prev[k] += drp[k] * r;
    }

    let mut dy = Vector::zeros(p.word_dim());
    for (da, wy, gwy) in [
        (&da_z, &p.w_zy, &mut grads.w_zy),
        (&da_r, &p.w_ry, &mut grads.w_ry),
        (&da_h, &p.w_hy, &mut grads.w_hy),
    ] {
        gwy.add_outer(da, &cache.y);
        wy.matvec_t_add(da, &mut dy);
    }
    for (da, wh, gwh) in [
        (&da_z, &p.w_zh, &mut grads.w_zh),
        (&da_r, &p.w_rh, &mut grads.w_rh),
    ] {
        gwh.add_outer(da, &cache.p_prev);
        wh.matvec_t_add(da, &mut dp_prev);
    }
    crate::numerics::axpy(1.0, &da_z, &mut ctx_grads.da_z);
    crate::numerics::axpy(1.0, &da_r, &mut ctx_grads.da_r);
    crate::numerics::axpy(1.0, &da_h, &mut ctx_grads.da_h);
    Ok(GruInputGrads { dy, dp_prev })
}

/// Reverse of [`gru_step`]; returns `(dy, dv, dp_prev)`.
pub fn gru_backward(
    p: &GruParams,
    v: &[f64],
    cache: &GruCache,
    dp: &[f64],
    grads: &mut GruParams,
) -> Result<(Vector, Vector, Vector)> {
    let ctx = GruContext::new(p, v)?;
    let mut cg = GruContextGrads::zeros(p.hidden_dim());
    let GruInputGrads { dy, dp_prev } = gru_backward_in_context(p, cache, dp, grads, &mut cg)?;
    let dv = cg.finish(p, &ctx, grads);
    Ok((dy, dv, dp_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, ParamSet};

    fn scalar_lstm_ones() -> LstmParams {
        let mut p = LstmParams::zeros(1, 1);
        for m in [
            &mut p.w_ix, &mut p.w_ih, &mut p.w_fx, &mut p.w_fh, &mut p.w_gx, &mut p.w_gh,
            &mut p.w_ox, &mut p.w_oh,
        ] {
            m.set(0, 0, 1.0);
        }
        p
    }

    #[test]
    fn lstm_zero_params() {
        let p = LstmParams::zeros(3, 2);
        let (h, c, _) = lstm_step(&p, &[1.0, -2.0, 0.5], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h.to_vec(), vec![0.0, 0.0]);
        assert_eq!(c.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn lstm_scalar_hand_values() {
        let p = scalar_lstm_ones();
        let (h, c, _) = lstm_step(&p, &[1.0], &[0.0], &[0.0]).unwrap();
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        let c_hand = s1 * 1.0f64.tanh();
        assert!((c[0] - c_hand).abs() < 1e-15);
        assert!((h[0] - s1 * c_hand.tanh()).abs() < 1e-15);
        // rounded reference values
        assert!((c[0] - 0.55678).abs() < 5e-5);
        assert!((h[0] - 0.36963).abs() < 5e-5);
    }

    #[test]
    fn lstm_forget_gate_halves() {
        let p = LstmParams::zeros(1, 1);
        let (_, c, _) = lstm_step(&p, &[0.0], &[0.0], &[3.0]).unwrap();
        assert_eq!(c[0], 1.5);
    }

    #[test]
    fn lstm_dim_mismatch() {
        let p = LstmParams::zeros(3, 2);
        assert!(lstm_step(&p, &[1.0], &[0.0; 2], &[0.0; 2]).is_err());
        assert!(lstm_step(&p, &[1.0; 3], &[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn logit_cases() {
        let bp = BoundaryParams::zeros(2, 3);
        assert_eq!(boundary_logit(&bp, &[1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);

        let bp = BoundaryParams {
            v_s: vec![1.0].into(),
            w_si: Matrix::from_rows(&[&[2.0]]),
            w_sh: Matrix::from_rows(&[&[-1.0]]),
            b_s: vec![0.5].into(),
        };
        assert_eq!(boundary_logit(&bp, &[1.0], &[1.0]).unwrap(), 1.5);
        let mut scaled = bp.clone();
        scaled.v_s[0] = 3.0;
        assert_eq!(boundary_logit(&scaled, &[1.0], &[1.0]).unwrap(), 4.5);
        assert!(boundary_logit(&bp, &[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn deterministic_tau() {
        assert!(!tau_deterministic(0.0));
        assert!(tau_deterministic(3.2));
        assert!(!tau_deterministic(-0.001));
        assert!(tau_deterministic(1e-300));
    }

    #[test]
    fn stochastic_tau_frequencies() {
        let mut rng = Rng::new(17);
        let freq = |a: f64, rng: &mut Rng| {
            (0..100_000).filter(|_| tau_stochastic(a, rng)).count() as f64 / 1e5
        };
        assert!((freq(0.0, &mut rng) - 0.5).abs() < 0.01);
        assert!(freq(20.0, &mut rng) > 0.9999);
        assert!((freq(3f64.ln(), &mut rng) - 0.75).abs() < 0.01);
    }

    #[test]
    fn forced_zero_is_plain_lstm() {
        let mut rng = Rng::new(2);
        let p = LstmParams::init(3, 4, &mut rng).unwrap();
        let bp = BoundaryParams::init(3, 4, &mut rng).unwrap();
        let mut st = BoundaryState::zeros(4);
        let (mut h, mut c) = (Vector::zeros(4), Vector::zeros(4));
        for _ in 0..6 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let (next, emitted, _) =
                boundary_lstm_step(&p, &bp, &x, &st, StepMode::Forced(false)).unwrap();
            let (h2, c2, _) = lstm_step(&p, &x, &h, &c).unwrap();
            assert!(emitted.is_none());
            assert_eq!(next.h, h2);
            assert_eq!(next.c, c2);
            st = next;
            h = h2;
            c = c2;
        }
    }

    #[test]
    fn forced_one_emits_and_resets() {
        let p = scalar_lstm_ones();
        let bp = BoundaryParams::zeros(1, 1);
        let prev = BoundaryState {
            h: vec![0.9].into(),
            c: vec![0.4].into(),
            s: false,
            logit: 0.0,
        };
        let (next, emitted, _) =
            boundary_lstm_step(&p, &bp, &[1.0], &prev, StepMode::Forced(true)).unwrap();
        assert_eq!(emitted.unwrap().to_vec(), vec![0.9]);
        let (h, c, _) = lstm_step(&p, &[1.0], &[0.0], &[0.0]).unwrap();
        assert_eq!(next.h, h);
        assert_eq!(next.c, c);
        assert!((next.h[0] - 0.369606).abs() < 1e-6);
        assert!(next.s);
    }

    #[test]
    fn gru_hand_values() {
        let p = GruParams::zeros(1, 1, 1);
        let (pt, _) = gru_step(&p, &[1.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(pt[0], 0.0);
        let (pt, _) = gru_step(&p, &[1.0], &[1.0], &[4.0]).unwrap();
        assert_eq!(pt[0], 2.0);

        let mut p = GruParams::zeros(1, 1, 1);
        for m in [
            &mut p.w_zy, &mut p.w_zv, &mut p.w_zh, &mut p.w_ry, &mut p.w_rv, &mut p.w_rh,
            &mut p.w_hy, &mut p.w_hv, &mut p.w_hh,
        ] {
            m.set(0, 0, 1.0);
        }
        let (pt, cache) = gru_step(&p, &[1.0], &[0.0], &[0.0]).unwrap();
        assert!((cache.z[0] - 0.73106).abs() < 1e-5);
        assert!((cache.r[0] - 0.73106).abs() < 1e-5);
        assert!((cache.h_tilde[0] - 0.76159).abs() < 1e-5);
        let z = cache.z[0];
        assert!((pt[0] - z * 1.0f64.tanh()).abs() < 1e-15);
        assert!((pt[0] - 0.55678).abs() < 5e-5);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let p = LstmParams::init(3, 4, &mut rng).unwrap();
        let (_, _, cache) = lstm_step(&p, &[0.3, -0.2, 0.9], &[0.1; 4], &[0.2; 4]).unwrap();
        let mut g = LstmParams::zeros(3, 4);
        lstm_backward(&p, &cache, &[0.0; 4], &[0.0; 4], &mut g).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(lstm_backward(&p, &cache, &[0.0; 3], &[0.0; 4], &mut g).is_err());

        let gp = GruParams::init(2, 3, 4, &mut rng).unwrap();
        let (_, gc) = gru_step(&gp, &[0.1, 0.2], &[0.3; 3], &[0.1; 4]).unwrap();
        let mut gg = GruParams::zeros(2, 3, 4);
        gru_backward(&gp, &[0.3; 3], &gc, &[0.0; 4], &mut gg).unwrap();
        assert!(gg.flatten().iter().all(|v| *v == 0.0));
    }

    // Scalar loss on top of a single step: weighted sum of outputs.
    fn weights(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den < 1e-12 { 0.0 } else { num / den }
    }

    #[test]
    fn lstm_backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let p = LstmParams::init(3, 4, &mut rng).unwrap();
        let x = weights(3, 1);
        let h0 = weights(4, 2);
        let c0 = weights(4, 3);
        let (wh, wc) = (weights(4, 4), weights(4, 5));
        let loss = |p: &LstmParams| {
            let (h, c, _) = lstm_step(p, &x, &h0, &c0).unwrap();
            dot(&h, &wh) + dot(&c, &wc)
        };
        let (_, _, cache) = lstm_step(&p, &x, &h0, &c0).unwrap();
        let mut g = LstmParams::zeros(3, 4);
        let ig = lstm_backward(&p, &cache, &wh, &wc, &mut g).unwrap();
        let fd = finite_diff_grad(loss, &p, 1e-5).unwrap();
        assert!(rel_err(&g.flatten(), &fd.flatten()) < 1e-7);

        let fdx = finite_diff_grad(
            |xv: &Vector| {
                let (h, c, _) = lstm_step(&p, xv, &h0, &c0).unwrap();
                dot(&h, &wh) + dot(&c, &wc)
            },
            &Vector::from(x.clone()),
            1e-5,
        )
        .unwrap();
        assert!(rel_err(&ig.dx, &fdx) < 1e-7);
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let p = GruParams::init(2, 3, 4, &mut rng).unwrap();
        let (y, v, p0, w) = (weights(2, 6), weights(3, 7), weights(4, 8), weights(4, 9));
        let (_, cache) = gru_step(&p, &y, &v, &p0).unwrap();
        let mut g = GruParams::zeros(2, 3, 4);
        let (dy, dv, dp0) = gru_backward(&p, &v, &cache, &w, &mut g).unwrap();
        let fd = finite_diff_grad(
            |p: &GruParams| dot(&gru_step(p, &y, &v, &p0).unwrap().0, &w),
            &p,
            1e-5,
        )
        .unwrap();
        assert!(rel_err(&g.flatten(), &fd.flatten()) < 1e-7);
        for (analytic, which) in [(&dy, 0), (&dv, 1), (&dp0, 2)] {
            let base = [&y, &v, &p0][which].clone();
            let fd = finite_diff_grad(
                |a: &Vector| {
                    let mut args = [y.clone(), v.clone(), p0.clone()];
                    args[which] = a.to_vec();
                    dot(&gru_step(&p, &args[0], &args[1], &args[2]).unwrap().0, &w)
                },
                &Vector::from(base),
                1e-5,
            )
            .unwrap();
            assert!(rel_err(analytic, &fd) < 1e-7);
        }
    }

    #[test]
    fn relaxed_boundary_step_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let p = LstmParams::init(3, 4, &mut rng).unwrap();
        let bp = BoundaryParams::init(3, 4, &mut rng).unwrap();
        let x = weights(3, 1);
        let prev = BoundaryState {
            h: weights(4, 2).into(),
            c: weights(4, 3).into(),
            s: false,
            logit: 0.0,
        };
        let (wh, wc, we) = (weights(4, 4), weights(4, 5), weights(4, 6));
        let loss = |bp: &BoundaryParams| {
            let (next, em, _) =
                boundary_lstm_step(&p, bp, &x, &prev, StepMode::Relaxed).unwrap();
            dot(&next.h, &wh) + dot(&next.c, &wc) + dot(&em.unwrap(), &we)
        };
        let (_, em, cache) = boundary_lstm_step(&p, &bp, &x, &prev, StepMode::Relaxed).unwrap();
        assert!(em.is_some());
        let mut g = LstmParams::zeros(3, 4);
        let mut bg = BoundaryParams::zeros(3, 4);
        let ds_extra = dot(&we, &prev.h);
        boundary_backward(&p, &bp, &cache, &wh, &wc, ds_extra, &mut g, &mut bg).unwrap();
        let fd = finite_diff_grad(loss, &bp, 1e-5).unwrap();
        assert!(rel_err(&bg.flatten(), &fd.flatten()) < 1e-6);
    }

    #[test]
    fn surrogate_uses_sigmoid_derivative() {
        // Same cell, same upstream gradient: the hard straight-through path and
        // the relaxed path both scale d loss / d s by sigmoid'(a) on the way to v_s.
        let mut rng = Rng::new(13);
        let p = LstmParams::init(2, 3, &mut rng).unwrap();
        let bp = BoundaryParams::init(2, 3, &mut rng).unwrap();
        let x = weights(2, 1);
        let prev = BoundaryState {
            h: weights(3, 2).into(),
            c: weights(3, 3).into(),
            s: false,
            logit: 0.0,
        };
        let dh = weights(3, 4);
        let dc = weights(3, 5);
        let (_, _, hard) = boundary_lstm_step(&p, &bp, &x, &prev, StepMode::Test).unwrap();
        let mut g = LstmParams::zeros(2, 3);
        let mut bg = BoundaryParams::zeros(2, 3);
        let lg = lstm_backward(&p, &hard.lstm, &dh, &dc, &mut LstmParams::zeros(2, 3)).unwrap();
        boundary_backward(&p, &bp, &hard, &dh, &dc, 0.0, &mut g, &mut bg).unwrap();
        let ds = -dot(&lg.dh_prev, &prev.h) - dot(&lg.dc_prev, &prev.c);
        let sg = sigmoid(hard.logit);
        for k in 0..3 {
            let expect = ds * sg * (1.0 - sg) * hard.proj[k];
            assert!((bg.v_s[k] - expect).abs() < 1e-12);
        }

        // forced decisions carry no detector gradient
        let (_, _, forced) =
            boundary_lstm_step(&p, &bp, &x, &prev, StepMode::Forced(true)).unwrap();
        let mut bg = BoundaryParams::zeros(2, 3);
        boundary_backward(&p, &bp, &forced, &dh, &dc, 0.0, &mut g, &mut bg).unwrap();
        assert!(bg.flatten().iter().all(|v| *v == 0.0));
    }
}
