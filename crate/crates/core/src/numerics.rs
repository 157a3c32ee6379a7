//! Dense linear algebra, activations, seeded randomness, initializers and
//! the central-difference gradient oracle.
//!
//! Everything is `f64`. Vectors are plain `Vec<f64>` behind a newtype so
//! they can take part in parameter traversal; matrices are row-major.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic generator used everywhere in the project (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Independent child stream, a pure function of the parent's seed and `stream`.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut child = ChaCha8Rng::seed_from_u64(self.seed);
        child.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner: child,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input. Meant for tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape {
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        (0..self.rows).map(|i| self.get(i, j)).collect::<Vec<_>>().into()
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// `W · x`
    pub fn matvec(&self, x: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.rows);
        self.matvec_add(x, &mut out);
        out
    }

    /// `out += W · x`
    #[inline]
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, x);
        }
    }

    /// `out += Wᵀ · g`
    #[inline]
    pub fn matvec_t_add(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (gi, row) in g.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if *gi != 0.0 {
                axpy(*gi, row, out);
            }
        }
    }

    /// `W += g · xᵀ`
    #[inline]
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols.max(1);
        for (gi, row) in g.iter().zip(self.data.chunks_exact_mut(cols)) {
            if *gi != 0.0 {
                axpy(*gi, x, row);
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul {} by {}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn nonzero_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        Err(Error::invalid(format!(
            "initializer needs positive dimensions, got {rows}x{cols}"
        )))
    } else {
        Ok(())
    }
}

/// Zero-mean Gaussian entries with variance `2 / (rows + cols)`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    nonzero_dims(rows, cols)?;
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Glorot-scaled vector, for row vectors such as the boundary projection.
pub fn glorot_vector(dim: usize, rng: &mut Rng) -> Result<Vector> {
    Ok(glorot_init(dim, 1, rng)?.data.into())
}

/// Square orthogonal matrix: the Q factor of a standard Gaussian matrix,
/// signs fixed so that R has a positive diagonal.
///
/// Gram-Schmidt on the columns yields exactly that factorization; each
/// column is orthogonalized twice to hold orthogonality near machine precision.
pub fn orthogonal_init(dim: usize, rng: &mut Rng) -> Result<Matrix> {
    nonzero_dims(dim, dim)?;
    loop {
        let cols: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        if let Some(q) = gram_schmidt(cols) {
            let mut m = Matrix::zeros(dim, dim);
            for (j, col) in q.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    m.set(i, j, *v);
                }
            }
            return Ok(m);
        }
    }
}

fn gram_schmidt(mut cols: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for _pass in 0..2 {
            for q in done.iter() {
                let proj = dot(q, col);
                axpy(-proj, q, col);
            }
        }
        let norm = dot(col, col).sqrt();
        // rank-deficient draw; the caller redraws
        if norm < 1e-10 {
            return None;
        }
        col.iter_mut().for_each(|v| *v /= norm);
    }
    Some(cols)
}

/// Joins a parameter path segment, `"a" + "b" -> "a.b"`.
pub fn join_path(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// A tree of named parameter tensors that can be walked in a fixed order.
///
/// Gradients, optimizer accumulators and checkpoints all reuse the shape of
/// the parameter tree they belong to.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s, _| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, expected {n}",
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        Ok(())
    }

    /// Adds `delta` to the coordinate at flat index `index`.
    fn perturb(&mut self, index: usize, delta: f64) {
        let mut off = 0;
        self.visit_mut("", &mut |_, _, d| {
            if index >= off && index < off + d.len() {
                d[index - off] += delta;
            }
            off += d.len();
        });
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v = value));
    }

    fn scale(&mut self, alpha: f64) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v *= alpha));
    }

    /// `self += alpha * other`; the two trees must share a layout.
    fn add_scaled(&mut self, other: &Self, alpha: f64)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, _, d| {
            axpy(alpha, &flat[off..off + d.len()], d);
            off += d.len();
        });
    }

    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `(path, shape)` of every tensor in traversal order.
    fn layout(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, s, _| out.push((name.to_string(), s)));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

impl ParamSet for Matrix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        f(prefix, self.shape(), &self.data)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        let s = self.shape();
        f(prefix, s, &mut self.data)
    }
}

impl ParamSet for Vector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        let s = Shape {
            rows: self.dim(),
            cols: 1,
        };
        f(prefix, s, &self.0)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        let s = Shape {
            rows: self.dim(),
            cols: 1,
        };
        f(prefix, s, &mut self.0)
    }
}

/// Implements [`ParamSet`] for a struct by visiting the listed fields in order.
macro_rules! param_set {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::numerics::ParamSet for $ty {
            fn visit(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::numerics::Shape, &[f64]),
            ) {
                $( self.$field.visit(&$crate::numerics::join_path(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::numerics::Shape, &mut [f64]),
            ) {
                $( self.$field.visit_mut(&$crate::numerics::join_path(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use param_set;

/// Central-difference gradient of `loss_fn` at `params`, one coordinate at a time.
pub fn finite_diff_grad<P, F>(mut loss_fn: F, params: &P, eps: f64) -> Result<P>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let base = loss_fn(params);
    if !base.is_finite() {
        return Err(Error::NumericFailure(format!(
            "loss is not finite at the base point ({base})"
        )));
    }
    let n = params.num_params();
    let mut work = params.clone();
    let mut grad = vec![0.0; n];
    for (i, g) in grad.iter_mut().enumerate() {
        work.perturb(i, eps);
        let up = loss_fn(&work);
        work.perturb(i, -2.0 * eps);
        let down = loss_fn(&work);
        work.perturb(i, eps);
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "loss is not finite around coordinate {i}"
            )));
        }
        *g = (up - down) / (2.0 * eps);
    }
    let mut out = params.clone();
    out.assign_flat(&grad)?;
    Ok(out)
}
