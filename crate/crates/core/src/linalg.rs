//! Dense matrix kernels shared by every sketch.
//!
//! Deterministic factorizations pin down sign conventions so that snapshots
//! are reproducible bit-for-bit. `svd` and `eigh` run on faer: nalgebra's
//! bidiagonal SVD can return a wrong factorization for a buffer holding one
//! real row among entries near 1e-16, which is exactly what the residual
//! looks like after a dump. `qr` stays on nalgebra. The
//! randomized estimators (`power_iteration`, `simul_iter`) draw their Gaussian
//! test vectors from an [`RngState`].

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Scale `c` in `q = ceil(c * log2(max(d, 2)) / eps_si)` for simultaneous iteration.
pub const DEFAULT_ITERATION_SCALE: f64 = 1.0;

/// Splittable, reproducible random source.
///
/// Gaussian draws use the ziggurat sampler of `rand_distr::StandardNormal`
/// on top of a ChaCha8 stream selected by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh state on another stream of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn gaussian_vector(&mut self, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| self.gaussian())
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.gaussian())
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Thin singular value decomposition `a = u * diag(sigma) * vt`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

/// Symmetric eigendecomposition `b = v * diag(lambda) * v^T`, `lambda` descending.
#[derive(Clone, Debug)]
pub struct Eigh {
    pub lambda: Vec<f64>,
    pub v: Matrix,
}

pub fn check_finite(a: &Matrix) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("matrix contains non-finite entries"))
    }
}

/// Builds a matrix from row vectors; rejects ragged or non-finite input.
pub fn matrix_from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Matrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    let mut data = Vec::with_capacity(n * d);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::invalid(format!(
                "row {i} has {} entries, expected {d}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    let m = Matrix::from_row_slice(n, d, &data);
    check_finite(&m)?;
    Ok(m)
}

pub fn squared_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Flips each (u column, vt row) pair so the largest-magnitude entry of the
/// row of `vt` is positive.
fn normalize_svd_signs(u: &mut Matrix, vt: &mut Matrix) {
    for i in 0..vt.nrows() {
        if leading_entry_negative(vt.row(i).iter().copied()) {
            vt.row_mut(i).neg_mut();
            if i < u.ncols() {
                u.column_mut(i).neg_mut();
            }
        }
    }
}

fn leading_entry_negative(it: impl Iterator<Item = f64>) -> bool {
    let mut best = 0.0f64;
    for x in it {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    best < 0.0
}

fn to_faer(a: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)])
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.is_empty() {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    check_finite(a)?;
    let dec = to_faer(a)
        .thin_svd()
        .map_err(|e| Error::invalid(format!("svd did not converge: {e:?}")))?;
    let (fu, fs, fv) = (dec.U(), dec.S().column_vector(), dec.V());
    let mut order: Vec<usize> = (0..fs.nrows()).collect();
    order.sort_by(|&i, &j| fs[j].total_cmp(&fs[i]));
    let sigma: Vec<f64> = order.iter().map(|&i| fs[i].max(0.0)).collect();
    let mut u = Matrix::from_fn(fu.nrows(), order.len(), |r, c| fu[(r, order[c])]);
    let mut vt = Matrix::from_fn(order.len(), fv.nrows(), |r, c| fv[(c, order[r])]);
    normalize_svd_signs(&mut u, &mut vt);
    Ok(Svd { u, sigma, vt })
}

/// Eigendecomposition of a symmetric matrix. The input is symmetrized as
/// `(b + b^T) / 2` first; eigenvalues may be negative.
pub fn eigh(b: &Matrix) -> Result<Eigh> {
    if !b.is_square() {
        return Err(Error::invalid(format!(
            "eigh needs a square matrix, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if b.is_empty() {
        return Err(Error::invalid("eigh of an empty matrix"));
    }
    check_finite(b)?;
    let sym = (b + b.transpose()) * 0.5;
    let dec = to_faer(&sym)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::invalid(format!("eigendecomposition did not converge: {e:?}")))?;
    let (fs, fv) = (dec.S().column_vector(), dec.U());
    let n = fs.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| fs[j].total_cmp(&fs[i]));
    let lambda = order.iter().map(|&i| fs[i]).collect();
    let mut v = Matrix::from_fn(n, n, |r, c| fv[(r, order[c])]);
    for c in 0..n {
        if leading_entry_negative(v.column(c).iter().copied()) {
            v.column_mut(c).neg_mut();
        }
    }
    Ok(Eigh { lambda, v })
}

/// Thin QR with a nonnegative diagonal on `r`. Requires `rows >= cols`.
pub fn qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    if a.nrows() < a.ncols() {
        return Err(Error::invalid(format!(
            "qr needs rows >= cols, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a)?;
    Ok(qr_thin(a))
}

/// Householder QR for any shape: `q` is m x min(m,n), `r` is min(m,n) x n.
pub(crate) fn qr_thin(a: &Matrix) -> (Matrix, Matrix) {
    let dec = a.clone().qr();
    let mut q = dec.q();
    let mut r = dec.r();
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// Orthonormal basis of the column span of `k` (d x k, d >= k).
fn orthonormalize(k: &Matrix) -> Matrix {
    qr_thin(k).0
}

/// Iteration count used by the sketches: `ceil(log2(max(d, 2))) + 1`.
pub fn power_iterations_for(d: usize) -> usize {
    (d.max(2) as f64).log2().ceil() as usize + 1
}

/// Estimates the top eigenpair of `a^T a` by `iters` rounds of the power
/// method from a Gaussian start. Returns `(sigma1_sq_hat, v1_hat)` with
/// `sigma1_sq_hat = v^T a^T a v`.
pub fn power_iteration(a: &Matrix, iters: usize, rng: &mut RngState) -> Result<(f64, Vector)> {
    if iters == 0 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    let d = a.ncols();
    if d == 0 {
        return Err(Error::invalid("power iteration on a matrix without columns"));
    }
    let mut x = rng.gaussian_vector(d);
    if a.iter().all(|&v| v == 0.0) {
        let mut e1 = Vector::zeros(d);
        e1[0] = 1.0;
        return Ok((0.0, e1));
    }
    let n0 = x.norm();
    if n0 > 0.0 {
        x /= n0;
    }
    for _ in 0..iters {
        let ax = a * &x;
        let y = a.tr_mul(&ax);
        let n = y.norm();
        if n == 0.0 || !n.is_finite() {
            break;
        }
        x = y / n;
    }
    let ax = a * &x;
    Ok((ax.norm_squared(), x))
}

/// Which factor of a stored matrix the randomized range finder operates on.
#[derive(Clone, Copy)]
pub(crate) enum Operand<'a> {
    /// The matrix itself: ranges are column spaces of `a`.
    Plain(&'a Matrix),
    /// Its transpose: ranges are row spaces of `a`, i.e. left singular
    /// vectors of `a^T`.
    Transposed(&'a Matrix),
}

impl Operand<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            Operand::Plain(a) => (a.nrows(), a.ncols()),
            Operand::Transposed(a) => (a.ncols(), a.nrows()),
        }
    }

    fn mul(&self, x: &Matrix) -> Matrix {
        match self {
            Operand::Plain(a) => *a * x,
            Operand::Transposed(a) => a.tr_mul(x),
        }
    }

    fn tr_mul(&self, x: &Matrix) -> Matrix {
        match self {
            Operand::Plain(a) => a.tr_mul(x),
            Operand::Transposed(a) => *a * x,
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Operand::Plain(a) | Operand::Transposed(a) => a.iter().all(|&v| v == 0.0),
        }
    }
}

/// Number of subspace iterations for dimension `d` and accuracy `eps_si`.
pub fn subspace_iterations_for(d: usize, eps_si: f64, scale: f64) -> usize {
    ((scale * (d.max(2) as f64).log2()) / eps_si).ceil().max(1.0) as usize
}

/// Randomized simultaneous iteration for the top-`k` left singular subspace
/// of `a` (d x n). Returns `z` (d x k, orthonormal columns) and descending
/// estimates of the top `k` singular values.
pub fn simul_iter(a: &Matrix, k: usize, eps_si: f64, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
    simul_iter_with(Operand::Plain(a), k, eps_si, DEFAULT_ITERATION_SCALE, rng)
}

pub(crate) fn simul_iter_with(
    a: Operand<'_>,
    k: usize,
    eps_si: f64,
    scale: f64,
    rng: &mut RngState,
) -> Result<(Matrix, Vec<f64>)> {
    let (d, n) = a.dims();
    if k == 0 || k > d.min(n) {
        return Err(Error::invalid(format!(
            "simul_iter rank {k} outside 1..={}",
            d.min(n)
        )));
    }
    if !(eps_si > 0.0 && eps_si < 1.0) {
        return Err(Error::invalid(format!("eps_si {eps_si} outside (0, 1)")));
    }
    if a.is_zero() {
        return Ok((Matrix::identity(d, k), vec![0.0; k]));
    }
    let q_iters = subspace_iterations_for(d, eps_si, scale);
    let pi = rng.gaussian_matrix(n, k);
    let mut q = orthonormalize(&a.mul(&pi));
    for _ in 0..q_iters {
        let w = a.tr_mul(&q);
        q = orthonormalize(&a.mul(&w));
    }
    let w = a.tr_mul(&q);
    let m = w.tr_mul(&w);
    let e = eigh(&m)?;
    let z = q * e.v;
    let sigma = e.lambda.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok((z, sigma))
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(svd(a)?.sigma.first().copied().unwrap_or(0.0))
}

/// Spectral norm of a symmetric matrix via its eigenvalues.
pub fn spectral_norm_sym(b: &Matrix) -> Result<f64> {
    let e = eigh(b)?;
    Ok(e.lambda.iter().fold(0.0f64, |acc, &l| acc.max(l.abs())))
}
