//! Shrink-and-forget reductions: Frequent Directions for a single row stream
//! and Co-occurring Directions for paired column streams.

use crate::error::{Error, Result};
use crate::linalg::{qr_thin, svd, Matrix};

/// Rank budget `ceil(2 / eps)` used by every sketch in this crate.
pub fn rank_budget(eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1]")));
    }
    // Guard against 2/eps landing a hair above an integer.
    Ok(((2.0 / eps) - 1e-9).ceil().max(1.0) as usize)
}

/// Row buffer of capacity `2 * ell`; rows at index `>= filled` are zero.
#[derive(Clone, Debug)]
pub struct FdBuffer {
    ell: usize,
    buf: Matrix,
    filled: usize,
}

impl FdBuffer {
    pub fn new(ell: usize, d: usize) -> Self {
        Self {
            ell,
            buf: Matrix::zeros(2 * ell, d),
            filled: 0,
        }
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn dim(&self) -> usize {
        self.buf.ncols()
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.buf.nrows()
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    /// The full `2 * ell` row matrix, zero rows included.
    pub fn matrix(&self) -> &Matrix {
        &self.buf
    }

    /// First `rows` rows (zero padding included when `rows > filled`).
    pub fn top_rows(&self, rows: usize) -> Matrix {
        self.buf.rows(0, rows.min(self.capacity())).into_owned()
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::invalid(format!(
                "row has dimension {}, buffer expects {}",
                row.len(),
                self.dim()
            )));
        }
        if self.is_full() {
            return Err(Error::invalid("push into a full buffer; reduce first"));
        }
        for (j, &x) in row.iter().enumerate() {
            self.buf[(self.filled, j)] = x;
        }
        self.filled += 1;
        Ok(())
    }

    /// Applies [`fd_reduce`] and compacts the surviving rows to the top.
    pub fn reduce(&mut self) -> Result<()> {
        let out = fd_reduce(&self.buf, self.ell)?;
        self.filled = (0..out.nrows())
            .rposition(|i| out.row(i).iter().any(|&x| x != 0.0))
            .map_or(0, |i| i + 1);
        self.buf = out;
        Ok(())
    }

    /// Replaces the contents with `m` (same shape); `filled` is kept as is.
    pub(crate) fn replace(&mut self, m: Matrix) {
        debug_assert_eq!(m.shape(), self.buf.shape());
        self.buf = m;
    }

    pub fn gram(&self) -> Matrix {
        let c = self.buf.rows(0, self.filled);
        c.tr_mul(&c)
    }
}

/// One Frequent Directions shrink: every squared singular value is reduced
/// by the `ell`-th one and clamped at zero. The output has the input's shape
/// with at most `ell - 1` nonzero rows, stored at the top.
pub fn fd_reduce(b: &Matrix, ell: usize) -> Result<Matrix> {
    if ell == 0 {
        return Err(Error::invalid("fd_reduce with ell = 0"));
    }
    let (rows, d) = b.shape();
    let mut out = Matrix::zeros(rows, d);
    if b.iter().all(|&x| x == 0.0) {
        return Ok(out);
    }
    let s = svd(b)?;
    let cut = s.sigma.get(ell - 1).copied().unwrap_or(0.0);
    let cut_sq = cut * cut;
    for (i, &sg) in s.sigma.iter().enumerate().take(rows) {
        let shrunk = (sg * sg - cut_sq).max(0.0).sqrt();
        if shrunk > 0.0 {
            let mut row = out.row_mut(i);
            row.copy_from(&(s.vt.row(i) * shrunk));
        }
    }
    Ok(out)
}

/// Shrinks an arbitrary stack of rows down to an `ell x d` sketch, used to
/// merge partial sketches.
pub fn fd_merge(b: &Matrix, ell: usize) -> Result<Matrix> {
    let d = b.ncols();
    let mut out = Matrix::zeros(ell, d);
    if b.nrows() == 0 || b.iter().all(|&x| x == 0.0) {
        return Ok(out);
    }
    let s = svd(b)?;
    let cut = s.sigma.get(ell - 1).copied().unwrap_or(0.0);
    let cut_sq = cut * cut;
    for (i, &sg) in s.sigma.iter().enumerate().take(ell) {
        let shrunk = (sg * sg - cut_sq).max(0.0).sqrt();
        if shrunk > 0.0 {
            out.row_mut(i).copy_from(&(s.vt.row(i) * shrunk));
        }
    }
    Ok(out)
}

/// Runs Frequent Directions over a whole stream and returns the occupied
/// rows of the final buffer.
pub fn fd_stream<R: AsRef<[f64]>>(rows: &[R], ell: usize) -> Result<Matrix> {
    let d = rows
        .first()
        .map(|r| r.as_ref().len())
        .ok_or_else(|| Error::invalid("fd_stream on an empty stream"))?;
    let mut buf = FdBuffer::new(ell, d);
    for r in rows {
        buf.push(r.as_ref())?;
        if buf.is_full() {
            buf.reduce()?;
        }
    }
    Ok(buf.top_rows(buf.filled()))
}

/// Co-occurring Directions shrink on column buffers `a` (d_x x c) and
/// `b` (d_y x c): singular values of `a b^T` are reduced by the `ell`-th one.
/// Outputs keep the input shapes with surviving columns at the front.
pub fn cod_reduce(a: &Matrix, b: &Matrix, ell: usize) -> Result<(Matrix, Matrix)> {
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!(
            "cod_reduce column mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if ell == 0 {
        return Err(Error::invalid("cod_reduce with ell = 0"));
    }
    let mut a_out = Matrix::zeros(a.nrows(), a.ncols());
    let mut b_out = Matrix::zeros(b.nrows(), b.ncols());
    if a.iter().all(|&x| x == 0.0) || b.iter().all(|&x| x == 0.0) {
        return Ok((a_out, b_out));
    }
    let (qa, ra) = qr_thin(a);
    let (qb, rb) = qr_thin(b);
    let core = &ra * rb.transpose();
    let s = svd(&core)?;
    let cut = s.sigma.get(ell - 1).copied().unwrap_or(0.0);
    let left = &qa * &s.u;
    let right = &qb * s.vt.transpose();
    let cols = a.ncols();
    for (i, &sg) in s.sigma.iter().enumerate().take(cols) {
        let w = (sg - cut).max(0.0).sqrt();
        if w > 0.0 {
            a_out.column_mut(i).copy_from(&(left.column(i) * w));
            b_out.column_mut(i).copy_from(&(right.column(i) * w));
        }
    }
    Ok((a_out, b_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{RngState, Vector};

    fn sym_spectral(m: &Matrix) -> f64 {
        m.clone()
            .try_symmetric_eigen(f64::EPSILON, 0)
            .expect("eigen converges")
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &x| a.max(x.abs()))
    }

    #[test]
    fn rank_budget_values() {
        assert_eq!(rank_budget(0.1).unwrap(), 20);
        assert_eq!(rank_budget(1.0).unwrap(), 2);
        assert_eq!(rank_budget(0.05).unwrap(), 40);
        assert_eq!(rank_budget(0.2).unwrap(), 10);
        assert!(rank_budget(0.0).is_err());
        assert!(rank_budget(1.5).is_err());
    }

    #[test]
    fn reduce_diagonal() {
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 3.0, 2.0, 1.0]));
        let out = fd_reduce(&b, 2).unwrap();
        let s = svd(&out).unwrap();
        assert!((s.sigma[0] - 7f64.sqrt()).abs() < 1e-12);
        assert!(s.sigma[1..].iter().all(|&x| x.abs() < 1e-12));
        assert!(fd_reduce(&Matrix::zeros(4, 3), 2).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reduce_gap_is_ell_th_squared_value() {
        let mut rng = RngState::new(21, 0);
        let ell = 4;
        let b = rng.gaussian_matrix(2 * ell, 12);
        let sigma_ell = svd(&b).unwrap().sigma[ell - 1];
        let out = fd_reduce(&b, ell).unwrap();
        let gap = sym_spectral(&(b.transpose() * &b - out.transpose() * &out));
        assert!((gap - sigma_ell * sigma_ell).abs() < 1e-9);
        let nonzero = (0..out.nrows()).filter(|&i| out.row(i).norm() > 0.0).count();
        assert!(nonzero < ell);
    }

    #[test]
    fn buffer_compacts_after_reduce() {
        let mut rng = RngState::new(2, 0);
        let mut buf = FdBuffer::new(3, 5);
        for _ in 0..6 {
            let r: Vec<f64> = (0..5).map(|_| rng.gaussian()).collect();
            buf.push(&r).unwrap();
        }
        assert!(buf.is_full());
        assert!(buf.push(&[0.0; 5]).is_err());
        buf.reduce().unwrap();
        assert!(buf.filled() <= 2);
        for i in buf.filled()..buf.capacity() {
            assert!(buf.matrix().row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn stream_single_row_verbatim() {
        let out = fd_stream(&[vec![1.0, 2.0, 3.0]], 2).unwrap();
        assert_eq!(out.shape(), (1, 3));
        assert_eq!(out.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn stream_stacked_identity() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let b = fd_stream(&rows, 2).unwrap();
        let err = sym_spectral(&(Matrix::identity(4, 4) - b.transpose() * &b));
        assert!(err <= 2.0 + 1e-12);
    }

    #[test]
    fn stream_rejects_ragged() {
        assert!(fd_stream(&[vec![1.0, 2.0], vec![1.0]], 2).is_err());
    }

    #[test]
    fn cod_diagonal() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 3.0, 2.0, 1.0]));
        let (a2, b2) = cod_reduce(&a, &a, 2).unwrap();
        // singular values of a a^T are (16, 9, 4, 1); shrink by sigma_2 = 9
        let s = svd(&(&a2 * b2.transpose())).unwrap();
        assert!((s.sigma[0] - 7.0).abs() < 1e-12);
        assert!(s.sigma[1..].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn cod_diagonal_columns() {
        // columns diag(4,3,2,1) paired with themselves: product spectrum (16,9,4,1)
        // and with the square-root pair the spectrum of a b^T is (4,3,2,1).
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3f64.sqrt(), 2f64.sqrt(), 1.0]));
        let b = a.clone();
        let (a2, b2) = cod_reduce(&a, &b, 2).unwrap();
        let s = svd(&(&a2 * b2.transpose())).unwrap();
        assert!((s.sigma[0] - 1.0).abs() < 1e-12);
        assert!(s.sigma[1..].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn cod_zero_and_mismatch() {
        let (a, b) = cod_reduce(&Matrix::zeros(3, 4), &Matrix::identity(2, 4), 2).unwrap();
        assert!(a.iter().chain(b.iter()).all(|&x| x == 0.0));
        assert!(cod_reduce(&Matrix::zeros(3, 4), &Matrix::zeros(3, 3), 2).is_err());
    }

    #[test]
    fn cod_gap_is_ell_th_singular_value() {
        let mut rng = RngState::new(8, 0);
        let ell = 3;
        let a = rng.gaussian_matrix(7, 2 * ell);
        let b = rng.gaussian_matrix(5, 2 * ell);
        let p = &a * b.transpose();
        let sigma_ell = svd(&p).unwrap().sigma[ell - 1];
        let (a2, b2) = cod_reduce(&a, &b, ell).unwrap();
        let gap = svd(&(p - &a2 * b2.transpose())).unwrap().sigma[0];
        assert!((gap - sigma_ell).abs() < 1e-9);
    }
}
