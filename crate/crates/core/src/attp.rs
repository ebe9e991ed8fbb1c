//! At-the-time persistent covariance sketch: answers queries about any prefix
//! `A_t` of the stream after the fact.
//!
//! The dump threshold follows the running mass, `theta = eps * ||A_t||_F^2`.
//! Snapshots are immutable once queued, so a historical query sums the
//! contributions of snapshots with `t_s <= t`. The residual buffer holds a
//! mixture of all times and is left out of historical queries; its spectral
//! mass stays below `theta`.

use crate::error::{Error, Result};
use crate::linalg::{squared_norm, Matrix, RngState};
use crate::sketch::{sketch_from_gram, Amplification, Factorizer, Snapshot, SnapshotSketch};

#[derive(Clone, Debug)]
pub struct PersistentSketch {
    inner: SnapshotSketch,
    fro_mass: f64,
    clock: u64,
}

impl PersistentSketch {
    pub fn new(d: usize, eps: f64, rng: RngState) -> Result<Self> {
        Ok(Self {
            inner: SnapshotSketch::new(d, eps, 0.0, rng)?,
            fro_mass: 0.0,
            clock: 0,
        })
    }

    pub fn with_amplification(mut self, amp: Amplification) -> Self {
        self.inner = self.inner.with_amplification(amp);
        self
    }

    pub fn with_factorizer(mut self, f: Factorizer) -> Self {
        self.inner = self.inner.with_factorizer(f);
        self
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn ell(&self) -> usize {
        self.inner.ell()
    }

    pub fn eps(&self) -> f64 {
        self.inner.eps()
    }

    pub fn theta(&self) -> f64 {
        self.inner.theta()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Running `||A_t||_F^2` over processed rows.
    pub fn fro_mass(&self) -> f64 {
        self.fro_mass
    }

    pub fn inner(&self) -> &SnapshotSketch {
        &self.inner
    }

    pub fn stored_floats(&self) -> usize {
        self.inner.stored_floats()
    }

    pub fn stored_rows(&self) -> usize {
        self.inner.stored_rows()
    }

    /// Total rank of all stored snapshots.
    pub fn snapshot_rank(&self) -> usize {
        self.inner.snapshots().map(Snapshot::rank).sum()
    }

    /// Absorbs `a` at time `i`; returns the rank dumped, if any.
    pub fn update(&mut self, a: &[f64], i: u64) -> Result<Option<usize>> {
        if a.len() != self.dim() {
            return Err(Error::invalid(format!(
                "row has dimension {}, sketch expects {}",
                a.len(),
                self.dim()
            )));
        }
        if i <= self.clock {
            return Err(Error::invalid(format!(
                "timestamp {i} does not advance the clock ({})",
                self.clock
            )));
        }
        let mass = self.fro_mass + squared_norm(a);
        self.inner.set_theta(self.inner.eps() * mass);
        let out = self.inner.advance(a, i)?;
        self.fro_mass = mass;
        self.clock = i;
        Ok(out)
    }

    /// Snapshots with dump time at most `t`.
    pub fn snapshots_through(&self, t: u64) -> impl Iterator<Item = &Snapshot> {
        let entries = self.inner.entries();
        let end = entries.partition_point(|e| e.t() <= t);
        entries.range(..end).filter_map(|e| e.as_snapshot())
    }

    /// Restored Gram of the prefix `(0, t]`, before shrinking.
    pub fn gram_at(&self, t: u64) -> Matrix {
        let d = self.dim();
        let mut b = Matrix::zeros(d, d);
        for s in self.snapshots_through(t) {
            b += s.contribution();
        }
        b
    }

    /// `ell x d` sketch of `A_t`.
    pub fn query(&self, t: u64) -> Result<Matrix> {
        if t == 0 || t > self.clock {
            return Err(Error::invalid(format!(
                "query time {t} outside (0, {}]",
                self.clock
            )));
        }
        sketch_from_gram(&self.gram_at(t), self.ell())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm_sym;

    #[test]
    fn threshold_tracks_mass() {
        let mut p = PersistentSketch::new(3, 0.1, RngState::new(0, 0)).unwrap();
        p.update(&[1.0, 0.0, 0.0], 1).unwrap();
        assert!((p.theta() - 0.1).abs() < 1e-15);
        let mut rng = RngState::new(2, 2);
        let mut total = 1.0;
        for i in 2..200u64 {
            let v: Vec<f64> = rng.gaussian_vector(3).iter().copied().collect();
            total += squared_norm(&v);
            p.update(&v, i).unwrap();
        }
        assert!((p.fro_mass() - total).abs() <= 1e-9 * total);
        assert_eq!(p.theta(), 0.1 * p.fro_mass());
    }

    #[test]
    fn first_row_is_recovered() {
        let mut p = PersistentSketch::new(3, 0.5, RngState::new(0, 0)).unwrap();
        p.update(&[2.0, 1.0, 0.0], 1).unwrap();
        p.update(&[0.0, 0.0, 1.0], 2).unwrap();
        let b = p.query(1).unwrap();
        let exact = Matrix::from_row_slice(1, 3, &[2.0, 1.0, 0.0]);
        let err = spectral_norm_sym(&(exact.transpose() * &exact - b.transpose() * &b)).unwrap();
        assert!(err <= 0.5 * 5.0 + 1e-9);
    }

    #[test]
    fn query_range_checked() {
        let mut p = PersistentSketch::new(2, 0.5, RngState::new(0, 0)).unwrap();
        assert!(p.query(1).is_err());
        p.update(&[1.0, 0.0], 1).unwrap();
        assert!(p.query(0).is_err());
        assert!(p.query(2).is_err());
        assert!(p.query(1).is_ok());
    }

    #[test]
    fn historical_answers_do_not_change() {
        let mut p = PersistentSketch::new(4, 0.25, RngState::new(5, 0)).unwrap();
        let mut rng = RngState::new(6, 1);
        for i in 1..=100u64 {
            let v: Vec<f64> = rng.gaussian_vector(4).iter().copied().collect();
            p.update(&v, i).unwrap();
        }
        let before = p.query(60).unwrap();
        for i in 101..=300u64 {
            let v: Vec<f64> = rng.gaussian_vector(4).iter().copied().collect();
            p.update(&v, i).unwrap();
        }
        assert_eq!(before, p.query(60).unwrap());
    }
}
