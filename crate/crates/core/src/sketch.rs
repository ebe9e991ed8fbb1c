//! Single-level snapshot sketch.
//!
//! Rows land in a Frequent Directions residual buffer `C`. After each row a
//! cheap power-iteration estimate gates a doubling simultaneous-iteration
//! search for the directions of `C` whose squared singular values reach the
//! dump threshold `theta`. Those directions are moved out of `C` into a
//! timestamped [`Snapshot`] holding `Z` and `M = Z^T C'^T C'`, from which the
//! Gram contribution is restored exactly at query time:
//!
//! ```text
//! (C' - C'ZZ^T)^T (C' - C'ZZ^T) + ZM + M^T Z^T - Z(MZ)Z^T = C'^T C'
//! ```
//!
//! The identity holds for any orthonormal `Z`, so approximate singular
//! vectors introduce no restoration error.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{rank_budget, FdBuffer};
use crate::linalg::{
    eigh, power_iteration, power_iterations_for, simul_iter_with, svd, Matrix, Operand, RngState,
    DEFAULT_ITERATION_SCALE,
};

/// Accuracy passed to simultaneous iteration on the plain update path.
pub const EPS_SI: f64 = 0.4;
/// Accuracy used for every candidate when probability amplification is on.
pub const EPS_SI_AMPLIFIED: f64 = 0.2;

/// Directions whose estimated squared singular value falls below this
/// fraction of the leading one are never dumped, even when `theta == 0`.
const NEGLIGIBLE_MASS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Snapshot {
    /// d x xi, orthonormal columns.
    pub z: Matrix,
    /// xi x d, equal to `z^T C'^T C'` at dump time.
    pub m: Matrix,
    pub s: u64,
    pub t: u64,
    /// Threshold in force when the snapshot was taken.
    pub theta: f64,
    /// Estimated squared singular values of the dumped directions.
    pub sigma_sq: Vec<f64>,
}

impl Snapshot {
    pub fn rank(&self) -> usize {
        self.z.ncols()
    }

    pub fn floats(&self) -> usize {
        self.z.len() + self.m.len()
    }

    pub fn contribution(&self) -> Matrix {
        restore_contribution(&self.z, &self.m)
    }
}

/// `Z M + M^T Z^T - Z (M Z) Z^T`, the Gram mass removed by a dump.
pub fn restore_contribution(z: &Matrix, m: &Matrix) -> Matrix {
    let zm = z * m;
    let mz = m * z;
    let inner = z * mz * z.transpose();
    &zm + zm.transpose() - inner
}

/// Queue element: a snapshot, or a row stored verbatim (heavy rows in the
/// sliding-window ladder).
#[derive(Clone, Debug)]
pub enum Entry {
    Snapshot(Snapshot),
    Row { row: Vec<f64>, s: u64, t: u64 },
}

impl Entry {
    pub fn t(&self) -> u64 {
        match self {
            Entry::Snapshot(s) => s.t,
            Entry::Row { t, .. } => *t,
        }
    }

    pub fn s(&self) -> u64 {
        match self {
            Entry::Snapshot(s) => s.s,
            Entry::Row { s, .. } => *s,
        }
    }

    pub fn floats(&self) -> usize {
        match self {
            Entry::Snapshot(s) => s.floats(),
            Entry::Row { row, .. } => row.len(),
        }
    }

    pub fn as_snapshot(&self) -> Option<&Snapshot> {
        match self {
            Entry::Snapshot(s) => Some(s),
            Entry::Row { .. } => None,
        }
    }
}

/// Probability amplification parameters: `candidates` independent subspace
/// estimates per doubling step, each scored by the largest of `probes`
/// power-iteration estimates of its residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Amplification {
    pub delta: f64,
    pub candidates: usize,
    pub probes: usize,
}

impl Amplification {
    /// `r = ceil(log_100(2/delta))`, `s = ceil(2 log_3(2/delta))`, `delta in (0, 1/100]`.
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 0.01) {
            return Err(Error::invalid(format!("delta {delta} outside (0, 1/100]")));
        }
        Ok(Self::from_delta_unchecked(delta))
    }

    fn from_delta_unchecked(delta: f64) -> Self {
        let x = 2.0 / delta;
        let ceil = |v: f64| (v - 1e-12).ceil().max(1.0) as usize;
        Self {
            delta,
            candidates: ceil(x.ln() / 100f64.ln()),
            probes: ceil(2.0 * x.ln() / 3f64.ln()),
        }
    }

    /// Explicit counts, bypassing the delta formula.
    pub fn with_counts(candidates: usize, probes: usize) -> Result<Self> {
        if candidates == 0 || probes == 0 {
            return Err(Error::invalid("amplification counts must be positive"));
        }
        Ok(Self {
            delta: f64::NAN,
            candidates,
            probes,
        })
    }

    /// Counts implied by the formula for any `delta > 0`, without the
    /// `(0, 1/100)` range check.
    pub fn counts_for(delta: f64) -> (usize, usize) {
        let a = Self::from_delta_unchecked(delta);
        (a.candidates, a.probes)
    }
}

/// How dumped directions are found.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factorizer {
    /// Power-iteration gate plus doubling simultaneous iteration.
    #[default]
    Randomized,
    /// Full SVD of the residual after every row (comparison baseline).
    ExactSvd,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub updates: u64,
    pub reductions: u64,
    pub power_iterations: u64,
    pub simul_iters: u64,
    pub doubling_steps: u64,
    pub full_svds: u64,
    pub snapshots: u64,
}

#[derive(Clone, Debug)]
pub struct SnapshotSketch {
    d: usize,
    eps: f64,
    ell: usize,
    theta: f64,
    buf: FdBuffer,
    entries: VecDeque<Entry>,
    clock: u64,
    last_t: u64,
    rng: RngState,
    amplify: Option<Amplification>,
    eps_si: f64,
    iteration_scale: f64,
    factorizer: Factorizer,
    queue_floats: usize,
    stats: UpdateStats,
}

impl SnapshotSketch {
    pub fn new(d: usize, eps: f64, theta: f64, rng: RngState) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let ell = rank_budget(eps)?;
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!("theta {theta} must be finite and >= 0")));
        }
        Ok(Self {
            d,
            eps,
            ell,
            theta,
            buf: FdBuffer::new(ell, d),
            entries: VecDeque::new(),
            clock: 0,
            last_t: 0,
            rng,
            amplify: None,
            eps_si: EPS_SI,
            iteration_scale: DEFAULT_ITERATION_SCALE,
            factorizer: Factorizer::Randomized,
            queue_floats: 0,
            stats: UpdateStats::default(),
        })
    }

    /// Enables probability amplification; [`Self::advance`] then routes
    /// through [`Self::update_amplified`].
    pub fn with_amplification(mut self, amp: Amplification) -> Self {
        self.amplify = Some(amp);
        self
    }

    pub fn with_eps_si(mut self, eps_si: f64) -> Result<Self> {
        if !(eps_si > 0.0 && eps_si < 1.0) {
            return Err(Error::invalid(format!("eps_si {eps_si} outside (0, 1)")));
        }
        self.eps_si = eps_si;
        Ok(self)
    }

    pub fn with_iteration_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid("iteration scale must be positive"));
        }
        self.iteration_scale = scale;
        Ok(self)
    }

    pub fn with_factorizer(mut self, f: Factorizer) -> Self {
        self.factorizer = f;
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.theta = theta.max(0.0);
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Timestamp of the most recently appended queue entry.
    pub fn last_t(&self) -> u64 {
        self.last_t
    }

    pub fn amplification(&self) -> Option<Amplification> {
        self.amplify
    }

    pub fn residual(&self) -> &FdBuffer {
        &self.buf
    }

    pub fn entries(&self) -> &VecDeque<Entry> {
        &self.entries
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.entries.iter().filter_map(Entry::as_snapshot)
    }

    pub fn stats(&self) -> &UpdateStats {
        &self.stats
    }

    /// Floats held by the residual buffer and the queue.
    pub fn stored_floats(&self) -> usize {
        self.buf.filled() * self.d + self.queue_floats
    }

    /// Rows held: residual rows, two per snapshot direction (`Z` and `M`),
    /// one per verbatim row.
    pub fn stored_rows(&self) -> usize {
        self.buf.filled() + self.queue_floats / self.d
    }

    pub fn front(&self) -> Option<&Entry> {
        self.entries.front()
    }

    pub fn pop_front(&mut self) -> Option<Entry> {
        let e = self.entries.pop_front()?;
        self.queue_floats -= e.floats();
        Some(e)
    }

    /// Stores `row` verbatim in the queue without touching the residual.
    pub fn push_exact_row(&mut self, row: &[f64], t: u64) -> Result<()> {
        self.check_row(row, t)?;
        let s = self.last_t + 1;
        self.push_entry(Entry::Row {
            row: row.to_vec(),
            s,
            t,
        });
        self.clock = t;
        Ok(())
    }

    fn push_entry(&mut self, e: Entry) {
        self.last_t = e.t();
        self.queue_floats += e.floats();
        self.entries.push_back(e);
    }

    fn check_row(&self, a: &[f64], i: u64) -> Result<()> {
        if a.len() != self.d {
            return Err(Error::invalid(format!(
                "row has dimension {}, sketch expects {}",
                a.len(),
                self.d
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("row contains non-finite entries"));
        }
        if i <= self.clock {
            return Err(Error::invalid(format!(
                "timestamp {i} does not advance the clock ({})",
                self.clock
            )));
        }
        Ok(())
    }

    /// Plain update with the configured `eps_si` (0.4 by default). Returns
    /// the rank of the snapshot dumped at this step, if any.
    pub fn update(&mut self, a: &[f64], i: u64) -> Result<Option<usize>> {
        self.step(a, i, false)
    }

    /// Update with probability amplification; requires
    /// [`Self::with_amplification`].
    pub fn update_amplified(&mut self, a: &[f64], i: u64) -> Result<Option<usize>> {
        if self.amplify.is_none() {
            return Err(Error::invalid("update_amplified without amplification configured"));
        }
        self.step(a, i, true)
    }

    /// Amplified update when configured, plain otherwise.
    pub fn advance(&mut self, a: &[f64], i: u64) -> Result<Option<usize>> {
        let amplified = self.amplify.is_some();
        self.step(a, i, amplified)
    }

    fn step(&mut self, a: &[f64], i: u64, amplified: bool) -> Result<Option<usize>> {
        self.check_row(a, i)?;
        self.buf.push(a)?;
        if self.buf.is_full() {
            self.buf.reduce()?;
            self.stats.reductions += 1;
        }
        self.clock = i;
        self.stats.updates += 1;
        match self.factorizer {
            Factorizer::Randomized => self.dump_randomized(i, amplified),
            Factorizer::ExactSvd => self.dump_exact(i),
        }
    }

    fn qualifies(&self, sigma: f64, lead: f64) -> bool {
        let sq = sigma * sigma;
        sq >= self.theta && sq > NEGLIGIBLE_MASS * lead * lead
    }

    fn dump_randomized(&mut self, i: u64, amplified: bool) -> Result<Option<usize>> {
        let kmax = self.ell.min(self.d);
        let c = self.buf.top_rows(self.buf.filled().max(kmax));
        let iters = power_iterations_for(self.d);
        let (s1, _) = power_iteration(&c, iters, &mut self.rng)?;
        self.stats.power_iterations += 1;
        if s1 < self.theta / 2.0 || s1 == 0.0 {
            return Ok(None);
        }
        let ranks = doubling_ranks(kmax);
        let eps_si = if amplified { EPS_SI_AMPLIFIED } else { self.eps_si };
        for (step, &k) in ranks.iter().enumerate() {
            let (z, sigma) = if amplified {
                self.amplified_candidate(&c, k)?
            } else {
                self.stats.simul_iters += 1;
                simul_iter_with(Operand::Transposed(&c), k, eps_si, self.iteration_scale, &mut self.rng)?
            };
            self.stats.doubling_steps += 1;
            let last = step + 1 == ranks.len();
            if !self.qualifies(sigma[k - 1], sigma[0]) || last {
                let xi = sigma.iter().take_while(|&&s| self.qualifies(s, sigma[0])).count();
                if xi == 0 {
                    return Ok(None);
                }
                let z = z.columns(0, xi).into_owned();
                let sigma_sq = sigma[..xi].iter().map(|s| s * s).collect();
                self.dump(&c, z, sigma_sq, i);
                return Ok(Some(xi));
            }
        }
        Ok(None)
    }

    /// Best of `r` simultaneous-iteration candidates at rank `k`, scored by
    /// the largest of `s` power-iteration estimates of `||C' - C' Z Z^T||^2`.
    fn amplified_candidate(&mut self, c: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
        let amp = self
            .amplify
            .ok_or_else(|| Error::invalid("amplification not configured"))?;
        let iters = power_iterations_for(self.d);
        let mut best: Option<(f64, Matrix, Vec<f64>)> = None;
        for _ in 0..amp.candidates {
            let (z, sigma) = simul_iter_with(
                Operand::Transposed(c),
                k,
                EPS_SI_AMPLIFIED,
                self.iteration_scale,
                &mut self.rng,
            )?;
            self.stats.simul_iters += 1;
            if amp.candidates == 1 {
                return Ok((z, sigma));
            }
            let xi = sigma.iter().take_while(|&&s| self.qualifies(s, sigma[0])).count();
            let resid = if xi == 0 {
                c.clone()
            } else {
                let zc = z.columns(0, xi);
                c - (c * zc) * zc.transpose()
            };
            let mut score = 0.0f64;
            for _ in 0..amp.probes {
                let (est, _) = power_iteration(&resid, iters, &mut self.rng)?;
                self.stats.power_iterations += 1;
                score = score.max(est);
            }
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, z, sigma));
            }
        }
        let (_, z, sigma) = best.expect("at least one candidate");
        Ok((z, sigma))
    }

    fn dump_exact(&mut self, i: u64) -> Result<Option<usize>> {
        let filled = self.buf.filled();
        if filled == 0 {
            return Ok(None);
        }
        let c = self.buf.top_rows(filled);
        if c.iter().all(|&x| x == 0.0) {
            return Ok(None);
        }
        let s = svd(&c)?;
        self.stats.full_svds += 1;
        let lead = s.sigma[0];
        let xi = s.sigma.iter().take_while(|&&x| self.qualifies(x, lead)).count();
        if xi == 0 {
            return Ok(None);
        }
        let z = s.vt.rows(0, xi).transpose();
        let sigma_sq = s.sigma[..xi].iter().map(|x| x * x).collect();
        self.dump(&c, z, sigma_sq, i);
        Ok(Some(xi))
    }

    /// Records `(Z, Z^T C'^T C')` and removes span(Z) from the residual.
    fn dump(&mut self, c: &Matrix, z: Matrix, sigma_sq: Vec<f64>, i: u64) {
        let cz = c * &z;
        let m = cz.tr_mul(c);
        let reduced = c - &cz * z.transpose();
        let mut full = self.buf.matrix().clone();
        let filled = self.buf.filled();
        full.rows_mut(0, filled).copy_from(&reduced.rows(0, filled));
        self.buf.replace(full);
        let snap = Snapshot {
            z,
            m,
            s: self.last_t + 1,
            t: i,
            theta: self.theta,
            sigma_sq,
        };
        self.stats.snapshots += 1;
        self.push_entry(Entry::Snapshot(snap));
    }

    /// Gram matrix restored from the residual (optionally) and every
    /// snapshot with `lb < t <= ub`, before any shrinking.
    pub fn gram(&self, lb: u64, ub: u64, include_residual: bool) -> Matrix {
        let mut b = if include_residual {
            self.buf.gram()
        } else {
            Matrix::zeros(self.d, self.d)
        };
        for s in self.snapshots().filter(|s| lb < s.t && s.t <= ub) {
            b += s.contribution();
        }
        b
    }

    /// `ell x d` sketch of the rows with timestamps in `(lb, ub]`.
    pub fn query(&self, lb: u64, ub: u64) -> Result<Matrix> {
        if lb >= ub {
            return Err(Error::invalid(format!("query bounds ({lb}, {ub}] are empty")));
        }
        sketch_from_gram(&self.gram(lb, ub, true), self.ell)
    }
}

/// Ranks visited by the doubling search: 2, 4, ... capped at `kmax`.
pub fn doubling_ranks(kmax: usize) -> Vec<usize> {
    if kmax <= 1 {
        return vec![1];
    }
    let steps = (kmax as f64).log2().ceil() as u32;
    (1..=steps).map(|j| (1usize << j).min(kmax)).collect()
}

/// `sqrt(max(Lambda - lambda_ell I, 0)) V^T`, top `ell` rows. Eigenvalues are
/// clamped at zero first.
pub fn sketch_from_gram(b: &Matrix, ell: usize) -> Result<Matrix> {
    let d = b.nrows();
    let mut out = Matrix::zeros(ell, d);
    if b.iter().all(|&x| x == 0.0) {
        return Ok(out);
    }
    let e = eigh(b)?;
    let cut = e.lambda.get(ell.wrapping_sub(1)).copied().unwrap_or(0.0).max(0.0);
    for i in 0..ell.min(d) {
        let w = (e.lambda[i].max(0.0) - cut).max(0.0).sqrt();
        if w > 0.0 {
            out.row_mut(i).copy_from(&(e.v.column(i).transpose() * w));
        }
    }
    Ok(out)
}
