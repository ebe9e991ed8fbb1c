//! Sliding-window approximate matrix multiplication.
//!
//! [`CodSketch`] tracks `X_W Y_W^T` for paired streams `x_i` (d_x) and `y_i`
//! (d_y) with Co-occurring Directions column buffers plus snapshot dumping of
//! the heavy left/right subspaces of the buffered product. [`MultiLevelCod`]
//! runs a threshold ladder for unknown window mass and [`AdaptiveCod`]
//! adjusts one threshold from the snapshot queue length.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::fd::{cod_reduce, rank_budget};
use crate::linalg::{
    power_iteration, power_iterations_for, simul_iter_with, svd, Matrix, Operand, RngState,
    DEFAULT_ITERATION_SCALE,
};
use crate::sketch::{doubling_ranks, Amplification, UpdateStats, EPS_SI, EPS_SI_AMPLIFIED};

#[derive(Clone, Debug)]
pub struct CodSnapshot {
    /// d_x x xi.
    pub z: Matrix,
    /// d_y x xi.
    pub h: Matrix,
    /// xi x d_y, `z^T A'B'^T`.
    pub zm: Matrix,
    /// d_x x xi, `A'B'^T h`.
    pub mh: Matrix,
    pub s: u64,
    pub t: u64,
    pub sigma: Vec<f64>,
}

impl CodSnapshot {
    pub fn rank(&self) -> usize {
        self.z.ncols()
    }

    pub fn floats(&self) -> usize {
        self.z.len() + self.h.len() + self.zm.len() + self.mh.len()
    }

    /// `Z zm + mh H^T - Z (zm H) H^T`.
    pub fn contribution(&self) -> Matrix {
        restore_product(&self.z, &self.h, &self.zm, &self.mh)
    }
}

pub fn restore_product(z: &Matrix, h: &Matrix, zm: &Matrix, mh: &Matrix) -> Matrix {
    let zmh = zm * h;
    z * zm + mh * h.transpose() - z * zmh * h.transpose()
}

/// Query result: `a b^T` approximates `X_W Y_W^T`.
#[derive(Clone, Debug)]
pub struct ProductSketch {
    /// d_x x ell.
    pub a: Matrix,
    /// d_y x ell.
    pub b: Matrix,
}

impl ProductSketch {
    pub fn product(&self) -> Matrix {
        &self.a * self.b.transpose()
    }
}

/// Shrinks the singular values of `p` by its `ell`-th one and returns the
/// two `ell`-column factors.
pub fn product_from_matrix(p: &Matrix, ell: usize) -> Result<ProductSketch> {
    let (dx, dy) = p.shape();
    let mut a = Matrix::zeros(dx, ell);
    let mut b = Matrix::zeros(dy, ell);
    if p.iter().all(|&x| x == 0.0) {
        return Ok(ProductSketch { a, b });
    }
    let s = svd(p)?;
    let cut = s.sigma.get(ell - 1).copied().unwrap_or(0.0).max(0.0);
    for i in 0..ell.min(s.sigma.len()) {
        let w = (s.sigma[i] - cut).max(0.0).sqrt();
        if w > 0.0 {
            a.column_mut(i).copy_from(&(s.u.column(i) * w));
            b.column_mut(i).copy_from(&(s.vt.row(i).transpose() * w));
        }
    }
    Ok(ProductSketch { a, b })
}

#[derive(Clone, Debug)]
pub struct CodSketch {
    dx: usize,
    dy: usize,
    eps: f64,
    ell: usize,
    theta: f64,
    n: u64,
    a: Matrix,
    b: Matrix,
    filled: usize,
    snaps: VecDeque<CodSnapshot>,
    clock: u64,
    last_t: u64,
    rng: RngState,
    amplify: Option<Amplification>,
    queue_floats: usize,
    stats: UpdateStats,
}

impl CodSketch {
    pub fn new(dx: usize, dy: usize, eps: f64, theta: f64, n: u64, rng: RngState) -> Result<Self> {
        if dx == 0 || dy == 0 {
            return Err(Error::invalid("dimensions must be at least 1"));
        }
        if n == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!("theta {theta} must be finite and >= 0")));
        }
        let ell = rank_budget(eps)?;
        Ok(Self {
            dx,
            dy,
            eps,
            ell,
            theta,
            n,
            a: Matrix::zeros(dx, 2 * ell),
            b: Matrix::zeros(dy, 2 * ell),
            filled: 0,
            snaps: VecDeque::new(),
            clock: 0,
            last_t: 0,
            rng,
            amplify: None,
            queue_floats: 0,
            stats: UpdateStats::default(),
        })
    }

    pub fn with_amplification(mut self, amp: Amplification) -> Self {
        self.amplify = Some(amp);
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dx, self.dy)
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

    pub fn window(&self) -> u64 {
        self.n
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn buffers(&self) -> (&Matrix, &Matrix) {
        (&self.a, &self.b)
    }

    pub fn snapshots(&self) -> &VecDeque<CodSnapshot> {
        &self.snaps
    }

    pub fn stats(&self) -> &UpdateStats {
        &self.stats
    }

    pub fn stored_floats(&self) -> usize {
        self.filled * (self.dx + self.dy) + self.queue_floats
    }

    /// Buffer columns plus two rows per snapshot direction on each side,
    /// counted in units of `d_x + d_y` floats.
    pub fn stored_rows(&self) -> usize {
        self.stored_floats() / (self.dx + self.dy)
    }

    fn pop_front(&mut self) -> Option<CodSnapshot> {
        let s = self.snaps.pop_front()?;
        self.queue_floats -= s.floats();
        Some(s)
    }

    /// Drops snapshots with `t + N <= i`; returns the largest dropped `t`.
    fn expire(&mut self, i: u64) -> Option<u64> {
        let mut last = None;
        while self.snaps.front().is_some_and(|s| s.t + self.n <= i) {
            last = self.pop_front().map(|s| s.t);
        }
        last
    }

    /// Absorbs the pair `(x, y)` at time `i`; returns the rank dumped, if any.
    pub fn update(&mut self, x: &[f64], y: &[f64], i: u64) -> Result<Option<usize>> {
        if x.len() != self.dx || y.len() != self.dy {
            return Err(Error::invalid(format!(
                "pair has dimensions ({}, {}), sketch expects ({}, {})",
                x.len(),
                y.len(),
                self.dx,
                self.dy
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pair contains non-finite entries"));
        }
        if i <= self.clock {
            return Err(Error::invalid(format!(
                "timestamp {i} does not advance the clock ({})",
                self.clock
            )));
        }
        self.expire(i);
        self.a.column_mut(self.filled).copy_from_slice(x);
        self.b.column_mut(self.filled).copy_from_slice(y);
        self.filled += 1;
        if self.filled == 2 * self.ell {
            let (a, b) = cod_reduce(&self.a, &self.b, self.ell)?;
            self.a = a;
            self.b = b;
            self.filled = (0..2 * self.ell)
                .rev()
                .find(|&c| {
                    self.a.column(c).iter().any(|&v| v != 0.0)
                        || self.b.column(c).iter().any(|&v| v != 0.0)
                })
                .map_or(0, |c| c + 1);
            self.stats.reductions += 1;
        }
        self.clock = i;
        self.stats.updates += 1;
        self.dump(i)
    }

    fn qualifies(&self, sigma: f64, lead: f64) -> bool {
        sigma >= self.theta && sigma > 1e-12 * lead
    }

    fn dump(&mut self, i: u64) -> Result<Option<usize>> {
        if self.filled == 0 {
            return Ok(None);
        }
        let a = self.a.columns(0, self.filled).into_owned();
        let b = self.b.columns(0, self.filled).into_owned();
        let p = &a * b.transpose();
        let iters = power_iterations_for(self.dx.max(self.dy));
        let (s1_sq, _) = power_iteration(&p, iters, &mut self.rng)?;
        self.stats.power_iterations += 1;
        let s1 = s1_sq.sqrt();
        if s1 < self.theta / 2.0 || s1 == 0.0 {
            return Ok(None);
        }
        let kmax = self.ell.min(self.dx).min(self.dy);
        let ranks = doubling_ranks(kmax);
        for (step, &k) in ranks.iter().enumerate() {
            let (z, sigma) = self.left_candidate(&p, k)?;
            let (h, _) = simul_iter_with(
                Operand::Transposed(&p),
                k,
                self.eps_si(),
                DEFAULT_ITERATION_SCALE,
                &mut self.rng,
            )?;
            self.stats.simul_iters += 1;
            self.stats.doubling_steps += 1;
            let last = step + 1 == ranks.len();
            if !self.qualifies(sigma[k - 1], sigma[0]) || last {
                let xi = sigma.iter().take_while(|&&s| self.qualifies(s, sigma[0])).count();
                if xi == 0 {
                    return Ok(None);
                }
                let z = z.columns(0, xi).into_owned();
                let h = h.columns(0, xi).into_owned();
                let zm = z.tr_mul(&p);
                let mh = &p * &h;
                let za = z.tr_mul(&a);
                let hb = h.tr_mul(&b);
                let a_new = &a - &z * za;
                let b_new = &b - &h * hb;
                self.a.columns_mut(0, self.filled).copy_from(&a_new);
                self.b.columns_mut(0, self.filled).copy_from(&b_new);
                let snap = CodSnapshot {
                    z,
                    h,
                    zm,
                    mh,
                    s: self.last_t + 1,
                    t: i,
                    sigma: sigma[..xi].to_vec(),
                };
                self.last_t = i;
                self.queue_floats += snap.floats();
                self.snaps.push_back(snap);
                self.stats.snapshots += 1;
                return Ok(Some(xi));
            }
        }
        Ok(None)
    }

    fn eps_si(&self) -> f64 {
        if self.amplify.is_some() {
            EPS_SI_AMPLIFIED
        } else {
            EPS_SI
        }
    }

    /// Left subspace estimate at rank `k`; with amplification, the best of
    /// `r` candidates by estimated `||(I - ZZ^T) P||_2`.
    fn left_candidate(&mut self, p: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
        let eps_si = self.eps_si();
        let Some(amp) = self.amplify else {
            self.stats.simul_iters += 1;
            return simul_iter_with(Operand::Plain(p), k, eps_si, DEFAULT_ITERATION_SCALE, &mut self.rng);
        };
        let iters = power_iterations_for(self.dx.max(self.dy));
        let mut best: Option<(f64, Matrix, Vec<f64>)> = None;
        for _ in 0..amp.candidates {
            let (z, sigma) =
                simul_iter_with(Operand::Plain(p), k, eps_si, DEFAULT_ITERATION_SCALE, &mut self.rng)?;
            self.stats.simul_iters += 1;
            if amp.candidates == 1 {
                return Ok((z, sigma));
            }
            let xi = sigma.iter().take_while(|&&s| self.qualifies(s, sigma[0])).count();
            let resid = if xi == 0 {
                p.clone()
            } else {
                let zc = z.columns(0, xi);
                p - zc * (zc.transpose() * p)
            };
            let mut score = 0.0f64;
            for _ in 0..amp.probes {
                let (est, _) = power_iteration(&resid, iters, &mut self.rng)?;
                self.stats.power_iterations += 1;
                score = score.max(est);
            }
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, z, sigma));
            }
        }
        let (_, z, sigma) = best.expect("at least one candidate");
        Ok((z, sigma))
    }

    /// Residual product plus restored contributions with `lb < t`, before
    /// shrinking.
    pub fn product_since(&self, lb: u64) -> Matrix {
        let a = self.a.columns(0, self.filled);
        let b = self.b.columns(0, self.filled);
        let mut p = a * b.transpose();
        for s in self.snaps.iter().filter(|s| s.t > lb) {
            p += s.contribution();
        }
        p
    }

    /// Sketch of the current window.
    pub fn query(&self) -> Result<ProductSketch> {
        product_from_matrix(&self.product_since(0), self.ell)
    }
}

/// Ladder of [`CodSketch`] levels with thresholds `2^j eps N`, mirroring the
/// covariance window ladder. Each level keeps at most `ceil(8/eps)`
/// snapshots.
#[derive(Clone, Debug)]
pub struct MultiLevelCod {
    levels: Vec<CodSketch>,
    evicted_through: Vec<u64>,
    cap: usize,
    n: u64,
    clock: u64,
    /// `||x_i|| ||y_i||` of the rows in the window.
    mass: VecDeque<f64>,
    mass_sum: f64,
}

impl MultiLevelCod {
    pub fn new(
        dx: usize,
        dy: usize,
        n: u64,
        r_max: f64,
        eps: f64,
        rng: RngState,
        amplify: Option<Amplification>,
    ) -> Result<Self> {
        if !(r_max >= 1.0) || !r_max.is_finite() {
            return Err(Error::invalid(format!("norm bound {r_max} must be finite and >= 1")));
        }
        let count = crate::window::level_count(r_max);
        let mut levels = Vec::with_capacity(count);
        for j in 0..count {
            let theta = (1u64 << j) as f64 * eps * n as f64;
            let mut level = CodSketch::new(dx, dy, eps, theta, n, rng.split((rng.stream() << 8) | j as u64))?;
            if let Some(a) = amplify {
                level = level.with_amplification(a);
            }
            levels.push(level);
        }
        Ok(Self {
            levels,
            evicted_through: vec![0; count],
            cap: (8.0 / eps - 1e-9).ceil() as usize,
            n,
            clock: 0,
            mass: VecDeque::new(),
            mass_sum: 0.0,
        })
    }

    pub fn levels(&self) -> &[CodSketch] {
        &self.levels
    }

    pub fn ell(&self) -> usize {
        self.levels[0].ell()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn stored_floats(&self) -> usize {
        self.levels.iter().map(CodSketch::stored_floats).sum()
    }

    pub fn stored_rows(&self) -> usize {
        self.levels.iter().map(CodSketch::stored_rows).sum()
    }

    pub fn update(&mut self, x: &[f64], y: &[f64], i: u64) -> Result<()> {
        for (j, level) in self.levels.iter_mut().enumerate() {
            level.update(x, y, i)?;
            while level.snaps.len() > self.cap {
                let s = level.pop_front().expect("queue over cap");
                self.evicted_through[j] = self.evicted_through[j].max(s.t);
            }
        }
        let w = crate::linalg::squared_norm(x).sqrt() * crate::linalg::squared_norm(y).sqrt();
        self.mass.push_back(w);
        self.mass_sum += w;
        if self.mass.len() as u64 > self.n {
            self.mass_sum -= self.mass.pop_front().unwrap_or(0.0);
        }
        if i.is_multiple_of(self.n.max(64)) {
            self.mass_sum = self.mass.iter().sum();
        }
        self.clock = i;
        Ok(())
    }

    pub fn covering_level(&self) -> Option<usize> {
        let head = self.clock.saturating_sub(self.n);
        (0..self.levels.len()).find(|&j| self.evicted_through[j] <= head)
    }

    pub fn mass_level(&self) -> usize {
        let ratio = self.mass_sum.max(0.0) / self.n as f64;
        let j = if ratio >= 1.0 { ratio.log2().floor() as usize } else { 0 };
        j.min(self.levels.len() - 1)
    }

    /// Sketch from the selected level, with the level index and whether the
    /// mass-based fallback was used.
    pub fn query(&self) -> Result<(ProductSketch, usize, bool)> {
        let (j, fallback) = match self.covering_level() {
            Some(j) => (j, false),
            None => (self.mass_level(), true),
        };
        Ok((self.levels[j].query()?, j, fallback))
    }
}

/// Single-threshold window product sketch whose threshold doubles or halves
/// with the snapshot queue length. An auxiliary sketch started at the last
/// window boundary replaces the main one every `N` steps.
#[derive(Clone, Debug)]
pub struct AdaptiveCod {
    main: CodSketch,
    aux: CodSketch,
    level: u32,
    theta0: f64,
    restarts: u64,
}

impl AdaptiveCod {
    pub fn new(dx: usize, dy: usize, eps: f64, theta0: f64, n: u64, rng: RngState) -> Result<Self> {
        let main = CodSketch::new(dx, dy, eps, theta0, n, rng.split(rng.stream() << 8))?;
        let aux = CodSketch::new(dx, dy, eps, theta0, n, rng.split((rng.stream() << 8) | 1))?;
        Ok(Self {
            main,
            aux,
            level: 1,
            theta0,
            restarts: 1,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn theta(&self) -> f64 {
        self.main.theta()
    }

    pub fn main(&self) -> &CodSketch {
        &self.main
    }

    pub fn aux(&self) -> &CodSketch {
        &self.aux
    }

    pub fn update(&mut self, x: &[f64], y: &[f64], i: u64) -> Result<()> {
        let n = self.main.window();
        if i > 1 && (i - 1).is_multiple_of(n) {
            let (dx, dy) = self.main.dims();
            let rng = self.aux.rng.split(self.aux.rng.stream() + self.restarts * 2);
            self.restarts += 1;
            let mut fresh = CodSketch::new(dx, dy, self.main.eps(), self.theta(), n, rng)?;
            fresh.clock = self.aux.clock;
            fresh.last_t = self.aux.clock;
            self.main = std::mem::replace(&mut self.aux, fresh);
        }
        self.main.update(x, y, i)?;
        self.aux.update(x, y, i)?;
        let len = self.main.snapshots().len() as f64;
        let eps = self.main.eps();
        let l = self.level as f64;
        if len >= l / eps {
            self.level += 1;
        } else if self.level > 1 && len <= (l - 1.0) / eps {
            self.level -= 1;
        } else {
            return Ok(());
        }
        let theta = self.theta0 * 2f64.powi(self.level as i32 - 1);
        self.main.set_theta(theta);
        self.aux.set_theta(theta);
        Ok(())
    }

    pub fn query(&self) -> Result<ProductSketch> {
        self.main.query()
    }
}
