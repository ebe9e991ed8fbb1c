//! Sliding-window covariance sketch over a ladder of snapshot sketches.
//!
//! Level `j` dumps at `theta_j = 2^j eps N`. Rows whose squared norm reaches
//! a level's threshold are stored verbatim at that level. Each level keeps at
//! most `ceil(8/eps)` queue entries; a query uses the finest level that has
//! not evicted anything inside the window.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_norm, Matrix, RngState};
use crate::sketch::{sketch_from_gram, Amplification, Entry, Factorizer, SnapshotSketch};

#[derive(Clone, Debug)]
pub struct WindowQuery {
    pub sketch: Matrix,
    pub level: usize,
    /// Set when no level covered the window head and the level was chosen
    /// from the window mass instead.
    pub fallback: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputWarnings {
    /// Rows with squared norm below 1.
    pub light_rows: u64,
    /// Rows with squared norm above the configured bound.
    pub heavy_rows: u64,
}

/// Exact mass of the last `n` rows.
#[derive(Clone, Debug)]
struct WindowMass {
    n: usize,
    norms: VecDeque<f64>,
    sum: f64,
    since_refresh: usize,
}

impl WindowMass {
    fn new(n: usize) -> Self {
        Self {
            n,
            norms: VecDeque::with_capacity(n.min(1 << 20)),
            sum: 0.0,
            since_refresh: 0,
        }
    }

    fn push(&mut self, sq: f64) {
        self.norms.push_back(sq);
        self.sum += sq;
        if self.norms.len() > self.n {
            self.sum -= self.norms.pop_front().unwrap_or(0.0);
        }
        self.since_refresh += 1;
        if self.since_refresh >= self.n.max(64) {
            self.sum = self.norms.iter().sum();
            self.since_refresh = 0;
        }
    }

    fn get(&self) -> f64 {
        self.sum.max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct WindowSketch {
    d: usize,
    n: u64,
    r_max: f64,
    eps: f64,
    ell: usize,
    cap: usize,
    levels: Vec<SnapshotSketch>,
    /// Largest timestamp popped from each level's queue.
    evicted_through: Vec<u64>,
    mass: WindowMass,
    clock: u64,
    warnings: InputWarnings,
}

/// `ceil(log2(max(r, 2)))`.
pub fn level_count(r_max: f64) -> usize {
    (r_max.max(2.0).log2() - 1e-12).ceil().max(1.0) as usize
}

impl WindowSketch {
    pub fn new(d: usize, n: u64, r_max: f64, eps: f64, rng: RngState) -> Result<Self> {
        Self::build(d, n, r_max, eps, rng, None, Factorizer::Randomized)
    }

    pub fn with_options(
        d: usize,
        n: u64,
        r_max: f64,
        eps: f64,
        rng: RngState,
        amplify: Option<Amplification>,
        factorizer: Factorizer,
    ) -> Result<Self> {
        Self::build(d, n, r_max, eps, rng, amplify, factorizer)
    }

    fn build(
        d: usize,
        n: u64,
        r_max: f64,
        eps: f64,
        rng: RngState,
        amplify: Option<Amplification>,
        factorizer: Factorizer,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        if !(r_max >= 1.0) || !r_max.is_finite() {
            return Err(Error::invalid(format!("norm bound {r_max} must be finite and >= 1")));
        }
        let count = level_count(r_max);
        let mut levels = Vec::with_capacity(count);
        for j in 0..count {
            let theta = (1u64 << j) as f64 * eps * n as f64;
            let mut level =
                SnapshotSketch::new(d, eps, theta, rng.split((rng.stream() << 8) | j as u64))?
                    .with_factorizer(factorizer);
            if let Some(a) = amplify {
                level = level.with_amplification(a);
            }
            levels.push(level);
        }
        let ell = levels[0].ell();
        Ok(Self {
            d,
            n,
            r_max,
            eps,
            ell,
            cap: (8.0 / eps - 1e-9).ceil() as usize,
            evicted_through: vec![0; count],
            levels,
            mass: WindowMass::new(n as usize),
            clock: 0,
            warnings: InputWarnings::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn window(&self) -> u64 {
        self.n
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn queue_cap(&self) -> usize {
        self.cap
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn levels(&self) -> &[SnapshotSketch] {
        &self.levels
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.theta()).collect()
    }

    pub fn warnings(&self) -> &InputWarnings {
        &self.warnings
    }

    /// Exact squared Frobenius norm of the rows in the current window.
    pub fn window_mass(&self) -> f64 {
        self.mass.get()
    }

    pub fn stored_floats(&self) -> usize {
        self.levels.iter().map(|l| l.stored_floats()).sum()
    }

    pub fn stored_rows(&self) -> usize {
        self.levels.iter().map(|l| l.stored_rows()).sum()
    }

    pub fn update(&mut self, a: &[f64], i: u64) -> Result<()> {
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
        let sq = squared_norm(a);
        if sq < 1.0 {
            self.warnings.light_rows += 1;
            tracing::debug!(t = i, norm_sq = sq, "row below unit mass");
        } else if sq > self.r_max {
            self.warnings.heavy_rows += 1;
            tracing::debug!(t = i, norm_sq = sq, "row above norm bound");
        }
        let horizon = i.saturating_sub(self.n);
        for (j, level) in self.levels.iter_mut().enumerate() {
            while level.front().is_some_and(|e| e.t() <= horizon) {
                let e = level.pop_front().expect("front exists");
                self.evicted_through[j] = self.evicted_through[j].max(e.t());
            }
            if sq >= level.theta() {
                level.push_exact_row(a, i)?;
            } else {
                level.advance(a, i)?;
            }
            while level.entries().len() > self.cap {
                let e = level.pop_front().expect("queue over cap");
                self.evicted_through[j] = self.evicted_through[j].max(e.t());
            }
        }
        self.mass.push(sq);
        self.clock = i;
        Ok(())
    }

    /// Finest level that has evicted nothing after the window head, if any.
    pub fn covering_level(&self) -> Option<usize> {
        let head = self.clock.saturating_sub(self.n);
        (0..self.levels.len()).find(|&j| self.evicted_through[j] <= head)
    }

    /// Level implied by the window mass: `clamp(floor(log2(F_W / N)), 0, L-1)`.
    pub fn mass_level(&self) -> usize {
        let ratio = self.window_mass() / self.n as f64;
        let j = if ratio >= 1.0 { ratio.log2().floor() as usize } else { 0 };
        j.min(self.levels.len() - 1)
    }

    /// Total snapshot rank in the window at level `j`.
    pub fn window_rank(&self, j: usize) -> usize {
        let head = self.clock.saturating_sub(self.n);
        self.levels[j]
            .snapshots()
            .filter(|s| s.t > head)
            .map(|s| s.rank())
            .sum()
    }

    /// Gram of level `j` restricted to the window, heavy rows included,
    /// before any shrinking.
    pub fn level_gram(&self, j: usize) -> Matrix {
        let head = self.clock.saturating_sub(self.n);
        let level = &self.levels[j];
        let mut b = level.gram(head, self.clock, true);
        for e in level.entries() {
            if let Entry::Row { row, t, .. } = e {
                if *t > head {
                    let v = crate::linalg::Vector::from_column_slice(row);
                    b += &v * v.transpose();
                }
            }
        }
        b
    }

    pub fn query(&self) -> Result<WindowQuery> {
        if self.clock == 0 {
            return Err(Error::invalid("window query before any update"));
        }
        let (level, fallback) = match self.covering_level() {
            Some(j) => (j, false),
            None => (self.mass_level(), true),
        };
        if fallback {
            tracing::debug!(level, "no level covers the window head");
        }
        let sketch = sketch_from_gram(&self.level_gram(level), self.ell)?;
        Ok(WindowQuery {
            sketch,
            level,
            fallback,
        })
    }
}
