//! Scenario runner: feeds a stream through one sketch, probes it against an
//! exact oracle every `query_every` steps and reports size, time and
//! communication counters.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::amm::MultiLevelCod;
use crate::attp::PersistentSketch;
use crate::distributed::{SimConfig, Simulation};
use crate::error::{Error, Result};
use crate::fd::{rank_budget, FdBuffer};
use crate::linalg::{matrix_from_rows, spectral_norm, spectral_norm_sym, squared_norm, Matrix, RngState, Vector};
use crate::sketch::{Amplification, Factorizer};
use crate::streams::{generate_rows, load_stream, norm_report, normalize, FileFormat, GenKind, GenSpec, NormReport};
use crate::window::WindowSketch;

/// Frozen CSV header.
pub const CSV_HEADER: &str =
    "step,empirical_error,sketch_rows,sketch_bytes,amortized_update_ns,comm_bytes,level_selected";

pub const DEFAULT_QUERY_EVERY: u64 = 20;
pub const DEFAULT_ORACLE_CAP: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Sw,
    Attp,
    Amm,
    Dist,
    DistSw,
    Fd,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Sw,
        Scenario::Attp,
        Scenario::Amm,
        Scenario::Dist,
        Scenario::DistSw,
        Scenario::Fd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sw => "sw",
            Scenario::Attp => "attp",
            Scenario::Amm => "amm",
            Scenario::Dist => "dist",
            Scenario::DistSw => "dist-sw",
            Scenario::Fd => "fd",
        }
    }

    fn windowed(self) -> bool {
        matches!(self, Scenario::Sw | Scenario::Amm | Scenario::DistSw)
    }

    fn distributed(self) -> bool {
        matches!(self, Scenario::Dist | Scenario::DistSw)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Input {
    Gen { kind: GenKind, rows: usize, zeta: f64 },
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Svd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub eps: f64,
    pub dim: usize,
    #[serde(default)]
    pub dim_y: Option<usize>,
    #[serde(default)]
    pub window: Option<u64>,
    /// Squared-norm bound; derived from the stream when absent.
    #[serde(default)]
    pub r_max: Option<f64>,
    #[serde(default = "one")]
    pub sites: usize,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_query_every")]
    pub query_every: u64,
    pub input: Input,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub baseline: Option<Baseline>,
    #[serde(default = "default_oracle_cap")]
    pub oracle_cap: usize,
    /// Message delivery delay in ticks for distributed scenarios.
    #[serde(default)]
    pub latency: u64,
}

fn one() -> usize {
    1
}

fn default_query_every() -> u64 {
    DEFAULT_QUERY_EVERY
}

fn default_oracle_cap() -> usize {
    DEFAULT_ORACLE_CAP
}

impl RunConfig {
    /// Generated-input config with defaults for everything optional.
    pub fn generated(scenario: Scenario, eps: f64, dim: usize, kind: GenKind, rows: usize) -> Self {
        Self {
            scenario,
            eps,
            dim,
            dim_y: None,
            window: None,
            r_max: None,
            sites: 1,
            delta: None,
            seed: 0,
            query_every: DEFAULT_QUERY_EVERY,
            input: Input::Gen { kind, rows, zeta: 1.0 },
            normalize: false,
            baseline: None,
            oracle_cap: DEFAULT_ORACLE_CAP,
            latency: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        rank_budget(self.eps)?;
        if self.dim == 0 || self.dim_y == Some(0) {
            return Err(Error::invalid("dimensions must be at least 1"));
        }
        if self.scenario.windowed() && !self.window.is_some_and(|n| n >= 1) {
            return Err(Error::invalid(format!("scenario {} needs --window", self.scenario)));
        }
        if self.scenario.distributed() && self.sites == 0 {
            return Err(Error::invalid("distributed scenarios need at least one site"));
        }
        if self.query_every == 0 {
            return Err(Error::invalid("query interval must be at least 1"));
        }
        if let Some(r) = self.r_max {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(Error::invalid(format!("rmax {r} must be finite and >= 1")));
            }
        }
        if let Some(d) = self.delta {
            Amplification::new(d)?;
            if self.scenario == Scenario::Fd {
                return Err(Error::invalid("fd has no randomized step to amplify"));
            }
        }
        if self.baseline.is_some() && matches!(self.scenario, Scenario::Amm | Scenario::Fd) {
            return Err(Error::invalid(format!(
                "no SVD baseline for scenario {}",
                self.scenario
            )));
        }
        if let Input::Gen { rows, zeta, kind } = &self.input {
            if *rows == 0 {
                return Err(Error::invalid("--rows must be at least 1"));
            }
            if *kind == GenKind::RandomNoisy && !(*zeta > 0.0) {
                return Err(Error::invalid("--zeta must be positive"));
            }
        }
        Ok(())
    }

    fn amplification(&self) -> Result<Option<Amplification>> {
        self.delta.map(Amplification::new).transpose()
    }

    fn factorizer(&self) -> Factorizer {
        match self.baseline {
            Some(Baseline::Svd) => Factorizer::ExactSvd,
            None => Factorizer::Randomized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: u64,
    pub empirical_error: Option<f64>,
    pub sketch_rows: usize,
    pub sketch_bytes: u64,
    pub cum_update_ns: u64,
    pub amortized_update_ns: u64,
    pub comm_bytes: Option<u64>,
    pub level_selected: Option<usize>,
}

impl MetricsReport {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            opt(self.empirical_error.map(|e| e.to_string())),
            self.sketch_rows,
            self.sketch_bytes,
            self.amortized_update_ns,
            opt(self.comm_bytes.map(|c| c.to_string())),
            opt(self.level_selected.map(|l| l.to_string())),
        )
    }
}

pub fn write_csv<W: Write>(reports: &[MetricsReport], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_line())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutput {
    pub reports: Vec<MetricsReport>,
    pub norms: NormReport,
    /// Squared-norm bound used for the level ladder.
    pub r_max: Option<f64>,
    pub notes: Vec<String>,
}

impl RunOutput {
    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        write_csv(&self.reports, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn max_error(&self) -> Option<f64> {
        self.reports
            .iter()
            .filter_map(|r| r.empirical_error)
            .fold(None, |acc, e| Some(acc.map_or(e, |a: f64| a.max(e))))
    }
}

/// Brute-force reference for covariance error.
pub struct CovarianceOracle {
    cap: usize,
}

impl CovarianceOracle {
    pub fn new(cap: usize) -> Self {
        Self { cap }
    }

    /// `||A^T A - B^T B||_2 / ||A||_F^2` for the rows of `a`.
    pub fn error<R: AsRef<[f64]>>(&self, rows: &[R], sketch: &Matrix) -> Result<f64> {
        if rows.len() > self.cap {
            return Err(Error::OracleCapExceeded {
                rows: rows.len(),
                cap: self.cap,
            });
        }
        let a = matrix_from_rows(rows)?;
        covariance_error(&(a.transpose() * &a), sketch)
    }
}

/// Relative covariance error given the exact Gram `ata`.
pub fn covariance_error(ata: &Matrix, sketch: &Matrix) -> Result<f64> {
    let mass = ata.trace();
    if mass <= 0.0 {
        return Ok(0.0);
    }
    let diff = ata - sketch.transpose() * sketch;
    Ok(spectral_norm_sym(&diff)? / mass)
}

/// `||X^T Y - a b^T||_2 / (||X||_F ||Y||_F)` for row matrices `x`, `y`.
pub fn product_error(x: &Matrix, y: &Matrix, approx: &Matrix) -> Result<f64> {
    let scale = x.norm() * y.norm();
    if scale <= 0.0 {
        return Ok(0.0);
    }
    Ok(spectral_norm(&(x.transpose() * y - approx))? / scale)
}

/// Loaded stream plus the norm report.
struct Data {
    rows: Vec<Vec<f64>>,
    /// Second factor for AMM.
    rows_y: Vec<Vec<f64>>,
    norms: NormReport,
}

fn load_data(cfg: &RunConfig, notes: &mut Vec<String>) -> Result<Data> {
    let dim_y = cfg.dim_y.unwrap_or(cfg.dim);
    let per_site = if cfg.scenario.distributed() { cfg.sites } else { 1 };
    let (mut rows, mut rows_y) = match &cfg.input {
        Input::Gen { kind, rows, zeta } => {
            let spec = |dim| GenSpec {
                kind: *kind,
                rows: *rows,
                dim,
                zeta: *zeta,
                seed: cfg.seed,
            };
            if cfg.scenario == Scenario::Amm {
                (generate_rows(&spec(cfg.dim), 0)?, generate_rows(&spec(dim_y), 1)?)
            } else {
                let streams = (0..per_site)
                    .map(|j| generate_rows(&spec(cfg.dim), j as u64))
                    .collect::<Result<Vec<_>>>()?;
                (interleave(streams), Vec::new())
            }
        }
        Input::File { path } => {
            let recs = load_stream(path, FileFormat::from_path(path))?;
            let all: Vec<Vec<f64>> = recs.into_iter().map(|r| r.vec).collect();
            if all.is_empty() {
                return Err(Error::invalid(format!("{} holds no rows", path.display())));
            }
            let want = if cfg.scenario == Scenario::Amm { cfg.dim + dim_y } else { cfg.dim };
            if all[0].len() != want {
                return Err(Error::invalid(format!(
                    "{} has {} columns, configuration expects {want}",
                    path.display(),
                    all[0].len()
                )));
            }
            if cfg.scenario == Scenario::Amm {
                let (x, y) = all.into_iter().map(|r| (r[..cfg.dim].to_vec(), r[cfg.dim..].to_vec())).unzip();
                (x, y)
            } else {
                (all, Vec::new())
            }
        }
    };
    if cfg.normalize {
        let rep = normalize(&mut rows)?;
        notes.push(format!("normalized rows: induced R = {}", rep.ratio()));
        if !rows_y.is_empty() {
            normalize(&mut rows_y)?;
        }
    }
    let norms = norm_report(&rows);
    if norms.min_sq < 1.0 {
        notes.push(format!(
            "smallest squared row norm {} is below 1; consider --normalize",
            norms.min_sq
        ));
    }
    Ok(Data { rows, rows_y, norms })
}

/// Round-robin merge: element `k` of stream `j` lands at `k * m + j`.
fn interleave(streams: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let m = streams.len();
    let n = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut iters: Vec<_> = streams.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        for it in iters.iter_mut() {
            if let Some(r) = it.next() {
                out.push(r);
            }
        }
    }
    out
}

struct Clock {
    cum_ns: u64,
}

impl Clock {
    fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.cum_ns += start.elapsed().as_nanos() as u64;
        out
    }
}

struct Recorder {
    reports: Vec<MetricsReport>,
    peak_rows: usize,
    peak_floats: usize,
    cap_noted: bool,
}

impl Recorder {
    fn new() -> Self {
        Self {
            reports: Vec::new(),
            peak_rows: 0,
            peak_floats: 0,
            cap_noted: false,
        }
    }

    fn observe(&mut self, rows: usize, floats: usize) {
        self.peak_rows = self.peak_rows.max(rows);
        self.peak_floats = self.peak_floats.max(floats);
    }

    fn error(&mut self, r: Result<f64>, notes: &mut Vec<String>) -> Result<Option<f64>> {
        match r {
            Ok(e) => Ok(Some(e)),
            Err(Error::OracleCapExceeded { rows, cap }) => {
                if !self.cap_noted {
                    notes.push(format!("oracle skipped: {rows} rows exceeds cap {cap}"));
                    self.cap_noted = true;
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn push(&mut self, step: u64, error: Option<f64>, clock: &Clock, comm: Option<u64>, level: Option<usize>) {
        self.reports.push(MetricsReport {
            step,
            empirical_error: error,
            sketch_rows: self.peak_rows,
            sketch_bytes: 8 * self.peak_floats as u64,
            cum_update_ns: clock.cum_ns,
            amortized_update_ns: clock.cum_ns / step.max(1),
            comm_bytes: comm,
            level_selected: level,
        });
    }
}

/// Runs one scenario end to end.
pub fn run_scenario(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut notes = Vec::new();
    let data = load_data(cfg, &mut notes)?;
    let mut rec = Recorder::new();
    let mut clock = Clock { cum_ns: 0 };
    let oracle = CovarianceOracle::new(cfg.oracle_cap);
    let rng = RngState::new(cfg.seed, 0);
    let amp = cfg.amplification()?;
    let q = cfg.query_every;
    let mut r_used = None;
    match cfg.scenario {
        Scenario::Fd => {
            let ell = rank_budget(cfg.eps)?;
            let mut buf = FdBuffer::new(ell, cfg.dim);
            let mut gram = Matrix::zeros(cfg.dim, cfg.dim);
            for (k, row) in data.rows.iter().enumerate() {
                let i = k as u64 + 1;
                clock.time(|| -> Result<()> {
                    buf.push(row)?;
                    if buf.is_full() {
                        buf.reduce()?;
                    }
                    Ok(())
                })?;
                accumulate(&mut gram, row);
                rec.observe(buf.filled(), buf.filled() * cfg.dim);
                if i.is_multiple_of(q) {
                    let b = buf.top_rows(buf.filled());
                    let err = if k + 1 > cfg.oracle_cap {
                        Err(Error::OracleCapExceeded { rows: k + 1, cap: cfg.oracle_cap })
                    } else {
                        covariance_error(&gram, &b)
                    };
                    let err = rec.error(err, &mut notes)?;
                    rec.push(i, err, &clock, None, None);
                }
            }
        }
        Scenario::Attp => {
            let mut sk = PersistentSketch::new(cfg.dim, cfg.eps, rng)?.with_factorizer(cfg.factorizer());
            if let Some(a) = amp {
                sk = sk.with_amplification(a);
            }
            let mut gram = Matrix::zeros(cfg.dim, cfg.dim);
            for (k, row) in data.rows.iter().enumerate() {
                let i = k as u64 + 1;
                clock.time(|| sk.update(row, i))?;
                accumulate(&mut gram, row);
                rec.observe(sk.stored_rows(), sk.stored_floats());
                if i.is_multiple_of(q) {
                    let b = sk.query(i)?;
                    let err = prefix_error(&gram, &b, k + 1, cfg.oracle_cap);
                    let err = rec.error(err, &mut notes)?;
                    rec.push(i, err, &clock, None, None);
                }
            }
        }
        Scenario::Sw => {
            let n = cfg.window.expect("validated");
            let r = cfg.r_max.unwrap_or(data.norms.max_sq.max(1.0));
            r_used = Some(r);
            let mut sk = WindowSketch::with_options(cfg.dim, n, r, cfg.eps, rng, amp, cfg.factorizer())?;
            let mut fallbacks = 0u64;
            for (k, row) in data.rows.iter().enumerate() {
                let i = k as u64 + 1;
                clock.time(|| sk.update(row, i))?;
                rec.observe(sk.stored_rows(), sk.stored_floats());
                if i.is_multiple_of(q) {
                    let out = sk.query()?;
                    fallbacks += out.fallback as u64;
                    let lo = (k + 1).saturating_sub(n as usize);
                    let err = oracle.error(&data.rows[lo..=k], &out.sketch);
                    let err = rec.error(err, &mut notes)?;
                    rec.push(i, err, &clock, None, Some(out.level));
                }
            }
            if fallbacks > 0 {
                notes.push(format!("{fallbacks} probes used the mass-based level fallback"));
            }
            let w = sk.warnings();
            if w.light_rows + w.heavy_rows > 0 {
                notes.push(format!(
                    "{} rows below unit mass, {} rows above rmax",
                    w.light_rows, w.heavy_rows
                ));
            }
        }
        Scenario::Amm => {
            let n = cfg.window.expect("validated");
            let dim_y = cfg.dim_y.unwrap_or(cfg.dim);
            let prod_max = data
                .rows
                .iter()
                .zip(&data.rows_y)
                .map(|(x, y)| (squared_norm(x) * squared_norm(y)).sqrt())
                .fold(1.0f64, f64::max);
            let r = cfg.r_max.unwrap_or(prod_max);
            r_used = Some(r);
            let mut sk = MultiLevelCod::new(cfg.dim, dim_y, n, r, cfg.eps, rng, amp)?;
            for (k, (x, y)) in data.rows.iter().zip(&data.rows_y).enumerate() {
                let i = k as u64 + 1;
                clock.time(|| sk.update(x, y, i))?;
                rec.observe(sk.stored_rows(), sk.stored_floats());
                if i.is_multiple_of(q) {
                    let (out, level, _) = sk.query()?;
                    let lo = (k + 1).saturating_sub(n as usize);
                    let err = if k + 1 - lo > cfg.oracle_cap {
                        Err(Error::OracleCapExceeded { rows: k + 1 - lo, cap: cfg.oracle_cap })
                    } else {
                        let xw = matrix_from_rows(&data.rows[lo..=k])?;
                        let yw = matrix_from_rows(&data.rows_y[lo..=k])?;
                        product_error(&xw, &yw, &out.product())
                    };
                    let err = rec.error(err, &mut notes)?;
                    rec.push(i, err, &clock, None, Some(level));
                }
            }
        }
        Scenario::Dist | Scenario::DistSw => {
            let m = cfg.sites;
            let sim_cfg = SimConfig {
                sites: m,
                dim: cfg.dim,
                eps: cfg.eps,
                window: if cfg.scenario == Scenario::DistSw { cfg.window } else { None },
                seed: cfg.seed,
                amplify: amp,
                latency: cfg.latency,
                parallel: false,
                audit: false,
            };
            if cfg.baseline.is_some() {
                notes.push("distributed sites always use the randomized factorizer".into());
            }
            let mut sim = Simulation::new(sim_cfg)?;
            let mut gram = Matrix::zeros(cfg.dim, cfg.dim);
            let ticks = data.rows.len().div_ceil(m);
            for tick in 0..ticks {
                let rows: Vec<Option<&[f64]>> = (0..m).map(|j| data.rows.get(tick * m + j).map(Vec::as_slice)).collect();
                clock.time(|| sim.step(&rows))?;
                let seen = ((tick + 1) * m).min(data.rows.len());
                for row in &data.rows[tick * m..seen] {
                    accumulate(&mut gram, row);
                }
                let floats = sim.stored_floats();
                rec.observe(floats / cfg.dim, floats);
                let t = (tick + 1) as u64;
                if t.is_multiple_of(q) {
                    let b = sim.query()?;
                    let err = match cfg.scenario {
                        Scenario::Dist => prefix_error(&gram, &b, seen, cfg.oracle_cap),
                        _ => {
                            let n = cfg.window.expect("validated") as usize;
                            oracle.error(&data.rows[seen.saturating_sub(n)..seen], &b)
                        }
                    };
                    let err = rec.error(err, &mut notes)?;
                    rec.push(seen as u64, err, &clock, Some(sim.comm().bytes), None);
                }
            }
        }
    }
    if rec.reports.is_empty() {
        notes.push(format!("stream shorter than the query interval {q}; no probes"));
    }
    Ok(RunOutput {
        reports: rec.reports,
        norms: data.norms,
        r_max: r_used,
        notes,
    })
}

fn accumulate(gram: &mut Matrix, row: &[f64]) {
    let v = Vector::from_column_slice(row);
    gram.ger(1.0, &v, &v, 1.0);
}

fn prefix_error(gram: &Matrix, sketch: &Matrix, rows: usize, cap: usize) -> Result<f64> {
    if rows > cap {
        return Err(Error::OracleCapExceeded { rows, cap });
    }
    covariance_error(gram, sketch)
}

/// Runs the scenario and writes its CSV to `path`.
pub fn run_to_file(cfg: &RunConfig, path: &Path) -> Result<RunOutput> {
    let out = run_scenario(cfg)?;
    let file = std::fs::File::create(path)?;
    write_csv(&out.reports, std::io::BufWriter::new(file))?;
    Ok(out)
}
