//! A long-lived sketch fed in batches, addressed by the HTTP service. The
//! types here are also the wire format shared by service and client.

use serde::{Deserialize, Serialize};

use crate::amm::MultiLevelCod;
use crate::attp::PersistentSketch;
use crate::error::{Error, Result};
use crate::fd::{rank_budget, FdBuffer};
use crate::linalg::{Matrix, RngState};
use crate::sketch::Amplification;
use crate::window::WindowSketch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SessionSpec {
    /// Plain Frequent Directions over the whole stream.
    Fd { dim: usize, eps: f64 },
    /// Historical prefix queries.
    Persistent {
        dim: usize,
        eps: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        delta: Option<f64>,
    },
    /// Last `window` rows.
    Window {
        dim: usize,
        eps: f64,
        window: u64,
        r_max: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        delta: Option<f64>,
    },
    /// `X^T Y` over the last `window` row pairs.
    Product {
        dim_x: usize,
        dim_y: usize,
        eps: f64,
        window: u64,
        r_max: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        delta: Option<f64>,
    },
}

/// Rows to append. `rows_y` is only used by product sessions and must pair
/// up with `rows`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowBatch {
    pub rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows_y: Vec<Vec<f64>>,
}

/// Query answer. Covariance sessions approximate `A^T A` by
/// `sketch^T sketch`; product sessions approximate `X^T Y` by
/// `sketch^T sketch_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSketch {
    pub clock: u64,
    pub sketch: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_y: Option<Vec<Vec<f64>>>,
    /// Level answering a windowed query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(default)]
    pub fallback: bool,
    pub stored_floats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub spec: SessionSpec,
    pub clock: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
enum Inner {
    Fd(FdBuffer),
    Persistent(Box<PersistentSketch>),
    Window(WindowSketch),
    Product(MultiLevelCod),
}

#[derive(Debug)]
pub struct Session {
    spec: SessionSpec,
    inner: Inner,
    clock: u64,
}

fn amplification(delta: Option<f64>) -> Result<Option<Amplification>> {
    delta.map(Amplification::new).transpose()
}

impl Session {
    pub fn new(spec: SessionSpec) -> Result<Self> {
        let inner = match &spec {
            SessionSpec::Fd { dim, eps } => {
                if *dim == 0 {
                    return Err(Error::invalid("dim must be at least 1"));
                }
                Inner::Fd(FdBuffer::new(rank_budget(*eps)?, *dim))
            }
            SessionSpec::Persistent { dim, eps, seed, delta } => {
                let mut s = PersistentSketch::new(*dim, *eps, RngState::new(*seed, 0))?;
                if let Some(a) = amplification(*delta)? {
                    s = s.with_amplification(a);
                }
                Inner::Persistent(Box::new(s))
            }
            SessionSpec::Window { dim, eps, window, r_max, seed, delta } => Inner::Window(WindowSketch::with_options(
                *dim,
                *window,
                *r_max,
                *eps,
                RngState::new(*seed, 0),
                amplification(*delta)?,
                Default::default(),
            )?),
            SessionSpec::Product { dim_x, dim_y, eps, window, r_max, seed, delta } => Inner::Product(
                MultiLevelCod::new(*dim_x, *dim_y, *window, *r_max, *eps, RngState::new(*seed, 0), amplification(*delta)?)?,
            ),
        };
        Ok(Self { spec, inner, clock: 0 })
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn dims(&self) -> (usize, Option<usize>) {
        match &self.spec {
            SessionSpec::Fd { dim, .. } | SessionSpec::Persistent { dim, .. } | SessionSpec::Window { dim, .. } => {
                (*dim, None)
            }
            SessionSpec::Product { dim_x, dim_y, .. } => (*dim_x, Some(*dim_y)),
        }
    }

    /// Appends the batch with timestamps `clock + 1, clock + 2, ...`. The
    /// whole batch is checked first, so a rejected batch changes nothing.
    pub fn push(&mut self, batch: &RowBatch) -> Result<u64> {
        let (dx, dy) = self.dims();
        let check = |rows: &[Vec<f64>], d: usize, what: &str| -> Result<()> {
            for (k, r) in rows.iter().enumerate() {
                if r.len() != d {
                    return Err(Error::invalid(format!("{what}[{k}] has {} entries, expected {d}", r.len())));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("{what}[{k}] has a non-finite entry")));
                }
            }
            Ok(())
        };
        check(&batch.rows, dx, "rows")?;
        match dy {
            Some(dy) => {
                if batch.rows_y.len() != batch.rows.len() {
                    return Err(Error::invalid(format!(
                        "{} rows but {} rows_y",
                        batch.rows.len(),
                        batch.rows_y.len()
                    )));
                }
                check(&batch.rows_y, dy, "rows_y")?;
            }
            None if !batch.rows_y.is_empty() => {
                return Err(Error::invalid("rows_y is only accepted by product sessions"));
            }
            None => {}
        }
        for (k, row) in batch.rows.iter().enumerate() {
            let i = self.clock + 1;
            match &mut self.inner {
                Inner::Fd(buf) => {
                    buf.push(row)?;
                    if buf.is_full() {
                        buf.reduce()?;
                    }
                }
                Inner::Persistent(s) => {
                    s.update(row, i)?;
                }
                Inner::Window(s) => s.update(row, i)?,
                Inner::Product(s) => s.update(row, &batch.rows_y[k], i)?,
            }
            self.clock = i;
        }
        Ok(self.clock)
    }

    /// Current sketch; `at` picks a historical prefix (persistent sessions
    /// only).
    pub fn query(&self, at: Option<u64>) -> Result<SessionSketch> {
        if at.is_some() && !matches!(self.inner, Inner::Persistent(_)) {
            return Err(Error::invalid("only persistent sessions answer historical queries"));
        }
        if self.clock == 0 {
            return Err(Error::invalid("session has no rows yet"));
        }
        let mut out = SessionSketch {
            clock: self.clock,
            sketch: Vec::new(),
            sketch_y: None,
            level: None,
            fallback: false,
            stored_floats: 0,
        };
        match &self.inner {
            Inner::Fd(buf) => {
                out.sketch = rows_of(&buf.top_rows(buf.filled()));
                out.stored_floats = buf.filled() * buf.dim();
            }
            Inner::Persistent(s) => {
                out.sketch = rows_of(&s.query(at.unwrap_or(self.clock))?);
                out.stored_floats = s.stored_floats();
            }
            Inner::Window(s) => {
                let q = s.query()?;
                out.sketch = rows_of(&q.sketch);
                out.level = Some(q.level);
                out.fallback = q.fallback;
                out.stored_floats = s.stored_floats();
            }
            Inner::Product(s) => {
                let (p, level, fallback) = s.query()?;
                out.sketch = rows_of(&p.a.transpose());
                out.sketch_y = Some(rows_of(&p.b.transpose()));
                out.level = Some(level);
                out.fallback = fallback;
                out.stored_floats = s.stored_floats();
            }
        }
        Ok(out)
    }

    pub fn info(&self, id: u64) -> SessionInfo {
        SessionInfo {
            id,
            spec: self.spec.clone(),
            clock: self.clock,
        }
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_is_tagged() {
        let s: SessionSpec = serde_json::from_str(r#"{"kind":"window","dim":3,"eps":0.5,"window":10,"r_max":4}"#).unwrap();
        assert!(matches!(s, SessionSpec::Window { seed: 0, delta: None, .. }));
        assert!(serde_json::from_str::<SessionSpec>(r#"{"kind":"fd","dim":3,"eps":0.5,"x":1}"#).is_err());
    }

    #[test]
    fn rejected_batch_leaves_state() {
        let mut s = Session::new(SessionSpec::Fd { dim: 2, eps: 0.5 }).unwrap();
        s.push(&RowBatch { rows: vec![vec![1.0, 0.0]], rows_y: vec![] }).unwrap();
        let bad = RowBatch { rows: vec![vec![1.0, 1.0], vec![1.0]], rows_y: vec![] };
        assert!(s.push(&bad).is_err());
        assert_eq!(s.clock(), 1);
    }

    #[test]
    fn product_needs_paired_rows() {
        let spec = SessionSpec::Product { dim_x: 2, dim_y: 1, eps: 0.5, window: 5, r_max: 4.0, seed: 0, delta: None };
        let mut s = Session::new(spec).unwrap();
        assert!(s.push(&RowBatch { rows: vec![vec![1.0, 1.0]], rows_y: vec![] }).is_err());
        s.push(&RowBatch { rows: vec![vec![1.0, 1.0]], rows_y: vec![vec![2.0]] }).unwrap();
        let q = s.query(None).unwrap();
        assert_eq!(q.sketch_y.as_ref().unwrap()[0].len(), 1);
    }

    #[test]
    fn historical_query_only_for_persistent() {
        let mut w = Session::new(SessionSpec::Window { dim: 1, eps: 0.5, window: 3, r_max: 2.0, seed: 0, delta: None }).unwrap();
        w.push(&RowBatch { rows: vec![vec![1.0]], rows_y: vec![] }).unwrap();
        assert!(w.query(Some(1)).is_err());
        let mut p = Session::new(SessionSpec::Persistent { dim: 1, eps: 0.5, seed: 0, delta: None }).unwrap();
        assert!(p.query(None).is_err());
        p.push(&RowBatch { rows: vec![vec![1.0], vec![2.0]], rows_y: vec![] }).unwrap();
        assert_eq!(p.query(Some(1)).unwrap().clock, 2);
    }
}
