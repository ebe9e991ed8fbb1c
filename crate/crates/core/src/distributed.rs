//! Coordinator/site covariance tracking over an in-process message bus.
//!
//! Sites run a snapshot sketch whose dumps are shipped to the coordinator
//! as soon as they happen; the coordinator adds each restored contribution
//! to its Gram accumulator. Squared-norm mass is reported in batches and the
//! coordinator broadcasts its running total after every `m` reports.
//!
//! In window mode each site also tells the coordinator when one of its
//! snapshots falls out of the window, and the coordinator subtracts the
//! cached contribution for that `(site, t)` key.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{squared_norm, Matrix, RngState};
use crate::sketch::{restore_contribution, sketch_from_gram, Amplification, SnapshotSketch};

/// Fixed per-message header size in bytes.
pub const HEADER_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Site(usize),
    Coordinator,
}

#[derive(Clone, Debug)]
pub enum Payload {
    FroMass(f64),
    FroBroadcast(f64),
    SnapshotUpdate { z: Matrix, m: Matrix, t: u64 },
    Expire { t: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    FroMass,
    FroBroadcast,
    SnapshotUpdate,
    Expire,
}

#[derive(Clone, Debug)]
pub struct Message {
    pub from: Endpoint,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::FroMass(_) => MessageKind::FroMass,
            Payload::FroBroadcast(_) => MessageKind::FroBroadcast,
            Payload::SnapshotUpdate { .. } => MessageKind::SnapshotUpdate,
            Payload::Expire { .. } => MessageKind::Expire,
        }
    }

    /// `8 * floats + 16`; a timestamp counts as one 8-byte word.
    pub fn bytes(&self) -> u64 {
        let floats = match &self.payload {
            Payload::FroMass(_) | Payload::FroBroadcast(_) | Payload::Expire { .. } => 1,
            Payload::SnapshotUpdate { z, m, .. } => z.len() + m.len(),
        };
        8 * floats as u64 + HEADER_BYTES
    }
}

#[derive(Clone, Debug)]
pub struct Site {
    id: usize,
    m: usize,
    eps: f64,
    inner: SnapshotSketch,
    f_local: f64,
    f_hat: f64,
    own_mass: f64,
    clock: u64,
    window: Option<SiteWindow>,
    /// Running sum of this site's shipped contributions, kept when auditing.
    shipped: Option<Matrix>,
}

#[derive(Clone, Debug)]
struct SiteWindow {
    n: u64,
    /// `(t, ||a_t||^2)` of local rows still in the window.
    rows: VecDeque<(u64, f64)>,
    mass: f64,
    /// Shipped snapshots not yet expired, with their contribution when
    /// auditing.
    sent: VecDeque<(u64, Option<Matrix>)>,
}

impl Site {
    pub fn new(id: usize, m: usize, d: usize, eps: f64, window: Option<u64>, rng: RngState) -> Result<Self> {
        if m == 0 || id >= m {
            return Err(Error::invalid(format!("site {id} outside 0..{m}")));
        }
        if window == Some(0) {
            return Err(Error::invalid("window size must be at least 1"));
        }
        Ok(Self {
            id,
            m,
            eps,
            inner: SnapshotSketch::new(d, eps, 0.0, rng)?,
            f_local: 0.0,
            f_hat: 0.0,
            own_mass: 0.0,
            clock: 0,
            window: window.map(|n| SiteWindow {
                n,
                rows: VecDeque::new(),
                mass: 0.0,
                sent: VecDeque::new(),
            }),
            shipped: None,
        })
    }

    /// Keeps a local sum of every contribution this site ships.
    pub fn with_audit(mut self) -> Self {
        let d = self.inner.dim();
        self.shipped = Some(Matrix::zeros(d, d));
        self
    }

    /// Sum of contributions shipped and not yet expired (audit mode only).
    pub fn shipped_gram(&self) -> Option<&Matrix> {
        self.shipped.as_ref()
    }

    pub fn with_amplification(mut self, amp: Amplification) -> Self {
        self.inner = self.inner.with_amplification(amp);
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn f_hat(&self) -> f64 {
        self.f_hat
    }

    pub fn f_local(&self) -> f64 {
        self.f_local
    }

    pub fn theta(&self) -> f64 {
        self.inner.theta()
    }

    pub fn inner(&self) -> &SnapshotSketch {
        &self.inner
    }

    pub fn stored_floats(&self) -> usize {
        self.inner.stored_floats()
    }

    /// Processes one local row; returns the messages it emits, in order.
    pub fn update(&mut self, a: &[f64], i: u64) -> Result<Vec<Message>> {
        let sq = squared_norm(a);
        let mut out = Vec::new();
        let from = Endpoint::Site(self.id);
        let theta = match &mut self.window {
            None => {
                self.f_local += sq;
                if self.f_local >= self.eps / self.m as f64 * self.f_hat {
                    out.push(Message {
                        from,
                        payload: Payload::FroMass(self.f_local),
                    });
                    self.f_local = 0.0;
                }
                self.own_mass += sq;
                self.eps * self.f_hat.max(self.own_mass)
            }
            Some(w) => {
                w.rows.push_back((i, sq));
                w.mass += sq;
                while w.rows.front().is_some_and(|&(t, _)| t + w.n <= i) {
                    let (_, old) = w.rows.pop_front().expect("front exists");
                    w.mass -= old;
                }
                if w.rows.len() == 1 {
                    w.mass = w.rows[0].1;
                }
                self.own_mass += sq;
                self.eps * w.mass.max(0.0)
            }
        };
        self.inner.set_theta(theta);
        self.inner.advance(a, i)?;
        self.clock = i;
        while let Some(e) = self.inner.pop_front() {
            let snap = e
                .as_snapshot()
                .cloned()
                .ok_or_else(|| Error::Protocol("site queue holds a raw row".into()))?;
            let contrib = self.shipped.as_mut().map(|acc| {
                let c = restore_contribution(&snap.z, &snap.m);
                *acc += &c;
                c
            });
            if let Some(w) = &mut self.window {
                w.sent.push_back((snap.t, contrib));
            }
            out.push(Message {
                from,
                payload: Payload::SnapshotUpdate {
                    z: snap.z,
                    m: snap.m,
                    t: snap.t,
                },
            });
        }
        if let Some(w) = &mut self.window {
            while w.sent.front().is_some_and(|(t, _)| t + w.n <= i) {
                let (t, contrib) = w.sent.pop_front().expect("front exists");
                if let (Some(acc), Some(c)) = (self.shipped.as_mut(), contrib) {
                    *acc -= c;
                }
                out.push(Message {
                    from,
                    payload: Payload::Expire { t },
                });
            }
        }
        Ok(out)
    }

    pub fn receive(&mut self, msg: &Message) -> Result<()> {
        match msg.payload {
            Payload::FroBroadcast(f) => {
                self.f_hat = f;
                Ok(())
            }
            _ => Err(Error::Protocol(format!(
                "site {} cannot handle {:?}",
                self.id,
                msg.kind()
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Coordinator {
    m: usize,
    b: Matrix,
    f_hat: f64,
    msg_count: usize,
    window: bool,
    cache: HashMap<(usize, u64), Matrix>,
}

impl Coordinator {
    pub fn new(m: usize, d: usize, window: bool) -> Self {
        Self {
            m,
            b: Matrix::zeros(d, d),
            f_hat: 0.0,
            msg_count: 0,
            window,
            cache: HashMap::new(),
        }
    }

    pub fn gram(&self) -> &Matrix {
        &self.b
    }

    pub fn f_hat(&self) -> f64 {
        self.f_hat
    }

    pub fn cached(&self) -> impl Iterator<Item = &(usize, u64)> {
        self.cache.keys()
    }

    /// Handles one message; returns a broadcast when one is due.
    pub fn receive(&mut self, msg: &Message) -> Result<Option<Message>> {
        let Endpoint::Site(site) = msg.from else {
            return Err(Error::Protocol("coordinator received its own message".into()));
        };
        if site >= self.m {
            return Err(Error::Protocol(format!("message from unknown site {site}")));
        }
        match &msg.payload {
            Payload::FroMass(f) => {
                if !f.is_finite() || *f < 0.0 {
                    return Err(Error::Protocol(format!("invalid mass report {f}")));
                }
                self.f_hat += f;
                self.msg_count += 1;
                if self.msg_count >= self.m {
                    self.msg_count = 0;
                    return Ok(Some(Message {
                        from: Endpoint::Coordinator,
                        payload: Payload::FroBroadcast(self.f_hat),
                    }));
                }
            }
            Payload::SnapshotUpdate { z, m, t } => {
                let d = self.b.nrows();
                if z.nrows() != d || m.ncols() != d || z.ncols() != m.nrows() || z.ncols() == 0 {
                    return Err(Error::Protocol(format!(
                        "snapshot shapes {:?}/{:?} do not fit dimension {d}",
                        z.shape(),
                        m.shape()
                    )));
                }
                let c = restore_contribution(z, m);
                self.b += &c;
                if self.window {
                    self.cache.insert((site, *t), c);
                }
            }
            Payload::Expire { t } => {
                let c = self
                    .cache
                    .remove(&(site, *t))
                    .ok_or_else(|| Error::Protocol(format!("expire for unknown snapshot ({site}, {t})")))?;
                self.b -= c;
            }
            Payload::FroBroadcast(_) => {
                return Err(Error::Protocol("site sent a broadcast".into()));
            }
        }
        Ok(None)
    }

    pub fn query(&self, ell: usize) -> Result<Matrix> {
        sketch_from_gram(&self.b, ell)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub sites: usize,
    pub dim: usize,
    pub eps: f64,
    pub window: Option<u64>,
    pub seed: u64,
    pub amplify: Option<Amplification>,
    /// Ticks between send and delivery.
    pub latency: u64,
    /// Run site updates on worker threads.
    pub parallel: bool,
    /// Sites keep a sum of what they ship, see [`Site::shipped_gram`].
    pub audit: bool,
}

impl SimConfig {
    pub fn new(sites: usize, dim: usize, eps: f64, seed: u64) -> Self {
        Self {
            sites,
            dim,
            eps,
            window: None,
            seed,
            amplify: None,
            latency: 0,
            parallel: false,
            audit: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub bytes: u64,
    /// Messages sent per kind; a broadcast counts once per recipient.
    pub messages: HashMap<MessageKind, u64>,
    /// Broadcast events, one per coordinator decision.
    pub broadcasts: u64,
}

impl CommStats {
    pub fn count(&self, kind: MessageKind) -> u64 {
        self.messages.get(&kind).copied().unwrap_or(0)
    }

    fn record(&mut self, msg: &Message, copies: u64) {
        self.bytes += msg.bytes() * copies;
        *self.messages.entry(msg.kind()).or_default() += copies;
    }
}

/// Deterministic tick-based simulator: every tick each site processes one
/// row, then all due messages are delivered in FIFO order per channel.
#[derive(Debug)]
pub struct Simulation {
    cfg: SimConfig,
    sites: Vec<Site>,
    coord: Coordinator,
    uplinks: Vec<VecDeque<(u64, Message)>>,
    downlinks: Vec<VecDeque<(u64, Message)>>,
    tick: u64,
    comm: CommStats,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        if cfg.sites == 0 {
            return Err(Error::invalid("at least one site required"));
        }
        let mut sites = Vec::with_capacity(cfg.sites);
        for j in 0..cfg.sites {
            let mut s = Site::new(j, cfg.sites, cfg.dim, cfg.eps, cfg.window, RngState::new(cfg.seed, j as u64))?;
            if let Some(a) = cfg.amplify {
                s = s.with_amplification(a);
            }
            if cfg.audit {
                s = s.with_audit();
            }
            sites.push(s);
        }
        Ok(Self {
            coord: Coordinator::new(cfg.sites, cfg.dim, cfg.window.is_some()),
            uplinks: vec![VecDeque::new(); cfg.sites],
            downlinks: vec![VecDeque::new(); cfg.sites],
            sites,
            cfg,
            tick: 0,
            comm: CommStats::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn comm(&self) -> &CommStats {
        &self.comm
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    /// Global timestamp of site `j`'s row at tick `tick` (1-based).
    pub fn timestamp(&self, tick: u64, j: usize) -> u64 {
        (tick - 1) * self.cfg.sites as u64 + j as u64 + 1
    }

    pub fn ell(&self) -> usize {
        self.sites[0].inner().ell()
    }

    pub fn stored_floats(&self) -> usize {
        self.sites.iter().map(Site::stored_floats).sum::<usize>() + self.cfg.dim * self.cfg.dim
    }

    /// Runs one tick; `rows[j]` is site `j`'s next row, `None` when its
    /// stream is exhausted.
    pub fn step(&mut self, rows: &[Option<&[f64]>]) -> Result<()> {
        if rows.len() != self.sites.len() {
            return Err(Error::invalid(format!(
                "{} rows for {} sites",
                rows.len(),
                self.sites.len()
            )));
        }
        self.tick += 1;
        let tick = self.tick;
        let m = self.cfg.sites as u64;
        let process = |(j, site): (usize, &mut Site)| -> Result<Vec<Message>> {
            match rows[j] {
                Some(a) => site.update(a, (tick - 1) * m + j as u64 + 1),
                None => Ok(Vec::new()),
            }
        };
        let emitted: Vec<Vec<Message>> = if self.cfg.parallel {
            self.sites.par_iter_mut().enumerate().map(process).collect::<Result<_>>()?
        } else {
            self.sites.iter_mut().enumerate().map(process).collect::<Result<_>>()?
        };
        let due = tick + self.cfg.latency;
        for (j, msgs) in emitted.into_iter().enumerate() {
            for msg in msgs {
                self.comm.record(&msg, 1);
                self.uplinks[j].push_back((due, msg));
            }
        }
        self.deliver()
    }

    fn deliver(&mut self) -> Result<()> {
        let tick = self.tick;
        loop {
            let mut moved = false;
            for j in 0..self.uplinks.len() {
                while self.uplinks[j].front().is_some_and(|(due, _)| *due <= tick) {
                    let (_, msg) = self.uplinks[j].pop_front().expect("front exists");
                    moved = true;
                    if let Some(bcast) = self.coord.receive(&msg)? {
                        self.comm.record(&bcast, self.cfg.sites as u64);
                        self.comm.broadcasts += 1;
                        let due = tick + self.cfg.latency;
                        for link in &mut self.downlinks {
                            link.push_back((due, bcast.clone()));
                        }
                    }
                }
            }
            for (j, link) in self.downlinks.iter_mut().enumerate() {
                while link.front().is_some_and(|(due, _)| *due <= tick) {
                    let (_, msg) = link.pop_front().expect("front exists");
                    moved = true;
                    self.sites[j].receive(&msg)?;
                }
            }
            if !moved {
                return Ok(());
            }
        }
    }

    /// Delivers everything still in flight.
    pub fn flush(&mut self) -> Result<()> {
        let pending = self
            .uplinks
            .iter()
            .chain(&self.downlinks)
            .flat_map(|l| l.iter().map(|(d, _)| *d))
            .max();
        if let Some(last) = pending {
            let tick = self.tick;
            self.tick = self.tick.max(last);
            let r = self.deliver();
            self.tick = tick;
            r?;
        }
        Ok(())
    }

    pub fn query(&self) -> Result<Matrix> {
        self.coord.query(self.ell())
    }

    /// Cached contributions that should already have expired, given each
    /// site's own clock. Empty in a correct run.
    pub fn stale_contributions(&self) -> Vec<(usize, u64)> {
        let Some(n) = self.cfg.window else {
            return Vec::new();
        };
        let mut stale: Vec<_> = self
            .coord
            .cached()
            .filter(|(j, t)| t + n <= self.sites[*j].clock())
            .copied()
            .collect();
        stale.sort_unstable();
        stale
    }
}

/// Runs a full simulation over per-site streams, recording the coordinator
/// sketch and communication total every `query_every` ticks.
pub fn run_simulation(
    cfg: SimConfig,
    streams: &[Vec<Vec<f64>>],
    query_every: u64,
) -> Result<Vec<SimProbe>> {
    if streams.len() != cfg.sites {
        return Err(Error::invalid(format!(
            "{} streams for {} sites",
            streams.len(),
            cfg.sites
        )));
    }
    if streams.iter().flatten().any(|r| r.len() != cfg.dim) {
        return Err(Error::invalid("stream rows must match the configured dimension"));
    }
    let query_every = query_every.max(1);
    let ticks = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut sim = Simulation::new(cfg)?;
    let mut probes = Vec::new();
    for k in 0..ticks {
        let rows: Vec<Option<&[f64]>> = streams.iter().map(|s| s.get(k).map(Vec::as_slice)).collect();
        sim.step(&rows)?;
        if sim.tick_count() % query_every == 0 {
            probes.push(SimProbe {
                tick: sim.tick_count(),
                sketch: sim.query()?,
                comm_bytes: sim.comm().bytes,
            });
        }
    }
    Ok(probes)
}

#[derive(Clone, Debug)]
pub struct SimProbe {
    pub tick: u64,
    pub sketch: Matrix,
    pub comm_bytes: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Option<&[f64]> {
        Some(v)
    }

    #[test]
    fn message_sizes() {
        let z = Matrix::zeros(8, 2);
        let m = Matrix::zeros(2, 8);
        let msg = Message {
            from: Endpoint::Site(0),
            payload: Payload::SnapshotUpdate { z, m, t: 3 },
        };
        assert_eq!(msg.bytes(), 8 * 32 + 16);
        let e = Message {
            from: Endpoint::Site(0),
            payload: Payload::Expire { t: 3 },
        };
        assert_eq!(e.bytes(), 24);
    }

    #[test]
    fn first_row_reports_mass() {
        let mut s = Site::new(0, 2, 2, 0.5, None, RngState::new(0, 0)).unwrap();
        let out = s.update(&[1.0, 0.0], 1).unwrap();
        assert!(matches!(out[0].payload, Payload::FroMass(f) if f == 1.0));
        assert_eq!(s.f_local(), 0.0);
    }

    #[test]
    fn broadcast_after_m_reports() {
        let mut c = Coordinator::new(2, 2, false);
        let mass = |j| Message {
            from: Endpoint::Site(j),
            payload: Payload::FroMass(1.0),
        };
        assert!(c.receive(&mass(0)).unwrap().is_none());
        let b = c.receive(&mass(1)).unwrap().unwrap();
        assert!(matches!(b.payload, Payload::FroBroadcast(f) if f == 2.0));
        let mut single = Coordinator::new(1, 2, false);
        assert!(single.receive(&mass(0)).unwrap().is_some());
    }

    #[test]
    fn contributions_add_and_expire() {
        let mut c = Coordinator::new(2, 2, true);
        let z = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let m = Matrix::from_row_slice(1, 2, &[4.0, 0.0]);
        let snap = |j, t| Message {
            from: Endpoint::Site(j),
            payload: Payload::SnapshotUpdate {
                z: z.clone(),
                m: m.clone(),
                t,
            },
        };
        c.receive(&snap(0, 1)).unwrap();
        c.receive(&snap(1, 2)).unwrap();
        assert!((c.gram()[(0, 0)] - 8.0).abs() < 1e-12);
        c.receive(&Message {
            from: Endpoint::Site(0),
            payload: Payload::Expire { t: 1 },
        })
        .unwrap();
        assert!((c.gram()[(0, 0)] - 4.0).abs() < 1e-12);
        let bad = Message {
            from: Endpoint::Site(0),
            payload: Payload::Expire { t: 9 },
        };
        assert!(matches!(c.receive(&bad), Err(Error::Protocol(_))));
        assert!(c.receive(&snap(5, 3)).is_err());
    }

    #[test]
    fn zero_gram_query() {
        let c = Coordinator::new(1, 3, false);
        assert!(c.query(2).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expire_emitted_once_at_window_edge() {
        let n = 5;
        let mut s = Site::new(0, 1, 2, 0.5, Some(n), RngState::new(0, 0)).unwrap();
        let out = s.update(&[10.0, 0.0], 1).unwrap();
        assert!(out.iter().any(|m| m.kind() == MessageKind::SnapshotUpdate));
        let mut expires = 0;
        for i in 2..=12u64 {
            let out = s.update(&[0.0, 0.01], i).unwrap();
            for msg in out {
                if let Payload::Expire { t: 1 } = msg.payload {
                    assert_eq!(i, 1 + n);
                    expires += 1;
                }
            }
        }
        assert_eq!(expires, 1);
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut rng = RngState::new(3, 7);
        let streams: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..80).map(|_| rng.gaussian_vector(5).iter().copied().collect()).collect())
            .collect();
        let mut cfg = SimConfig::new(3, 5, 0.25, 11);
        let seq = run_simulation(cfg.clone(), &streams, 10).unwrap();
        cfg.parallel = true;
        let par = run_simulation(cfg, &streams, 10).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.sketch, b.sketch);
            assert_eq!(a.comm_bytes, b.comm_bytes);
        }
    }

    #[test]
    fn bytes_grow_only_on_sends() {
        let mut sim = Simulation::new(SimConfig::new(1, 2, 0.5, 0)).unwrap();
        sim.step(&[row(&[1.0, 0.0])]).unwrap();
        let before = sim.comm().bytes;
        assert!(before > 0);
        sim.step(&[None]).unwrap();
        assert_eq!(sim.comm().bytes, before);
    }

    #[test]
    fn latency_delays_broadcast() {
        let mut cfg = SimConfig::new(1, 2, 0.5, 0);
        cfg.latency = 2;
        let mut sim = Simulation::new(cfg).unwrap();
        sim.step(&[row(&[1.0, 0.0])]).unwrap();
        assert_eq!(sim.coordinator().f_hat(), 0.0);
        sim.step(&[row(&[1.0, 0.0])]).unwrap();
        sim.step(&[row(&[1.0, 0.0])]).unwrap();
        assert!(sim.coordinator().f_hat() > 0.0);
        sim.flush().unwrap();
    }
}
