//! Layer-hopping exploration of the origin's cluster.
//!
//! The exploration runs on the multigraph where each vertical edge of
//! `Z^d x Z` is split into `|U|` parallel copies, one per step direction,
//! each open with `qbar`. It grows a set `S` of explored vertices of the
//! origin's cluster, with at most one vertex per column, and its projection
//! `S^pi` onto `Z^d`. At each step it takes the earliest unexplored `Z^d`
//! edge `f` leaving `S^pi`, from base `u` (at layer `t` in `S`) in
//! direction `v`, and sets
//!
//! * `eta(f) = 1` by rule (a) if `f` is open in layer `t`;
//! * `eta(f) = 1` by rule (b) if `f` is closed in layer `t` but there is a
//!   `v`-hook at `(u, t)`: the `v`-indexed vertical copy above `(u, t)` and
//!   `f` in layer `t + 1` are both open;
//! * `eta(f) = 0` otherwise.
//!
//! Edges of `omega` are drawn on first probe. No edge is ever probed twice,
//! which is why the `eta` values are i.i.d. Bernoulli(`r`) with
//! `r = p + qbar p (1 - p)`, and the accepted edges `A` grow exactly like a
//! cluster of homogeneous percolation on `Z^d` at parameter `r`.
//!
//! Coordinates: the `Z^d` window is the box of side `side_d` with the origin
//! at its center; the vertical coordinate starts at layer 0. In plain mode
//! the layers `0..side_s` form a window that the exploration may climb out
//! of; in layered mode layer arithmetic is modulo the layer count.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::clusters::SizeHistogram;
use crate::error::{Error, Result};
use crate::exact;
use crate::lattice::{self, LatticeConfig, LatticeSpec, Variant};
use crate::sampling::{
    cutoff, sample_configuration, stream_rng, theorem_threshold, verify_domination_chain, ChainReport,
    Params, SeedPlan,
};
use crate::stats::{two_sample_z, Estimate, DEFAULT_LEVEL};

/// A `Z^d` edge, keyed by its lower endpoint and positive direction index.
/// The derived order is the fixed edge ordering of the exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DEdge {
    pub lower: usize,
    pub dir: usize,
}

/// An edge of the multigraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OmegaEdge {
    /// `[f, layer]`: the copy of `f` in a layer.
    Horizontal { edge: DEdge, layer: usize },
    /// Parallel copy `parallel` of the vertical edge above `(u, layer)`.
    /// In the bilayer both directions share `layer = 0`.
    Vertical { u: usize, layer: usize, parallel: usize },
}

/// Supplies edge states on demand.
pub trait EdgeSource {
    fn is_open(&mut self, edge: &OmegaEdge) -> bool;
}

impl<F: FnMut(&OmegaEdge) -> bool> EdgeSource for F {
    fn is_open(&mut self, edge: &OmegaEdge) -> bool {
        self(edge)
    }
}

/// Fresh Bernoulli draws: `p` for horizontal copies, `qbar` for vertical ones.
pub struct LazyOmega {
    rng: ChaCha8Rng,
    p_cut: u64,
    qbar_cut: u64,
}

impl LazyOmega {
    pub fn new(params: &Params, seed: u64, stream: u64) -> Self {
        LazyOmega {
            rng: stream_rng(seed, stream),
            p_cut: cutoff(params.p),
            qbar_cut: cutoff(params.qbar),
        }
    }
}

impl EdgeSource for LazyOmega {
    fn is_open(&mut self, edge: &OmegaEdge) -> bool {
        let cut = match edge {
            OmegaEdge::Horizontal { .. } => self.p_cut,
            OmegaEdge::Vertical { .. } => self.qbar_cut,
        };
        (self.rng.next_u32() as u64) < cut
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layers {
    /// Layers `0..height`; climbing past the top ends the run.
    Window(usize),
    /// Layers modulo `count`.
    Cyclic(usize),
}

impl Layers {
    fn up(self, t: usize) -> Option<usize> {
        match self {
            Layers::Window(h) => (t + 1 < h).then_some(t + 1),
            Layers::Cyclic(n) => Some((t + 1) % n),
        }
    }

    /// Key layer of the vertical edge from `t` to `up(t)`.
    fn vertical_key(self, t: usize) -> usize {
        match self {
            Layers::Cyclic(2) => 0,
            _ => t,
        }
    }

    /// Endpoints of the vertical edge with key layer `layer`.
    fn vertical_ends(self, layer: usize) -> (usize, usize) {
        match self {
            Layers::Window(_) => (layer, layer + 1),
            Layers::Cyclic(n) => (layer, (layer + 1) % n),
        }
    }
}

/// The `Z^d` window and the layer rule of an exploration.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGeometry {
    d: usize,
    side: usize,
    strides: Vec<usize>,
    /// Positive half of `U`.
    directions: Vec<Vec<i64>>,
    /// Largest coordinate of any step; vertices closer than this to a face
    /// count as boundary.
    reach: usize,
    layers: Layers,
}

impl CouplingGeometry {
    pub fn new(spec: &LatticeSpec) -> Result<Self> {
        if spec.s() != 1 {
            return Err(Error::Unsupported(format!(
                "the exploration needs s = 1, got s = {}",
                spec.s()
            )));
        }
        let layers = if spec.is_layered() {
            Layers::Cyclic(spec.side_s())
        } else {
            Layers::Window(spec.side_s())
        };
        let reach = match spec.variant() {
            Variant::SpreadOut { range } => range,
            _ => 1,
        };
        let strides = (0..spec.d()).map(|i| spec.side_d().pow(i as u32)).collect();
        Ok(CouplingGeometry {
            d: spec.d(),
            side: spec.side_d(),
            strides,
            directions: spec.directions().to_vec(),
            reach,
            layers,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// `|U|`.
    pub fn unit_count(&self) -> usize {
        2 * self.directions.len()
    }

    pub fn origin(&self) -> usize {
        self.index(&vec![self.side / 2; self.d])
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(x, s)| x * s).sum()
    }

    pub fn coords(&self, u: usize) -> Vec<usize> {
        (0..self.d).map(|i| u / self.strides[i] % self.side).collect()
    }

    /// Unit vector `U[j]`: `j = 2i` is `+w_i`, `j = 2i + 1` is `-w_i`.
    pub fn unit(&self, j: usize) -> Vec<i64> {
        let w = &self.directions[j / 2];
        if j.is_multiple_of(2) {
            w.clone()
        } else {
            w.iter().map(|x| -x).collect()
        }
    }

    /// `u + U[j]` if inside the window.
    pub fn shift(&self, u: usize, j: usize) -> Option<usize> {
        let c = self.coords(u);
        let w = self.unit(j);
        let mut out = Vec::with_capacity(self.d);
        for (x, dx) in c.iter().zip(&w) {
            let y = *x as i64 + dx;
            if y < 0 || y >= self.side as i64 {
                return None;
            }
            out.push(y as usize);
        }
        Some(self.index(&out))
    }

    /// The edge `{u, u + U[j]}`.
    pub fn edge(&self, u: usize, j: usize) -> Option<DEdge> {
        let y = self.shift(u, j)?;
        let lower = if j.is_multiple_of(2) { u } else { y };
        Some(DEdge { lower, dir: j / 2 })
    }

    /// Both endpoints of a `Z^d` edge.
    pub fn ends(&self, e: DEdge) -> (usize, usize) {
        let upper = self
            .shift(e.lower, 2 * e.dir)
            .expect("edge keys always have both endpoints in the window");
        (e.lower, upper)
    }

    pub fn near_boundary(&self, u: usize) -> bool {
        self.coords(u)
            .iter()
            .any(|&x| x < self.reach || x + self.reach >= self.side)
    }

    /// Both endpoints of a multigraph edge as `(u, t)` pairs.
    pub fn omega_ends(&self, e: &OmegaEdge) -> ((usize, usize), (usize, usize)) {
        match *e {
            OmegaEdge::Horizontal { edge, layer } => {
                let (a, b) = self.ends(edge);
                ((a, layer), (b, layer))
            }
            OmegaEdge::Vertical { u, layer, .. } => {
                let (t0, t1) = self.layers.vertical_ends(layer);
                ((u, t0), (u, t1))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `f` open in the base layer.
    A,
    /// `f` closed in the base layer, hook open one layer up.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// No unexplored edge leaves `S^pi`.
    Died,
    /// `S^pi` touched the faces of the `Z^d` window.
    ReachedBoundary,
    BudgetExhausted,
    /// A hook would have climbed above the layer window.
    WindowExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub step: usize,
    pub edge: OmegaEdge,
    pub open: bool,
}

/// One exploration step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based step index `n`.
    pub n: usize,
    pub edge: DEdge,
    /// Endpoint in `S^pi`.
    pub base: usize,
    /// Endpoint outside `S^pi`.
    pub target: usize,
    /// Index into `U` of `target - base`.
    pub direction: usize,
    /// Layer of `base` in `S`.
    pub layer: usize,
    pub condition: Option<Condition>,
    pub eta: bool,
    /// Vertex added to `S`.
    pub added: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    Off,
    EveryStep,
    /// Every `n` steps and at the end.
    Every(usize),
}

impl CheckMode {
    /// Every step in debug builds, every `2^10` steps otherwise.
    pub fn default_for_build() -> Self {
        if cfg!(debug_assertions) {
            CheckMode::EveryStep
        } else {
            CheckMode::Every(1 << 10)
        }
    }
}

/// The exploration trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CouplingState {
    pub step: usize,
    /// Edges with `eta = 1`, in acceptance order.
    pub accepted: Vec<DEdge>,
    /// Edges with `eta = 0`.
    pub rejected: Vec<DEdge>,
    /// `S`, in insertion order; `S[0]` is the origin at layer 0.
    pub explored: Vec<(usize, usize)>,
    /// `tau^{-1}`: column `u` of `S^pi` to its layer in `S`.
    pub layer_of: HashMap<usize, usize>,
    pub eta: BTreeMap<DEdge, bool>,
    pub probes: Vec<Probe>,
    pub steps: Vec<StepRecord>,
    probed: HashMap<OmegaEdge, bool>,
    frontier: BTreeSet<DEdge>,
    /// Edges a second probe was attempted on.
    pub reprobed: Vec<OmegaEdge>,
    /// Failures of the per-step checks.
    pub step_violations: Vec<String>,
}

impl CouplingState {
    /// `S^pi`.
    pub fn projection(&self) -> HashSet<usize> {
        self.layer_of.keys().copied().collect()
    }

    pub fn probe_state(&self, e: &OmegaEdge) -> Option<bool> {
        self.probed.get(e).copied()
    }

    /// Cheap structural checks: `|A| = |S| - 1`, `tau` a bijection onto
    /// `S^pi`, `A` and `B` disjoint, nothing probed twice.
    pub fn structural_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.accepted.len() + 1 != self.explored.len() {
            out.push(format!(
                "|A| = {} but |S| = {}",
                self.accepted.len(),
                self.explored.len()
            ));
        }
        if self.layer_of.len() != self.explored.len() {
            out.push(format!(
                "tau is not injective: |S| = {}, |S^pi| = {}",
                self.explored.len(),
                self.layer_of.len()
            ));
        }
        for &(u, t) in &self.explored {
            if self.layer_of.get(&u) != Some(&t) {
                out.push(format!("tau^-1({u}) disagrees with ({u}, {t}) in S"));
            }
        }
        if self.accepted.len() + self.rejected.len() != self.eta.len() {
            out.push("A and B overlap".into());
        }
        if !self.reprobed.is_empty() {
            out.push(format!("edges probed twice: {:?}", self.reprobed));
        }
        out
    }
}

/// A finished exploration.
#[derive(Debug, Clone)]
pub struct Exploration {
    pub geometry: CouplingGeometry,
    pub state: CouplingState,
    pub outcome: Outcome,
}

impl Exploration {
    /// `eta` of the `n`-th step.
    pub fn eta_at(&self, n: usize) -> Option<bool> {
        self.state.steps.get(n - 1).map(|s| s.eta)
    }
}

struct Explorer<'a, S: EdgeSource> {
    geo: &'a CouplingGeometry,
    source: S,
    state: CouplingState,
}

impl<S: EdgeSource> Explorer<'_, S> {
    fn probe(&mut self, edge: OmegaEdge) -> bool {
        if let Some(&open) = self.state.probed.get(&edge) {
            self.state.reprobed.push(edge);
            return open;
        }
        let open = self.source.is_open(&edge);
        self.state.probed.insert(edge, open);
        self.state.probes.push(Probe {
            step: self.state.step + 1,
            edge,
            open,
        });
        open
    }

    fn add_vertex(&mut self, u: usize, t: usize) {
        self.state.explored.push((u, t));
        self.state.layer_of.insert(u, t);
        for j in 0..self.geo.unit_count() {
            let Some(y) = self.geo.shift(u, j) else {
                continue;
            };
            let e = self.geo.edge(u, j).expect("neighbor exists");
            if self.state.layer_of.contains_key(&y) {
                self.state.frontier.remove(&e);
            } else if !self.state.eta.contains_key(&e) {
                self.state.frontier.insert(e);
            }
        }
    }

    fn run(mut self, budget: usize, checks: CheckMode) -> Exploration {
        let origin = self.geo.origin();
        self.add_vertex(origin, 0);
        let outcome = loop {
            if let Some(&(u, _)) = self.state.explored.last() {
                if self.geo.near_boundary(u) {
                    break Outcome::ReachedBoundary;
                }
            }
            let Some(&f) = self.state.frontier.first() else {
                break Outcome::Died;
            };
            if self.state.step >= budget {
                break Outcome::BudgetExhausted;
            }
            let (lo, hi) = self.geo.ends(f);
            let (base, target, direction) = if self.state.layer_of.contains_key(&lo) {
                (lo, hi, 2 * f.dir)
            } else {
                (hi, lo, 2 * f.dir + 1)
            };
            let t = self.state.layer_of[&base];

            let condition = if self.probe(OmegaEdge::Horizontal { edge: f, layer: t }) {
                Some((Condition::A, t))
            } else {
                let Some(up) = self.geo.layers.up(t) else {
                    break Outcome::WindowExhausted;
                };
                let vertical = OmegaEdge::Vertical {
                    u: base,
                    layer: self.geo.layers.vertical_key(t),
                    parallel: direction,
                };
                (self.probe(vertical) && self.probe(OmegaEdge::Horizontal { edge: f, layer: up }))
                    .then_some((Condition::B, up))
            };

            self.state.frontier.remove(&f);
            self.state.step += 1;
            let eta = condition.is_some();
            self.state.eta.insert(f, eta);
            let added = condition.map(|(_, layer)| (target, layer));
            if let Some((u, layer)) = added {
                self.state.accepted.push(f);
                self.add_vertex(u, layer);
            } else {
                self.state.rejected.push(f);
            }
            self.state.steps.push(StepRecord {
                n: self.state.step,
                edge: f,
                base,
                target,
                direction,
                layer: t,
                condition: condition.map(|(c, _)| c),
                eta,
                added,
            });

            let due = match checks {
                CheckMode::Off => false,
                CheckMode::EveryStep => true,
                CheckMode::Every(k) => self.state.step.is_multiple_of(k.max(1)),
            };
            if due {
                self.record_violations();
            }
        };
        if checks != CheckMode::Off {
            self.record_violations();
        }
        Exploration {
            geometry: self.geo.clone(),
            state: self.state,
            outcome,
        }
    }

    fn record_violations(&mut self) {
        let step = self.state.step;
        let found = self.state.structural_violations();
        self.state
            .step_violations
            .extend(found.into_iter().map(|v| format!("step {step}: {v}")));
    }
}

/// Run the exploration against an arbitrary edge source.
pub fn explore_with<S: EdgeSource>(
    geometry: &CouplingGeometry,
    source: S,
    step_budget: usize,
    checks: CheckMode,
) -> Exploration {
    Explorer {
        geo: geometry,
        source,
        state: CouplingState::default(),
    }
    .run(step_budget, checks)
}

/// Run the exploration with lazily sampled `omega` of law `P_{p, qbar}` on
/// the multigraph.
pub fn explore_coupled(
    spec: &LatticeSpec,
    params: &Params,
    seed: u64,
    stream: u64,
    step_budget: usize,
) -> Result<Exploration> {
    if step_budget == 0 {
        return Err(Error::domain("step budget must be at least 1"));
    }
    let geo = CouplingGeometry::new(spec)?;
    let params = Params::new(params.p, params.q, geo.unit_count())?;
    Ok(explore_with(
        &geo,
        LazyOmega::new(&params, seed, stream),
        step_budget,
        CheckMode::default_for_build(),
    ))
}

/// A plain-mode spec for explorations: `Z^d` window of side `side` and a
/// layer window tall enough that `step_budget` steps never leave it.
pub fn exploration_spec(d: usize, side: usize, step_budget: usize) -> Result<LatticeSpec> {
    LatticeConfig::new(d, 1, side, step_budget + 1).build()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Counterexample when the check fails.
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub checks: Vec<InvariantCheck>,
}

impl TraceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Check the finished trace: the `A`/`S` bijection, `tau`, monotone
/// growth, disjointness of `A` and `B`, connectivity of `A` in `Z^d`,
/// `omega`-connectivity of `S` to the origin through probed-open edges,
/// agreement of every `eta` with its probes, and freshness of every probe.
pub fn verify_trace(exploration: &Exploration) -> TraceReport {
    let geo = &exploration.geometry;
    let st = &exploration.state;
    let mut checks = Vec::new();
    let mut push = |name: &'static str, detail: Option<String>| {
        checks.push(InvariantCheck {
            name,
            passed: detail.is_none(),
            detail,
        })
    };

    push(
        "accepted_matches_explored",
        (st.accepted.len() + 1 != st.explored.len())
            .then(|| format!("|A| = {}, |S| = {}", st.accepted.len(), st.explored.len())),
    );

    let tau = {
        let mut seen = HashSet::new();
        let mut bad = None;
        for &(u, t) in &st.explored {
            if !seen.insert(u) {
                bad = Some(format!("column {u} appears twice in S (layer {t})"));
                break;
            }
        }
        if bad.is_none() && seen != st.projection() {
            bad = Some("tau(S) differs from S^pi".into());
        }
        bad
    };
    push("tau_bijection", tau);

    // Replay the step records; sizes must grow by one exactly on eta = 1
    // and the replay must reproduce the final sets.
    let replay = {
        let origin = geo.origin();
        let mut s: Vec<(usize, usize)> = vec![(origin, 0)];
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut bad = None;
        for rec in &st.steps {
            let before = (a.len(), b.len(), s.len());
            if rec.eta {
                a.push(rec.edge);
                match rec.added {
                    Some(v) => s.push(v),
                    None => bad = Some(format!("step {}: eta = 1 without a new vertex", rec.n)),
                }
            } else {
                b.push(rec.edge);
                if rec.added.is_some() {
                    bad = Some(format!("step {}: eta = 0 but S grew", rec.n));
                }
            }
            let after = (a.len(), b.len(), s.len());
            if after.0 < before.0 || after.1 < before.1 || after.2 < before.2 {
                bad = Some(format!("step {}: a set shrank", rec.n));
            }
            if bad.is_some() {
                break;
            }
        }
        if bad.is_none() && (a != st.accepted || b != st.rejected || s != st.explored) {
            bad = Some("replayed steps do not reproduce A, B, S".into());
        }
        bad
    };
    push("monotone_growth", replay);

    let disjoint = {
        let a: HashSet<_> = st.accepted.iter().collect();
        st.rejected
            .iter()
            .find(|e| a.contains(e))
            .map(|e| format!("{e:?} is in both A and B"))
    };
    push("accepted_rejected_disjoint", disjoint);

    // A is a connected edge set containing the origin.
    let a_connected = {
        let origin = geo.origin();
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for &e in &st.accepted {
            let (x, y) = geo.ends(e);
            adj.entry(x).or_default().push(y);
            adj.entry(y).or_default().push(x);
        }
        let reached = bfs(origin, |v| adj.get(&v).cloned().unwrap_or_default());
        let missing = adj.keys().find(|v| !reached.contains(v));
        match missing {
            Some(v) => Some(format!("vertex {v:?} of A is not connected to the origin")),
            None if !st.accepted.is_empty() && !adj.contains_key(&origin) => {
                Some("A does not contain the origin".into())
            }
            None => None,
        }
    };
    push("accepted_connected", a_connected);

    // Every vertex of S reaches (origin, 0) through probed-open edges.
    let s_connected = {
        let mut adj: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        for probe in st.probes.iter().filter(|p| p.open) {
            let (x, y) = geo.omega_ends(&probe.edge);
            adj.entry(x).or_default().push(y);
            adj.entry(y).or_default().push(x);
        }
        let reached = bfs((geo.origin(), 0), |v| adj.get(&v).cloned().unwrap_or_default());
        st.explored
            .iter()
            .find(|v| !reached.contains(v))
            .map(|v| format!("{v:?} in S is not omega-connected to the origin"))
    };
    push("explored_in_origin_cluster", s_connected);

    // eta follows from the recorded probes.
    let lawful = st.steps.iter().find_map(|rec| {
        let state = |e: OmegaEdge| st.probe_state(&e);
        let flat = state(OmegaEdge::Horizontal {
            edge: rec.edge,
            layer: rec.layer,
        });
        let expected = match flat {
            Some(true) => Some(Condition::A),
            Some(false) => {
                let up = geo.layers.up(rec.layer)?;
                let vertical = state(OmegaEdge::Vertical {
                    u: rec.base,
                    layer: geo.layers.vertical_key(rec.layer),
                    parallel: rec.direction,
                });
                let hook = vertical == Some(true)
                    && state(OmegaEdge::Horizontal {
                        edge: rec.edge,
                        layer: up,
                    }) == Some(true);
                hook.then_some(Condition::B)
            }
            None => return Some(format!("step {}: base edge never probed", rec.n)),
        };
        (expected != rec.condition || rec.eta != expected.is_some()).then(|| {
            format!(
                "step {}: edge {:?} recorded {:?}, probes imply {:?}",
                rec.n, rec.edge, rec.condition, expected
            )
        })
    });
    push("eta_matches_probes", lawful);

    let fresh = {
        let mut seen = HashSet::new();
        let dup = st.probes.iter().find(|p| !seen.insert(p.edge));
        match (dup, st.reprobed.first()) {
            (Some(p), _) => Some(format!("step {}: {:?} probed twice", p.step, p.edge)),
            (None, Some(e)) => Some(format!("{e:?} probed twice")),
            (None, None) => None,
        }
    };
    push("fresh_probes", fresh);

    push(
        "per_step_checks",
        st.step_violations.first().cloned(),
    );

    TraceReport { checks }
}

fn bfs<T, F>(start: T, mut next: F) -> HashSet<T>
where
    T: Copy + Eq + std::hash::Hash,
    F: FnMut(T) -> Vec<T>,
{
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for w in next(v) {
            if seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    seen
}

/// Frequency of `eta = 1` on the first step over independent explorations.
pub fn eta_marginal_estimate(
    spec: &LatticeSpec,
    params: &Params,
    n_probes: u64,
    seed: u64,
) -> Result<Estimate> {
    if n_probes < 1000 {
        return Err(Error::domain("use at least 1000 probes"));
    }
    let geo = CouplingGeometry::new(spec)?;
    let params = Params::new(params.p, params.q, geo.unit_count())?;
    let hits: u64 = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let run = explore_with(
                &geo,
                LazyOmega::new(&params, seed, SeedPlan::stream(TAG_ETA, i)),
                1,
                CheckMode::Off,
            );
            u64::from(run.eta_at(1).unwrap_or(false))
        })
        .sum();
    Ok(Estimate::wilson(hits, n_probes, DEFAULT_LEVEL, "eta_first_step"))
}

const TAG_ETA: u32 = 0xE7A;
const TAG_EQUIV: u32 = 0xE9;
const TAG_COUPLED: u32 = 0xC0;
const TAG_PLAIN_P: u32 = 0xC1;
const TAG_PLAIN_R: u32 = 0xC2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    /// Plain law computed by exhaustive enumeration (otherwise sampled).
    pub exact: bool,
    pub samples: u64,
    /// Law of `|C(0)|` on the plain graph, indexed by size.
    pub plain_law: Vec<f64>,
    /// Empirical law of `|C(0)|` after collapsing sampled multigraphs.
    pub multigraph_law: Vec<f64>,
    pub tv_distance: f64,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Expected total-variation distance from sampling noise alone.
    pub noise_floor: f64,
}

/// Compare the law of `|C(0)|` on the plain box at `(p, q)` with the law on
/// the multigraph at `(p, qbar)`, after merging parallel copies.
pub fn equivalence_check(
    spec: &LatticeSpec,
    params: &Params,
    n_samples: u64,
    seed: u64,
) -> Result<EquivalenceReport> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    if n_samples == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let plain = lattice::collapse_multigraph(spec);
    let multi = lattice::build_multigraph(&plain)?;
    let params = Params::new(params.p, params.q, multi.parallel_count())?;
    let origin = plain.origin_index();
    let size_of = |cfg: &crate::sampling::Configuration| {
        let mut uf = crate::clusters::label_clusters(cfg);
        uf.cluster_size(origin)
    };

    let sampled = |spec: &LatticeSpec, tag: u32, collapse: bool| -> SizeHistogram {
        (0..n_samples)
            .into_par_iter()
            .fold(SizeHistogram::default, |mut h, i| {
                let cfg = sample_configuration(spec, &params, seed, SeedPlan::stream(tag, i));
                let cfg = if collapse { cfg.collapse() } else { cfg };
                h.add(size_of(&cfg));
                h
            })
            .reduce(SizeHistogram::default, |mut a, b| {
                a.merge(&b);
                a
            })
    };

    let max = plain.vertex_count();
    let exact = plain.edge_count() <= 20;
    let plain_law = if exact {
        exact::origin_size_law(&plain, &params)?
    } else {
        sampled(&plain, TAG_EQUIV + 1, false).frequencies(max)
    };
    let multigraph_law = sampled(&multi, TAG_EQUIV, true).frequencies(max);

    let n = n_samples as f64;
    let tv_distance = 0.5
        * plain_law
            .iter()
            .zip(&multigraph_law)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    let mut chi_square = 0.0;
    let mut bins = 0usize;
    for (&expected, &observed) in plain_law.iter().zip(&multigraph_law) {
        if expected > 0.0 {
            bins += 1;
            chi_square += n * (observed - expected).powi(2) / expected;
        }
    }
    let dof = bins.saturating_sub(1).max(1);
    let p_value = 1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(chi_square);
    let spread = if exact { 1.0 } else { 2.0f64.sqrt() };
    let noise_floor = 0.5
        * spread
        * plain_law
            .iter()
            .map(|&p| (p * (1.0 - p) / n).sqrt())
            .sum::<f64>();
    Ok(EquivalenceReport {
        exact,
        samples: n_samples,
        plain_law,
        multigraph_law,
        tv_distance,
        chi_square,
        dof,
        p_value,
        noise_floor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    pub chain: ChainReport,
    pub runs: u64,
    pub step_budget: usize,
    /// Fraction of coupled explorations reaching the window boundary.
    pub coupled: Estimate,
    /// Homogeneous `Z^d` exploration at `p`.
    pub plain_at_p: Estimate,
    /// Homogeneous `Z^d` exploration at `r`.
    pub plain_at_r: Estimate,
    pub outcomes: BTreeMap<String, u64>,
    /// Coupled fraction not significantly below the plain-at-`p` one.
    pub dominates_p: bool,
    /// Coupled and plain-at-`r` fractions agree within 4 standard errors.
    pub consistent_with_r: bool,
}

fn boundary_fraction(
    geo: &CouplingGeometry,
    params: &Params,
    runs: u64,
    seed: u64,
    tag: u32,
    budget: usize,
) -> (Estimate, BTreeMap<String, u64>) {
    let outcomes: Vec<Outcome> = (0..runs)
        .into_par_iter()
        .map(|i| {
            explore_with(
                geo,
                LazyOmega::new(params, seed, SeedPlan::stream(tag, i)),
                budget,
                CheckMode::Off,
            )
            .outcome
        })
        .collect();
    let mut tally = BTreeMap::new();
    for o in &outcomes {
        *tally.entry(format!("{o:?}")).or_insert(0) += 1;
    }
    let hits = outcomes
        .iter()
        .filter(|&&o| o == Outcome::ReachedBoundary)
        .count() as u64;
    (Estimate::wilson(hits, runs, DEFAULT_LEVEL, "reached_boundary"), tally)
}

/// Compare boundary-reaching frequencies of the coupled exploration with
/// homogeneous `Z^d` explorations at `p` and at `r`.
pub fn domination_experiment(
    spec: &LatticeSpec,
    params: &Params,
    p_c: f64,
    n_runs: u64,
    seed: u64,
) -> Result<DominationReport> {
    let geo = CouplingGeometry::new(spec)?;
    let threshold = theorem_threshold(geo.d(), params.p, p_c)?;
    if threshold.vacuous {
        return Err(Error::domain(format!(
            "threshold 8 d^2 (p_c - p) = {:.4} exceeds 1; nothing to test",
            threshold.raw
        )));
    }
    if params.q < threshold.value {
        return Err(Error::domain(format!(
            "q = {} is below the threshold {:.6}",
            params.q, threshold.value
        )));
    }
    if n_runs == 0 {
        return Err(Error::domain("need at least one run"));
    }
    let params = Params::new(params.p, params.q, geo.unit_count())?;
    let chain = verify_domination_chain(geo.d(), params.p, params.q, p_c);
    // Enough steps to exhaust every edge of the window.
    let budget = geo.directions.len() * geo.side.pow(geo.d() as u32);
    let geo = match geo.layers {
        Layers::Window(h) if h <= budget => CouplingGeometry {
            layers: Layers::Window(budget + 1),
            ..geo
        },
        _ => geo,
    };
    let (coupled, outcomes) = boundary_fraction(&geo, &params, n_runs, seed, TAG_COUPLED, budget);
    let flat = |x: f64| Params::new(x, 0.0, geo.unit_count()).expect("probability");
    let (plain_at_p, _) = boundary_fraction(&geo, &flat(params.p), n_runs, seed, TAG_PLAIN_P, budget);
    let (plain_at_r, _) = boundary_fraction(&geo, &flat(params.r), n_runs, seed, TAG_PLAIN_R, budget);
    let dominates_p = two_sample_z(&coupled, &plain_at_p) > -3.0;
    let consistent_with_r = two_sample_z(&coupled, &plain_at_r).abs() <= 4.0;
    Ok(DominationReport {
        chain,
        runs: n_runs,
        step_budget: budget,
        coupled,
        plain_at_p,
        plain_at_r,
        outcomes,
        dominates_p,
        consistent_with_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(d: usize, side: usize, height: usize) -> CouplingGeometry {
        CouplingGeometry::new(&LatticeConfig::new(d, 1, side, height).build().unwrap()).unwrap()
    }

    #[test]
    fn all_open_uses_rule_a_in_layer_zero() {
        let g = geo(2, 9, 20);
        let run = explore_with(&g, |_: &OmegaEdge| true, 1000, CheckMode::EveryStep);
        assert_eq!(run.outcome, Outcome::ReachedBoundary);
        assert!(run.state.steps.iter().all(|s| s.eta && s.condition == Some(Condition::A)));
        assert!(run.state.explored.iter().all(|&(_, t)| t == 0));
        assert_eq!(run.state.explored.len(), run.state.step + 1);
        assert!(verify_trace(&run).passed());
    }

    #[test]
    fn all_closed_dies_at_the_origin() {
        let g = geo(2, 9, 20);
        let run = explore_with(&g, |_: &OmegaEdge| false, 1000, CheckMode::EveryStep);
        assert_eq!(run.outcome, Outcome::Died);
        assert!(run.state.accepted.is_empty());
        assert_eq!(run.state.rejected.len(), 4);
        assert_eq!(run.state.explored, vec![(g.origin(), 0)]);
        assert!(verify_trace(&run).passed());
    }

    #[test]
    fn hook_moves_one_layer_up() {
        let g = geo(2, 9, 20);
        let origin = g.origin();
        // f_1 is the earliest edge at the origin: direction -e_2, lower end u - e_2.
        let f1 = g.edge(origin, 3).unwrap();
        assert_eq!(f1, DEdge { lower: origin - 9, dir: 1 });
        let source = |e: &OmegaEdge| match *e {
            OmegaEdge::Horizontal { edge, layer } => edge == f1 && layer == 1,
            OmegaEdge::Vertical { u, layer, parallel } => u == origin && layer == 0 && parallel == 3,
        };
        let run = explore_with(&g, source, 1, CheckMode::EveryStep);
        let s1 = &run.state.steps[0];
        assert_eq!(s1.edge, f1);
        assert_eq!(s1.condition, Some(Condition::B));
        assert!(s1.eta);
        assert_eq!(run.state.explored, vec![(origin, 0), (origin - 9, 1)]);
        assert_eq!(run.state.probes.len(), 3);
        assert!(verify_trace(&run).passed());
    }

    #[test]
    fn vertical_open_but_hook_edge_closed_rejects() {
        let g = geo(1, 9, 5);
        let source = |e: &OmegaEdge| matches!(e, OmegaEdge::Vertical { .. });
        let run = explore_with(&g, source, 1, CheckMode::EveryStep);
        assert!(!run.state.steps[0].eta);
        assert_eq!(run.state.steps[0].condition, None);
    }

    #[test]
    fn bilayer_hooks_wrap_to_layer_zero() {
        let spec = LatticeConfig::new(1, 1, 11, 0).layered(1).build().unwrap();
        let g = CouplingGeometry::new(&spec).unwrap();
        // Rule (a) never fires: every step must hop.
        let source = |e: &OmegaEdge| match e {
            OmegaEdge::Horizontal { layer, edge } => (edge.lower + *layer) % 2 == 1,
            OmegaEdge::Vertical { .. } => true,
        };
        let run = explore_with(&g, source, 100, CheckMode::EveryStep);
        let layers: Vec<usize> = run.state.explored.iter().map(|&(_, t)| t).collect();
        assert!(layers.contains(&0) && layers.contains(&1));
        assert!(layers.iter().all(|&t| t < 2));
        for s in &run.state.steps {
            if s.condition == Some(Condition::B) {
                assert_eq!(s.added.unwrap().1, (s.layer + 1) % 2);
            }
        }
        assert!(verify_trace(&run).passed(), "{:?}", verify_trace(&run));
    }

    #[test]
    fn window_exhaustion_is_an_outcome() {
        let g = geo(1, 21, 2);
        let first = g.edge(g.origin(), 1).unwrap();
        let source = move |e: &OmegaEdge| match *e {
            OmegaEdge::Horizontal { layer, edge } => layer == 1 && edge == first,
            OmegaEdge::Vertical { .. } => true,
        };
        let run = explore_with(&g, source, 100, CheckMode::EveryStep);
        assert_eq!(run.outcome, Outcome::WindowExhausted);
        assert!(verify_trace(&run).passed());
    }

    #[test]
    fn budget_stops_the_run() {
        let g = geo(2, 41, 30);
        let run = explore_with(&g, |_: &OmegaEdge| true, 5, CheckMode::EveryStep);
        assert_eq!(run.outcome, Outcome::BudgetExhausted);
        assert_eq!(run.state.step, 5);
    }

    #[test]
    fn random_runs_satisfy_every_invariant() {
        let spec = exploration_spec(2, 24, 600).unwrap();
        let params = Params::for_spec(&spec, 0.45, 0.2).unwrap();
        for i in 0..200 {
            let run = explore_coupled(&spec, &params, 3, i, 600).unwrap();
            let report = verify_trace(&run);
            assert!(report.passed(), "run {i}: {:?}", report.failures().collect::<Vec<_>>());
        }
        let layered = LatticeConfig::new(2, 1, 24, 0).layered(2).build().unwrap();
        for i in 0..100 {
            let run = explore_coupled(&layered, &params, 4, i, 600).unwrap();
            assert!(verify_trace(&run).passed());
        }
    }

    #[test]
    fn corrupted_trace_is_caught() {
        let spec = exploration_spec(2, 16, 200).unwrap();
        let params = Params::for_spec(&spec, 0.6, 0.5).unwrap();
        let run = (0..)
            .map(|i| explore_coupled(&spec, &params, 1, i, 200).unwrap())
            .find(|r| r.state.accepted.len() > 3)
            .unwrap();
        let mut bad = run.clone();
        bad.state.explored[2].1 += 7;
        let report = verify_trace(&bad);
        assert!(!report.passed());
        assert!(report.failures().any(|c| c.name == "explored_in_origin_cluster"));

        let mut bad = run.clone();
        let first = bad.state.probes[0].clone();
        bad.state.probes.push(first);
        assert!(verify_trace(&bad).failures().any(|c| c.name == "fresh_probes"));

        let mut bad = run;
        bad.state.steps[0].eta = !bad.state.steps[0].eta;
        assert!(!verify_trace(&bad).passed());
    }

    #[test]
    fn spread_out_exploration() {
        let spec = LatticeConfig::new(2, 1, 15, 200).spread_out(2).build().unwrap();
        let g = CouplingGeometry::new(&spec).unwrap();
        assert_eq!(g.unit_count(), 24);
        let params = Params::for_spec(&spec, 0.05, 0.3).unwrap();
        for i in 0..50 {
            let run = explore_coupled(&spec, &params, 8, i, 199).unwrap();
            assert!(verify_trace(&run).passed());
        }
    }

    #[test]
    fn eta_marginal_extremes() {
        let spec = exploration_spec(2, 9, 4).unwrap();
        let one = eta_marginal_estimate(&spec, &Params::for_spec(&spec, 1.0, 0.3).unwrap(), 1000, 1).unwrap();
        assert_eq!(one.value, 1.0);
        let zero = eta_marginal_estimate(&spec, &Params::for_spec(&spec, 0.0, 0.9).unwrap(), 1000, 1).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(eta_marginal_estimate(&spec, &Params::for_spec(&spec, 0.5, 0.5).unwrap(), 10, 1).is_err());
    }

    #[test]
    fn eta_marginal_matches_r() {
        for &(d, p, q) in &[(2usize, 0.45, 0.2), (2, 0.3, 0.6), (3, 0.2, 0.5), (1, 0.7, 0.4), (4, 0.15, 0.9)] {
            let spec = exploration_spec(d, 7, 4).unwrap();
            let params = Params::for_spec(&spec, p, q).unwrap();
            let est = eta_marginal_estimate(&spec, &params, 20_000, 77).unwrap();
            assert!(est.z_score(params.r) < 4.0, "d={d} p={p} q={q}: {} vs {}", est.value, params.r);
        }
    }

    #[test]
    fn equivalence_trivial_cases() {
        let spec = LatticeConfig::new(1, 1, 2, 2).build().unwrap();
        for q in [0.0, 1.0] {
            let params = Params::for_spec(&spec, 0.5, q).unwrap();
            let report = equivalence_check(&spec, &params, 20_000, 5).unwrap();
            assert!(report.exact);
            assert!(report.tv_distance < 3.0 * report.noise_floor + 1e-12, "{report:?}");
        }
    }

    #[test]
    fn equivalence_falls_back_to_sampling() {
        let spec = LatticeConfig::new(2, 1, 3, 3).build().unwrap();
        let params = Params::for_spec(&spec, 0.4, 0.3).unwrap();
        let report = equivalence_check(&spec, &params, 20_000, 5).unwrap();
        assert!(!report.exact);
        assert!(report.tv_distance < 3.0 * report.noise_floor, "{report:?}");
    }

    #[test]
    fn domination_refuses_vacuous_or_low_q() {
        let spec = exploration_spec(2, 16, 10).unwrap();
        let p = Params::for_spec(&spec, 0.45, 0.9).unwrap();
        assert!(domination_experiment(&spec, &p, 0.5, 10, 1).is_err());
        let p = Params::for_spec(&spec, 0.49, 0.1).unwrap();
        assert!(domination_experiment(&spec, &p, 0.5, 10, 1).is_err());
    }

    #[test]
    fn rejects_s_not_one() {
        let spec = LatticeConfig::new(2, 2, 5, 5).build().unwrap();
        let params = Params::for_spec(&spec, 0.5, 0.5).unwrap();
        assert!(matches!(explore_coupled(&spec, &params, 1, 0, 10), Err(Error::Unsupported(_))));
        let flat = LatticeConfig::new(2, 0, 5, 0).build().unwrap();
        assert!(explore_coupled(&flat, &params, 1, 0, 10).is_err());
    }
}
