//! Seeded configurations under `P_{p,q}` and the parameter arithmetic of the
//! multigraph reduction.
//!
//! Every edge draws one `u32` from a ChaCha8 keystream selected by
//! `(seed, stream)` and is open iff the draw falls below
//! `floor(prob * 2^32)`. Two parameter sets sampled from the same stream are
//! therefore ordered edge by edge.

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{EdgeClass, LatticeSpec};

/// `qbar` with `1 - q = (1 - qbar)^m`: the opening probability of each of
/// `m` parallel copies that together behave like one edge of parameter `q`.
pub fn effective_qbar(q: f64, m: usize) -> f64 {
    assert!(m >= 1, "m must be positive");
    let q = q.clamp(0.0, 1.0);
    if q == 1.0 {
        return 1.0;
    }
    -((-q).ln_1p() / m as f64).exp_m1()
}

/// `r = p + qbar * p * (1 - p)`.
pub fn effective_r(p: f64, qbar: f64) -> f64 {
    (p + qbar * p * (1.0 - p)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub p: f64,
    pub q: f64,
    /// Number of parallel copies `m = |U|` used to derive `qbar`.
    pub m: usize,
    pub qbar: f64,
    pub r: f64,
}

impl Params {
    pub fn new(p: f64, q: f64, m: usize) -> Result<Self> {
        for (name, x) in [("p", p), ("q", q)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::domain(format!("{name} = {x} is not a probability")));
            }
        }
        if m == 0 {
            return Err(Error::domain("m must be positive"));
        }
        let qbar = effective_qbar(q, m);
        Ok(Params {
            p,
            q,
            m,
            qbar,
            r: effective_r(p, qbar),
        })
    }

    /// Parameters with `m = |U|` of the spec.
    pub fn for_spec(spec: &LatticeSpec, p: f64, q: f64) -> Result<Self> {
        Params::new(p, q, spec.parallel_count())
    }

    /// Open probability of an edge of the given class.
    pub fn edge_prob(&self, class: EdgeClass, multigraph: bool) -> f64 {
        match class {
            EdgeClass::D => self.p,
            EdgeClass::S if multigraph => self.qbar,
            EdgeClass::S => self.q,
        }
    }

    pub fn dominated_by(&self, other: &Params) -> bool {
        self.p <= other.p && self.q <= other.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// `min(8 d^2 (p_c - p), 1)`.
    pub value: f64,
    /// `8 d^2 (p_c - p)` before clamping.
    pub raw: f64,
    /// The raw bound exceeds 1 and says nothing.
    pub vacuous: bool,
}

/// The `q` above which the layer-hopping coupling guarantees percolation.
pub fn theorem_threshold(d: usize, p: f64, p_c: f64) -> Result<Threshold> {
    if !(0.0..=1.0).contains(&p_c) || p < 0.0 {
        return Err(Error::domain(format!("need 0 <= p < p_c <= 1, got p = {p}, p_c = {p_c}")));
    }
    if p >= p_c {
        return Err(Error::domain(format!(
            "p = {p} is not below p_c = {p_c}; the threshold only applies to subcritical p"
        )));
    }
    let raw = 8.0 * (d * d) as f64 * (p_c - p);
    Ok(Threshold {
        value: raw.min(1.0),
        raw,
        vacuous: raw > 1.0,
    })
}

/// Intermediate values of the domination inequality chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainReport {
    pub d: usize,
    pub p: f64,
    pub q: f64,
    pub p_c: f64,
    pub qbar: f64,
    pub r: f64,
    /// `p + q / (8 d^2)`.
    pub lower: f64,
    /// `p` lies in `(1/(2d), p_c)`.
    pub in_window: bool,
    /// `r > p + q / (8 d^2)`.
    pub strict_step: bool,
    /// `r >= p_c`.
    pub reaches_pc: bool,
    pub holds: bool,
}

pub fn verify_domination_chain(d: usize, p: f64, q: f64, p_c: f64) -> ChainReport {
    let m = 2 * d;
    let qbar = effective_qbar(q, m);
    let r = effective_r(p, qbar);
    let lower = p + q / (8.0 * (d * d) as f64);
    let in_window = p > 1.0 / m as f64 && p < p_c;
    let strict_step = r > lower;
    let reaches_pc = r >= p_c;
    ChainReport {
        d,
        p,
        q,
        p_c,
        qbar,
        r,
        lower,
        in_window,
        strict_step,
        reaches_pc,
        holds: strict_step && reaches_pc,
    }
}

/// Integer cutoff with `P(u32 < cutoff) = prob` up to `2^-32`.
#[inline]
pub fn cutoff(prob: f64) -> u64 {
    (prob.clamp(0.0, 1.0) * 4_294_967_296.0) as u64
}

/// A keystream selected by `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Master seed plus replica count. Replica `i` of experiment `tag` reads
/// stream `(tag << 32) | i`, so distinct `(tag, i)` pairs never share a
/// keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub replicas: u64,
}

impl SeedPlan {
    pub fn new(master: u64, replicas: u64) -> Self {
        SeedPlan { master, replicas }
    }

    pub fn stream(tag: u32, replica: u64) -> u64 {
        assert!(replica < 1 << 32, "replica index exceeds the 32-bit stream field");
        ((tag as u64) << 32) | replica
    }

    pub fn streams(&self, tag: u32) -> impl Iterator<Item = u64> {
        (0..self.replicas).map(move |i| SeedPlan::stream(tag, i))
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        stream_rng(self.master, stream)
    }
}

/// One sampled `omega`: an open bit per edge in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub spec: LatticeSpec,
    pub params: Params,
    pub seed: u64,
    pub stream: u64,
    states: FixedBitSet,
}

impl Configuration {
    pub fn from_bits(spec: &LatticeSpec, params: Params, states: FixedBitSet) -> Self {
        assert_eq!(states.len(), spec.edge_count(), "one bit per edge");
        Configuration {
            spec: spec.clone(),
            params,
            seed: 0,
            stream: 0,
            states,
        }
    }

    pub fn uniform(spec: &LatticeSpec, open: bool) -> Self {
        let mut states = FixedBitSet::with_capacity(spec.edge_count());
        if open {
            states.insert_range(..);
        }
        let x = if open { 1.0 } else { 0.0 };
        let params = Params::for_spec(spec, x, x).expect("0 and 1 are probabilities");
        Configuration::from_bits(spec, params, states)
    }

    /// Hand-built configuration: `open(edge_index, edge)` decides each edge.
    pub fn from_fn(
        spec: &LatticeSpec,
        mut open: impl FnMut(usize, &crate::lattice::Edge) -> bool,
    ) -> Self {
        let mut states = FixedBitSet::with_capacity(spec.edge_count());
        for (i, e) in spec.enumerate_edges().iter().enumerate() {
            states.set(i, open(i, e));
        }
        let params = Params::for_spec(spec, 0.0, 0.0).expect("valid");
        Configuration::from_bits(spec, params, states)
    }

    #[inline]
    pub fn is_open(&self, edge: usize) -> bool {
        self.states[edge]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn open_count(&self) -> usize {
        self.states.count_ones(..)
    }

    pub fn bits(&self) -> &FixedBitSet {
        &self.states
    }

    /// Every open edge is open in `other` too.
    pub fn is_subset_of(&self, other: &Configuration) -> bool {
        self.states.is_subset(&other.states)
    }

    /// Merge parallel vertical copies: a vertical edge is open iff some
    /// copy is.
    pub fn collapse(&self) -> Configuration {
        if !self.spec.is_multigraph() {
            return self.clone();
        }
        let plain = crate::lattice::collapse_multigraph(&self.spec);
        let mut states = FixedBitSet::with_capacity(plain.edge_count());
        let mut out = 0usize;
        let slots = self.spec.slots();
        self.spec.for_each_edge(|e, _, _, slot| {
            match slots[slot].parallel {
                Some(k) if k > 0 => {
                    if self.states[e] {
                        states.insert(out - 1);
                    }
                }
                _ => {
                    states.set(out, self.states[e]);
                    out += 1;
                }
            }
        });
        debug_assert_eq!(out, plain.edge_count());
        Configuration {
            spec: plain,
            params: self.params,
            seed: self.seed,
            stream: self.stream,
            states,
        }
    }
}

/// Independent edges: `D` edges open with `p`, vertical edges with `q`
/// (or `qbar` per parallel copy in multigraph mode).
pub fn sample_configuration(spec: &LatticeSpec, params: &Params, seed: u64, stream: u64) -> Configuration {
    let mut rng = stream_rng(seed, stream);
    let multigraph = spec.is_multigraph();
    let cut: Vec<u64> = spec
        .slots()
        .iter()
        .map(|s| cutoff(params.edge_prob(s.class, multigraph)))
        .collect();
    let mut states = FixedBitSet::with_capacity(spec.edge_count());
    spec.for_each_edge(|e, _, _, slot| {
        if (rng.next_u32() as u64) < cut[slot] {
            states.insert(e);
        }
    });
    Configuration {
        spec: spec.clone(),
        params: *params,
        seed,
        stream,
        states,
    }
}

/// Two configurations driven by the same uniforms, so the first open set
/// is contained in the second on every sample.
pub fn sample_monotone_pair(
    spec: &LatticeSpec,
    low: &Params,
    high: &Params,
    seed: u64,
) -> Result<(Configuration, Configuration)> {
    if !low.dominated_by(high) {
        return Err(Error::domain(format!(
            "parameters are not ordered: ({}, {}) vs ({}, {})",
            low.p, low.q, high.p, high.q
        )));
    }
    Ok((
        sample_configuration(spec, low, seed, 0),
        sample_configuration(spec, high, seed, 0),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeConfig;
    use proptest::prelude::*;

    #[test]
    fn qbar_values() {
        assert_eq!(effective_qbar(0.0, 4), 0.0);
        assert_eq!(effective_qbar(1.0, 7), 1.0);
        assert!((effective_qbar(0.19, 2) - 0.1).abs() < 1e-15);
        // small q stays accurate
        let tiny = effective_qbar(1e-12, 4);
        assert!((tiny - 2.5e-13).abs() < 1e-25);
    }

    #[test]
    fn qbar_round_trip_grid() {
        for m in [2usize, 4, 6, 8, 12] {
            for i in 0..=100 {
                let q = i as f64 / 100.0;
                let qbar = effective_qbar(q, m);
                let back = 1.0 - (1.0 - qbar).powi(m as i32);
                assert!((back - q).abs() <= 1e-12, "q={q} m={m}");
                assert!(qbar <= q + 1e-15);
            }
        }
    }

    #[test]
    fn r_values() {
        assert_eq!(effective_r(0.0, 0.7), 0.0);
        assert_eq!(effective_r(1.0, 0.7), 1.0);
        assert!((effective_r(0.5, 0.5) - 0.625).abs() < 1e-15);
        let qbar = effective_qbar(0.2, 4);
        assert!((qbar - 0.054258).abs() < 1e-6);
        assert!((effective_r(0.45, qbar) - 0.463_428_951_8).abs() < 1e-9);
    }

    #[test]
    fn r_is_monotone_on_grid() {
        let g = |i: usize| i as f64 / 99.0;
        for i in 0..100 {
            for j in 0..100 {
                let r = effective_r(g(i), g(j));
                if i + 1 < 100 {
                    assert!(effective_r(g(i + 1), g(j)) >= r);
                }
                if j + 1 < 100 {
                    assert!(effective_r(g(i), g(j + 1)) >= r);
                }
            }
        }
    }

    #[test]
    fn threshold_values() {
        let t = theorem_threshold(2, 0.49, 0.5).unwrap();
        assert!((t.value - 0.32).abs() < 1e-12 && !t.vacuous);
        let t = theorem_threshold(2, 0.45, 0.5).unwrap();
        assert!(t.vacuous && t.value == 1.0 && (t.raw - 1.6).abs() < 1e-12);
        let t = theorem_threshold(2, 0.5 - 1e-12, 0.5).unwrap();
        assert!(t.value < 1e-9);
        assert!(theorem_threshold(2, 0.5, 0.5).is_err());
        assert!(theorem_threshold(2, 0.6, 0.5).is_err());
    }

    #[test]
    fn chain_examples() {
        let c = verify_domination_chain(2, 0.49, 0.32, 0.5);
        assert!((c.r - 0.512970).abs() < 1e-6, "{}", c.r);
        assert!(c.holds && c.in_window);
        let c = verify_domination_chain(2, 0.499, 0.032, 0.5);
        assert!(c.r > 0.5 && c.holds);
        let c = verify_domination_chain(3, 0.3, 0.0, 0.35);
        assert_eq!(c.r, 0.3);
        assert!(!c.holds);
        let c = verify_domination_chain(2, 0.2, 0.5, 0.5);
        assert!(!c.in_window);
    }

    #[test]
    fn extreme_configurations() {
        let spec = LatticeConfig::new(2, 1, 4, 3).build().unwrap();
        let all = sample_configuration(&spec, &Params::for_spec(&spec, 1.0, 1.0).unwrap(), 1, 0);
        assert_eq!(all.open_count(), spec.edge_count());
        let none = sample_configuration(&spec, &Params::for_spec(&spec, 0.0, 0.0).unwrap(), 1, 0);
        assert_eq!(none.open_count(), 0);
    }

    #[test]
    fn open_fraction_matches_p() {
        // 2 * 708 * 707 = 1_001_112 edges, all of class D.
        let spec = LatticeConfig::new(2, 0, 708, 0).build().unwrap();
        let p = 0.37;
        let cfg = sample_configuration(&spec, &Params::for_spec(&spec, p, 0.0).unwrap(), 9, 3);
        let n = spec.edge_count() as f64;
        let frac = cfg.open_count() as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((frac - p).abs() < 4.0 * se, "{frac}");
    }

    #[test]
    fn multigraph_verticals_use_qbar() {
        let spec = LatticeConfig::new(2, 1, 60, 60).multigraph(true).build().unwrap();
        let params = Params::for_spec(&spec, 0.0, 0.3).unwrap();
        let cfg = sample_configuration(&spec, &params, 4, 0);
        let verticals = 60 * 60 * 59 * 4;
        let frac = cfg.open_count() as f64 / verticals as f64;
        let se = (params.qbar * (1.0 - params.qbar) / verticals as f64).sqrt();
        assert!((frac - params.qbar).abs() < 4.0 * se);
        let plain = cfg.collapse();
        let frac = plain.open_count() as f64 / (verticals / 4) as f64;
        assert!((frac - 0.3).abs() < 4.0 * (0.21f64 / (verticals / 4) as f64).sqrt());
    }

    #[test]
    fn monotone_pair_rejects_unordered() {
        let spec = LatticeConfig::new(2, 1, 4, 4).build().unwrap();
        let a = Params::for_spec(&spec, 0.5, 0.1).unwrap();
        let b = Params::for_spec(&spec, 0.4, 0.2).unwrap();
        assert!(sample_monotone_pair(&spec, &a, &b, 1).is_err());
        let (x, y) = sample_monotone_pair(&spec, &a, &a, 1).unwrap();
        assert_eq!(x.bits(), y.bits());
    }

    #[test]
    fn seed_streams_are_distinct() {
        let plan = SeedPlan::new(5, 4);
        let s: Vec<u64> = plan.streams(1).chain(plan.streams(2)).collect();
        let unique: std::collections::HashSet<_> = s.iter().collect();
        assert_eq!(unique.len(), 8);
        let mut a = plan.rng(s[0]);
        let mut b = plan.rng(s[1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    proptest! {
        #[test]
        fn sampling_is_deterministic(seed in any::<u64>(), stream in 0u64..1000, p in 0.0f64..1.0, q in 0.0f64..1.0) {
            let spec = LatticeConfig::new(2, 1, 5, 4).multigraph(true).build().unwrap();
            let params = Params::for_spec(&spec, p, q).unwrap();
            let a = sample_configuration(&spec, &params, seed, stream);
            let b = sample_configuration(&spec, &params, seed, stream);
            prop_assert_eq!(a.bits(), b.bits());
            prop_assert_eq!(a.len(), spec.edge_count());
        }

        #[test]
        fn monotone_pair_is_a_subset(seed in any::<u64>(), p in 0.0f64..1.0, q in 0.0f64..1.0, dp in 0.0f64..0.5, dq in 0.0f64..0.5) {
            let spec = LatticeConfig::new(2, 1, 6, 5).build().unwrap();
            let low = Params::for_spec(&spec, p, q).unwrap();
            let high = Params::for_spec(&spec, (p + dp).min(1.0), (q + dq).min(1.0)).unwrap();
            let (a, b) = sample_monotone_pair(&spec, &low, &high, seed).unwrap();
            prop_assert!(a.is_subset_of(&b));
        }

        #[test]
        fn qbar_inverts(q in 0.0f64..=1.0, m in 1usize..16) {
            let qbar = effective_qbar(q, m);
            prop_assert!((1.0 - (1.0 - qbar).powi(m as i32) - q).abs() < 1e-12);
        }
    }
}
