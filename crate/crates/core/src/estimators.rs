//! Monte Carlo estimates of theta-proxies, `chi`, the critical curve
//! `q_c(p)` and the crossover exponent.
//!
//! Replicas run in parallel on the global rayon pool. Every reduction is a
//! sum of integers, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clusters::{cluster_of_origin, on_d_face, spans, ClusterLabeling};
use crate::error::{Error, Result};
use crate::lattice::{advance, EdgeClass, LatticeSpec};
use crate::sampling::{cutoff, sample_configuration, stream_rng, theorem_threshold, Params, SeedPlan};
use crate::stats::{z_for_level, Estimate, DEFAULT_LEVEL};

/// Finite-volume stand-in for `theta(p, q) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surrogate {
    /// An open cluster joins the two faces orthogonal to `axis`, or winds
    /// around it when the axis is periodic.
    Spanning { axis: usize },
    /// The origin's cluster reaches a face of the `Z^d` box.
    OriginToBoundary,
}

impl Surrogate {
    pub fn tag(&self, spec: &LatticeSpec) -> String {
        match *self {
            Surrogate::Spanning { axis } if spec.wraps(axis) => format!("wrapping_axis{axis}"),
            Surrogate::Spanning { axis } => format!("spanning_axis{axis}"),
            Surrogate::OriginToBoundary => "origin_to_boundary".into(),
        }
    }

    fn validate(&self, spec: &LatticeSpec) -> Result<()> {
        match *self {
            Surrogate::Spanning { axis } if axis >= spec.dim() => Err(Error::spec(
                "surrogate.axis",
                format!("axis {axis} out of range for a {}-dimensional box", spec.dim()),
            )),
            _ => Ok(()),
        }
    }

    pub fn fires(&self, config: &crate::sampling::Configuration) -> bool {
        match *self {
            Surrogate::Spanning { axis } => spans(config, axis),
            Surrogate::OriginToBoundary => cluster_of_origin(config).touches_boundary,
        }
    }
}

/// Fraction of `n` samples on which the surrogate fires.
pub fn estimate_theta_proxy(
    spec: &LatticeSpec,
    params: &Params,
    surrogate: Surrogate,
    n: u64,
    seed: u64,
) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    surrogate.validate(spec)?;
    let hits = count_hits(spec, params, surrogate, seed, TAG_THETA, 0, n);
    Ok(Estimate::wilson(hits, n, DEFAULT_LEVEL, surrogate.tag(spec)))
}

const TAG_THETA: u32 = 0x7E7A;
const TAG_CHI: u32 = 0xC41;
const TAG_SWEEP: u32 = 0x5EE9;
/// Bisection probe `k` reads tag `TAG_PROBE + k`.
const TAG_PROBE: u32 = 0x1000_0000;

fn count_hits(
    spec: &LatticeSpec,
    params: &Params,
    surrogate: Surrogate,
    seed: u64,
    tag: u32,
    start: u64,
    count: u64,
) -> u64 {
    (start..start + count)
        .into_par_iter()
        .map(|i| {
            let cfg = sample_configuration(spec, params, seed, SeedPlan::stream(tag, i));
            u64::from(surrogate.fires(&cfg))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiEstimate {
    pub estimate: Estimate,
    /// Fraction of samples whose origin cluster reached the box boundary.
    pub boundary_fraction: f64,
    /// More than 1% of samples touched the boundary, so the box cut off
    /// clusters and the estimate is biased low.
    pub truncated: bool,
}

/// Mean size of the origin's cluster.
pub fn estimate_chi(spec: &LatticeSpec, params: &Params, n: u64, seed: u64) -> Result<ChiEstimate> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let (sum, sum_sq, touched) = (0..n)
        .into_par_iter()
        .map(|i| {
            let cfg = sample_configuration(spec, params, seed, SeedPlan::stream(TAG_CHI, i));
            let c = cluster_of_origin(&cfg);
            let s = c.size as u128;
            (s, s * s, u64::from(c.touches_boundary))
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let boundary_fraction = touched as f64 / n as f64;
    Ok(ChiEstimate {
        estimate: Estimate::mean(sum as f64, sum_sq as f64, n, DEFAULT_LEVEL, "chi"),
        boundary_fraction,
        truncated: boundary_fraction > 0.01,
    })
}

/// `chi` of bond percolation on `Z` at `p < 1`.
pub fn chi_chain(p: f64) -> f64 {
    (1.0 + p) / (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionConfig {
    /// Samples per probe before any doubling.
    pub n_per_probe: u64,
    /// Doubling stops here.
    pub max_per_probe: u64,
    /// Stop once the bracket is at most this wide.
    pub tol: f64,
    pub level: f64,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        BisectionConfig {
            n_per_probe: 200,
            max_per_probe: 3200,
            tol: 1e-3,
            level: DEFAULT_LEVEL,
        }
    }
}

impl BisectionConfig {
    fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol < 1e-3 {
            return Err(Error::spec("bisection.tol", format!("{} is below 1e-3", self.tol)));
        }
        if self.n_per_probe == 0 || self.max_per_probe < self.n_per_probe {
            return Err(Error::spec(
                "bisection.n_per_probe",
                "need 1 <= n_per_probe <= max_per_probe".to_string(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::spec("bisection.level", "must lie in (0, 1)".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Surrogate probability above 1/2: `q` is above the crossing point.
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionStep {
    pub probe: u32,
    pub q: f64,
    pub samples: u64,
    pub successes: u64,
    pub lo: f64,
    pub hi: f64,
    pub side: Side,
    /// The interval still contained 1/2 at the sample cap; the side came
    /// from the point estimate.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFlag {
    /// The surrogate already fires at `q = 0`.
    SaturatedLow,
    /// The surrogate does not fire even at `q = 1`.
    SaturatedHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMethod {
    Bisection,
    Sweep,
}

/// One estimate of `q_c(p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: f64,
    pub qc: f64,
    pub lo: f64,
    pub hi: f64,
    /// `Z^d` side length.
    pub side: usize,
    pub samples: u64,
    pub surrogate: String,
    pub method: CurveMethod,
    pub flag: Option<CurveFlag>,
    pub trace: Vec<BisectionStep>,
}

impl CurvePoint {
    /// A noise-free point, for synthetic inputs.
    pub fn exact(p: f64, qc: f64) -> Self {
        CurvePoint {
            p,
            qc,
            lo: qc,
            hi: qc,
            side: 0,
            samples: 0,
            surrogate: "exact".into(),
            method: CurveMethod::Sweep,
            flag: None,
            trace: Vec::new(),
        }
    }

    pub fn ambiguous_steps(&self) -> usize {
        self.trace.iter().filter(|s| s.ambiguous).count()
    }
}

/// Outcome of [`bisect_median`] before it is tied to a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Bisection {
    pub q: f64,
    pub lo: f64,
    pub hi: f64,
    pub samples: u64,
    pub flag: Option<CurveFlag>,
    pub trace: Vec<BisectionStep>,
}

/// Bisect `[0, 1]` for the point where a monotone response crosses 1/2.
///
/// `probe(q, start, count, id)` returns the number of successes among
/// replicas `start..start + count` of probe `id`. Each probe gets its own
/// `id`, and doubling extends the same replica sequence. The interval is
/// `[lo, hi]` where `lo` is the largest probe confidently below 1/2 and
/// `hi` the smallest confidently above, so it widens when noise forced
/// ambiguous steps.
pub fn bisect_median<F>(config: &BisectionConfig, mut probe: F) -> Result<Bisection>
where
    F: FnMut(f64, u64, u64, u32) -> u64,
{
    config.validate()?;
    let mut trace = Vec::new();
    let mut samples = 0u64;
    let mut run = |q: f64, id: u32, trace: &mut Vec<BisectionStep>| -> (Side, bool) {
        let mut n = 0;
        let mut hits = 0;
        let mut want = config.n_per_probe;
        loop {
            hits += probe(q, n, want - n, id);
            n = want;
            let est = Estimate::wilson(hits, n, config.level, "probe");
            let confident = est.lo > 0.5 || est.hi < 0.5;
            if confident || n >= config.max_per_probe {
                let side = if est.lo > 0.5 || (!confident && est.value >= 0.5) {
                    Side::Above
                } else {
                    Side::Below
                };
                samples += n;
                trace.push(BisectionStep {
                    probe: id,
                    q,
                    samples: n,
                    successes: hits,
                    lo: est.lo,
                    hi: est.hi,
                    side,
                    ambiguous: !confident,
                });
                return (side, !confident);
            }
            want = (2 * n).min(config.max_per_probe);
        }
    };

    let (at_zero, _) = run(0.0, 0, &mut trace);
    if at_zero == Side::Above {
        return Ok(Bisection { q: 0.0, lo: 0.0, hi: 0.0, samples, flag: Some(CurveFlag::SaturatedLow), trace });
    }
    let (at_one, _) = run(1.0, 1, &mut trace);
    if at_one == Side::Below {
        return Ok(Bisection { q: 1.0, lo: 1.0, hi: 1.0, samples, flag: Some(CurveFlag::SaturatedHigh), trace });
    }
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let (mut conf_lo, mut conf_hi) = (0.0f64, 1.0f64);
    let mut id = 2;
    while b - a > config.tol {
        let m = 0.5 * (a + b);
        let (side, ambiguous) = run(m, id, &mut trace);
        id += 1;
        match side {
            Side::Above => {
                b = m;
                if !ambiguous {
                    conf_hi = m;
                }
            }
            Side::Below => {
                a = m;
                if !ambiguous {
                    conf_lo = m;
                }
            }
        }
    }
    Ok(Bisection {
        q: 0.5 * (a + b),
        lo: conf_lo,
        hi: conf_hi,
        samples,
        flag: None,
        trace,
    })
}

/// Bisect in `q` for the point where the surrogate fires with probability
/// 1/2. Probe `k` uses the same streams at every `p`, so raising `p` can
/// only make each probe fire more often.
pub fn estimate_qc_bisect(
    spec: &LatticeSpec,
    p: f64,
    surrogate: Surrogate,
    config: &BisectionConfig,
    seed: u64,
) -> Result<CurvePoint> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::spec("p", format!("{p} is outside [0, 1)")));
    }
    surrogate.validate(spec)?;
    let m = spec.parallel_count();
    let result = bisect_median(config, |q, start, count, id| {
        let params = Params::new(p, q, m).expect("q lies in [0, 1]");
        count_hits(spec, &params, surrogate, seed, TAG_PROBE + id, start, count)
    })?;
    Ok(CurvePoint {
        p,
        qc: result.q,
        lo: result.lo,
        hi: result.hi,
        side: spec.side_d(),
        samples: result.samples,
        surrogate: surrogate.tag(spec),
        method: CurveMethod::Bisection,
        flag: result.flag,
        trace: result.trace,
    })
}

/// Smallest `q` at which the surrogate fires on sample `stream`, holding
/// every uniform fixed; `INFINITY` if it does not fire even at `q = 1`.
///
/// Adds vertical edges in increasing order of their uniforms, so
/// `surrogate fires on sample_configuration(spec, (p, q), seed, stream)`
/// exactly when `q >= threshold`.
pub fn q_threshold(spec: &LatticeSpec, p: f64, surrogate: Surrogate, seed: u64, stream: u64) -> Result<f64> {
    const LOW: u8 = 1;
    const HIGH: u8 = 2;
    const ORIGIN: u8 = 4;
    surrogate.validate(spec)?;
    if spec.is_multigraph() {
        return Err(Error::Unsupported("threshold sweep on the multigraph".into()));
    }
    if let Surrogate::Spanning { axis } = surrogate {
        if spec.wraps(axis) {
            return Err(Error::Unsupported("threshold sweep for wrapping events".into()));
        }
    }
    let target = match surrogate {
        Surrogate::Spanning { .. } => LOW | HIGH,
        Surrogate::OriginToBoundary => LOW | ORIGIN,
    };
    let n = spec.vertex_count();
    let mut uf = ClusterLabeling::new(n);
    let mut vertical: Vec<(u32, u32, u32)> = Vec::new();
    let mut rng = stream_rng(seed, stream);
    let p_cut = cutoff(p);
    let slots = spec.slots();
    spec.for_each_edge(|_, a, b, slot| {
        let u = rand::Rng::next_u32(&mut rng);
        match slots[slot].class {
            EdgeClass::D => {
                if (u as u64) < p_cut {
                    uf.union(a, b);
                }
            }
            EdgeClass::S => vertical.push((u, a as u32, b as u32)),
        }
    });

    let mut flags = vec![0u8; n];
    let mut coords = vec![0usize; spec.dim()];
    let sides = spec.sides().to_vec();
    for v in 0..n {
        let mut f = 0;
        match surrogate {
            Surrogate::Spanning { axis } => {
                if coords[axis] == 0 {
                    f |= LOW;
                }
                if coords[axis] + 1 == sides[axis] {
                    f |= HIGH;
                }
            }
            Surrogate::OriginToBoundary => {
                if on_d_face(&coords, spec.d(), spec.side_d()) {
                    f |= LOW;
                }
            }
        }
        if v == spec.origin_index() {
            f |= ORIGIN;
        }
        if f != 0 {
            let r = uf.find(v);
            flags[r] |= f;
            if flags[r] & target == target {
                return Ok(0.0);
            }
        }
        advance(&mut coords, &sides);
    }

    vertical.sort_unstable();
    for (u, a, b) in vertical {
        let (ra, rb) = (uf.find(a as usize), uf.find(b as usize));
        if ra == rb {
            continue;
        }
        let merged = flags[ra] | flags[rb];
        uf.union(ra, rb);
        let r = uf.find(ra);
        flags[r] = merged;
        if merged & target == target {
            return Ok((u as f64 + 1.0) / 4_294_967_296.0);
        }
    }
    Ok(f64::INFINITY)
}

/// Per-sample thresholds `q*` for replicas `0..n`.
pub fn q_thresholds(spec: &LatticeSpec, p: f64, surrogate: Surrogate, n: u64, seed: u64) -> Result<Vec<f64>> {
    q_threshold(spec, p, surrogate, seed, SeedPlan::stream(TAG_SWEEP, 0))?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| q_threshold(spec, p, surrogate, seed, SeedPlan::stream(TAG_SWEEP, i)).expect("validated"))
        .collect())
}

/// `q_c` as the sample median of per-sample thresholds, with the
/// distribution-free order-statistic interval for the median.
pub fn estimate_qc_sweep(
    spec: &LatticeSpec,
    p: f64,
    surrogate: Surrogate,
    n: u64,
    seed: u64,
) -> Result<CurvePoint> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let mut t = q_thresholds(spec, p, surrogate, n, seed)?;
    t.sort_by(f64::total_cmp);
    let (qc, lo, hi) = median_interval(&t, DEFAULT_LEVEL);
    let flag = if hi <= 0.0 {
        Some(CurveFlag::SaturatedLow)
    } else if lo > 1.0 {
        Some(CurveFlag::SaturatedHigh)
    } else {
        None
    };
    Ok(CurvePoint {
        p,
        qc: qc.clamp(0.0, 1.0),
        lo: lo.clamp(0.0, 1.0),
        hi: hi.clamp(0.0, 1.0),
        side: spec.side_d(),
        samples: n,
        surrogate: surrogate.tag(spec),
        method: CurveMethod::Sweep,
        flag,
        trace: Vec::new(),
    })
}

/// Median of sorted data with the binomial order-statistic interval.
fn median_interval(sorted: &[f64], level: f64) -> (f64, f64, f64) {
    let n = sorted.len();
    let z = z_for_level(level);
    let half = 0.5 * z * (n as f64).sqrt();
    let mid = 0.5 * n as f64;
    let lo_rank = (mid - half).floor().max(1.0) as usize;
    let hi_rank = ((mid + half).ceil() as usize).min(n);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (median, sorted[lo_rank - 1], sorted[hi_rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    /// Slope of `log q_c` against `log |p - p_c|`.
    pub psi: f64,
    pub intercept: f64,
    /// Covariance of `(intercept, psi)`.
    pub covariance: [[f64; 2]; 2],
    pub psi_se: f64,
    /// `log q_c` minus the fitted line, per used point.
    pub residuals: Vec<f64>,
    /// `p` values used, in input order.
    pub p_grid: Vec<f64>,
    /// `p` values dropped: at or above `p_c`, or with an interval touching 0.
    pub refused: Vec<f64>,
    /// Inverse-variance weights; plain least squares when some point has
    /// no spread.
    pub weighted: bool,
}

/// Least squares of `log q_c` on `log |p - p_c|`, weighted by the inverse
/// delta-method variance of `log q_c`.
pub fn fit_crossover_exponent(points: &[CurvePoint], p_c: f64) -> Result<ExponentFit> {
    let mut used = Vec::new();
    let mut refused = Vec::new();
    for pt in points {
        if pt.p < p_c && pt.lo > 0.0 && pt.qc > 0.0 {
            used.push(pt);
        } else {
            refused.push(pt.p);
        }
    }
    if used.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            usable: used.len(),
        });
    }
    for (i, a) in used.iter().enumerate() {
        if used[..i].iter().any(|b| b.p == a.p) {
            return Err(Error::domain(format!("p = {} appears twice", a.p)));
        }
    }
    let x: Vec<f64> = used.iter().map(|pt| (p_c - pt.p).ln()).collect();
    let y: Vec<f64> = used.iter().map(|pt| pt.qc.ln()).collect();
    let z = z_for_level(DEFAULT_LEVEL);
    let var: Vec<f64> = used
        .iter()
        .map(|pt| ((pt.hi - pt.lo) / (2.0 * z * pt.qc)).powi(2))
        .collect();
    let weighted = var.iter().all(|&v| v > 0.0 && v.is_finite());
    let w: Vec<f64> = if weighted {
        var.iter().map(|v| 1.0 / v).collect()
    } else {
        vec![1.0; used.len()]
    };

    let sw: f64 = w.iter().sum();
    let xbar = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ybar = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xbar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("all points share one p"));
    }
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xbar) * (y[i] - ybar)).sum();
    let psi = sxy / sxx;
    let intercept = ybar - psi * xbar;
    let residuals: Vec<f64> = x.iter().zip(&y).map(|(x, y)| y - (intercept + psi * x)).collect();

    // Known variances when weighted; residual variance otherwise.
    let scale = if weighted {
        1.0
    } else {
        residuals.iter().map(|r| r * r).sum::<f64>() / (x.len() - 2) as f64
    };
    let var_psi = scale / sxx;
    let var_int = scale * (1.0 / sw + xbar * xbar / sxx);
    let cov = -scale * xbar / sxx;
    Ok(ExponentFit {
        psi,
        intercept,
        covariance: [[var_int, cov], [cov, var_psi]],
        psi_se: var_psi.sqrt(),
        residuals,
        p_grid: used.iter().map(|pt| pt.p).collect(),
        refused,
        weighted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub p: f64,
    /// `min(8 d^2 (p_c - p), 1)`.
    pub line: f64,
    pub vacuous: bool,
    pub qc_hi: f64,
    pub holds: bool,
    /// `q_c / (p_c - p)`.
    pub ratio: f64,
}

/// Compare the upper end of a `q_c` interval with `8 d^2 (p_c - p)`.
pub fn bound_check(point: &CurvePoint, d: usize, p_c: f64) -> Result<BoundReport> {
    let t = theorem_threshold(d, point.p, p_c)?;
    Ok(BoundReport {
        p: point.p,
        line: t.value,
        vacuous: t.vacuous,
        qc_hi: point.hi,
        holds: t.vacuous || point.hi <= t.value,
        ratio: point.qc / (p_c - point.p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub p: f64,
    pub qc: CurvePoint,
    /// `chi` of homogeneous `Z^d` percolation at `p`.
    pub chi: f64,
    pub chi_exact: bool,
    pub product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTable {
    pub rows: Vec<DiagnosticRow>,
    /// Largest over smallest product; `None` for an empty grid.
    pub spread: Option<f64>,
    /// The products stay within a factor of 10 of each other.
    pub stabilizes: Option<bool>,
}

/// Tabulate `q_c(p) chi_p` over a grid of subcritical `p`. `chi_p` is exact
/// on `Z` and sampled with `q = 0` otherwise.
pub fn conjecture_diagnostic(
    p_grid: &[f64],
    spec: &LatticeSpec,
    surrogate: Surrogate,
    bisection: &BisectionConfig,
    chi_samples: u64,
    seed: u64,
) -> Result<DiagnosticTable> {
    let mut rows = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        let qc = estimate_qc_bisect(spec, p, surrogate, bisection, seed)?;
        let (chi, chi_exact) = if spec.d() == 1 {
            (chi_chain(p), true)
        } else {
            let params = Params::for_spec(spec, p, 0.0)?;
            (estimate_chi(spec, &params, chi_samples, seed)?.estimate.value, false)
        };
        rows.push(DiagnosticRow {
            p,
            product: qc.qc * chi,
            qc,
            chi,
            chi_exact,
        });
    }
    let (min, max) = rows
        .iter()
        .map(|r| r.product)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let spread = (!rows.is_empty()).then(|| max / min);
    Ok(DiagnosticTable {
        stabilizes: spread.map(|s| s.is_finite() && s <= 10.0),
        spread,
        rows,
    })
}
