//! Deterministic arithmetic checks: the `qbar` round trip and the
//! domination chain. No randomness, well under a second.

use anisoperc::sampling::{effective_qbar, theorem_threshold, verify_domination_chain};

use crate::manifest::default_pc;
use crate::output::{CheckRow, Row};

pub const ROUND_TRIP_TOL: f64 = 1e-12;
pub const PARALLEL_COUNTS: [usize; 5] = [2, 4, 6, 8, 12];
pub const GRID_POINTS: usize = 1000;

/// `1 - (1 - qbar)^m = q` for `q` in `0, 0.01, ..., 1`.
pub fn round_trip_rows() -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for &m in &PARALLEL_COUNTS {
        for k in 0..=100 {
            let q = k as f64 / 100.0;
            let qbar = effective_qbar(q, m);
            let back = 1.0 - (1.0 - qbar).powi(m as i32);
            rows.push(CheckRow {
                schema: CheckRow::SCHEMA,
                check: "qbar_round_trip",
                m: Some(m),
                q,
                lhs: back,
                rhs: q,
                holds: (back - q).abs() <= ROUND_TRIP_TOL,
                ..CheckRow::default()
            });
        }
    }
    rows
}

/// The open grid `a + (b - a) k / (n + 1)`, `k = 1..=n`.
fn open_grid(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (1..=n).map(move |k| a + (b - a) * k as f64 / (n + 1) as f64)
}

/// For each `d` in `2..=8`, each `p` on a grid in `(1/(2d), p_c)` where
/// the threshold is at most 1, and `q` at the threshold and at 1: `r` is
/// strictly above `p + q/(8 d^2)` and at least `p_c`.
pub fn chain_rows(pc_override: Option<f64>) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for d in 2..=8usize {
        let p_c = pc_override.or_else(|| default_pc(d)).expect("defaults cover d = 2..=8");
        let lo = 1.0 / (2.0 * d as f64);
        let mut covered = 0;
        for p in open_grid(lo, p_c, GRID_POINTS) {
            let Ok(t) = theorem_threshold(d, p, p_c) else {
                continue;
            };
            if t.vacuous {
                continue;
            }
            covered += 1;
            let mut qs = vec![t.value];
            if t.value < 1.0 {
                qs.push(1.0);
            }
            for q in qs {
                let c = verify_domination_chain(d, p, q, p_c);
                let row = |check, rhs, holds| CheckRow {
                    schema: CheckRow::SCHEMA,
                    check,
                    d: Some(d),
                    p: Some(p),
                    q,
                    p_c: Some(p_c),
                    lhs: c.r,
                    rhs,
                    holds,
                    ..CheckRow::default()
                };
                rows.push(row("chain_strict_step", c.lower, c.strict_step));
                rows.push(row("chain_reaches_pc", p_c, c.reaches_pc));
            }
        }
        if covered == 0 {
            rows.push(CheckRow {
                schema: CheckRow::SCHEMA,
                check: "chain_grid_nonempty",
                d: Some(d),
                p_c: Some(p_c),
                lhs: 0.0,
                rhs: 1.0,
                holds: false,
                ..CheckRow::default()
            });
        }
    }
    rows
}

pub fn all_rows(pc_override: Option<f64>) -> Vec<CheckRow> {
    let mut rows = round_trip_rows();
    rows.extend(chain_rows(pc_override));
    rows
}
