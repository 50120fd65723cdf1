//! Exact laws on tiny boxes by summing over every edge configuration.

use crate::clusters::ClusterLabeling;
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::sampling::Params;

/// Largest edge count accepted for exhaustive enumeration.
pub const MAX_EXACT_EDGES: usize = 26;

struct Enumeration {
    edges: Vec<(usize, usize)>,
    low_bits: usize,
    low_weights: Vec<f64>,
    high_weights: Vec<f64>,
}

impl Enumeration {
    fn new(spec: &LatticeSpec, params: &Params) -> Result<Self> {
        let n = spec.edge_count();
        if n > MAX_EXACT_EDGES {
            return Err(Error::domain(format!(
                "{n} edges is too many for exhaustive enumeration (max {MAX_EXACT_EDGES})"
            )));
        }
        let mut edges = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let slots = spec.slots();
        spec.for_each_edge(|_, a, b, slot| {
            edges.push((a, b));
            probs.push(params.edge_prob(slots[slot].class, spec.is_multigraph()));
        });
        let low_bits = n / 2;
        let table = |ps: &[f64]| -> Vec<f64> {
            (0..1usize << ps.len())
                .map(|mask| {
                    ps.iter()
                        .enumerate()
                        .map(|(i, &p)| if mask >> i & 1 == 1 { p } else { 1.0 - p })
                        .product()
                })
                .collect()
        };
        Ok(Enumeration {
            low_weights: table(&probs[..low_bits]),
            high_weights: table(&probs[low_bits..]),
            edges,
            low_bits,
        })
    }

    fn for_each(&self, vertices: usize, mut f: impl FnMut(&mut ClusterLabeling, f64)) {
        let low_mask = (1usize << self.low_bits) - 1;
        for mask in 0..1usize << self.edges.len() {
            let w = self.low_weights[mask & low_mask] * self.high_weights[mask >> self.low_bits];
            if w == 0.0 {
                continue;
            }
            let mut uf = ClusterLabeling::new(vertices);
            for (i, &(a, b)) in self.edges.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    uf.union(a, b);
                }
            }
            f(&mut uf, w);
        }
    }
}

/// Law of `|C(origin)|`: entry `k` is `P(|C| = k)`.
pub fn origin_size_law(spec: &LatticeSpec, params: &Params) -> Result<Vec<f64>> {
    let en = Enumeration::new(spec, params)?;
    let origin = spec.origin_index();
    let mut law = vec![0.0; spec.vertex_count() + 1];
    en.for_each(spec.vertex_count(), |uf, w| law[uf.cluster_size(origin)] += w);
    Ok(law)
}

/// Probability that an open cluster joins the two faces orthogonal to
/// `axis`.
pub fn crossing_probability(spec: &LatticeSpec, params: &Params, axis: usize) -> Result<f64> {
    let en = Enumeration::new(spec, params)?;
    let side = spec.sides()[axis];
    let n = spec.vertex_count();
    let low: Vec<usize> = (0..n).filter(|&v| spec.coords_of(v)[axis] == 0).collect();
    let high: Vec<usize> = (0..n).filter(|&v| spec.coords_of(v)[axis] + 1 == side).collect();
    let mut total = 0.0;
    en.for_each(n, |uf, w| {
        let roots: Vec<usize> = low.iter().map(|&v| uf.find(v)).collect();
        if high.iter().any(|&v| roots.contains(&uf.find(v))) {
            total += w;
        }
    });
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeConfig;

    #[test]
    fn law_sums_to_one() {
        let spec = LatticeConfig::new(2, 1, 2, 2).build().unwrap();
        let law = origin_size_law(&spec, &Params::for_spec(&spec, 0.3, 0.6).unwrap()).unwrap();
        assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(law[0], 0.0);
    }

    #[test]
    fn two_site_chain() {
        // One edge: |C| = 2 with probability p.
        let spec = LatticeConfig::new(1, 0, 2, 0).build().unwrap();
        let law = origin_size_law(&spec, &Params::for_spec(&spec, 0.3, 0.0).unwrap()).unwrap();
        assert!((law[1] - 0.7).abs() < 1e-15 && (law[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rectangle_crossing_is_one_half_at_self_dual_point() {
        // (L+1) x L rectangle along the longer axis.
        for l in 2..=3 {
            let spec = LatticeConfig::new(1, 1, l + 1, l).build().unwrap();
            let params = Params::for_spec(&spec, 0.5, 0.5).unwrap();
            let p = crossing_probability(&spec, &params, 0).unwrap();
            assert!((p - 0.5).abs() < 1e-12, "L={l}: {p}");
        }
    }

    #[test]
    fn refuses_large_boxes() {
        let spec = LatticeConfig::new(2, 1, 4, 4).build().unwrap();
        assert!(origin_size_law(&spec, &Params::for_spec(&spec, 0.5, 0.5).unwrap()).is_err());
    }
}
