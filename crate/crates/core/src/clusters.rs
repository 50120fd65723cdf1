//! Open clusters of a configuration.
//!
//! Labeling is union-find with path halving and union by size. Wrapping on
//! periodic axes uses a second forest that also carries each vertex's
//! unrolled displacement to its root along the axis: an open edge closing a
//! cycle whose displacements disagree winds around the torus.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::lattice::advance;
use crate::sampling::Configuration;

/// Union-find forest over the vertices of a box.
#[derive(Debug, Clone)]
pub struct ClusterLabeling {
    parent: Vec<u32>,
    size: Vec<u32>,
    components: usize,
}

impl ClusterLabeling {
    pub fn new(n: usize) -> Self {
        ClusterLabeling {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            components: n,
        }
    }

    #[inline]
    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let grand = self.parent[self.parent[x] as usize];
            self.parent[x] = grand;
            x = grand as usize;
        }
        x
    }

    /// `find` without compression.
    pub fn root(&self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            x = self.parent[x] as usize;
        }
        x
    }

    /// Returns `false` if `a` and `b` were already connected.
    #[inline]
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let mut ra = self.find(a);
        let mut rb = self.find(b);
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        self.components -= 1;
        true
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Size of the cluster containing `x`.
    pub fn cluster_size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r] as usize
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn vertex_count(&self) -> usize {
        self.parent.len()
    }

    /// Roots with their cluster sizes.
    pub fn roots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(|(i, &p)| p as usize == *i)
            .map(|(i, _)| (i, self.size[i] as usize))
    }

    /// Components as sorted vertex lists, sorted by first element.
    pub fn component_sets(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..self.vertex_count() {
            let r = self.find(v);
            by_root.entry(r).or_default().push(v);
        }
        let mut sets: Vec<Vec<usize>> = by_root.into_values().collect();
        sets.sort();
        sets
    }
}

pub fn label_clusters(config: &Configuration) -> ClusterLabeling {
    let mut uf = ClusterLabeling::new(config.spec.vertex_count());
    config.spec.for_each_edge(|e, a, b, _| {
        if config.is_open(e) {
            uf.union(a, b);
        }
    });
    uf
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OriginCluster {
    pub size: usize,
    /// Sorted vertex indices.
    pub members: Vec<usize>,
    /// Some member sits on a face of the `Z^d` box.
    pub touches_boundary: bool,
}

/// On a face of the `Z^d` factor.
pub fn on_d_face(coords: &[usize], d: usize, side: usize) -> bool {
    coords[..d].iter().any(|&x| x == 0 || x + 1 == side)
}

pub fn cluster_of_origin(config: &Configuration) -> OriginCluster {
    let spec = &config.spec;
    let mut uf = label_clusters(config);
    let root = uf.find(spec.origin_index());
    let mut members = Vec::new();
    let mut touches_boundary = false;
    let mut coords = vec![0usize; spec.dim()];
    for v in 0..spec.vertex_count() {
        if uf.find(v) == root {
            members.push(v);
            touches_boundary |= on_d_face(&coords, spec.d(), spec.side_d());
        }
        advance(&mut coords, spec.sides());
    }
    OriginCluster {
        size: members.len(),
        members,
        touches_boundary,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterStats {
    pub origin_size: usize,
    pub max_size: usize,
    pub components: usize,
    /// Crossing (free axis) or wrapping (periodic axis) per axis.
    pub spans: Vec<bool>,
    /// Cluster size -> number of clusters of that size.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn cluster_stats(config: &Configuration) -> ClusterStats {
    let spec = &config.spec;
    let mut uf = label_clusters(config);
    let origin_size = uf.cluster_size(spec.origin_index());
    let mut histogram = BTreeMap::new();
    let mut max_size = 0;
    for (_, size) in uf.roots() {
        *histogram.entry(size).or_insert(0) += 1;
        max_size = max_size.max(size);
    }
    let spans = (0..spec.dim())
        .map(|axis| {
            if spec.wraps(axis) {
                wraps_along(config, axis)
            } else {
                crosses_with(config, &mut uf, axis)
            }
        })
        .collect();
    ClusterStats {
        origin_size,
        max_size,
        components: uf.components(),
        spans,
        histogram,
    }
}

/// Finite-volume percolation indicator along `axis`: some open cluster
/// touches both opposing faces (free or side-2 axis) or winds around the
/// torus (periodic axis).
pub fn spans(config: &Configuration, axis: usize) -> bool {
    assert!(axis < config.spec.dim(), "axis out of range");
    if config.spec.wraps(axis) {
        wraps_along(config, axis)
    } else {
        let mut uf = label_clusters(config);
        crosses_with(config, &mut uf, axis)
    }
}

fn crosses_with(config: &Configuration, uf: &mut ClusterLabeling, axis: usize) -> bool {
    let spec = &config.spec;
    let side = spec.sides()[axis];
    let n = spec.vertex_count();
    let mut low = vec![false; n];
    let mut coords = vec![0usize; spec.dim()];
    for v in 0..n {
        if coords[axis] == 0 {
            let r = uf.find(v);
            low[r] = true;
        }
        advance(&mut coords, spec.sides());
    }
    coords.fill(0);
    for v in 0..n {
        if coords[axis] + 1 == side {
            let r = uf.find(v);
            if low[r] {
                return true;
            }
        }
        advance(&mut coords, spec.sides());
    }
    false
}

/// Union-find that tracks the unrolled displacement along one axis.
struct WindingForest {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Displacement from the vertex to its parent.
    disp: Vec<i32>,
    path: Vec<u32>,
}

impl WindingForest {
    fn new(n: usize) -> Self {
        WindingForest {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            disp: vec![0; n],
            path: Vec::new(),
        }
    }

    /// Root of `x` and the displacement from `x` to it; compresses the path.
    fn find(&mut self, x: usize) -> (usize, i32) {
        self.path.clear();
        let mut cur = x;
        while self.parent[cur] as usize != cur {
            self.path.push(cur as u32);
            cur = self.parent[cur] as usize;
        }
        let root = cur;
        // Walk back from the node nearest the root, accumulating.
        let mut acc = 0i32;
        for &v in self.path.iter().rev() {
            let v = v as usize;
            acc += self.disp[v];
            self.disp[v] = acc;
            self.parent[v] = root as u32;
        }
        (root, if x == root { 0 } else { self.disp[x] })
    }

    /// Adds an edge `a -> b` of unrolled displacement `delta`. Returns
    /// `true` if it closes a cycle with nonzero winding.
    fn link(&mut self, a: usize, b: usize, delta: i32) -> bool {
        let (ra, da) = self.find(a);
        let (rb, db) = self.find(b);
        if ra == rb {
            return da - db != delta;
        }
        // pos(ra) = pos(a) + da, pos(rb) = pos(a) + delta + db
        let (child, parent, shift) = if self.size[ra] < self.size[rb] {
            (ra, rb, delta + db - da)
        } else {
            (rb, ra, da - delta - db)
        };
        self.parent[child] = parent as u32;
        self.disp[child] = shift;
        self.size[parent] += self.size[child];
        false
    }
}

fn wraps_along(config: &Configuration, axis: usize) -> bool {
    let spec = &config.spec;
    let deltas: Vec<i32> = spec
        .slots()
        .iter()
        .map(|s| {
            s.steps
                .iter()
                .find(|(a, _)| *a == axis)
                .map_or(0, |&(_, dx)| dx as i32)
        })
        .collect();
    let mut forest = WindingForest::new(spec.vertex_count());
    let mut wound = false;
    spec.for_each_edge(|e, a, b, slot| {
        if !wound && config.is_open(e) && forest.link(a, b, deltas[slot]) {
            wound = true;
        }
    });
    wound
}

/// Histogram of `|C(0)|` over a sample of configurations.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SizeHistogram {
    pub counts: BTreeMap<usize, u64>,
    pub samples: u64,
}

impl SizeHistogram {
    pub fn add(&mut self, size: usize) {
        *self.counts.entry(size).or_insert(0) += 1;
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &SizeHistogram) {
        for (&k, &v) in &other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        self.samples += other.samples;
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.counts.iter().map(|(&k, &v)| k as f64 * v as f64).sum();
        total / self.samples as f64
    }

    /// Empirical law, indexed by size.
    pub fn frequencies(&self, max_size: usize) -> Vec<f64> {
        let mut f = vec![0.0; max_size + 1];
        for (&k, &v) in &self.counts {
            f[k] = v as f64 / self.samples as f64;
        }
        f
    }
}

pub fn size_distribution<'a>(configs: impl IntoIterator<Item = &'a Configuration>) -> SizeHistogram {
    let mut h = SizeHistogram::default();
    for c in configs {
        let mut uf = label_clusters(c);
        h.add(uf.cluster_size(c.spec.origin_index()));
    }
    h
}

/// Reference implementations that share nothing with the union-find path:
/// adjacency lists from [`crate::lattice::LatticeSpec::enumerate_edges`] and
/// breadth-first search.
pub mod oracle {
    use std::collections::VecDeque;

    use crate::lattice::{EdgeClass, LatticeSpec, Vertex};
    use crate::sampling::Configuration;

    fn adjacency(config: &Configuration) -> Vec<Vec<usize>> {
        let spec = &config.spec;
        let mut adj = vec![Vec::new(); spec.vertex_count()];
        for (i, e) in spec.enumerate_edges().iter().enumerate() {
            if config.is_open(i) {
                let a = spec.index_of(&e.a).unwrap();
                let b = spec.index_of(&e.b).unwrap();
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        adj
    }

    fn flood(adj: &[Vec<usize>], start: usize, seen: &mut [bool]) -> Vec<usize> {
        let mut out = vec![start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    out.push(w);
                    queue.push_back(w);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Components as sorted vertex lists, sorted by first element.
    pub fn bfs_components(config: &Configuration) -> Vec<Vec<usize>> {
        let adj = adjacency(config);
        let mut seen = vec![false; adj.len()];
        let mut out = Vec::new();
        for v in 0..adj.len() {
            if !seen[v] {
                out.push(flood(&adj, v, &mut seen));
            }
        }
        out
    }

    pub fn bfs_cluster(config: &Configuration, start: usize) -> Vec<usize> {
        let adj = adjacency(config);
        let mut seen = vec![false; adj.len()];
        flood(&adj, start, &mut seen)
    }

    /// Crossing between the two faces orthogonal to `axis`, by BFS from the
    /// low face.
    pub fn crosses(config: &Configuration, axis: usize) -> bool {
        let spec = &config.spec;
        let adj = adjacency(config);
        let mut seen = vec![false; adj.len()];
        let side = spec.sides()[axis];
        let coord = |v: usize| spec.coords_of(v)[axis];
        for v in 0..adj.len() {
            if coord(v) == 0 && !seen[v] {
                let c = flood(&adj, v, &mut seen);
                if c.iter().any(|&w| coord(w) + 1 == side) {
                    return true;
                }
            }
        }
        false
    }

    /// Wrapping along a periodic `axis`, decided on `copies` copies of the
    /// box glued along that axis: the torus has a winding open cycle iff some
    /// vertex reaches one of its own translates in the unrolled graph.
    /// A shortest winding path visits each base vertex once, so
    /// `copies > vertex_count` makes this exact.
    pub fn wraps_unrolled(config: &Configuration, axis: usize, copies: usize) -> bool {
        let spec: &LatticeSpec = &config.spec;
        let n = spec.vertex_count();
        let side = spec.sides()[axis];
        let mut adj = vec![Vec::new(); n * copies];
        let slot_delta = |e: &crate::lattice::Edge| -> i64 {
            let pick = |v: &Vertex| -> usize {
                if axis < spec.d() {
                    v.u[axis]
                } else {
                    v.t[axis - spec.d()]
                }
            };
            pick(&e.b) as i64 - pick(&e.a) as i64
        };
        let slots_delta: Vec<i64> = spec
            .slots()
            .iter()
            .map(|s| s.steps.iter().find(|(a, _)| *a == axis).map_or(0, |&(_, x)| x))
            .collect();
        let mut slot_of = Vec::with_capacity(spec.edge_count());
        spec.for_each_edge(|_, _, _, slot| slot_of.push(slot));
        for (i, e) in spec.enumerate_edges().iter().enumerate() {
            if !config.is_open(i) {
                continue;
            }
            let a = spec.index_of(&e.a).unwrap();
            let b = spec.index_of(&e.b).unwrap();
            let stated = slots_delta[slot_of[i]];
            let seen = slot_delta(e);
            // A wrap edge's coordinate jump differs from its step by +-side.
            let shift = (stated - seen) / side as i64;
            debug_assert!(e.class == EdgeClass::D || e.class == EdgeClass::S);
            for c in 0..copies as i64 {
                let c2 = c + shift;
                if (0..copies as i64).contains(&c2) {
                    let x = c as usize * n + a;
                    let y = c2 as usize * n + b;
                    adj[x].push(y);
                    adj[y].push(x);
                }
            }
        }
        let mut seen = vec![false; adj.len()];
        for start in 0..adj.len() {
            if seen[start] {
                continue;
            }
            let comp = flood(&adj, start, &mut seen);
            let mut copy_of: std::collections::HashMap<usize, usize> = Default::default();
            for w in comp {
                let (c, base) = (w / n, w % n);
                if let Some(&prev) = copy_of.get(&base) {
                    if prev != c {
                        return true;
                    }
                } else {
                    copy_of.insert(base, c);
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Boundary, LatticeConfig, LatticeSpec};
    use crate::sampling::{sample_configuration, sample_monotone_pair, Params};

    fn cfg(spec: &LatticeSpec, p: f64, q: f64, seed: u64) -> Configuration {
        sample_configuration(spec, &Params::for_spec(spec, p, q).unwrap(), seed, 0)
    }

    #[test]
    fn extremes() {
        let spec = LatticeConfig::new(2, 1, 4, 3).periodic().build().unwrap();
        let closed = Configuration::uniform(&spec, false);
        assert_eq!(label_clusters(&closed).components(), spec.vertex_count());
        assert_eq!(cluster_of_origin(&closed).size, 1);
        assert!((0..3).all(|a| !spans(&closed, a)));
        let open = Configuration::uniform(&spec, true);
        assert_eq!(label_clusters(&open).components(), 1);
        assert!((0..3).all(|a| spans(&open, a)));

        let free = LatticeConfig::new(2, 1, 3, 3).build().unwrap();
        let open = Configuration::uniform(&free, true);
        assert_eq!(cluster_of_origin(&open).size, 27);
        assert!((0..3).all(|a| spans(&open, a)));
    }

    #[test]
    fn single_open_edge_at_origin() {
        let spec = LatticeConfig::new(2, 1, 3, 3).build().unwrap();
        let o = spec.origin();
        let c = Configuration::from_fn(&spec, |_, e| e.a == o && e.class == crate::lattice::EdgeClass::D && e.b.u[0] == 2);
        assert_eq!(c.open_count(), 1);
        assert_eq!(cluster_of_origin(&c).size, 2);
    }

    #[test]
    fn matches_bfs_on_random_boxes() {
        let spec = LatticeConfig::new(2, 1, 6, 6).build().unwrap();
        for seed in 0..20 {
            let c = cfg(&spec, 0.4, 0.3, seed);
            assert_eq!(label_clusters(&c).component_sets(), oracle::bfs_components(&c));
            assert_eq!(spans(&c, 0), oracle::crosses(&c, 0));
        }
    }

    #[test]
    fn winding_matches_unrolled_oracle_exhaustively() {
        // Every configuration of a 3x3 torus (18 edges).
        let spec = LatticeConfig::new(2, 0, 3, 0).periodic().build().unwrap();
        assert_eq!(spec.edge_count(), 18);
        let copies = spec.vertex_count() + 2;
        for mask in 0u32..(1 << 18) {
            if mask % 7 != 0 {
                continue;
            }
            let c = Configuration::from_fn(&spec, |i, _| mask >> i & 1 == 1);
            for axis in 0..2 {
                assert_eq!(
                    spans(&c, axis),
                    oracle::wraps_unrolled(&c, axis, copies),
                    "mask {mask:#x} axis {axis}"
                );
            }
        }
    }

    #[test]
    fn winding_on_mixed_boundaries() {
        let spec = LatticeConfig::new(2, 1, 3, 3)
            .boundary(Boundary::Free, Boundary::Periodic)
            .build()
            .unwrap();
        let copies = spec.vertex_count() + 2;
        for seed in 0..200 {
            let c = cfg(&spec, 0.5, 0.5, seed);
            assert_eq!(spans(&c, 2), oracle::wraps_unrolled(&c, 2, copies), "seed {seed}");
            assert_eq!(spans(&c, 0), oracle::crosses(&c, 0));
        }
        let so = LatticeConfig::new(2, 0, 5, 0).spread_out(2).periodic().build().unwrap();
        let copies = so.vertex_count() + 2;
        for seed in 0..50 {
            let c = cfg(&so, 0.08, 0.0, seed);
            assert_eq!(spans(&c, 1), oracle::wraps_unrolled(&c, 1, copies), "seed {seed}");
        }
    }

    #[test]
    fn monotone_pairs_order_observables() {
        let spec = LatticeConfig::new(2, 1, 8, 8).build().unwrap();
        let low = Params::for_spec(&spec, 0.3, 0.1).unwrap();
        let high = Params::for_spec(&spec, 0.4, 0.2).unwrap();
        for seed in 0..50 {
            let (a, b) = sample_monotone_pair(&spec, &low, &high, seed).unwrap();
            assert!(cluster_of_origin(&a).size <= cluster_of_origin(&b).size);
            for axis in 0..3 {
                assert!(!spans(&a, axis) || spans(&b, axis));
            }
        }
    }

    #[test]
    fn histogram_extremes() {
        let spec = LatticeConfig::new(2, 1, 3, 2).build().unwrap();
        let zeros: Vec<_> = (0..5).map(|s| cfg(&spec, 0.0, 0.0, s)).collect();
        let h = size_distribution(&zeros);
        assert_eq!(h.counts, BTreeMap::from([(1, 5)]));
        let ones: Vec<_> = (0..5).map(|s| cfg(&spec, 1.0, 1.0, s)).collect();
        let h = size_distribution(&ones);
        assert_eq!(h.counts, BTreeMap::from([(18, 5)]));
        assert_eq!(h.mean(), 18.0);
    }

    #[test]
    fn stats_are_consistent() {
        let spec = LatticeConfig::new(2, 1, 7, 5).build().unwrap();
        let c = cfg(&spec, 0.45, 0.3, 11);
        let stats = cluster_stats(&c);
        let total: usize = stats.histogram.iter().map(|(k, v)| k * v).sum();
        assert_eq!(total, spec.vertex_count());
        assert_eq!(stats.components, stats.histogram.values().sum::<usize>());
        assert_eq!(stats.origin_size, cluster_of_origin(&c).size);
        for (axis, &s) in stats.spans.iter().enumerate() {
            assert_eq!(s, spans(&c, axis));
        }
    }
}
