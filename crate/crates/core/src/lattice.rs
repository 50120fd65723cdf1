//! Finite boxes of `Z^d x Z^s`.
//!
//! A [`LatticeSpec`] fixes the box geometry and the edge set. Vertices are
//! linearized row-major with the first `Z^d` axis fastest and the `Z^s` axes
//! slowest, so one `Z^s` layer is a contiguous block of indices. Edges are
//! enumerated in a canonical order: by lower vertex index, then by slot
//! (the `Z^d` directions first, then the `Z^s` axes, each expanded into its
//! parallel copies in multigraph mode). Every edge-indexed structure in the
//! crate (configurations, labelings) relies on this order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary rule for one factor of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Free,
    Periodic,
}

/// Which edge set lives on the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    NearestNeighbor,
    /// `Z^d x {0, ..., l}` with the vertical coordinate taken modulo `l + 1`.
    /// `l = 1` is the bilayer.
    Layered { l: usize },
    /// `Z^d` edges join every pair at sup-norm distance `1..=range`.
    SpreadOut { range: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    NearestNeighbor,
    Layered,
    SpreadOut,
}

/// Edge class: `D` edges move inside a `Z^d` layer, `S` edges move along `Z^s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeClass {
    D,
    S,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Vertex {
    pub u: Vec<usize>,
    pub t: Vec<usize>,
}

impl Vertex {
    pub fn new(u: Vec<usize>, t: Vec<usize>) -> Self {
        Vertex { u, t }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Edge {
    pub a: Vertex,
    pub b: Vertex,
    pub class: EdgeClass,
    /// Index into [`LatticeSpec::unit_set`] for the parallel copies of a
    /// vertical edge in multigraph mode.
    pub parallel: Option<usize>,
}

/// One edge slot per vertex: the offset to the far endpoint, the edge class and
/// (multigraph only) which parallel copy it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub class: EdgeClass,
    /// Nonzero `(axis, delta)` pairs of the offset.
    pub steps: Vec<(usize, i64)>,
    pub parallel: Option<usize>,
}

/// Plain, serializable form of a lattice spec. All keys of the `[lattice]`
/// block of a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub d: usize,
    #[serde(default)]
    pub s: usize,
    pub side_d: usize,
    /// Height along each `Z^s` axis. Ignored (and inferred) for `layered`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_s: Option<usize>,
    #[serde(default)]
    pub boundary: Boundary,
    /// Boundary of the `Z^s` factor; defaults to `boundary`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_s: Option<Boundary>,
    #[serde(default = "default_variant")]
    pub variant: VariantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<usize>,
    /// `l` of `layered(l)`: the box has `l + 1` layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default)]
    pub multigraph: bool,
}

fn default_variant() -> VariantKind {
    VariantKind::NearestNeighbor
}

impl LatticeConfig {
    pub fn new(d: usize, s: usize, side_d: usize, side_s: usize) -> Self {
        LatticeConfig {
            d,
            s,
            side_d,
            side_s: (s > 0).then_some(side_s),
            boundary: Boundary::Free,
            boundary_s: None,
            variant: VariantKind::NearestNeighbor,
            range: None,
            layers: None,
            multigraph: false,
        }
    }

    pub fn periodic(mut self) -> Self {
        self.boundary = Boundary::Periodic;
        self
    }

    pub fn boundary(mut self, d_factor: Boundary, s_factor: Boundary) -> Self {
        self.boundary = d_factor;
        self.boundary_s = Some(s_factor);
        self
    }

    pub fn layered(mut self, l: usize) -> Self {
        self.variant = VariantKind::Layered;
        self.layers = Some(l);
        self.side_s = None;
        self
    }

    pub fn spread_out(mut self, range: usize) -> Self {
        self.variant = VariantKind::SpreadOut;
        self.range = Some(range);
        self
    }

    pub fn multigraph(mut self, on: bool) -> Self {
        self.multigraph = on;
        self
    }

    pub fn build(&self) -> Result<LatticeSpec> {
        LatticeSpec::from_config(self)
    }
}

/// Upper bound on vertex count; union-find parents are stored as `u32`.
const MAX_VERTICES: usize = u32::MAX as usize;
const MAX_EDGES: usize = 1 << 40;

/// Validated, immutable description of a finite box of `Z^d x Z^s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeSpec {
    d: usize,
    s: usize,
    side_d: usize,
    side_s: usize,
    boundary_d: Boundary,
    boundary_s: Boundary,
    variant: Variant,
    multigraph: bool,
    sides: Vec<usize>,
    strides: Vec<usize>,
    wraps: Vec<bool>,
    directions: Vec<Vec<i64>>,
    slots: Vec<Slot>,
    vertex_count: usize,
    edge_count: usize,
}

impl LatticeSpec {
    pub fn from_config(cfg: &LatticeConfig) -> Result<Self> {
        if cfg.d == 0 {
            return Err(Error::spec("d", "must be at least 1"));
        }
        if cfg.side_d < 2 {
            return Err(Error::spec("side_d", "must be at least 2"));
        }
        let variant = match cfg.variant {
            VariantKind::NearestNeighbor => Variant::NearestNeighbor,
            VariantKind::Layered => {
                let l = cfg
                    .layers
                    .ok_or_else(|| Error::spec("layers", "required for the layered variant"))?;
                if l == 0 {
                    return Err(Error::spec("layers", "must be at least 1"));
                }
                if cfg.s != 1 {
                    return Err(Error::spec("s", "the layered variant requires s = 1"));
                }
                if let Some(h) = cfg.side_s {
                    if h != l + 1 {
                        return Err(Error::spec(
                            "side_s",
                            format!("layered({l}) has {} layers, got side_s = {h}", l + 1),
                        ));
                    }
                }
                Variant::Layered { l }
            }
            VariantKind::SpreadOut => {
                let range = cfg
                    .range
                    .ok_or_else(|| Error::spec("range", "required for the spread_out variant"))?;
                if range == 0 {
                    return Err(Error::spec("range", "must be at least 1"));
                }
                if cfg.boundary == Boundary::Periodic && cfg.side_d <= 2 * range {
                    return Err(Error::spec(
                        "side_d",
                        "periodic spread-out boxes need side_d > 2 * range",
                    ));
                }
                Variant::SpreadOut { range }
            }
        };
        if cfg.variant != VariantKind::Layered && cfg.layers.is_some() {
            return Err(Error::spec("layers", "only valid with variant = layered"));
        }
        if cfg.variant != VariantKind::SpreadOut && cfg.range.is_some() {
            return Err(Error::spec("range", "only valid with variant = spread_out"));
        }
        let (side_s, boundary_s) = match variant {
            Variant::Layered { l } => (l + 1, Boundary::Periodic),
            _ if cfg.s == 0 => (1, cfg.boundary_s.unwrap_or(cfg.boundary)),
            _ => {
                let h = cfg
                    .side_s
                    .ok_or_else(|| Error::spec("side_s", "required when s > 0"))?;
                if h < 2 {
                    return Err(Error::spec("side_s", "must be at least 2"));
                }
                (h, cfg.boundary_s.unwrap_or(cfg.boundary))
            }
        };
        if cfg.multigraph && cfg.s != 1 {
            return Err(Error::Unsupported(format!(
                "multigraph needs s = 1, got s = {}",
                cfg.s
            )));
        }

        let d = cfg.d;
        let s = cfg.s;
        let mut sides = vec![cfg.side_d; d];
        sides.extend(std::iter::repeat_n(side_s, s));
        let mut strides = Vec::with_capacity(d + s);
        let mut vertex_count: usize = 1;
        for &side in &sides {
            strides.push(vertex_count);
            vertex_count = vertex_count
                .checked_mul(side)
                .filter(|&n| n <= MAX_VERTICES)
                .ok_or_else(|| Error::spec("side_d", "vertex index space overflows"))?;
        }
        let wraps: Vec<bool> = (0..d + s)
            .map(|axis| {
                let b = if axis < d { cfg.boundary } else { boundary_s };
                b == Boundary::Periodic && sides[axis] > 2
            })
            .collect();

        let directions = match variant {
            Variant::SpreadOut { range } => positive_half(&spread_out_vectors(d, range)),
            _ => positive_half(&unit_vectors(d)),
        };
        let m = 2 * directions.len();
        let mut slots: Vec<Slot> = directions
            .iter()
            .map(|w| Slot {
                class: EdgeClass::D,
                steps: w
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0)
                    .map(|(axis, &x)| (axis, x))
                    .collect(),
                parallel: None,
            })
            .collect();
        for j in 0..s {
            let copies: Vec<Option<usize>> = if cfg.multigraph {
                (0..m).map(Some).collect()
            } else {
                vec![None]
            };
            for parallel in copies {
                slots.push(Slot {
                    class: EdgeClass::S,
                    steps: vec![(d + j, 1)],
                    parallel,
                });
            }
        }

        let mut edge_count: usize = 0;
        for slot in &slots {
            let mut n: usize = 1;
            for (axis, &side) in sides.iter().enumerate() {
                let along = match slot.steps.iter().find(|(a, _)| *a == axis) {
                    Some(&(_, delta)) if !wraps[axis] => side.saturating_sub(delta.unsigned_abs() as usize),
                    _ => side,
                };
                n = n.saturating_mul(along);
            }
            edge_count = edge_count.saturating_add(n);
        }
        if edge_count > MAX_EDGES {
            return Err(Error::spec("side_d", "edge index space overflows"));
        }

        Ok(LatticeSpec {
            d,
            s,
            side_d: cfg.side_d,
            side_s,
            boundary_d: cfg.boundary,
            boundary_s,
            variant,
            multigraph: cfg.multigraph,
            sides,
            strides,
            wraps,
            directions,
            slots,
            vertex_count,
            edge_count,
        })
    }

    pub fn to_config(&self) -> LatticeConfig {
        let (variant, range, layers) = match self.variant {
            Variant::NearestNeighbor => (VariantKind::NearestNeighbor, None, None),
            Variant::Layered { l } => (VariantKind::Layered, None, Some(l)),
            Variant::SpreadOut { range } => (VariantKind::SpreadOut, Some(range), None),
        };
        LatticeConfig {
            d: self.d,
            s: self.s,
            side_d: self.side_d,
            side_s: (self.s > 0 && layers.is_none()).then_some(self.side_s),
            boundary: self.boundary_d,
            boundary_s: (self.s > 0 && self.boundary_s != self.boundary_d).then_some(self.boundary_s),
            variant,
            range,
            layers,
            multigraph: self.multigraph,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn s(&self) -> usize {
        self.s
    }
    pub fn side_d(&self) -> usize {
        self.side_d
    }
    pub fn side_s(&self) -> usize {
        self.side_s
    }
    pub fn boundary_d(&self) -> Boundary {
        self.boundary_d
    }
    pub fn boundary_s(&self) -> Boundary {
        self.boundary_s
    }
    pub fn variant(&self) -> Variant {
        self.variant
    }
    pub fn is_multigraph(&self) -> bool {
        self.multigraph
    }
    pub fn is_layered(&self) -> bool {
        matches!(self.variant, Variant::Layered { .. })
    }
    /// Number of axes, `d + s`.
    pub fn dim(&self) -> usize {
        self.d + self.s
    }
    pub fn sides(&self) -> &[usize] {
        &self.sides
    }
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Boundary rule of the factor that owns `axis`.
    pub fn axis_boundary(&self, axis: usize) -> Boundary {
        if axis < self.d {
            self.boundary_d
        } else {
            self.boundary_s
        }
    }

    /// Whether `axis` carries wrap-around edges. A periodic axis of side 2
    /// has none: its wrap edge would duplicate the interior one.
    pub fn wraps(&self, axis: usize) -> bool {
        self.wraps[axis]
    }

    /// Positive half of the `Z^d` step set; `Z^d` edges run from `u` to
    /// `u + w` for `w` in this list.
    pub fn directions(&self) -> &[Vec<i64>] {
        &self.directions
    }

    /// The step set `U` as `[+w_0, -w_0, +w_1, -w_1, ...]`. Its size is the
    /// number of parallel copies of a vertical edge in multigraph mode.
    pub fn unit_set(&self) -> Vec<Vec<i64>> {
        self.directions
            .iter()
            .flat_map(|w| [w.clone(), w.iter().map(|x| -x).collect()])
            .collect()
    }

    /// `|U|`.
    pub fn parallel_count(&self) -> usize {
        2 * self.directions.len()
    }

    /// Number of vertices in one `Z^d` layer.
    pub fn layer_size(&self) -> usize {
        self.strides.get(self.d).copied().unwrap_or(self.vertex_count)
    }

    /// Center of the box.
    pub fn origin(&self) -> Vertex {
        Vertex {
            u: vec![self.side_d / 2; self.d],
            t: vec![self.side_s / 2; self.s],
        }
    }

    pub fn origin_index(&self) -> usize {
        self.index_of(&self.origin()).expect("origin lies in the box")
    }

    pub fn index_of(&self, v: &Vertex) -> Option<usize> {
        if v.u.len() != self.d || v.t.len() != self.s {
            return None;
        }
        let mut idx = 0;
        for (axis, &x) in v.u.iter().chain(v.t.iter()).enumerate() {
            if x >= self.sides[axis] {
                return None;
            }
            idx += x * self.strides[axis];
        }
        Some(idx)
    }

    pub fn coords_of(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        self.sides
            .iter()
            .map(|&side| {
                let x = rest % side;
                rest /= side;
                x
            })
            .collect()
    }

    pub fn vertex_of(&self, index: usize) -> Vertex {
        let mut c = self.coords_of(index);
        let t = c.split_off(self.d);
        Vertex { u: c, t }
    }

    /// Far endpoint of `slot` from the vertex at `coords` (index `index`),
    /// stepping forward or backward, with the boundary rule applied.
    #[inline]
    pub fn step(&self, index: usize, coords: &[usize], slot: usize, forward: bool) -> Option<usize> {
        let mut idx = index as isize;
        for &(axis, delta) in &self.slots[slot].steps {
            let delta = if forward { delta } else { -delta } as isize;
            let side = self.sides[axis] as isize;
            let stride = self.strides[axis] as isize;
            let y = coords[axis] as isize + delta;
            if (0..side).contains(&y) {
                idx += delta * stride;
            } else if self.wraps[axis] {
                idx += (y.rem_euclid(side) - coords[axis] as isize) * stride;
            } else {
                return None;
            }
        }
        Some(idx as usize)
    }

    /// Visit every edge in canonical order as `(edge_index, a, b, slot)`.
    pub fn for_each_edge(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut coords = vec![0usize; self.dim()];
        let mut e = 0;
        for a in 0..self.vertex_count {
            for slot in 0..self.slots.len() {
                if let Some(b) = self.step(a, &coords, slot, true) {
                    f(e, a, b, slot);
                    e += 1;
                }
            }
            advance(&mut coords, &self.sides);
        }
        debug_assert_eq!(e, self.edge_count);
    }

    fn edge_from(&self, a: usize, b: usize, slot: usize) -> Edge {
        let s = &self.slots[slot];
        Edge {
            a: self.vertex_of(a),
            b: self.vertex_of(b),
            class: s.class,
            parallel: s.parallel,
        }
    }

    /// Every edge of the box exactly once, in canonical order.
    pub fn enumerate_edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.edge_count);
        self.for_each_edge(|_, a, b, slot| out.push(self.edge_from(a, b, slot)));
        out
    }

    /// Incident edges of `v` with their far endpoints.
    pub fn neighbors(&self, v: &Vertex) -> Vec<(Edge, Vertex)> {
        let Some(index) = self.index_of(v) else {
            return Vec::new();
        };
        let coords = self.coords_of(index);
        let mut out = Vec::new();
        for slot in 0..self.slots.len() {
            if let Some(b) = self.step(index, &coords, slot, true) {
                out.push((self.edge_from(index, b, slot), self.vertex_of(b)));
            }
            if let Some(a) = self.step(index, &coords, slot, false) {
                out.push((self.edge_from(a, index, slot), self.vertex_of(a)));
            }
        }
        out
    }

    /// Number of `D` edges, counted by walking the edge list.
    pub fn d_edge_count(&self) -> usize {
        let n: usize = self.slots.iter().filter(|s| s.class == EdgeClass::D).count();
        let mut count = 0;
        self.for_each_edge(|_, _, _, slot| {
            if slot < n {
                count += 1;
            }
        });
        count
    }
}

/// Odometer increment, first axis fastest.
#[inline]
pub(crate) fn advance(coords: &mut [usize], sides: &[usize]) {
    for (x, &side) in coords.iter_mut().zip(sides) {
        *x += 1;
        if *x < side {
            return;
        }
        *x = 0;
    }
}

/// `{+e_1, -e_1, ..., +e_d, -e_d}`.
pub fn unit_vectors(d: usize) -> Vec<Vec<i64>> {
    (0..d)
        .flat_map(|i| {
            let mut plus = vec![0; d];
            plus[i] = 1;
            let mut minus = vec![0; d];
            minus[i] = -1;
            [plus, minus]
        })
        .collect()
}

/// All nonzero vectors of `Z^d` with sup-norm at most `range`, in
/// lexicographic order.
pub fn spread_out_vectors(d: usize, range: usize) -> Vec<Vec<i64>> {
    let k = range as i64;
    let mut out = Vec::new();
    let mut cur = vec![-k; d];
    loop {
        if cur.iter().any(|&x| x != 0) {
            out.push(cur.clone());
        }
        let mut i = d;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < k {
                cur[i] += 1;
                break;
            }
            cur[i] = -k;
        }
    }
}

/// Vectors whose first nonzero coordinate is positive, preserving order.
fn positive_half(vectors: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out: Vec<Vec<i64>> = vectors
        .iter()
        .filter(|w| w.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0))
        .cloned()
        .collect();
    // Axis-major order keeps e_1, e_2, ... first for nearest neighbors.
    out.sort_by(|a, b| {
        let key = |w: &Vec<i64>| {
            let lead = w.iter().position(|&x| x != 0).unwrap_or(0);
            (lead, w.iter().map(|x| x.abs()).sum::<i64>())
        };
        key(a).cmp(&key(b)).then_with(|| a.cmp(b))
    });
    out
}

/// Replace every vertical edge by `|U|` parallel copies.
pub fn build_multigraph(spec: &LatticeSpec) -> Result<LatticeSpec> {
    if spec.s != 1 {
        return Err(Error::Unsupported(format!(
            "multigraph needs s = 1, got s = {}",
            spec.s
        )));
    }
    spec.to_config().multigraph(true).build()
}

/// Merge parallel copies back into single vertical edges.
pub fn collapse_multigraph(spec: &LatticeSpec) -> LatticeSpec {
    let mut cfg = spec.to_config();
    cfg.multigraph = false;
    cfg.build().expect("collapsing a valid spec stays valid")
}

/// Fixed total order on the `Z^d` edges of one layer: lexicographic on
/// `(u, direction)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeOrdering {
    directions: usize,
    ranks: Vec<Option<u32>>,
    keys: Vec<(usize, usize)>,
}

impl EdgeOrdering {
    pub fn new(spec: &LatticeSpec) -> Self {
        let directions = spec.directions.len();
        let layer = spec.layer_size();
        let mut ranks = vec![None; layer * directions];
        let mut keys = Vec::new();
        let mut coords = vec![0usize; spec.dim()];
        for u in 0..layer {
            for dir in 0..directions {
                if spec.step(u, &coords, dir, true).is_some() {
                    ranks[u * directions + dir] = Some(keys.len() as u32);
                    keys.push((u, dir));
                }
            }
            advance(&mut coords, &spec.sides);
        }
        EdgeOrdering {
            directions,
            ranks,
            keys,
        }
    }

    /// Rank of the edge from layer vertex `u` along direction `dir`.
    pub fn rank(&self, u: usize, dir: usize) -> Option<usize> {
        self.ranks
            .get(u * self.directions + dir)
            .copied()
            .flatten()
            .map(|r| r as usize)
    }

    pub fn key(&self, rank: usize) -> (usize, usize) {
        self.keys[rank]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
