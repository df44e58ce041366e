//! Semi-partitions of a finite metric: ball carving, truncated exponential radii, fusion of
//! cells along a net, and refinement of per-level semi-partitions into HST leaf chains.

use crate::error::{Error, Result};
use crate::hst::{Hst, NodeId, DIAM_TOL};
use crate::metric::{FiniteMetric, PointSet};
use rand::Rng;
use std::collections::HashMap;

/// A family of pairwise disjoint, nonempty point sets that need not cover the space.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiPartition {
    n: usize,
    cells: Vec<PointSet>,
    owner: Vec<Option<u32>>,
}

impl SemiPartition {
    /// The empty semi-partition of an `n`-point space.
    pub fn empty(n: usize) -> Self {
        SemiPartition { n, cells: Vec::new(), owner: vec![None; n] }
    }

    /// The single-cell partition `{X}`.
    pub fn whole(n: usize) -> Self {
        let mut all = PointSet::with_capacity(n);
        all.insert_range(..);
        SemiPartition { n, cells: vec![all], owner: vec![Some(0); n] }
    }

    /// Builds a semi-partition from explicit cells, dropping empty ones.
    pub fn from_cells(n: usize, cells: impl IntoIterator<Item = PointSet>) -> Result<Self> {
        let mut sp = SemiPartition::empty(n);
        for c in cells {
            sp.push(c)?;
        }
        Ok(sp)
    }

    fn push(&mut self, mut cell: PointSet) -> Result<()> {
        cell.grow(self.n);
        if cell.len() > self.n {
            return Err(Error::InvalidSemipartition("cell mentions a point outside the metric".into()));
        }
        if cell.count_ones(..) == 0 {
            return Ok(());
        }
        let id = self.cells.len() as u32;
        for x in cell.ones() {
            if self.owner[x].is_some() {
                return Err(Error::InvalidSemipartition(format!("point {x} lies in two cells")));
            }
            self.owner[x] = Some(id);
        }
        self.cells.push(cell);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[PointSet] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Index of the cell containing `x`, if any.
    pub fn cell_of(&self, x: usize) -> Option<usize> {
        self.owner[x].map(|c| c as usize)
    }

    /// The cell containing `x`, if any.
    pub fn cell_containing(&self, x: usize) -> Option<&PointSet> {
        self.cell_of(x).map(|c| &self.cells[c])
    }

    pub fn is_covered(&self, x: usize) -> bool {
        self.owner[x].is_some()
    }

    /// The union of all cells.
    pub fn covered(&self) -> PointSet {
        let mut out = PointSet::with_capacity(self.n);
        for c in &self.cells {
            out.union_with(c);
        }
        out
    }

    /// Number of cells separating `x` from `y`: `Σ_S |1_S(x) - 1_S(y)|`.
    pub fn separation(&self, x: usize, y: usize) -> u8 {
        match (self.owner[x], self.owner[y]) {
            (None, None) => 0,
            (Some(a), Some(b)) if a == b => 0,
            (Some(_), Some(_)) => 2,
            _ => 1,
        }
    }

    pub fn max_diameter(&self, m: &FiniteMetric) -> f64 {
        self.cells.iter().map(|c| m.set_diameter(c)).fold(0.0, f64::max)
    }

    /// True when every cell has diameter at most `bound` (up to [`DIAM_TOL`]).
    pub fn is_bounded(&self, m: &FiniteMetric, bound: f64) -> bool {
        self.max_diameter(m) <= bound + DIAM_TOL
    }
}

/// Ordered centers with their carving radii; the vector order is the carving order.
#[derive(Debug, Clone, PartialEq)]
pub struct CarveSpec {
    pub centers: Vec<usize>,
    pub radii: Vec<f64>,
}

/// Carves balls in order: cell `i` is `B(c_i, R_i)` minus all earlier balls.
pub fn carve(spec: &CarveSpec, m: &FiniteMetric) -> Result<SemiPartition> {
    if spec.centers.len() != spec.radii.len() {
        return Err(Error::InvalidSemipartition("centers and radii differ in length".into()));
    }
    let n = m.n();
    let mut taken = PointSet::with_capacity(n);
    let mut sp = SemiPartition::empty(n);
    for (&c, &r) in spec.centers.iter().zip(&spec.radii) {
        if c >= n {
            return Err(Error::UnknownPoint(c));
        }
        if !(r >= 0.0) {
            return Err(Error::InvalidSemipartition(format!("negative radius {r}")));
        }
        let mut cell = m.ball(c, r);
        cell.difference_with(&taken);
        taken.union_with(&cell);
        sp.push(cell)?;
    }
    Ok(sp)
}

/// Draws from the exponential law with rate `τ^j ln K` truncated to `[0, τ^{-j}]`.
pub fn sample_trunc_exp<R: Rng + ?Sized>(tau: f64, j: i32, k_param: f64, rng: &mut R) -> f64 {
    assert!(k_param >= 2.0, "truncated exponential needs K >= 2");
    let cap = tau.powi(-j);
    let rate = tau.powi(j) * k_param.ln();
    let u: f64 = rng.gen();
    let r = -(1.0 - u * (k_param - 1.0) / k_param).ln() / rate;
    r.clamp(0.0, cap)
}

/// Density of the truncated exponential law on `[0, τ^{-j}]`.
pub fn trunc_exp_density(tau: f64, j: i32, k_param: f64, r: f64) -> f64 {
    if r < 0.0 || r > tau.powi(-j) {
        return 0.0;
    }
    let rate = tau.powi(j) * k_param.ln();
    k_param / (k_param - 1.0) * rate * (-r * rate).exp()
}

/// Result of fusing a semi-partition along a net.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    /// Fused cluster `U_x` for each net point `x`, in the given order.
    pub clusters: Vec<(usize, PointSet)>,
    /// Fused clusters followed by the untouched cells.
    pub q: SemiPartition,
}

/// Fuses `p` along `lambda` at radius `r`: `U_x = B(x,r)` together with every cell meeting it.
pub fn fuse_semipartition(m: &FiniteMetric, p: &SemiPartition, lambda: &[usize], r: f64) -> Result<Fused> {
    let n = m.n();
    let mut clusters = Vec::with_capacity(lambda.len());
    let mut fused_cells = vec![false; p.len()];
    let mut union = PointSet::with_capacity(n);
    for &x in lambda {
        if x >= n {
            return Err(Error::UnknownPoint(x));
        }
        let ball = m.ball(x, r);
        let mut u = ball.clone();
        for y in ball.ones() {
            if let Some(c) = p.cell_of(y) {
                u.union_with(&p.cells[c]);
                fused_cells[c] = true;
            }
        }
        if !union.is_disjoint(&u) {
            return Err(Error::FusionOverlap(format!("cluster around {x} meets an earlier cluster")));
        }
        union.union_with(&u);
        clusters.push((x, u));
    }
    let mut q = SemiPartition::empty(n);
    for (_, u) in &clusters {
        q.push(u.clone())?;
    }
    for (c, cell) in p.cells.iter().enumerate() {
        if !fused_cells[c] {
            q.push(cell.clone())?;
        }
    }
    Ok(Fused { clusters, q })
}

/// Leaf chains of every point under a family of per-level semi-partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub leaves: Vec<NodeId>,
    pub ranks: Vec<usize>,
}

impl Embedding {
    pub fn leaf(&self, x: usize) -> NodeId {
        self.leaves[x]
    }

    pub fn rank(&self, x: usize) -> usize {
        self.ranks[x]
    }
}

/// Largest `j` such that `x` is covered by every semi-partition at levels `1..=j`.
pub fn rank(qs: &[SemiPartition], x: usize) -> usize {
    qs.iter().take_while(|q| q.is_covered(x)).count()
}

/// Completes `qs[j-1]` (levels `1..=J`) with singletons, refines successively and interns
/// the resulting decorated chains. Decorations are 0 up to the rank of a point, 1 after.
pub fn refine_and_embed(hst: &mut Hst, qs: &[SemiPartition]) -> Result<Embedding> {
    let depth = hst.depth();
    let m = hst.metric_arc().clone();
    let n = m.n();
    if qs.len() != depth {
        return Err(Error::InvalidSemipartition(format!("expected {depth} levels, got {}", qs.len())));
    }
    for (i, q) in qs.iter().enumerate() {
        let j = i + 1;
        if q.n() != n {
            return Err(Error::InvalidSemipartition(format!("level {j} has the wrong point count")));
        }
        if !q.is_bounded(&m, hst.scale(j)) {
            return Err(Error::InvalidSemipartition(format!(
                "level {j} has a cell of diameter {} > {}",
                q.max_diameter(&m),
                hst.scale(j)
            )));
        }
    }
    let ranks: Vec<usize> = (0..n).map(|x| rank(qs, x)).collect();
    // Points sharing a refined cell share the node at that level.
    let mut node: Vec<NodeId> = vec![hst.root(); n];
    for (i, q) in qs.iter().enumerate() {
        let j = i + 1;
        let mut groups: HashMap<(NodeId, Option<u32>), Vec<usize>> = HashMap::new();
        let mut order: Vec<(NodeId, Option<u32>)> = Vec::new();
        for x in 0..n {
            let key = (node[x], q.owner[x]);
            if key.1.is_none() {
                let set = crate::metric::point_set(n, [x]);
                let sid = hst.intern_set(set);
                let dec = u8::from(j > ranks[x]);
                node[x] = hst.child(node[x], sid, dec)?;
                continue;
            }
            let e = groups.entry(key).or_default();
            if e.is_empty() {
                order.push(key);
            }
            e.push(x);
        }
        for key in order {
            let members = &groups[&key];
            let set = crate::metric::point_set(n, members.iter().copied());
            let sid = hst.intern_set(set);
            let parent = key.0;
            for &x in members {
                let dec = u8::from(j > ranks[x]);
                node[x] = hst.child(parent, sid, dec)?;
            }
        }
    }
    Ok(Embedding { leaves: node, ranks })
}
