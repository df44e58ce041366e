//! The universal τ-HST over a finite metric, truncated at a finite depth.
//!
//! A vertex is a decorated chain `(X,0), (S_1,e_1), ..., (S_j,e_j)` of nested point sets with
//! `diam(S_i) <= τ^{-i}` and decorations in `{0,1}`. Vertices live in an arena keyed by
//! `(parent, bottom set, decoration)`, so a chain is determined by its last entry and parent.
//! Leaves are the depth-`J` vertices; their bottoms are singletons because `τ^{-J}` is below
//! the smallest positive distance.

use crate::error::{Error, Result};
use crate::metric::{FiniteMetric, PointMeasure, PointSet};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

/// Arena index of a chain vertex.
pub type NodeId = u32;
/// Arena index of an interned point set.
pub type SetId = u32;

/// Tolerance used when checking `diam(S_j) <= τ^{-j}` on sampled-radius cells.
pub const DIAM_TOL: f64 = 1e-12;

/// Smallest `J >= 1` with `τ^{-J}` below the smallest positive distance.
pub fn truncation_depth(m: &FiniteMetric, tau: f64) -> usize {
    let dmin = m.min_positive_distance();
    let mut j = 1;
    while tau.powi(-(j as i32)) >= dmin {
        j += 1;
    }
    j
}

/// One vertex of the universal HST.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChainNode {
    pub level: u16,
    pub set: SetId,
    pub decoration: u8,
    pub parent: Option<NodeId>,
}

/// Arena holding the vertices of one truncated universal HST.
#[derive(Debug, Clone)]
pub struct Hst {
    metric: Arc<FiniteMetric>,
    tau: f64,
    depth: usize,
    scale: Vec<f64>,
    sets: Vec<PointSet>,
    set_diam: Vec<f64>,
    set_ids: HashMap<PointSet, SetId>,
    nodes: Vec<ChainNode>,
    node_ids: HashMap<(NodeId, SetId, u8), NodeId>,
    children: Vec<Vec<NodeId>>,
}

impl Hst {
    /// Creates the arena with only the root `(X, 0)`.
    pub fn new(metric: Arc<FiniteMetric>, tau: f64) -> Result<Self> {
        if tau < 2.0 {
            return Err(Error::InvalidConfig(format!("tau must be at least 2, got {tau}")));
        }
        let depth = truncation_depth(&metric, tau);
        let scale = (0..=depth).map(|j| tau.powi(-(j as i32))).collect();
        let n = metric.n();
        let mut hst = Hst {
            metric,
            tau,
            depth,
            scale,
            sets: Vec::new(),
            set_diam: Vec::new(),
            set_ids: HashMap::new(),
            nodes: Vec::new(),
            node_ids: HashMap::new(),
            children: Vec::new(),
        };
        let mut all = PointSet::with_capacity(n);
        all.insert_range(..);
        let root_set = hst.intern_set(all);
        hst.nodes.push(ChainNode { level: 0, set: root_set, decoration: 0, parent: None });
        hst.children.push(Vec::new());
        Ok(hst)
    }

    pub fn metric(&self) -> &FiniteMetric {
        &self.metric
    }

    pub fn metric_arc(&self) -> &Arc<FiniteMetric> {
        &self.metric
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Truncation depth `J`; leaves live at this level.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `τ^{-j}` for `0 <= j <= J`.
    #[inline]
    pub fn scale(&self, j: usize) -> f64 {
        self.scale[j]
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Interns a point set and caches its diameter.
    pub fn intern_set(&mut self, set: PointSet) -> SetId {
        if let Some(&id) = self.set_ids.get(&set) {
            return id;
        }
        let id = self.sets.len() as SetId;
        self.set_diam.push(self.metric.set_diameter(&set));
        self.sets.push(set.clone());
        self.set_ids.insert(set, id);
        id
    }

    pub fn set(&self, id: SetId) -> &PointSet {
        &self.sets[id as usize]
    }

    pub fn node(&self, v: NodeId) -> &ChainNode {
        &self.nodes[v as usize]
    }

    pub fn level(&self, v: NodeId) -> usize {
        self.nodes[v as usize].level as usize
    }

    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        self.nodes[v as usize].parent
    }

    pub fn decoration(&self, v: NodeId) -> u8 {
        self.nodes[v as usize].decoration
    }

    /// Bottom point set of a vertex.
    pub fn bottom(&self, v: NodeId) -> &PointSet {
        &self.sets[self.nodes[v as usize].set as usize]
    }

    /// Children created so far in the arena.
    pub fn children(&self, v: NodeId) -> &[NodeId] {
        &self.children[v as usize]
    }

    pub fn contains(&self, v: NodeId) -> bool {
        (v as usize) < self.nodes.len()
    }

    /// Interns the child `(set, decoration)` of `parent`, validating the chain conditions.
    pub fn child(&mut self, parent: NodeId, set: SetId, decoration: u8) -> Result<NodeId> {
        if let Some(&id) = self.node_ids.get(&(parent, set, decoration)) {
            return Ok(id);
        }
        let p = self.nodes[parent as usize];
        let level = p.level as usize + 1;
        if level > self.depth {
            return Err(Error::InvalidSemipartition(format!("level {level} exceeds truncation depth {}", self.depth)));
        }
        if decoration > 1 {
            return Err(Error::InvalidSemipartition(format!("decoration {decoration} is not in {{0,1}}")));
        }
        let s = &self.sets[set as usize];
        if s.count_ones(..) == 0 || !s.is_subset(&self.sets[p.set as usize]) {
            return Err(Error::InvalidSemipartition(format!("bottom at level {level} is empty or not nested")));
        }
        if self.set_diam[set as usize] > self.scale[level] + DIAM_TOL {
            return Err(Error::InvalidSemipartition(format!(
                "bottom at level {level} has diameter {} > {}",
                self.set_diam[set as usize], self.scale[level]
            )));
        }
        let id = self.nodes.len() as NodeId;
        self.nodes.push(ChainNode { level: level as u16, set, decoration, parent: Some(parent) });
        self.children.push(Vec::new());
        self.children[parent as usize].push(id);
        self.node_ids.insert((parent, set, decoration), id);
        Ok(id)
    }

    /// Interns a full chain below the root given its entries for levels `1..=len`.
    pub fn chain(&mut self, entries: &[(PointSet, u8)]) -> Result<NodeId> {
        let mut v = self.root();
        for (set, dec) in entries {
            let sid = self.intern_set(set.clone());
            v = self.child(v, sid, *dec)?;
        }
        Ok(v)
    }

    /// Ancestor of `v` at `level` (`v` itself when the levels agree).
    pub fn ancestor(&self, mut v: NodeId, level: usize) -> NodeId {
        while self.level(v) > level {
            v = self.nodes[v as usize].parent.expect("non-root node has a parent");
        }
        v
    }

    /// Vertices on the path from the root to `v`, root first.
    pub fn path(&self, v: NodeId) -> Vec<NodeId> {
        let mut out = vec![v];
        let mut cur = v;
        while let Some(p) = self.parent(cur) {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Lowest common ancestor.
    pub fn lca(&self, a: NodeId, b: NodeId) -> NodeId {
        let la = self.level(a);
        let lb = self.level(b);
        let mut a = self.ancestor(a, lb.min(la));
        let mut b = self.ancestor(b, la.min(lb));
        while a != b {
            a = self.parent(a).expect("distinct roots are impossible");
            b = self.parent(b).expect("distinct roots are impossible");
        }
        a
    }

    /// Ultrametric distance `τ^{-level(lca)}` between distinct vertices, 0 on the diagonal.
    pub fn dist(&self, a: NodeId, b: NodeId) -> f64 {
        if a == b {
            0.0
        } else {
            self.scale[self.level(self.lca(a, b))]
        }
    }

    pub fn is_leaf(&self, v: NodeId) -> bool {
        self.level(v) == self.depth
    }

    /// The point of a leaf (its singleton bottom).
    pub fn beta(&self, leaf: NodeId) -> usize {
        debug_assert!(self.is_leaf(leaf));
        self.bottom(leaf).minimum().expect("bottoms are nonempty")
    }

    /// True when every entry of the chain ending at `v` has decoration 0.
    pub fn is_zero_decorated(&self, v: NodeId) -> bool {
        let mut cur = Some(v);
        while let Some(c) = cur {
            if self.decoration(c) != 0 {
                return false;
            }
            cur = self.parent(c);
        }
        true
    }

    /// True when `anc` lies on the root path of `v`.
    pub fn is_ancestor(&self, anc: NodeId, v: NodeId) -> bool {
        self.level(anc) <= self.level(v) && self.ancestor(v, self.level(anc)) == anc
    }

    /// Pushes a leaf measure forward along `β`.
    pub fn beta_pushforward(&self, mu: &TreeMeasure) -> PointMeasure {
        let mut out = PointMeasure::zeros(self.metric.n());
        for (&leaf, &m) in mu.iter() {
            out.add(self.beta(leaf), m);
        }
        out
    }

    /// Checks the sibling and containment conditions of a canonical injection `xi ↪ target`.
    pub fn canonical_injection(&self, xi: NodeId, target: NodeId) -> Result<Injection> {
        if !self.contains(xi) || !self.contains(target) {
            return Err(Error::InvalidInjection("unknown vertex".into()));
        }
        if xi == self.root() || self.parent(xi) != self.parent(target) {
            return Err(Error::InvalidInjection(format!("{xi} and {target} are not siblings")));
        }
        if !self.bottom(xi).is_subset(self.bottom(target)) {
            return Err(Error::InvalidInjection(format!("bottom of {xi} is not contained in bottom of {target}")));
        }
        Ok(Injection { level: self.level(xi) as u16, source: xi, target })
    }

    /// Image of one vertex under one canonical injection.
    pub fn inject(&mut self, inj: &Injection, v: NodeId) -> NodeId {
        let lvl = inj.level as usize;
        if self.level(v) < lvl || inj.source == inj.target {
            return v;
        }
        let path = self.path(v);
        if path[lvl] != inj.source {
            return v;
        }
        let mut cur = inj.target;
        for &old in &path[lvl + 1..] {
            let n = self.nodes[old as usize];
            cur = self
                .child(cur, n.set, n.decoration)
                .expect("a grafted chain keeps nested bottoms and diameters");
        }
        cur
    }

    /// Image of one vertex under a fusion map.
    pub fn apply_to_node(&mut self, f: &FusionMap, mut v: NodeId) -> NodeId {
        for inj in &f.injections {
            v = self.inject(inj, v);
        }
        v
    }

    /// Pushforward `f#μ` of a measure on vertices.
    pub fn apply_fusion(&mut self, f: &FusionMap, mu: &TreeMeasure) -> TreeMeasure {
        if f.is_identity() {
            return mu.clone();
        }
        let mut memo: HashMap<NodeId, NodeId> = HashMap::new();
        let mut out = TreeMeasure::new();
        for (&v, &m) in mu.iter() {
            let img = match memo.get(&v) {
                Some(&w) => w,
                None => {
                    let w = self.apply_to_node(f, v);
                    memo.insert(v, w);
                    w
                }
            };
            out.add(img, m);
        }
        out
    }

    /// Decomposes one injection into per-level relabelings of the vertices on the chains of
    /// `leaves` that pass through the source. Step `i` maps the level `source.level + i`
    /// vertices to their images; composing all steps reproduces [`Hst::inject`].
    pub fn primitive_fusion_steps(&mut self, inj: &Injection, leaves: &[NodeId]) -> Vec<PrimitiveStep> {
        let lvl = inj.level as usize;
        let mut per_level: BTreeMap<usize, BTreeSet<(NodeId, NodeId)>> = BTreeMap::new();
        for &leaf in leaves {
            if self.level(leaf) < lvl || self.ancestor(leaf, lvl) != inj.source {
                continue;
            }
            let path = self.path(leaf);
            let mut cur = inj.target;
            per_level.entry(lvl).or_default().insert((inj.source, inj.target));
            for &old in &path[lvl + 1..] {
                let n = self.nodes[old as usize];
                cur = self.child(cur, n.set, n.decoration).expect("grafted chains stay valid");
                per_level.entry(n.level as usize).or_default().insert((old, cur));
            }
        }
        per_level
            .into_iter()
            .map(|(level, pairs)| PrimitiveStep { level, pairs: pairs.into_iter().collect() })
            .collect()
    }

    /// Debug dump of every vertex.
    pub fn dump_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            id: NodeId,
            level: u16,
            parent: Option<NodeId>,
            bottom: Vec<usize>,
            decoration: u8,
        }
        let rows: Vec<Row> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Row {
                id: i as NodeId,
                level: n.level,
                parent: n.parent,
                bottom: self.sets[n.set as usize].ones().collect(),
                decoration: n.decoration,
            })
            .collect();
        Ok(serde_json::to_string(&rows)?)
    }
}

/// A canonical injection of a vertex into a sibling whose bottom contains it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Injection {
    pub level: u16,
    pub source: NodeId,
    pub target: NodeId,
}

/// A finite composition of canonical injections, applied in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FusionMap {
    pub injections: Vec<Injection>,
}

impl FusionMap {
    pub fn identity() -> Self {
        FusionMap::default()
    }

    pub fn is_identity(&self) -> bool {
        self.injections.iter().all(|i| i.source == i.target)
    }

    pub fn push(&mut self, inj: Injection) {
        self.injections.push(inj);
    }

    pub fn len(&self) -> usize {
        self.injections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty()
    }
}

/// One level of a decomposed injection: (old vertex, image) pairs at `level`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimitiveStep {
    pub level: usize,
    pub pairs: Vec<(NodeId, NodeId)>,
}

/// A finitely supported nonnegative measure on HST vertices, ordered by vertex id.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TreeMeasure {
    mass: BTreeMap<NodeId, f64>,
}

/// Measures supported on leaves use the same representation.
pub type LeafMeasure = TreeMeasure;

impl TreeMeasure {
    pub fn new() -> Self {
        TreeMeasure::default()
    }

    pub fn dirac(v: NodeId, m: f64) -> Self {
        let mut t = TreeMeasure::new();
        t.add(v, m);
        t
    }

    /// Sums the given masses per vertex.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (NodeId, f64)>) -> Self {
        let mut t = TreeMeasure::new();
        for (v, m) in pairs {
            t.add(v, m);
        }
        t
    }

    /// Adds mass at `v`; entries that reach exactly zero are dropped.
    pub fn add(&mut self, v: NodeId, m: f64) {
        let e = self.mass.entry(v).or_insert(0.0);
        *e += m;
        if *e == 0.0 {
            self.mass.remove(&v);
        }
    }

    pub fn set(&mut self, v: NodeId, m: f64) {
        if m == 0.0 {
            self.mass.remove(&v);
        } else {
            self.mass.insert(v, m);
        }
    }

    pub fn get(&self, v: NodeId) -> f64 {
        self.mass.get(&v).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &f64)> {
        self.mass.iter()
    }

    pub fn support(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.mass.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Mass of every vertex's subtree, for all ancestors of the support.
    pub fn subtree_masses(&self, hst: &Hst) -> BTreeMap<NodeId, f64> {
        let mut out: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (&v, &m) in &self.mass {
            let mut cur = Some(v);
            while let Some(c) = cur {
                *out.entry(c).or_insert(0.0) += m;
                cur = hst.parent(c);
            }
        }
        out
    }
}
