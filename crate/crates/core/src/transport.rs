//! Wasserstein-1 distances: an exact min-cost-flow oracle on finite metrics and a
//! linear-time closed form on the truncated universal HST.

use crate::error::{Error, Result};
use crate::hst::{FusionMap, Hst, LeafMeasure, NodeId, TreeMeasure};
use crate::metric::{FiniteMetric, PointMeasure};
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

/// Tolerance on total-mass mismatch.
pub const MASS_TOL: f64 = 1e-9;
const CAP_EPS: f64 = 1e-12;

/// Min-cost flow by successive shortest augmenting paths with Johnson potentials.
#[derive(Debug, Clone)]
pub struct MinCostFlow {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
    cost: Vec<f64>,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl MinCostFlow {
    pub fn new(nodes: usize) -> Self {
        MinCostFlow { adj: vec![Vec::new(); nodes], to: Vec::new(), cap: Vec::new(), cost: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds an arc and its residual twin; returns the arc id.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, cost: f64) -> usize {
        let id = self.to.len();
        self.to.extend([v, u]);
        self.cap.extend([cap, 0.0]);
        self.cost.extend([cost, -cost]);
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
        id
    }

    /// Flow currently on arc `id`.
    pub fn flow_on(&self, id: usize) -> f64 {
        self.cap[id ^ 1]
    }

    /// Sends up to `limit` units from `s` to `t`. When `dag_order` is set, all arcs go from a
    /// lower to a higher node index, which lets negative arc costs be handled exactly.
    pub fn run(&mut self, s: usize, t: usize, limit: f64, dag_order: bool) -> (f64, f64) {
        let n = self.adj.len();
        let mut pot = vec![0.0; n];
        if dag_order {
            let mut d = vec![f64::INFINITY; n];
            d[s] = 0.0;
            for u in 0..n {
                if !d[u].is_finite() {
                    continue;
                }
                for &e in &self.adj[u] {
                    if self.cap[e] > CAP_EPS {
                        let v = self.to[e];
                        debug_assert!(v > u, "arcs must respect the node order");
                        let nd = d[u] + self.cost[e];
                        if nd < d[v] {
                            d[v] = nd;
                        }
                    }
                }
            }
            for (p, v) in pot.iter_mut().zip(&d) {
                *p = if v.is_finite() { *v } else { 0.0 };
            }
        }
        let mut flow = 0.0;
        let mut total_cost = 0.0;
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        while flow < limit - CAP_EPS {
            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            prev.iter_mut().for_each(|p| *p = usize::MAX);
            dist[s] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(HeapItem(0.0, s));
            while let Some(HeapItem(d, u)) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for &e in &self.adj[u] {
                    if self.cap[e] <= CAP_EPS {
                        continue;
                    }
                    let v = self.to[e];
                    let rc = (self.cost[e] + pot[u] - pot[v]).max(0.0);
                    let nd = d + rc;
                    if nd < dist[v] {
                        dist[v] = nd;
                        prev[v] = e;
                        heap.push(HeapItem(nd, v));
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            for v in 0..n {
                if dist[v].is_finite() {
                    pot[v] += dist[v];
                }
            }
            let mut push = limit - flow;
            let mut v = t;
            while v != s {
                let e = prev[v];
                push = push.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            let mut v = t;
            while v != s {
                let e = prev[v];
                self.cap[e] -= push;
                self.cap[e ^ 1] += push;
                total_cost += push * self.cost[e];
                v = self.to[e ^ 1];
            }
            flow += push;
        }
        (flow, total_cost)
    }
}

/// An optimal coupling between two point measures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    pub moves: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

fn check_totals(a: f64, b: f64) -> Result<()> {
    if (a - b).abs() > MASS_TOL {
        return Err(Error::UnbalancedMeasures { left: a, right: b });
    }
    Ok(())
}

/// Exact W1 between dense mass vectors under an arbitrary distance function.
pub fn w1_with<D: Fn(usize, usize) -> f64>(d: D, mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    let (ta, tb): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
    check_totals(ta, tb)?;
    let src: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let dst: Vec<usize> = (0..nu.len()).filter(|&i| nu[i] > 0.0).collect();
    let (s, t) = (0, 1 + src.len() + dst.len());
    let mut g = MinCostFlow::new(t + 1);
    for (i, &x) in src.iter().enumerate() {
        g.add_edge(s, 1 + i, mu[x], 0.0);
    }
    for (j, &y) in dst.iter().enumerate() {
        g.add_edge(1 + src.len() + j, t, nu[y], 0.0);
    }
    let mut arcs = Vec::with_capacity(src.len() * dst.len());
    for (i, &x) in src.iter().enumerate() {
        for (j, &y) in dst.iter().enumerate() {
            let id = g.add_edge(1 + i, 1 + src.len() + j, f64::INFINITY, d(x, y));
            arcs.push((id, x, y));
        }
    }
    let (_, cost) = g.run(s, t, ta.min(tb), false);
    let moves = arcs
        .into_iter()
        .filter_map(|(id, x, y)| {
            let f = g.flow_on(id);
            (f > CAP_EPS).then_some((x, y, f))
        })
        .collect();
    Ok(TransportPlan { moves, cost })
}

/// Exact W1 on a finite metric via min-cost flow on the bipartite support graph.
pub fn w1_exact(m: &FiniteMetric, mu: &PointMeasure, nu: &PointMeasure) -> Result<(f64, TransportPlan)> {
    let plan = w1_with(|x, y| m.d(x, y), mu.masses(), nu.masses())?;
    Ok((plan.cost, plan))
}

/// Weight of the edge entering a depth-`j` vertex in the tree realization of the ultrametric.
pub fn edge_weight(hst: &Hst, j: usize) -> f64 {
    let jm = hst.depth();
    if j == jm {
        hst.scale(jm - 1) / 2.0
    } else {
        (hst.scale(j - 1) - hst.scale(j)) / 2.0
    }
}

fn signed_subtree_imbalance(hst: &Hst, mu: &TreeMeasure, nu: &TreeMeasure) -> Result<(BTreeMap<NodeId, f64>, BTreeMap<NodeId, f64>)> {
    let mut own: BTreeMap<NodeId, f64> = BTreeMap::new();
    for (&v, &m) in mu.iter() {
        *own.entry(v).or_insert(0.0) += m;
    }
    for (&v, &m) in nu.iter() {
        *own.entry(v).or_insert(0.0) -= m;
    }
    let mut sub: BTreeMap<NodeId, f64> = BTreeMap::new();
    for (&v, &m) in &own {
        if !hst.contains(v) || hst.level(v) > hst.depth() {
            return Err(Error::IncompatibleSupport(format!("vertex {v} is not in this tree")));
        }
        let mut cur = Some(v);
        while let Some(c) = cur {
            *sub.entry(c).or_insert(0.0) += m;
            cur = hst.parent(c);
        }
    }
    Ok((own, sub))
}

/// W1 under `dist_T` between two measures on vertices of the same truncated tree.
///
/// Leaves sit at the bottom of the tree realization. An internal vertex of depth `j` is a
/// pendant point at distance `τ^{-j}/2` from its branch point, which reproduces
/// `dist_T = τ^{-level(lca)}` between any two distinct vertices.
pub fn w1_hst(hst: &Hst, mu: &TreeMeasure, nu: &TreeMeasure) -> Result<f64> {
    check_totals(mu.total(), nu.total())?;
    let (own, sub) = signed_subtree_imbalance(hst, mu, nu)?;
    let mut w = 0.0;
    for (&v, &s) in &sub {
        let j = hst.level(v);
        if j > 0 {
            w += edge_weight(hst, j) * s.abs();
        }
    }
    for (&v, &m) in &own {
        let j = hst.level(v);
        if j < hst.depth() {
            w += hst.scale(j) / 2.0 * m.abs();
        }
    }
    Ok(w)
}

/// Level-weighted subtree imbalance `Σ_ξ τ^{-level(ξ)} |μ(V(ξ)) - ν(V(ξ))|`, root excluded.
pub fn tree_norm(hst: &Hst, mu: &TreeMeasure, nu: &TreeMeasure) -> Result<f64> {
    let (_, sub) = signed_subtree_imbalance(hst, mu, nu)?;
    Ok(sub.iter().filter(|(&v, _)| hst.level(v) > 0).map(|(&v, s)| hst.scale(hst.level(v)) * s.abs()).sum())
}

/// Cost of moving from `μ` to `μ'` when the fusion `f` is applied first for free.
pub fn reduced_step_cost(hst: &mut Hst, f: &FusionMap, mu: &LeafMeasure, mu_next: &LeafMeasure) -> Result<f64> {
    let pushed = hst.apply_fusion(f, mu);
    w1_hst(hst, &pushed, mu_next)
}
