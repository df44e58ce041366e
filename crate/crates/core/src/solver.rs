//! Fractional k-server configurations on the universal HST and their potential.
//!
//! A configuration stores, for every vertex `ξ` with mass, a non-increasing list of values
//! `z^{ξ,i}` in `[0, 1/(1-δ)]`. The root list is `k` copies of `1/(1-δ)`; every other list is
//! the sorted concatenation of its children's lists, so `z^ξ = Σ_i z^{ξ,i}` is the leaf mass of
//! the subtree. The measure `μ^z` puts `z^ℓ` on each leaf and has total `k + ε`.

use crate::error::{Error, Result};
use crate::hst::{FusionMap, Hst, NodeId, TreeMeasure};
use crate::metric::point_set;
use crate::transport::w1_hst;
use serde::Serialize;
use std::collections::BTreeMap;

/// Tolerance for mass identities and sign checks on configurations.
pub const Z_TOL: f64 = 1e-9;

/// Constants of the fractional solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverParams {
    pub k: usize,
    pub tau: f64,
    /// Mixing constant `δ = 1/(3k)`.
    pub delta: f64,
    /// Excess mass `ε = δk/(1-δ)`.
    pub eps: f64,
    /// Weight of the divergence term.
    pub c0: f64,
}

impl SolverParams {
    /// `c0 = (⌈ln k⌉ + 1) · c0_mult`.
    pub fn new(k: usize, tau: f64, c0_mult: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidK("k must be positive".into()));
        }
        let delta = 1.0 / (3.0 * k as f64);
        let eps = delta * k as f64 / (1.0 - delta);
        let c0 = ((k as f64).ln().ceil() + 1.0) * c0_mult;
        Ok(SolverParams { k, tau, delta, eps, c0 })
    }

    /// Upper end of the `z` range, `1/(1-δ)`.
    pub fn z_max(&self) -> f64 {
        1.0 / (1.0 - self.delta)
    }

    /// Total mass `k + ε` of a configuration.
    pub fn total(&self) -> f64 {
        self.k as f64 + self.eps
    }

    /// `x = 1 - (1-δ) z`.
    pub fn x_of(&self, z: f64) -> f64 {
        1.0 - (1.0 - self.delta) * z
    }
}

/// Sorted `z` lists per vertex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZConfig {
    lists: BTreeMap<NodeId, Vec<f64>>,
}

fn sort_desc(v: &mut [f64]) {
    v.sort_by(|a, b| b.total_cmp(a));
}

fn merge_desc(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] >= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

impl ZConfig {
    /// Builds the canonical configuration from per-leaf lists.
    pub fn from_leaf_lists(hst: &Hst, params: &SolverParams, leaves: BTreeMap<NodeId, Vec<f64>>) -> Result<Self> {
        let mut lists: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for (&leaf, vals) in &leaves {
            if !hst.contains(leaf) || !hst.is_leaf(leaf) {
                return Err(Error::IncompatibleSupport(format!("vertex {leaf} is not a leaf")));
            }
            let vals: Vec<f64> = vals.iter().copied().filter(|&v| v != 0.0).collect();
            if vals.is_empty() {
                continue;
            }
            let mut cur = Some(leaf);
            while let Some(c) = cur {
                if c != hst.root() {
                    lists.entry(c).or_default().extend_from_slice(&vals);
                }
                cur = hst.parent(c);
            }
        }
        for v in lists.values_mut() {
            sort_desc(v);
        }
        lists.insert(hst.root(), vec![params.z_max(); params.k]);
        Ok(ZConfig { lists })
    }

    /// Canonical configuration with one entry `z^ℓ` per leaf.
    pub fn from_leaf_masses(hst: &Hst, params: &SolverParams, mu: &TreeMeasure) -> Result<Self> {
        Self::from_leaf_lists(hst, params, mu.iter().map(|(&l, &m)| (l, vec![m])).collect())
    }

    /// Starting configuration around leaf `l0`: mass 1 on `l0`, mass 1 on the all-zero
    /// singleton chains of the `k-1` nearest other points, and `ε` on the next one.
    pub fn initial(hst: &mut Hst, params: &SolverParams, l0: NodeId) -> Result<Self> {
        let m = hst.metric_arc().clone();
        if m.n() <= params.k {
            return Err(Error::InvalidK(format!("need more than k = {} points, have {}", params.k, m.n())));
        }
        let p0 = hst.beta(l0);
        let mut mu = TreeMeasure::dirac(l0, 1.0);
        let others: Vec<usize> = m.by_distance(p0).iter().copied().filter(|&y| y != p0).take(params.k).collect();
        for (i, &y) in others.iter().enumerate() {
            let entries = vec![(point_set(m.n(), [y]), 0u8); hst.depth()];
            let leaf = hst.chain(&entries)?;
            mu.add(leaf, if i + 1 < params.k { 1.0 } else { params.eps });
        }
        Self::from_leaf_masses(hst, params, &mu)
    }

    /// The list at `ξ`, empty when `ξ` carries no mass.
    pub fn list(&self, xi: NodeId) -> &[f64] {
        self.lists.get(&xi).map_or(&[], Vec::as_slice)
    }

    /// `z^ξ = Σ_i z^{ξ,i}`.
    pub fn z(&self, xi: NodeId) -> f64 {
        self.list(xi).iter().sum()
    }

    /// Vertices with a nonempty list, including the root.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.lists.keys().copied()
    }

    /// The leaf measure `μ^z`.
    pub fn leaf_measure(&self, hst: &Hst) -> TreeMeasure {
        let mut mu = TreeMeasure::new();
        for (&v, l) in &self.lists {
            if hst.is_leaf(v) {
                mu.add(v, l.iter().sum());
            }
        }
        mu
    }

    fn leaf_lists(&self, hst: &Hst) -> BTreeMap<NodeId, Vec<f64>> {
        self.lists.iter().filter(|(&v, _)| hst.is_leaf(v)).map(|(&v, l)| (v, l.clone())).collect()
    }

    /// Violated constraints of `K_δ`: root list, entry range, prefix majorization of every
    /// list against its children, `z^ℓ <= 1`, total mass and `z^ξ = Σ_children z`.
    pub fn violations(&self, hst: &Hst, params: &SolverParams) -> Vec<String> {
        let mut out = Vec::new();
        let root = hst.root();
        let rl = self.list(root);
        if rl.len() != params.k || rl.iter().any(|&v| (v - params.z_max()).abs() > Z_TOL) {
            out.push(format!("root list is {rl:?}"));
        }
        let mut children: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        let mut child_z: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (&v, l) in &self.lists {
            if l.iter().any(|&z| !(-Z_TOL..=params.z_max() + Z_TOL).contains(&z)) {
                out.push(format!("vertex {v}: entry outside [0, 1/(1-δ)]"));
            }
            if l.windows(2).any(|w| w[0] < w[1]) {
                out.push(format!("vertex {v}: list is not sorted"));
            }
            if let Some(p) = hst.parent(v) {
                children.entry(p).or_default().extend_from_slice(l);
                *child_z.entry(p).or_insert(0.0) += l.iter().sum::<f64>();
            }
        }
        for (&v, l) in &self.lists {
            if hst.is_leaf(v) {
                let zl: f64 = l.iter().sum();
                if zl > 1.0 + Z_TOL {
                    out.push(format!("leaf {v} carries {zl} > 1"));
                }
                continue;
            }
            let mut ch = children.remove(&v).unwrap_or_default();
            sort_desc(&mut ch);
            // Σ_{i<=s} x^{ξ,i} <= Σ of the s smallest child x values, for every s.
            let (mut lhs, mut rhs) = (0.0, 0.0);
            for s in 0..l.len().max(ch.len()) {
                lhs += params.x_of(l.get(s).copied().unwrap_or(0.0));
                rhs += params.x_of(ch.get(s).copied().unwrap_or(0.0));
                if lhs > rhs + Z_TOL {
                    out.push(format!("vertex {v}: majorization fails at prefix {}", s + 1));
                    break;
                }
            }
            let zc = child_z.get(&v).copied().unwrap_or(0.0);
            if (self.z(v) - zc).abs() > Z_TOL {
                out.push(format!("vertex {v}: z = {} but children sum to {zc}", self.z(v)));
            }
        }
        let total = self.leaf_measure(hst).total();
        if (total - params.total()).abs() > Z_TOL {
            out.push(format!("total leaf mass {total} differs from k + ε = {}", params.total()));
        }
        out
    }

    /// Fuses `xi_a` into its sibling `xi_b`: lists under `xi_a` move to their images and lists
    /// meeting at the same vertex are merged in non-increasing order.
    pub fn primitive_fuse(&self, hst: &mut Hst, xi_a: NodeId, xi_b: NodeId) -> Result<ZConfig> {
        let inj = hst.canonical_injection(xi_a, xi_b).map_err(|e| Error::InvalidFusion(e.to_string()))?;
        if xi_a == xi_b {
            return Ok(self.clone());
        }
        let lvl = hst.level(xi_a);
        let moved: Vec<NodeId> =
            self.lists.keys().copied().filter(|&v| hst.level(v) >= lvl && hst.ancestor(v, lvl) == xi_a).collect();
        if moved.is_empty() {
            return Ok(self.clone());
        }
        let mut lists = self.lists.clone();
        let mut pending = Vec::with_capacity(moved.len());
        for v in moved {
            let l = lists.remove(&v).expect("listed vertex");
            pending.push((hst.inject(&inj, v), l));
        }
        for (img, l) in pending {
            let merged = match lists.get(&img) {
                Some(old) => merge_desc(old, &l),
                None => l,
            };
            lists.insert(img, merged);
        }
        Ok(ZConfig { lists })
    }

    /// Applies every injection of a fusion map in order.
    pub fn fuse(&self, hst: &mut Hst, f: &FusionMap) -> Result<ZConfig> {
        let mut cur = self.clone();
        for inj in &f.injections {
            cur = cur.primitive_fuse(hst, inj.source, inj.target)?;
        }
        Ok(cur)
    }

    /// Moves mass onto leaf `sigma` until it holds 1. Mass is taken first from other leaves of
    /// the same point, then from the rest of the tree, nearest subtree first and proportionally
    /// to leaf masses within a subtree. Returns the new configuration and the cost of the plan.
    pub fn reference_transition(&self, hst: &Hst, params: &SolverParams, sigma: NodeId) -> Result<(ZConfig, f64)> {
        if params.k == 0 {
            return Err(Error::InvalidK("k must be positive".into()));
        }
        if !hst.contains(sigma) || !hst.is_leaf(sigma) {
            return Err(Error::IncompatibleSupport(format!("request vertex {sigma} is not a leaf")));
        }
        let mut leaves = self.leaf_lists(hst);
        let have: f64 = leaves.get(&sigma).map_or(0.0, |l| l.iter().sum());
        let deficit = 1.0 - have;
        if deficit <= 0.0 {
            return Ok((self.clone(), 0.0));
        }
        let point = hst.beta(sigma);
        let avail: BTreeMap<NodeId, f64> =
            leaves.iter().filter(|(&l, _)| l != sigma).map(|(&l, v)| (l, v.iter().sum())).collect();
        let own: BTreeMap<NodeId, f64> = avail.iter().filter(|(&l, _)| hst.beta(l) == point).map(|(&l, &m)| (l, m)).collect();
        let rest: BTreeMap<NodeId, f64> = avail.iter().filter(|(&l, _)| hst.beta(l) != point).map(|(&l, &m)| (l, m)).collect();
        let (taken_own, left, c1) = withdraw_nearest(hst, sigma, &own, deficit);
        let (taken_rest, left, c2) = withdraw_nearest(hst, sigma, &rest, left);
        if left > Z_TOL {
            return Err(Error::Internal(format!("transition could not gather mass, {left} missing")));
        }
        for (l, frac) in taken_own.into_iter().chain(taken_rest) {
            let e = leaves.get_mut(&l).expect("withdrawn leaf has a list");
            if frac >= 1.0 {
                leaves.remove(&l);
            } else {
                for v in e.iter_mut() {
                    *v *= 1.0 - frac;
                }
            }
        }
        leaves.insert(sigma, vec![1.0]);
        Ok((ZConfig::from_leaf_lists(hst, params, leaves)?, c1 + c2))
    }
}

/// Withdraws `amount` from `avail` (leaf → mass) toward `sigma`, deepest common ancestor first
/// and proportionally within one ancestor level. Returns the withdrawn fraction per leaf, the
/// amount still missing and the cost `Σ moved · dist_T`.
pub fn withdraw_nearest(
    hst: &Hst,
    sigma: NodeId,
    avail: &BTreeMap<NodeId, f64>,
    amount: f64,
) -> (BTreeMap<NodeId, f64>, f64, f64) {
    let mut by_level: BTreeMap<usize, Vec<(NodeId, f64)>> = BTreeMap::new();
    for (&l, &m) in avail {
        if m > 0.0 && l != sigma {
            by_level.entry(hst.level(hst.lca(l, sigma))).or_default().push((l, m));
        }
    }
    let mut taken = BTreeMap::new();
    let mut left = amount;
    let mut cost = 0.0;
    for (lvl, group) in by_level.into_iter().rev() {
        if left <= 0.0 {
            break;
        }
        let total: f64 = group.iter().map(|g| g.1).sum();
        let frac = if total <= left { 1.0 } else { left / total };
        let moved = if frac >= 1.0 { total } else { left };
        for (l, _) in group {
            taken.insert(l, frac);
        }
        cost += moved * hst.scale(lvl);
        left = if frac >= 1.0 { left - total } else { 0.0 };
    }
    (taken, left.max(0.0), cost)
}

/// Subtree masses of an integral leaf measure, rounded to integers.
fn hat_z(hst: &Hst, theta: &TreeMeasure) -> BTreeMap<NodeId, u64> {
    theta.subtree_masses(hst).into_iter().map(|(v, m)| (v, m.round().max(0.0) as u64)).collect()
}

/// Divergence term `D(θ; x)` over levels `1..=J`.
pub fn potential_d(hst: &Hst, params: &SolverParams, theta: &TreeMeasure, cfg: &ZConfig) -> f64 {
    let zh = hat_z(hst, theta);
    let mut nodes: Vec<NodeId> = cfg.nodes().chain(zh.keys().copied()).filter(|&v| hst.level(v) >= 1).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let d = params.delta;
    let mut total = 0.0;
    for v in nodes {
        let list = cfg.list(v);
        let h = zh.get(&v).copied().unwrap_or(0) as usize;
        let mut s = 0.0;
        for i in 1..=list.len().max(h) {
            let x = params.x_of(list.get(i - 1).copied().unwrap_or(0.0));
            let xh = if h >= i { 0.0 } else { 1.0 };
            s += (xh + d) * ((xh + d) / (x + d)).ln();
        }
        total += hst.scale(hst.level(v)) * s;
    }
    total
}

/// Entropy term `H(x)` over levels `1..=J`.
pub fn potential_h(hst: &Hst, params: &SolverParams, cfg: &ZConfig) -> f64 {
    let e = params.eps;
    let c = 1.0 + 1.0 / params.tau;
    let mut total = 0.0;
    for v in cfg.nodes() {
        let Some(p) = hst.parent(v) else { continue };
        let z = cfg.z(v);
        let zp = cfg.z(p);
        total += hst.scale(hst.level(v)) * ((z + c * e) * ((z + e) / e).ln() + z * (zp + e).ln());
    }
    total
}

/// `Φ(θ; x) = c0 · D(θ; x) - H(x)`.
pub fn phi(hst: &Hst, params: &SolverParams, theta: &TreeMeasure, cfg: &ZConfig) -> f64 {
    params.c0 * potential_d(hst, params, theta, cfg) - potential_h(hst, params, cfg)
}

/// Piecewise-linear mass rounding: constant `h` on `[h, h+ε]`, affine from `h` to `h+1` on
/// `[h+ε, h+1]`.
pub fn mass_round_r_eps(y: f64, eps: f64) -> f64 {
    let h = y.floor();
    let f = y - h;
    if f <= eps {
        h
    } else {
        h + (f - eps) / (1.0 - eps)
    }
}

/// Vertex measure whose subtree masses are the rounded leaf-subtree masses of `mu`.
pub fn lambda_eps(hst: &Hst, mu: &TreeMeasure, eps: f64) -> Result<TreeMeasure> {
    let sub = mu.subtree_masses(hst);
    let mut child_sum: BTreeMap<NodeId, f64> = BTreeMap::new();
    for (&v, &m) in &sub {
        if let Some(p) = hst.parent(v) {
            *child_sum.entry(p).or_insert(0.0) += mass_round_r_eps(m, eps);
        }
    }
    let mut out = TreeMeasure::new();
    for (&v, &m) in &sub {
        let own = mass_round_r_eps(m, eps) - child_sum.get(&v).copied().unwrap_or(0.0);
        if own < -Z_TOL {
            return Err(Error::Internal(format!("rounded mass at vertex {v} is negative: {own}")));
        }
        if own > Z_TOL {
            out.add(v, own);
        }
    }
    Ok(out)
}

/// Moves the mass of internal vertices onto the leaves below them, proportionally to `weights`.
pub fn push_down(hst: &Hst, node_measure: &TreeMeasure, weights: &TreeMeasure) -> Result<TreeMeasure> {
    let mut out = TreeMeasure::new();
    for (&v, &m) in node_measure.iter() {
        if hst.is_leaf(v) {
            out.add(v, m);
            continue;
        }
        let lvl = hst.level(v);
        let below: Vec<(NodeId, f64)> =
            weights.iter().filter(|(&l, _)| hst.ancestor(l, lvl) == v).map(|(&l, &w)| (l, w)).collect();
        let total: f64 = below.iter().map(|b| b.1).sum();
        if total <= 0.0 {
            return Err(Error::IncompatibleSupport(format!("no leaf weight below vertex {v}")));
        }
        for (l, w) in below {
            out.add(l, m * w / total);
        }
    }
    Ok(out)
}

/// `Ψ^H(μ) = Σ_v τ^{-level(v)} μ(v)`.
pub fn psi_h(hst: &Hst, mu: &TreeMeasure) -> f64 {
    mu.iter().map(|(&v, &m)| hst.scale(hst.level(v)) * m).sum()
}

/// `2Φ(θ; z) + Ψ^H(μ) + W1_T(μ, μ̃)` for the rounded vertex measure `μ` and exposed measure `μ̃`.
pub fn phi_hat(
    hst: &Hst,
    params: &SolverParams,
    theta: &TreeMeasure,
    cfg: &ZConfig,
    node_measure: &TreeMeasure,
    mu_tilde: &TreeMeasure,
) -> Result<f64> {
    Ok(2.0 * phi(hst, params, theta, cfg) + psi_h(hst, node_measure) + w1_hst(hst, node_measure, mu_tilde)?)
}

/// True when `mu_prime` arises from `mu` by pushing mass down the tree: equal totals and
/// `μ(V(ξ)) <= μ'(V(ξ))` for every vertex.
pub fn dominates(hst: &Hst, mu: &TreeMeasure, mu_prime: &TreeMeasure) -> bool {
    if (mu.total() - mu_prime.total()).abs() > Z_TOL {
        return false;
    }
    let a = mu.subtree_masses(hst);
    let b = mu_prime.subtree_masses(hst);
    a.iter().all(|(v, &m)| m <= b.get(v).copied().unwrap_or(0.0) + Z_TOL)
}

/// Brings the exposed measure `mu_tilde` to mass 1 on `sigma` by drawing from its surplus over
/// `target`, nearest subtree first. Returns the new measure and the cost of the plan.
pub fn service_exposed(hst: &Hst, mu_tilde: &TreeMeasure, target: &TreeMeasure, sigma: NodeId) -> Result<(TreeMeasure, f64)> {
    let deficit = 1.0 - mu_tilde.get(sigma);
    if deficit <= 0.0 {
        return Ok((mu_tilde.clone(), 0.0));
    }
    let surplus: BTreeMap<NodeId, f64> = mu_tilde
        .iter()
        .filter(|(&l, _)| l != sigma)
        .map(|(&l, &m)| (l, (m - target.get(l)).max(0.0).min(m)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    let (taken, left, mut cost) = withdraw_nearest(hst, sigma, &surplus, deficit);
    let mut out = mu_tilde.clone();
    for (l, frac) in taken {
        let s = surplus[&l];
        let m = mu_tilde.get(l);
        out.set(l, if frac >= 1.0 { m - s } else { m - s * frac });
    }
    if left > 0.0 {
        // Round-off leftovers come from the plain measure.
        let rest: BTreeMap<NodeId, f64> = out.iter().filter(|(&l, _)| l != sigma).map(|(&l, &m)| (l, m)).collect();
        let (taken, still, c) = withdraw_nearest(hst, sigma, &rest, left);
        if still > Z_TOL {
            return Err(Error::Internal(format!("exposed measure is short of {still} mass")));
        }
        for (l, frac) in taken {
            let m = out.get(l);
            out.set(l, if frac >= 1.0 { 0.0 } else { m * (1.0 - frac) });
        }
        cost += c;
    }
    out.set(sigma, 1.0);
    Ok((out, cost))
}
