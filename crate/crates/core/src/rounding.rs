//! Online rounding of a fractional leaf measure to an integral one.
//!
//! The integral replica is kept balanced: every subtree holds the floor or the ceiling of the
//! fractional subtree mass. Each step relabels the replica along the fusion map and then
//! reassigns integral quotas top-down, keeping children at their current side of the rounding
//! whenever the quota allows it.

use crate::error::{Error, Result};
use crate::hst::{FusionMap, Hst, NodeId, TreeMeasure};
use crate::metric::PointMeasure;
use crate::transport::{w1_exact, w1_hst};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Distance to an integer below which a fractional mass is treated as that integer.
pub const SNAP_TOL: f64 = 1e-9;

/// Tolerance for probabilities in coupling tables.
pub const PROB_TOL: f64 = 1e-12;

/// Floor and ceiling of `m`, equal when `m` is within [`SNAP_TOL`] of an integer.
pub fn floor_ceil(m: f64) -> (i64, i64) {
    let r = m.round();
    if (m - r).abs() <= SNAP_TOL {
        (r as i64, r as i64)
    } else {
        (m.floor() as i64, m.ceil() as i64)
    }
}

/// Joint law of the rounded masses of two fused subtrees, indexed floor (0) / ceiling (1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoupleTable {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

impl CoupleTable {
    pub fn get(&self, a_ceil: bool, b_ceil: bool) -> f64 {
        match (a_ceil, b_ceil) {
            (false, false) => self.p00,
            (false, true) => self.p01,
            (true, false) => self.p10,
            (true, true) => self.p11,
        }
    }

    /// Draws (A at ceiling, B at ceiling).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (bool, bool) {
        let u: f64 = rng.gen();
        if u < self.p00 {
            (false, false)
        } else if u < self.p00 + self.p01 {
            (false, true)
        } else if u < self.p00 + self.p01 + self.p10 {
            (true, false)
        } else {
            (true, true)
        }
    }
}

/// Coupling of the rounded masses of two subtrees with fractional masses `mu_a`, `mu_b` and
/// floor probabilities `pa_floor`, `pb_floor`, such that the merged count is balanced.
pub fn fuse_couple(mu_a: f64, mu_b: f64, pa_floor: f64, pb_floor: f64) -> Result<CoupleTable> {
    let frac = |m: f64| {
        let (f, c) = floor_ceil(m);
        if f == c {
            0.0
        } else {
            m - f as f64
        }
    };
    let (ea, eb) = (frac(mu_a), frac(mu_b));
    let (ia, ib) = (f64::from(u8::from(ea > 0.0)), f64::from(u8::from(eb > 0.0)));
    let t = if ea + eb <= 1.0 {
        CoupleTable {
            p00: pa_floor + pb_floor - 1.0,
            p01: (1.0 - pb_floor) * ib,
            p10: (1.0 - pa_floor) * ia,
            p11: 0.0,
        }
    } else {
        CoupleTable { p00: 0.0, p01: pa_floor, p10: pb_floor, p11: 1.0 - pa_floor - pb_floor }
    };
    let entries = [t.p00, t.p01, t.p10, t.p11];
    if entries.iter().any(|&p| p < -PROB_TOL || p > 1.0 + PROB_TOL) || (entries.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidMarginals(format!(
            "masses ({mu_a}, {mu_b}) with floor probabilities ({pa_floor}, {pb_floor}) give {entries:?}"
        )));
    }
    Ok(t)
}

/// Vertices where `counts` is outside `[⌊m⌋, ⌈m⌉]` of the fractional subtree mass.
pub fn balance_violations(hst: &Hst, integral: &TreeMeasure, fractional: &TreeMeasure) -> Vec<NodeId> {
    let c = integral.subtree_masses(hst);
    let m = fractional.subtree_masses(hst);
    let mut out = Vec::new();
    let mut nodes: Vec<NodeId> = c.keys().chain(m.keys()).copied().collect();
    nodes.sort_unstable();
    nodes.dedup();
    for v in nodes {
        let (f, ce) = floor_ceil(m.get(&v).copied().unwrap_or(0.0));
        let have = c.get(&v).copied().unwrap_or(0.0).round() as i64;
        if have < f || have > ce {
            out.push(v);
        }
    }
    out
}

/// Costs and repairs of one rounding step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RoundingStep {
    /// Tree transport cost of the integral move after relabeling.
    pub cost_tree: f64,
    /// Transport cost of the pulled-back integral measures.
    pub cost_x: f64,
    /// Vertices left unbalanced by relabeling alone.
    pub repairs: usize,
}

/// One integral replica tracking a fractional leaf measure.
#[derive(Debug, Clone)]
pub struct RoundingState {
    k: usize,
    seed: u64,
    mu_hat: TreeMeasure,
}

fn substream(seed: u64, t: usize, node: NodeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t as u64) << 32) | u64::from(node));
    rng
}

/// Removes `count` items, drawing each with probability proportional to its weight.
fn weighted_pick<R: Rng + ?Sized>(items: &mut Vec<(usize, f64)>, count: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = items.iter().map(|i| i.1).sum();
        let idx = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = items.len() - 1;
            for (i, it) in items.iter().enumerate() {
                if u < it.1 {
                    pick = i;
                    break;
                }
                u -= it.1;
            }
            pick
        } else {
            rng.gen_range(0..items.len())
        };
        out.push(items.remove(idx).0);
    }
    out
}

impl RoundingState {
    /// Starts from an integral leaf measure of total `k`.
    pub fn new(k: usize, initial: TreeMeasure, seed: u64) -> Result<Self> {
        if initial.iter().any(|(_, &m)| m.fract() != 0.0 || m < 0.0) || initial.total() != k as f64 {
            return Err(Error::InvalidMarginals("initial measure must be integral with total k".into()));
        }
        Ok(RoundingState { k, seed, mu_hat: initial })
    }

    pub fn mu_hat(&self) -> &TreeMeasure {
        &self.mu_hat
    }

    /// `β#μ̂`, the integral server positions in the metric.
    pub fn pull_back(&self, hst: &Hst) -> PointMeasure {
        hst.beta_pushforward(&self.mu_hat)
    }

    /// Relabels by `f`, then rebalances against `mu_next`. `fused_prev` is `f#μ_{t-1}` and is
    /// only used to count vertices that relabeling left unbalanced.
    pub fn advance(
        &mut self,
        hst: &mut Hst,
        f: &FusionMap,
        fused_prev: &TreeMeasure,
        mu_next: &TreeMeasure,
        t: usize,
    ) -> Result<RoundingStep> {
        let relabeled = hst.apply_fusion(f, &self.mu_hat);
        let repairs = balance_violations(hst, &relabeled, fused_prev).len();
        let next = self.rebalance(hst, &relabeled, mu_next, t)?;
        let cost_tree = w1_hst(hst, &relabeled, &next)?;
        let before = hst.beta_pushforward(&relabeled);
        let after = hst.beta_pushforward(&next);
        let cost_x = if before == after { 0.0 } else { w1_exact(hst.metric(), &before, &after)?.0 };
        self.mu_hat = next;
        Ok(RoundingStep { cost_tree, cost_x, repairs })
    }

    fn rebalance(&self, hst: &Hst, current: &TreeMeasure, mu_next: &TreeMeasure, t: usize) -> Result<TreeMeasure> {
        let snapped = TreeMeasure::from_pairs(mu_next.iter().map(|(&l, &m)| {
            let (f, c) = floor_ceil(m);
            (l, if f == c { f as f64 } else { m })
        }));
        let frac = snapped.subtree_masses(hst);
        let have = current.subtree_masses(hst);
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &v in frac.keys().chain(have.keys()) {
            if let Some(p) = hst.parent(v) {
                children.entry(p).or_default().push(v);
            }
        }
        for c in children.values_mut() {
            c.sort_unstable();
            c.dedup();
        }
        let root = hst.root();
        let (rf, rc) = floor_ceil(frac.get(&root).copied().unwrap_or(0.0));
        let k = self.k as i64;
        if k < rf || k > rc {
            return Err(Error::Internal(format!("fractional total {:?} cannot carry {k} servers", frac.get(&root))));
        }
        let mut out = TreeMeasure::new();
        let mut stack = vec![(root, k)];
        while let Some((v, q)) = stack.pop() {
            let Some(ch) = children.get(&v) else {
                if q > 0 {
                    out.add(v, q as f64);
                }
                continue;
            };
            let info: Vec<(NodeId, i64, i64, f64, i64)> = ch
                .iter()
                .map(|&c| {
                    let m = frac.get(&c).copied().unwrap_or(0.0);
                    let (fl, ce) = floor_ceil(m);
                    let cur = have.get(&c).copied().unwrap_or(0.0).round() as i64;
                    (c, fl, ce, m - fl as f64, cur)
                })
                .collect();
            let base: i64 = info.iter().map(|i| i.1).sum();
            let open: Vec<usize> = (0..info.len()).filter(|&i| info[i].1 < info[i].2).collect();
            let ups = q - base;
            if ups < 0 || ups > open.len() as i64 {
                return Err(Error::Internal(format!("vertex {v}: quota {q} is outside the children's rounding range")));
            }
            let ups = ups as usize;
            let mut rng = substream(self.seed, t, v);
            let (mut chosen, mut rest): (Vec<usize>, Vec<usize>) = open.iter().partition(|&&i| info[i].4 >= info[i].2);
            if chosen.len() > ups {
                let mut pool: Vec<(usize, f64)> = chosen.iter().map(|&i| (i, 1.0 - info[i].3)).collect();
                weighted_pick(&mut pool, chosen.len() - ups, &mut rng);
                chosen = pool.into_iter().map(|p| p.0).collect();
            } else if chosen.len() < ups {
                let mut pool: Vec<(usize, f64)> = rest.drain(..).map(|i| (i, info[i].3)).collect();
                chosen.extend(weighted_pick(&mut pool, ups - chosen.len(), &mut rng));
            }
            for (i, &(c, fl, _, _, _)) in info.iter().enumerate() {
                let qc = fl + i64::from(chosen.contains(&i));
                if qc > 0 {
                    stack.push((c, qc));
                }
            }
        }
        Ok(out)
    }
}
