//! Generators shared by the integration tests.
#![allow(dead_code)]

use kserver_core::hst::{FusionMap, Hst, NodeId, TreeMeasure};
use kserver_core::metric::{point_set, FiniteMetric, PointSet};
use rand::seq::SliceRandom;
use rand::Rng;
use std::sync::Arc;

pub const TAU: f64 = 12.0;

/// Points at dyadic positions on `[0, 1]` in a few tight clusters, both ends included, so all
/// distances and their small sums are exact.
pub fn clustered_line<R: Rng>(n: usize, rng: &mut R) -> Arc<FiniteMetric> {
    let grid = 1024u32;
    let mut pos: Vec<u32> = vec![0, grid];
    let clusters: Vec<u32> = (0..3).map(|_| rng.gen_range(0..=grid)).collect();
    while pos.len() < n {
        let c = *clusters.choose(rng).unwrap() as i64;
        let p = (c + rng.gen_range(-12i64..=12)).clamp(0, grid as i64) as u32;
        if !pos.contains(&p) {
            pos.push(p);
        }
    }
    let rows = pos
        .iter()
        .map(|&a| pos.iter().map(|&b| f64::from(a.abs_diff(b)) / f64::from(grid)).collect())
        .collect();
    Arc::new(FiniteMetric::from_matrix(rows).unwrap())
}

/// A random decorated chain ending at `x`: each level keeps `x` and a random part of the
/// previous bottom within half the level scale.
pub fn random_chain<R: Rng>(hst: &mut Hst, x: usize, rng: &mut R) -> NodeId {
    let m = hst.metric_arc().clone();
    let n = m.n();
    let mut prev: Vec<usize> = (0..n).collect();
    let mut v = hst.root();
    for j in 1..=hst.depth() {
        let r = hst.scale(j) / 2.0;
        let keep: Vec<usize> = prev.iter().copied().filter(|&y| y == x || (m.d(x, y) <= r && rng.gen_bool(0.7))).collect();
        let sid = hst.intern_set(point_set(n, keep.iter().copied()));
        v = hst.child(v, sid, u8::from(rng.gen_bool(0.3))).unwrap();
        prev = keep;
    }
    v
}

/// `count` random leaves over a fresh clustered metric.
pub fn random_tree<R: Rng>(n: usize, count: usize, rng: &mut R) -> (Hst, Vec<NodeId>) {
    let m = clustered_line(n, rng);
    let mut hst = Hst::new(m, TAU).unwrap();
    let mut leaves = Vec::with_capacity(count);
    while leaves.len() < count {
        let x = rng.gen_range(0..n);
        let l = random_chain(&mut hst, x, rng);
        if !leaves.contains(&l) {
            leaves.push(l);
        }
    }
    (hst, leaves)
}

/// A sibling of `xi` whose bottom contains that of `xi`, distinct from `xi`.
pub fn containing_sibling<R: Rng>(hst: &mut Hst, xi: NodeId, rng: &mut R) -> NodeId {
    let m = hst.metric_arc().clone();
    let n = m.n();
    let parent = hst.parent(xi).unwrap();
    let level = hst.level(xi);
    let mut set: PointSet = hst.bottom(xi).clone();
    let pool: Vec<usize> = hst.bottom(parent).ones().collect();
    for y in pool {
        if !set.contains(y) && rng.gen_bool(0.5) {
            let mut s = set.clone();
            s.insert(y);
            if m.set_diameter(&s) <= hst.scale(level) {
                set = s;
            }
        }
    }
    let dec = u8::from(rng.gen_bool(0.2));
    let same = set == *hst.bottom(xi) && dec == hst.decoration(xi);
    let dec = if same { 1 - dec } else { dec };
    let sid = hst.intern_set(point_set(n, set.ones()));
    hst.child(parent, sid, dec).unwrap()
}

/// A fusion map of one to three canonical injections at random vertices above `leaves`.
pub fn random_fusion<R: Rng>(hst: &mut Hst, leaves: &[NodeId], rng: &mut R) -> FusionMap {
    let mut f = FusionMap::identity();
    for _ in 0..rng.gen_range(1..=3) {
        let l = *leaves.choose(rng).unwrap();
        let xi = hst.ancestor(l, rng.gen_range(1..=hst.depth()));
        let target = containing_sibling(hst, xi, rng);
        f.push(hst.canonical_injection(xi, target).unwrap());
    }
    f
}

/// Masses that are multiples of 1/8 on random leaves, so sums are exact.
pub fn dyadic_measure<R: Rng>(leaves: &[NodeId], rng: &mut R) -> TreeMeasure {
    let mut mu = TreeMeasure::new();
    for &l in leaves {
        if rng.gen_bool(0.6) {
            mu.add(l, f64::from(rng.gen_range(1..=16u32)) / 8.0);
        }
    }
    if mu.is_empty() {
        mu.add(leaves[0], 1.0);
    }
    mu
}
