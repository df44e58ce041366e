//! Finite metric spaces: generators, balls, normalization and point measures.

use crate::error::{Error, Result};
use fixedbitset::FixedBitSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// A set of metric points, stored as a bitset over dense ids.
pub type PointSet = FixedBitSet;

/// Builds a point set of capacity `n` holding `points`.
pub fn point_set(n: usize, points: impl IntoIterator<Item = usize>) -> PointSet {
    let mut s = FixedBitSet::with_capacity(n);
    for p in points {
        s.insert(p);
    }
    s
}

/// Generator families accepted by [`build_metric`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Equispaced points on a segment.
    Line,
    /// Equispaced points on a circle with the geodesic distance.
    Circle,
    /// All pairwise distances equal.
    Uniform,
    /// Shortest-path metric of a random regular graph of the given degree.
    Expander { degree: usize },
    /// Uniform random points in the unit square with the Euclidean distance.
    Random,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(MetricKind::Line),
            "circle" => Ok(MetricKind::Circle),
            "uniform" => Ok(MetricKind::Uniform),
            "expander" => Ok(MetricKind::Expander { degree: 4 }),
            "random" => Ok(MetricKind::Random),
            other => Err(Error::InvalidConfig(format!("unknown metric kind `{other}`"))),
        }
    }
}

/// A finite metric on dense ids `0..n`, normalized to diameter 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMetric {
    n: usize,
    dist: Vec<f64>,
    /// Line positions or circle angles, when the generator has them.
    coords: Option<Vec<f64>>,
    /// For each point, all points sorted by (distance, id).
    order: Vec<Vec<usize>>,
    min_positive: f64,
}

#[derive(Serialize, Deserialize)]
struct MetricJson {
    n: usize,
    dist: Vec<f64>,
}

impl FiniteMetric {
    /// Validates a raw distance matrix and normalizes it to diameter 1.
    pub fn from_matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidMetric("distance matrix is not square".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_flat(n, flat, None)
    }

    fn from_flat(n: usize, dist: Vec<f64>, coords: Option<Vec<f64>>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSize(format!("need at least 2 points, got {n}")));
        }
        validate(n, &dist)?;
        let dist = normalize_flat(n, dist)?;
        Ok(Self::assemble(n, dist, coords))
    }

    fn assemble(n: usize, dist: Vec<f64>, coords: Option<Vec<f64>>) -> Self {
        let mut order = Vec::with_capacity(n);
        let mut min_positive = f64::INFINITY;
        for x in 0..n {
            let row = &dist[x * n..(x + 1) * n];
            let mut ids: Vec<usize> = (0..n).collect();
            ids.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order.push(ids);
            for &d in row {
                if d > 0.0 && d < min_positive {
                    min_positive = d;
                }
            }
        }
        FiniteMetric { n, dist, coords, order, min_positive }
    }

    /// Number of points.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Distance between two points.
    #[inline]
    pub fn d(&self, x: usize, y: usize) -> f64 {
        self.dist[x * self.n + y]
    }

    /// Row of distances from `x`.
    pub fn row(&self, x: usize) -> &[f64] {
        &self.dist[x * self.n..(x + 1) * self.n]
    }

    /// Points sorted by increasing distance from `x` (ties by id).
    pub fn by_distance(&self, x: usize) -> &[usize] {
        &self.order[x]
    }

    /// Generator coordinates (line positions or circle angles), if any.
    pub fn coords(&self) -> Option<&[f64]> {
        self.coords.as_deref()
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        self.dist.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest positive pairwise distance (infinite if none).
    pub fn min_positive_distance(&self) -> f64 {
        self.min_positive
    }

    /// Closed ball `{y : d(x,y) <= r}`.
    pub fn ball(&self, x: usize, r: f64) -> PointSet {
        let mut s = FixedBitSet::with_capacity(self.n);
        for &y in &self.order[x] {
            if self.d(x, y) > r {
                break;
            }
            s.insert(y);
        }
        s
    }

    /// Distance from `x` to the nearest point of `set` (infinite for an empty set).
    pub fn dist_to_set(&self, x: usize, set: impl IntoIterator<Item = usize>) -> f64 {
        set.into_iter().map(|y| self.d(x, y)).fold(f64::INFINITY, f64::min)
    }

    /// Diameter of a point set (0 for sets with fewer than two points).
    pub fn set_diameter(&self, set: &PointSet) -> f64 {
        let pts: Vec<usize> = set.ones().collect();
        let mut best = 0.0f64;
        for (i, &a) in pts.iter().enumerate() {
            for &b in &pts[i + 1..] {
                best = best.max(self.d(a, b));
            }
        }
        best
    }

    /// Ratio of the largest to the smallest positive distance.
    pub fn aspect_ratio(&self) -> Result<f64> {
        if !self.min_positive.is_finite() {
            return Err(Error::DegenerateMetric("no two distinct points".into()));
        }
        Ok(self.diameter() / self.min_positive)
    }

    /// Returns a copy rescaled to diameter 1. Bit-exact no-op on normalized input.
    pub fn normalized(&self) -> Result<Self> {
        let dist = normalize_flat(self.n, self.dist.clone())?;
        Ok(Self::assemble(self.n, dist, self.coords.clone()))
    }

    /// Serializes as `{"n": .., "dist": [row-major]}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MetricJson { n: self.n, dist: self.dist.clone() })?)
    }

    /// Parses the format written by [`FiniteMetric::to_json`].
    pub fn from_json(s: &str) -> Result<Self> {
        let m: MetricJson = serde_json::from_str(s)?;
        if m.dist.len() != m.n * m.n {
            return Err(Error::InvalidMetric(format!(
                "expected {} entries, got {}",
                m.n * m.n,
                m.dist.len()
            )));
        }
        Self::from_flat(m.n, m.dist, None)
    }

    /// Checks the triangle inequality on every triple; returns the first violation.
    pub fn triangle_violation(&self) -> Option<(usize, usize, usize)> {
        triangle_violation(self.n, &self.dist)
    }
}

fn validate(n: usize, dist: &[f64]) -> Result<()> {
    for x in 0..n {
        if dist[x * n + x] != 0.0 {
            return Err(Error::InvalidMetric(format!("d({x},{x}) is not zero")));
        }
        for y in 0..n {
            let v = dist[x * n + y];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidMetric(format!("d({x},{y}) = {v} is not a finite nonnegative number")));
            }
            if v != dist[y * n + x] {
                return Err(Error::InvalidMetric(format!("d({x},{y}) is not symmetric")));
            }
        }
    }
    if let Some((a, b, c)) = triangle_violation(n, dist) {
        return Err(Error::InvalidMetric(format!("triangle inequality fails on ({a},{b},{c})")));
    }
    Ok(())
}

fn triangle_violation(n: usize, dist: &[f64]) -> Option<(usize, usize, usize)> {
    for a in 0..n {
        for b in 0..n {
            let ab = dist[a * n + b];
            for c in 0..n {
                if dist[a * n + c] > ab + dist[b * n + c] {
                    return Some((a, b, c));
                }
            }
        }
    }
    None
}

/// Shortest-path closure iterated to a fixpoint; removes rounding-level triangle violations.
fn close_triangles(n: usize, dist: &mut [f64]) {
    loop {
        let mut changed = false;
        for k in 0..n {
            for i in 0..n {
                let ik = dist[i * n + k];
                for j in 0..n {
                    let via = ik + dist[k * n + j];
                    if via < dist[i * n + j] {
                        dist[i * n + j] = via;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
}

fn normalize_flat(n: usize, mut dist: Vec<f64>) -> Result<Vec<f64>> {
    for _ in 0..8 {
        let diam = dist.iter().copied().fold(0.0, f64::max);
        if diam == 0.0 {
            return Err(Error::DegenerateMetric("all distances are zero".into()));
        }
        if diam != 1.0 {
            for v in dist.iter_mut() {
                *v /= diam;
            }
        }
        close_triangles(n, &mut dist);
        if dist.iter().copied().fold(0.0, f64::max) == 1.0 {
            return Ok(dist);
        }
    }
    Err(Error::Internal("normalization did not reach a fixpoint".into()))
}

/// Builds a metric from one of the generator families, normalized to diameter 1.
pub fn build_metric(kind: MetricKind, n: usize, seed: u64) -> Result<FiniteMetric> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("need at least 2 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = vec![0.0; n * n];
    let mut coords = None;
    match kind {
        MetricKind::Line => {
            let m = (n - 1) as f64;
            for i in 0..n {
                for j in 0..n {
                    dist[i * n + j] = (i as f64 - j as f64).abs() / m;
                }
            }
            coords = Some((0..n).map(|i| i as f64 / m).collect());
        }
        MetricKind::Circle => {
            let half = (n / 2) as f64;
            for i in 0..n {
                for j in 0..n {
                    let a = i.abs_diff(j);
                    dist[i * n + j] = a.min(n - a) as f64 / half;
                }
            }
            let step = 2.0 * std::f64::consts::PI / n as f64;
            coords = Some((0..n).map(|i| i as f64 * step).collect());
        }
        MetricKind::Uniform => {
            for i in 0..n {
                for j in 0..n {
                    dist[i * n + j] = if i == j { 0.0 } else { 1.0 };
                }
            }
        }
        MetricKind::Expander { degree } => {
            if degree < 2 || degree % 2 == 1 {
                return Err(Error::InvalidConfig(format!("expander degree must be even and >= 2, got {degree}")));
            }
            let adj = random_regular_graph(n, degree, &mut rng);
            for s in 0..n {
                let hops = bfs(&adj, s);
                for t in 0..n {
                    dist[s * n + t] = hops[t] as f64;
                }
            }
        }
        MetricKind::Random => {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
            for i in 0..n {
                for j in 0..n {
                    let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                    dist[i * n + j] = if i == j { 0.0 } else { dx.hypot(dy) };
                }
            }
            for i in 0..n {
                for j in 0..i {
                    let v = dist[i * n + j];
                    dist[j * n + i] = v;
                }
            }
            close_triangles(n, &mut dist);
        }
    }
    let dist = normalize_flat(n, dist)?;
    let m = FiniteMetric::assemble(n, dist, coords);
    if let Some((a, b, c)) = m.triangle_violation() {
        return Err(Error::Internal(format!("generator produced a triangle violation on ({a},{b},{c})")));
    }
    Ok(m)
}

/// Union of `degree/2` random Hamiltonian cycles; connected by construction.
fn random_regular_graph(n: usize, degree: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for _ in 0..degree / 2 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for i in 0..n {
            let (a, b) = (perm[i], perm[(i + 1) % n]);
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    adj
}

fn bfs(adj: &[Vec<usize>], s: usize) -> Vec<usize> {
    let mut hops = vec![usize::MAX; adj.len()];
    hops[s] = 0;
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if hops[v] == usize::MAX {
                hops[v] = hops[u] + 1;
                queue.push_back(v);
            }
        }
    }
    hops
}

/// A nonnegative mass assignment over metric points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMeasure {
    mass: Vec<f64>,
}

impl PointMeasure {
    /// The zero measure on `n` points.
    pub fn zeros(n: usize) -> Self {
        PointMeasure { mass: vec![0.0; n] }
    }

    /// Builds a measure from a dense mass vector.
    pub fn from_vec(mass: Vec<f64>) -> Self {
        PointMeasure { mass }
    }

    /// Builds a measure on `n` points from (point, mass) pairs; repeated points add up.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut m = Self::zeros(n);
        for (p, v) in pairs {
            m.mass[p] += v;
        }
        m
    }

    /// Mass `m` at a single point.
    pub fn dirac(n: usize, x: usize, m: f64) -> Self {
        Self::from_pairs(n, [(x, m)])
    }

    /// Number of points of the underlying space.
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    /// True when the underlying space is empty.
    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Mass at `x`.
    pub fn get(&self, x: usize) -> f64 {
        self.mass[x]
    }

    /// Adds `v` to the mass at `x`.
    pub fn add(&mut self, x: usize, v: f64) {
        self.mass[x] += v;
    }

    /// Dense mass vector.
    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    /// Total mass.
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Points with positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.mass.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i)
    }

    /// Mass of a point set.
    pub fn mass_of(&self, set: &PointSet) -> f64 {
        set.ones().map(|p| self.mass[p]).sum()
    }

    /// Mass of the closed ball `B(x, r)`.
    pub fn ball_mass(&self, m: &FiniteMetric, x: usize, r: f64) -> f64 {
        let mut s = 0.0;
        for &y in m.by_distance(x) {
            if m.d(x, y) > r {
                break;
            }
            s += self.mass[y];
        }
        s
    }

    /// Coordinatewise average of measures on the same space.
    pub fn average(measures: &[PointMeasure]) -> Self {
        let n = measures.first().map_or(0, |m| m.len());
        let mut out = Self::zeros(n);
        for m in measures {
            for (o, v) in out.mass.iter_mut().zip(&m.mass) {
                *o += v;
            }
        }
        let c = measures.len() as f64;
        for o in out.mass.iter_mut() {
            *o /= c;
        }
        out
    }
}
