//! The online embedding state machine.
//!
//! Centers, deletions and heavy nets do not depend on the carving radii, so they live in a
//! [`SharedEmbedder`] advanced once per step and shared by all replicas. Each replica owns a
//! [`ReplicaEmbedder`] holding its radii and the embedding of the previous step; it turns a
//! [`SharedStep`] into the new embedding together with the fusion map relating the pre-fused
//! tree to the fused one.

use crate::error::{Error, Result};
use crate::hst::{FusionMap, Hst, NodeId};
use crate::metric::{FiniteMetric, PointMeasure, PointSet};
use crate::partition::{carve, fuse_semipartition, refine_and_embed, sample_trunc_exp, CarveSpec, Embedding, SemiPartition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

/// Mass below which a ball counts as empty in the heaviness test.
pub const HEAVY_MASS_FLOOR: f64 = 1e-12;

/// `(1 + ln k)^2`.
pub fn f1(k: usize) -> f64 {
    (1.0 + (k.max(1) as f64).ln()).powi(2)
}

/// `(1 + ln k)^2`.
pub fn f4(k: usize) -> f64 {
    f1(k)
}

/// `ln max(k, 2)`, so that logarithmic factors stay positive for `k = 1`.
pub fn log_k(k: usize) -> f64 {
    (k.max(2) as f64).ln()
}

/// Constants of the embedding algorithm derived from `k` and `τ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbedderParams {
    pub k: usize,
    pub tau: f64,
    pub lambda: f64,
    pub sqrt_lambda: f64,
    pub c_a: f64,
    pub c_f: f64,
    pub delta_heavy: f64,
    pub eta: f64,
    pub k_cap: usize,
}

impl EmbedderParams {
    /// Derives every constant from `k`, `τ` and the multiplier `C_A` inside `c_A`.
    pub fn new(k: usize, tau: f64, c_a_mult: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidK("k must be positive".into()));
        }
        if !(tau >= 12.0) {
            return Err(Error::InvalidConfig(format!("tau must be at least 12, got {tau}")));
        }
        if !(c_a_mult > 0.0) {
            return Err(Error::InvalidConfig(format!("C_A must be positive, got {c_a_mult}")));
        }
        let lambda = tau.max(9.0).powi(2);
        let c_a = 1.0 / (8.0 * c_a_mult * f4(k) * log_k(k));
        let c_f = 0.25;
        let delta_heavy = c_f / (4.0 * (f4(k) + c_a));
        let eta = 1.0 / (32.0 * k as f64 * f1(k));
        let k_cap = (2.0 * tau * k as f64 * f1(k) / (32.0 * c_a)).ceil() as usize;
        Ok(EmbedderParams { k, tau, lambda, sqrt_lambda: lambda.sqrt(), c_a, c_f, delta_heavy, eta, k_cap: k_cap.max(2) })
    }

    /// Overrides the center cap `K`.
    pub fn with_k_cap(mut self, k_cap: usize) -> Self {
        self.k_cap = k_cap.max(2);
        self
    }

    /// Parameter of the truncated exponential radius law.
    pub fn trunc_exp_param(&self) -> f64 {
        self.k_cap as f64
    }

    pub fn scale(&self, j: usize) -> f64 {
        self.tau.powi(-(j as i32))
    }
}

/// `ν̄(B(x,r)) >= (1-δ) ν̄(B(x,λr))`, and the inner ball carries positive mass.
pub fn is_heavy(m: &FiniteMetric, nu_bar: &PointMeasure, x: usize, r: f64, lambda: f64, delta: f64) -> bool {
    let inner = nu_bar.ball_mass(m, x, r);
    inner > HEAVY_MASS_FLOOR && inner >= (1.0 - delta) * nu_bar.ball_mass(m, x, lambda * r)
}

/// Coordinatewise average of replica measures.
pub fn annealed_measure(replicas: &[PointMeasure]) -> PointMeasure {
    PointMeasure::average(replicas)
}

/// Adds heavy centers to the level-`j` net, evicting nearby old centers, until every heavy
/// ball of radius `τ^{-j}/(2√λ)` has a net point within `τ^{-j}/√λ`. Returns a sorted net.
pub fn update_heavy_net(
    m: &FiniteMetric,
    prev: &[usize],
    nu_bar: &PointMeasure,
    j: usize,
    params: &EmbedderParams,
) -> Result<Vec<usize>> {
    let s = params.scale(j);
    let heavy_r = s / (2.0 * params.sqrt_lambda);
    let cover = s / params.sqrt_lambda;
    let evict = params.sqrt_lambda / 3.0 * s;
    let heavy: Vec<bool> =
        (0..m.n()).map(|x| is_heavy(m, nu_bar, x, heavy_r, params.lambda, params.delta_heavy)).collect();
    let mut net = prev.to_vec();
    let cap = 4 * m.n();
    for _ in 0..=cap {
        let next = (0..m.n()).find(|&x| heavy[x] && m.dist_to_set(x, net.iter().copied()) > cover);
        let Some(x) = next else {
            net.sort_unstable();
            return Ok(net);
        };
        net.retain(|&y| m.d(x, y) >= evict);
        net.push(x);
    }
    Err(Error::Internal(format!("heavy net at level {j} did not stabilize within {cap} insertions")))
}

/// Violations of separation and heavy coverage for a level-`j` net.
pub fn net_violations(
    m: &FiniteMetric,
    net: &[usize],
    nu_bar: &PointMeasure,
    j: usize,
    params: &EmbedderParams,
) -> Vec<String> {
    let s = params.scale(j);
    let mut out = Vec::new();
    for (a, &x) in net.iter().enumerate() {
        for &y in &net[a + 1..] {
            if m.d(x, y) <= 3.0 * s {
                out.push(format!("level {j}: net points {x} and {y} are {} apart", m.d(x, y)));
            }
        }
    }
    let heavy_r = s / (2.0 * params.sqrt_lambda);
    let cover = s / params.sqrt_lambda;
    for x in 0..m.n() {
        if is_heavy(m, nu_bar, x, heavy_r, params.lambda, params.delta_heavy)
            && m.dist_to_set(x, net.iter().copied()) > cover
        {
            out.push(format!("level {j}: heavy point {x} is not covered by the net"));
        }
    }
    out
}

/// Center sets, nets and the deletion stream shared by all replicas.
#[derive(Debug, Clone)]
pub struct SharedEmbedder {
    metric: Arc<FiniteMetric>,
    params: EmbedderParams,
    depth: usize,
    origin: usize,
    t: usize,
    centers: Vec<Vec<usize>>,
    nets: Vec<Vec<usize>>,
    nets_prev: Vec<Vec<usize>>,
    rng_del: ChaCha8Rng,
}

/// Everything the replicas need to know about one step of the shared state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedStep {
    pub t: usize,
    pub sigma: usize,
    /// Insertion indicator per level `1..=J`.
    pub indicators: Vec<bool>,
    /// Smallest level with an insertion, 0 if none.
    pub j_star: usize,
    /// Deleted center per level, if any.
    pub deleted: Vec<Option<usize>>,
    pub centers_prev: Vec<Vec<usize>>,
    pub centers_del: Vec<Vec<usize>>,
    pub centers: Vec<Vec<usize>>,
    /// Nets of the previous step, used for fusion.
    pub nets: Vec<Vec<usize>>,
    /// Nets of the step before, used for fission.
    pub nets_prev: Vec<Vec<usize>>,
}

/// Additions and removals made by one heavy-net update, per level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetUpdate {
    pub added: Vec<Vec<usize>>,
    pub removed: Vec<Vec<usize>>,
}

impl SharedEmbedder {
    /// Initial state: one center and one net point at `origin` on every level.
    pub fn new(metric: Arc<FiniteMetric>, params: EmbedderParams, depth: usize, origin: usize, seed_del: u64) -> Result<Self> {
        if origin >= metric.n() {
            return Err(Error::UnknownPoint(origin));
        }
        let init = vec![vec![origin]; depth];
        Ok(SharedEmbedder {
            metric,
            params,
            depth,
            origin,
            t: 0,
            centers: init.clone(),
            nets: init.clone(),
            nets_prev: init,
            rng_del: ChaCha8Rng::seed_from_u64(seed_del),
        })
    }

    pub fn params(&self) -> &EmbedderParams {
        &self.params
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn metric(&self) -> &FiniteMetric {
        &self.metric
    }

    /// Current centers per level, in carving order.
    pub fn centers(&self) -> &[Vec<usize>] {
        &self.centers
    }

    /// Current nets per level.
    pub fn nets(&self) -> &[Vec<usize>] {
        &self.nets
    }

    /// Nets one update earlier.
    pub fn nets_prev(&self) -> &[Vec<usize>] {
        &self.nets_prev
    }

    /// Computes indicators, deletions and insertions for request `sigma`.
    pub fn begin_step(&mut self, sigma: usize) -> Result<SharedStep> {
        let m = &self.metric;
        if sigma >= m.n() {
            return Err(Error::UnknownPoint(sigma));
        }
        self.t += 1;
        let mut indicators = Vec::with_capacity(self.depth);
        let mut deleted = Vec::with_capacity(self.depth);
        let centers_prev = self.centers.clone();
        let mut centers_del = Vec::with_capacity(self.depth);
        let mut centers = Vec::with_capacity(self.depth);
        for j in 1..=self.depth {
            let c = &self.centers[j - 1];
            let near = m.dist_to_set(sigma, c.iter().chain(&self.nets[j - 1]).copied());
            let ind = near > self.params.scale(j + 1);
            indicators.push(ind);
            let mut cd = c.clone();
            let mut del = None;
            if ind && cd.len() >= self.params.k_cap {
                let z = self.rng_del.gen_range(0..cd.len());
                del = Some(cd.remove(z));
            }
            deleted.push(del);
            let mut cn = cd.clone();
            if ind {
                cn.push(sigma);
            }
            centers_del.push(cd);
            centers.push(cn);
        }
        let j_star = indicators.iter().position(|&b| b).map_or(0, |i| i + 1);
        self.centers = centers.clone();
        Ok(SharedStep {
            t: self.t,
            sigma,
            indicators,
            j_star,
            deleted,
            centers_prev,
            centers_del,
            centers,
            nets: self.nets.clone(),
            nets_prev: self.nets_prev.clone(),
        })
    }

    /// Heavy-net maintenance from the annealed measure of the step just completed.
    pub fn update_nets(&mut self, nu_bar: &PointMeasure) -> Result<NetUpdate> {
        let mut fresh = Vec::with_capacity(self.depth);
        let mut added = Vec::with_capacity(self.depth);
        let mut removed = Vec::with_capacity(self.depth);
        for j in 1..=self.depth {
            let old = &self.nets[j - 1];
            let new = update_heavy_net(&self.metric, old, nu_bar, j, &self.params)?;
            added.push(new.iter().copied().filter(|x| !old.contains(x)).collect());
            removed.push(old.iter().copied().filter(|x| !new.contains(x)).collect());
            fresh.push(new);
        }
        self.nets_prev = std::mem::replace(&mut self.nets, fresh);
        Ok(NetUpdate { added, removed })
    }
}

/// Carving radii and the previous embedding of one replica.
#[derive(Debug, Clone)]
pub struct ReplicaEmbedder {
    radii: Vec<HashMap<usize, f64>>,
    rng_hst: ChaCha8Rng,
    p_hat: Vec<SemiPartition>,
    alpha: Embedding,
}

/// The per-replica outcome of one step.
#[derive(Debug, Clone)]
pub struct ReplicaStep {
    pub alpha_prev: Embedding,
    pub alpha_del: Embedding,
    pub alpha_fis: Embedding,
    pub alpha_pre: Embedding,
    pub alpha: Embedding,
    pub fusion: FusionMap,
    pub p_prev: Vec<SemiPartition>,
    pub p_del: Vec<SemiPartition>,
    pub p_hat: Vec<SemiPartition>,
    pub q_hat: Vec<SemiPartition>,
    pub fused_clusters: usize,
    pub unfused_cells: usize,
}

fn fusion_radius(params: &EmbedderParams, j: usize) -> f64 {
    2.0 * params.scale(j + 1)
}

fn carve_level(m: &FiniteMetric, centers: &[usize], radii: &HashMap<usize, f64>) -> Result<SemiPartition> {
    let r = centers
        .iter()
        .map(|c| radii.get(c).copied().ok_or_else(|| Error::Internal(format!("center {c} has no radius"))))
        .collect::<Result<Vec<_>>>()?;
    carve(&CarveSpec { centers: centers.to_vec(), radii: r }, m)
}

fn fuse_all(m: &FiniteMetric, ps: &[SemiPartition], nets: &[Vec<usize>], params: &EmbedderParams) -> Result<Vec<SemiPartition>> {
    ps.iter()
        .zip(nets)
        .enumerate()
        .map(|(i, (p, net))| Ok(fuse_semipartition(m, p, net, fusion_radius(params, i + 1))?.q))
        .collect()
}

impl ReplicaEmbedder {
    /// Samples the initial radii and builds the initial embedding.
    pub fn new(hst: &mut Hst, shared: &SharedEmbedder, seed_hst: u64) -> Result<Self> {
        let params = &shared.params;
        let m = shared.metric.clone();
        if hst.depth() != shared.depth {
            return Err(Error::InvalidConfig("tree depth differs from the shared state".into()));
        }
        let mut rng_hst = ChaCha8Rng::seed_from_u64(seed_hst);
        let mut radii = Vec::with_capacity(shared.depth);
        let mut p_hat = Vec::with_capacity(shared.depth);
        for j in 1..=shared.depth {
            let r = params.scale(j + 1) + sample_trunc_exp(params.tau, (j + 1) as i32, params.trunc_exp_param(), &mut rng_hst);
            let map: HashMap<usize, f64> = shared.centers[j - 1].iter().map(|&c| (c, r)).collect();
            p_hat.push(carve_level(&m, &shared.centers[j - 1], &map)?);
            radii.push(map);
        }
        let q = fuse_all(&m, &p_hat, &shared.nets, params)?;
        let alpha = refine_and_embed(hst, &q)?;
        Ok(ReplicaEmbedder { radii, rng_hst, p_hat, alpha })
    }

    /// Embedding of the last completed step.
    pub fn alpha(&self) -> &Embedding {
        &self.alpha
    }

    /// Carved semi-partitions of the last completed step.
    pub fn p_hat(&self) -> &[SemiPartition] {
        &self.p_hat
    }

    /// Runs deletions, fission, insertion and fusion for one request.
    pub fn step(&mut self, hst: &mut Hst, s: &SharedStep, params: &EmbedderParams) -> Result<ReplicaStep> {
        let m = hst.metric_arc().clone();
        let depth = hst.depth();
        let sigma = s.sigma;
        let mut p_del = Vec::with_capacity(depth);
        let mut p_hat = Vec::with_capacity(depth);
        let mut q_fis = Vec::with_capacity(depth);
        let mut q_pre = Vec::with_capacity(depth);
        for j in 1..=depth {
            let l = j - 1;
            if let Some(z) = s.deleted[l] {
                self.radii[l].remove(&z);
            }
            let pd = carve_level(&m, &s.centers_del[l], &self.radii[l])?;
            if s.indicators[l] {
                let z = sample_trunc_exp(params.tau, (j + 1) as i32, params.trunc_exp_param(), &mut self.rng_hst);
                self.radii[l].insert(sigma, params.scale(j + 1) + z);
            }
            let pt = carve_level(&m, &s.centers[l], &self.radii[l])?;
            let r = fusion_radius(params, j);
            let survivors: Vec<usize> = s.nets[l].iter().copied().filter(|x| s.nets_prev[l].contains(x)).collect();
            let fis = fuse_semipartition(&m, &pd, &survivors, r)?.q;
            let mut cells: Vec<PointSet> = fis.cells().to_vec();
            let mut covered = fis.covered();
            for &x in s.nets[l].iter().filter(|x| !s.nets_prev[l].contains(x)) {
                let mut ball = m.ball(x, r);
                ball.difference_with(&covered);
                covered.union_with(&ball);
                cells.push(ball);
            }
            if let Some(cell) = pt.cell_containing(sigma) {
                let mut c = cell.clone();
                c.difference_with(&covered);
                cells.push(c);
            }
            q_pre.push(SemiPartition::from_cells(m.n(), cells)?);
            q_fis.push(fis);
            p_del.push(pd);
            p_hat.push(pt);
        }
        let q_del = fuse_all(&m, &p_del, &s.nets, params)?;
        let mut fused_clusters = 0;
        let mut unfused_cells = 0;
        let mut q_hat = Vec::with_capacity(depth);
        for (l, p) in p_hat.iter().enumerate() {
            let f = fuse_semipartition(&m, p, &s.nets[l], fusion_radius(params, l + 1))?;
            fused_clusters += f.clusters.len();
            unfused_cells += f.q.len() - f.clusters.len();
            q_hat.push(f.q);
        }
        let alpha_del = refine_and_embed(hst, &q_del)?;
        let alpha_fis = refine_and_embed(hst, &q_fis)?;
        let alpha_pre = refine_and_embed(hst, &q_pre)?;
        let alpha = refine_and_embed(hst, &q_hat)?;
        let fusion = fusion_map(hst, &alpha_pre, &alpha)?;
        let alpha_prev = std::mem::replace(&mut self.alpha, alpha.clone());
        let p_prev = std::mem::replace(&mut self.p_hat, p_hat.clone());
        Ok(ReplicaStep {
            alpha_prev,
            alpha_del,
            alpha_fis,
            alpha_pre,
            alpha,
            fusion,
            p_prev,
            p_del,
            p_hat,
            q_hat,
            fused_clusters,
            unfused_cells,
        })
    }
}

/// Builds the fusion map taking the chains of `pre` onto those of `post`, level by level.
/// At each level every pre-fused vertex is injected into the 0-decorated vertex of its fused
/// cell; deeper chains follow the injection. Fails unless `pre` refines `post` level by level.
pub fn fusion_map(hst: &mut Hst, pre: &Embedding, post: &Embedding) -> Result<FusionMap> {
    let n = pre.leaves.len();
    let mut cur = pre.leaves.clone();
    let mut f = FusionMap::identity();
    for j in 1..=hst.depth() {
        let mut done: HashSet<NodeId> = HashSet::new();
        for x in 0..n {
            let target = hst.ancestor(post.leaves[x], j);
            let source = hst.ancestor(cur[x], j);
            if source == target || done.contains(&source) {
                continue;
            }
            let inj = hst.canonical_injection(source, target)?;
            for y in 0..n {
                if hst.ancestor(cur[y], j) == source {
                    cur[y] = hst.inject(&inj, cur[y]);
                }
            }
            done.insert(source);
            f.push(inj);
        }
    }
    if cur != post.leaves {
        return Err(Error::Internal("fusion map does not reproduce the fused embedding".into()));
    }
    Ok(f)
}

/// Structural violations of one replica step: cell diameters, super-paddedness around the
/// fusion nets, 0-decoration of the request, identity of bottoms, and the fusion identity.
pub fn step_violations(hst: &mut Hst, s: &SharedStep, r: &ReplicaStep, params: &EmbedderParams) -> Vec<String> {
    let m = hst.metric_arc().clone();
    let mut out = Vec::new();
    for (l, q) in r.q_hat.iter().enumerate() {
        let j = l + 1;
        if !q.is_bounded(&m, params.scale(j)) {
            out.push(format!("t={} level {j}: cell diameter {} exceeds scale", s.t, q.max_diameter(&m)));
        }
        let pad = params.scale(j + 1);
        for x in 0..m.n() {
            if m.dist_to_set(x, s.nets[l].iter().copied()) > pad {
                continue;
            }
            let ball = m.ball(x, pad);
            match q.cell_containing(x) {
                Some(c) if ball.is_subset(c) => {}
                _ => out.push(format!("t={} level {j}: ball around {x} is not inside its cell", s.t)),
            }
        }
    }
    if !hst.is_zero_decorated(r.alpha.leaf(s.sigma)) {
        out.push(format!("t={}: request {} embeds to a decorated leaf", s.t, s.sigma));
    }
    for x in 0..m.n() {
        let leaf = r.alpha.leaf(x);
        if !hst.is_leaf(leaf) || hst.bottom(leaf).count_ones(..) != 1 || hst.beta(leaf) != x {
            out.push(format!("t={}: leaf of {x} does not have bottom {{{x}}}", s.t));
        }
        if hst.apply_to_node(&r.fusion, r.alpha_pre.leaf(x)) != leaf {
            out.push(format!("t={}: fusion map does not carry the pre-fused leaf of {x}", s.t));
        }
    }
    out
}
