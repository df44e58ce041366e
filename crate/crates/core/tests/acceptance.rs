//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero on any failure.
//!
//! Oracles and invariant checkers here are written independently of the library code they
//! check; library entry points are only used to produce the values under test.

mod common;

use common::{containing_sibling, dyadic_measure, random_fusion, random_tree, TAU};
use kserver_core::embedder::{EmbedderParams, ReplicaEmbedder, ReplicaStep, SharedEmbedder, SharedStep};
use kserver_core::harness::{offline_opt_mcf, run, Adversary, AdversaryKind, ExperimentConfig, JsonlSink, NullSink, RunReport};
use kserver_core::hst::{FusionMap, Hst, NodeId, TreeMeasure};
use kserver_core::instrumentation::{psi_a, psi_f};
use kserver_core::metric::{FiniteMetric, MetricKind, PointMeasure, PointSet};
use kserver_core::partition::{carve, fuse_semipartition, sample_trunc_exp, CarveSpec, SemiPartition};
use kserver_core::rounding::{fuse_couple, RoundingState};
use kserver_core::solver::{lambda_eps, phi, push_down, service_exposed, SolverParams, ZConfig};
use kserver_core::transport::{w1_hst, w1_with};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn main() {
    let mut ctx = Ctx::new();
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 12] = [
        ("tree transport matches min-cost flow", c01_tree_transport),
        ("fusion invariance of pushforward and potentials", c02_fusion_invariance),
        ("embedder structural invariants", c03_embedder_invariants),
        ("active scale bound", c04_active_scales),
        ("cut probability of carvings", c05_cut_probability),
        ("rounding balance, couplings and overhead", c06_rounding),
        ("solver potential suite", c07_solver_potential),
        ("configuration feasibility preserved", c08_feasibility),
        ("offline optimum matches brute force", c09_offline_oracle),
        ("servicing and isolation accounting", c10_servicing_isolation),
        ("competitive ratio trend on cruel paging", c11_ratio_trend),
        ("replay determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = f(&mut ctx);
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if let Err(e) = ctx.archive() {
        println!("could not archive reports: {e}");
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------------------------
// Shared state: the benchmark suite and the instrumented pipeline run.

struct Bench {
    name: String,
    report: RunReport,
    secs: f64,
}

#[derive(Serialize)]
struct Archived<'a> {
    name: &'a str,
    secs: f64,
    report: &'a RunReport,
}

struct Ctx {
    dir: PathBuf,
    suite: Option<Vec<Bench>>,
    pipeline: Option<Result<PipelineStats, String>>,
}

impl Ctx {
    fn new() -> Self {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        std::fs::create_dir_all(&dir).expect("create archive directory");
        Ctx { dir, suite: None, pipeline: None }
    }

    fn suite(&mut self) -> Result<&[Bench], String> {
        if self.suite.is_none() {
            let mut out = Vec::new();
            for (name, cfg) in benchmark_configs(&self.dir)? {
                let start = Instant::now();
                let report = run(&cfg, &mut NullSink).map_err(|e| format!("{name}: {e}"))?;
                out.push(Bench { name, report, secs: start.elapsed().as_secs_f64() });
            }
            self.suite = Some(out);
        }
        Ok(self.suite.as_deref().expect("suite was just built"))
    }

    /// The instrumented replay of the line benchmark and of the clustered trace.
    fn pipeline(&mut self) -> Result<&PipelineStats, String> {
        if self.pipeline.is_none() {
            let line = ExperimentConfig {
                metric: MetricKind::Line,
                n: 64,
                k: 4,
                replicas: 8,
                horizon: 2000,
                adversary: AdversaryKind::CircleSweep,
                ..ExperimentConfig::default()
            };
            let (path, trace) = clustered_instance(&self.dir)?;
            let clustered = ExperimentConfig {
                n: 10,
                metric_file: Some(path),
                k: 2,
                replicas: 8,
                horizon: trace.len(),
                adversary: AdversaryKind::Trace,
                trace: Some(trace),
                ..ExperimentConfig::default()
            };
            let mut st = PipelineStats::default();
            let out = instrumented_pipeline(&line, &mut st).and_then(|_| instrumented_pipeline(&clustered, &mut st));
            self.pipeline = Some(out.map(|_| st));
        }
        self.pipeline.as_ref().expect("pipeline was just run").as_ref().map_err(Clone::clone)
    }

    fn both(&mut self) -> Result<(&PipelineStats, &[Bench]), String> {
        self.suite()?;
        self.pipeline()?;
        let p = self.pipeline.as_ref().and_then(|p| p.as_ref().ok()).expect("pipeline succeeded");
        Ok((p, self.suite.as_deref().expect("suite built")))
    }

    fn archive(&self) -> Result<(), String> {
        let Some(suite) = &self.suite else { return Ok(()) };
        let rows: Vec<Archived> = suite.iter().map(|b| Archived { name: &b.name, secs: b.secs, report: &b.report }).collect();
        let path = self.dir.join("benchmark_reports.json");
        std::fs::write(&path, serde_json::to_string_pretty(&rows).map_err(err)?).map_err(err)?;
        println!("benchmark reports archived at {}", path.display());
        Ok(())
    }
}

/// Ten points on a line in two nearby clusters plus far points, with a request trace that
/// alternates between the clusters so heavy nets appear next to existing cells.
fn clustered_instance(dir: &Path) -> Result<(PathBuf, Vec<usize>), String> {
    let xs: [i64; 10] = [0, 1000, 200, 300, 900, 700, 701, 702, 710, 712];
    let dist: Vec<f64> = xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).abs() as f64)).collect();
    let path = dir.join("clustered_metric.json");
    let json = serde_json::json!({ "n": xs.len(), "dist": dist });
    std::fs::write(&path, json.to_string()).map_err(err)?;
    let mut trace = Vec::new();
    for _ in 0..20 {
        trace.push(8);
        for _ in 0..10 {
            trace.extend([5, 6, 7]);
        }
        trace.extend([9, 2, 3]);
    }
    Ok((path, trace))
}

fn benchmark_configs(dir: &Path) -> Result<Vec<(String, ExperimentConfig)>, String> {
    let base = ExperimentConfig { check: true, ..ExperimentConfig::default() };
    let mut out = vec![(
        "line64_sweep".to_string(),
        ExperimentConfig { metric: MetricKind::Line, n: 64, k: 4, replicas: 8, horizon: 2000, ..base.clone() },
    )];
    for k in [2, 4, 8, 16] {
        out.push((
            format!("uniform_cruel_k{k}"),
            ExperimentConfig {
                metric: MetricKind::Uniform,
                n: k + 1,
                k,
                replicas: 32,
                horizon: 2000,
                adversary: AdversaryKind::PagingCruel,
                ..base.clone()
            },
        ));
    }
    out.push((
        "random32_random".to_string(),
        ExperimentConfig {
            metric: MetricKind::Random,
            n: 32,
            k: 3,
            replicas: 8,
            horizon: 500,
            adversary: AdversaryKind::Random,
            ..base.clone()
        },
    ));
    out.push((
        "circle48_sweep".to_string(),
        ExperimentConfig { metric: MetricKind::Circle, n: 48, k: 6, replicas: 8, horizon: 500, ..base.clone() },
    ));
    out.push((
        "expander32_random".to_string(),
        ExperimentConfig {
            metric: MetricKind::Expander { degree: 4 },
            n: 32,
            k: 4,
            replicas: 8,
            horizon: 500,
            adversary: AdversaryKind::Random,
            ..base.clone()
        },
    ));
    let (path, trace) = clustered_instance(dir)?;
    out.push((
        "clustered_trace".to_string(),
        ExperimentConfig {
            n: 10,
            metric_file: Some(path),
            k: 2,
            replicas: 8,
            horizon: trace.len(),
            adversary: AdversaryKind::Trace,
            trace: Some(trace),
            ..base
        },
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------------------------
// Independent checkers.

/// Subtree masses accumulated along root paths.
fn subtree_sums(hst: &Hst, mu: &TreeMeasure) -> HashMap<NodeId, f64> {
    let mut out = HashMap::new();
    for (&v, &m) in mu.iter() {
        for a in hst.path(v) {
            *out.entry(a).or_insert(0.0) += m;
        }
    }
    out
}

/// Vertices where the integral subtree count leaves `[⌊m⌋, ⌈m⌉]`, plus non-integral entries.
fn unbalanced(hst: &Hst, integral: &TreeMeasure, fractional: &TreeMeasure) -> usize {
    let bad_entries = integral.iter().filter(|(_, &m)| m.fract() != 0.0 || m < 0.0).count();
    let c = subtree_sums(hst, integral);
    let f = subtree_sums(hst, fractional);
    let mut bad = bad_entries;
    for v in c.keys().chain(f.keys()) {
        let have = c.get(v).copied().unwrap_or(0.0);
        let m = f.get(v).copied().unwrap_or(0.0);
        if have < (m - 1e-9).floor() || have > (m + 1e-9).ceil() {
            bad += 1;
        }
    }
    bad
}

/// Constraint violations of the feasible configuration set.
fn kdelta_issues(hst: &Hst, sp: &SolverParams, z: &ZConfig) -> Vec<String> {
    const TOL: f64 = 1e-9;
    let zmax = 1.0 / (1.0 - sp.delta);
    let x_of = |v: f64| 1.0 - (1.0 - sp.delta) * v;
    let mut out = Vec::new();
    let root = hst.root();
    let rl = z.list(root);
    if rl.len() != sp.k || rl.iter().any(|&v| (v - zmax).abs() > TOL) {
        out.push(format!("root list {rl:?}"));
    }
    let nodes: Vec<NodeId> = z.nodes().collect();
    let mut children: HashMap<NodeId, Vec<f64>> = HashMap::new();
    let mut leaf_total = 0.0;
    for &v in &nodes {
        let l = z.list(v);
        if l.iter().any(|&e| e < -TOL || e > zmax + TOL) {
            out.push(format!("vertex {v}: entry out of range"));
        }
        if l.windows(2).any(|w| w[0] < w[1]) {
            out.push(format!("vertex {v}: unsorted list"));
        }
        if hst.is_leaf(v) {
            let s: f64 = l.iter().sum();
            leaf_total += s;
            if s > 1.0 + TOL {
                out.push(format!("leaf {v} holds {s}"));
            }
        }
        if let Some(p) = hst.parent(v) {
            if z.list(p).is_empty() {
                out.push(format!("vertex {v} has mass but its parent {p} has none"));
            }
            children.entry(p).or_default().extend_from_slice(l);
        }
    }
    for &v in &nodes {
        if hst.is_leaf(v) {
            continue;
        }
        let l = z.list(v);
        let mut ch = children.remove(&v).unwrap_or_default();
        ch.sort_by(|a, b| b.total_cmp(a));
        let own: f64 = l.iter().sum();
        let below: f64 = ch.iter().sum();
        if (own - below).abs() > TOL {
            out.push(format!("vertex {v}: mass {own} but children carry {below}"));
        }
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for s in 0..l.len().max(ch.len()) {
            lhs += x_of(l.get(s).copied().unwrap_or(0.0));
            rhs += x_of(ch.get(s).copied().unwrap_or(0.0));
            if lhs > rhs + TOL {
                out.push(format!("vertex {v}: prefix {} not majorized", s + 1));
                break;
            }
        }
    }
    if (leaf_total - (sp.k as f64 + sp.eps)).abs() > TOL {
        out.push(format!("leaf mass {leaf_total}, expected k + ε"));
    }
    out
}

fn set_diameter(m: &FiniteMetric, s: &PointSet) -> f64 {
    let pts: Vec<usize> = s.ones().collect();
    let mut d: f64 = 0.0;
    for (i, &a) in pts.iter().enumerate() {
        for &b in &pts[i + 1..] {
            d = d.max(m.d(a, b));
        }
    }
    d
}

fn dist_to(m: &FiniteMetric, x: usize, set: &[usize]) -> f64 {
    set.iter().map(|&c| m.d(x, c)).fold(f64::INFINITY, f64::min)
}

fn ball_mass(m: &FiniteMetric, nu: &PointMeasure, x: usize, r: f64) -> f64 {
    (0..m.n()).filter(|&y| m.d(x, y) <= r).map(|y| nu.get(y)).sum()
}

fn embedder_issues(hst: &Hst, s: &SharedStep, r: &ReplicaStep, tau: f64) -> Vec<String> {
    let m = hst.metric();
    let mut out = Vec::new();
    for (l, q) in r.q_hat.iter().enumerate() {
        let j = (l + 1) as i32;
        for c in q.cells() {
            if set_diameter(m, c) > tau.powi(-j) + 1e-12 {
                out.push(format!("t={} level {j}: cell diameter {}", s.t, set_diameter(m, c)));
            }
        }
        let pad = tau.powi(-j - 1);
        for x in 0..m.n() {
            if dist_to(m, x, &s.nets[l]) > pad {
                continue;
            }
            let inside = q.cell_containing(x).is_some_and(|c| (0..m.n()).all(|y| m.d(x, y) > pad || c.contains(y)));
            if !inside {
                out.push(format!("t={} level {j}: padding ball of {x} is cut", s.t));
            }
        }
    }
    let sigma_leaf = r.alpha.leaf(s.sigma);
    if hst.path(sigma_leaf).iter().skip(1).any(|&v| hst.decoration(v) != 0) {
        out.push(format!("t={}: request leaf is decorated", s.t));
    }
    for x in 0..m.n() {
        let leaf = r.alpha.leaf(x);
        let b = hst.bottom(leaf);
        if !hst.is_leaf(leaf) || b.count_ones(..) != 1 || !b.contains(x) {
            out.push(format!("t={}: leaf of {x} has the wrong bottom", s.t));
        }
    }
    out
}

fn net_issues(m: &FiniteMetric, nets: &[Vec<usize>], nu_bar: &PointMeasure, ep: &EmbedderParams) -> Vec<String> {
    let mut out = Vec::new();
    for (l, net) in nets.iter().enumerate() {
        let s = ep.tau.powi(-((l + 1) as i32));
        for (i, &a) in net.iter().enumerate() {
            for &b in &net[i + 1..] {
                if m.d(a, b) <= 3.0 * s {
                    out.push(format!("level {}: net points {a}, {b} too close", l + 1));
                }
            }
        }
        let r = s / (2.0 * ep.lambda.sqrt());
        for x in 0..m.n() {
            let inner = ball_mass(m, nu_bar, x, r);
            let heavy = inner > 1e-12 && inner >= (1.0 - ep.delta_heavy) * ball_mass(m, nu_bar, x, ep.lambda * r);
            if heavy && dist_to(m, x, net) > s / ep.lambda.sqrt() {
                out.push(format!("level {}: heavy point {x} uncovered", l + 1));
            }
        }
    }
    out
}

/// Smallest distance at which the closed ball around `x` holds half a unit of `ν`.
fn half_mass_radius(m: &FiniteMetric, x: usize, nu: &PointMeasure) -> f64 {
    let mut ds: Vec<f64> = (0..m.n()).map(|y| m.d(x, y)).collect();
    ds.sort_by(f64::total_cmp);
    ds.into_iter().find(|&r| ball_mass(m, nu, x, r) >= 0.5).unwrap_or(f64::INFINITY)
}

fn scale_count(m: &FiniteMetric, x: usize, rho: f64, nets: &[Vec<usize>], ep: &EmbedderParams) -> usize {
    (1..=nets.len() + 1)
        .filter(|&j| {
            let sc = ep.tau.powi(-(j as i32));
            let far = j == 1 || dist_to(m, x, &nets[j - 2]) >= 0.5 * sc / ep.tau;
            sc > ep.eta * rho && far
        })
        .count()
}

fn scale_bound(ep: &EmbedderParams) -> f64 {
    let k = ep.k as f64;
    (2.0 * k).ln() / -(1.0 - ep.delta_heavy).ln() + (1.0 / ep.eta).ln() / ep.tau.ln() + 2.0
}

// ---------------------------------------------------------------------------------------------
// The pipeline, replayed with every intermediate state checked.

#[derive(Default, Debug)]
struct PipelineStats {
    replica_steps: usize,
    fusions: usize,
    embedder: Vec<String>,
    nets: Vec<String>,
    kdelta_checks: usize,
    kdelta: Vec<String>,
    balance_checks: usize,
    balance: usize,
    servicing: usize,
    scale_samples: usize,
    scale_max: usize,
    /// Largest ratio of active scale count to its bound.
    scale_worst: f64,
}

struct PipeReplica {
    hst: Hst,
    emb: ReplicaEmbedder,
    z: ZConfig,
    mu: TreeMeasure,
    rounding: RoundingState,
}

fn instrumented_pipeline(cfg: &ExperimentConfig, st: &mut PipelineStats) -> Result<(), String> {
    let m = Arc::new(cfg.build_metric().map_err(err)?);
    let ep = cfg.embedder_params().map_err(err)?;
    let sp = cfg.solver_params().map_err(err)?;
    let base = Hst::new(m.clone(), cfg.tau).map_err(err)?;
    let mut shared = SharedEmbedder::new(m.clone(), ep.clone(), base.depth(), cfg.origin, cfg.deletion_seed()).map_err(err)?;
    let mut reps = Vec::with_capacity(cfg.replicas);
    for id in 0..cfg.replicas {
        let mut hst = base.clone();
        let emb = ReplicaEmbedder::new(&mut hst, &shared, cfg.hst_seed(id)).map_err(err)?;
        let l0 = emb.alpha().leaf(cfg.origin);
        let z = ZConfig::initial(&mut hst, &sp, l0).map_err(err)?;
        let mu = TreeMeasure::dirac(l0, cfg.k as f64);
        let rounding = RoundingState::new(cfg.k, mu.clone(), cfg.rounding_seed(id)).map_err(err)?;
        reps.push(PipeReplica { hst, emb, z, mu, rounding });
    }
    let requests = Adversary::new(cfg.adversary, cfg.metric, &m, cfg.k, cfg.adversary_seed(), cfg.trace.as_deref())
        .and_then(|mut a| a.stream(cfg.horizon))
        .map_err(err)?;
    let bound = scale_bound(&ep);
    let mut nu_bar = PointMeasure::dirac(m.n(), cfg.origin, cfg.k as f64);
    let mut sample_rng = rng(77);
    for (i, &sigma) in requests.iter().enumerate() {
        let t = i + 1;
        let s = shared.begin_step(sigma).map_err(err)?;
        if t % 10 == 0 {
            for x in [sigma, sample_rng.gen_range(0..m.n())] {
                let c = scale_count(&m, x, half_mass_radius(&m, x, &nu_bar), &s.nets, &ep);
                st.scale_samples += 1;
                st.scale_max = st.scale_max.max(c);
                st.scale_worst = st.scale_worst.max(c as f64 / bound);
            }
        }
        let mut nus = Vec::with_capacity(reps.len());
        for rep in &mut reps {
            let hst = &mut rep.hst;
            let r = rep.emb.step(hst, &s, &ep).map_err(err)?;
            st.replica_steps += 1;
            st.fusions += usize::from(!r.fusion.is_identity());
            st.embedder.extend(embedder_issues(hst, &s, &r, cfg.tau));
            let mut z = rep.z.clone();
            for inj in &r.fusion.injections {
                z = z.primitive_fuse(hst, inj.source, inj.target).map_err(err)?;
                st.kdelta_checks += 1;
                st.kdelta.extend(kdelta_issues(hst, &sp, &z));
            }
            let mu_fused = hst.apply_fusion(&r.fusion, &rep.mu);
            let leaf = r.alpha.leaf(sigma);
            let (z_next, _) = z.reference_transition(hst, &sp, leaf).map_err(err)?;
            st.kdelta_checks += 1;
            st.kdelta.extend(kdelta_issues(hst, &sp, &z_next));
            let mu_z = z_next.leaf_measure(hst);
            let target = push_down(hst, &lambda_eps(hst, &mu_z, sp.eps).map_err(err)?, &mu_z).map_err(err)?;
            let (mu_next, _) = service_exposed(hst, &mu_fused, &target, leaf).map_err(err)?;
            rep.rounding.advance(hst, &r.fusion, &mu_fused, &mu_next, t).map_err(err)?;
            st.balance_checks += 1;
            st.balance += unbalanced(hst, rep.rounding.mu_hat(), &mu_next);
            if hst.beta_pushforward(rep.rounding.mu_hat()).get(sigma) < 1.0 {
                st.servicing += 1;
            }
            nus.push(hst.beta_pushforward(&mu_next));
            rep.z = z_next;
            rep.mu = mu_next;
        }
        nu_bar = PointMeasure::average(&nus);
        shared.update_nets(&nu_bar).map_err(err)?;
        st.nets.extend(net_issues(&m, shared.nets(), &nu_bar, &ep).into_iter().map(|x| format!("t={t}: {x}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// Generators.

/// `units` masses of 1/8 spread over `support`.
fn unit_measure<R: Rng>(support: &[NodeId], units: u32, rng: &mut R) -> TreeMeasure {
    let mut mu = TreeMeasure::new();
    for _ in 0..units {
        mu.add(*support.choose(rng).expect("nonempty support"), 0.125);
    }
    mu
}

/// Masses in `[0, 1]` on `count` slots summing to `total < count`.
fn capped_masses<R: Rng>(count: usize, total: f64, rng: &mut R) -> Vec<f64> {
    let u: Vec<f64> = (0..count).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum_at = |c: f64| u.iter().map(|&v| (c * v).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut m: Vec<f64> = u.iter().map(|&v| (lo * v).min(1.0)).collect();
    let diff = total - m.iter().sum::<f64>();
    let slot = (0..count).find(|&i| m[i] + diff <= 1.0 && m[i] + diff >= 0.0).expect("some slot absorbs round-off");
    m[slot] += diff;
    m
}

/// A random configuration of `k + ε` mass over the leaves, with an integral `θ` of `k` units.
fn random_config<R: Rng>(rng: &mut R) -> (Hst, Vec<NodeId>, SolverParams, ZConfig, TreeMeasure) {
    let k = rng.gen_range(1..=3);
    let count = rng.gen_range(k + 1..=9);
    let (hst, leaves) = random_tree(12, count, rng);
    let sp = SolverParams::new(k, TAU, 1.0).expect("valid solver params");
    let masses = capped_masses(count, k as f64 + sp.eps, rng);
    let mu = TreeMeasure::from_pairs(leaves.iter().copied().zip(masses));
    let z = ZConfig::from_leaf_masses(&hst, &sp, &mu).expect("leaf masses form a configuration");
    let mut theta = TreeMeasure::new();
    for _ in 0..k {
        theta.add(*leaves.choose(rng).expect("leaves"), 1.0);
    }
    (hst, leaves, sp, z, theta)
}

// ---------------------------------------------------------------------------------------------
// Criteria.

fn c01_tree_transport(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let trials = 300;
    for trial in 0..trials {
        let count = r.gen_range(2..=12);
        let (hst, leaves) = random_tree(16, count, &mut r);
        // Every third instance also places mass on internal vertices.
        let mut support = leaves.clone();
        if trial % 3 == 0 {
            for &l in &leaves {
                support.push(hst.ancestor(l, r.gen_range(1..=hst.depth())));
            }
            support.sort_unstable();
            support.dedup();
        }
        let units = r.gen_range(1..=40);
        let mu = unit_measure(&support, units, &mut r);
        let nu = unit_measure(&support, units, &mut r);
        let fast = w1_hst(&hst, &mu, &nu).map_err(err)?;
        let dense = |x: &TreeMeasure| support.iter().map(|&v| x.get(v)).collect::<Vec<_>>();
        let oracle = w1_with(|a, b| hst.dist(support[a], support[b]), &dense(&mu), &dense(&nu)).map_err(err)?.cost;
        worst = worst.max((fast - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-9, "largest gap {worst:e} over {trials} trees");
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("{trials} trees, largest gap {worst:e}"))
}

fn c02_fusion_invariance(_: &mut Ctx) -> Outcome {
    let mut r = rng(2);
    let ep = EmbedderParams::new(2, TAU, 1.0).map_err(err)?;
    let trials = 1000;
    let mut nontrivial = 0;
    for _ in 0..trials {
        let count = r.gen_range(2..=10);
        let (mut hst, leaves) = random_tree(12, count, &mut r);
        let f = random_fusion(&mut hst, &leaves, &mut r);
        let mu = dyadic_measure(&leaves, &mut r);
        let pushed = hst.apply_fusion(&f, &mu);
        nontrivial += usize::from(pushed != mu);
        ensure!(hst.beta_pushforward(&pushed) == hst.beta_pushforward(&mu), "pushforward changed under fusion");

        let m = hst.metric_arc().clone();
        let n = m.n();
        let depth = hst.depth();
        let rho_hat: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..64u32)) / 1024.0).collect();
        let pick = |r: &mut ChaCha8Rng, max: usize| -> Vec<usize> {
            let c = r.gen_range(0..=max);
            (0..c).map(|_| r.gen_range(0..n)).collect()
        };
        let centers: Vec<Vec<usize>> = (0..depth).map(|_| pick(&mut r, 4)).collect();
        let nets: Vec<Vec<usize>> = (0..depth).map(|_| pick(&mut r, 1)).collect();
        let ps: Vec<SemiPartition> = (1..=depth)
            .map(|j| {
                let cs = pick(&mut r, 4);
                let radii = cs
                    .iter()
                    .map(|_| TAU.powi(-(j as i32) - 1) + sample_trunc_exp(TAU, j as i32 + 1, 5.0, &mut r))
                    .collect();
                carve(&CarveSpec { centers: cs, radii }, &m)
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let a0 = psi_a(&hst, &mu, &rho_hat, &centers, &nets, &ep);
        let a1 = psi_a(&hst, &pushed, &rho_hat, &centers, &nets, &ep);
        ensure!(a0 == a1, "anchor potential moved from {a0} to {a1}");
        let f0 = psi_f(&hst, &mu, &ps, &nets, &ep).map_err(err)?;
        let f1 = psi_f(&hst, &pushed, &ps, &nets, &ep).map_err(err)?;
        ensure!(f0 == f1, "fusion potential moved from {f0} to {f1}");
    }
    Ok(format!("{trials} random fusions ({nontrivial} moved mass), all equalities exact"))
}

fn c03_embedder_invariants(ctx: &mut Ctx) -> Outcome {
    let suite = ctx.suite()?;
    let b1 = &suite[0];
    let v = &b1.report.violations;
    ensure!(v.embedder == 0 && v.nets == 0, "library checks on {}: {:?}", b1.name, v.messages);
    let p = ctx.pipeline()?;
    ensure!(p.embedder.is_empty(), "{} embedder violations, first {:?}", p.embedder.len(), p.embedder.first());
    ensure!(p.nets.is_empty(), "{} net violations, first {:?}", p.nets.len(), p.nets.first());
    Ok(format!(
        "{} replica steps checked independently, {} with nontrivial fusion; library checks clean",
        p.replica_steps, p.fusions
    ))
}

fn c04_active_scales(ctx: &mut Ctx) -> Outcome {
    let (p, suite) = ctx.both()?;
    ensure!(p.scale_samples >= 100, "only {} samples", p.scale_samples);
    ensure!(p.scale_worst <= 1.0, "active scale count reaches {} times its bound", p.scale_worst);
    let mut worst = String::new();
    for b in suite {
        let cfg = &b.report.config;
        let bound = scale_bound(&cfg.embedder_params().map_err(err)?);
        let s = &b.report.active_scales;
        ensure!(s.samples >= 100, "{}: only {} samples", b.name, s.samples);
        ensure!((s.max as f64) <= bound && b.report.violations.active_scales == 0, "{}: {} scales, bound {bound}", b.name, s.max);
        worst = format!("{worst}{}={}/{:.1} ", b.name, s.max, bound);
    }
    Ok(format!(
        "pipeline max {} (max count/bound {:.3}) over {} samples; runs (max/bound): {}",
        p.scale_max,
        p.scale_worst,
        p.scale_samples,
        worst.trim_end()
    ))
}

/// Line metric from integer coordinates on a power-of-two span, so distances are exact.
fn integer_line(pos: &[i64]) -> Result<FiniteMetric, String> {
    let rows = pos.iter().map(|a| pos.iter().map(|b| (a - b).abs() as f64).collect()).collect();
    FiniteMetric::from_matrix(rows).map_err(err)
}

fn c05_cut_probability(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let span: i64 = 1 << 24;
    let trials = 10_000;
    let mut cases = 0;
    let mut tightest: f64 = 0.0;
    for j in [1i32, 2] {
        let unit = TAU.powi(-j - 1) * span as f64;
        for csize in [1usize, 3, 8] {
            for dfac in [0.01, 0.05, 0.1] {
                for fused in [false, true] {
                    let x = span / 2;
                    let y = x + (dfac * unit).round() as i64;
                    let mut pos = vec![0, span, x, y];
                    // The first center is within one unit of x, or in the fused variant a net point is.
                    // Other centers spread out to where carving radii can fall between x and y.
                    while pos.len() < 4 + csize {
                        let (lo, hi) = if pos.len() == 4 && !fused { (0.5, 1.0) } else { (0.5, 2.2) };
                        let off = (r.gen_range(lo..hi) * unit).round() as i64 * if r.gen_bool(0.5) { 1 } else { -1 };
                        if !pos.contains(&(x + off)) {
                            pos.push(x + off);
                        }
                    }
                    let net_point = x - (0.5 * unit).round() as i64;
                    if fused && !pos.contains(&net_point) {
                        pos.push(net_point);
                    }
                    let m = integer_line(&pos)?;
                    let mut centers: Vec<usize> = (4..4 + csize).collect();
                    centers.shuffle(&mut r);
                    let net: Vec<usize> = if fused { vec![pos.len() - 1] } else { Vec::new() };
                    let (xi, yi) = (2, 3);
                    let near = dist_to(&m, xi, &centers).min(dist_to(&m, xi, &net));
                    ensure!(near <= TAU.powi(-j - 1), "case setup: x is {near} from the centers");
                    let kp = (csize + 1) as f64;
                    let mut cuts = 0usize;
                    for _ in 0..trials {
                        let radii = centers.iter().map(|_| TAU.powi(-j - 1) + sample_trunc_exp(TAU, j + 1, kp, &mut r)).collect();
                        let p = carve(&CarveSpec { centers: centers.clone(), radii }, &m).map_err(err)?;
                        let q = if fused { fuse_semipartition(&m, &p, &net, 2.0 * TAU.powi(-j - 1)).map_err(err)?.q } else { p };
                        cuts += usize::from(q.separation(xi, yi) > 0);
                    }
                    let d = m.d(xi, yi);
                    let base = 8.0 * ((csize + 2) as f64).ln() * d * TAU.powi(j + 1);
                    let pb = base.min(1.0);
                    let sigma = (pb * (1.0 - pb) / trials as f64).sqrt();
                    let emp = cuts as f64 / trials as f64;
                    ensure!(
                        emp <= base + 3.0 * sigma,
                        "j={j} |C|={csize} d={dfac}·τ^(-j-1) fused={fused}: {emp} > {base} + 3σ"
                    );
                    tightest = tightest.max(emp / (base + 3.0 * sigma));
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{cases} cases × {trials} carvings; largest empirical/bound {tightest:.3}"))
}

fn c06_rounding(ctx: &mut Ctx) -> Outcome {
    let mut r = rng(6);
    let draws = 10_000;
    for _ in 0..draws {
        let mass = |r: &mut ChaCha8Rng| if r.gen_bool(0.1) { f64::from(r.gen_range(0..4u32)) } else { r.gen_range(0.0..4.0) };
        let (ma, mb) = (mass(&mut r), mass(&mut r));
        let (ea, eb) = (ma - ma.floor(), mb - mb.floor());
        let t = fuse_couple(ma, mb, 1.0 - ea, 1.0 - eb).map_err(err)?;
        let cells = [(false, false, t.p00), (false, true, t.p01), (true, false, t.p10), (true, true, t.p11)];
        ensure!(cells.iter().all(|c| (-1e-12..=1.0 + 1e-12).contains(&c.2)), "entry outside [0,1] for ({ma}, {mb})");
        ensure!((cells.iter().map(|c| c.2).sum::<f64>() - 1.0).abs() <= 1e-12, "table does not sum to 1 for ({ma}, {mb})");
        let up_a: f64 = cells.iter().filter(|c| c.0).map(|c| c.2).sum();
        let up_b: f64 = cells.iter().filter(|c| c.1).map(|c| c.2).sum();
        ensure!((up_a - ea).abs() <= 1e-12 && (up_b - eb).abs() <= 1e-12, "marginals ({up_a}, {up_b}) for ({ma}, {mb})");
        let total = ma + mb;
        for &(ca, cb, p) in &cells {
            if p <= 1e-12 {
                continue;
            }
            ensure!((!ca || ea > 0.0) && (!cb || eb > 0.0), "ceiling of an integral mass has weight {p}");
            let ka = ma.floor() + f64::from(u8::from(ca));
            let kb = mb.floor() + f64::from(u8::from(cb));
            ensure!(ka + kb >= (total - 1e-12).floor() && ka + kb <= (total + 1e-12).ceil(), "unbalanced outcome for ({ma}, {mb})");
        }
    }
    let (p, suite) = ctx.both()?;
    ensure!(p.balance == 0, "{} unbalanced vertices in {} checks", p.balance, p.balance_checks);
    let mut overheads = String::new();
    for b in suite {
        ensure!(b.report.violations.balance == 0, "{}: {} balance violations", b.name, b.report.violations.balance);
        let o = b.report.mean_cost_x / b.report.mean_cost_f;
        ensure!(o <= 10.0, "{}: overhead {o}", b.name);
        overheads = format!("{overheads}{}={o:.3} ", b.name);
    }
    Ok(format!("{draws} coupling tables exact; {} balance checks clean; overhead {}", p.balance_checks, overheads.trim_end()))
}

fn c07_solver_potential(_: &mut Ctx) -> Outcome {
    let mut r = rng(7);
    // Primitive fusion never increases the potential.
    let mut worst_fuse = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let (mut hst, leaves, sp, z, theta) = random_config(&mut r);
        let l = *leaves.choose(&mut r).expect("leaves");
        let xi = hst.ancestor(l, r.gen_range(1..=hst.depth()));
        let target = containing_sibling(&mut hst, xi, &mut r);
        let inj = hst.canonical_injection(xi, target).map_err(err)?;
        let fused = z.primitive_fuse(&mut hst, xi, target).map_err(err)?;
        let theta_f = hst.apply_fusion(&FusionMap { injections: vec![inj] }, &theta);
        let gain = phi(&hst, &sp, &theta_f, &fused) - phi(&hst, &sp, &theta, &z);
        ensure!(gain <= 1e-9, "primitive fusion raised the potential by {gain}");
        worst_fuse = worst_fuse.max(gain);
    }

    // Sibling merging inequality on a grid.
    let grid: Vec<f64> = (0..=30).map(|i| f64::from(i) * 0.1).collect();
    let mut merge_cases = 0;
    for &eps in &[0.01, 0.05, 0.1, 0.2, 0.3, 0.5] {
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    if (1.0 + c) * eps > 1.0 {
                        continue;
                    }
                    let lhs = (a + b + (1.0 + c) * eps) * (a + b + eps).ln();
                    let rhs = (a + (1.0 + c) * eps) * (a + eps).ln() + (b + (1.0 + c) * eps) * (b + eps).ln();
                    ensure!(lhs >= rhs - 1e-12, "merging inequality fails at a={a} b={b} c={c} ε={eps}");
                    merge_cases += 1;
                }
            }
        }
    }

    // Logarithm comparison used for local edits.
    let mut fact_cases = 0;
    for di in 1..=50 {
        let delta = f64::from(di) / 100.0;
        for xi in 0..=100 {
            let x = f64::from(xi) / 100.0;
            let lhs = ((1.0 + delta) / (x + delta)).ln();
            let rhs = (1.0 - x) / (1.0 - delta) * (1.0 / delta).ln();
            ensure!(lhs <= rhs + 1e-12, "log comparison fails at x={x} δ={delta}");
            fact_cases += 1;
        }
    }

    // Local edits of θ below a vertex.
    let mut two_sided_exceed = 0;
    let mut worst_ratio: f64 = 0.0;
    let edits = 1000;
    for _ in 0..edits {
        let (hst, leaves, sp, z, theta) = random_config(&mut r);
        let src: Vec<NodeId> = theta.support().collect();
        let l = *src.choose(&mut r).expect("θ has mass");
        let h = r.gen_range(1..=hst.depth());
        let xi1 = hst.ancestor(l, h);
        let xi0 = hst.ancestor(l, h - 1);
        let dest: Vec<NodeId> = leaves.iter().copied().filter(|&v| hst.ancestor(v, h - 1) == xi0).collect();
        let mut edited = TreeMeasure::new();
        for (&v, &m) in theta.iter() {
            let to = if hst.ancestor(v, h) == xi1 { *dest.choose(&mut r).expect("destinations") } else { v };
            edited.add(to, m);
        }
        let change = phi(&hst, &sp, &edited, &z) - phi(&hst, &sp, &theta, &z);
        let levels: f64 = (h..=hst.depth()).map(|j| TAU.powi(-(j as i32))).sum();
        let bound = sp.c0 * (1.0 / sp.delta).ln() * levels * z.z(xi1);
        ensure!(change <= bound + 1e-9, "local edit raised the potential by {change} > {bound}");
        if change.abs() > bound + 1e-9 {
            two_sided_exceed += 1;
        }
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(change / bound);
        }
    }

    // Rounded measures: total, sign and Lipschitz transfer.
    let mut worst_lip: f64 = 0.0;
    let pairs = 200;
    for _ in 0..pairs {
        let k = r.gen_range(1..=3);
        let count = r.gen_range(k + 1..=9);
        let (hst, leaves) = random_tree(12, count, &mut r);
        let sp = SolverParams::new(k, TAU, 1.0).map_err(err)?;
        let total = k as f64 + sp.eps;
        let mu = TreeMeasure::from_pairs(leaves.iter().copied().zip(capped_masses(count, total, &mut r)));
        let nu = TreeMeasure::from_pairs(leaves.iter().copied().zip(capped_masses(count, total, &mut r)));
        let (lm, ln) = (lambda_eps(&hst, &mu, sp.eps).map_err(err)?, lambda_eps(&hst, &nu, sp.eps).map_err(err)?);
        for x in [&lm, &ln] {
            ensure!((x.total() - k as f64).abs() <= 1e-9, "rounded total {} for k = {k}", x.total());
            ensure!(x.iter().all(|(_, &v)| v >= 0.0), "negative rounded mass");
        }
        let w = |a: &TreeMeasure, b: &TreeMeasure| -> Result<f64, String> {
            let mut verts: Vec<NodeId> = a.support().chain(b.support()).collect();
            verts.sort_unstable();
            verts.dedup();
            let da: Vec<f64> = verts.iter().map(|&v| a.get(v)).collect();
            let db: Vec<f64> = verts.iter().map(|&v| b.get(v)).collect();
            Ok(w1_with(|i, j| hst.dist(verts[i], verts[j]), &da, &db).map_err(err)?.cost)
        };
        let (after, before) = (w(&lm, &ln)?, w(&mu, &nu)?);
        let limit = 2.0 / (1.0 - sp.eps) * before;
        ensure!(after <= limit + 1e-9, "rounding moved {after} > {limit}");
        if before > 0.0 {
            worst_lip = worst_lip.max(after / before * (1.0 - sp.eps) / 2.0);
        }
    }
    Ok(format!(
        "fusion max gain {worst_fuse:.2e}; {merge_cases} merging and {fact_cases} log cases; {edits} edits, max change/bound {worst_ratio:.3}, two-sided excess on {two_sided_exceed}; {pairs} rounding pairs, max transfer/limit {worst_lip:.3}"
    ))
}

fn c08_feasibility(ctx: &mut Ctx) -> Outcome {
    let mut r = rng(8);
    let mut checks = 0;
    let mut collisions = 0;
    for _ in 0..1000 {
        let (mut hst, leaves, sp, z, _) = random_config(&mut r);
        ensure!(kdelta_issues(&hst, &sp, &z).is_empty(), "generated configuration infeasible");
        let f = random_fusion(&mut hst, &leaves, &mut r);
        let mut cur = z;
        // Synthetic fusions may merge two loaded leaves of one point, which a finite tree cannot
        // keep apart; the leaf cap is then exempt and such instances are counted.
        let mut collided = false;
        let loaded = |hst: &Hst, z: &ZConfig| z.nodes().filter(|&v| hst.is_leaf(v)).count();
        for inj in &f.injections {
            let before = loaded(&hst, &cur);
            cur = cur.primitive_fuse(&mut hst, inj.source, inj.target).map_err(err)?;
            collided |= loaded(&hst, &cur) < before;
            let issues: Vec<String> =
                kdelta_issues(&hst, &sp, &cur).into_iter().filter(|i| !(collided && i.starts_with("leaf "))).collect();
            ensure!(issues.is_empty(), "random fusion: {issues:?}");
            checks += 1;
        }
        collisions += usize::from(collided);
        let target = *leaves.choose(&mut r).expect("leaves");
        let (next, _) = cur.reference_transition(&hst, &sp, target).map_err(err)?;
        let issues: Vec<String> =
            kdelta_issues(&hst, &sp, &next).into_iter().filter(|i| !(collided && i.starts_with("leaf "))).collect();
        ensure!(issues.is_empty(), "random transition: {issues:?}");
        checks += 1;
    }
    let (p, suite) = ctx.both()?;
    ensure!(p.kdelta.is_empty(), "{} violations in the pipeline, first {:?}", p.kdelta.len(), p.kdelta.first());
    for b in suite {
        ensure!(b.report.violations.z_config == 0, "{}: {} violations", b.name, b.report.violations.z_config);
    }
    Ok(format!(
        "{checks} random updates feasible ({collisions} with synthetic leaf collisions); {} pipeline updates feasible; benchmark runs clean",
        p.kdelta_checks
    ))
}

/// Sorted multisets of size `k` over `0..n`.
fn multisets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in multisets(n, k - 1) {
        let lo = rest.last().copied().unwrap_or(0);
        for x in lo..n {
            let mut v = rest.clone();
            v.push(x);
            out.push(v);
        }
    }
    out
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Exact optimum by dynamic programming over server configurations.
fn brute_force_opt(m: &FiniteMetric, k: usize, origin: usize, requests: &[usize]) -> f64 {
    let states = multisets(m.n(), k);
    let moves = |a: &[usize], b: &[usize]| -> f64 {
        permutations(b).iter().map(|p| a.iter().zip(p).map(|(&x, &y)| m.d(x, y)).sum::<f64>()).fold(f64::INFINITY, f64::min)
    };
    let mut best: HashMap<Vec<usize>, f64> = HashMap::from([(vec![origin; k], 0.0)]);
    for &s in requests {
        let mut next = HashMap::new();
        for to in states.iter().filter(|st| st.contains(&s)) {
            let c = best.iter().map(|(from, &c)| c + moves(from, to)).fold(f64::INFINITY, f64::min);
            next.insert(to.clone(), c);
        }
        best = next;
    }
    best.values().copied().fold(f64::INFINITY, f64::min)
}

fn c09_offline_oracle(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut r = rng(9);
    let instances = 100;
    for i in 0..instances {
        let n = r.gen_range(2..=5);
        let m = if i % 4 == 3 {
            let rows = (0..n).map(|a| (0..n).map(|b| f64::from(u8::from(a != b))).collect()).collect();
            FiniteMetric::from_matrix(rows).map_err(err)?
        } else {
            let mut pos = vec![0i64, 16];
            while pos.len() < n {
                let p = r.gen_range(1..16);
                if !pos.contains(&p) {
                    pos.push(p);
                }
            }
            integer_line(&pos)?
        };
        let k = r.gen_range(1..=3.min(n - 1));
        let origin = r.gen_range(0..n);
        let t_len = r.gen_range(0..=8);
        let requests: Vec<usize> = (0..t_len).map(|_| r.gen_range(0..n)).collect();
        let mcf = offline_opt_mcf(&m, &requests, &PointMeasure::dirac(n, origin, k as f64)).map_err(err)?.cost;
        let dp = brute_force_opt(&m, k, origin, &requests);
        ensure!(mcf == dp, "instance {i}: flow {mcf}, brute force {dp} (n={n}, k={k}, requests {requests:?})");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("{instances} instances equal exactly"))
}

fn c10_servicing_isolation(ctx: &mut Ctx) -> Outcome {
    let (p, suite) = ctx.both()?;
    ensure!(p.servicing == 0, "{} uncovered requests in the pipeline", p.servicing);
    let mut detail = String::new();
    for b in suite {
        let rep = &b.report;
        ensure!(rep.violations.servicing == 0, "{}: {} uncovered requests", b.name, rep.violations.servicing);
        ensure!(
            rep.isolation_sum <= 2.0 * rep.mean_cost_f,
            "{}: isolation sum {} > 2 × {}",
            b.name,
            rep.isolation_sum,
            rep.mean_cost_f
        );
        detail = format!("{detail}{}={:.3} ", b.name, rep.isolation_sum / (2.0 * rep.mean_cost_f));
    }
    Ok(format!("all requests covered; isolation/(2·cost) {}", detail.trim_end()))
}

fn c11_ratio_trend(ctx: &mut Ctx) -> Outcome {
    let suite = ctx.suite()?;
    let cruel: Vec<&Bench> = suite.iter().filter(|b| b.name.starts_with("uniform_cruel")).collect();
    ensure!(cruel.len() == 4, "expected four cruel runs");
    let secs: f64 = cruel.iter().map(|b| b.secs).sum();
    let mut per_k = Vec::new();
    for b in &cruel {
        let ratio = b.report.ratio.ok_or_else(|| format!("{}: optimum is zero", b.name))?;
        ensure!(b.report.ledger.rows > 0, "{}: ledger missing", b.name);
        per_k.push((b.report.config.k, ratio, ratio / b.report.config.k as f64));
    }
    for w in per_k.windows(2) {
        ensure!(w[1].2 <= 1.2 * w[0].2, "ratio/k rises from {:.3} at k={} to {:.3} at k={}", w[0].2, w[0].0, w[1].2, w[1].0);
    }
    ensure!(secs < 900.0, "took {secs:.0}s");
    let listed: Vec<String> = per_k.iter().map(|(k, r, q)| format!("k={k}: ratio {r:.3}, ratio/k {q:.3}")).collect();
    Ok(format!("{} [{secs:.0}s]", listed.join("; ")))
}

fn trace_bytes(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<u8>, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(err)?;
    pool.install(|| {
        let mut sink = JsonlSink(Vec::new());
        run(cfg, &mut sink).map_err(err)?;
        Ok(sink.0)
    })
}

fn c12_determinism(ctx: &mut Ctx) -> Outcome {
    let (path, trace) = clustered_instance(&ctx.dir)?;
    let configs = [
        ExperimentConfig {
            metric: MetricKind::Uniform,
            n: 5,
            k: 4,
            replicas: 8,
            horizon: 300,
            adversary: AdversaryKind::PagingCruel,
            ..ExperimentConfig::default()
        },
        ExperimentConfig {
            metric: MetricKind::Random,
            n: 24,
            k: 3,
            replicas: 8,
            horizon: 300,
            adversary: AdversaryKind::Random,
            ..ExperimentConfig::default()
        },
        ExperimentConfig {
            n: 10,
            metric_file: Some(path),
            k: 2,
            replicas: 4,
            horizon: 200,
            adversary: AdversaryKind::Trace,
            trace: Some(trace),
            ..ExperimentConfig::default()
        },
    ];
    let mut bytes = 0;
    for cfg in &configs {
        let a = trace_bytes(cfg, 1)?;
        let b = trace_bytes(cfg, 1)?;
        let c = trace_bytes(cfg, 4)?;
        ensure!(a == b, "{:?} run twice differs", cfg.adversary);
        ensure!(a == c, "{:?} differs between 1 and 4 threads", cfg.adversary);
        bytes += a.len();
    }
    Ok(format!("{} configurations, {bytes} trace bytes identical across reruns and thread counts", configs.len()))
}
