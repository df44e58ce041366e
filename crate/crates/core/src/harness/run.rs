//! End-to-end experiment driver.

use super::adversary::{Adversary, AdversaryKind};
use super::opt::{offline_opt_mcf, OptSolution};
use crate::embedder::{net_violations, step_violations, EmbedderParams, ReplicaEmbedder, SharedEmbedder, SharedStep};
use crate::error::{Error, Result};
use crate::hst::{Hst, TreeMeasure};
use crate::instrumentation::{
    active_scale_bound, active_scales, embed_measure, ledger_step, psi_a, psi_f, rho, rho_hat_all, LedgerInputs, LedgerRow,
    LEDGER_TOL,
};
use crate::metric::{build_metric, FiniteMetric, MetricKind, PointMeasure};
use crate::rounding::{balance_violations, RoundingState};
use crate::solver::{lambda_eps, phi, push_down, service_exposed, SolverParams, ZConfig};
use crate::transport::w1_hst;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Optional per-stream seeds; unset ones are derived from the master seed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOverrides {
    pub metric: Option<u64>,
    pub hst: Option<u64>,
    pub deletion: Option<u64>,
    pub rounding: Option<u64>,
    pub adversary: Option<u64>,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub metric: MetricKind,
    pub n: usize,
    /// JSON distance matrix used instead of a generated metric; `n` must match.
    pub metric_file: Option<PathBuf>,
    pub k: usize,
    #[serde(alias = "T")]
    pub horizon: usize,
    pub replicas: usize,
    pub tau: f64,
    /// Multiplier inside the insertion scale constant of the embedder.
    pub c_a_mult: f64,
    /// Multiplier of the divergence weight of the solver.
    pub c0_mult: f64,
    pub seed: u64,
    pub seeds: SeedOverrides,
    pub adversary: AdversaryKind,
    pub trace: Option<Vec<usize>>,
    /// Point holding all servers initially.
    pub origin: usize,
    /// Overrides the per-level center cap.
    pub k_cap: Option<usize>,
    /// Evaluate the potential ledger every step.
    pub ledger: bool,
    /// Run the expensive embedder and net invariant checks every step.
    pub check: bool,
    /// Extra random points per step whose active scales are measured, besides the request.
    pub scale_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            metric: MetricKind::Line,
            n: 64,
            metric_file: None,
            k: 4,
            horizon: 2000,
            replicas: 8,
            tau: 12.0,
            c_a_mult: 1.0,
            c0_mult: 1.0,
            seed: 7,
            seeds: SeedOverrides::default(),
            adversary: AdversaryKind::CircleSweep,
            trace: None,
            origin: 0,
            k_cap: None,
            ledger: true,
            check: false,
            scale_samples: 2,
        }
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidK("k must be positive".into()));
        }
        if self.n <= self.k {
            return Err(Error::InvalidK(format!("need more than k = {} points, have {}", self.k, self.n)));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidConfig("need at least one replica".into()));
        }
        if self.origin >= self.n {
            return Err(Error::UnknownPoint(self.origin));
        }
        Ok(())
    }

    pub fn metric_seed(&self) -> u64 {
        self.seeds.metric.unwrap_or_else(|| derive_seed(self.seed, 1))
    }

    pub fn deletion_seed(&self) -> u64 {
        self.seeds.deletion.unwrap_or_else(|| derive_seed(self.seed, 2))
    }

    pub fn adversary_seed(&self) -> u64 {
        self.seeds.adversary.unwrap_or_else(|| derive_seed(self.seed, 3))
    }

    fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    pub fn hst_seed(&self, replica: usize) -> u64 {
        derive_seed(self.seeds.hst.unwrap_or(self.seed), 1 << 20 | replica as u64)
    }

    pub fn rounding_seed(&self, replica: usize) -> u64 {
        derive_seed(self.seeds.rounding.unwrap_or(self.seed), 2 << 20 | replica as u64)
    }

    pub fn build_metric(&self) -> Result<FiniteMetric> {
        let Some(path) = &self.metric_file else {
            return build_metric(self.metric, self.n, self.metric_seed());
        };
        let m = FiniteMetric::from_json(&std::fs::read_to_string(path)?)?;
        if m.n() != self.n {
            return Err(Error::InvalidConfig(format!("metric file has {} points, config says {}", m.n(), self.n)));
        }
        Ok(m)
    }

    pub fn embedder_params(&self) -> Result<EmbedderParams> {
        let p = EmbedderParams::new(self.k, self.tau, self.c_a_mult)?;
        Ok(match self.k_cap {
            Some(c) => p.with_k_cap(c),
            None => p,
        })
    }

    pub fn solver_params(&self) -> Result<SolverParams> {
        SolverParams::new(self.k, self.tau, self.c0_mult)
    }
}

/// Invariant violations by family, with the first few messages.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Violations {
    pub embedder: usize,
    pub nets: usize,
    pub z_config: usize,
    pub balance: usize,
    pub servicing: usize,
    pub ledger: usize,
    pub isolation: usize,
    pub active_scales: usize,
    pub messages: Vec<String>,
}

const MAX_MESSAGES: usize = 20;

impl Violations {
    pub fn total(&self) -> usize {
        self.embedder + self.nets + self.z_config + self.balance + self.servicing + self.ledger + self.isolation + self.active_scales
    }

    fn note(&mut self, msgs: impl IntoIterator<Item = String>) {
        for m in msgs {
            if self.messages.len() < MAX_MESSAGES {
                self.messages.push(m);
            }
        }
    }
}

/// Counts of structural events over the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EventCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub net_additions: usize,
    pub net_removals: usize,
    /// Replica steps with a nontrivial fusion map.
    pub fusions: usize,
    pub fused_clusters: usize,
    /// Vertices rebalanced beyond what relabeling alone achieved.
    pub repairs: usize,
}

/// Measured sizes of active-scale sets against their bound.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScaleStats {
    pub samples: usize,
    pub max: usize,
    pub bound: f64,
}

/// Per-replica averages of the summed ledger deltas.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub rows: usize,
    /// Deletion, fission, insertion, fusion, offline move, solver move.
    pub phi_deltas: [f64; 6],
    /// Deletion, fission, insertion, fusion, isolation, measure move.
    pub psi_a_deltas: [f64; 6],
    /// Deletion, insertion, heavy net, fusion, measure move.
    pub psi_f_deltas: [f64; 5],
    pub phi_final: f64,
    pub psi_a_final: f64,
    pub psi_f_final: f64,
}

/// Outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub depth: usize,
    pub requests: Vec<usize>,
    pub opt_cost: f64,
    /// Reduced tree cost of the fractional measure per replica.
    pub cost_f: Vec<f64>,
    /// Movement cost of the integral servers in the metric per replica.
    pub cost_x: Vec<f64>,
    /// Tree cost of the integral servers per replica.
    pub cost_tree: Vec<f64>,
    /// Plan cost of the solver configuration per replica.
    pub cost_z: Vec<f64>,
    pub mean_cost_f: f64,
    pub mean_cost_x: f64,
    /// `mean_cost_x / opt_cost`, absent when the optimum is 0.
    pub ratio: Option<f64>,
    /// The whole mean cost when the optimum is 0.
    pub additive_offset: Option<f64>,
    /// Four times the initial `Φ`, averaged over replicas.
    pub four_phi0: f64,
    /// `mean_cost_x / mean_cost_f`, absent when the fractional cost is 0.
    pub rounding_overhead: Option<f64>,
    /// `Σ_t ρ̂_{t-1}(σ_t)`.
    pub isolation_sum: f64,
    /// `Σ_t ρ_{t-1}(σ_t)`.
    pub rho_sum: f64,
    pub active_scales: ScaleStats,
    pub violations: Violations,
    pub ledger: LedgerSummary,
    pub events: EventCounts,
}

/// Per-step record shared by all replicas.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepEvent {
    pub t: usize,
    pub sigma: usize,
    pub j_star: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub nets_added: usize,
    pub nets_removed: usize,
    pub fused_clusters: Vec<usize>,
    pub cost_f: Vec<f64>,
    pub cost_x: Vec<f64>,
}

/// A line of the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Step(StepEvent),
    Ledger(LedgerRow),
    Summary(Box<RunReport>),
}

/// Receives the events of a run in order.
pub trait EventSink {
    fn emit(&mut self, e: Event) -> Result<()>;
}

/// Drops every event.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _: Event) -> Result<()> {
        Ok(())
    }
}

/// Keeps every event in memory.
#[derive(Default)]
pub struct VecSink(pub Vec<Event>);

impl EventSink for VecSink {
    fn emit(&mut self, e: Event) -> Result<()> {
        self.0.push(e);
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> EventSink for JsonlSink<W> {
    fn emit(&mut self, e: Event) -> Result<()> {
        serde_json::to_writer(&mut self.0, &e)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

struct Replica {
    id: usize,
    hst: Hst,
    emb: ReplicaEmbedder,
    z: ZConfig,
    mu: TreeMeasure,
    rounding: RoundingState,
    last: [f64; 3],
    cost_f: f64,
    cost_x: f64,
    cost_tree: f64,
    cost_z: f64,
}

#[derive(Default)]
struct ReplicaOut {
    row: Option<LedgerRow>,
    nu: PointMeasure,
    integral: PointMeasure,
    cost_f: f64,
    cost_x: f64,
    fusion: bool,
    fused_clusters: usize,
    repairs: usize,
    violations: Violations,
}

struct StepCtx<'a> {
    t: usize,
    shared: &'a SharedStep,
    ep: &'a EmbedderParams,
    sp: &'a SolverParams,
    nu_star_prev: Option<&'a PointMeasure>,
    nu_star: Option<&'a PointMeasure>,
    rho_hat_prev2: &'a [f64],
    rho_hat_prev: &'a [f64],
    rho_prev_sigma: f64,
    check: bool,
}

impl Replica {
    fn step(&mut self, c: &StepCtx) -> Result<ReplicaOut> {
        let mut out = ReplicaOut::default();
        let v = &mut out.violations;
        let hst = &mut self.hst;
        let r = self.emb.step(hst, c.shared, c.ep)?;
        if c.check {
            let msgs = step_violations(hst, c.shared, &r, c.ep);
            v.embedder += msgs.len();
            v.note(msgs.into_iter().map(|m| format!("replica {} t={}: {m}", self.id, c.t)));
        }
        let z_fused = self.z.fuse(hst, &r.fusion)?;
        let mu_fused = hst.apply_fusion(&r.fusion, &self.mu);
        let leaf = r.alpha.leaf(c.shared.sigma);
        let (z_next, cost_z) = z_fused.reference_transition(hst, c.sp, leaf)?;
        for (name, z) in [("fused", &z_fused), ("transitioned", &z_next)] {
            let msgs = z.violations(hst, c.sp);
            v.z_config += msgs.len();
            v.note(msgs.into_iter().map(|m| format!("replica {} t={} {name} config: {m}", self.id, c.t)));
        }
        let mu_z = z_next.leaf_measure(hst);
        let target = push_down(hst, &lambda_eps(hst, &mu_z, c.sp.eps)?, &mu_z)?;
        let (mu_next, _) = service_exposed(hst, &mu_fused, &target, leaf)?;
        let cost_f = w1_hst(hst, &mu_fused, &mu_next)?;
        let rs = self.rounding.advance(hst, &r.fusion, &mu_fused, &mu_next, c.t)?;
        let unbalanced = balance_violations(hst, self.rounding.mu_hat(), &mu_next);
        if !unbalanced.is_empty() {
            v.balance += unbalanced.len();
            v.note([format!("replica {} t={}: {} unbalanced vertices", self.id, c.t, unbalanced.len())]);
        }
        let integral = self.rounding.pull_back(hst);
        if integral.get(c.shared.sigma) < 1.0 {
            v.servicing += 1;
            v.note([format!("replica {} t={}: request {} uncovered", self.id, c.t, c.shared.sigma)]);
        }
        if let (Some(nsp), Some(ns)) = (c.nu_star_prev, c.nu_star) {
            let inputs = LedgerInputs {
                replica: self.id,
                shared: c.shared,
                step: &r,
                mu_prev: &self.mu,
                mu_fused: &mu_fused,
                mu_next: &mu_next,
                z_prev: &self.z,
                z_fused: &z_fused,
                z_next: &z_next,
                nu_star_prev: nsp,
                nu_star: ns,
                rho_hat_prev2: c.rho_hat_prev2,
                rho_hat_prev: c.rho_hat_prev,
                rho_prev_sigma: c.rho_prev_sigma,
            };
            let mut row = ledger_step(hst, c.ep, c.sp, &inputs)?;
            row.cost_f = cost_f;
            row.cost_z = cost_z;
            row.cost_int_x = rs.cost_x;
            row.cost_int_tree = rs.cost_tree;
            row.repairs = rs.repairs;
            let mut msgs = row.violations();
            let starts = [row.phi_start, row.psi_a_start, row.psi_f_start];
            for (name, (a, b)) in ["phi", "psi_a", "psi_f"].iter().zip(self.last.iter().zip(starts)) {
                if (a - b).abs() > LEDGER_TOL {
                    msgs.push(format!("t={}: {name} starts at {b}, previous step ended at {a}", c.t));
                }
            }
            v.ledger += msgs.len();
            v.note(msgs.into_iter().map(|m| format!("replica {}: {m}", self.id)));
            self.last = [row.phi, row.psi_a, row.psi_f];
            out.row = Some(row);
        }
        out.nu = hst.beta_pushforward(&mu_next);
        out.integral = integral;
        out.cost_f = cost_f;
        out.cost_x = rs.cost_x;
        out.fusion = !r.fusion.is_identity();
        out.fused_clusters = r.fused_clusters;
        out.repairs = rs.repairs;
        self.cost_f += cost_f;
        self.cost_x += rs.cost_x;
        self.cost_tree += rs.cost_tree;
        self.cost_z += cost_z;
        self.z = z_next;
        self.mu = mu_next;
        Ok(out)
    }
}

/// Runs the full pipeline for `config`, streaming events into `sink`, and returns the report.
///
/// Adaptive adversaries are run once without the ledger to fix the request sequence, whose
/// offline optimum then drives a replay with the ledger.
pub fn run(config: &ExperimentConfig, sink: &mut dyn EventSink) -> Result<RunReport> {
    config.validate()?;
    let m = Arc::new(config.build_metric()?);
    let mut adv =
        Adversary::new(config.adversary, config.metric, &m, config.k, config.adversary_seed(), config.trace.as_deref())?;
    let requests = if adv.is_adaptive() {
        let mut quiet = config.clone();
        quiet.ledger = false;
        quiet.check = false;
        drive(&quiet, &m, &mut adv, None, &mut NullSink)?.requests
    } else {
        adv.stream(config.horizon)?
    };
    let opt = offline_opt_mcf(&m, &requests, &initial_servers(config))?;
    let mut replay = Adversary::Trace { requests };
    drive(config, &m, &mut replay, Some(&opt), sink)
}

/// All `k` servers on the origin.
pub fn initial_servers(config: &ExperimentConfig) -> PointMeasure {
    PointMeasure::dirac(config.n, config.origin, config.k as f64)
}

fn drive(
    config: &ExperimentConfig,
    m: &Arc<FiniteMetric>,
    adv: &mut Adversary,
    opt: Option<&OptSolution>,
    sink: &mut dyn EventSink,
) -> Result<RunReport> {
    let ep = config.embedder_params()?;
    let sp = config.solver_params()?;
    let k = config.k as f64;
    let base = Hst::new(m.clone(), config.tau)?;
    let depth = base.depth();
    let mut shared = SharedEmbedder::new(m.clone(), ep.clone(), depth, config.origin, config.deletion_seed())?;
    let use_ledger = config.ledger && opt.is_some();
    let nu_bar0 = initial_servers(config);
    let mut rho_hat_prev = rho_hat_all(m, &nu_bar0)?;
    let mut rho_hat_prev2 = rho_hat_prev.clone();
    let mut nu_bar = nu_bar0.clone();

    let mut replicas = (0..config.replicas)
        .into_par_iter()
        .map(|id| {
            let mut hst = base.clone();
            let emb = ReplicaEmbedder::new(&mut hst, &shared, config.hst_seed(id))?;
            let l0 = emb.alpha().leaf(config.origin);
            let z = ZConfig::initial(&mut hst, &sp, l0)?;
            let mu = TreeMeasure::dirac(l0, k);
            let rounding = RoundingState::new(config.k, mu.clone(), config.rounding_seed(id))?;
            let phi0 = phi(&hst, &sp, &embed_measure(emb.alpha(), &nu_bar0), &z);
            let a0 = psi_a(&hst, &mu, &rho_hat_prev, shared.centers(), shared.nets_prev(), &ep);
            let f0 = psi_f(&hst, &mu, emb.p_hat(), shared.nets_prev(), &ep)?;
            Ok(Replica {
                id,
                hst,
                emb,
                z,
                mu,
                rounding,
                last: [phi0, a0, f0],
                cost_f: 0.0,
                cost_x: 0.0,
                cost_tree: 0.0,
                cost_z: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let four_phi0 = 4.0 * replicas.iter().map(|r| r.last[0]).sum::<f64>() / replicas.len() as f64;

    let mut violations = Violations::default();
    let mut events = EventCounts::default();
    let mut scales = ScaleStats { bound: active_scale_bound(&ep), ..ScaleStats::default() };
    let mut summary = LedgerSummary::default();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.sample_seed());
    let mut requests = Vec::with_capacity(config.horizon);
    let mut integral: Vec<PointMeasure> = replicas.iter().map(|r| r.rounding.pull_back(&r.hst)).collect();
    let (mut isolation_sum, mut rho_sum) = (0.0, 0.0);

    for t in 1..=config.horizon {
        let sigma = adv.next(t, &integral)?;
        requests.push(sigma);
        let s = shared.begin_step(sigma)?;
        let rho_sigma = rho(m, sigma, &nu_bar);
        isolation_sum += rho_hat_prev[sigma];
        rho_sum += rho_sigma;
        if rho_hat_prev[sigma] < rho_sigma / 2.0 - LEDGER_TOL {
            violations.isolation += 1;
            violations.note([format!("t={t}: gather cost {} below half the isolation radius {rho_sigma}", rho_hat_prev[sigma])]);
        }
        let probe: Vec<usize> =
            std::iter::once(sigma).chain((0..config.scale_samples).map(|_| sample_rng.gen_range(0..m.n()))).collect();
        let mut sigma_scales = 0;
        for (i, &x) in probe.iter().enumerate() {
            let rx = if i == 0 { rho_sigma } else { rho(m, x, &nu_bar) };
            let js = active_scales(m, x, rx, &s.nets, &ep).len();
            if i == 0 {
                sigma_scales = js;
            }
            scales.samples += 1;
            scales.max = scales.max.max(js);
            if js as f64 > scales.bound {
                violations.active_scales += 1;
                violations.note([format!("t={t}: point {x} has {js} active scales, bound {}", scales.bound)]);
            }
        }

        let ctx = StepCtx {
            t,
            shared: &s,
            ep: &ep,
            sp: &sp,
            nu_star_prev: opt.filter(|_| use_ledger).map(|o| &o.trajectory[t - 1]),
            nu_star: opt.filter(|_| use_ledger).map(|o| &o.trajectory[t]),
            rho_hat_prev2: &rho_hat_prev2,
            rho_hat_prev: &rho_hat_prev,
            rho_prev_sigma: rho_sigma,
            check: config.check,
        };
        let outs = replicas.par_iter_mut().map(|r| r.step(&ctx)).collect::<Result<Vec<_>>>()?;

        let nus: Vec<PointMeasure> = outs.iter().map(|o| o.nu.clone()).collect();
        nu_bar = PointMeasure::average(&nus);
        let upd = shared.update_nets(&nu_bar)?;
        if config.check {
            for j in 1..=depth {
                let msgs = net_violations(m, &shared.nets()[j - 1], &nu_bar, j, &ep);
                violations.nets += msgs.len();
                violations.note(msgs.into_iter().map(|x| format!("t={t}: {x}")));
            }
        }
        let nets_added: usize = upd.added.iter().map(Vec::len).sum();
        let nets_removed: usize = upd.removed.iter().map(Vec::len).sum();
        rho_hat_prev2 = std::mem::replace(&mut rho_hat_prev, rho_hat_all(m, &nu_bar)?);

        let insertions = s.indicators.iter().filter(|&&b| b).count();
        let deletions = s.deleted.iter().filter(|d| d.is_some()).count();
        events.insertions += insertions;
        events.deletions += deletions;
        events.net_additions += nets_added;
        events.net_removals += nets_removed;
        let mut step = StepEvent {
            t,
            sigma,
            j_star: s.j_star,
            insertions,
            deletions,
            nets_added,
            nets_removed,
            fused_clusters: Vec::with_capacity(outs.len()),
            cost_f: Vec::with_capacity(outs.len()),
            cost_x: Vec::with_capacity(outs.len()),
        };
        integral.clear();
        for o in outs {
            events.fusions += usize::from(o.fusion);
            events.fused_clusters += o.fused_clusters;
            events.repairs += o.repairs;
            step.fused_clusters.push(o.fused_clusters);
            step.cost_f.push(o.cost_f);
            step.cost_x.push(o.cost_x);
            merge(&mut violations, o.violations);
            integral.push(o.integral);
            if let Some(mut row) = o.row {
                row.active_scales = sigma_scales;
                row.nets_added = nets_added;
                row.nets_removed = nets_removed;
                accumulate(&mut summary, &row);
                sink.emit(Event::Ledger(row))?;
            }
        }
        sink.emit(Event::Step(step))?;
    }

    let mr = replicas.len() as f64;
    let cost_f: Vec<f64> = replicas.iter().map(|r| r.cost_f).collect();
    let cost_x: Vec<f64> = replicas.iter().map(|r| r.cost_x).collect();
    let mean_cost_f = cost_f.iter().sum::<f64>() / mr;
    let mean_cost_x = cost_x.iter().sum::<f64>() / mr;
    let opt_cost = opt.map_or(0.0, |o| o.cost);
    if summary.rows > 0 {
        for d in summary.phi_deltas.iter_mut().chain(&mut summary.psi_a_deltas).chain(&mut summary.psi_f_deltas) {
            *d /= mr;
        }
        summary.phi_final = replicas.iter().map(|r| r.last[0]).sum::<f64>() / mr;
        summary.psi_a_final = replicas.iter().map(|r| r.last[1]).sum::<f64>() / mr;
        summary.psi_f_final = replicas.iter().map(|r| r.last[2]).sum::<f64>() / mr;
    }
    let report = RunReport {
        config: config.clone(),
        depth,
        requests,
        opt_cost,
        cost_tree: replicas.iter().map(|r| r.cost_tree).collect(),
        cost_z: replicas.iter().map(|r| r.cost_z).collect(),
        cost_f,
        cost_x,
        mean_cost_f,
        mean_cost_x,
        ratio: (opt_cost > 0.0).then(|| mean_cost_x / opt_cost),
        additive_offset: (opt_cost == 0.0).then_some(mean_cost_x),
        four_phi0,
        rounding_overhead: (mean_cost_f > 0.0).then(|| mean_cost_x / mean_cost_f),
        isolation_sum,
        rho_sum,
        active_scales: scales,
        violations,
        ledger: summary,
        events,
    };
    sink.emit(Event::Summary(Box::new(report.clone())))?;
    Ok(report)
}

fn merge(into: &mut Violations, from: Violations) {
    into.embedder += from.embedder;
    into.nets += from.nets;
    into.z_config += from.z_config;
    into.balance += from.balance;
    into.servicing += from.servicing;
    into.ledger += from.ledger;
    into.isolation += from.isolation;
    into.active_scales += from.active_scales;
    into.note(from.messages);
}

fn accumulate(s: &mut LedgerSummary, row: &LedgerRow) {
    s.rows += 1;
    for (a, b) in s.phi_deltas.iter_mut().zip(row.phi_deltas()) {
        *a += b;
    }
    for (a, b) in s.psi_a_deltas.iter_mut().zip(row.psi_a_deltas()) {
        *a += b;
    }
    for (a, b) in s.psi_f_deltas.iter_mut().zip(row.psi_f_deltas()) {
        *a += b;
    }
}
