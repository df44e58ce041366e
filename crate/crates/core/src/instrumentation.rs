//! Isolation radii, active scales and the per-step potential ledger.
//!
//! Every potential is evaluated along a chain of intermediate states, changing one ingredient
//! at a time, so the recorded deltas telescope to the total change of the step.

use crate::embedder::{EmbedderParams, ReplicaStep, SharedStep};
use crate::error::{Error, Result};
use crate::hst::{Hst, TreeMeasure};
use crate::metric::{FiniteMetric, PointMeasure};
use crate::partition::{fuse_semipartition, Embedding, SemiPartition};
use crate::solver::{lambda_eps, phi, potential_d, potential_h, psi_h, SolverParams, ZConfig};
use serde::Serialize;
use std::io::Write;

/// Largest radius whose closed ball around `x` has `ν`-mass below 1/2; 0 when `ν(x) >= 1/2`.
pub fn rho(m: &FiniteMetric, x: usize, nu: &PointMeasure) -> f64 {
    let mut acc = 0.0;
    let order = m.by_distance(x);
    let mut i = 0;
    while i < order.len() {
        let d = m.d(x, order[i]);
        while i < order.len() && m.d(x, order[i]) == d {
            acc += nu.get(order[i]);
            i += 1;
        }
        if acc >= 0.5 {
            return d;
        }
    }
    f64::INFINITY
}

/// Cheapest transport cost of bringing `ν`-mass 1 to `x`, gathering nearest points first.
pub fn rho_hat(m: &FiniteMetric, x: usize, nu: &PointMeasure) -> Result<f64> {
    let total = nu.total();
    if total < 1.0 - 1e-12 {
        return Err(Error::InfeasibleGather(total));
    }
    let mut need = 1.0 - nu.get(x);
    let mut cost = 0.0;
    for &y in m.by_distance(x) {
        if need <= 0.0 {
            break;
        }
        if y == x {
            continue;
        }
        let take = nu.get(y).min(need);
        cost += take * m.d(x, y);
        need -= take;
    }
    Ok(cost)
}

/// `ρ̂(x, ν)` for every point.
pub fn rho_hat_all(m: &FiniteMetric, nu: &PointMeasure) -> Result<Vec<f64>> {
    (0..m.n()).map(|x| rho_hat(m, x, nu)).collect()
}

/// Levels `j in 1..=J+1` with `τ^{-j} > η ρ` at which `x` is at least `τ^{-j-1}/2` away from the
/// net one level up. The net above level 1 is empty.
pub fn active_scales(m: &FiniteMetric, x: usize, rho_x: f64, nets: &[Vec<usize>], params: &EmbedderParams) -> Vec<usize> {
    (1..=nets.len() + 1)
        .filter(|&j| {
            let far = if j == 1 { true } else { m.dist_to_set(x, nets[j - 2].iter().copied()) >= 0.5 * params.scale(j + 1) };
            params.scale(j) > params.eta * rho_x && far
        })
        .collect()
}

/// Upper bound on the number of active scales.
pub fn active_scale_bound(params: &EmbedderParams) -> f64 {
    (2.0 * params.k as f64).ln() / (1.0 / (1.0 - params.delta_heavy)).ln() + (1.0 / params.eta).ln() / params.tau.ln() + 2.0
}

/// Anchor potential `Σ_x β#μ(x) Σ_j d^j(x,C^j) τ^j (d^j(x,Λ^j) - 2ηρ̂(x) - τ^{-j-1}/2)_+` with
/// distances truncated at `τ^{-j}` and empty sets at distance `τ^{-j}`.
pub fn psi_a(
    hst: &Hst,
    mu: &TreeMeasure,
    rho_hat: &[f64],
    centers: &[Vec<usize>],
    nets: &[Vec<usize>],
    params: &EmbedderParams,
) -> f64 {
    psi_a_points(hst.metric(), &hst.beta_pushforward(mu), rho_hat, centers, nets, params)
}

/// [`psi_a`] for a measure already pulled back to the metric.
pub fn psi_a_points(
    m: &FiniteMetric,
    nu: &PointMeasure,
    rho_hat: &[f64],
    centers: &[Vec<usize>],
    nets: &[Vec<usize>],
    params: &EmbedderParams,
) -> f64 {
    let mut total = 0.0;
    for x in nu.support() {
        let mut s = 0.0;
        for (l, (c, net)) in centers.iter().zip(nets).enumerate() {
            let j = l + 1;
            let sc = params.scale(j);
            let dc = m.dist_to_set(x, c.iter().copied()).min(sc);
            let dl = m.dist_to_set(x, net.iter().copied()).min(sc);
            let gap = (dl - 2.0 * params.eta * rho_hat[x] - 0.5 * params.scale(j + 1)).max(0.0);
            s += dc * sc.recip() * gap;
        }
        total += nu.get(x) * s;
    }
    total
}

/// Fusion potential `-Σ_j τ^{-j} β#μ([H(P^j, Λ^j, 2τ^{-j-1})])`, where `H` is the union of the
/// fused clusters.
pub fn psi_f(hst: &Hst, mu: &TreeMeasure, ps: &[SemiPartition], nets: &[Vec<usize>], params: &EmbedderParams) -> Result<f64> {
    psi_f_points(hst.metric(), &hst.beta_pushforward(mu), ps, nets, params)
}

/// [`psi_f`] for a measure already pulled back to the metric.
pub fn psi_f_points(
    m: &FiniteMetric,
    nu: &PointMeasure,
    ps: &[SemiPartition],
    nets: &[Vec<usize>],
    params: &EmbedderParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (l, (p, net)) in ps.iter().zip(nets).enumerate() {
        let j = l + 1;
        let fused = fuse_semipartition(m, p, net, 2.0 * params.scale(j + 1))?;
        let mass: f64 = fused.clusters.iter().map(|(_, c)| nu.mass_of(c)).sum();
        total -= params.scale(j) * mass;
    }
    Ok(total)
}

/// `Σ_x ν(x) δ_{α(x)}`.
pub fn embed_measure(alpha: &Embedding, nu: &PointMeasure) -> TreeMeasure {
    TreeMeasure::from_pairs(nu.support().map(|x| (alpha.leaf(x), nu.get(x))))
}

/// One row of the potential ledger.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LedgerRow {
    pub replica: usize,
    pub t: usize,
    pub sigma: usize,
    pub phi_start: f64,
    pub phi: f64,
    pub d: f64,
    pub h: f64,
    pub psi_h: f64,
    pub phi_deletion: f64,
    pub phi_fission: f64,
    pub phi_insertion: f64,
    pub phi_fusion: f64,
    pub phi_nu_star: f64,
    pub phi_mu: f64,
    pub psi_a_start: f64,
    pub psi_a: f64,
    pub psi_a_deletion: f64,
    pub psi_a_fission: f64,
    pub psi_a_insertion: f64,
    pub psi_a_fusion: f64,
    pub psi_a_isolation: f64,
    pub psi_a_mu: f64,
    pub psi_f_start: f64,
    pub psi_f: f64,
    pub psi_f_deletion: f64,
    pub psi_f_insertion: f64,
    pub psi_f_heavy_net: f64,
    pub psi_f_fusion: f64,
    pub psi_f_mu: f64,
    pub rho_prev: f64,
    pub rho_hat_prev: f64,
    pub active_scales: usize,
    pub nets_added: usize,
    pub nets_removed: usize,
    pub j_star: usize,
    pub deletions: usize,
    pub cost_f: f64,
    pub cost_z: f64,
    pub cost_int_x: f64,
    pub cost_int_tree: f64,
    pub repairs: usize,
}

/// Tolerance for the telescoping identities and sign checks of the ledger.
pub const LEDGER_TOL: f64 = 1e-9;

/// Tolerance for the invariance of the anchor and fusion potentials under fusion.
pub const FUSION_TOL: f64 = 1e-12;

impl LedgerRow {
    pub fn phi_deltas(&self) -> [f64; 6] {
        [self.phi_deletion, self.phi_fission, self.phi_insertion, self.phi_fusion, self.phi_nu_star, self.phi_mu]
    }

    pub fn psi_a_deltas(&self) -> [f64; 6] {
        [self.psi_a_deletion, self.psi_a_fission, self.psi_a_insertion, self.psi_a_fusion, self.psi_a_isolation, self.psi_a_mu]
    }

    pub fn psi_f_deltas(&self) -> [f64; 5] {
        [self.psi_f_deletion, self.psi_f_insertion, self.psi_f_heavy_net, self.psi_f_fusion, self.psi_f_mu]
    }

    /// Failed exact checks: telescoping sums, zero fusion deltas for both anchor potentials,
    /// nonpositive fusion delta of `Φ`, nonpositive insertion delta of `Ψ^F`, `ρ̂ >= ρ/2`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let sums = [
            ("phi", self.phi - self.phi_start, self.phi_deltas().iter().sum::<f64>()),
            ("psi_a", self.psi_a - self.psi_a_start, self.psi_a_deltas().iter().sum::<f64>()),
            ("psi_f", self.psi_f - self.psi_f_start, self.psi_f_deltas().iter().sum::<f64>()),
        ];
        for (name, total, parts) in sums {
            if (total - parts).abs() > LEDGER_TOL {
                out.push(format!("t={}: {name} deltas sum to {parts}, change is {total}", self.t));
            }
        }
        if self.psi_a_fusion.abs() > FUSION_TOL {
            out.push(format!("t={}: anchor potential changed under fusion by {}", self.t, self.psi_a_fusion));
        }
        if self.psi_f_fusion.abs() > FUSION_TOL {
            out.push(format!("t={}: fusion potential changed under fusion by {}", self.t, self.psi_f_fusion));
        }
        if self.phi_fusion > LEDGER_TOL {
            out.push(format!("t={}: fusion raised phi by {}", self.t, self.phi_fusion));
        }
        if self.psi_f_insertion > LEDGER_TOL {
            out.push(format!("t={}: insertion raised the fusion potential by {}", self.t, self.psi_f_insertion));
        }
        if self.rho_hat_prev < self.rho_prev / 2.0 - LEDGER_TOL {
            out.push(format!("t={}: gather cost {} below half the isolation radius {}", self.t, self.rho_hat_prev, self.rho_prev));
        }
        out
    }
}

/// Everything one replica step produced, plus the annealed statistics it needs.
pub struct LedgerInputs<'a> {
    pub replica: usize,
    pub shared: &'a SharedStep,
    pub step: &'a ReplicaStep,
    pub mu_prev: &'a TreeMeasure,
    pub mu_fused: &'a TreeMeasure,
    pub mu_next: &'a TreeMeasure,
    pub z_prev: &'a ZConfig,
    pub z_fused: &'a ZConfig,
    pub z_next: &'a ZConfig,
    pub nu_star_prev: &'a PointMeasure,
    pub nu_star: &'a PointMeasure,
    /// `ρ̂` per point against the annealed measure two steps back.
    pub rho_hat_prev2: &'a [f64],
    /// `ρ̂` per point against the annealed measure one step back.
    pub rho_hat_prev: &'a [f64],
    /// `ρ(σ_t)` against the annealed measure one step back.
    pub rho_prev_sigma: f64,
}

/// Evaluates the three potentials along the intermediate states of one step.
pub fn ledger_step(hst: &Hst, eparams: &EmbedderParams, sparams: &SolverParams, inp: &LedgerInputs) -> Result<LedgerRow> {
    let m = hst.metric();
    let s = inp.shared;
    let r = inp.step;
    let th = |alpha: &Embedding, nu: &PointMeasure| embed_measure(alpha, nu);
    let p = |theta: &TreeMeasure, z: &ZConfig| phi(hst, sparams, theta, z);

    let a0 = p(&th(&r.alpha_prev, inp.nu_star_prev), inp.z_prev);
    let a1 = p(&th(&r.alpha_del, inp.nu_star_prev), inp.z_prev);
    let a2 = p(&th(&r.alpha_fis, inp.nu_star_prev), inp.z_prev);
    let a3 = p(&th(&r.alpha_pre, inp.nu_star_prev), inp.z_prev);
    let a4 = p(&th(&r.alpha, inp.nu_star_prev), inp.z_fused);
    let a5 = p(&th(&r.alpha, inp.nu_star), inp.z_fused);
    let theta_t = th(&r.alpha, inp.nu_star);
    let a6 = p(&theta_t, inp.z_next);

    let nu_prev = hst.beta_pushforward(inp.mu_prev);
    let nu_fused = hst.beta_pushforward(inp.mu_fused);
    let nu_next = hst.beta_pushforward(inp.mu_next);
    let pa = |nu: &PointMeasure, rh: &[f64], c: &[Vec<usize>], l: &[Vec<usize>]| psi_a_points(m, nu, rh, c, l, eparams);
    let b0 = pa(&nu_prev, inp.rho_hat_prev2, &s.centers_prev, &s.nets_prev);
    let b1 = pa(&nu_prev, inp.rho_hat_prev2, &s.centers_del, &s.nets_prev);
    let b2 = pa(&nu_prev, inp.rho_hat_prev2, &s.centers_del, &s.nets);
    let b3 = pa(&nu_prev, inp.rho_hat_prev2, &s.centers, &s.nets);
    let b4 = pa(&nu_fused, inp.rho_hat_prev2, &s.centers, &s.nets);
    let b5 = pa(&nu_fused, inp.rho_hat_prev, &s.centers, &s.nets);
    let b6 = pa(&nu_next, inp.rho_hat_prev, &s.centers, &s.nets);

    let pf = |nu: &PointMeasure, ps: &[SemiPartition], l: &[Vec<usize>]| psi_f_points(m, nu, ps, l, eparams);
    let f0 = pf(&nu_prev, &r.p_prev, &s.nets_prev)?;
    let f1 = pf(&nu_prev, &r.p_del, &s.nets_prev)?;
    let f2 = pf(&nu_prev, &r.p_hat, &s.nets_prev)?;
    let f3 = pf(&nu_prev, &r.p_hat, &s.nets)?;
    let f4 = pf(&nu_fused, &r.p_hat, &s.nets)?;
    let f5 = pf(&nu_next, &r.p_hat, &s.nets)?;

    let sigma = s.sigma;
    Ok(LedgerRow {
        replica: inp.replica,
        t: s.t,
        sigma,
        phi_start: a0,
        phi: a6,
        d: potential_d(hst, sparams, &theta_t, inp.z_next),
        h: potential_h(hst, sparams, inp.z_next),
        psi_h: psi_h(hst, &lambda_eps(hst, &inp.z_next.leaf_measure(hst), sparams.eps)?),
        phi_deletion: a1 - a0,
        phi_fission: a2 - a1,
        phi_insertion: a3 - a2,
        phi_fusion: a4 - a3,
        phi_nu_star: a5 - a4,
        phi_mu: a6 - a5,
        psi_a_start: b0,
        psi_a: b6,
        psi_a_deletion: b1 - b0,
        psi_a_fission: b2 - b1,
        psi_a_insertion: b3 - b2,
        psi_a_fusion: b4 - b3,
        psi_a_isolation: b5 - b4,
        psi_a_mu: b6 - b5,
        psi_f_start: f0,
        psi_f: f5,
        psi_f_deletion: f1 - f0,
        psi_f_insertion: f2 - f1,
        psi_f_heavy_net: f3 - f2,
        psi_f_fusion: f4 - f3,
        psi_f_mu: f5 - f4,
        rho_prev: inp.rho_prev_sigma,
        rho_hat_prev: inp.rho_hat_prev[sigma],
        active_scales: 0,
        nets_added: 0,
        nets_removed: 0,
        j_star: s.j_star,
        deletions: s.deleted.iter().filter(|d| d.is_some()).count(),
        ..LedgerRow::default()
    })
}

/// Writes ledger rows as CSV with a header line.
pub fn write_ledger_csv<W: Write>(out: W, rows: &[LedgerRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{build_metric, MetricKind};

    fn line(n: usize) -> FiniteMetric {
        build_metric(MetricKind::Line, n, 0).unwrap()
    }

    #[test]
    fn all_mass_at_x() {
        let m = line(5);
        let nu = PointMeasure::dirac(5, 2, 3.0);
        assert_eq!(rho(&m, 2, &nu), 0.0);
        assert_eq!(rho_hat(&m, 2, &nu).unwrap(), 0.0);
    }

    #[test]
    fn unit_mass_at_x_needs_no_gathering() {
        let m = line(5);
        let nu = PointMeasure::from_pairs(5, [(1, 1.0), (3, 1.0)]);
        assert_eq!(rho_hat(&m, 1, &nu).unwrap(), 0.0);
    }

    #[test]
    fn single_far_unit() {
        let m = line(5);
        let nu = PointMeasure::dirac(5, 4, 1.0);
        let d = m.d(0, 4);
        assert_eq!(rho_hat(&m, 0, &nu).unwrap(), d);
        assert_eq!(rho(&m, 0, &nu), d);
        assert!(rho_hat(&m, 0, &nu).unwrap() >= rho(&m, 0, &nu) / 2.0);
    }

    #[test]
    fn gathering_from_too_little_mass_fails() {
        let m = line(3);
        let nu = PointMeasure::dirac(3, 0, 0.5);
        assert!(matches!(rho_hat(&m, 1, &nu), Err(Error::InfeasibleGather(_))));
    }

    #[test]
    fn gathering_takes_nearest_mass_first() {
        let m = line(5);
        let nu = PointMeasure::from_pairs(5, [(1, 0.5), (4, 2.0)]);
        let want = 0.5 * m.d(0, 1) + 0.5 * m.d(0, 4);
        assert!((rho_hat(&m, 0, &nu).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn large_isolation_switches_off_every_scale() {
        let m = line(5);
        let p = EmbedderParams::new(2, 12.0, 1.0).unwrap();
        let nets = vec![vec![], vec![]];
        assert!(active_scales(&m, 0, (1.0 / 12.0) / p.eta, &nets, &p).is_empty());
        assert_eq!(active_scales(&m, 0, 0.0, &nets, &p), vec![1, 2, 3]);
    }

    #[test]
    fn net_point_is_heavy_above_level_one() {
        let m = line(5);
        let p = EmbedderParams::new(2, 12.0, 1.0).unwrap();
        let nets = vec![vec![0], vec![0]];
        assert_eq!(active_scales(&m, 0, 0.0, &nets, &p), vec![1]);
    }

    #[test]
    fn anchor_potential_vanishes_on_centers() {
        let m = line(5);
        let p = EmbedderParams::new(2, 12.0, 1.0).unwrap();
        let nu = PointMeasure::from_pairs(5, [(0, 1.0), (3, 1.0)]);
        let c = vec![vec![0, 3]];
        assert_eq!(psi_a_points(&m, &nu, &[0.0; 5], &c, &[vec![]], &p), 0.0);
        let far = psi_a_points(&m, &nu, &[0.0; 5], &[vec![1]], &[vec![]], &p);
        assert!(far > 0.0);
    }

    #[test]
    fn fusion_potential_counts_clustered_mass() {
        let m = line(5);
        let p = EmbedderParams::new(2, 12.0, 1.0).unwrap();
        let nu = PointMeasure::dirac(5, 2, 2.0);
        let cells = SemiPartition::from_cells(5, [crate::metric::point_set(5, [2])]).unwrap();
        assert_eq!(psi_f_points(&m, &nu, &[cells.clone()], &[vec![]], &p).unwrap(), 0.0);
        let v = psi_f_points(&m, &nu, &[cells], &[vec![2]], &p).unwrap();
        assert!((v + 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn ledger_csv_has_a_header() {
        let mut buf = Vec::new();
        write_ledger_csv(&mut buf, &[LedgerRow::default()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("replica,t,sigma,phi_start"));
        assert_eq!(s.lines().count(), 2);
    }
}
