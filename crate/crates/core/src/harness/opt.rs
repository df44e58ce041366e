//! Offline optimum of a request sequence via min-cost flow on a time-expanded network.

use crate::error::{Error, Result};
use crate::metric::{FiniteMetric, PointMeasure};
use crate::transport::{MinCostFlow, MASS_TOL};
use serde::Serialize;

/// Reward per request arc; larger than the diameter, so every request arc is saturated.
const REQUEST_REWARD: f64 = 4.0;

/// Offline optimum and a lazy trajectory attaining it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptSolution {
    pub cost: f64,
    /// Server positions before the first request and after each request, `T+1` entries.
    pub trajectory: Vec<PointMeasure>,
}

/// Optimal offline cost of serving `requests` with the integral servers of `initial`.
///
/// Every request is served by moving exactly one server to it, possibly one already there,
/// so the returned trajectory moves at most one server per step.
pub fn offline_opt_mcf(m: &FiniteMetric, requests: &[usize], initial: &PointMeasure) -> Result<OptSolution> {
    let n = m.n();
    if initial.len() != n {
        return Err(Error::InvalidSize(format!("initial measure has {} points, metric has {n}", initial.len())));
    }
    if initial.masses().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(Error::InvalidConfig("initial servers must be integral".into()));
    }
    let k = initial.total();
    if k < 1.0 {
        return Err(Error::InvalidK("need at least one server".into()));
    }
    if let Some(&bad) = requests.iter().find(|&&s| s >= n) {
        return Err(Error::UnknownPoint(bad));
    }
    let t_len = requests.len();
    let layer = |t: usize| if t == 0 { 1 } else { 1 + n + (t - 1) * (n + 2) + 2 };
    let sink = 1 + n + t_len * (n + 2);
    let mut g = MinCostFlow::new(sink + 1);
    for p in 0..n {
        if initial.get(p) > 0.0 {
            g.add_edge(0, layer(0) + p, initial.get(p), 0.0);
        }
    }
    let mut idle = Vec::with_capacity(t_len);
    let mut serve = Vec::with_capacity(t_len);
    let mut request_arcs = Vec::with_capacity(t_len);
    for (i, &sigma) in requests.iter().enumerate() {
        let t = i + 1;
        let a = layer(t) - 2;
        let b = a + 1;
        let mut idle_t = Vec::with_capacity(n);
        let mut serve_t = Vec::with_capacity(n);
        for p in 0..n {
            idle_t.push(g.add_edge(layer(t - 1) + p, layer(t) + p, k, 0.0));
            serve_t.push(g.add_edge(layer(t - 1) + p, a, 1.0, m.d(p, sigma)));
        }
        request_arcs.push(g.add_edge(a, b, 1.0, -REQUEST_REWARD));
        g.add_edge(b, layer(t) + sigma, 1.0, 0.0);
        idle.push(idle_t);
        serve.push(serve_t);
    }
    for p in 0..n {
        g.add_edge(layer(t_len) + p, sink, k, 0.0);
    }
    let (flow, _) = g.run(0, sink, k, true);
    if (flow - k).abs() > MASS_TOL {
        return Err(Error::Internal(format!("offline flow carried {flow} of {k} servers")));
    }
    if let Some(t) = request_arcs.iter().position(|&e| (g.flow_on(e) - 1.0).abs() > MASS_TOL) {
        return Err(Error::Internal(format!("offline flow skipped request {}", t + 1)));
    }
    let mut trajectory = Vec::with_capacity(t_len + 1);
    trajectory.push(initial.clone());
    let mut cost = 0.0;
    for (i, &sigma) in requests.iter().enumerate() {
        let mut nu = PointMeasure::zeros(n);
        for p in 0..n {
            nu.add(p, g.flow_on(idle[i][p]).round());
            let moved = g.flow_on(serve[i][p]).round();
            cost += moved * m.d(p, sigma);
        }
        nu.add(sigma, 1.0);
        trajectory.push(nu);
    }
    Ok(OptSolution { cost, trajectory })
}
