//! Request generators.

use crate::error::{Error, Result};
use crate::metric::{FiniteMetric, MetricKind, PointMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Request generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    /// `σ_t = t mod n`; on the circle metric this walks around the circle.
    CircleSweep,
    /// Requests the point the algorithm covers least; needs the uniform metric on `k+1` points.
    PagingCruel,
    /// Independent uniform points.
    Random,
    /// A fixed request list.
    Trace,
}

impl std::str::FromStr for AdversaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle_sweep" => Ok(AdversaryKind::CircleSweep),
            "paging_cruel" => Ok(AdversaryKind::PagingCruel),
            "random" => Ok(AdversaryKind::Random),
            "trace" => Ok(AdversaryKind::Trace),
            other => Err(Error::InvalidAdversary(format!("unknown adversary `{other}`"))),
        }
    }
}

/// A request stream, possibly reacting to the integral server positions of the replicas.
#[derive(Debug, Clone)]
pub enum Adversary {
    Sweep { n: usize },
    Random { n: usize, rng: ChaCha8Rng },
    Trace { requests: Vec<usize> },
    Cruel { n: usize },
}

impl Adversary {
    /// Builds the generator; `trace` is required for [`AdversaryKind::Trace`].
    pub fn new(kind: AdversaryKind, metric_kind: MetricKind, m: &FiniteMetric, k: usize, seed: u64, trace: Option<&[usize]>) -> Result<Self> {
        let n = m.n();
        match kind {
            AdversaryKind::CircleSweep => Ok(Adversary::Sweep { n }),
            AdversaryKind::Random => Ok(Adversary::Random { n, rng: ChaCha8Rng::seed_from_u64(seed) }),
            AdversaryKind::Trace => {
                let requests = trace.ok_or_else(|| Error::InvalidAdversary("trace adversary needs a request list".into()))?;
                if let Some(&bad) = requests.iter().find(|&&s| s >= n) {
                    return Err(Error::InvalidAdversary(format!("trace requests unknown point {bad}")));
                }
                Ok(Adversary::Trace { requests: requests.to_vec() })
            }
            AdversaryKind::PagingCruel => {
                if metric_kind != MetricKind::Uniform || n != k + 1 || m.diameter() != m.min_positive_distance() {
                    return Err(Error::InvalidAdversary(format!(
                        "paging_cruel needs the uniform metric on k+1 = {} points, got {metric_kind:?} on {n}",
                        k + 1
                    )));
                }
                Ok(Adversary::Cruel { n })
            }
        }
    }

    /// True when requests depend on the algorithm's state.
    pub fn is_adaptive(&self) -> bool {
        matches!(self, Adversary::Cruel { .. })
    }

    /// Request `t` (1-based). `integral` holds the pulled-back integral measure of every replica.
    pub fn next(&mut self, t: usize, integral: &[PointMeasure]) -> Result<usize> {
        match self {
            Adversary::Sweep { n } => Ok(t % *n),
            Adversary::Random { n, rng } => Ok(rng.gen_range(0..*n)),
            Adversary::Trace { requests } => {
                requests.get(t - 1).copied().ok_or_else(|| Error::InvalidAdversary(format!("trace has no request {t}")))
            }
            Adversary::Cruel { n } => cruel_request(*n, integral),
        }
    }

    /// The first `t_len` requests of a non-adaptive stream.
    pub fn stream(&mut self, t_len: usize) -> Result<Vec<usize>> {
        if self.is_adaptive() {
            return Err(Error::InvalidAdversary("adaptive adversaries need the algorithm's state".into()));
        }
        (1..=t_len).map(|t| self.next(t, &[])).collect()
    }
}

/// Among the points empty in the first replica, the one with least average integral mass,
/// lowest id on ties.
pub fn cruel_request(n: usize, integral: &[PointMeasure]) -> Result<usize> {
    let probe = integral.first().ok_or_else(|| Error::InvalidAdversary("no replica to probe".into()))?;
    let avg = PointMeasure::average(integral);
    (0..n)
        .filter(|&x| probe.get(x) < 1.0)
        .min_by(|&a, &b| avg.get(a).total_cmp(&avg.get(b)).then(a.cmp(&b)))
        .ok_or_else(|| Error::InvalidAdversary("every point is covered in the probed replica".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::build_metric;

    #[test]
    fn sweep_walks_around_the_circle() {
        let m = build_metric(MetricKind::Circle, 4, 0).unwrap();
        let mut a = Adversary::new(AdversaryKind::CircleSweep, MetricKind::Circle, &m, 2, 0, None).unwrap();
        assert_eq!(a.stream(6).unwrap(), vec![1, 2, 3, 0, 1, 2]);
    }

    #[test]
    fn random_stream_replays() {
        let m = build_metric(MetricKind::Line, 10, 0).unwrap();
        let mk = || Adversary::new(AdversaryKind::Random, MetricKind::Line, &m, 2, 9, None).unwrap();
        let s = mk().stream(50).unwrap();
        assert_eq!(s, mk().stream(50).unwrap());
        assert!(s.iter().all(|&x| x < 10));
    }

    #[test]
    fn cruel_needs_uniform_on_k_plus_one() {
        let m = build_metric(MetricKind::Line, 3, 0).unwrap();
        let r = Adversary::new(AdversaryKind::PagingCruel, MetricKind::Line, &m, 2, 0, None);
        assert!(matches!(r, Err(Error::InvalidAdversary(_))));
        let u = build_metric(MetricKind::Uniform, 4, 0).unwrap();
        assert!(Adversary::new(AdversaryKind::PagingCruel, MetricKind::Uniform, &u, 2, 0, None).is_err());
        assert!(Adversary::new(AdversaryKind::PagingCruel, MetricKind::Uniform, &u, 3, 0, None).is_ok());
    }

    #[test]
    fn cruel_requests_an_empty_point_of_the_probe() {
        let a = PointMeasure::from_vec(vec![1.0, 0.0, 1.0]);
        let b = PointMeasure::from_vec(vec![0.0, 1.0, 1.0]);
        assert_eq!(cruel_request(3, &[a.clone(), b.clone()]).unwrap(), 1);
        assert_eq!(cruel_request(3, &[b, a]).unwrap(), 0);
    }

    #[test]
    fn trace_rejects_unknown_points_and_runs_out() {
        let m = build_metric(MetricKind::Line, 3, 0).unwrap();
        assert!(Adversary::new(AdversaryKind::Trace, MetricKind::Line, &m, 1, 0, Some(&[5])).is_err());
        let mut a = Adversary::new(AdversaryKind::Trace, MetricKind::Line, &m, 1, 0, Some(&[2, 1])).unwrap();
        assert_eq!(a.stream(2).unwrap(), vec![2, 1]);
        assert!(a.next(3, &[]).is_err());
    }
}
