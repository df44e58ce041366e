//! Distortion statistics of the embedding after every point has been requested once.

use super::run::ExperimentConfig;
use crate::embedder::{ReplicaEmbedder, SharedEmbedder};
use crate::error::Result;
use crate::hst::Hst;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Ratios `d_T(α(x), α(y)) / d(x, y)` over all pairs and sampled embeddings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistortionReport {
    pub samples: usize,
    pub pairs: usize,
    /// Smallest ratio seen; at least `1/τ` for a dominating embedding up to one level.
    pub min_ratio: f64,
    /// Largest per-pair mean ratio.
    pub max_expected_stretch: f64,
    /// Mean ratio over pairs and samples.
    pub mean_expected_stretch: f64,
}

/// Requests every point once in a seeded random order, then measures `samples` independent
/// embeddings of the resulting center sets.
pub fn distortion(config: &ExperimentConfig, samples: usize) -> Result<DistortionReport> {
    config.validate()?;
    let m = Arc::new(config.build_metric()?);
    let n = m.n();
    let ep = config.embedder_params()?;
    let base = Hst::new(m.clone(), config.tau)?;
    let mut shared = SharedEmbedder::new(m.clone(), ep.clone(), base.depth(), config.origin, config.deletion_seed())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.adversary_seed()));
    let init = shared.clone();
    let steps = order.iter().map(|&x| shared.begin_step(x)).collect::<Result<Vec<_>>>()?;
    let sums = (0..samples.max(1))
        .into_par_iter()
        .map(|s| {
            let mut hst = base.clone();
            let mut rep = ReplicaEmbedder::new(&mut hst, &init, config.hst_seed(s))?;
            for st in &steps {
                rep.step(&mut hst, st, &ep)?;
            }
            let alpha = rep.alpha();
            let mut ratios = Vec::with_capacity(n * (n - 1) / 2);
            for x in 0..n {
                for y in x + 1..n {
                    ratios.push(hst.dist(alpha.leaf(x), alpha.leaf(y)) / m.d(x, y));
                }
            }
            Ok(ratios)
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = n * (n - 1) / 2;
    let mut mean = vec![0.0; pairs];
    let mut min_ratio = f64::INFINITY;
    for r in &sums {
        for (acc, &v) in mean.iter_mut().zip(r) {
            *acc += v;
            min_ratio = min_ratio.min(v);
        }
    }
    let c = sums.len() as f64;
    mean.iter_mut().for_each(|v| *v /= c);
    Ok(DistortionReport {
        samples: sums.len(),
        pairs,
        min_ratio,
        max_expected_stretch: mean.iter().copied().fold(0.0, f64::max),
        mean_expected_stretch: mean.iter().sum::<f64>() / pairs as f64,
    })
}
