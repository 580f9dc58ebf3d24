use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erfc;

use super::gp::GpModel;

pub const UNIFORM_CANDIDATES: usize = 4096;
pub const LOCAL_CANDIDATES: usize = 64;
pub const LOCAL_STD: f64 = 0.05;

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement of a Gaussian `N(mean, variance)` over `best` (maximization).
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let gap = mean - best;
    if !(variance > 0.0) {
        return gap.max(0.0);
    }
    let sigma = variance.sqrt();
    let z = gap / sigma;
    (gap * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// Candidate pool for one suggestion: uniform points in the unit box plus
/// Gaussian perturbations of the incumbent, clipped to the box.
pub fn candidate_pool<R: Rng + ?Sized>(dim: usize, incumbent: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pool: Vec<Vec<f64>> = (0..UNIFORM_CANDIDATES)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let normal = Normal::new(0.0, LOCAL_STD).expect("positive std");
    for _ in 0..LOCAL_CANDIDATES {
        pool.push(
            incumbent
                .iter()
                .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect(),
        );
    }
    pool
}

/// Index of the largest EI in `pool` (first index on ties), or `None` when
/// every EI is zero.
///
/// EI is non-decreasing in both mean and variance, so `EI(mean, prior
/// variance)` bounds each candidate from above. Candidates are visited in
/// decreasing bound order and the scan stops once no remaining bound can beat
/// the incumbent; the result equals the exhaustive argmax.
pub fn argmax_expected_improvement(model: &GpModel, pool: &[Vec<f64>]) -> Option<(usize, f64)> {
    let best = model.best_observed();
    let prior = model.prior_variance();
    let mut scored: Vec<(usize, f64, Vec<f64>, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let k = model.cross_covariance(x);
            let mean = model.mean_from(&k);
            let bound = expected_improvement(mean, prior, best);
            (i, mean, k, bound)
        })
        .collect();
    scored.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)));

    let mut winner: Option<(usize, f64)> = None;
    for (i, mean, k, bound) in &scored {
        if let Some((_, wv)) = winner {
            if *bound + 1e-12 * wv.abs() < wv {
                break;
            }
        }
        let ei = expected_improvement(*mean, model.variance_from(k), best);
        winner = match winner {
            Some((wi, wv)) if ei < wv || (ei == wv && wi < *i) => Some((wi, wv)),
            _ => Some((*i, ei)),
        };
    }
    winner.filter(|&(_, v)| v > 0.0)
}

/// Exhaustive argmax, kept as the reference for the pruned search.
pub fn argmax_expected_improvement_exhaustive(model: &GpModel, pool: &[Vec<f64>]) -> Option<(usize, f64)> {
    let best = model.best_observed();
    let mut winner: Option<(usize, f64)> = None;
    for (i, x) in pool.iter().enumerate() {
        let (m, v) = model.predict(x);
        let ei = expected_improvement(m, v, best);
        if winner.is_none_or(|(_, wv)| ei > wv) {
            winner = Some((i, ei));
        }
    }
    winner.filter(|&(_, v)| v > 0.0)
}

/// Next point to evaluate in the unit box: the EI maximizer over the candidate
/// pool, or a fresh uniform point when EI vanishes everywhere.
pub fn suggest_next<R: Rng + ?Sized>(model: &GpModel, incumbent: &[f64], rng: &mut R) -> Vec<f64> {
    let pool = candidate_pool(model.dim(), incumbent, rng);
    pick(pool, |p| argmax_expected_improvement(model, p), rng)
}

pub(crate) fn pick<R: Rng + ?Sized>(
    pool: Vec<Vec<f64>>,
    argmax: impl FnOnce(&[Vec<f64>]) -> Option<(usize, f64)>,
    rng: &mut R,
) -> Vec<f64> {
    let dim = pool.first().map_or(0, Vec::len);
    match argmax(&pool) {
        Some((i, _)) => pool.into_iter().nth(i).expect("index from pool"),
        None => (0..dim).map(|_| rng.random::<f64>()).collect(),
    }
}
