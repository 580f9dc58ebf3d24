//! Budgeted Bayesian optimization over a box, with a Gaussian-process
//! surrogate and expected-improvement acquisition.

mod acquisition;
mod cholesky;
mod gp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackSpec, MaskLibrary, PasteParams};
use crate::oracle::{FaceSet, Oracle, QueryResult, QuerySession};
use crate::{Error, Result};

pub use self::acquisition::{
    argmax_expected_improvement, argmax_expected_improvement_exhaustive, candidate_pool, expected_improvement,
    normal_cdf, normal_pdf, suggest_next, LOCAL_CANDIDATES, LOCAL_STD, UNIFORM_CANDIDATES,
};
pub use self::cholesky::PackedCholesky;
pub use self::gp::{hyper_grid, matern52, standardization, GpFitter, GpModel, Hyper, JITTER_LADDER};

/// Per-dimension closed intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("bounds need matching, non-empty lower and upper vectors"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return Err(Error::invalid("every bound must be finite with lower < upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Affine map of `p` into the unit box.
    pub fn normalize(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.dim() {
            return Err(Error::invalid(format!("point has {} coordinates, expected {}", p.len(), self.dim())));
        }
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .enumerate()
            .map(|(i, (&v, (&l, &u)))| {
                if (l..=u).contains(&v) {
                    Ok((v - l) / (u - l))
                } else {
                    Err(Error::invalid(format!("coordinate {i} = {v} outside [{l}, {u}]")))
                }
            })
            .collect()
    }

    /// Inverse of [`normalize`](Self::normalize); the result is clipped to the box.
    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::invalid(format!("point has {} coordinates, expected {}", z.len(), self.dim())));
        }
        Ok(z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&t, (&l, &u))| (l + t * (u - l)).clamp(l, u))
            .collect())
    }
}

/// Budget split and the seed of a single optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoSettings {
    pub budget: usize,
    pub init_points: usize,
    pub seed: u64,
}

/// Ask/tell maximizer over the unit box `[0, 1]^dim`.
pub struct Optimizer {
    dim: usize,
    settings: BoSettings,
    rng: ChaCha8Rng,
    fitter: GpFitter,
    best: Option<(Vec<f64>, f64)>,
}

impl Optimizer {
    pub fn new(dim: usize, settings: BoSettings) -> Self {
        Self {
            dim,
            settings,
            rng: ChaCha8Rng::seed_from_u64(settings.seed),
            fitter: GpFitter::new(dim),
            best: None,
        }
    }

    pub fn observations(&self) -> usize {
        self.fitter.len()
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, y)| (x.as_slice(), *y))
    }

    /// Next point: uniform during the initial design, EI-guided afterwards.
    pub fn ask(&mut self) -> Result<Vec<f64>> {
        if self.fitter.len() < self.settings.init_points.max(2) {
            return Ok((0..self.dim).map(|_| self.rng.random::<f64>()).collect());
        }
        let model = self.fitter.fit()?;
        let incumbent = self.best.as_ref().map(|(x, _)| x.clone()).expect("observations exist");
        Ok(suggest_next(&model, &incumbent, &mut self.rng))
    }

    pub fn tell(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        self.fitter.push(&x, y)?;
        if self.best.as_ref().is_none_or(|(_, b)| y > *b) {
            self.best = Some((x, y));
        }
        Ok(())
    }
}

/// Maximizes `f` over the unit box within `settings.budget` evaluations and
/// returns every `(point, value)` in evaluation order.
pub fn maximize_unit(
    dim: usize,
    settings: BoSettings,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut opt = Optimizer::new(dim, settings);
    let mut history = Vec::with_capacity(settings.budget);
    for _ in 0..settings.budget {
        let x = opt.ask()?;
        let y = f(&x)?;
        history.push((x.clone(), y));
        opt.tell(x, y)?;
    }
    Ok(history)
}

/// One evaluated candidate of an attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub params: PasteParams,
    pub result: QueryResult,
    pub objective: f64,
    pub success: bool,
}

/// Outcome of an attack campaign.
#[derive(Clone, Debug, Serialize)]
pub struct BoState {
    pub bounds: Bounds,
    pub history: Vec<HistoryEntry>,
    pub best_so_far: Option<f64>,
    pub rng_seed: u64,
    /// Why the campaign stopped before its budget, if it did.
    pub termination: Option<String>,
}

impl BoState {
    /// Running maximum of the objective after each query.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.history
            .iter()
            .map(|h| {
                best = best.max(h.objective);
                best
            })
            .collect()
    }

    pub fn first_success(&self) -> Option<usize> {
        self.history.iter().find(|h| h.success).map(|h| h.result.query_index)
    }
}

/// Runs one budgeted attack campaign against `oracle`.
///
/// Every candidate is rendered, quantized to 8 bits (what a PNG submission
/// carries), queried, and handed to `observer` before the next suggestion.
/// Oracle failures end the campaign; the partial history is returned with
/// the reason in [`BoState::termination`].
pub fn optimize(
    spec: &AttackSpec,
    oracle: &dyn Oracle,
    faces: &FaceSet,
    masks: &MaskLibrary,
    seed: u64,
    observer: &mut dyn FnMut(&HistoryEntry) -> Result<()>,
) -> Result<BoState> {
    spec.validate()?;
    let bounds = attack::default_bounds(faces, spec.mode);
    let session = QuerySession::new(oracle, spec.source, spec.target, spec.budget)?;
    let mut opt = Optimizer::new(
        bounds.dim(),
        BoSettings {
            budget: spec.budget,
            init_points: spec.init_queries,
            seed,
        },
    );
    let mut state = BoState {
        bounds: bounds.clone(),
        history: Vec::with_capacity(spec.budget),
        best_so_far: None,
        rng_seed: seed,
        termination: None,
    };
    while session.remaining() > 0 {
        let z = opt.ask()?;
        let params = PasteParams::from_vector(spec.mode, &bounds.denormalize(&z)?)?;
        let img = attack::render(faces, masks, spec.source, spec.target, &params)?.quantize();
        let result = match session.query(&img) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("attack {} stopped after {} queries: {e}", spec.id(), state.history.len());
                state.termination = Some(e.to_string());
                break;
            }
        };
        let objective = attack::objective(&result);
        let entry = HistoryEntry {
            success: attack::is_success(&result, spec.target),
            params,
            result,
            objective,
        };
        observer(&entry)?;
        opt.tell(z, objective)?;
        state.best_so_far = Some(state.best_so_far.map_or(objective, |b: f64| b.max(objective)));
        state.history.push(entry);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_data(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random()).collect()).collect();
        let y = x
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, v)| ((i + 1) as f64 * 3.0 * v).sin()).sum::<f64>())
            .collect();
        (x, y)
    }

    /// Textbook posterior through an explicit matrix inverse.
    fn direct_predict(x: &[Vec<f64>], y: &[f64], h: Hyper, jitter: f64, q: &[f64]) -> (f64, f64) {
        let n = x.len();
        let (mean, scale) = standardization(y);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let k = DMatrix::from_fn(n, n, |i, j| {
            h.signal_var * matern52(dist(&x[i], &x[j]), h.lengthscale)
                + if i == j { h.noise_var + jitter } else { 0.0 }
        });
        let inv = k.try_inverse().expect("invertible");
        let ks = DVector::from_fn(n, |i, _| h.signal_var * matern52(dist(&x[i], q), h.lengthscale));
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / scale));
        let m = (ks.transpose() * &inv * ys)[(0, 0)];
        let v = h.signal_var + h.noise_var - (ks.transpose() * &inv * &ks)[(0, 0)];
        (mean + scale * m, scale * scale * v.max(0.0))
    }

    #[test]
    fn bounds_map_corners_and_midpoint() {
        let b = Bounds::new(vec![-1.0, 0.0, 5.0], vec![1.0, 10.0, 40.0]).unwrap();
        assert_eq!(b.normalize(&[-1.0, 0.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(b.normalize(&[0.0, 5.0, 22.5]).unwrap(), vec![0.5; 3]);
        assert!(b.normalize(&[1.5, 0.0, 5.0]).is_err());
        assert!(b.normalize(&[0.0, 0.0]).is_err());
        assert!(Bounds::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn bounds_round_trip_on_random_points() {
        let b = Bounds::new(vec![-64.0, 0.6, -40.0], vec![192.0, 1.8, 40.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..3).map(|i| b.lower()[i] + rng.random::<f64>() * (b.upper()[i] - b.lower()[i])).collect();
            let back = b.denormalize(&b.normalize(&p).unwrap()).unwrap();
            for (a, c) in p.iter().zip(&back) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_point_fit_interpolates() {
        let x = vec![vec![0.2, 0.3], vec![0.7, 0.9]];
        let y = vec![1.5, -0.5];
        let h = Hyper {
            lengthscale: 0.5,
            signal_var: 1.0,
            noise_var: 1e-6,
        };
        let m = GpModel::fit_with(&x, &y, h).unwrap();
        for (p, v) in x.iter().zip(&y) {
            assert!((m.predict(p).0 - v).abs() < 1e-4);
        }
        let grid = GpModel::fit(&x, &y).unwrap();
        if grid.hyper().noise_var == 1e-6 {
            for (p, v) in x.iter().zip(&y) {
                assert!((grid.predict(p).0 - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn constant_observations_give_constant_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, _) = random_data(&mut rng, 8, 3);
        let y = vec![0.75; 8];
        let m = GpModel::fit(&x, &y).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let (mean, var) = m.predict(&q);
            assert!((mean - 0.75).abs() < 1e-12);
            assert!(var <= m.hyper().signal_var + m.hyper().noise_var + 1e-12);
        }
    }

    #[test]
    fn selected_cell_has_the_largest_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = random_data(&mut rng, 25, 4);
        let fitter = GpFitter::from_data(&x, &y, hyper_grid()).unwrap();
        let model = fitter.fit().unwrap();
        for (h, lml) in fitter.log_marginal_likelihoods() {
            if let Some(v) = lml {
                assert!(model.log_marginal_likelihood() >= v, "{h:?}");
            }
        }
    }

    #[test]
    fn prediction_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let n = 3 + trial % 12;
            let dim = 1 + trial % 5;
            let (x, y) = random_data(&mut rng, n, dim);
            let model = GpModel::fit(&x, &y).unwrap();
            for _ in 0..5 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
                let (m, v) = model.predict(&q);
                let (dm, dv) = direct_predict(&x, &y, model.hyper(), model.jitter(), &q);
                assert!((m - dm).abs() < 1e-8, "mean {m} vs {dm}");
                assert!((v - dv).abs() < 1e-8, "var {v} vs {dv}");
            }
        }
    }

    #[test]
    fn far_points_revert_to_prior() {
        let x = vec![vec![0.0, 0.0], vec![0.02, 0.01], vec![0.01, 0.03]];
        let y = vec![1.0, 2.0, 3.0];
        let h = Hyper {
            lengthscale: 0.05,
            signal_var: 1.0,
            noise_var: 1e-6,
        };
        let m = GpModel::fit_with(&x, &y, h).unwrap();
        let (mean, var) = m.predict(&[1.0, 1.0]);
        assert!((mean - 2.0).abs() < 1e-3);
        assert!((var - m.prior_variance()).abs() < 1e-3);
    }

    #[test]
    fn incremental_fitter_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = random_data(&mut rng, 30, 6);
        let mut inc = GpFitter::new(6);
        for (p, v) in x.iter().zip(&y) {
            inc.push(p, *v).unwrap();
        }
        let batch = GpFitter::from_data(&x, &y, hyper_grid()).unwrap();
        let (a, b) = (inc.fit().unwrap(), batch.fit().unwrap());
        assert_eq!(a.hyper(), b.hyper());
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.random()).collect();
            assert_eq!(a.predict(&q), b.predict(&q));
        }
    }

    #[test]
    fn duplicate_points_stay_factorizable() {
        let x = vec![vec![0.5, 0.5]; 6];
        let y = vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3];
        let m = GpModel::fit(&x, &y).unwrap();
        let (mean, var) = m.predict(&[0.5, 0.5]);
        assert!(mean.is_finite() && var >= 0.0);
    }

    #[test]
    fn shifting_observations_shifts_means_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = random_data(&mut rng, 15, 3);
        let shifted: Vec<f64> = y.iter().map(|v| v + 7.25).collect();
        let (a, b) = (GpModel::fit(&x, &y).unwrap(), GpModel::fit(&x, &shifted).unwrap());
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let ((ma, va), (mb, vb)) = (a.predict(&q), b.predict(&q));
            assert!((mb - ma - 7.25).abs() < 1e-9);
            assert!((va - vb).abs() < 1e-9);
        }
    }

    #[test]
    fn expected_improvement_closed_form_cases() {
        assert_eq!(expected_improvement(0.3, 0.0, 0.5), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 0.5), 0.0);
        assert_eq!(expected_improvement(0.8, 0.0, 0.5), 0.30000000000000004);
        assert!((expected_improvement(1.0, 1.0, 1.0) - 0.398942280401).abs() < 1e-10);
    }

    #[test]
    fn expected_improvement_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(mean, sd, best) in &[(0.0, 1.0, 0.5), (1.2, 0.3, 1.0), (-0.4, 2.0, 0.7)] {
            let n = 1_000_000;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let gain = (mean + sd * z - best).max(0.0);
                sum += gain;
                sq += gain * gain;
            }
            let mc = sum / n as f64;
            let se = ((sq / n as f64 - mc * mc) / n as f64).sqrt();
            let ei = expected_improvement(mean, sd * sd, best);
            assert!((ei - mc).abs() < 3.0 * se, "{ei} vs {mc} ± {se}");
        }
    }

    proptest! {
        #[test]
        fn expected_improvement_grows_with_spread(mean in -2.0..0.0f64, v1 in 0.0..4.0f64, dv in 0.0..4.0f64) {
            let a = expected_improvement(mean, v1, 0.0);
            let b = expected_improvement(mean, v1 + dv, 0.0);
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a - 1e-15);
        }

        #[test]
        fn posterior_variance_is_bounded(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = random_data(&mut rng, 6, 2);
            let m = GpModel::fit(&x, &y).unwrap();
            let q: Vec<f64> = (0..2).map(|_| rng.random()).collect();
            let (_, v) = m.predict(&q);
            prop_assert!(v >= 0.0);
            prop_assert!(v <= m.prior_variance() + 1e-9);
        }
    }

    #[test]
    fn pruned_argmax_equals_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10 {
            let (x, y) = random_data(&mut rng, 10 + 5 * trial, 4);
            let model = GpModel::fit(&x, &y).unwrap();
            let pool = candidate_pool(4, &x[0], &mut rng);
            assert_eq!(
                argmax_expected_improvement(&model, &pool),
                argmax_expected_improvement_exhaustive(&model, &pool)
            );
        }
    }

    #[test]
    fn zero_improvement_falls_back_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = vec![vec![0.25, 0.25]; 4];
        let p = acquisition::pick(pool, |_| None, &mut rng);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
        assert_ne!(p, vec![0.25, 0.25]);
    }

    #[test]
    fn suggestions_stay_in_the_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, y) = random_data(&mut rng, 12, 5);
        let model = GpModel::fit(&x, &y).unwrap();
        for _ in 0..20 {
            let s = suggest_next(&model, &x[3], &mut rng);
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn suggestions_concentrate_near_a_high_incumbent() {
        let mut near = 0.0;
        let mut uniform = 0.0;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let incumbent = vec![0.6, 0.4, 0.7];
            let mut x = vec![incumbent.clone()];
            let mut y = vec![5.0];
            for _ in 0..9 {
                x.push((0..3).map(|_| rng.random()).collect());
                y.push(0.0);
            }
            let model = GpModel::fit(&x, &y).unwrap();
            let dist = |p: &[f64]| p.iter().zip(&incumbent).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            for _ in 0..20 {
                near += dist(&suggest_next(&model, &incumbent, &mut rng));
                let u: Vec<f64> = (0..3).map(|_| rng.random()).collect();
                uniform += dist(&u);
            }
        }
        assert!(near < uniform, "{near} vs {uniform}");
    }

    #[test]
    fn optimizer_is_reproducible_and_running_best_is_monotone() {
        let settings = BoSettings {
            budget: 30,
            init_points: 10,
            seed: 11,
        };
        let f = |p: &[f64]| Ok(-(p[0] - 0.3).powi(2) - (p[1] - 0.8).powi(2));
        let a = maximize_unit(2, settings, f).unwrap();
        let b = maximize_unit(2, settings, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let best = a.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        assert!(best > -0.01, "{best}");
    }
}
