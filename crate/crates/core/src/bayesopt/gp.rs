//! Gaussian-process regression with an isotropic Matérn 5/2 kernel.
//!
//! Hyperparameters are picked by exhaustive log-marginal-likelihood search
//! over a fixed grid. [`GpFitter`] keeps one Cholesky factor per grid cell
//! and extends them by one row per new observation, which yields bit-for-bit
//! the same factors as refactorizing from scratch.

use serde::{Deserialize, Serialize};

use super::cholesky::PackedCholesky;
use crate::{Error, Result};

/// Diagonal jitter tried in order when a factorization fails.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Standard deviations below this are treated as constant data (scale 1).
pub const MIN_Y_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

/// 16 log-spaced lengthscales in `[0.05, 2]` × signal variance `{0.25, 1, 4}`
/// × noise variance `{1e-6, 1e-4, 1e-2}`, lengthscale-major.
pub fn hyper_grid() -> Vec<Hyper> {
    let mut grid = Vec::with_capacity(144);
    for i in 0..16 {
        let lengthscale = 0.05 * 40f64.powf(i as f64 / 15.0);
        for signal_var in [0.25, 1.0, 4.0] {
            for noise_var in [1e-6, 1e-4, 1e-2] {
                grid.push(Hyper {
                    lengthscale,
                    signal_var,
                    noise_var,
                });
            }
        }
    }
    grid
}

/// Matérn 5/2 correlation at distance `r`.
#[inline]
pub fn matern52(r: f64, lengthscale: f64) -> f64 {
    let a = 5f64.sqrt() * r / lengthscale;
    (1.0 + a + a * a / 3.0) * (-a).exp()
}

#[inline]
fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// `(mean, scale)` of the observations; scale falls back to 1 for constant data.
pub fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > MIN_Y_SCALE { sd } else { 1.0 })
}

#[derive(Clone, Debug)]
struct Cell {
    hyper: Hyper,
    jitter_level: usize,
    chol: Option<PackedCholesky>,
}

/// Incrementally maintained factorizations for every grid cell.
#[derive(Clone, Debug)]
pub struct GpFitter {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    lengthscales: Vec<f64>,
    cells: Vec<Cell>,
}

impl GpFitter {
    pub fn new(dim: usize) -> Self {
        Self::with_grid(dim, hyper_grid())
    }

    pub fn with_grid(dim: usize, grid: Vec<Hyper>) -> Self {
        let mut lengthscales: Vec<f64> = Vec::new();
        for h in &grid {
            if !lengthscales.contains(&h.lengthscale) {
                lengthscales.push(h.lengthscale);
            }
        }
        Self {
            dim,
            x: Vec::new(),
            y: Vec::new(),
            lengthscales,
            cells: grid
                .into_iter()
                .map(|hyper| Cell {
                    hyper,
                    jitter_level: 0,
                    chol: Some(PackedCholesky::new()),
                })
                .collect(),
        }
    }

    /// Builds the fitter by factorizing every cell from scratch.
    pub fn from_data(x: &[Vec<f64>], y: &[f64], grid: Vec<Hyper>) -> Result<Self> {
        let dim = check_data(x, y)?;
        let mut f = Self::with_grid(dim, grid);
        for xi in x {
            f.x.extend_from_slice(xi);
        }
        f.y.extend_from_slice(y);
        for c in 0..f.cells.len() {
            f.refactor(c, 0);
        }
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn corr_row(&self, i: usize, lengthscale: f64) -> Vec<f64> {
        let xi = self.point(i);
        (0..i).map(|j| matern52(distance(xi, self.point(j)), lengthscale)).collect()
    }

    fn matrix_row(hyper: &Hyper, jitter: f64, corr: &[f64]) -> Vec<f64> {
        let mut row: Vec<f64> = corr.iter().map(|c| hyper.signal_var * c).collect();
        row.push(hyper.signal_var + hyper.noise_var + jitter);
        row
    }

    /// Factorizes cell `c` over all current points, starting at jitter level `level`.
    fn refactor(&mut self, c: usize, level: usize) {
        let n = self.len();
        let hyper = self.cells[c].hyper;
        let corr: Vec<Vec<f64>> = (0..n).map(|i| self.corr_row(i, hyper.lengthscale)).collect();
        for (lvl, &jitter) in JITTER_LADDER.iter().enumerate().skip(level) {
            let mut chol = PackedCholesky::with_capacity(n);
            if corr.iter().all(|row| chol.push_row(&Self::matrix_row(&hyper, jitter, row))) {
                self.cells[c].jitter_level = lvl;
                self.cells[c].chol = Some(chol);
                return;
            }
        }
        self.cells[c].chol = None;
    }

    /// Adds one observation and extends every factor by one row.
    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!("point has {} coordinates, expected {}", x.len(), self.dim)));
        }
        if !y.is_finite() {
            return Err(Error::invalid("observations must be finite"));
        }
        self.x.extend_from_slice(x);
        self.y.push(y);
        let i = self.len() - 1;
        for l in 0..self.lengthscales.len() {
            let ls = self.lengthscales[l];
            let corr = self.corr_row(i, ls);
            for c in 0..self.cells.len() {
                let cell = &mut self.cells[c];
                if cell.hyper.lengthscale != ls {
                    continue;
                }
                let jitter = JITTER_LADDER[cell.jitter_level];
                let row = Self::matrix_row(&cell.hyper, jitter, &corr);
                let ok = match cell.chol.as_mut() {
                    Some(chol) => chol.push_row(&row),
                    None => true,
                };
                if !ok {
                    let next = cell.jitter_level + 1;
                    self.refactor(c, next);
                }
            }
        }
        Ok(())
    }

    /// Log marginal likelihood of every grid cell on the standardized data
    /// (`None` where the factorization failed at every jitter level).
    pub fn log_marginal_likelihoods(&self) -> Vec<(Hyper, Option<f64>)> {
        let (mean, scale) = standardization(&self.y);
        let ys: Vec<f64> = self.y.iter().map(|v| (v - mean) / scale).collect();
        self.cells
            .iter()
            .map(|cell| (cell.hyper, cell.chol.as_ref().map(|l| lml(l, &ys))))
            .collect()
    }

    /// Posterior for the grid cell with the highest log marginal likelihood.
    pub fn fit(&self) -> Result<GpModel> {
        if self.len() < 2 {
            return Err(Error::invalid("a GP fit needs at least two observations"));
        }
        let (mean, scale) = standardization(&self.y);
        let ys: Vec<f64> = self.y.iter().map(|v| (v - mean) / scale).collect();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for (c, cell) in self.cells.iter().enumerate() {
            let Some(chol) = &cell.chol else { continue };
            let z = chol.forward(&ys);
            let value = lml_from(chol, &z);
            if best.as_ref().is_none_or(|(_, b, _)| value > *b) {
                best = Some((c, value, z));
            }
        }
        let (c, value, z) =
            best.ok_or_else(|| Error::Numerical("no grid cell admits a Cholesky factorization".into()))?;
        let cell = &self.cells[c];
        let chol = cell.chol.clone().expect("selected cell is factorized");
        let alpha = chol.backward(&z);
        let y_best = self.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(GpModel {
            dim: self.dim,
            x: self.x.clone(),
            y_mean: mean,
            y_scale: scale,
            y_best,
            hyper: cell.hyper,
            jitter: JITTER_LADDER[cell.jitter_level],
            chol,
            alpha,
            log_marginal_likelihood: value,
        })
    }
}

fn check_data(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{} points but {} observations", x.len(), y.len())));
    }
    let dim = x.first().map_or(0, Vec::len);
    if dim == 0 || x.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points must share a positive dimension"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("observations must be finite"));
    }
    Ok(dim)
}

fn lml_from(chol: &PackedCholesky, z: &[f64]) -> f64 {
    let n = z.len() as f64;
    let quad: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * quad - 0.5 * chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn lml(chol: &PackedCholesky, ys: &[f64]) -> f64 {
    lml_from(chol, &chol.forward(ys))
}

/// A fitted GP posterior. Predictions are in the original units of `y`.
#[derive(Clone, Debug)]
pub struct GpModel {
    dim: usize,
    x: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    y_best: f64,
    hyper: Hyper,
    jitter: f64,
    chol: PackedCholesky,
    alpha: Vec<f64>,
    log_marginal_likelihood: f64,
}

impl GpModel {
    /// Fits with grid-searched hyperparameters.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::invalid("a GP fit needs at least two observations"));
        }
        GpFitter::from_data(x, y, hyper_grid())?.fit()
    }

    /// Fits with fixed hyperparameters.
    pub fn fit_with(x: &[Vec<f64>], y: &[f64], hyper: Hyper) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::invalid("a GP fit needs at least two observations"));
        }
        GpFitter::from_data(x, y, vec![hyper])?.fit()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_scale(&self) -> f64 {
        self.y_scale
    }

    /// Largest observed value.
    pub fn best_observed(&self) -> f64 {
        self.y_best
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Prior variance of a noisy observation in original units.
    pub fn prior_variance(&self) -> f64 {
        self.y_scale * self.y_scale * (self.hyper.signal_var + self.hyper.noise_var)
    }

    /// Cross-covariances between `x` and every training point (standardized units).
    pub fn cross_covariance(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|j| self.hyper.signal_var * matern52(distance(x, self.point(j)), self.hyper.lengthscale))
            .collect()
    }

    pub fn mean_from(&self, k: &[f64]) -> f64 {
        let m: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        self.y_mean + self.y_scale * m
    }

    pub fn variance_from(&self, k: &[f64]) -> f64 {
        let v = self.chol.forward(k);
        let reduction: f64 = v.iter().map(|a| a * a).sum();
        let var = self.hyper.signal_var + self.hyper.noise_var - reduction;
        self.y_scale * self.y_scale * var.max(0.0)
    }

    /// Posterior predictive `(mean, variance)` of a noisy observation at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = self.cross_covariance(x);
        (self.mean_from(&k), self.variance_from(&k))
    }
}
