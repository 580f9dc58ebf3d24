//! SSIM-based stealthiness: the clamped mean structural similarity between an
//! altered image and its unaltered source.

use serde::{Deserialize, Serialize};

use crate::raster::RasterImage;
use crate::{Error, Result};

/// Gaussian-window SSIM parameters (11×11 window, σ = 1.5, K1 = 0.01, K2 = 0.03, L = 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("SSIM window {} must be odd", self.window)));
        }
        if !(self.window_sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-d window; the 2-d window is its outer product and also sums to 1.
    pub fn window_1d(&self) -> Vec<f64> {
        let r = (self.window / 2) as i64;
        let s2 = 2.0 * self.window_sigma * self.window_sigma;
        let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / s2).exp()).collect();
        let sum: f64 = w.iter().sum();
        w.into_iter().map(|v| v / sum).collect()
    }
}

/// Filters a plane with the separable window over the valid region only.
fn filter_valid(plane: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = width + 1 - n;
    let oh = height + 1 - n;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        let dst = &mut rows[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = src[x..x + n].iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for (i, &w) in k.iter().enumerate() {
        for y in 0..oh {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

struct ChannelStats {
    plane: Vec<f64>,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

/// Precomputed window statistics of a reference image, so repeated comparisons
/// against the same source only filter the candidate.
pub struct SsimReference {
    cfg: SsimConfig,
    width: usize,
    height: usize,
    kernel: Vec<f64>,
    channels: Vec<ChannelStats>,
}

impl SsimReference {
    pub fn new(reference: &RasterImage, cfg: SsimConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, h) = (reference.width(), reference.height());
        if w < cfg.window || h < cfg.window {
            return Err(Error::invalid(format!(
                "image {w}x{h} smaller than the {0}x{0} SSIM window",
                cfg.window
            )));
        }
        let kernel = cfg.window_1d();
        let channels = reference
            .planes()
            .into_iter()
            .map(|plane| {
                let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
                ChannelStats {
                    mean: filter_valid(&plane, w, h, &kernel),
                    mean_sq: filter_valid(&sq, w, h, &kernel),
                    plane,
                }
            })
            .collect();
        Ok(Self {
            cfg,
            width: w,
            height: h,
            kernel,
            channels,
        })
    }

    /// Clamped mean SSIM between the reference and `other`.
    pub fn score(&self, other: &RasterImage) -> Result<f64> {
        if (other.width(), other.height(), other.channels())
            != (self.width, self.height, self.channels.len())
        {
            return Err(Error::invalid(format!(
                "SSIM operands differ: {}x{}x{} vs {}x{}x{}",
                self.width,
                self.height,
                self.channels.len(),
                other.width(),
                other.height(),
                other.channels()
            )));
        }
        let (c1, c2) = (self.cfg.c1(), self.cfg.c2());
        let (w, h) = (self.width, self.height);
        let mut total = 0.0;
        for (c, stats) in self.channels.iter().enumerate() {
            let plane = other.plane(c);
            let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
            let cross: Vec<f64> = plane.iter().zip(&stats.plane).map(|(a, b)| a * b).collect();
            let mu_b = filter_valid(&plane, w, h, &self.kernel);
            let sq_b = filter_valid(&sq, w, h, &self.kernel);
            let cross_ab = filter_valid(&cross, w, h, &self.kernel);
            let mut sum = 0.0;
            for i in 0..mu_b.len() {
                let (ma, mb) = (stats.mean[i], mu_b[i]);
                let va = stats.mean_sq[i] - ma * ma;
                let vb = sq_b[i] - mb * mb;
                let cov = cross_ab[i] - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                sum += num / den;
            }
            total += sum / mu_b.len() as f64;
        }
        Ok((total / self.channels.len() as f64).clamp(0.0, 1.0))
    }
}

/// Stealthiness of `a` relative to `b`.
pub fn ssim(a: &RasterImage, b: &RasterImage, cfg: &SsimConfig) -> Result<f64> {
    SsimReference::new(a, *cfg)?.score(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_window_sums_to_one() {
        let w = SsimConfig::default().window_1d();
        assert_eq!(w.len(), 11);
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        let s2: f64 = w.iter().flat_map(|a| w.iter().map(move |b| a * b)).sum();
        assert!((s2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_fields_follow_closed_form() {
        let cfg = SsimConfig::default();
        let a = RasterImage::filled(20, 20, 1, 0.5);
        let b = RasterImage::filled(20, 20, 1, 0.6);
        let c1 = 1e-4;
        let expected = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        let got = ssim(&a, &b, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 0.983609).abs() < 1e-6);
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = RasterImage::from_fn(30, 25, 3, |_, _, _| rng.random::<f64>());
        assert_eq!(ssim(&a, &a, &SsimConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_and_tiny_images_are_rejected() {
        let cfg = SsimConfig::default();
        let a = RasterImage::filled(20, 20, 1, 0.5);
        let b = RasterImage::filled(20, 21, 1, 0.5);
        let c = RasterImage::filled(20, 20, 3, 0.5);
        assert!(ssim(&a, &b, &cfg).is_err());
        assert!(ssim(&a, &c, &cfg).is_err());
        let tiny = RasterImage::filled(8, 8, 1, 0.5);
        assert!(ssim(&tiny, &tiny, &cfg).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = RasterImage::from_fn(24, 19, 3, |_, _, _| rng.random::<f64>());
            let b = RasterImage::from_fn(24, 19, 3, |_, _, _| rng.random::<f64>());
            let cfg = SsimConfig::default();
            let ab = ssim(&a, &b, &cfg).unwrap();
            let ba = ssim(&b, &a, &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_noise_never_scores_higher() {
        let cfg = SsimConfig::default();
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (fx, fy, ph) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random::<f64>());
            let a = RasterImage::from_fn(32, 32, 1, |x, y, _| {
                0.5 + 0.3 * ((x as f64 * fx + ph).sin() * (y as f64 * fy).cos())
            });
            let noise: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let perturb = |eps: f64| {
                let data = a.data().iter().zip(&noise).map(|(v, n)| (v + eps * n).clamp(0.0, 1.0)).collect();
                RasterImage::new(32, 32, 1, data).unwrap()
            };
            let mut prev = 1.0;
            for eps in [0.01, 0.03, 0.06, 0.1, 0.2] {
                let s = ssim(&a, &perturb(eps), &cfg).unwrap();
                assert!(s <= prev + 1e-12, "seed {seed} eps {eps}: {s} > {prev}");
                prev = s;
            }
        }
    }
}
