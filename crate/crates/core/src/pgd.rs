//! SSIM-constrained projected gradient ascent against a differentiable
//! surrogate, with the perturbation computed on a fixed-size face crop.

use serde::{Deserialize, Serialize};

use crate::oracle::{FaceSet, GradientField, Oracle, Scores};
use crate::raster::{BilinearMap, RasterImage};
use crate::similarity::{SsimConfig, SsimReference};
use crate::toy::CropBox;
use crate::{Error, Result};

const PROJECTION_ITERATIONS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    /// Per-step change of every working-space pixel, in intensity units.
    pub step_size: f64,
    pub steps: usize,
    pub ssim_floor: f64,
    pub ssim_tolerance: f64,
    /// Side length of the square working resolution.
    pub crop_size: usize,
    /// Project onto the SSIM floor after every step instead of once at the end.
    pub per_step_projection: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            step_size: 2.0 / 255.0,
            steps: 100,
            ssim_floor: 0.5,
            ssim_tolerance: 0.005,
            crop_size: 160,
            per_step_projection: false,
        }
    }
}

impl PgdConfig {
    /// Zero steps is accepted and yields the unmodified source.
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if !(self.ssim_floor > 0.0 && self.ssim_floor < 1.0) {
            return Err(Error::invalid("ssim_floor must lie in (0, 1)"));
        }
        if !(self.ssim_tolerance > 0.0) {
            return Err(Error::invalid("ssim_tolerance must be positive"));
        }
        if self.crop_size == 0 {
            return Err(Error::invalid("crop_size must be positive"));
        }
        Ok(())
    }
}

/// One sign-gradient ascent step, clipped to `[0, 1]`.
pub fn pgd_step(x: &RasterImage, grad: &[f64], step: f64) -> Result<RasterImage> {
    if grad.len() != x.data().len() {
        return Err(Error::invalid("gradient and image sizes differ"));
    }
    let data = x
        .data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + step * s).clamp(0.0, 1.0)
        })
        .collect();
    RasterImage::new(x.width(), x.height(), x.channels(), data)
}

fn blend(x0: &RasterImage, x: &RasterImage, lambda: f64) -> RasterImage {
    let data = x0.data().iter().zip(x.data()).map(|(a, b)| a + lambda * (b - a)).collect();
    RasterImage::new(x0.width(), x0.height(), x0.channels(), data).expect("same layout as the inputs")
}

/// Shrinks `x` toward `reference` until SSIM reaches the floor.
///
/// Returns `x` itself with `λ = 1` when it already satisfies the floor;
/// otherwise bisects for the largest `λ` with
/// `ssim(reference, reference + λ(x − reference)) ≥ floor`.
pub fn ssim_project(reference: &SsimReference, x0: &RasterImage, x: &RasterImage, floor: f64) -> Result<(RasterImage, f64)> {
    if x0.dims() != x.dims() {
        return Err(Error::invalid("projection endpoints differ in shape"));
    }
    if reference.score(x)? >= floor {
        return Ok((x.clone(), 1.0));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..PROJECTION_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if reference.score(&blend(x0, x, mid))? >= floor {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((blend(x0, x, lo), lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub confidence: f64,
    pub log_confidence: f64,
    pub stealthiness: f64,
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub image: RasterImage,
    /// Shrink factor of the final projection (1 when none was needed).
    pub lambda: f64,
    /// Surrogate scores before the first step and after every step.
    pub trace: Vec<TracePoint>,
    /// Surrogate scores of the returned image.
    pub final_scores: Scores,
}

impl PgdOutcome {
    /// Target is the strict argmax of the surrogate and the SSIM floor holds.
    pub fn white_box_success(&self, target: usize, floor: f64) -> bool {
        let probs = match &self.final_scores.probabilities {
            Some(p) => p,
            None => return false,
        };
        let t = probs[target];
        self.final_scores.stealthiness >= floor && probs.iter().enumerate().all(|(i, &p)| i == target || p < t)
    }
}

/// Working-space view of the crop box.
struct CropSpace {
    x0: RasterImage,
    crop: CropBox,
    up: BilinearMap,
    down: BilinearMap,
}

impl CropSpace {
    fn new(x0: &RasterImage, crop: CropBox, size: usize) -> Result<Self> {
        if crop.width == 0
            || crop.height == 0
            || crop.x + crop.width > x0.width()
            || crop.y + crop.height > x0.height()
        {
            return Err(Error::invalid(format!("crop box {crop:?} does not fit the image")));
        }
        Ok(Self {
            x0: x0.clone(),
            crop,
            up: BilinearMap::resize(size, size, crop.width, crop.height),
            down: BilinearMap::resize(crop.width, crop.height, size, size),
        })
    }

    fn working_image(&self) -> RasterImage {
        let c = self.crop;
        let patch = self.x0.crop(c.x, c.y, c.width, c.height).expect("validated crop");
        self.down.apply_image(&patch)
    }

    /// Source image plus the upsampled working-space perturbation.
    fn compose(&self, work: &RasterImage, work0: &RasterImage) -> RasterImage {
        let nc = work.channels();
        let planes: Vec<Vec<f64>> = (0..nc)
            .map(|c| {
                let delta: Vec<f64> = work
                    .data()
                    .iter()
                    .zip(work0.data())
                    .skip(c)
                    .step_by(nc)
                    .map(|(a, b)| a - b)
                    .collect();
                self.up.apply(&delta)
            })
            .collect();
        let (cw, ch) = (self.crop.width, self.crop.height);
        let mut data = self.x0.data().to_vec();
        let w = self.x0.width();
        for y in 0..ch {
            for x in 0..cw {
                for (c, plane) in planes.iter().enumerate() {
                    let i = ((self.crop.y + y) * w + self.crop.x + x) * nc + c;
                    data[i] = (data[i] + plane[y * cw + x]).clamp(0.0, 1.0);
                }
            }
        }
        RasterImage::new(w, self.x0.height(), nc, data).expect("same layout")
    }

    /// Pulls a full-image gradient back to the working space.
    fn pull_back(&self, g: &GradientField) -> Vec<f64> {
        let (cw, ch, nc) = (self.crop.width, self.crop.height, g.channels);
        let (ow, oh) = self.down.out_dims();
        let mut out = vec![0.0; ow * oh * nc];
        for c in 0..nc {
            let mut plane = vec![0.0; cw * ch];
            for y in 0..ch {
                for x in 0..cw {
                    plane[y * cw + x] = g.get(self.crop.x + x, self.crop.y + y, c);
                }
            }
            for (i, v) in self.up.apply_transpose(&plane).into_iter().enumerate() {
                out[i * nc + c] = v;
            }
        }
        out
    }
}

/// Runs the attack on the image of class `source`, pushing the surrogate
/// toward `target`.
pub fn run_pgd(
    faces: &FaceSet,
    source: usize,
    target: usize,
    surrogate: &dyn Oracle,
    crop: CropBox,
    cfg: &PgdConfig,
    ssim_cfg: SsimConfig,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    if source >= faces.len() || target >= faces.len() || source == target {
        return Err(Error::invalid(format!("invalid pair {source}->{target}")));
    }
    let x0 = faces.get(source);
    let reference = SsimReference::new(x0, ssim_cfg)?;
    let space = CropSpace::new(x0, crop, cfg.crop_size)?;
    let work0 = space.working_image();
    let mut work = work0.clone();

    let trace_point = |step: usize, img: &RasterImage| -> Result<(TracePoint, Scores)> {
        let s = surrogate.score(img, source, target)?;
        Ok((
            TracePoint {
                step,
                confidence: s.confidence,
                log_confidence: s.confidence.ln(),
                stealthiness: s.stealthiness,
            },
            s,
        ))
    };

    let mut trace = vec![trace_point(0, x0)?.0];
    let mut lambda = 1.0;
    for step in 1..=cfg.steps {
        let full = space.compose(&work, &work0);
        let grad = surrogate.gradient_log_prob(&full, target)?;
        work = pgd_step(&work, &space.pull_back(&grad), cfg.step_size)?;
        if cfg.per_step_projection {
            let (_, l) = ssim_project(&reference, x0, &space.compose(&work, &work0), cfg.ssim_floor)?;
            work = blend(&work0, &work, l);
            lambda = l;
        }
        trace.push(trace_point(step, &space.compose(&work, &work0))?.0);
    }

    let composed = space.compose(&work, &work0);
    let image = if cfg.per_step_projection {
        composed
    } else {
        let (img, l) = ssim_project(&reference, x0, &composed, cfg.ssim_floor)?;
        lambda = l;
        img
    };
    let final_scores = trace_point(cfg.steps, &image)?.1;
    Ok(PgdOutcome {
        image,
        lambda,
        trace,
        final_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{SimOracleConfig, SimulatedOracle};
    use crate::similarity::ssim;
    use crate::toy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_pixels_alone() {
        let x = RasterImage::from_fn(4, 3, 3, |x, y, c| 0.1 * (x + y + c) as f64);
        assert_eq!(pgd_step(&x, &vec![0.0; 36], 0.1).unwrap(), x);
    }

    #[test]
    fn nonzero_gradient_moves_by_one_step_unless_clipped() {
        let x = RasterImage::new(3, 1, 1, vec![0.5, 1.0, 0.0]).unwrap();
        let out = pgd_step(&x, &[-3.0, 2.0, -1e-9], 0.1).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(out.data()[1], 1.0);
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn projection_keeps_feasible_images_and_hits_the_floor_band() {
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x0 = RasterImage::from_fn(48, 48, 3, |x, y, c| 0.3 + 0.2 * ((x + 2 * y + c) as f64 * 0.2).sin());
            let reference = SsimReference::new(&x0, cfg).unwrap();
            let (same, l) = ssim_project(&reference, &x0, &x0, 0.5).unwrap();
            assert_eq!((same, l), (x0.clone(), 1.0));

            let noisy = x0.map(|v| (v + rng.random_range(-0.4..0.4)).clamp(0.0, 1.0));
            assert!(ssim(&x0, &noisy, &cfg).unwrap() < 0.5);
            let (p, l) = ssim_project(&reference, &x0, &noisy, 0.5).unwrap();
            let s = ssim(&x0, &p, &cfg).unwrap();
            assert!((0.5..=0.505).contains(&s), "{s}");
            assert!((0.0..1.0).contains(&l));
            for ((a, b), c) in x0.data().iter().zip(noisy.data()).zip(p.data()) {
                assert!((c - a).abs() <= (b - a).abs() + 1e-15);
            }
        }
    }

    #[test]
    fn zero_steps_return_the_source() {
        let t = toy::generate(7);
        let oracle = SimulatedOracle::new(t.faces.clone(), SimOracleConfig::default()).unwrap();
        let cfg = PgdConfig {
            steps: 0,
            ..PgdConfig::default()
        };
        let out = run_pgd(&t.faces, 2, 5, &oracle, t.face_boxes[2], &cfg, SsimConfig::default()).unwrap();
        assert_eq!(&out.image, t.faces.get(2));
        assert_eq!(out.final_scores.stealthiness, 1.0);
        assert_eq!(out.final_scores.confidence, oracle.classify(t.faces.get(2)).unwrap()[5]);
    }

    #[test]
    fn perturbation_stays_inside_the_crop_box() {
        let t = toy::generate(7);
        let oracle = SimulatedOracle::new(t.faces.clone(), SimOracleConfig::default()).unwrap();
        let cfg = PgdConfig {
            steps: 3,
            ..PgdConfig::default()
        };
        let b = t.face_boxes[0];
        let out = run_pgd(&t.faces, 0, 1, &oracle, b, &cfg, SsimConfig::default()).unwrap();
        let src = t.faces.get(0);
        for y in 0..src.height() {
            for x in 0..src.width() {
                let inside = (b.x..b.x + b.width).contains(&x) && (b.y..b.y + b.height).contains(&y);
                if !inside {
                    for c in 0..3 {
                        assert_eq!(out.image.get(x, y, c), src.get(x, y, c));
                    }
                }
            }
        }
        assert!(out.trace.len() == 4);
        assert!(out.trace[3].log_confidence > out.trace[0].log_confidence);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(PgdConfig { step_size: 0.0, ..PgdConfig::default() }.validate().is_err());
        assert!(PgdConfig { ssim_floor: 1.0, ..PgdConfig::default() }.validate().is_err());
        assert!(PgdConfig::default().validate().is_ok());
    }
}
