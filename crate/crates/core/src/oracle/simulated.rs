use serde::{Deserialize, Serialize};

use super::{FaceSet, GradientField, Oracle, Scores};
use crate::raster::{to_grayscale, BilinearMap, RasterImage, LUMA_WEIGHTS};
use crate::similarity::{SsimConfig, SsimReference};
use crate::{Error, Result};

/// Template-matching recognizer parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOracleConfig {
    /// Side of the square grayscale embedding grid.
    pub embed_size: usize,
    /// Softmax sharpness applied to cosine similarities.
    pub temperature: f64,
}

impl Default for SimOracleConfig {
    fn default() -> Self {
        Self {
            embed_size: 64,
            temperature: 20.0,
        }
    }
}

impl SimOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_size < 8 {
            return Err(Error::invalid(format!("embed_size {} below 8", self.embed_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Deterministic stand-in face recognizer.
///
/// An image is embedded as the unit-normalized, bilinearly downsampled luma
/// grid; class scores are cosine similarities to the embeddings of the ten
/// reference faces, turned into probabilities by `softmax(temperature * s)`.
/// Stealthiness is SSIM against the unaltered source face.
pub struct SimulatedOracle {
    faces: FaceSet,
    cfg: SimOracleConfig,
    ssim_cfg: SsimConfig,
    downsample: BilinearMap,
    templates: Vec<Vec<f64>>,
    references: Vec<SsimReference>,
}

struct Embedding {
    unit: Vec<f64>,
    norm: f64,
}

impl SimulatedOracle {
    pub fn new(faces: FaceSet, cfg: SimOracleConfig) -> Result<Self> {
        Self::with_ssim(faces, cfg, SsimConfig::default())
    }

    pub fn with_ssim(faces: FaceSet, cfg: SimOracleConfig, ssim_cfg: SsimConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, h, _) = faces.dims();
        let downsample = BilinearMap::resize(w, h, cfg.embed_size, cfg.embed_size);
        let references = faces
            .images()
            .iter()
            .map(|f| SsimReference::new(f, ssim_cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut oracle = Self {
            faces,
            cfg,
            ssim_cfg,
            downsample,
            templates: Vec::new(),
            references,
        };
        oracle.templates = oracle
            .faces
            .images()
            .iter()
            .map(|f| oracle.embed(f).map(|e| e.unit))
            .collect::<Result<Vec<_>>>()?;
        Ok(oracle)
    }

    pub fn faces(&self) -> &FaceSet {
        &self.faces
    }

    pub fn config(&self) -> &SimOracleConfig {
        &self.cfg
    }

    pub fn ssim_config(&self) -> &SsimConfig {
        &self.ssim_cfg
    }

    fn check_dims(&self, img: &RasterImage) -> Result<()> {
        let (w, h, _) = self.faces.dims();
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::invalid(format!(
                "image is {}x{}, the oracle expects {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn embed(&self, img: &RasterImage) -> Result<Embedding> {
        self.check_dims(img)?;
        let gray = to_grayscale(img)?;
        let mut v = self.downsample.apply(gray.data());
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Embedding { unit: v, norm })
    }

    fn similarities(&self, e: &[f64]) -> Vec<f64> {
        self.templates
            .iter()
            .map(|t| t.iter().zip(e).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn softmax(&self, sims: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = sims.iter().map(|s| self.cfg.temperature * s).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|v| v / z).collect()
    }

    /// Class probability vector for `img`.
    pub fn classify(&self, img: &RasterImage) -> Result<Vec<f64>> {
        let e = self.embed(img)?;
        Ok(self.softmax(&self.similarities(&e.unit)))
    }

    /// Analytic gradient of `log p(class | img)`, chained through the luma
    /// weights, the downsampling operator, normalization, the cosine
    /// similarities and the softmax.
    pub fn gradient_log_prob_of(&self, img: &RasterImage, class: usize) -> Result<GradientField> {
        if class >= self.templates.len() {
            return Err(Error::invalid(format!("unknown class {class}")));
        }
        let e = self.embed(img)?;
        let (w, h, c) = (img.width(), img.height(), img.channels());
        if e.norm == 0.0 {
            return Ok(GradientField {
                width: w,
                height: h,
                channels: c,
                data: vec![0.0; w * h * c],
            });
        }
        let p = self.softmax(&self.similarities(&e.unit));
        let tau = self.cfg.temperature;
        // d log p_class / d e = tau * sum_c (delta_{c,class} - p_c) t_c
        let mut v = vec![0.0; e.unit.len()];
        for (k, (t, pk)) in self.templates.iter().zip(&p).enumerate() {
            let coef = tau * (if k == class { 1.0 } else { 0.0 } - pk);
            for (vi, ti) in v.iter_mut().zip(t) {
                *vi += coef * ti;
            }
        }
        // through e = d / |d|
        let ev: f64 = e.unit.iter().zip(&v).map(|(a, b)| a * b).sum();
        let grad_d: Vec<f64> = e
            .unit
            .iter()
            .zip(&v)
            .map(|(ei, vi)| (vi - ei * ev) / e.norm)
            .collect();
        let grad_gray = self.downsample.apply_transpose(&grad_d);
        let data = match c {
            1 => grad_gray,
            3 => grad_gray
                .iter()
                .flat_map(|g| LUMA_WEIGHTS.iter().map(move |wk| wk * g))
                .collect(),
            _ => unreachable!("RasterImage has 1 or 3 channels"),
        };
        Ok(GradientField {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }
}

impl Oracle for SimulatedOracle {
    fn score(&self, img: &RasterImage, source: usize, target: usize) -> Result<Scores> {
        let n = self.templates.len();
        if source >= n || target >= n {
            return Err(Error::invalid(format!("class ids must be below {n}")));
        }
        let probabilities = self.classify(img)?;
        let stealthiness = self.references[source].score(img)?;
        Ok(Scores {
            confidence: probabilities[target],
            stealthiness,
            probabilities: Some(probabilities),
        })
    }

    fn gradient_log_prob(&self, img: &RasterImage, class: usize) -> Result<GradientField> {
        self.gradient_log_prob_of(img, class)
    }

    fn num_classes(&self) -> usize {
        self.templates.len()
    }
}
