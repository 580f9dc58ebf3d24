//! The face-paste attack: rendering candidates from [`PasteParams`], the
//! optimization objective, the success rule and the search-space bounds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayesopt::Bounds;
use crate::masks::{self, blur_mask, sigmoid_mask, AlphaMask, AutoMaskConfig, MaskShapeParams};
use crate::oracle::{FaceSet, QueryResult};
use crate::raster::{paste, resize_bilinear, rotate_bilinear, Placement, RasterImage};
use crate::{Error, Result};

pub const SCALE_RANGE: (f64, f64) = (0.6, 1.8);
pub const ROTATION_RANGE: (f64, f64) = (-40.0, 40.0);
pub const STEALTH_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Manual,
    Auto,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::Manual => "manual",
            MaskMode::Auto => "auto",
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(MaskMode::Manual),
            "auto" => Ok(MaskMode::Auto),
            other => Err(Error::invalid(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Transparency parameters; which variant is active follows the mask mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mask_mode", rename_all = "lowercase")]
pub enum MaskShape {
    Manual { bias: f64, slope: f64 },
    Auto { sigma: f64 },
}

impl MaskShape {
    pub fn mode(&self) -> MaskMode {
        match self {
            MaskShape::Manual { .. } => MaskMode::Manual,
            MaskShape::Auto { .. } => MaskMode::Auto,
        }
    }
}

/// One point of the attack search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteParams {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
    pub theta: f64,
    #[serde(flatten)]
    pub mask: MaskShape,
}

impl PasteParams {
    pub fn mode(&self) -> MaskMode {
        self.mask.mode()
    }

    /// Flattened coordinates: `(cx, cy, sx, sy, theta, b, w)` or `(cx, cy, sx, sy, theta, sigma)`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.cx, self.cy, self.sx, self.sy, self.theta];
        match self.mask {
            MaskShape::Manual { bias, slope } => v.extend([bias, slope]),
            MaskShape::Auto { sigma } => v.push(sigma),
        }
        v
    }

    pub fn from_vector(mode: MaskMode, v: &[f64]) -> Result<Self> {
        let expected = dimension(mode);
        if v.len() != expected {
            return Err(Error::invalid(format!(
                "{mode} parameters have {expected} coordinates, got {}",
                v.len()
            )));
        }
        let mask = match mode {
            MaskMode::Manual => MaskShape::Manual {
                bias: v[5],
                slope: v[6],
            },
            MaskMode::Auto => MaskShape::Auto { sigma: v[5] },
        };
        Ok(Self {
            cx: v[0],
            cy: v[1],
            sx: v[2],
            sy: v[3],
            theta: v[4],
            mask,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !in_range(self.sx, SCALE_RANGE) || !in_range(self.sy, SCALE_RANGE) {
            return Err(Error::invalid(format!("scale ({}, {}) outside [0.6, 1.8]", self.sx, self.sy)));
        }
        if !in_range(self.theta, ROTATION_RANGE) {
            return Err(Error::invalid(format!("rotation {} outside [-40, 40]", self.theta)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("placement must be finite"));
        }
        match self.mask {
            MaskShape::Manual { bias, slope } => MaskShapeParams::new(bias, slope).map(|_| ()),
            MaskShape::Auto { sigma } => {
                let (lo, hi) = masks::BLUR_SIGMA_RANGE;
                if in_range(sigma, (lo, hi)) {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("blur sigma {sigma} outside [{lo}, {hi}]")))
                }
            }
        }
    }
}

/// Search-space dimension for a mask mode.
pub fn dimension(mode: MaskMode) -> usize {
    match mode {
        MaskMode::Manual => 7,
        MaskMode::Auto => 6,
    }
}

/// One `(source, target)` campaign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub source: usize,
    pub target: usize,
    pub mode: MaskMode,
    pub budget: usize,
    pub init_queries: usize,
}

impl AttackSpec {
    pub fn new(source: usize, target: usize, mode: MaskMode) -> Self {
        Self {
            source,
            target,
            mode,
            budget: 200,
            init_queries: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::invalid("source and target must differ"));
        }
        if !(0 < self.init_queries && self.init_queries < self.budget) {
            return Err(Error::invalid(format!(
                "need 0 < init_queries ({}) < budget ({})",
                self.init_queries, self.budget
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}->{}", self.source, self.target)
    }
}

/// Base masks per class, before the per-query reshaping.
#[derive(Clone, Debug)]
pub struct MaskLibrary {
    manual: Option<Vec<AlphaMask>>,
    auto: Vec<AlphaMask>,
}

impl MaskLibrary {
    /// Automatic masks are derived from the faces; manual masks are optional.
    pub fn new(faces: &FaceSet, manual: Option<Vec<AlphaMask>>, auto_cfg: &AutoMaskConfig) -> Result<Self> {
        let (w, h, _) = faces.dims();
        if let Some(m) = &manual {
            if m.len() != faces.len() {
                return Err(Error::Config(format!("{} manual masks for {} faces", m.len(), faces.len())));
            }
            if m.iter().any(|m| (m.width(), m.height()) != (w, h)) {
                return Err(Error::Config("manual masks must match the face dimensions".into()));
            }
        }
        let auto = faces
            .images()
            .iter()
            .map(|f| masks::auto_mask_with(f, auto_cfg))
            .collect();
        Ok(Self { manual, auto })
    }

    /// Loads `mask_<id>.png` for every class from `dir`.
    pub fn load_manual(dir: &Path, faces: &FaceSet) -> Result<Vec<AlphaMask>> {
        let (w, h, _) = faces.dims();
        (0..faces.len())
            .map(|i| masks::load_mask(masks::mask_path(dir, i), (w, h)))
            .collect()
    }

    pub fn manual(&self, class: usize) -> Result<&AlphaMask> {
        self.manual
            .as_ref()
            .map(|m| &m[class])
            .ok_or_else(|| Error::Config("no manual masks configured".into()))
    }

    pub fn has_manual(&self) -> bool {
        self.manual.is_some()
    }

    pub fn auto(&self, class: usize) -> &AlphaMask {
        &self.auto[class]
    }
}

/// Renders the altered image: shape the target mask, scale and rotate mask and
/// target face together, then paste onto the source at `(cx, cy)`.
pub fn render(
    faces: &FaceSet,
    masks: &MaskLibrary,
    source: usize,
    target: usize,
    params: &PasteParams,
) -> Result<RasterImage> {
    params.validate()?;
    let shaped = match params.mask {
        MaskShape::Manual { bias, slope } => sigmoid_mask(masks.manual(target)?, MaskShapeParams { bias, slope }),
        MaskShape::Auto { sigma } => blur_mask(masks.auto(target), sigma)?,
    };
    let face = resize_bilinear(faces.get(target), params.sx, params.sy)?;
    let mask = resize_bilinear(shaped.as_image(), params.sx, params.sy)?;
    let (face, valid) = rotate_bilinear(&face, params.theta);
    let (mask, _) = rotate_bilinear(&mask, params.theta);
    let alpha = AlphaMask::from_image(mask)?.multiply(&AlphaMask::from_image(valid)?)?;
    paste(faces.get(source), &face, &alpha, Placement::new(params.cx, params.cy))
}

/// `confidence + min(0.5, stealthiness)`.
pub fn objective(r: &QueryResult) -> f64 {
    r.confidence + r.stealthiness.min(STEALTH_THRESHOLD)
}

/// Target is the strict argmax and stealthiness is at least 0.5. Without a
/// probability vector, `confidence > 0.5` stands in for the argmax test.
pub fn is_success(r: &QueryResult, target: usize) -> bool {
    if r.stealthiness < STEALTH_THRESHOLD {
        return false;
    }
    match &r.probabilities {
        Some(p) => {
            let Some(&pt) = p.get(target) else {
                return false;
            };
            p.iter().enumerate().all(|(i, &v)| i == target || v < pt)
        }
        None => r.confidence > 0.5,
    }
}

/// Box bounds over the flattened parameters. The placement range lets half
/// of the (nominal, unscaled) target face hang over each image edge.
pub fn default_bounds(faces: &FaceSet, mode: MaskMode) -> Bounds {
    let (w, h, _) = faces.dims();
    bounds_for(w as f64, h as f64, w as f64, h as f64, mode)
}

pub fn bounds_for(width: f64, height: f64, face_w: f64, face_h: f64, mode: MaskMode) -> Bounds {
    let mut lower = vec![-0.5 * face_w, -0.5 * face_h, SCALE_RANGE.0, SCALE_RANGE.0, ROTATION_RANGE.0];
    let mut upper = vec![
        width + 0.5 * face_w,
        height + 0.5 * face_h,
        SCALE_RANGE.1,
        SCALE_RANGE.1,
        ROTATION_RANGE.1,
    ];
    match mode {
        MaskMode::Manual => {
            lower.extend([MaskShapeParams::BIAS_RANGE.0, MaskShapeParams::SLOPE_RANGE.0]);
            upper.extend([MaskShapeParams::BIAS_RANGE.1, MaskShapeParams::SLOPE_RANGE.1]);
        }
        MaskMode::Auto => {
            lower.push(masks::BLUR_SIGMA_RANGE.0);
            upper.push(masks::BLUR_SIGMA_RANGE.1);
        }
    }
    Bounds::new(lower, upper).expect("static bounds are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(confidence: f64, stealthiness: f64, probabilities: Option<Vec<f64>>) -> QueryResult {
        QueryResult {
            confidence,
            stealthiness,
            probabilities,
            query_index: 1,
        }
    }

    #[test]
    fn objective_examples() {
        assert!((objective(&result(0.9, 0.8, None)) - 1.4).abs() < 1e-15);
        assert!((objective(&result(0.9, 0.3, None)) - 1.2).abs() < 1e-15);
        assert_eq!(objective(&result(0.7, 0.5, None)), objective(&result(0.7, 1.0, None)));
    }

    fn probs_with_target(target: usize, pt: f64) -> Vec<f64> {
        let rest = (1.0 - pt) / 9.0;
        (0..10).map(|i| if i == target { pt } else { rest }).collect()
    }

    #[test]
    fn success_examples() {
        let p = probs_with_target(3, 0.6);
        assert!(!is_success(&result(0.6, 0.49, Some(p.clone())), 3));
        assert!(is_success(&result(0.6, 0.5, Some(p)), 3));
        assert!(is_success(&result(0.51, 0.7, None), 3));
        assert!(!is_success(&result(0.5, 0.7, None), 3));
    }

    #[test]
    fn argmax_tie_is_failure() {
        let mut p = vec![0.05; 10];
        p[2] = 0.3;
        p[7] = 0.3;
        assert!(!is_success(&result(0.3, 0.9, Some(p)), 2));
    }

    #[test]
    fn bounds_follow_face_size() {
        let b = bounds_for(512.0, 512.0, 512.0, 512.0, MaskMode::Manual);
        assert_eq!((b.lower()[0], b.upper()[0]), (-256.0, 768.0));
        assert_eq!(b.dim(), 7);
        assert_eq!(bounds_for(512.0, 512.0, 512.0, 512.0, MaskMode::Auto).dim(), 6);
        for mode in [MaskMode::Manual, MaskMode::Auto] {
            let b = bounds_for(128.0, 96.0, 128.0, 96.0, mode);
            assert!(b.lower().iter().zip(b.upper()).all(|(l, u)| l.is_finite() && u.is_finite() && l < u));
        }
    }

    #[test]
    fn params_vector_round_trip() {
        let p = PasteParams {
            cx: 3.0,
            cy: -4.0,
            sx: 1.1,
            sy: 0.9,
            theta: 12.0,
            mask: MaskShape::Manual { bias: 0.3, slope: 20.0 },
        };
        assert_eq!(PasteParams::from_vector(MaskMode::Manual, &p.to_vector()).unwrap(), p);
        assert!(PasteParams::from_vector(MaskMode::Auto, &p.to_vector()).is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"mask_mode\":\"manual\""));
        assert_eq!(serde_json::from_str::<PasteParams>(&json).unwrap(), p);
    }

    proptest! {
        #[test]
        fn objective_saturates_and_success_is_monotone(
            c in 0.0f64..1.0, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = objective(&result(c, lo, None));
            let b = objective(&result(c, hi, None));
            if lo >= 0.5 {
                prop_assert_eq!(a, b);
            } else if hi > lo {
                prop_assert!(b > a);
            }
            let p = probs_with_target(0, c.max(0.2));
            if is_success(&result(c, lo, Some(p.clone())), 0) {
                prop_assert!(is_success(&result(c, hi, Some(p)), 0));
            }
        }
    }
}
