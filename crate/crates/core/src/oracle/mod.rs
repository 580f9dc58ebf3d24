//! The black-box boundary: an [`Oracle`] scores an image for a (source, target)
//! pair, a [`QuerySession`] enforces the per-attack query budget.

mod remote;
mod server;
mod simulated;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::raster::RasterImage;
use crate::{Error, Result};

pub use self::remote::{FieldMapping, RemoteConfig, RemoteOracle};
pub use self::server::{serve, QueryRequest, QueryResponse, ServerHandle, API_KEY_ENV, API_KEY_HEADER};
pub use self::simulated::{SimOracleConfig, SimulatedOracle};

pub const NUM_CLASSES: usize = 10;

/// The ten reference faces; index = class id.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSet {
    images: Vec<RasterImage>,
}

impl FaceSet {
    pub fn new(images: Vec<RasterImage>) -> Result<Self> {
        if images.len() != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "a face set needs exactly {NUM_CLASSES} images, got {}",
                images.len()
            )));
        }
        let dims = images[0].dims();
        if images.iter().any(|img| img.dims() != dims) {
            return Err(Error::invalid("face images must share dimensions and channels"));
        }
        Ok(Self { images })
    }

    /// Reads `face_<id>.png` for every class id from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let images = (0..NUM_CLASSES)
            .map(|i| {
                let path = face_path(dir, i);
                if !path.exists() {
                    return Err(Error::Config(format!("face image {} not found", path.display())));
                }
                RasterImage::read_png(&path)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(images).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, img) in self.images.iter().enumerate() {
            img.write_png(face_path(dir, i))?;
        }
        Ok(())
    }

    pub fn get(&self, class: usize) -> &RasterImage {
        &self.images[class]
    }

    pub fn images(&self) -> &[RasterImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(width, height, channels)` shared by every face.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].dims()
    }
}

pub fn face_path(dir: &Path, class_id: usize) -> std::path::PathBuf {
    dir.join(format!("face_{class_id}.png"))
}

/// What an oracle returns for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub confidence: f64,
    pub stealthiness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

/// One budgeted query: the oracle scores plus the 1-based position of the
/// query within its attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub confidence: f64,
    pub stealthiness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    pub query_index: usize,
}

impl QueryResult {
    pub fn from_scores(scores: Scores, query_index: usize) -> Self {
        Self {
            confidence: scores.confidence,
            stealthiness: scores.stealthiness,
            probabilities: scores.probabilities,
            query_index,
        }
    }
}

/// Per-pixel gradient with the layout of a [`RasterImage`] but unbounded values.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GradientField {
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// A scoring black box. Implementations are shared between concurrently
/// running attacks.
pub trait Oracle: Send + Sync {
    /// Scores `img` as an alteration of `source` impersonating `target`.
    fn score(&self, img: &RasterImage, source: usize, target: usize) -> Result<Scores>;

    /// Gradient of `log p(class | img)` with respect to the input pixels.
    fn gradient_log_prob(&self, _img: &RasterImage, _class: usize) -> Result<GradientField> {
        Err(Error::Unsupported(
            "this oracle does not expose gradients".to_string(),
        ))
    }

    fn num_classes(&self) -> usize {
        NUM_CLASSES
    }
}

/// Gradient of the target-class log probability.
pub fn gradient_log_confidence(
    oracle: &dyn Oracle,
    img: &RasterImage,
    target: usize,
) -> Result<GradientField> {
    oracle.gradient_log_prob(img, target)
}

/// Query accounting for one attack.
pub struct QuerySession<'a> {
    oracle: &'a dyn Oracle,
    source: usize,
    target: usize,
    budget: usize,
    used: AtomicUsize,
}

impl<'a> QuerySession<'a> {
    pub fn new(oracle: &'a dyn Oracle, source: usize, target: usize, budget: usize) -> Result<Self> {
        let n = oracle.num_classes();
        if source >= n || target >= n {
            return Err(Error::invalid(format!("class ids must be below {n}")));
        }
        if source == target {
            return Err(Error::invalid("source and target class must differ"));
        }
        Ok(Self {
            oracle,
            source,
            target,
            budget,
            used: AtomicUsize::new(0),
        })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.used())
    }

    pub fn oracle(&self) -> &'a dyn Oracle {
        self.oracle
    }

    /// Issues one query. The budget slot is claimed before the oracle is
    /// called, so a failed call still counts against the budget.
    pub fn query(&self, img: &RasterImage) -> Result<QueryResult> {
        let claimed = self
            .used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| (u < self.budget).then_some(u + 1));
        let index = match claimed {
            Ok(prev) => prev + 1,
            Err(used) => {
                return Err(Error::BudgetExhausted {
                    used,
                    budget: self.budget,
                })
            }
        };
        let scores = self.oracle.score(img, self.source, self.target)?;
        Ok(QueryResult::from_scores(scores, index))
    }
}
