use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{MaskLibrary, MaskMode};
use crate::masks::{AlphaMask, AutoMaskConfig};
use crate::oracle::{FaceSet, Oracle, RemoteConfig, RemoteOracle, SimOracleConfig, SimulatedOracle, NUM_CLASSES};
use crate::pgd::PgdConfig;
use crate::similarity::SsimConfig;
use crate::toy::{self, CropBox};
use crate::{Error, Result};

/// Where the ten reference faces come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceSource {
    /// Generated portraits; masks and face boxes come with them.
    Toy { seed: u64 },
    /// `face_<id>.png` files.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleChoice {
    Simulated,
    Remote(RemoteConfig),
}

/// A campaign description, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub faces: FaceSource,
    /// Directory of `mask_<id>.png` manual masks. Toy faces ship their own.
    #[serde(default)]
    pub mask_dir: Option<PathBuf>,
    #[serde(default = "default_oracle")]
    pub oracle: OracleChoice,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_init")]
    pub init_queries: usize,
    /// `(source, target)` pairs to attack; all ordered pairs of distinct classes when absent.
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
    pub output_dir: PathBuf,
    /// Subdirectory of `output_dir` holding this run; `seed<seed>` when absent.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub simulated: SimOracleConfig,
    #[serde(default)]
    pub ssim: SsimConfig,
    #[serde(default)]
    pub auto_mask: AutoMaskConfig,
    #[serde(default)]
    pub pgd: PgdConfig,
    /// Embedding size of the simulated oracle that PGD results are transferred to.
    #[serde(default = "default_transfer_embed")]
    pub transfer_embed_size: usize,
    /// Per-key query cap enforced by `serve`.
    #[serde(default)]
    pub server_query_limit: Option<u64>,
}

fn default_oracle() -> OracleChoice {
    OracleChoice::Simulated
}
fn default_budget() -> usize {
    200
}
fn default_init() -> usize {
    50
}
fn default_concurrency() -> usize {
    4
}
fn default_transfer_embed() -> usize {
    32
}

impl RunConfig {
    /// Toy faces, simulated oracle, and default budgets.
    pub fn toy(face_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            faces: FaceSource::Toy { seed: face_seed },
            mask_dir: None,
            oracle: OracleChoice::Simulated,
            budget: default_budget(),
            init_queries: default_init(),
            pairs: None,
            output_dir: output_dir.into(),
            run_id: None,
            seed: 0,
            concurrency: default_concurrency(),
            simulated: SimOracleConfig::default(),
            ssim: SsimConfig::default(),
            auto_mask: AutoMaskConfig::default(),
            pgd: PgdConfig::default(),
            transfer_embed_size: default_transfer_embed(),
            server_query_limit: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.init_queries && self.init_queries < self.budget) {
            return Err(Error::Config(format!(
                "need 0 < init_queries ({}) < budget ({})",
                self.init_queries, self.budget
            )));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if let Some(pairs) = &self.pairs {
            for &(s, t) in pairs {
                check_pair(s, t)?;
            }
        }
        self.simulated.validate()?;
        self.ssim.validate()?;
        self.pgd.validate()?;
        Ok(())
    }

    /// The configured pairs, or every ordered pair of distinct classes.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        match &self.pairs {
            Some(p) => p.clone(),
            None => all_pairs(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        let id = self.run_id.clone().unwrap_or_else(|| format!("seed{}", self.seed));
        self.output_dir.join(id)
    }

    /// Loads faces and masks.
    pub fn workspace(&self) -> Result<Workspace> {
        let (faces, toy_masks, toy_boxes) = match &self.faces {
            FaceSource::Toy { seed } => {
                let t = toy::generate(*seed);
                (t.faces, Some(t.manual_masks), Some(t.face_boxes))
            }
            FaceSource::Dir(dir) => (FaceSet::load_dir(dir)?, None, None),
        };
        let manual = match &self.mask_dir {
            Some(dir) => Some(MaskLibrary::load_manual(dir, &faces)?),
            None => toy_masks,
        };
        let masks = MaskLibrary::new(&faces, manual, &self.auto_mask)?;
        let boxes = match toy_boxes {
            Some(b) => b,
            None => (0..faces.len()).map(|c| mask_bounds(masks.auto(c))).collect(),
        };
        Ok(Workspace { faces, masks, boxes })
    }

    pub fn simulated_oracle(&self, faces: &FaceSet) -> Result<SimulatedOracle> {
        SimulatedOracle::with_ssim(faces.clone(), self.simulated, self.ssim)
    }

    /// The oracle attacks are scored against.
    pub fn oracle(&self, faces: &FaceSet) -> Result<Box<dyn Oracle>> {
        Ok(match &self.oracle {
            OracleChoice::Simulated => Box::new(self.simulated_oracle(faces)?),
            OracleChoice::Remote(remote) => Box::new(RemoteOracle::new(remote.clone())?),
        })
    }
}

pub fn all_pairs() -> Vec<(usize, usize)> {
    (0..NUM_CLASSES)
        .flat_map(|s| (0..NUM_CLASSES).map(move |t| (s, t)))
        .filter(|(s, t)| s != t)
        .collect()
}

fn check_pair(s: usize, t: usize) -> Result<()> {
    if s == t || s >= NUM_CLASSES || t >= NUM_CLASSES {
        return Err(Error::Config(format!("invalid pair {s}:{t}")));
    }
    Ok(())
}

/// Parses `S:T`.
pub fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("pair `{text}` is not of the form S:T"));
    let (s, t) = text.split_once(':').ok_or_else(bad)?;
    let s = s.trim().parse().map_err(|_| bad())?;
    let t = t.trim().parse().map_err(|_| bad())?;
    check_pair(s, t)?;
    Ok((s, t))
}

/// Parses `manual`, `auto`, or `both`.
pub fn parse_modes(text: &str) -> Result<Vec<MaskMode>> {
    match text {
        "both" => Ok(vec![MaskMode::Manual, MaskMode::Auto]),
        other => Ok(vec![other.parse()?]),
    }
}

/// Faces and masks shared by every attack of a run.
pub struct Workspace {
    pub faces: FaceSet,
    pub masks: MaskLibrary,
    /// Face crop per class, used by PGD.
    pub boxes: Vec<CropBox>,
}

/// Bounding box of the nonzero part of `mask`; the whole image when empty.
fn mask_bounds(mask: &AlphaMask) -> CropBox {
    let (w, h) = (mask.width(), mask.height());
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 <= x0 || y1 <= y0 {
        return CropBox {
            x: 0,
            y: 0,
            width: w,
            height: h,
        };
    }
    CropBox {
        x: x0,
        y: y0,
        width: x1 - x0,
        height: y1 - y0,
    }
}
