use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{OracleChoice, RunConfig, Workspace};
use super::matrix::parallel_map;
use crate::oracle::{Oracle, RemoteOracle, SimOracleConfig, SimulatedOracle};
use crate::pgd::run_pgd;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdRecord {
    pub attack: String,
    /// Target is the surrogate's strict argmax and SSIM meets the floor.
    pub white_box_success: bool,
    pub surrogate_confidence: f64,
    pub stealthiness: f64,
    pub lambda: f64,
    /// Confidence the transfer oracle assigns to the target, when evaluated.
    pub transfer_confidence: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdSummary {
    pub run_dir: PathBuf,
    pub pairs: usize,
    pub white_box_successes: usize,
    pub mean_transfer_confidence: Option<f64>,
    pub max_transfer_confidence: Option<f64>,
    pub records: Vec<PgdRecord>,
}

/// The transfer evaluator: the configured remote oracle, or else a simulated
/// oracle whose embedding size differs from the surrogate's.
fn transfer_oracle(cfg: &RunConfig, ws: &Workspace) -> Result<Box<dyn Oracle>> {
    Ok(match &cfg.oracle {
        OracleChoice::Remote(remote) => Box::new(RemoteOracle::new(remote.clone())?),
        OracleChoice::Simulated => {
            let sim = SimOracleConfig {
                embed_size: cfg.transfer_embed_size,
                ..cfg.simulated
            };
            Box::new(SimulatedOracle::with_ssim(ws.faces.clone(), sim, cfg.ssim)?)
        }
    })
}

/// Runs PGD against the simulated surrogate for every configured pair and,
/// with `transfer`, scores each result on the transfer oracle. Writes
/// `pgd_<s>_<t>.png` and `pgd_summary.json` into the run directory.
pub fn run_pgd_batch(cfg: &RunConfig, transfer: bool) -> Result<PgdSummary> {
    cfg.validate()?;
    let ws = cfg.workspace()?;
    let surrogate = cfg.simulated_oracle(&ws.faces)?;
    let evaluator = if transfer { Some(transfer_oracle(cfg, &ws)?) } else { None };
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let pairs = cfg.pairs();

    let records = parallel_map(pairs.len(), cfg.concurrency, |i| {
        let (s, t) = pairs[i];
        let attack = format!("{s}->{t}");
        let outcome = run_pgd(&ws.faces, s, t, &surrogate, ws.boxes[s], &cfg.pgd, cfg.ssim).and_then(|out| {
            out.image.write_png(run_dir.join(format!("pgd_{s}_{t}.png")))?;
            let transfer_confidence = match &evaluator {
                Some(o) => Some(o.score(&out.image.quantize(), s, t)?.confidence),
                None => None,
            };
            Ok((out, transfer_confidence))
        });
        match outcome {
            Ok((out, transfer_confidence)) => PgdRecord {
                white_box_success: out.white_box_success(t, cfg.pgd.ssim_floor),
                surrogate_confidence: out.final_scores.confidence,
                stealthiness: out.final_scores.stealthiness,
                lambda: out.lambda,
                transfer_confidence,
                error: None,
                attack,
            },
            Err(e) => {
                log::error!("pgd {attack} failed: {e}");
                PgdRecord {
                    attack,
                    white_box_success: false,
                    surrogate_confidence: 0.0,
                    stealthiness: 0.0,
                    lambda: 0.0,
                    transfer_confidence: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });

    let transferred: Vec<f64> = records.iter().filter_map(|r| r.transfer_confidence).collect();
    let summary = PgdSummary {
        run_dir: run_dir.clone(),
        pairs: records.len(),
        white_box_successes: records.iter().filter(|r| r.white_box_success).count(),
        mean_transfer_confidence: (!transferred.is_empty())
            .then(|| transferred.iter().sum::<f64>() / transferred.len() as f64),
        max_transfer_confidence: transferred.iter().copied().reduce(f64::max),
        records,
    };
    let path = run_dir.join("pgd_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
