use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Workspace};
use super::log::{log_path, parse_attack_id, read_run, AttackRecordLine, JsonlSink};
use super::report::{curve_csv, report, scatter_export, thresholds, tradeoff_curve, Report, Selection};
use crate::attack::{render, AttackSpec, MaskMode, PasteParams};
use crate::bayesopt::optimize;
use crate::oracle::Oracle;
use crate::{Error, Result};

/// Outcome of one `(source, target, mode)` campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub mode: MaskMode,
    pub seed: u64,
    pub queries: usize,
    pub best_objective: Option<f64>,
    /// Highest confidence among successful queries.
    pub best_success_confidence: Option<f64>,
    pub first_success: Option<usize>,
    /// Set when the campaign ended early or could not start.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub budget: usize,
    pub init_queries: usize,
    pub seed: u64,
    pub attacks: Vec<AttackOutcome>,
    pub report: Report,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one campaign, independent of scheduling order.
pub fn attack_seed(run_seed: u64, mode: MaskMode, source: usize, target: usize) -> u64 {
    let m = match mode {
        MaskMode::Manual => 1,
        MaskMode::Auto => 2,
    };
    mix64(mix64(run_seed) ^ (m << 16 | (source as u64) << 8 | target as u64))
}

/// Runs `job` over `0..n` on at most `workers` threads; results keep index order.
pub(crate) fn parallel_map<T: Send>(n: usize, workers: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = job(i);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs every configured pair in each of `modes`, logging each query to
/// `log_<mode>.jsonl` under the run directory, then writes the summary,
/// the tradeoff curve, the scatter export, and the best image per attack.
pub fn run_matrix(cfg: &RunConfig, modes: &[MaskMode]) -> Result<RunSummary> {
    cfg.validate()?;
    let ws = cfg.workspace()?;
    let oracle = cfg.oracle(&ws.faces)?;
    run_matrix_with(cfg, modes, &ws, oracle.as_ref())
}

/// [`run_matrix`] with preloaded faces and an explicit oracle.
pub fn run_matrix_with(cfg: &RunConfig, modes: &[MaskMode], ws: &Workspace, oracle: &dyn Oracle) -> Result<RunSummary> {
    cfg.validate()?;
    if modes.contains(&MaskMode::Manual) && !ws.masks.has_manual() {
        return Err(Error::Config("manual mode needs mask_dir (or toy faces)".into()));
    }
    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    let pairs = cfg.pairs();
    let mut outcomes = Vec::new();
    for &mode in modes {
        let sink = JsonlSink::create(log_path(&run_dir, mode))?;
        let done = AtomicUsize::new(0);
        let batch = parallel_map(pairs.len(), cfg.concurrency, |i| {
            let (s, t) = pairs[i];
            let out = run_one(cfg, ws, oracle, &sink, mode, s, t);
            let n = done.fetch_add(1, Ordering::SeqCst) + 1;
            log::info!(
                "[{mode}] {}/{} {}: first success {:?}{}",
                n,
                pairs.len(),
                out.attack,
                out.first_success,
                out.error.as_deref().map(|e| format!(", stopped: {e}")).unwrap_or_default()
            );
            out
        });
        outcomes.extend(batch);
    }

    let records = read_run(&run_dir)?;
    let rep = report(&records);
    write_outputs(&run_dir, &records)?;
    if let Some(combined) = &rep.combined {
        save_best_images(&run_dir, ws, &records, &combined.selections)?;
    }
    let summary = RunSummary {
        run_dir: run_dir.clone(),
        budget: cfg.budget,
        init_queries: cfg.init_queries,
        seed: cfg.seed,
        attacks: outcomes,
        report: rep,
    };
    write_file(&run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn run_one(
    cfg: &RunConfig,
    ws: &Workspace,
    oracle: &dyn Oracle,
    sink: &JsonlSink,
    mode: MaskMode,
    source: usize,
    target: usize,
) -> AttackOutcome {
    let spec = AttackSpec {
        source,
        target,
        mode,
        budget: cfg.budget,
        init_queries: cfg.init_queries,
    };
    let id = spec.id();
    let seed = attack_seed(cfg.seed, mode, source, target);
    let mut outcome = AttackOutcome {
        attack: id.clone(),
        mode,
        seed,
        queries: 0,
        best_objective: None,
        best_success_confidence: None,
        first_success: None,
        error: None,
    };
    let mut observer = |entry: &crate::bayesopt::HistoryEntry| {
        outcome.queries += 1;
        sink.append(&AttackRecordLine::from_entry(&id, entry))
    };
    match optimize(&spec, oracle, &ws.faces, &ws.masks, seed, &mut observer) {
        Ok(state) => {
            outcome.best_objective = state.best_so_far;
            outcome.first_success = state.first_success();
            outcome.best_success_confidence = state
                .history
                .iter()
                .filter(|h| h.success)
                .map(|h| h.result.confidence)
                .reduce(f64::max);
            outcome.error = state.termination;
        }
        Err(e) => {
            log::error!("attack {id} ({mode}) failed: {e}");
            outcome.error = Some(e.to_string());
        }
    }
    outcome
}

/// Writes `curve.csv` (τ from 0.5 to 1.0 in 51 steps) and `scatter.csv`.
pub fn write_outputs(run_dir: &Path, records: &[AttackRecordLine]) -> Result<()> {
    let curve = tradeoff_curve(records, &thresholds(0.5, 1.0, 51));
    write_file(&run_dir.join("curve.csv"), curve_csv(&curve))?;
    write_file(&run_dir.join("scatter.csv"), scatter_export(records))
}

fn save_best_images(run_dir: &Path, ws: &Workspace, records: &[AttackRecordLine], picks: &[Selection]) -> Result<()> {
    let index: BTreeMap<(&str, MaskMode, usize), &PasteParams> = records
        .iter()
        .map(|r| ((r.attack.as_str(), r.mode(), r.query_index), &r.params))
        .collect();
    for sel in picks {
        let Some(params) = index.get(&(sel.attack.as_str(), sel.mode, sel.query_index)) else {
            continue;
        };
        let Some((s, t)) = parse_attack_id(&sel.attack) else {
            continue;
        };
        let img = render(&ws.faces, &ws.masks, s, t, params)?;
        img.write_png(run_dir.join(format!("best_{s}_{t}.png")))?;
    }
    Ok(())
}
