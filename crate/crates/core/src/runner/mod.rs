//! Campaign orchestration: configuration, the attack matrix, persistence, and
//! post-processing of logs into reports, tradeoff curves, and scatter data.

mod config;
mod log;
mod matrix;
mod pgd_batch;
mod report;

pub use self::config::{all_pairs, parse_modes, parse_pair, FaceSource, OracleChoice, RunConfig, Workspace};
pub use self::log::{log_path, parse_attack_id, read_log, read_run, AttackRecordLine, JsonlSink};
pub use self::matrix::{attack_seed, run_matrix, run_matrix_with, write_outputs, AttackOutcome, RunSummary};
pub use self::pgd_batch::{run_pgd_batch, PgdRecord, PgdSummary};
pub use self::report::{
    curve_csv, report, scatter_export, select_best, thresholds, tradeoff_curve, CombinedReport, CurvePoint,
    ModeReport, Report, Selection, CURVE_HEADER, SCATTER_HEADER,
};
