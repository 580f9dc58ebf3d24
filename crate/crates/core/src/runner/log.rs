use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attack::{self, MaskMode, PasteParams};
use crate::bayesopt::HistoryEntry;
use crate::{Error, Result};

/// One persisted query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecordLine {
    /// `"s->t"`.
    pub attack: String,
    pub query_index: usize,
    pub params: PasteParams,
    pub confidence: f64,
    pub stealthiness: f64,
    pub objective: f64,
    pub success: bool,
    /// UTC, RFC 3339.
    pub timestamp: String,
}

impl AttackRecordLine {
    pub fn from_entry(attack: &str, entry: &HistoryEntry) -> Self {
        Self {
            attack: attack.to_string(),
            query_index: entry.result.query_index,
            params: entry.params,
            confidence: entry.result.confidence,
            stealthiness: entry.result.stealthiness,
            objective: entry.objective,
            success: entry.success,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
        }
    }

    pub fn mode(&self) -> MaskMode {
        self.params.mode()
    }

    /// Whether the stored objective equals the one recomputed from the stored scores.
    pub fn objective_is_consistent(&self) -> bool {
        let recomputed = self.confidence + self.stealthiness.min(attack::STEALTH_THRESHOLD);
        recomputed.to_bits() == self.objective.to_bits()
    }

    /// `(source, target)` parsed from the attack id.
    pub fn pair(&self) -> Option<(usize, usize)> {
        parse_attack_id(&self.attack)
    }
}

/// Splits `"s->t"`.
pub fn parse_attack_id(id: &str) -> Option<(usize, usize)> {
    let (s, t) = id.split_once("->")?;
    Some((s.parse().ok()?, t.parse().ok()?))
}

pub fn log_path(run_dir: &Path, mode: MaskMode) -> PathBuf {
    run_dir.join(format!("log_{mode}.jsonl"))
}

/// Append-only JSONL writer shared by the workers of a run. Every record is
/// written with a single `write_all` and flushed before `append` returns.
pub struct JsonlSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlSink {
    /// Creates (truncating) the log at `path`.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &AttackRecordLine) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut file = self.file.lock().expect("log sink lock");
        file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a JSONL log. An unterminated final line (an interrupted write) is
/// skipped; any other malformed line is an error.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<AttackRecordLine>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let terminated = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !terminated => {
                log::warn!("{}: ignoring truncated final line", path.display());
            }
            Err(e) => return Err(Error::Config(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// All `log_<mode>.jsonl` files present in `run_dir`, concatenated in mode order.
pub fn read_run(run_dir: impl AsRef<Path>) -> Result<Vec<AttackRecordLine>> {
    let run_dir = run_dir.as_ref();
    if !run_dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", run_dir.display())));
    }
    let mut out = Vec::new();
    for mode in [MaskMode::Manual, MaskMode::Auto] {
        let path = log_path(run_dir, mode);
        if path.exists() {
            out.extend(read_log(&path)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::MaskShape;
    use proptest::prelude::*;

    fn record(q: usize, c: f64, s: f64) -> AttackRecordLine {
        AttackRecordLine {
            attack: "3->7".into(),
            query_index: q,
            params: PasteParams {
                cx: -12.25,
                cy: 70.0,
                sx: 1.1,
                sy: 0.9,
                theta: 3.5,
                mask: MaskShape::Manual { bias: 0.3, slope: 12.0 },
            },
            confidence: c,
            stealthiness: s,
            objective: c + s.min(0.5),
            success: false,
            timestamp: "2024-01-01T00:00:00Z".into(),
        }
    }

    proptest! {
        #[test]
        fn json_round_trip(
            c in 0.0f64..1.0, s in 0.0f64..1.0, cx in -300.0f64..300.0, sigma in 0.0f64..20.0,
            q in 1usize..1000, auto in any::<bool>(), success in any::<bool>(),
        ) {
            let mut r = record(q, c, s);
            r.params.cx = cx;
            r.success = success;
            if auto {
                r.params.mask = MaskShape::Auto { sigma };
            }
            let back: AttackRecordLine = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert!(back.objective_is_consistent());
        }
    }

    #[test]
    fn record_fields_and_pair() {
        let r = record(4, 0.25, 0.75);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["params"]["mask_mode"], "manual");
        assert_eq!(v["params"]["bias"], 0.3);
        assert_eq!(r.pair(), Some((3, 7)));
        assert_eq!(r.mode(), MaskMode::Manual);
        let mut bad = r.clone();
        bad.objective += 1e-12;
        assert!(!bad.objective_is_consistent());
    }

    #[test]
    fn sink_appends_lines_and_reader_skips_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log_manual.jsonl");
        let sink = JsonlSink::create(&path).unwrap();
        for q in 1..=3 {
            sink.append(&record(q, 0.1 * q as f64, 0.9)).unwrap();
        }
        let back = read_log(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.query_index).collect::<Vec<_>>(), vec![1, 2, 3]);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"attack\":\"3->7\",\"query_in");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 3);

        std::fs::write(&path, "not json\n").unwrap();
        assert!(read_log(&path).is_err());
    }
}
