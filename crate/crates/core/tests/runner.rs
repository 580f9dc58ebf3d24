use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use facepaste::attack::{MaskMode, MaskShape, PasteParams};
use facepaste::runner::{
    curve_csv, log_path, read_log, read_run, report, run_matrix, scatter_export, thresholds, tradeoff_curve,
    AttackRecordLine, RunConfig, CURVE_HEADER, SCATTER_HEADER,
};

fn line(attack: &str, q: usize, mode: MaskMode, c: f64, s: f64, success: bool) -> AttackRecordLine {
    let mask = match mode {
        MaskMode::Manual => MaskShape::Manual { bias: 0.5, slope: 10.0 },
        MaskMode::Auto => MaskShape::Auto { sigma: 3.0 },
    };
    AttackRecordLine {
        attack: attack.into(),
        query_index: q,
        params: PasteParams {
            cx: 64.0 + q as f64,
            cy: 60.0,
            sx: 1.0,
            sy: 1.0,
            theta: 0.0,
            mask,
        },
        confidence: c,
        stealthiness: s,
        objective: c + s.min(0.5),
        success,
        timestamp: "2026-01-01T00:00:00.000000Z".into(),
    }
}

fn synthetic() -> Vec<AttackRecordLine> {
    use MaskMode::*;
    vec![
        line("0->1", 1, Manual, 0.30, 0.90, false),
        line("0->1", 2, Manual, 0.60, 0.80, true),
        line("0->1", 3, Manual, 0.90, 0.55, true),
        line("0->1", 4, Manual, 0.95, 0.40, false),
        line("2->3", 1, Manual, 0.10, 0.95, false),
        line("2->3", 2, Manual, 0.20, 0.90, false),
        line("0->1", 1, Auto, 0.70, 0.70, true),
        line("2->3", 1, Auto, 0.40, 0.80, false),
        line("2->3", 2, Auto, 0.55, 0.60, true),
    ]
}

#[test]
fn report_totals_on_a_hand_built_log() {
    let rep = report(&synthetic());
    assert_eq!(rep.modes.len(), 2);
    let manual = &rep.modes[0];
    assert_eq!(manual.mode, MaskMode::Manual);
    assert_eq!((manual.attacks, manual.successes), (2, 1));
    assert_eq!(manual.total_confidence, 0.90);
    assert_eq!(manual.total_stealthiness, 0.55);
    assert_eq!(manual.mean_first_success, Some(2.0));

    let auto = &rep.modes[1];
    assert_eq!((auto.attacks, auto.successes), (2, 2));
    assert!((auto.total_confidence - 1.25).abs() < 1e-12);
    assert!((auto.total_stealthiness - 1.30).abs() < 1e-12);
    assert_eq!(auto.mean_first_success, Some(1.5));

    let both = rep.combined.as_ref().unwrap();
    assert_eq!((both.attacks, both.successes), (2, 2));
    assert!((both.total_confidence - (0.90 + 0.55)).abs() < 1e-12);
    assert!((both.total_stealthiness - (0.55 + 0.60)).abs() < 1e-12);
    assert_eq!(both.selections[0].mode, MaskMode::Manual);
    assert_eq!(both.selections[1].mode, MaskMode::Auto);
}

#[test]
fn single_attack_mean_first_success() {
    let mut log: Vec<_> = (1..=6).map(|q| line("4->5", q, MaskMode::Manual, 0.1, 0.9, false)).collect();
    log.push(line("4->5", 7, MaskMode::Manual, 0.6, 0.7, true));
    log.push(line("4->5", 8, MaskMode::Manual, 0.7, 0.7, true));
    let rep = report(&log);
    assert_eq!(rep.modes[0].mean_first_success, Some(7.0));
    assert_eq!(rep.modes[0].total_confidence, 0.7);
    assert!(report(&[]).modes.is_empty());
}

#[test]
fn tradeoff_curve_on_a_hand_built_log() {
    let curve = tradeoff_curve(&synthetic(), &[0.5, 0.6, 0.7, 0.8, 0.9]);
    let got: Vec<(f64, f64, usize)> = curve
        .iter()
        .map(|p| (p.total_confidence, p.total_stealthiness, p.dropped_attacks))
        .collect();
    // Modes are pooled per attack: 0->1 has successes at ss 0.80, 0.55, 0.70; 2->3 at 0.60.
    let expect = [
        (0.90 + 0.55, 0.55 + 0.60, 0),
        (0.70 + 0.55, 0.70 + 0.60, 0),
        (0.70, 0.70, 1),
        (0.60, 0.80, 1),
        (0.0, 0.0, 2),
    ];
    for (g, e) in got.iter().zip(&expect) {
        assert!((g.0 - e.0).abs() < 1e-12 && (g.1 - e.1).abs() < 1e-12 && g.2 == e.2, "{g:?} vs {e:?}");
    }
    let csv = curve_csv(&curve);
    assert_eq!(csv.lines().next(), Some(CURVE_HEADER));
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(3).unwrap().starts_with("0.7,0.7,0.7,1"));
}

#[test]
fn thresholds_hit_both_ends() {
    let t = thresholds(0.5, 1.0, 51);
    assert_eq!(t.len(), 51);
    assert_eq!((t[0], t[50]), (0.5, 1.0));
    assert!((t[10] - 0.6).abs() < 1e-12);
}

#[test]
fn scatter_lists_successful_queries() {
    let csv = scatter_export(&synthetic());
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some(SCATTER_HEADER));
    let rows: Vec<&str> = rows.collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "0->1,66,60,0,0.6,0.8,true");
}

fn small_config(dir: &Path, run_id: &str, concurrency: usize) -> RunConfig {
    let mut cfg = RunConfig::toy(1, dir);
    cfg.budget = 24;
    cfg.init_queries = 8;
    cfg.pairs = Some(vec![(0, 1), (6, 2), (9, 4)]);
    cfg.run_id = Some(run_id.into());
    cfg.seed = 77;
    cfg.concurrency = concurrency;
    cfg
}

fn without_time(records: Vec<AttackRecordLine>) -> BTreeMap<(String, usize, String), AttackRecordLine> {
    records
        .into_iter()
        .map(|mut r| {
            r.timestamp.clear();
            ((r.attack.clone(), r.query_index, r.mode().to_string()), r)
        })
        .collect()
}

#[test]
fn runs_are_deterministic_across_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let modes = [MaskMode::Manual, MaskMode::Auto];
    let a = run_matrix(&small_config(dir.path(), "a", 1), &modes).unwrap();
    let b = run_matrix(&small_config(dir.path(), "b", 3), &modes).unwrap();
    let ra = without_time(read_run(&a.run_dir).unwrap());
    let rb = without_time(read_run(&b.run_dir).unwrap());
    assert_eq!(ra.len(), 3 * 2 * 24);
    assert_eq!(ra, rb);
    assert_eq!(a.report, b.report);
    assert!(ra.values().all(|r| r.objective_is_consistent()));

    for name in ["log_manual.jsonl", "log_auto.jsonl", "summary.json", "curve.csv", "scatter.csv"] {
        assert!(a.run_dir.join(name).exists(), "{name}");
    }
    let curve = std::fs::read_to_string(a.run_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some(CURVE_HEADER));
    assert_eq!(curve.lines().count(), 52);
    let scatter = std::fs::read_to_string(a.run_dir.join("scatter.csv")).unwrap();
    let successes = ra.values().filter(|r| r.success).count();
    assert_eq!(scatter.lines().count(), successes + 1);
    for sel in &a.report.combined.as_ref().unwrap().selections {
        let (s, t) = facepaste::runner::parse_attack_id(&sel.attack).unwrap();
        assert!(a.run_dir.join(format!("best_{s}_{t}.png")).exists());
    }

    let mut other = small_config(dir.path(), "c", 2);
    other.seed = 78;
    let c = run_matrix(&other, &[MaskMode::Manual]).unwrap();
    let rc = without_time(read_run(&c.run_dir).unwrap());
    assert_ne!(rc.values().next().unwrap().params, ra.values().next().unwrap().params);
}

#[test]
fn pair_filter_limits_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), "one", 1);
    cfg.pairs = Some(vec![(3, 8)]);
    let summary = run_matrix(&cfg, &[MaskMode::Manual]).unwrap();
    assert_eq!(summary.attacks.len(), 1);
    assert_eq!(summary.attacks[0].attack, "3->8");
    assert_eq!(summary.attacks[0].queries, 24);
    assert_eq!(summary.report.modes[0].attacks, 1);
}

#[test]
fn killed_run_leaves_a_parseable_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "faces": {"toy": {"seed": 1}},
            "output_dir": dir.path(),
            "run_id": "killed",
            "pairs": [[0, 1], [1, 2], [2, 3], [3, 4]],
            "concurrency": 4,
        })
        .to_string(),
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_facepaste"))
        .args(["attack", "--config"])
        .arg(&config)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let log = log_path(&dir.path().join("killed"), MaskMode::Manual);
    let start = Instant::now();
    loop {
        let lines = std::fs::read_to_string(&log).map(|t| t.lines().count()).unwrap_or(0);
        if lines >= 120 || start.elapsed() > Duration::from_secs(120) {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();

    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().count() >= 120, "child wrote too little before the deadline");
    let records = read_log(&log).unwrap();
    let complete = text.lines().filter(|l| serde_json::from_str::<AttackRecordLine>(l).is_ok()).count();
    assert_eq!(records.len(), complete);
    assert!(records.len() + 1 >= text.lines().count());
    let mut per_attack: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in &records {
        per_attack.entry(&r.attack).or_default().push(r.query_index);
    }
    for (attack, idx) in per_attack {
        assert_eq!(idx, (1..=idx.len()).collect::<Vec<_>>(), "{attack}");
    }
}
