use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::log::AttackRecordLine;
use crate::attack::{MaskMode, STEALTH_THRESHOLD};

/// The query chosen to represent one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub attack: String,
    pub mode: MaskMode,
    pub query_index: usize,
    pub confidence: f64,
    pub stealthiness: f64,
}

impl Selection {
    fn of(r: &AttackRecordLine) -> Self {
        Self {
            attack: r.attack.clone(),
            mode: r.mode(),
            query_index: r.query_index,
            confidence: r.confidence,
            stealthiness: r.stealthiness,
        }
    }

    /// Higher confidence wins, then higher stealthiness.
    fn beats(&self, other: &Selection) -> bool {
        self.confidence > other.confidence
            || (self.confidence == other.confidence && self.stealthiness > other.stealthiness)
    }
}

/// Per attack, the successful query with stealthiness at least `tau` that has
/// the highest confidence (ties go to higher stealthiness, then to the
/// earlier query).
pub fn select_best<'a>(
    records: impl IntoIterator<Item = &'a AttackRecordLine>,
    tau: f64,
) -> BTreeMap<String, Selection> {
    let mut best: BTreeMap<String, Selection> = BTreeMap::new();
    for r in records {
        if !r.success || r.stealthiness < tau {
            continue;
        }
        let cand = Selection::of(r);
        match best.get(&r.attack) {
            Some(cur) if !cand.beats(cur) => {}
            _ => {
                best.insert(r.attack.clone(), cand);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: MaskMode,
    /// Attacks that appear in the log.
    pub attacks: usize,
    /// Attacks with at least one successful query.
    pub successes: usize,
    pub total_confidence: f64,
    pub total_stealthiness: f64,
    /// Mean over successful attacks of the index of their first success.
    pub mean_first_success: Option<f64>,
    pub selections: Vec<Selection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub attacks: usize,
    pub successes: usize,
    pub total_confidence: f64,
    pub total_stealthiness: f64,
    pub selections: Vec<Selection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub modes: Vec<ModeReport>,
    /// Per attack, the better selection over all modes present.
    pub combined: Option<CombinedReport>,
}

fn totals(sel: &BTreeMap<String, Selection>) -> (f64, f64) {
    sel.values()
        .fold((0.0, 0.0), |(c, s), v| (c + v.confidence, s + v.stealthiness))
}

pub fn report(records: &[AttackRecordLine]) -> Report {
    let mut by_mode: BTreeMap<MaskMode, Vec<&AttackRecordLine>> = BTreeMap::new();
    for r in records {
        by_mode.entry(r.mode()).or_default().push(r);
    }
    if by_mode.is_empty() {
        return Report::default();
    }
    let mut modes = Vec::new();
    let mut combined: BTreeMap<String, Selection> = BTreeMap::new();
    let mut all_attacks: BTreeMap<&str, ()> = BTreeMap::new();
    for (mode, recs) in &by_mode {
        let mut attacks: BTreeMap<&str, Option<usize>> = BTreeMap::new();
        for r in recs {
            all_attacks.insert(&r.attack, ());
            let first = attacks.entry(&r.attack).or_insert(None);
            if r.success {
                *first = Some(first.map_or(r.query_index, |f| f.min(r.query_index)));
            }
        }
        let firsts: Vec<usize> = attacks.values().flatten().copied().collect();
        let sel = select_best(recs.iter().copied(), STEALTH_THRESHOLD);
        let (c, s) = totals(&sel);
        for (k, v) in &sel {
            match combined.get(k) {
                Some(cur) if !v.beats(cur) => {}
                _ => {
                    combined.insert(k.clone(), v.clone());
                }
            }
        }
        modes.push(ModeReport {
            mode: *mode,
            attacks: attacks.len(),
            successes: firsts.len(),
            total_confidence: c,
            total_stealthiness: s,
            mean_first_success: (!firsts.is_empty())
                .then(|| firsts.iter().sum::<usize>() as f64 / firsts.len() as f64),
            selections: sel.into_values().collect(),
        });
    }
    let (c, s) = totals(&combined);
    Report {
        modes,
        combined: Some(CombinedReport {
            attacks: all_attacks.len(),
            successes: combined.len(),
            total_confidence: c,
            total_stealthiness: s,
            selections: combined.into_values().collect(),
        }),
    }
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.modes.is_empty() {
            out.push_str("no queries logged\n");
            return out;
        }
        for m in &self.modes {
            let first = m
                .mean_first_success
                .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<8} success {}/{}  confidence {:.6}  stealthiness {:.6}  mean first success {}",
                m.mode, m.successes, m.attacks, m.total_confidence, m.total_stealthiness, first
            );
        }
        if let Some(c) = &self.combined {
            let _ = writeln!(
                out,
                "{:<8} success {}/{}  confidence {:.6}  stealthiness {:.6}",
                "combined", c.successes, c.attacks, c.total_confidence, c.total_stealthiness
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub total_confidence: f64,
    pub total_stealthiness: f64,
    pub dropped_attacks: usize,
}

/// `steps` evenly spaced values from `min` to `max` inclusive.
pub fn thresholds(min: f64, max: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![min],
        n => (0..n)
            .map(|i| if i + 1 == n { max } else { min + (max - min) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Confidence/stealthiness totals as the stealthiness floor rises. Records of
/// all modes for the same attack are pooled; attacks with no qualifying query
/// add nothing and are counted as dropped.
pub fn tradeoff_curve(records: &[AttackRecordLine], taus: &[f64]) -> Vec<CurvePoint> {
    let attacks: BTreeMap<&str, ()> = records.iter().map(|r| (r.attack.as_str(), ())).collect();
    taus.iter()
        .map(|&tau| {
            let sel = select_best(records, tau);
            let (c, s) = totals(&sel);
            CurvePoint {
                threshold: tau,
                total_confidence: c,
                total_stealthiness: s,
                dropped_attacks: attacks.len() - sel.len(),
            }
        })
        .collect()
}

pub const CURVE_HEADER: &str = "threshold,total_confidence,total_stealthiness,dropped_attacks";
pub const SCATTER_HEADER: &str = "attack,cx,cy,theta,confidence,stealthiness,success";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.threshold, p.total_confidence, p.total_stealthiness, p.dropped_attacks
        );
    }
    out
}

/// One row per successful query.
pub fn scatter_export(records: &[AttackRecordLine]) -> String {
    let mut out = format!("{SCATTER_HEADER}\n");
    for r in records.iter().filter(|r| r.success) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.attack, r.params.cx, r.params.cy, r.params.theta, r.confidence, r.stealthiness, r.success
        );
    }
    out
}
