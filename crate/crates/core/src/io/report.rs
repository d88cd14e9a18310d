//! Evaluation outputs: `roc.csv`, `scores.csv`, `open_set.csv`, `cmc.csv`
//! and `summary.txt`.

use std::path::Path;

use crate::error::Result;
use crate::eval::{EvalReport, OpenSetPoint, PairLabel, RocCurve, ScoredPair};
use crate::io::{format_float, write_atomic};

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,far,tar\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{}\n",
            format_float(p.threshold),
            format_float(p.far),
            format_float(p.tar)
        ));
    }
    out
}

pub fn scores_csv(scores: &[ScoredPair]) -> String {
    let mut out = String::from("template_id_1,template_id_2,label,score\n");
    for s in scores {
        let label = match s.pair.label {
            PairLabel::Match => "1",
            PairLabel::Nonmatch => "0",
            PairLabel::Unknown => "?",
        };
        out.push_str(&format!(
            "{},{},{label},{}\n",
            s.pair.template1,
            s.pair.template2,
            format_float(s.score)
        ));
    }
    out
}

pub fn open_set_csv(points: &[OpenSetPoint]) -> String {
    let mut out = String::from("threshold,fpir,tpir\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            format_float(p.threshold),
            format_float(p.fpir),
            format_float(p.tpir)
        ));
    }
    out
}

pub fn cmc_csv(ranks: &[(usize, f64)]) -> String {
    let mut out = String::from("rank,rate\n");
    for (k, r) in ranks {
        out.push_str(&format!("{k},{}\n", format_float(*r)));
    }
    out
}

pub fn summary_text(report: &EvalReport) -> String {
    let mut out = String::new();
    for line in report.summary_lines() {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Writes every artifact the report holds into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    if let Some(curve) = &report.roc {
        write_atomic(&dir.join("roc.csv"), roc_csv(curve).as_bytes())?;
    }
    if !report.pair_scores.is_empty() {
        write_atomic(
            &dir.join("scores.csv"),
            scores_csv(&report.pair_scores).as_bytes(),
        )?;
    }
    if let Some(points) = &report.open_set {
        write_atomic(&dir.join("open_set.csv"), open_set_csv(points).as_bytes())?;
    }
    if !report.rank_rates.is_empty() {
        write_atomic(&dir.join("cmc.csv"), cmc_csv(&report.rank_rates).as_bytes())?;
    }
    write_atomic(&dir.join("summary.txt"), summary_text(report).as_bytes())
}
