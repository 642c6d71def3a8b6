use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{mean, ExperimentSpec};
use crate::io::IoError;

/// One scored (image, run count) cell. Undefined scores (a constant
/// reconstruction) are empty fields and carry a flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: usize,
    pub label: Option<u8>,
    pub n_runs: usize,
    pub config_hash: String,
    pub seed: u64,
    pub board: String,
    pub placement: String,
    pub ccr: Option<f64>,
    pub ccr_norm_raw: Option<f64>,
    pub ccr_norm_denoised: Option<f64>,
    pub mssim_raw: Option<f64>,
    pub mssim_denoised: Option<f64>,
    pub threshold: f64,
    pub threshold_rule: String,
    pub flags: String,
}

pub fn rows_csv(rows: &[ReportRow]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "image_id",
            "label",
            "n_runs",
            "config_hash",
            "seed",
            "board",
            "placement",
            "ccr",
            "ccr_norm_raw",
            "ccr_norm_denoised",
            "mssim_raw",
            "mssim_denoised",
            "threshold",
            "threshold_rule",
            "flags",
        ])?;
    }
    w.into_inner().map_err(|e| IoError::Io(e.into_error()))
}

pub fn read_rows_csv(bytes: &[u8]) -> Result<Vec<ReportRow>, IoError> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(IoError::from)).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Per-image and mean scores, one column pair per run count.
pub fn markdown_report(spec: &ExperimentSpec, hash: &str, rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", spec.name);
    let _ = writeln!(
        s,
        "board `{}`, placement `{}`, dataset `{:?}`, seed {}, config `{hash}`\n",
        spec.sensor.board.name(),
        spec.sensor.placement.name(),
        spec.dataset.kind,
        spec.seed
    );
    let mut by_image: BTreeMap<usize, BTreeMap<usize, &ReportRow>> = BTreeMap::new();
    for r in rows {
        by_image.entry(r.image_id).or_default().insert(r.n_runs, r);
    }
    let _ = writeln!(s, "Normalized cross-correlation, without / with denoising:\n");
    let mut header = String::from("| image | label |");
    let mut rule = String::from("|---|---|");
    for n in &spec.run_counts {
        let _ = write!(header, " {n} raw | {n} denoised |");
        rule.push_str("---|---|");
    }
    let _ = writeln!(s, "{header}\n{rule}");
    for (id, cells) in &by_image {
        let label = cells.values().next().and_then(|r| r.label).map_or("-".into(), |l| l.to_string());
        let _ = write!(s, "| {id} | {label} |");
        for n in &spec.run_counts {
            let r = cells.get(n);
            let _ = write!(
                s,
                " {} | {} |",
                cell(r.and_then(|r| r.ccr_norm_raw)),
                cell(r.and_then(|r| r.ccr_norm_denoised))
            );
        }
        s.push('\n');
    }
    let _ = write!(s, "| mean | |");
    for n in &spec.run_counts {
        let at: Vec<&ReportRow> = rows.iter().filter(|r| r.n_runs == *n).collect();
        let raw = mean(at.iter().map(|r| r.ccr_norm_raw.unwrap_or(0.0)));
        let den = mean(at.iter().map(|r| r.ccr_norm_denoised.unwrap_or(0.0)));
        let _ = write!(s, " {raw:.3} | {den:.3} |");
    }
    s.push_str("\n\nMean MSSIM (denoised):\n\n| runs | mssim |\n|---|---|\n");
    for n in &spec.run_counts {
        let m = mean(rows.iter().filter(|r| r.n_runs == *n).map(|r| r.mssim_denoised.unwrap_or(0.0)));
        let _ = writeln!(s, "| {n} | {m:.3} |");
    }
    let flagged: Vec<String> = rows
        .iter()
        .filter(|r| !r.flags.is_empty())
        .map(|r| format!("- image {} at {} runs: {}", r.image_id, r.n_runs, r.flags))
        .collect();
    if !flagged.is_empty() {
        s.push_str("\nFlags:\n\n");
        s.push_str(&flagged.join("\n"));
        s.push('\n');
    }
    s
}
