use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mean, run_on_subjects, ExperimentError, ExperimentResult, ExperimentSpec, Subject};
use crate::dataset::{PerturbationKind, PixelPerturbation};
use crate::tdc::Placement;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_runs: usize,
    pub mean_ccr_norm_raw: f64,
    pub mean_ccr_norm_denoised: f64,
    pub mean_mssim_denoised: f64,
}

/// Mean scores per run count. Smaller counts reuse prefixes of the largest
/// batch.
pub fn sweep_runs(
    spec: &ExperimentSpec,
    subjects: &[Subject],
    out_dir: Option<&Path>,
) -> Result<(ExperimentResult, Vec<SweepPoint>), ExperimentError> {
    if spec.run_counts.len() < 2 {
        return Err(ExperimentError::InvalidSpec("a sweep needs at least two run counts".into()));
    }
    let result = run_on_subjects(spec, subjects, out_dir)?;
    let curve = spec
        .run_counts
        .iter()
        .map(|&n| SweepPoint {
            n_runs: n,
            mean_ccr_norm_raw: result.mean_raw(n),
            mean_ccr_norm_denoised: result.mean_denoised(n),
            mean_mssim_denoised: result.mean_mssim(n),
        })
        .collect();
    Ok((result, curve))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    crate::metrics::ccr_norm(&ranks(x), &ranks(y)).ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub placement: String,
    pub attenuation: f64,
    pub image_id: usize,
    pub n_runs: usize,
    pub ccr_norm_raw: Option<f64>,
    pub ccr_norm_denoised: Option<f64>,
}

/// Same seeds, images and run count for every placement; only the
/// attenuation differs. Uses the largest run count of `spec`.
pub fn compare_placements(
    spec: &ExperimentSpec,
    placements: &[Placement],
    subjects: &[Subject],
    out_dir: Option<&Path>,
) -> Result<Vec<PlacementRow>, ExperimentError> {
    let n = *spec.run_counts.last().ok_or_else(|| ExperimentError::InvalidSpec("no run counts".into()))?;
    let mut rows = Vec::new();
    for &p in placements {
        let mut s = spec.clone();
        s.sensor.placement = p;
        s.run_counts = vec![n];
        let attenuation = s.sensor_config().attenuation;
        let result = run_on_subjects(&s, subjects, out_dir)?;
        rows.extend(result.rows.iter().map(|r| PlacementRow {
            placement: p.name().to_string(),
            attenuation,
            image_id: r.image_id,
            n_runs: r.n_runs,
            ccr_norm_raw: r.ccr_norm_raw,
            ccr_norm_denoised: r.ccr_norm_denoised,
        }));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RobustnessStudy {
    /// Background replacement values; 0 is the unperturbed baseline.
    Background(Vec<u8>),
    /// Flip probabilities in [0, 1] for the given number of low bits.
    BitFlip { bits: u8, probabilities: Vec<f64> },
}

impl RobustnessStudy {
    pub fn background_default() -> Self {
        RobustnessStudy::Background(vec![0, 1, 10, 30, 50])
    }

    pub fn bit_flip_default(bits: u8) -> Self {
        RobustnessStudy::BitFlip { bits, probabilities: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] }
    }

    fn settings(&self, seed: u64) -> Result<Vec<(String, PixelPerturbation)>, ExperimentError> {
        match self {
            RobustnessStudy::Background(values) => Ok(values
                .iter()
                .map(|&v| {
                    let p = if v == 0 { PixelPerturbation::none() } else { PixelPerturbation::background(v) };
                    (format!("background={v}"), p)
                })
                .collect()),
            RobustnessStudy::BitFlip { bits, probabilities } => probabilities
                .iter()
                .map(|&p| {
                    let pert = PixelPerturbation::lsb_flip(p, *bits, seed)
                        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
                    let pert = if p == 0.0 { PixelPerturbation { kind: PerturbationKind::None, seed } } else { pert };
                    Ok((format!("flip{bits}={p}"), pert))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub setting: String,
    pub image_id: usize,
    pub n_runs: usize,
    pub ccr_norm_raw: Option<f64>,
    pub ccr_norm_denoised: Option<f64>,
}

/// One row per (setting, image) at the largest run count. Random flips are
/// redrawn for every run.
pub fn robustness_study(
    spec: &ExperimentSpec,
    study: &RobustnessStudy,
    subjects: &[Subject],
    out_dir: Option<&Path>,
) -> Result<Vec<RobustnessRow>, ExperimentError> {
    let n = *spec.run_counts.last().ok_or_else(|| ExperimentError::InvalidSpec("no run counts".into()))?;
    let mut rows = Vec::new();
    for (setting, pert) in study.settings(spec.perturbation.seed)? {
        let mut s = spec.clone();
        s.perturbation = pert;
        s.run_counts = vec![n];
        let result = run_on_subjects(&s, subjects, out_dir)?;
        rows.extend(result.rows.iter().map(|r| RobustnessRow {
            setting: setting.clone(),
            image_id: r.image_id,
            n_runs: r.n_runs,
            ccr_norm_raw: r.ccr_norm_raw,
            ccr_norm_denoised: r.ccr_norm_denoised,
        }));
    }
    Ok(rows)
}

/// Mean denoised score per distinct value of `key`, in first-seen order.
pub fn mean_by<R>(rows: &[R], key: impl Fn(&R) -> String, value: impl Fn(&R) -> Option<f64>) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        let k = key(r);
        if !order.contains(&k) {
            order.push(k);
        }
    }
    order
        .into_iter()
        .map(|k| {
            let m = mean(rows.iter().filter(|r| key(r) == k).map(|r| value(r).unwrap_or(0.0)));
            (k, m)
        })
        .collect()
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, crate::io::IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| crate::io::IoError::Io(e.into_error()))
}
