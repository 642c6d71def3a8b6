//! End-to-end experiment driver: simulate, capture, attack, score, persist.

mod report;
mod spec;
mod studies;

pub use report::{markdown_report, read_rows_csv, rows_csv, ReportRow};
pub use spec::{
    DatasetKind, DatasetSpec, ExperimentSpec, ImageSelection, ModelSpec, SensorSpec, Stressors, DEFAULT_RUN_COUNTS,
};
pub use studies::{
    compare_placements, mean_by, robustness_study, spearman, sweep_runs, to_csv, PlacementRow, RobustnessRow,
    RobustnessStudy, SweepPoint,
};

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::attack::{attack_averaged, AttackError, AveragedTrace, RecoveredImage};
use crate::bnn::{BinaryKernel3x3, BnnError};
use crate::dataset::{self, perturb, perturb_with_rng, DatasetError, Image, PIXELS, SIDE};
use crate::io::{self, IoError};
use crate::metrics::{ccr, ccr_norm, mssim, MetricError, DEFAULT_WINDOW};
use crate::power::simulate_first_kernel_trace;
use crate::tdc::{capture_run, noiseless_hw, run_rng, voltage_drop, CalibratedSensor, TdcError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("dataset unavailable: {0}")]
    MissingDataset(String),
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sensor(#[from] TdcError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] BnnError),
    #[error(transparent)]
    Output(#[from] IoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An image under attack with its dataset index.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: usize,
    pub image: Image,
}

pub fn load_subjects(spec: &ExperimentSpec) -> Result<Vec<Subject>, ExperimentError> {
    let (images_path, labels_path) = spec.dataset.files();
    for p in [&images_path, &labels_path] {
        if !p.exists() {
            return Err(ExperimentError::MissingDataset(p.display().to_string()));
        }
    }
    let count = dataset::idx_image_count(&images_path)?;
    let images = dataset::load_labeled(&images_path, &labels_path, count)?;
    let ids = match &spec.dataset.selection {
        ImageSelection::OnePerClass => dataset::first_of_each_class(&images),
        ImageSelection::Ids(ids) => ids.clone(),
    };
    ids.into_iter()
        .map(|id| {
            images
                .get(id)
                .cloned()
                .map(|image| Subject { id, image })
                .ok_or_else(|| ExperimentError::InvalidSpec(format!("image {id} beyond the {count} in the dataset")))
        })
        .collect()
}

/// Independent seed per (experiment seed, stream tag, image).
pub fn derive_seed(seed: u64, tag: u64, image_id: usize) -> u64 {
    let mut z = seed ^ tag.rotate_left(32) ^ (image_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NOISE_STREAM: u64 = 1;
const PERTURB_STREAM: u64 = 2;

/// Running averages of one image's captured runs, taken at each requested
/// run count. Smaller counts are prefixes of the largest batch. Stochastic
/// perturbations are redrawn for every run.
pub fn capture_averages(
    spec: &ExperimentSpec,
    subject: &Subject,
    kernel: &BinaryKernel3x3,
    sensor: &CalibratedSensor,
) -> Vec<AveragedTrace> {
    let max_runs = *spec.run_counts.last().expect("validated run counts");
    let noise_seed = derive_seed(spec.seed, NOISE_STREAM, subject.id);
    let perturb_seed = derive_seed(spec.perturbation.seed ^ spec.seed, PERTURB_STREAM, subject.id);
    let stochastic = spec.perturbation.is_stochastic();
    let power_for = |image: &Image| simulate_first_kernel_trace(image, kernel, &spec.activity);
    let fixed = (!stochastic).then(|| {
        let power = power_for(&perturb(&subject.image, &spec.perturbation));
        let clean = noiseless_hw(&voltage_drop(&power, &sensor.cfg), sensor);
        (power, clean)
    });

    let mut sums = vec![0u64; PIXELS];
    let mut out = Vec::with_capacity(spec.run_counts.len());
    let mut next = spec.run_counts.iter().peekable();
    const CHUNK: usize = 256;
    let mut done = 0usize;
    while done < max_runs {
        let end = (done + CHUNK).min(max_runs);
        let traces: Vec<Vec<u16>> = (done..end)
            .into_par_iter()
            .map(|run| {
                let run = run as u64;
                let mut rng = run_rng(noise_seed, run);
                match &fixed {
                    Some((power, clean)) => capture_run(power, Some(clean), sensor, &mut rng, run).hw,
                    None => {
                        let img = perturb_with_rng(&subject.image, &spec.perturbation.kind, &mut run_rng(perturb_seed, run));
                        capture_run(&power_for(&img), None, sensor, &mut rng, run).hw
                    }
                }
            })
            .collect();
        for (k, t) in traces.iter().enumerate() {
            for (s, &h) in sums.iter_mut().zip(t) {
                *s += u64::from(h);
            }
            let n = done + k + 1;
            if next.peek() == Some(&&n) {
                next.next();
                out.push(AveragedTrace { values: sums.iter().map(|&s| s as f64 / n as f64).collect(), n_runs: n });
            }
        }
        done = end;
    }
    out
}

/// The image a reconstruction is scored against: always the unperturbed
/// original.
pub fn reference_image(_spec: &ExperimentSpec, subject: &Subject) -> Image {
    subject.image.clone()
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub subject: Subject,
    pub recovered: RecoveredImage,
    pub row: ReportRow,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub cells: Vec<Cell>,
    pub artifacts: Vec<PathBuf>,
    pub elapsed: Duration,
}

impl ExperimentResult {
    pub fn rows_for(&self, n_runs: usize) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.n_runs == n_runs).collect()
    }

    /// Mean denoised ccr_norm at a run count; undefined scores count as 0.
    pub fn mean_denoised(&self, n_runs: usize) -> f64 {
        mean(self.rows_for(n_runs).iter().map(|r| r.ccr_norm_denoised.unwrap_or(0.0)))
    }

    pub fn mean_raw(&self, n_runs: usize) -> f64 {
        mean(self.rows_for(n_runs).iter().map(|r| r.ccr_norm_raw.unwrap_or(0.0)))
    }

    pub fn mean_mssim(&self, n_runs: usize) -> f64 {
        mean(self.rows_for(n_runs).iter().map(|r| r.mssim_denoised.unwrap_or(0.0)))
    }
}

pub(crate) fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn score(reference: &[f64], image: &[f64]) -> (Option<f64>, Option<f64>) {
    let c = ccr_norm(reference, image).ok();
    let m = mssim(reference, image, SIDE, SIDE, DEFAULT_WINDOW).ok();
    (c, m)
}

pub fn evaluate(
    spec: &ExperimentSpec,
    config_hash: &str,
    subject: &Subject,
    recovered: &RecoveredImage,
) -> ReportRow {
    let reference = reference_image(spec, subject).as_f64();
    let (raw, mssim_raw) = score(&reference, &recovered.binary);
    let (den, mssim_den) = score(&reference, &recovered.denoised);
    let mut flags = Vec::new();
    if recovered.degenerate {
        flags.push("degenerate-histogram");
    }
    if recovered.threshold.fallback {
        flags.push("threshold-fallback");
    }
    if !recovered.rof_converged {
        flags.push("rof-max-iter");
    }
    if raw.is_none() {
        flags.push("constant-reconstruction");
    }
    ReportRow {
        image_id: subject.id,
        label: subject.image.label,
        n_runs: recovered.averaged.n_runs,
        config_hash: config_hash.to_string(),
        seed: spec.seed,
        board: spec.sensor.board.name().to_string(),
        placement: spec.sensor.placement.name().to_string(),
        ccr: ccr(&reference, &recovered.denoised).ok(),
        ccr_norm_raw: raw,
        ccr_norm_denoised: den,
        mssim_raw,
        mssim_denoised: mssim_den,
        threshold: recovered.threshold.value,
        threshold_rule: recovered.threshold.rule.to_string(),
        flags: flags.join("|"),
    }
}

/// Runs every (image, run count) cell. With `out_dir` set, artifacts go to
/// `<out_dir>/<config-hash>/<image-id>/<runcount>/` and the summary to
/// `<out_dir>/<config-hash>/{summary.csv, report.md}`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentResult, ExperimentError> {
    spec.validate()?;
    let subjects = load_subjects(spec)?;
    run_on_subjects(spec, &subjects, out_dir)
}

pub fn run_on_subjects(
    spec: &ExperimentSpec,
    subjects: &[Subject],
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, ExperimentError> {
    let start = Instant::now();
    spec.validate()?;
    let hash = spec.config_hash()?;
    let kernel = spec.model.kernel()?;
    let sensor = CalibratedSensor::new(spec.sensor_config())?;

    let per_subject: Vec<Vec<Cell>> = subjects
        .par_iter()
        .map(|subject| {
            capture_averages(spec, subject, &kernel, &sensor)
                .into_iter()
                .map(|avg| {
                    let recovered = attack_averaged(avg, &spec.attack)?;
                    let row = evaluate(spec, &hash, subject, &recovered);
                    Ok(Cell { subject: subject.clone(), recovered, row })
                })
                .collect::<Result<Vec<_>, ExperimentError>>()
        })
        .collect::<Result<_, _>>()?;
    let cells: Vec<Cell> = per_subject.into_iter().flatten().collect();
    let rows: Vec<ReportRow> = cells.iter().map(|c| c.row.clone()).collect();

    let mut artifacts = Vec::new();
    if let Some(dir) = out_dir {
        let root = dir.join(&hash);
        for cell in &cells {
            artifacts.extend(write_cell(&root, cell, &hash)?);
        }
        let summary = root.join("summary.csv");
        io::write_atomic(&summary, &rows_csv(&rows)?)?;
        let report = root.join("report.md");
        io::write_atomic(&report, markdown_report(spec, &hash, &rows).as_bytes())?;
        let spec_copy = root.join("spec.toml");
        io::write_atomic(&spec_copy, spec.to_toml().as_bytes())?;
        artifacts.extend([summary, report, spec_copy]);
    }
    Ok(ExperimentResult { config_hash: hash, rows, cells, artifacts, elapsed: start.elapsed() })
}

pub fn write_cell(root: &Path, cell: &Cell, hash: &str) -> Result<Vec<PathBuf>, ExperimentError> {
    let dir = root.join(cell.subject.id.to_string()).join(cell.row.n_runs.to_string());
    let r = &cell.recovered;
    let meta = [("config-hash", hash.to_string()), ("n-runs", r.averaged.n_runs.to_string())];
    let mut files = vec![
        ("avg.csv", io::f64_series_csv("hw", &r.averaged.values, &meta)?),
        ("filtered.csv", io::f64_series_csv("filtered", &r.filtered.values, &meta)?),
        ("binary.pgm", dataset::encode_pgm(SIDE, SIDE, &r.binary)?),
        ("denoised.pgm", dataset::encode_pgm(SIDE, SIDE, &r.denoised)?),
        ("report.csv", rows_csv(std::slice::from_ref(&cell.row))?),
    ];
    if let Some(h) = &r.histogram {
        files.push(("hist.csv", io::histogram_csv(h)?));
    }
    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        io::write_atomic(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 2, 0));
        assert_eq!(derive_seed(5, 1, 3), derive_seed(5, 1, 3));
    }

    #[test]
    fn prefix_averages_match_requested_counts() {
        let mut spec = ExperimentSpec::default();
        spec.run_counts = vec![1, 3, 300];
        let subject = Subject { id: 0, image: Image::zeros() };
        let sensor = CalibratedSensor::new(spec.sensor_config()).unwrap();
        let avgs = capture_averages(&spec, &subject, &BinaryKernel3x3::all(1), &sensor);
        assert_eq!(avgs.iter().map(|a| a.n_runs).collect::<Vec<_>>(), vec![1, 3, 300]);
        assert!(avgs[0].values.iter().all(|v| v.fract() == 0.0));
    }
}
