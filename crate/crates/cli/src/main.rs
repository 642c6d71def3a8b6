use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tdcleak_core::attack::{run_attack, AttackParams, FilterKind, ThresholdRule};
use tdcleak_core::dataset::{self, read_pgm, SIDE};
use tdcleak_core::experiment::{
    self, compare_placements, load_subjects, markdown_report, robustness_study, run_experiment, sweep_runs,
    ExperimentSpec, ImageSelection, RobustnessStudy,
};
use tdcleak_core::io;
use tdcleak_core::metrics::similarity;
use tdcleak_core::power::simulate_first_kernel_trace;
use tdcleak_core::tdc::{capture_runs, Board, CalibratedSensor, Placement};

/// Remote power side-channel simulator: a TDC sensor watching the first
/// convolution of a binarized neural network accelerator.
#[derive(Parser)]
#[command(name = "tdcleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one image and write its power trace and captured sensor runs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Dataset index of the image (default: first selected image).
        #[arg(long)]
        image: Option<usize>,
    },
    /// Recover an image from a captured trace batch.
    Attack {
        /// Trace batch written by `simulate`.
        traces: PathBuf,
        #[command(flatten)]
        attack: AttackFlags,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Score the result against this PGM.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare two 28x28 PGM images.
    Metrics { a: PathBuf, b: PathBuf },
    /// Run every (image, run count) cell of a spec and write all artifacts.
    Experiment {
        /// Spec file (same as --config).
        spec: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Mean scores per run count.
    SweepRuns {
        #[command(flatten)]
        common: Common,
    },
    /// Same seeds and images under each sensor placement.
    ComparePlacements {
        #[command(flatten)]
        common: Common,
    },
    /// Background-replacement or low-bit-flip study.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "background")]
        study: Study,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Background,
    Flip1,
    Flip2,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    RunningMean,
    Butterworth,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    /// auto (valley), otsu, multi-otsu or a fixed value.
    #[arg(long)]
    threshold: Option<ThresholdRule>,
    #[arg(long)]
    no_denoise: bool,
}

impl AttackFlags {
    fn apply(&self, params: &mut AttackParams) {
        match self.filter {
            Some(FilterArg::RunningMean) => params.filter = FilterKind::default(),
            Some(FilterArg::Butterworth) => params.filter = FilterKind::Butterworth { cutoff: BUTTERWORTH_CUTOFF },
            None => {}
        }
        if let Some(t) = self.threshold {
            params.threshold = t;
        }
        if self.no_denoise {
            params.denoise = false;
        }
    }
}

/// Cutoff, as a fraction of the clock, used by `--filter butterworth`.
const BUTTERWORTH_CUTOFF: f64 = 0.05;

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    board: Option<Board>,
    #[arg(long)]
    placement: Option<Placement>,
    /// Comma-separated run counts.
    #[arg(long, value_delimiter = ',')]
    runs: Option<Vec<usize>>,
    /// Comma-separated dataset indices.
    #[arg(long, value_delimiter = ',')]
    images: Option<Vec<usize>>,
    #[command(flatten)]
    attack: AttackFlags,
}

impl Common {
    fn spec(&self, positional: Option<&Path>) -> Result<ExperimentSpec> {
        let path = match (positional, &self.config) {
            (Some(_), Some(_)) => bail!("give the spec either as an argument or with --config, not both"),
            (Some(p), None) => Some(p),
            (None, c) => c.as_deref(),
        };
        let mut spec = match path {
            Some(p) => ExperimentSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(b) = self.board {
            spec.sensor.board = b;
        }
        if let Some(p) = self.placement {
            spec.sensor.placement = p;
        }
        if let Some(r) = &self.runs {
            spec.run_counts = r.clone();
        }
        if let Some(ids) = &self.images {
            spec.dataset.selection = ImageSelection::Ids(ids.clone());
        }
        self.attack.apply(&mut spec.attack);
        spec.validate()?;
        Ok(spec)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, image } => simulate(&common, image),
        Command::Attack { traces, attack, out_dir, reference } => attack_cmd(&traces, &attack, &out_dir, reference.as_deref()),
        Command::Metrics { a, b } => metrics(&a, &b),
        Command::Experiment { spec, common } => {
            let spec = common.spec(spec.as_deref())?;
            let result = run_experiment(&spec, Some(&common.out_dir))?;
            print!("{}", markdown_report(&spec, &result.config_hash, &result.rows));
            println!("\nwrote {}", common.out_dir.join(&result.config_hash).display());
            Ok(())
        }
        Command::SweepRuns { common } => {
            let spec = common.spec(None)?;
            let subjects = load_subjects(&spec)?;
            let (result, curve) = sweep_runs(&spec, &subjects, Some(&common.out_dir))?;
            let bytes = experiment::to_csv(&curve)?;
            let path = common.out_dir.join(&result.config_hash).join("sweep.csv");
            io::write_atomic(&path, &bytes)?;
            print!("{}", String::from_utf8_lossy(&bytes));
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ComparePlacements { common } => {
            let spec = common.spec(None)?;
            let subjects = load_subjects(&spec)?;
            let rows = compare_placements(&spec, &Placement::ALL, &subjects, Some(&common.out_dir))?;
            let means = experiment::mean_by(&rows, |r| r.placement.clone(), |r| r.ccr_norm_denoised);
            let path = common.out_dir.join(format!("placements-{}.csv", spec.config_hash()?));
            io::write_atomic(&path, &experiment::to_csv(&rows)?)?;
            for (p, m) in means {
                println!("{p:<12} mean denoised ccr_norm {m:.3}");
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Robustness { common, study } => {
            let spec = common.spec(None)?;
            let subjects = load_subjects(&spec)?;
            let study = match study {
                Study::Background => RobustnessStudy::background_default(),
                Study::Flip1 => RobustnessStudy::bit_flip_default(1),
                Study::Flip2 => RobustnessStudy::bit_flip_default(2),
            };
            let rows = robustness_study(&spec, &study, &subjects, Some(&common.out_dir))?;
            let means = experiment::mean_by(&rows, |r| r.setting.clone(), |r| r.ccr_norm_denoised);
            let path = common.out_dir.join(format!("robustness-{}.csv", spec.config_hash()?));
            io::write_atomic(&path, &experiment::to_csv(&rows)?)?;
            for (s, m) in means {
                println!("{s:<16} mean denoised ccr_norm {m:.3}");
            }
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn simulate(common: &Common, image: Option<usize>) -> Result<()> {
    let mut spec = common.spec(None)?;
    if let Some(id) = image {
        spec.dataset.selection = ImageSelection::Ids(vec![id]);
    }
    let subject = load_subjects(&spec)?.into_iter().next().context("no image selected")?;
    let n_runs = *spec.run_counts.last().expect("validated");
    let hash = spec.config_hash()?;
    let kernel = spec.model.kernel()?;
    let sensor = CalibratedSensor::new(spec.sensor_config())?;
    let power = simulate_first_kernel_trace(&subject.image, &kernel, &spec.activity);
    let seed = experiment::derive_seed(spec.seed, 0, subject.id);
    let traces = capture_runs(&power, &sensor, n_runs, seed);

    let dir = common.out_dir.join(&hash).join(subject.id.to_string());
    io::write_atomic(dir.join("power.csv"), &io::power_trace_csv(&power, &hash)?)?;
    io::write_batch(dir.join("traces.tdcb"), &traces)?;
    dataset::write_image_pgm(dir.join("input.pgm"), &subject.image)?;
    println!(
        "image {} ({} runs, initial delay {:.3} ns) -> {}",
        subject.id,
        n_runs,
        sensor.initial_delay_ns,
        dir.display()
    );
    Ok(())
}

fn attack_cmd(traces: &Path, flags: &AttackFlags, out_dir: &Path, reference: Option<&Path>) -> Result<()> {
    let batch = io::read_batch(traces).with_context(|| format!("reading {}", traces.display()))?;
    let mut params = AttackParams::default();
    flags.apply(&mut params);
    let r = run_attack(&batch, &params)?;
    let meta = [("n-runs", r.averaged.n_runs.to_string())];
    io::write_atomic(out_dir.join("avg.csv"), &io::f64_series_csv("hw", &r.averaged.values, &meta)?)?;
    io::write_atomic(out_dir.join("filtered.csv"), &io::f64_series_csv("filtered", &r.filtered.values, &meta)?)?;
    if let Some(h) = &r.histogram {
        io::write_atomic(out_dir.join("hist.csv"), &io::histogram_csv(h)?)?;
    }
    io::write_atomic(out_dir.join("binary.pgm"), &dataset::encode_pgm(SIDE, SIDE, &r.binary)?)?;
    io::write_atomic(out_dir.join("denoised.pgm"), &dataset::encode_pgm(SIDE, SIDE, &r.denoised)?)?;
    println!("threshold {} ({}){}", r.threshold.value, r.threshold.rule, if r.degenerate { " degenerate" } else { "" });
    if let Some(p) = reference {
        let refi = load_square(p)?;
        let raw = similarity(&refi, &r.binary, SIDE, SIDE)?;
        let den = similarity(&refi, &r.denoised, SIDE, SIDE)?;
        println!("ccr_norm raw {:.6} denoised {:.6}", raw.ccr_norm, den.ccr_norm);
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn load_square(p: &Path) -> Result<Vec<f64>> {
    let (w, h, px) = read_pgm(p).with_context(|| format!("reading {}", p.display()))?;
    if (w, h) != (SIDE, SIDE) {
        bail!("{} is {w}x{h}, expected {SIDE}x{SIDE}", p.display());
    }
    Ok(px.into_iter().map(f64::from).collect())
}

fn metrics(a: &Path, b: &Path) -> Result<()> {
    let (x, y) = (load_square(a)?, load_square(b)?);
    let r = similarity(&x, &y, SIDE, SIDE)?;
    println!("ccr={:.6}", r.ccr);
    println!("ccr_norm={:.6}", r.ccr_norm);
    println!("mssim={:.6}", r.mssim);
    Ok(())
}
