//! Power-delivery-network voltage drop and delay-line (TDC) sensor model.
//!
//! Drop: `v[t] = attenuation * stressor_gain * r_pdn * P[t - offset] + envelope(t)`.
//!
//! Sensor: every delay element, including the adjustable initial delay, slows
//! down by `(1 + k * v)`. With initial delay `D0`, stage delay `d0` and clock
//! period `T` the captured Hamming weight is
//! `floor((T - D0 (1 + k v)) / (d0 (1 + k v)))`, clamped to `[0, stages]`,
//! plus rounded Gaussian noise, clamped again.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::BinaryKernel3x3;
use crate::dataset::Image;
use crate::power::{simulate_first_kernel_trace, ActivityModel, PowerTrace};

#[derive(Debug, Error, PartialEq)]
pub enum TdcError {
    #[error("unsatisfiable calibration: {0}")]
    UnsatisfiableCalibration(String),
    #[error("invalid sensor configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Board {
    Chipwhisperer,
    Zcu104,
    Vcu118,
    AwsF1,
}

impl Board {
    pub const ALL: [Board; 4] = [Board::Chipwhisperer, Board::Zcu104, Board::Vcu118, Board::AwsF1];

    pub fn clock_mhz(self) -> f64 {
        match self {
            Board::Chipwhisperer => 50.0,
            Board::Zcu104 => 120.0,
            Board::Vcu118 => 100.0,
            Board::AwsF1 => 120.0,
        }
    }

    /// Artix-7 carry stages are close to 25 ps; UltraScale+ defaults to 10 ps.
    pub fn stage_delay_ps(self) -> f64 {
        match self {
            Board::Chipwhisperer => 25.0,
            _ => 10.0,
        }
    }

    pub fn envelope(self) -> Envelope {
        match self {
            Board::Chipwhisperer => Envelope::Exponential { amplitude: 1.5e-3, time_constant: 250.0 },
            Board::Zcu104 => Envelope::Exponential { amplitude: 1.0e-3, time_constant: 400.0 },
            Board::Vcu118 => Envelope::Exponential { amplitude: 1.0e-3, time_constant: 350.0 },
            Board::AwsF1 => Envelope::Exponential { amplitude: 1.2e-3, time_constant: 400.0 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Board::Chipwhisperer => "chipwhisperer",
            Board::Zcu104 => "zcu104",
            Board::Vcu118 => "vcu118",
            Board::AwsF1 => "aws-f1",
        }
    }
}

impl std::str::FromStr for Board {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Board::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown board '{s}' (expected chipwhisperer, zcu104, vcu118 or aws-f1)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Adjacent,
    CrossDie,
    CrossSlr,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Adjacent, Placement::CrossDie, Placement::CrossSlr];

    pub fn attenuation(self) -> f64 {
        match self {
            Placement::Adjacent => 1.0,
            Placement::CrossDie => 0.35,
            Placement::CrossSlr => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Adjacent => "adjacent",
            Placement::CrossDie => "cross-die",
            Placement::CrossSlr => "cross-slr",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Placement::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown placement '{s}' (expected adjacent, cross-die or cross-slr)"))
    }
}

/// Slow supply drift added to every drop, in volts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Envelope {
    None,
    /// `amplitude * exp(-t / time_constant)`.
    Exponential { amplitude: f64, time_constant: f64 },
    /// `amplitude * (1 - cos(2 pi t / period)) / 2`, never negative.
    Sinusoidal { amplitude: f64, period: f64 },
}

impl Envelope {
    pub fn at(&self, t: usize) -> f64 {
        let t = t as f64;
        match *self {
            Envelope::None => 0.0,
            Envelope::Exponential { amplitude, time_constant } => amplitude * (-t / time_constant).exp(),
            Envelope::Sinusoidal { amplitude, period } => {
                amplitude * (1.0 - (2.0 * std::f64::consts::PI * t / period).cos()) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub stages: u32,
    pub stage_delay_ps: f64,
    pub clock_mhz: f64,
    /// Volts of drop per activity unit.
    pub r_pdn: f64,
    pub attenuation: f64,
    /// Standard deviation of the Hamming-weight noise.
    pub noise_sigma: f64,
    pub envelope: Envelope,
    /// Fractional delay increase per volt of drop.
    pub k_per_volt: f64,
    pub calibration_target: u32,
    pub stressor_gain: f64,
    /// Constant shift between the power trace and the sensor samples, cycles.
    pub misalignment: i64,
    /// Range of the adjustable delay stages in front of the carry chain.
    pub max_initial_delay_ns: f64,
    /// Drop at which calibration centres the sensor.
    pub nominal_drop: f64,
}

pub const DEFAULT_NOISE_SIGMA: f64 = 29.0;
pub const DEFAULT_R_PDN: f64 = 0.4e-3;
pub const DEFAULT_K_PER_VOLT: f64 = 2.0;

impl SensorConfig {
    pub fn for_board(board: Board) -> Self {
        Self {
            stages: 256,
            stage_delay_ps: board.stage_delay_ps(),
            clock_mhz: board.clock_mhz(),
            r_pdn: DEFAULT_R_PDN,
            attenuation: 1.0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            envelope: board.envelope(),
            k_per_volt: DEFAULT_K_PER_VOLT,
            calibration_target: 128,
            stressor_gain: 1.0,
            misalignment: 0,
            max_initial_delay_ns: 40.0,
            nominal_drop: 0.0,
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.attenuation = placement.attenuation();
        self
    }

    /// Zero noise, no envelope, unit attenuation.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.envelope = Envelope::None;
        self.attenuation = 1.0;
        self
    }

    pub fn clock_period_ns(&self) -> f64 {
        1e3 / self.clock_mhz
    }

    pub fn stage_delay_ns(&self) -> f64 {
        self.stage_delay_ps * 1e-3
    }

    pub fn validate(&self) -> Result<(), TdcError> {
        let bad = |m: String| Err(TdcError::InvalidConfig(m));
        if self.stages == 0 {
            return bad("stages must be positive".into());
        }
        if self.calibration_target > self.stages {
            return bad(format!("calibration target {} exceeds {} stages", self.calibration_target, self.stages));
        }
        for (name, v) in [
            ("stage_delay_ps", self.stage_delay_ps),
            ("clock_mhz", self.clock_mhz),
            ("max_initial_delay_ns", self.max_initial_delay_ns),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("r_pdn", self.r_pdn),
            ("noise_sigma", self.noise_sigma),
            ("k_per_volt", self.k_per_volt),
            ("nominal_drop", self.nominal_drop),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return bad(format!("attenuation {} outside (0, 1]", self.attenuation));
        }
        if !(self.stressor_gain.is_finite() && self.stressor_gain >= 1.0) {
            return bad(format!("stressor gain {} below 1", self.stressor_gain));
        }
        match self.envelope {
            Envelope::None => {}
            Envelope::Exponential { amplitude, time_constant: s } | Envelope::Sinusoidal { amplitude, period: s } => {
                if !(amplitude >= 0.0 && amplitude.is_finite() && s > 0.0 && s.is_finite()) {
                    return bad(format!("invalid envelope {:?}", self.envelope));
                }
            }
        }
        Ok(())
    }
}

/// Sensor with its adjustable initial delay fixed by [`calibrate`].
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedSensor {
    pub cfg: SensorConfig,
    pub initial_delay_ns: f64,
}

impl CalibratedSensor {
    pub fn new(cfg: SensorConfig) -> Result<Self, TdcError> {
        let d = calibrate(&cfg, cfg.nominal_drop)?;
        Ok(Self { cfg, initial_delay_ns: d })
    }

    /// Hamming weight before noise for a drop of `v` volts.
    pub fn hw_noiseless(&self, v: f64) -> u32 {
        let c = &self.cfg;
        let s = 1.0 + c.k_per_volt * v;
        let raw = ((c.clock_period_ns() - self.initial_delay_ns * s) / (c.stage_delay_ns() * s)).floor();
        raw.clamp(0.0, f64::from(c.stages)) as u32
    }
}

/// Initial delay that puts the expected Hamming weight at the calibration
/// target when the drop equals `nominal_drop`. The half-stage margin keeps
/// the target robust to floating-point rounding.
pub fn calibrate(cfg: &SensorConfig, nominal_drop: f64) -> Result<f64, TdcError> {
    cfg.validate()?;
    let s = 1.0 + cfg.k_per_volt * nominal_drop;
    let d = cfg.clock_period_ns() / s - (f64::from(cfg.calibration_target) + 0.5) * cfg.stage_delay_ns();
    if d < 0.0 {
        return Err(TdcError::UnsatisfiableCalibration(format!(
            "clock period {:.3} ns is shorter than {} stages of {} ps",
            cfg.clock_period_ns(),
            cfg.calibration_target,
            cfg.stage_delay_ps
        )));
    }
    if d > cfg.max_initial_delay_ns {
        return Err(TdcError::UnsatisfiableCalibration(format!(
            "needs {d:.3} ns of initial delay, adjustable range is {} ns",
            cfg.max_initial_delay_ns
        )));
    }
    Ok(d)
}

pub fn voltage_drop(power: &PowerTrace, cfg: &SensorConfig) -> Vec<f64> {
    drop_from_samples(&power.samples, cfg)
}

fn drop_from_samples(samples: &[f64], cfg: &SensorConfig) -> Vec<f64> {
    let gain = cfg.attenuation * cfg.stressor_gain * cfg.r_pdn;
    (0..samples.len())
        .map(|t| {
            let src = t as i64 - cfg.misalignment;
            let p = usize::try_from(src).ok().and_then(|i| samples.get(i)).copied().unwrap_or(0.0);
            gain * p + cfg.envelope.at(t)
        })
        .collect()
}

/// One captured sensor trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TdcTrace {
    pub hw: Vec<u16>,
    pub run_id: u64,
}

impl TdcTrace {
    pub fn len(&self) -> usize {
        self.hw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hw.is_empty()
    }
}

pub fn noiseless_hw(drops: &[f64], sensor: &CalibratedSensor) -> Vec<u32> {
    drops.iter().map(|&v| sensor.hw_noiseless(v)).collect()
}

/// Add rounded Gaussian noise to pre-noise weights.
pub fn add_noise<R: rand::Rng + ?Sized>(clean: &[u32], sensor: &CalibratedSensor, rng: &mut R, run_id: u64) -> TdcTrace {
    let stages = i64::from(sensor.cfg.stages);
    let sigma = sensor.cfg.noise_sigma;
    let hw = if sigma == 0.0 {
        clean.iter().map(|&h| h as u16).collect()
    } else {
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        clean
            .iter()
            .map(|&h| (i64::from(h) + normal.sample(rng).round() as i64).clamp(0, stages) as u16)
            .collect()
    };
    TdcTrace { hw, run_id }
}

pub fn sample_tdc<R: rand::Rng + ?Sized>(drops: &[f64], sensor: &CalibratedSensor, rng: &mut R) -> TdcTrace {
    add_noise(&noiseless_hw(drops, sensor), sensor, rng, 0)
}

/// RNG for run `run_id`: the stream index separates runs under one seed.
pub fn run_rng(seed: u64, run_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_id);
    rng
}

/// One run: draws the glitch jitter of `power` (if any), then sensor noise.
/// `clean` may carry the precomputed noiseless weights of a jitter-free trace.
pub fn capture_run<R: rand::Rng + ?Sized>(
    power: &PowerTrace,
    clean: Option<&[u32]>,
    sensor: &CalibratedSensor,
    rng: &mut R,
    run_id: u64,
) -> TdcTrace {
    if power.has_jitter() {
        let drops = drop_from_samples(&power.realize(rng), &sensor.cfg);
        add_noise(&noiseless_hw(&drops, sensor), sensor, rng, run_id)
    } else if let Some(c) = clean {
        add_noise(c, sensor, rng, run_id)
    } else {
        add_noise(&noiseless_hw(&voltage_drop(power, &sensor.cfg), sensor), sensor, rng, run_id)
    }
}

/// `n_runs` noise realisations of one power trace.
pub fn capture_runs(power: &PowerTrace, sensor: &CalibratedSensor, n_runs: usize, seed: u64) -> Vec<TdcTrace> {
    let clean = noiseless_hw(&voltage_drop(power, &sensor.cfg), sensor);
    (0..n_runs as u64)
        .into_par_iter()
        .map(|run| capture_run(power, Some(&clean), sensor, &mut run_rng(seed, run), run))
        .collect()
}

pub fn capture_image_runs(
    image: &Image,
    kernel: &BinaryKernel3x3,
    activity: &ActivityModel,
    sensor: &CalibratedSensor,
    n_runs: usize,
    seed: u64,
) -> Vec<TdcTrace> {
    capture_runs(&simulate_first_kernel_trace(image, kernel, activity), sensor, n_runs, seed)
}

/// Hamming weights per volt near the nominal drop, the sensor's small-signal gain.
pub fn sensitivity(sensor: &CalibratedSensor) -> f64 {
    let c = &sensor.cfg;
    let s = 1.0 + c.k_per_volt * c.nominal_drop;
    c.clock_period_ns() * c.k_per_volt / (c.stage_delay_ns() * s * s)
}
