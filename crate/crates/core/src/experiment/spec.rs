//! Experiment specification, loaded from TOML.
//!
//! ```toml
//! name = "demo"
//! seed = 7
//! run_counts = [100, 200]
//!
//! [sensor]
//! board = "zcu104"          # chipwhisperer | zcu104 | vcu118 | aws-f1
//! placement = "adjacent"    # adjacent | cross-die | cross-slr
//! # noise_sigma = 30.0      # optional overrides of the board preset
//!
//! [stressors]
//! enabled = false
//! gain = 1.5
//!
//! [dataset]
//! kind = "mnist"            # mnist | fashion-mnist
//! selection = "one-per-class"   # or a list of image indices
//!
//! [perturbation]
//! kind = "none"             # none | constant-background | lsb-flip
//!
//! [attack]
//! threshold = "multi-otsu"  # valley | otsu | multi-otsu | <number>
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackParams;
use crate::bnn::{BinaryKernel3x3, BnnModel};
use crate::dataset::PixelPerturbation;
use crate::power::ActivityModel;
use crate::tdc::{Board, Envelope, Placement, SensorConfig};

use super::ExperimentError;

pub const DEFAULT_RUN_COUNTS: [usize; 6] = [100, 200, 500, 1000, 3000, 6000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_run_counts")]
    pub run_counts: Vec<usize>,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub stressors: Stressors,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "PixelPerturbation::none")]
    pub perturbation: PixelPerturbation,
    #[serde(default)]
    pub activity: ActivityModel,
    #[serde(default)]
    pub attack: AttackParams,
    #[serde(default)]
    pub model: ModelSpec,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_run_counts() -> Vec<usize> {
    DEFAULT_RUN_COUNTS.to_vec()
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: default_name(),
            seed: 0,
            run_counts: default_run_counts(),
            sensor: SensorSpec::default(),
            stressors: Stressors::default(),
            dataset: DatasetSpec::default(),
            perturbation: PixelPerturbation::none(),
            activity: ActivityModel::default(),
            attack: AttackParams::default(),
            model: ModelSpec::default(),
        }
    }
}

/// Board preset, placement and optional overrides of preset values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub board: Board,
    pub placement: Placement,
    pub noise_sigma: Option<f64>,
    pub attenuation: Option<f64>,
    pub r_pdn: Option<f64>,
    pub stage_delay_ps: Option<f64>,
    pub k_per_volt: Option<f64>,
    pub envelope: Option<Envelope>,
    pub misalignment: Option<i64>,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            board: Board::Zcu104,
            placement: Placement::Adjacent,
            noise_sigma: None,
            attenuation: None,
            r_pdn: None,
            stage_delay_ps: None,
            k_per_volt: None,
            envelope: None,
            misalignment: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stressors {
    pub enabled: bool,
    pub gain: f64,
}

impl Default for Stressors {
    fn default() -> Self {
        Self { enabled: false, gain: 1.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
}

impl DatasetKind {
    pub fn default_files(self) -> (PathBuf, PathBuf) {
        match self {
            DatasetKind::Mnist => (
                "data/mnist/t10k-images-idx3-ubyte".into(),
                "data/mnist/t10k-labels-idx1-ubyte".into(),
            ),
            DatasetKind::FashionMnist => (
                "data/fashion-mnist/fashion-sample-images-idx3-ubyte".into(),
                "data/fashion-mnist/fashion-sample-labels-idx1-ubyte".into(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSelection", into = "RawSelection")]
pub enum ImageSelection {
    OnePerClass,
    Ids(Vec<usize>),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawSelection {
    Name(String),
    Ids(Vec<usize>),
}

impl TryFrom<RawSelection> for ImageSelection {
    type Error = String;
    fn try_from(r: RawSelection) -> Result<Self, String> {
        match r {
            RawSelection::Name(s) if s == "one-per-class" => Ok(ImageSelection::OnePerClass),
            RawSelection::Name(s) => Err(format!("unknown selection '{s}'")),
            RawSelection::Ids(v) if v.is_empty() => Err("empty image selection".into()),
            RawSelection::Ids(v) => Ok(ImageSelection::Ids(v)),
        }
    }
}

impl From<ImageSelection> for RawSelection {
    fn from(s: ImageSelection) -> Self {
        match s {
            ImageSelection::OnePerClass => RawSelection::Name("one-per-class".into()),
            ImageSelection::Ids(v) => RawSelection::Ids(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Defaults to the bundled files for `kind`, relative to the working
    /// directory; relative paths in a spec file resolve against its folder.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub selection: ImageSelection,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { kind: DatasetKind::Mnist, images: None, labels: None, selection: ImageSelection::OnePerClass }
    }
}

impl DatasetSpec {
    pub fn files(&self) -> (PathBuf, PathBuf) {
        let (i, l) = self.kind.default_files();
        (self.images.clone().unwrap_or(i), self.labels.clone().unwrap_or(l))
    }
}

/// Where the observed kernel comes from: kernel 1 of layer 1 of a model file,
/// an explicit 9-bit pattern (bit i set means weight i is +1), or a
/// synthetic model drawn from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub kernel_bits: Option<u16>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { seed: 1, path: None, kernel_bits: None }
    }
}

impl ModelSpec {
    pub fn kernel(&self) -> Result<BinaryKernel3x3, ExperimentError> {
        if let Some(bits) = self.kernel_bits {
            if bits >= 512 {
                return Err(ExperimentError::InvalidSpec(format!("kernel_bits {bits} needs more than 9 bits")));
            }
            return Ok(BinaryKernel3x3::from_bits(bits));
        }
        let model = match &self.path {
            Some(p) => BnnModel::load(p)?,
            None => BnnModel::random(self.seed),
        };
        Ok(model.first_kernel())
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let spec: Self = toml::from_str(text).map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parse a spec file; relative dataset and model paths are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        rebase(&mut spec.dataset.images);
        rebase(&mut spec.dataset.labels);
        rebase(&mut spec.model.path);
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        if self.run_counts.is_empty() {
            return bad("run_counts is empty".into());
        }
        if self.run_counts[0] == 0 || self.run_counts.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("run_counts {:?} must be positive and strictly increasing", self.run_counts));
        }
        if self.stressors.enabled && !(self.stressors.gain.is_finite() && self.stressors.gain >= 1.0) {
            return bad(format!("stressor gain {} below 1", self.stressors.gain));
        }
        self.perturbation.validate().map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
        self.activity.validate().map_err(ExperimentError::InvalidSpec)?;
        self.sensor_config().validate()?;
        Ok(())
    }

    /// Board preset with placement, stressor gain and overrides applied.
    pub fn sensor_config(&self) -> SensorConfig {
        let s = &self.sensor;
        let mut cfg = SensorConfig::for_board(s.board).with_placement(s.placement);
        if let Some(v) = s.noise_sigma {
            cfg.noise_sigma = v;
        }
        if let Some(v) = s.attenuation {
            cfg.attenuation = v;
        }
        if let Some(v) = s.r_pdn {
            cfg.r_pdn = v;
        }
        if let Some(v) = s.stage_delay_ps {
            cfg.stage_delay_ps = v;
        }
        if let Some(v) = s.k_per_volt {
            cfg.k_per_volt = v;
        }
        if let Some(v) = s.envelope {
            cfg.envelope = v;
        }
        if let Some(v) = s.misalignment {
            cfg.misalignment = v;
        }
        if self.stressors.enabled {
            cfg.stressor_gain = self.stressors.gain;
        }
        cfg
    }

    /// Hash of everything that shapes the outputs except the seed, the run
    /// counts and the image selection.
    pub fn config_hash(&self) -> Result<String, ExperimentError> {
        #[derive(Serialize)]
        struct Hashed<'a> {
            sensor: SensorConfig,
            kernel: [i8; 9],
            dataset: DatasetKind,
            perturbation: &'a PixelPerturbation,
            activity: &'a ActivityModel,
            attack: &'a AttackParams,
        }
        let h = Hashed {
            sensor: self.sensor_config(),
            kernel: self.model.kernel()?.weights(),
            dataset: self.dataset.kind,
            perturbation: &self.perturbation,
            activity: &self.activity,
            attack: &self.attack,
        };
        let text = toml::to_string(&h).map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }
}
