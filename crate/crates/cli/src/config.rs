use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iceot_core::building::{Excitation, RcParams, SelectionConfig, MODEL_INPUTS, MODEL_OUTPUTS};
use iceot_core::convexity::FitConfig;
use iceot_core::mpc::{ClosedLoopConfig, MpcProblem, BENCH_HORIZONS};
use iceot_core::nn::{Architecture, ModelSpec};
use iceot_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Seed of every run unless the config says otherwise.
pub const DEFAULT_SEED: u64 = 42;

/// One document drives every command. Unknown keys are rejected and every
/// section seed is overwritten from `seed` when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub fit_surface: FitConfig,
    pub data: DataConfig,
    pub selection: SelectionSection,
    pub surrogate: SurrogateConfig,
    pub train: TrainSection,
    pub sweep: SweepConfig,
    pub mpc: MpcSection,
    pub bench: BenchSection,
    pub convexity: ConvexitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            output_dir: PathBuf::from("out"),
            fit_surface: FitConfig::default(),
            data: DataConfig::default(),
            selection: SelectionSection::default(),
            surrogate: SurrogateConfig::default(),
            train: TrainSection::default(),
            sweep: SweepConfig::default(),
            mpc: MpcSection::default(),
            bench: BenchSection::default(),
            convexity: ConvexitySection::default(),
        }
    }
}

/// Building data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub days: usize,
    pub excitation: Excitation,
    pub plant: RcParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            days: 14,
            excitation: Excitation::default(),
            plant: RcParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// CSV table to filter. Without it the generated building table is used
    /// with its next-step columns as targets.
    pub input: Option<PathBuf>,
    /// Target columns of `input`.
    pub targets: Vec<String>,
    pub config: SelectionConfig,
}

/// Hyperparameters shared by every building surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub sequence_length: usize,
    pub model_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub train: TrainConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            sequence_length: 12,
            model_dim: None,
            ff_dim: None,
            num_layers: None,
            num_heads: None,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                max_epochs: 60,
                patience: 10,
                grad_clip: Some(1.0),
                ..TrainConfig::default()
            },
        }
    }
}

impl SurrogateConfig {
    pub fn spec(&self, arch: Architecture, sequence_length: usize) -> ModelSpec {
        let mut s = ModelSpec::new(arch, MODEL_INPUTS, MODEL_OUTPUTS, sequence_length);
        if let Some(v) = self.model_dim {
            s.model_dim = v;
        }
        if let Some(v) = self.ff_dim {
            s.ff_dim = v;
        }
        if let Some(v) = self.num_layers {
            s.num_layers = v;
        }
        if let Some(v) = self.num_heads {
            s.num_heads = v;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub architectures: Vec<Architecture>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            architectures: vec![Architecture::IcEot, Architecture::IcLstm],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub architectures: Vec<Architecture>,
    pub lengths: Vec<usize>,
    /// Patience equals `max_epochs` so every cell runs the same number of
    /// epochs unless it fails.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            architectures: vec![Architecture::IcEot, Architecture::IcLstm],
            lengths: vec![5, 10, 15, 20, 25],
            train: TrainConfig {
                max_epochs: 100,
                patience: 100,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub architecture: Architecture,
    /// Trained surrogate; trained from the `surrogate` section when absent.
    pub checkpoint: Option<PathBuf>,
    pub problem: MpcProblem,
    pub closed_loop: ClosedLoopConfig,
    pub baseline_setpoint: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            architecture: Architecture::IcEot,
            checkpoint: None,
            problem: MpcProblem::default(),
            closed_loop: ClosedLoopConfig::default(),
            baseline_setpoint: 21.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub architectures: Vec<Architecture>,
    pub horizons: Vec<usize>,
    /// Per-architecture checkpoints keyed by label (`ic-eot`, ...).
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub max_iterations: Option<usize>,
    pub closed_loop: ClosedLoopConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            architectures: vec![Architecture::IcEot, Architecture::IcLstm],
            horizons: BENCH_HORIZONS.to_vec(),
            checkpoints: BTreeMap::new(),
            max_iterations: None,
            closed_loop: ClosedLoopConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexitySection {
    pub architectures: Vec<Architecture>,
    pub probes: usize,
    pub sequence_length: usize,
    pub days: usize,
    pub train: TrainConfig,
}

impl Default for ConvexitySection {
    fn default() -> Self {
        ConvexitySection {
            architectures: Architecture::ALL.to_vec(),
            probes: 1000,
            sequence_length: 4,
            days: 7,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                max_epochs: 20,
                patience: 20,
                ..TrainConfig::default()
            },
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(cfg_err)?;
        let c = c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read --config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copies the global seed into every section.
    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        self.fit_surface.train.seed = s;
        self.surrogate.train.seed = s;
        self.sweep.train.seed = s;
        self.convexity.train.seed = s;
        self.mpc.problem.solver.seed = s;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        for t in [
            &self.fit_surface.train,
            &self.surrogate.train,
            &self.sweep.train,
            &self.convexity.train,
        ] {
            t.validate()?;
        }
        self.data.plant.validate()?;
        self.mpc.problem.validate()?;
        if self.data.days == 0 || self.convexity.days == 0 {
            return Err(cfg_err("days must be ≥ 1"));
        }
        if self.surrogate.sequence_length == 0 || self.convexity.sequence_length == 0 {
            return Err(cfg_err("sequence_length must be ≥ 1"));
        }
        if self.sweep.lengths.contains(&0) || self.bench.horizons.contains(&0) {
            return Err(cfg_err("sweep lengths and bench horizons must be ≥ 1"));
        }
        if self.convexity.probes == 0 {
            return Err(cfg_err("convexity.probes must be ≥ 1"));
        }
        for key in self.bench.checkpoints.keys() {
            if Architecture::parse(key).is_none() {
                return Err(cfg_err(format!("bench.checkpoints has unknown architecture `{key}`")));
            }
        }
        if self.selection.input.is_some() && self.selection.targets.is_empty() {
            return Err(cfg_err("selection.input needs selection.targets"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the resolved config's JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
