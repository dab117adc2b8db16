//! Experiment configuration files: flat `key = value` lines under one
//! `[section]` per phase, `#` comments. Unknown sections or keys are errors,
//! and every parse failure carries `file:line`.
//!
//! All keys are optional; defaults reproduce the toy protocol (pentagon
//! classes, cosine schedule T=100, 1000 pretraining and 5000 personalization
//! iterations).

use std::path::{Path, PathBuf};

use crate::datagen::{DEFAULT_N_PER_CLASS, DEFAULT_RADIUS, DEFAULT_STD};
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::nn::Arch;
use crate::objectives::Norm;
use crate::trainer::{
    Method, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_PRIOR_WEIGHT,
    PERSONALIZE_ITERATIONS, PRETRAIN_ITERATIONS,
};

pub const DEFAULT_SWEEP_LAMBDAS: [f64; 5] = [0.0, 1.0, 100.0, 1000.0, 10000.0];
pub const DEFAULT_SWEEP_SEEDS: [u64; 3] = [1, 2, 3];

/// Dataset geometry and its dedicated generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DataParams {
    pub n_per_class: usize,
    pub radius: f64,
    pub std: f64,
    pub new_class_mean: [f64; 2],
    pub seed: u64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            n_per_class: DEFAULT_N_PER_CLASS,
            radius: DEFAULT_RADIUS,
            std: DEFAULT_STD,
            new_class_mean: [0.0, 0.0],
            seed: 0,
        }
    }
}

/// One training phase as configured on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseParams {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub method: Method,
    pub lambda: f64,
    pub prior_weight: f64,
    pub norm: Norm,
}

impl PhaseParams {
    fn pretrain_default() -> Self {
        PhaseParams {
            lr: DEFAULT_LR,
            iterations: PRETRAIN_ITERATIONS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 1,
            method: Method::Vanilla,
            lambda: 0.0,
            prior_weight: 0.0,
            norm: Norm::L2Squared,
        }
    }

    fn personalize_default() -> Self {
        PhaseParams {
            lr: DEFAULT_LR,
            iterations: PERSONALIZE_ITERATIONS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 1,
            method: Method::Lipschitz,
            lambda: 1.0,
            prior_weight: DEFAULT_PRIOR_WEIGHT,
            norm: Norm::L2Squared,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            lambdas: DEFAULT_SWEEP_LAMBDAS.to_vec(),
            seeds: DEFAULT_SWEEP_SEEDS.to_vec(),
            base: None,
            jobs: 1,
        }
    }
}

/// Full experiment configuration plus the raw text it was parsed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataParams,
    pub arch: Arch,
    pub schedule: ScheduleSpec,
    pub pretrain: PhaseParams,
    pub personalize: PhaseParams,
    pub sweep: SweepParams,
    /// Verbatim file contents, echoed into run manifests for replay.
    pub raw_text: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataParams::default(),
            arch: Arch::toy(),
            schedule: ScheduleSpec::toy(),
            pretrain: PhaseParams::pretrain_default(),
            personalize: PhaseParams::personalize_default(),
            sweep: SweepParams::default(),
            raw_text: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            raw_text: text.to_string(),
            ..ExperimentConfig::default()
        };
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("{origin}:{lineno}: unterminated section header"))
                })?;
                section = name.trim().to_string();
                if !["data", "model", "schedule", "pretrain", "personalize", "sweep"]
                    .contains(&section.as_str())
                {
                    return Err(Error::Config(format!(
                        "{origin}:{lineno}: unknown section [{section}]"
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{lineno}: expected `key = value`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)
                .map_err(|e| Error::Config(format!("{origin}:{lineno}: {e}")))?;
        }
        cfg.arch.timesteps = cfg.schedule.timesteps;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("invalid value '{value}' for {key}"))
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
            value
                .split(',')
                .map(|v| num::<T>(key, v.trim()))
                .collect()
        }

        match (section, key) {
            ("data", "n_per_class") => self.data.n_per_class = num(key, value)?,
            ("data", "radius") => self.data.radius = num(key, value)?,
            ("data", "std") => self.data.std = num(key, value)?,
            ("data", "new_class_x") => self.data.new_class_mean[0] = num(key, value)?,
            ("data", "new_class_y") => self.data.new_class_mean[1] = num(key, value)?,
            ("data", "seed") => self.data.seed = num(key, value)?,

            ("model", "hidden") => self.arch.hidden = num(key, value)?,
            ("model", "class_emb_dim") => self.arch.class_emb_dim = num(key, value)?,
            ("model", "time_emb_dim") => self.arch.time_emb_dim = num(key, value)?,
            ("model", "num_classes") => self.arch.num_classes = num(key, value)?,

            ("schedule", "timesteps") => self.schedule.timesteps = num(key, value)?,
            ("schedule", "offset") => self.schedule.offset = num(key, value)?,

            ("pretrain", "lr") => self.pretrain.lr = num(key, value)?,
            ("pretrain", "iterations") => self.pretrain.iterations = num(key, value)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = num(key, value)?,
            ("pretrain", "seed") => self.pretrain.seed = num(key, value)?,

            ("personalize", "lr") => self.personalize.lr = num(key, value)?,
            ("personalize", "iterations") => self.personalize.iterations = num(key, value)?,
            ("personalize", "batch_size") => self.personalize.batch_size = num(key, value)?,
            ("personalize", "seed") => self.personalize.seed = num(key, value)?,
            ("personalize", "method") => self.personalize.method = value.parse().map_err(|e| format!("{e}"))?,
            ("personalize", "lambda") => self.personalize.lambda = num(key, value)?,
            ("personalize", "prior_weight") => self.personalize.prior_weight = num(key, value)?,
            ("personalize", "norm") => self.personalize.norm = value.parse().map_err(|e| format!("{e}"))?,

            ("sweep", "lambdas") => self.sweep.lambdas = list(key, value)?,
            ("sweep", "seeds") => self.sweep.seeds = list(key, value)?,
            ("sweep", "base") => self.sweep.base = Some(PathBuf::from(value)),
            ("sweep", "jobs") => self.sweep.jobs = num(key, value)?,

            ("", _) => return Err(format!("key '{key}' outside any section")),
            _ => return Err(format!("unknown key '{key}' in section [{section}]")),
        }
        Ok(())
    }

    /// TrainConfig for the pretraining phase.
    pub fn pretrain_config(&self) -> TrainConfig {
        self.phase_config(&self.pretrain)
    }

    /// TrainConfig for the personalization phase.
    pub fn personalize_config(&self) -> TrainConfig {
        self.phase_config(&self.personalize)
    }

    fn phase_config(&self, phase: &PhaseParams) -> TrainConfig {
        TrainConfig {
            lr: phase.lr,
            iterations: phase.iterations,
            batch_size: phase.batch_size,
            lambda: phase.lambda,
            prior_weight: phase.prior_weight,
            norm: phase.norm,
            method: phase.method,
            seed: phase.seed,
            arch: self.arch,
            schedule: self.schedule,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_toy_defaults() {
        let cfg = ExperimentConfig::parse("", "test.ini").unwrap();
        assert_eq!(cfg.arch, Arch::toy());
        assert_eq!(cfg.schedule, ScheduleSpec::toy());
        assert_eq!(cfg.data.n_per_class, 1000);
        assert_eq!(cfg.pretrain.iterations, 1000);
        assert_eq!(cfg.personalize.iterations, 5000);
        assert_eq!(cfg.sweep.lambdas, DEFAULT_SWEEP_LAMBDAS.to_vec());
    }

    #[test]
    fn full_config_round_trips_values() {
        let text = "\
# toy experiment, narrowed
[data]
n_per_class = 100
radius = 3.5
std = 0.4
new_class_x = 1.0
new_class_y = -1.0
seed = 9

[model]
hidden = 32
class_emb_dim = 8
time_emb_dim = 4
num_classes = 7

[schedule]
timesteps = 50
offset = 0.01

[pretrain]
lr = 0.005
iterations = 200
batch_size = 32
seed = 4

[personalize]
method = prior
lambda = 2.5
prior_weight = 50
iterations = 300
seed = 5
norm = l1

[sweep]
lambdas = 0, 10, 100
seeds = 7, 8
jobs = 2
";
        let cfg = ExperimentConfig::parse(text, "test.ini").unwrap();
        assert_eq!(cfg.data.n_per_class, 100);
        assert_eq!(cfg.data.new_class_mean, [1.0, -1.0]);
        assert_eq!(cfg.arch.hidden, 32);
        assert_eq!(cfg.arch.num_classes, 7);
        // arch timesteps follow the schedule section
        assert_eq!(cfg.arch.timesteps, 50);
        assert_eq!(cfg.pretrain.lr, 0.005);
        assert_eq!(cfg.personalize.method, Method::Prior);
        assert_eq!(cfg.personalize.norm, Norm::L1);
        assert_eq!(cfg.sweep.lambdas, vec![0.0, 10.0, 100.0]);
        assert_eq!(cfg.sweep.seeds, vec![7, 8]);
        assert_eq!(cfg.sweep.jobs, 2);
        assert_eq!(cfg.raw_text, text);

        let tc = cfg.personalize_config();
        assert_eq!(tc.iterations, 300);
        assert_eq!(tc.prior_weight, 50.0);
        assert!(tc.validate().is_ok());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("[data]\nbogus_key = 1\n", "cfg.ini").unwrap_err();
        assert!(err.to_string().contains("cfg.ini:2"), "{err}");
        let err = ExperimentConfig::parse("\n\nnot a kv line\n", "cfg.ini").unwrap_err();
        assert!(err.to_string().contains("cfg.ini:3"), "{err}");
        let err = ExperimentConfig::parse("[nope]\n", "cfg.ini").unwrap_err();
        assert!(err.to_string().contains("cfg.ini:1"), "{err}");
        let err = ExperimentConfig::parse("[data]\nstd = abc\n", "cfg.ini").unwrap_err();
        assert!(err.to_string().contains("cfg.ini:2"), "{err}");
        let err = ExperimentConfig::parse("lr = 1\n", "cfg.ini").unwrap_err();
        assert!(err.to_string().contains("outside any section"), "{err}");
    }

    #[test]
    fn missing_file_is_config_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/x.ini")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
