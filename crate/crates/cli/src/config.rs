//! Flat `key = value` experiment configuration: one key per line, `#`
//! comments, no nesting. Command-line `key=value` overrides take precedence
//! over file values; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use gflow_core::hypergrid::{GridSpec, HidingMask, MaskMode, ModeRegion};
use gflow_core::policy::{Encoding, Parametrization};
use gflow_core::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Random,
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskedSet {
    Both,
    MaskedOnly,
    UnmaskedOnly,
}

/// Everything a run needs, parseable from a flat key=value file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub grid_n: usize,
    /// "default" lattice, "none", or explicit regions.
    pub modes: Option<Vec<ModeRegion>>,
    pub losses: Vec<Parametrization>,
    pub masked: MaskedSet,
    pub mask_kind: MaskKind,
    pub hidden_count: usize,
    pub mask_seed: u64,
    pub mask_mode: MaskMode,
    pub mask_avoid_modes: bool,
    pub max_len: usize,
    pub iterations: u64,
    pub eval_every: u64,
    pub batch_size: usize,
    pub optimizer: String,
    pub lr: f64,
    pub lr_log_z: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epsilon_uniform: f64,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub hidden_layers: usize,
    pub encoding: Encoding,
    pub learn_backward: bool,
    /// Single-run loss for the `length` command.
    pub loss: Parametrization,
    pub post_hoc_rn: bool,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid_n: 8,
            modes: None, // None = default nine-mode lattice
            losses: vec![
                Parametrization::Tb,
                Parametrization::Db,
                Parametrization::FlDb,
            ],
            masked: MaskedSet::Both,
            mask_kind: MaskKind::Random,
            hidden_count: 48,
            mask_seed: 7,
            mask_mode: MaskMode::SkipTrajectory,
            mask_avoid_modes: false,
            max_len: 7,
            iterations: 6000,
            eval_every: 100,
            batch_size: 1,
            optimizer: "adam".into(),
            lr: 1e-3,
            lr_log_z: 1e-1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epsilon_uniform: 0.0,
            seeds: vec![0, 1, 2, 3, 4, 5, 6],
            width: 64,
            hidden_layers: 2,
            encoding: Encoding::OneHot,
            learn_backward: false,
            loss: Parametrization::Db,
            post_hoc_rn: false,
            out_dir: default_out_dir(),
            jobs: 0,
        }
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("GFLOW_LAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

impl ExperimentConfig {
    /// File values first, then command-line overrides on top of defaults.
    pub fn build(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    ConfigError(format!(
                        "{}:{}: expected key = value, got {raw:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override must be key=value, got {o:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut config = Self::default();
        for (k, v) in pairs {
            config.set(&k, &v)?;
        }
        Ok(config)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let err = |e: &dyn fmt::Display| ConfigError(format!("key {key}: {e}"));
        match key {
            "grid_n" => self.grid_n = value.parse().map_err(|e| err(&e))?,
            "modes" => {
                self.modes = match value {
                    "default" => None,
                    "none" => Some(Vec::new()),
                    explicit => Some(parse_modes(explicit)?),
                }
            }
            "losses" => {
                self.losses = value
                    .split(',')
                    .map(|s| parse_loss(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "masked" => {
                self.masked = match value {
                    "both" => MaskedSet::Both,
                    "masked" => MaskedSet::MaskedOnly,
                    "unmasked" => MaskedSet::UnmaskedOnly,
                    other => return Err(err(&format!("unknown masked set {other:?}"))),
                }
            }
            "mask_kind" => {
                self.mask_kind = match value {
                    "none" => MaskKind::None,
                    "random" => MaskKind::Random,
                    "length" => MaskKind::Length,
                    other => return Err(err(&format!("unknown mask kind {other:?}"))),
                }
            }
            "hidden_count" => self.hidden_count = value.parse().map_err(|e| err(&e))?,
            "mask_seed" => self.mask_seed = value.parse().map_err(|e| err(&e))?,
            "mask_mode" => {
                self.mask_mode = match value {
                    "skip" => MaskMode::SkipTrajectory,
                    "forbid" => MaskMode::ForbidTerminate,
                    other => return Err(err(&format!("unknown mask mode {other:?}"))),
                }
            }
            "mask_avoid_modes" => self.mask_avoid_modes = value.parse().map_err(|e| err(&e))?,
            "max_len" => self.max_len = value.parse().map_err(|e| err(&e))?,
            "iterations" => self.iterations = value.parse().map_err(|e| err(&e))?,
            "eval_every" => self.eval_every = value.parse().map_err(|e| err(&e))?,
            "batch_size" => self.batch_size = value.parse().map_err(|e| err(&e))?,
            "optimizer" => match value {
                "adam" | "sgd" => self.optimizer = value.to_string(),
                other => return Err(err(&format!("unknown optimizer {other:?}"))),
            },
            "lr" => self.lr = value.parse().map_err(|e| err(&e))?,
            "lr_log_z" => self.lr_log_z = value.parse().map_err(|e| err(&e))?,
            "adam_beta1" => self.adam_beta1 = value.parse().map_err(|e| err(&e))?,
            "adam_beta2" => self.adam_beta2 = value.parse().map_err(|e| err(&e))?,
            "adam_eps" => self.adam_eps = value.parse().map_err(|e| err(&e))?,
            "epsilon_uniform" => self.epsilon_uniform = value.parse().map_err(|e| err(&e))?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(&e))?
            }
            "width" => self.width = value.parse().map_err(|e| err(&e))?,
            "hidden_layers" => self.hidden_layers = value.parse().map_err(|e| err(&e))?,
            "encoding" => {
                self.encoding = match value {
                    "onehot" => Encoding::OneHot,
                    "scalar" => Encoding::Scalar,
                    other => return Err(err(&format!("unknown encoding {other:?}"))),
                }
            }
            "learn_backward" => self.learn_backward = value.parse().map_err(|e| err(&e))?,
            "loss" => self.loss = parse_loss(value)?,
            "post_hoc_rn" => self.post_hoc_rn = value.parse().map_err(|e| err(&e))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "jobs" => self.jobs = value.parse().map_err(|e| err(&e))?,
            other => return Err(ConfigError(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        let spec = match &self.modes {
            None => GridSpec::with_default_modes(self.grid_n),
            Some(modes) => GridSpec::new(self.grid_n, modes.clone()),
        };
        spec.map_err(|e| ConfigError(format!("grid spec: {e}")))
    }

    pub fn mask(&self, spec: &GridSpec) -> Result<Option<HidingMask>, ConfigError> {
        let mask = match self.mask_kind {
            MaskKind::None => None,
            MaskKind::Random => {
                if self.hidden_count == 0 {
                    None
                } else {
                    Some(
                        HidingMask::random(
                            spec,
                            self.hidden_count,
                            self.mask_seed,
                            self.mask_mode,
                            self.mask_avoid_modes,
                        )
                        .map_err(|e| ConfigError(format!("mask: {e}")))?,
                    )
                }
            }
            MaskKind::Length => Some(
                HidingMask::by_length(spec, self.max_len, self.mask_mode)
                    .map_err(|e| ConfigError(format!("mask: {e}")))?,
            ),
        };
        Ok(mask)
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            _ => OptimizerKind::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    /// One training cell: a loss with or without the mask.
    pub fn train_config(
        &self,
        spec: &GridSpec,
        loss: Parametrization,
        mask: Option<HidingMask>,
    ) -> TrainConfig {
        let mut tc = TrainConfig::new(spec.clone(), loss);
        tc.mask = mask;
        tc.optimizer = self.optimizer_kind();
        tc.lr = self.lr;
        tc.lr_log_z = self.lr_log_z;
        tc.iterations = self.iterations;
        tc.batch_size = self.batch_size;
        tc.seeds = self.seeds.clone();
        tc.eval_every = self.eval_every;
        tc.epsilon_uniform = self.epsilon_uniform;
        tc.width = self.width;
        tc.hidden_layers = self.hidden_layers;
        tc.encoding = self.encoding;
        tc.learn_backward = self.learn_backward;
        tc.post_hoc_rn = self.post_hoc_rn;
        tc
    }
}

fn parse_loss(s: &str) -> Result<Parametrization, ConfigError> {
    match s {
        "tb" => Ok(Parametrization::Tb),
        "db" => Ok(Parametrization::Db),
        "fldb" => Ok(Parametrization::FlDb),
        other => Err(ConfigError(format!("unknown loss {other:?}"))),
    }
}

/// `a_lo,a_hi,b_lo,b_hi; a_lo,a_hi,b_lo,b_hi; ...`
fn parse_modes(s: &str) -> Result<Vec<ModeRegion>, ConfigError> {
    s.split(';')
        .map(|part| {
            let nums: Vec<usize> = part
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| ConfigError(format!("mode region {part:?}: {e}")))?;
            if nums.len() != 4 {
                return Err(ConfigError(format!(
                    "mode region {part:?} needs 4 numbers"
                )));
            }
            Ok(ModeRegion {
                a_lo: nums[0],
                a_hi: nums[1],
                b_lo: nums[2],
                b_hi: nums[3],
            })
        })
        .collect()
}

pub fn loss_name(loss: Parametrization) -> &'static str {
    match loss {
        Parametrization::Tb => "tb",
        Parametrization::Db => "db",
        Parametrization::FlDb => "fldb",
    }
}
