//! Flat key=value run configuration.
//!
//! Every tunable of the pipeline lives here under a dotted key. Unknown keys
//! are rejected (naming the offending line); every run writes back the fully
//! resolved document, and artifacts carry its SHA-256 hash.

use crate::diffusion::SamplerKind;
use crate::error::{GraphDpsError, Result};
use crate::fem::{NoiseKind, ProtocolKind};
use crate::phantom::ShapeFamily;
use crate::sampler::{GradMode, LambdaSetting, RegularizerKind};
use crate::score::ScoreNetConfig;
use crate::training::TrainConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub base_seed: u64,

    pub mesh_fine_target: usize,
    pub mesh_fine_seed: u64,
    pub mesh_coarse_target: usize,
    pub mesh_coarse_seed: u64,

    pub electrode_count: usize,
    pub electrode_coverage: f64,
    pub contact_impedance: f64,
    pub injection_current: f64,
    pub protocol: ProtocolKind,

    pub dataset_family: ShapeFamily,
    pub dataset_count: usize,
    pub conductivity_min: f64,
    pub conductivity_max: f64,
    pub inclusion_min: usize,
    pub inclusion_max: usize,
    pub size_min: f64,
    pub size_max: f64,

    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub net_hidden_dim: usize,
    pub net_depth: usize,
    pub net_time_embed_dim: usize,
    pub net_knn_k: usize,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,

    pub sampler: SamplerKind,
    pub regularizer: RegularizerKind,
    pub tv_delta: f64,
    pub guidance_eta: f64,
    pub guidance_eps_floor: f64,
    pub lambda_mode: String,
    pub lambda_fixed: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_scale: f64,
    pub grad_mode: GradMode,

    pub noise_kind: NoiseKind,
    pub noise_level: f64,

    pub bench_samples: usize,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            mesh_fine_target: 520,
            mesh_fine_seed: 101,
            mesh_coarse_target: 320,
            mesh_coarse_seed: 202,
            electrode_count: 16,
            electrode_coverage: 0.6,
            contact_impedance: crate::fem::DEFAULT_CONTACT_IMPEDANCE,
            injection_current: crate::fem::DEFAULT_CURRENT,
            protocol: ProtocolKind::OppositeAdjacent,
            dataset_family: ShapeFamily::Circle,
            dataset_count: 200,
            conductivity_min: 0.5,
            conductivity_max: 1.5,
            inclusion_min: 1,
            inclusion_max: 3,
            size_min: 0.12,
            size_max: 0.3,
            schedule_steps: 200,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: 0.1,
            net_hidden_dim: 16,
            net_depth: 3,
            net_time_embed_dim: 16,
            net_knn_k: 6,
            learning_rate: 2.5e-3,
            epochs: 300,
            batch_size: 10,
            checkpoint_interval: 0,
            sampler: SamplerKind::Ddim,
            regularizer: RegularizerKind::Tv,
            tv_delta: crate::sampler::DEFAULT_TV_DELTA,
            guidance_eta: 0.5,
            guidance_eps_floor: crate::sampler::DEFAULT_EPS_FLOOR,
            lambda_mode: "fixed".to_string(),
            lambda_fixed: 0.05,
            lambda_min: 0.15,
            lambda_max: 0.5,
            lambda_scale: 1.0,
            grad_mode: GradMode::FullBackprop,
            noise_kind: NoiseKind::None,
            noise_level: 0.0,
            bench_samples: 10,
            output_dir: "runs/default".to_string(),
        }
    }
}

macro_rules! parse_key {
    ($value:expr, $line:expr, $key:expr) => {
        $value.parse().map_err(|_| GraphDpsError::Config {
            line: $line,
            message: format!("key {}: cannot parse value {:?}", $key, $value),
        })?
    };
}

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad_value = |message: String| GraphDpsError::Config { line, message };
        match key {
            "base_seed" => self.base_seed = parse_key!(value, line, key),
            "mesh.fine_target" => self.mesh_fine_target = parse_key!(value, line, key),
            "mesh.fine_seed" => self.mesh_fine_seed = parse_key!(value, line, key),
            "mesh.coarse_target" => self.mesh_coarse_target = parse_key!(value, line, key),
            "mesh.coarse_seed" => self.mesh_coarse_seed = parse_key!(value, line, key),
            "electrodes.count" => self.electrode_count = parse_key!(value, line, key),
            "electrodes.coverage" => self.electrode_coverage = parse_key!(value, line, key),
            "electrodes.contact_impedance" => self.contact_impedance = parse_key!(value, line, key),
            "electrodes.current" => self.injection_current = parse_key!(value, line, key),
            "protocol.name" => {
                self.protocol = ProtocolKind::parse(value)
                    .ok_or_else(|| bad_value(format!("unknown protocol {value:?}")))?
            }
            "dataset.family" => {
                self.dataset_family = ShapeFamily::parse(value)
                    .ok_or_else(|| bad_value(format!("unknown shape family {value:?}")))?
            }
            "dataset.count" => self.dataset_count = parse_key!(value, line, key),
            "dataset.cond_min" => self.conductivity_min = parse_key!(value, line, key),
            "dataset.cond_max" => self.conductivity_max = parse_key!(value, line, key),
            "dataset.incl_min" => self.inclusion_min = parse_key!(value, line, key),
            "dataset.incl_max" => self.inclusion_max = parse_key!(value, line, key),
            "dataset.size_min" => self.size_min = parse_key!(value, line, key),
            "dataset.size_max" => self.size_max = parse_key!(value, line, key),
            "schedule.steps" => self.schedule_steps = parse_key!(value, line, key),
            "schedule.beta_start" => self.beta_start = parse_key!(value, line, key),
            "schedule.beta_end" => self.beta_end = parse_key!(value, line, key),
            "net.hidden_dim" => self.net_hidden_dim = parse_key!(value, line, key),
            "net.depth" => self.net_depth = parse_key!(value, line, key),
            "net.time_embed_dim" => self.net_time_embed_dim = parse_key!(value, line, key),
            "net.knn_k" => self.net_knn_k = parse_key!(value, line, key),
            "train.learning_rate" => self.learning_rate = parse_key!(value, line, key),
            "train.epochs" => self.epochs = parse_key!(value, line, key),
            "train.batch_size" => self.batch_size = parse_key!(value, line, key),
            "train.checkpoint_interval" => self.checkpoint_interval = parse_key!(value, line, key),
            "sampler" => {
                self.sampler = SamplerKind::parse(value)
                    .ok_or_else(|| bad_value(format!("unknown sampler {value:?}")))?
            }
            "guidance.regularizer" => {
                self.regularizer = RegularizerKind::parse(value)
                    .ok_or_else(|| bad_value(format!("unknown regularizer {value:?}")))?
            }
            "guidance.tv_delta" => self.tv_delta = parse_key!(value, line, key),
            "guidance.eta" => self.guidance_eta = parse_key!(value, line, key),
            "guidance.eps_floor" => self.guidance_eps_floor = parse_key!(value, line, key),
            "guidance.lambda_mode" => {
                if value != "fixed" && value != "adaptive" {
                    return Err(bad_value(format!("lambda_mode must be fixed|adaptive, got {value:?}")));
                }
                self.lambda_mode = value.to_string();
            }
            "guidance.lambda" => self.lambda_fixed = parse_key!(value, line, key),
            "guidance.lambda_min" => self.lambda_min = parse_key!(value, line, key),
            "guidance.lambda_max" => self.lambda_max = parse_key!(value, line, key),
            "guidance.lambda_scale" => self.lambda_scale = parse_key!(value, line, key),
            "guidance.grad_mode" => {
                self.grad_mode = match value {
                    "full_backprop" => GradMode::FullBackprop,
                    "tweedie_jacobian_approx" => GradMode::TweedieJacobianApprox,
                    _ => return Err(bad_value(format!("unknown grad mode {value:?}"))),
                }
            }
            "noise.kind" => {
                self.noise_kind = NoiseKind::parse(value)
                    .ok_or_else(|| bad_value(format!("unknown noise kind {value:?}")))?
            }
            "noise.level" => self.noise_level = parse_key!(value, line, key),
            "bench.samples" => self.bench_samples = parse_key!(value, line, key),
            "output.dir" => self.output_dir = value.to_string(),
            _ => {
                return Err(GraphDpsError::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Parse a key=value document; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(GraphDpsError::Config {
                    line,
                    message: format!("expected key=value, got {raw:?}"),
                });
            };
            config.set(key.trim(), value.trim(), line)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, message: &str| {
            if ok {
                Ok(())
            } else {
                Err(GraphDpsError::Config {
                    line: 0,
                    message: message.to_string(),
                })
            }
        };
        check(self.mesh_fine_target >= 16, "mesh.fine_target must be >= 16")?;
        check(self.mesh_coarse_target >= 16, "mesh.coarse_target must be >= 16")?;
        check(
            self.conductivity_min > 0.0 && self.conductivity_min <= self.conductivity_max,
            "dataset conductivity range invalid",
        )?;
        check(
            self.inclusion_min >= 1 && self.inclusion_min <= self.inclusion_max,
            "dataset inclusion count range invalid",
        )?;
        check(self.lambda_min <= self.lambda_max, "lambda_min > lambda_max")?;
        check(self.guidance_eta >= 0.0, "guidance.eta must be >= 0")?;
        Ok(())
    }

    /// Canonical resolved document (sorted keys).
    pub fn to_text(&self) -> String {
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        pairs.insert("base_seed", self.base_seed.to_string());
        pairs.insert("mesh.fine_target", self.mesh_fine_target.to_string());
        pairs.insert("mesh.fine_seed", self.mesh_fine_seed.to_string());
        pairs.insert("mesh.coarse_target", self.mesh_coarse_target.to_string());
        pairs.insert("mesh.coarse_seed", self.mesh_coarse_seed.to_string());
        pairs.insert("electrodes.count", self.electrode_count.to_string());
        pairs.insert("electrodes.coverage", format!("{}", self.electrode_coverage));
        pairs.insert(
            "electrodes.contact_impedance",
            format!("{}", self.contact_impedance),
        );
        pairs.insert("electrodes.current", format!("{}", self.injection_current));
        pairs.insert("protocol.name", self.protocol.as_str().to_string());
        pairs.insert("dataset.family", self.dataset_family.as_str().to_string());
        pairs.insert("dataset.count", self.dataset_count.to_string());
        pairs.insert("dataset.cond_min", format!("{}", self.conductivity_min));
        pairs.insert("dataset.cond_max", format!("{}", self.conductivity_max));
        pairs.insert("dataset.incl_min", self.inclusion_min.to_string());
        pairs.insert("dataset.incl_max", self.inclusion_max.to_string());
        pairs.insert("dataset.size_min", format!("{}", self.size_min));
        pairs.insert("dataset.size_max", format!("{}", self.size_max));
        pairs.insert("schedule.steps", self.schedule_steps.to_string());
        pairs.insert("schedule.beta_start", format!("{}", self.beta_start));
        pairs.insert("schedule.beta_end", format!("{}", self.beta_end));
        pairs.insert("net.hidden_dim", self.net_hidden_dim.to_string());
        pairs.insert("net.depth", self.net_depth.to_string());
        pairs.insert("net.time_embed_dim", self.net_time_embed_dim.to_string());
        pairs.insert("net.knn_k", self.net_knn_k.to_string());
        pairs.insert("train.learning_rate", format!("{}", self.learning_rate));
        pairs.insert("train.epochs", self.epochs.to_string());
        pairs.insert("train.batch_size", self.batch_size.to_string());
        pairs.insert(
            "train.checkpoint_interval",
            self.checkpoint_interval.to_string(),
        );
        pairs.insert("sampler", self.sampler.as_str().to_string());
        pairs.insert("guidance.regularizer", self.regularizer.as_str().to_string());
        pairs.insert("guidance.tv_delta", format!("{}", self.tv_delta));
        pairs.insert("guidance.eta", format!("{}", self.guidance_eta));
        pairs.insert("guidance.eps_floor", format!("{}", self.guidance_eps_floor));
        pairs.insert("guidance.lambda_mode", self.lambda_mode.clone());
        pairs.insert("guidance.lambda", format!("{}", self.lambda_fixed));
        pairs.insert("guidance.lambda_min", format!("{}", self.lambda_min));
        pairs.insert("guidance.lambda_max", format!("{}", self.lambda_max));
        pairs.insert("guidance.lambda_scale", format!("{}", self.lambda_scale));
        pairs.insert(
            "guidance.grad_mode",
            match self.grad_mode {
                GradMode::FullBackprop => "full_backprop".to_string(),
                GradMode::TweedieJacobianApprox => "tweedie_jacobian_approx".to_string(),
            },
        );
        pairs.insert("noise.kind", self.noise_kind.as_str().to_string());
        pairs.insert("noise.level", format!("{}", self.noise_level));
        pairs.insert("bench.samples", self.bench_samples.to_string());
        pairs.insert("output.dir", self.output_dir.clone());

        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// SHA-256 of the canonical document, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            write!(acc, "{b:02x}").unwrap();
            acc
        })
    }

    /// Derived sub-configurations.
    pub fn net_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            hidden_dim: self.net_hidden_dim,
            depth: self.net_depth,
            time_embed_dim: self.net_time_embed_dim,
            knn_k: self.net_knn_k,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: crate::seeds::derive(self.base_seed, "train"),
            checkpoint_interval: self.checkpoint_interval,
            ..TrainConfig::default()
        }
    }

    pub fn dataset_spec(&self) -> crate::phantom::DatasetSpec {
        crate::phantom::DatasetSpec {
            family: self.dataset_family,
            count: self.dataset_count,
            conductivity_range: (self.conductivity_min, self.conductivity_max),
            inclusion_count_range: (self.inclusion_min, self.inclusion_max),
            size_range: (self.size_min, self.size_max),
            base_seed: self.base_seed,
        }
    }

    pub fn lambda_setting(&self) -> LambdaSetting {
        if self.lambda_mode == "adaptive" {
            LambdaSetting::Adaptive {
                scale: self.lambda_scale,
                lambda_min: self.lambda_min,
                lambda_max: self.lambda_max,
            }
        } else {
            LambdaSetting::Fixed(self.lambda_fixed)
        }
    }

    pub fn guidance_config(&self) -> crate::sampler::GuidanceConfig {
        crate::sampler::GuidanceConfig {
            eta: self.guidance_eta,
            eps_floor: self.guidance_eps_floor,
            lambda: self.lambda_setting(),
            grad_mode: self.grad_mode,
        }
    }

    pub fn regularizer(&self) -> crate::sampler::Regularizer {
        crate::sampler::Regularizer {
            kind: self.regularizer,
            tv_delta: self.tv_delta,
        }
    }
}
