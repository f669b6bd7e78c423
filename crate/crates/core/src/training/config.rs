//! Training configuration, read from TOML.

use std::path::{Path, PathBuf};

use panofill_autograd::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, PyramidConfig};
use crate::nn::{DiscriminatorConfig, GeneratorConfig, Variant};
use crate::synth::{DataConfig, MaskConfig};

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSource {
    /// Dataset directory written by `gen-data`; when absent, samples are
    /// generated in memory from `master_seed`.
    pub dir: Option<PathBuf>,
    pub n_samples: usize,
    pub master_seed: u64,
    pub mask: MaskConfig,
}

impl Default for DataSource {
    fn default() -> Self {
        Self { dir: None, n_samples: 32, master_seed: 0, mask: DataConfig::default().mask }
    }
}

/// Settings used only by the experiment protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Training seeds; each protocol runs once per seed.
    pub seeds: Vec<u64>,
    pub degrade_ratios: Vec<f64>,
    /// Seed of the layout degradation draws.
    pub degrade_seed: u64,
    /// Compute the feature distance column.
    pub fid: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seeds: vec![0], degrade_ratios: vec![0.0, 0.05, 0.1, 0.3, 0.5], degrade_seed: 7, fid: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub variant: Variant,
    /// Momentum of the normalization running statistics.
    pub running_momentum: f64,
    /// Steps between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Steps between loss log rows; 0 disables them.
    pub log_every: u64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_every: u64,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: PyramidConfig,
    pub data: DataSource,
    pub experiment: ExperimentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            batch_size: 4,
            lr: 1e-4,
            adam_b1: 0.0,
            adam_b2: 0.9,
            max_steps: 2000,
            seed: 0,
            variant: Variant::Full,
            running_momentum: 0.1,
            checkpoint_every: 500,
            log_every: 10,
            eval_every: 500,
            weights: LossWeights::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            features: PyramidConfig::default(),
            data: DataSource::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 512x256, batch 8 and paper widths.
    pub fn paper() -> Self {
        Self {
            height: 256,
            width: 512,
            batch_size: 8,
            generator: GeneratorConfig::paper(),
            discriminator: DiscriminatorConfig::paper(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.synced();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_b1) || !(0.0..1.0).contains(&self.adam_b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.running_momentum) {
            return bad("running_momentum must lie in [0, 1]");
        }
        if self.experiment.degrade_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("degrade ratios must lie in [0, 1)");
        }
        self.weights.validate()?;
        self.generator_config().validate()?;
        self.discriminator.validate()?;
        let min = self.discriminator.min_size();
        if self.height < min || self.width < min {
            return Err(Error::Config(format!("resolution {}x{} is below the discriminator minimum {min}", self.width, self.height)));
        }
        Ok(())
    }

    /// Copy the resolution into the generator section, which does not
    /// serialize it.
    pub fn synced(mut self) -> Self {
        self.generator.height = self.height;
        self.generator.width = self.width;
        self
    }

    /// Generator configuration at this resolution.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { height: self.height, width: self.width, ..self.generator.clone() }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { height: self.height, width: self.width, mask: self.data.mask.clone() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_b1, beta2: self.adam_b2, ..AdamConfig::default() }
    }
}

/// Keys whose change is allowed when resuming.
pub const RESUMABLE_KEYS: [&str; 4] = ["max_steps", "checkpoint_every", "log_every", "eval_every"];

/// Field-level differences between two configurations, as
/// `path: left -> right` lines. Top-level keys in `ignore` are skipped.
pub fn config_diff(left: &TrainConfig, right: &TrainConfig, ignore: &[&str]) -> Vec<String> {
    let a = serde_json::to_value(left).expect("config serializes");
    let b = serde_json::to_value(right).expect("config serializes");
    let mut out = Vec::new();
    diff_values("", &a, &b, ignore, &mut out);
    out
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, ignore: &[&str], out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                if path.is_empty() && ignore.contains(&k.as_str()) {
                    continue;
                }
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let null = Value::Null;
                diff_values(&p, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), ignore, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}
