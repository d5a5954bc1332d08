use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use psemix::bench::BenchConfig;
use psemix::division::{DivisionConfig, DivisionMethod};
use psemix::mil::{Augmentation, TrainConfig};
use psemix::mixing::MixConfig;
use psemix::synth::SynthConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 100,
        }
    }
}

/// Network and optimizer settings. Mixing and division come from their own
/// sections and the seed from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub hidden: usize,
    pub attn: usize,
    pub augmentation: Augmentation,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            patience: d.patience,
            hidden: d.hidden,
            attn: d.attn,
            augmentation: d.augmentation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Plain,
    Gap,
    Occlusion,
    Corruption,
    Inbetween,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocols: Vec<Protocol>,
    pub occlusion_ratios: Vec<f64>,
    pub corruption_ratios: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocols: vec![
                Protocol::Plain,
                Protocol::Gap,
                Protocol::Occlusion,
                Protocol::Corruption,
                Protocol::Inbetween,
            ],
            occlusion_ratios: psemix::eval::OCCLUSION_RATIOS.to_vec(),
            corruption_ratios: psemix::eval::CORRUPTION_RATIOS.to_vec(),
            lambda_grid: psemix::eval::default_lambda_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Samples to draw from the training split.
    pub count: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { count: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivideSection {
    /// Methods timed on the dataset; empty means just `division.method`.
    pub timing_methods: Vec<DivisionMethod>,
    pub reps: usize,
}

impl Default for DivideSection {
    fn default() -> Self {
        Self {
            timing_methods: Vec::new(),
            reps: 10,
        }
    }
}

/// One experiment. The top-level `seed` is copied into every section that
/// carries its own.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Dataset manifest read by every command except `gen` and `bench`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Model read by `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthConfig,
    pub splits: Splits,
    pub division: DivisionConfig,
    pub mix: MixConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub augment: AugmentSection,
    pub divide: DivideSection,
    pub bench: BenchConfig,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Apply flag overrides and propagate the seed.
    pub fn resolve(mut self, o: Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if o.out.is_some() {
            self.out = o.out;
        }
        if o.data.is_some() {
            self.data = o.data;
        }
        if o.checkpoint.is_some() {
            self.checkpoint = o.checkpoint;
        }
        self.synth.seed = self.seed;
        self.bench.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.division.validate()?;
        self.mix.validate()?;
        self.train_config().validate()?;
        self.synth.validate(if self.division.strict {
            self.division.n
        } else {
            1
        })?;
        if self.splits.train == 0 {
            bail!("splits.train must be >= 1");
        }
        for r in self
            .eval
            .occlusion_ratios
            .iter()
            .chain(&self.eval.corruption_ratios)
        {
            if !(0.0..=1.0).contains(r) {
                bail!("eval ratio {r} not in [0, 1]");
            }
        }
        if self
            .eval
            .lambda_grid
            .iter()
            .any(|l| !(0.0..=1.0).contains(l))
        {
            bail!("lambda_grid values must lie in [0, 1]");
        }
        if self.divide.reps == 0 {
            bail!("divide.reps must be >= 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            patience: self.train.patience,
            seed: self.seed,
            hidden: self.train.hidden,
            attn: self.train.attn,
            augmentation: self.train.augmentation,
            mix: self.mix.clone(),
            division: self.division.clone(),
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory: pass --out or set `out` in the config")
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .context("no dataset: pass --data or set `data` in the config")
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
