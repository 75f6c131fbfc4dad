//! Run configuration: one TOML file for every command, plus flag
//! overrides. The resolved config is written next to every output.

use std::path::Path;

use mixformer::blocks::ModelConfig;
use mixformer::datagen::GeneratorSpec;
use mixformer::decouple::allocate_heads;
use mixformer::decouple::bench::BENCH_CANDIDATES;
use mixformer::features::InputDims;
use mixformer::flopsmeter::{ScalingAxis, SequenceAccounting};
use mixformer::trainer::TrainConfig;
use mixformer::{Error, Result};
use serde::{Deserialize, Serialize};

/// Name of the resolved-config sidecar in every output directory.
pub const RUN_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named model shape; overrides the shape fields of `model` and keeps
    /// its switches.
    pub preset: Option<String>,
    /// Stop training after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub generator: GeneratorSpec,
    pub train: TrainConfig,
    pub flops: FlopsConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            max_steps: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            generator: GeneratorSpec::default(),
            train: TrainConfig::default(),
            flops: FlopsConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Share of requests held out for evaluation.
    pub holdout_fraction: f64,
    /// Use only the first this many requests.
    pub max_requests: Option<usize>,
    /// `gen` tunes the temperature until the mean oracle AUC is in this band.
    pub oracle_band: Option<[f64; 2]>,
    /// `train` also fits the mean-pooling baseline.
    pub baseline: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { holdout_fraction: 0.2, max_requests: None, oracle_band: None, baseline: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    pub seq_len: usize,
    pub candidates: usize,
    /// Impressions per batch, for the per-batch total.
    pub batch: usize,
    pub rlb: bool,
    pub sequence: SequenceAccounting,
    /// Input widths; taken from the generator's schema when absent.
    pub dims: Option<InputDims>,
    pub axis: Option<ScalingAxis>,
    /// Scaling points; head dims on the dense axis, sequence lengths on
    /// the sequence axis. Empty picks a default sweep.
    pub points: Vec<usize>,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            seq_len: 64,
            candidates: 8,
            batch: 256,
            rlb: false,
            sequence: SequenceAccounting::PerCandidate,
            dims: None,
            axis: None,
            points: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Requests drawn from the dataset.
    pub requests: usize,
    pub candidates: Vec<usize>,
    /// Timing is the best of this many runs.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { requests: 32, candidates: BENCH_CANDIDATES.to_vec(), repeats: 3 }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<String>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Reads `path`, or the defaults when `None`, and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        cfg.resolve(overrides)
    }

    /// Applies overrides and the preset, then validates.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.generator.seed = seed;
            self.train.seed = seed;
        }
        if let Some(p) = &overrides.preset {
            self.preset = Some(p.clone());
        }
        if let Some(name) = &self.preset {
            let shape = ModelConfig::preset(name)?;
            self.model.n_heads = shape.n_heads;
            self.model.n_blocks = shape.n_blocks;
            self.model.head_dim = shape.head_dim;
            self.model.max_seq_len = shape.max_seq_len;
            let d = self.model.decoupling;
            if d.enabled && d.n_user_heads + d.n_item_heads != self.model.n_heads {
                let dims = self.input_dims()?;
                let (n_user, _) = allocate_heads(dims.user, dims.item, self.model.n_heads)?;
                self.model = self.model.clone().with_decoupling(n_user);
            }
        }
        self.model.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::Config(format!("holdout fraction {} not in [0, 1)", self.data.holdout_fraction)));
        }
        if self.bench.repeats == 0 || self.bench.requests == 0 {
            return Err(Error::Config("bench needs at least one request and one repeat".into()));
        }
        Ok(self)
    }

    pub fn write_sidecar(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(RUN_FILE), self.to_toml()?)?;
        Ok(())
    }

    /// Input widths for the meter: explicit, else the generator's schema.
    pub fn input_dims(&self) -> Result<InputDims> {
        match self.flops.dims {
            Some(d) => Ok(d),
            None => Ok(self.generator.schema()?.input_dims()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[train.dense]\nlr = 0.001\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.dense.lr, 0.001);
        assert_eq!(cfg.train.dense.decay, 0.9);
        assert_eq!(cfg.generator, GeneratorSpec::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn presets_keep_switches() {
        let mut cfg = RunConfig::default();
        cfg.model = cfg.model.with_ablation("post_ln").unwrap();
        let over = Overrides { seed: Some(7), preset: Some("paper-small-corrected".into()) };
        let r = cfg.resolve(&over).unwrap();
        assert_eq!((r.model.n_heads, r.model.head_dim), (16, 384));
        assert!(r.model.ablations.post_ln);
        assert_eq!((r.generator.seed, r.train.seed), (7, 7));
        assert_eq!(r.clone().resolve(&Overrides::default()).unwrap(), r);
    }

    #[test]
    fn presets_reallocate_decoupled_heads() {
        let mut cfg = RunConfig::default();
        cfg.model = cfg.model.with_decoupling(2);
        let over = Overrides { preset: Some("paper-medium-corrected".into()), ..Overrides::default() };
        let r = cfg.resolve(&over).unwrap();
        assert_eq!((r.model.decoupling.n_user_heads, r.model.decoupling.n_item_heads), (8, 8));
    }

    #[test]
    fn bad_presets_name_the_valid_ones() {
        let over = Overrides { preset: Some("huge".into()), ..Overrides::default() };
        let err = RunConfig::default().resolve(&over).unwrap_err().to_string();
        assert!(err.contains("desk-small") && err.contains("paper-medium-corrected"), "{err}");
        let over = Overrides { preset: Some("paper-small".into()), ..Overrides::default() };
        assert!(matches!(RunConfig::default().resolve(&over), Err(Error::Config(_))));
    }
}
