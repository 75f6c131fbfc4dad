//! Train a base config and single-switch variants under one seed and
//! schedule, and report metric deltas.

use serde::{Deserialize, Serialize};

use super::metrics::{MetricDelta, MetricSummary};
use super::{fit, TrainConfig};
use crate::blocks::{Ablations, MixFormer, ModelConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, Request};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    /// Switches that differ from the base config.
    pub diff: Vec<String>,
    pub params: usize,
    pub final_loss: f64,
    pub seconds: f64,
    pub summary: MetricSummary,
    pub delta: MetricDelta,
}

pub fn variant_config(name: &str, base: &ModelConfig) -> Result<ModelConfig> {
    if !Ablations::NAMES.contains(&name) {
        return Err(Error::Config(format!(
            "unknown ablation `{name}` (expected one of {})",
            Ablations::NAMES.join(", ")
        )));
    }
    let mut cfg = base.clone();
    if cfg.ablations.flags().iter().any(|(n, on)| *n == name && *on) {
        return Err(Error::Config(format!("base config already has `{name}` on")));
    }
    cfg.ablations.set(name, true)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_one(cfg: ModelConfig, schema: &FeatureSchema, train: &[Request], holdout: &[Request], tcfg: &TrainConfig) -> Result<(usize, f64, f64, MetricSummary)> {
    let model = MixFormer::new(cfg, schema.clone(), tcfg.seed)?;
    let params = model.n_dense_params();
    let r = fit(model, train, holdout, tcfg)?;
    let final_loss = r.log.last().map_or(f64::NAN, |l| l.loss);
    Ok((params, final_loss, r.seconds, r.summary))
}

fn result(name: &str, base_cfg: &ModelConfig, cfg: &ModelConfig, run: (usize, f64, f64, MetricSummary), base: &MetricSummary) -> AblationResult {
    let (params, final_loss, seconds, summary) = run;
    AblationResult {
        name: name.to_string(),
        diff: cfg.diff(base_cfg),
        params,
        final_loss,
        seconds,
        delta: summary.delta_from(base),
        summary,
    }
}

/// Trains the base config and the `name` variant with the same seed and
/// schedule.
pub fn run_ablation(
    name: &str,
    base_cfg: &ModelConfig,
    schema: &FeatureSchema,
    train: &[Request],
    holdout: &[Request],
    tcfg: &TrainConfig,
) -> Result<AblationResult> {
    let cfg = variant_config(name, base_cfg)?;
    let base = train_one(base_cfg.clone(), schema, train, holdout, tcfg)?.3;
    let run = train_one(cfg.clone(), schema, train, holdout, tcfg)?;
    Ok(result(name, base_cfg, &cfg, run, &base))
}

/// The base run (named `base`, zero deltas) followed by every variant.
pub fn run_ablations(
    base_cfg: &ModelConfig,
    schema: &FeatureSchema,
    train: &[Request],
    holdout: &[Request],
    tcfg: &TrainConfig,
) -> Result<Vec<AblationResult>> {
    let base_run = train_one(base_cfg.clone(), schema, train, holdout, tcfg)?;
    let base = base_run.3.clone();
    let mut out = vec![result("base", base_cfg, base_cfg, base_run, &base)];
    for name in Ablations::NAMES {
        let cfg = variant_config(name, base_cfg)?;
        let run = train_one(cfg.clone(), schema, train, holdout, tcfg)?;
        out.push(result(name, base_cfg, &cfg, run, &base));
    }
    Ok(out)
}
