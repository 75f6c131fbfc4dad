//! Multi-task training: mini-batch steps with RMSProp on dense weights and
//! Adagrad on the embedding rows a batch touched, holdout evaluation, the
//! logistic baseline and the ablation harness.

pub mod ablation;
pub mod baseline;
pub mod metrics;
pub mod optim;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{Gradients, MixFormer, RequestLoss, Tensors};
use crate::error::{Error, Result};
use crate::features::Request;
use crate::flopsmeter::csv_err;
use crate::mathcore::{seeded_rng, sigmoid};

pub use ablation::{run_ablation, run_ablations, AblationResult};
pub use baseline::{BaselineGradients, LogisticBaseline};
pub use metrics::{auc, log_loss, uauc, MetricDelta, MetricSummary, Uauc, UaucWeighting};
pub use optim::{AdagradConfig, OptimizerState, Progress, RmsPropConfig, StepParts};

/// A model the loop can train.
pub trait Trainable: Sync {
    type Grads: Send;
    fn n_tasks(&self) -> usize;
    fn zero_grads(&self) -> Self::Grads;
    fn clear_grads(g: &mut Self::Grads);
    /// Adds the gradient of the request's summed loss into `g`.
    fn accumulate(&self, req: &Request, g: &mut Self::Grads) -> Result<RequestLoss>;
    /// `logits[k][task]`.
    fn logits(&self, req: &Request) -> Result<Vec<Vec<f64>>>;
    fn step_parts<'a>(&'a mut self, g: &'a Self::Grads) -> StepParts<'a>;
}

impl Trainable for MixFormer {
    type Grads = Gradients;

    fn n_tasks(&self) -> usize {
        self.config.n_tasks
    }

    fn zero_grads(&self) -> Gradients {
        Gradients::zeros(self)
    }

    fn clear_grads(g: &mut Gradients) {
        g.clear();
    }

    fn accumulate(&self, req: &Request, g: &mut Gradients) -> Result<RequestLoss> {
        self.accumulate_gradients(req, g)
    }

    fn logits(&self, req: &Request) -> Result<Vec<Vec<f64>>> {
        self.forward_request(req)
    }

    fn step_parts<'a>(&'a mut self, g: &'a Gradients) -> StepParts<'a> {
        StepParts {
            dense: self.dense.tensors_mut(),
            dense_grads: g.dense.tensors(),
            tables: &mut self.tables,
            sparse_grads: &g.sparse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Impressions per step; a batch is whole requests, closed once it
    /// reaches this many impressions.
    pub batch_size: usize,
    pub epochs: usize,
    pub dense: RmsPropConfig,
    pub sparse: AdagradConfig,
    /// Seeds the per-epoch request order.
    pub seed: u64,
    /// Evaluate on the holdout every this many steps (0: only at the end).
    pub eval_every: usize,
    pub uauc_weighting: UaucWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1,
            dense: RmsPropConfig::default(),
            sparse: AdagradConfig::default(),
            seed: 0,
            eval_every: 0,
            uauc_weighting: UaucWeighting::Unweighted,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(self.dense, self.sparse)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let finite = [self.dense.lr, self.dense.decay, self.dense.eps, self.sparse.lr, self.sparse.eps];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.dense.decay >= 1.0 {
            return Err(Error::Config("optimizer settings must be finite, non-negative, decay < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    /// Mean per impression, summed over tasks.
    pub loss: f64,
    /// Mean AUC over tasks on the holdout, when evaluated at this step.
    pub holdout_auc: Option<f64>,
}

pub const LOG_CSV_HEADER: [&str; 4] = ["step", "epoch", "loss", "holdout_auc"];

pub fn write_log_csv<W: Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LOG_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            r.holdout_auc.map(|a| a.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Request order of one epoch, cut into batches.
pub fn epoch_batches(data: &[Request], cfg: &TrainConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded_rng(cfg.seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut impressions = 0;
    for i in order {
        current.push(i);
        impressions += data[i].n_candidates();
        if impressions >= cfg.batch_size {
            batches.push(std::mem::take(&mut current));
            impressions = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Runs up to `max_steps` steps (the rest of training when `None`), picking
/// up where `opt.progress` left off. Stops after `cfg.epochs` epochs.
pub fn train_steps<M: Trainable>(
    model: &mut M,
    data: &[Request],
    holdout: Option<&[Request]>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    max_steps: Option<u64>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut log = Vec::new();
    let mut grads = model.zero_grads();
    let mut taken = 0u64;
    while (opt.progress.epoch as usize) < cfg.epochs {
        let epoch = opt.progress.epoch;
        let batches = epoch_batches(data, cfg, epoch);
        while (opt.progress.batch as usize) < batches.len() {
            if max_steps.is_some_and(|m| taken >= m) {
                return Ok(log);
            }
            let batch = &batches[opt.progress.batch as usize];
            M::clear_grads(&mut grads);
            let mut total = RequestLoss::default();
            for &i in batch {
                let l = model.accumulate(&data[i], &mut grads)?;
                total.loss += l.loss;
                total.impressions += l.impressions;
            }
            let loss = total.loss / total.impressions.max(1) as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {} (epoch {epoch}, batch {})",
                    opt.progress.step, opt.progress.batch
                )));
            }
            opt.step(model.step_parts(&grads), 1.0 / total.impressions.max(1) as f64)?;
            opt.progress.batch += 1;
            taken += 1;
            let holdout_auc = match holdout {
                Some(h) if cfg.eval_every > 0 && opt.progress.step % cfg.eval_every as u64 == 0 => {
                    Some(evaluate(model, h, cfg.uauc_weighting)?.mean_auc())
                }
                _ => None,
            };
            log.push(LogRow {
                step: opt.progress.step,
                epoch,
                loss,
                holdout_auc,
            });
        }
        opt.progress.epoch += 1;
        opt.progress.batch = 0;
    }
    Ok(log)
}

/// One pass over `data` from the current position; returns the per-step
/// loss curve.
pub fn train_epoch<M: Trainable>(model: &mut M, data: &[Request], opt: &mut OptimizerState, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let one = TrainConfig {
        epochs: opt.progress.epoch as usize + 1,
        eval_every: 0,
        ..cfg.clone()
    };
    Ok(train_steps(model, data, None, opt, &one, None)?.into_iter().map(|r| r.loss).collect())
}

/// Holdout metrics. Scoring runs in parallel over requests.
pub fn evaluate<M: Trainable>(model: &M, data: &[Request], weighting: UaucWeighting) -> Result<MetricSummary> {
    let n_tasks = model.n_tasks();
    let logits: Vec<Vec<Vec<f64>>> = data.par_iter().map(|r| model.logits(r)).collect::<Result<_>>()?;
    let mut scores = vec![Vec::new(); n_tasks];
    let mut labels = vec![Vec::new(); n_tasks];
    let mut users = Vec::new();
    for (req, z) in data.iter().zip(&logits) {
        let y = req
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation request without labels".into()))?;
        for (zk, yk) in z.iter().zip(y) {
            users.push(req.user_id);
            for t in 0..n_tasks {
                scores[t].push(sigmoid(zk[t]));
                labels[t].push(yk[t]);
            }
        }
    }
    summarize(&scores, &labels, &users, weighting)
}

/// Metrics from per-task probabilities and labels of the same impressions.
pub fn summarize(probs: &[Vec<f64>], labels: &[Vec<bool>], users: &[u32], weighting: UaucWeighting) -> Result<MetricSummary> {
    if users.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let n_tasks = probs.len();
    let mut summary = MetricSummary {
        auc: Vec::with_capacity(n_tasks),
        uauc: Vec::with_capacity(n_tasks),
        n_users: Vec::with_capacity(n_tasks),
        log_loss: 0.0,
    };
    for (p, y) in probs.iter().zip(labels) {
        summary.auc.push(auc(p, y)?);
        let u = uauc(p, y, users, weighting)?;
        summary.uauc.push(u.value);
        summary.n_users.push(u.n_users);
        summary.log_loss += log_loss(p, y)? / n_tasks as f64;
    }
    Ok(summary)
}

/// Deterministic request-level split: `(train, holdout)`.
pub fn split_holdout(requests: &[Request], holdout_fraction: f64, seed: u64) -> Result<(Vec<Request>, Vec<Request>)> {
    let mut is_hold = vec![false; requests.len()];
    holdout_indices(requests.len(), holdout_fraction, seed)?
        .into_iter()
        .for_each(|i| is_hold[i] = true);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (r, h) in requests.iter().zip(is_hold) {
        if h {
            holdout.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, holdout))
}

/// Sorted indices of the requests [`split_holdout`] holds out.
pub fn holdout_indices(n: usize, holdout_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!("holdout fraction {holdout_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let n_hold = (n as f64 * holdout_fraction).round() as usize;
    let mut hold = order[..n_hold].to_vec();
    hold.sort_unstable();
    Ok(hold)
}

/// Result of training one model from scratch.
#[derive(Clone, Debug)]
pub struct FitReport<M> {
    pub model: M,
    pub log: Vec<LogRow>,
    pub summary: MetricSummary,
    pub seconds: f64,
}

/// Trains for `cfg.epochs` epochs and evaluates on the holdout.
pub fn fit<M: Trainable>(mut model: M, train: &[Request], holdout: &[Request], cfg: &TrainConfig) -> Result<FitReport<M>> {
    let start = Instant::now();
    let mut opt = cfg.optimizer();
    let log = train_steps(&mut model, train, Some(holdout), &mut opt, cfg, None)?;
    let summary = evaluate(&model, holdout, cfg.uauc_weighting)?;
    Ok(FitReport {
        model,
        log,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    })
}
