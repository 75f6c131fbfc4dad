//! Synthetic recommendation data with a planted signal and its oracle.
//!
//! Users and items carry unit latent vectors drawn around cluster centroids.
//! A user's behavior sequence is sampled with probability proportional to
//! `exp(β·⟨u, v⟩)`; candidates come half from the same distribution and half
//! uniformly. For candidate `v` the signal is
//!
//! ```text
//! s = w_inter·⟨u, v⟩ + w_seq·match(seq, v)
//! ```
//!
//! where `match` counts sequence items with latent cosine above 0.8, capped
//! at 10. Task 0 ("finish") has logit `s/τ + bias`, task 1 ("skip") has
//! `−s/τ + skip_bias`. The true probabilities are the oracle.
//!
//! Only the user id, item id and cluster ids are visible as features; the
//! latents are not. Every random draw a request needs, including the label
//! uniforms, comes from its user's own stream, so the temperature changes
//! labels without changing anything else.

use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ActionField, Dataset, FeatureSchema, FieldSpec, Request, Side};
use crate::flopsmeter::csv_err;
use crate::mathcore::{seeded_rng, sigmoid};
use crate::trainer::{auc, fit, summarize, LogisticBaseline, MetricSummary, TrainConfig, UaucWeighting};

pub const MATCH_COSINE: f64 = 0.8;
pub const MATCH_CAP: usize = 10;
pub const TASK_NAMES: [&str; 2] = ["finish", "skip"];
pub const N_HOURS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_requests: usize,
    pub latent_dim: usize,
    pub n_clusters: usize,
    /// Norm of the Gaussian offset from a latent's centroid.
    pub cluster_spread: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Candidates per request.
    pub k: usize,
    /// `β` of the sequence sampling distribution.
    pub affinity_sharpness: f64,
    pub w_inter: f64,
    pub w_seq: f64,
    pub bias: f64,
    pub skip_bias: f64,
    /// `τ`: divides the signal.
    pub temperature: f64,
    /// Width of every embedding field in the emitted schema.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_users: 50_000,
            n_items: 5_000,
            n_requests: 125_000,
            latent_dim: 16,
            n_clusters: 32,
            cluster_spread: 0.3,
            seq_len_min: 16,
            seq_len_max: 64,
            k: 8,
            affinity_sharpness: 4.0,
            w_inter: 1.0,
            w_seq: 0.5,
            bias: -1.0,
            skip_bias: -1.0,
            temperature: 1.0,
            embedding_dim: 8,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_users, self.n_items, self.n_requests, self.latent_dim, self.n_clusters, self.k, self.embedding_dim];
        if positive.contains(&0) {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if self.seq_len_min > self.seq_len_max {
            return Err(Error::Config("seq_len_min exceeds seq_len_max".into()));
        }
        let reals = [self.cluster_spread, self.affinity_sharpness, self.w_inter, self.w_seq, self.bias, self.skip_bias, self.temperature];
        if reals.iter().any(|v| !v.is_finite()) || self.temperature <= 0.0 || self.cluster_spread < 0.0 {
            return Err(Error::Config("generator weights must be finite and the temperature positive".into()));
        }
        if self.n_users > u32::MAX as usize || self.n_items > u32::MAX as usize {
            return Err(Error::Config("ids must fit in u32".into()));
        }
        Ok(())
    }

    /// user, hour | item, category; actions: item, category.
    pub fn schema(&self) -> Result<FeatureSchema> {
        let d = self.embedding_dim;
        let f = |name: &str, vocab_size, side| FieldSpec { name: name.into(), vocab_size, dim: d, side };
        FeatureSchema::new(
            vec![
                f("user", self.n_users, Side::User),
                f("hour", N_HOURS, Side::Context),
                f("item", self.n_items, Side::Item),
                f("category", self.n_clusters, Side::Item),
            ],
            vec![
                ActionField { name: "seq_item".into(), vocab_size: self.n_items, dim: d },
                ActionField { name: "seq_category".into(), vocab_size: self.n_clusters, dim: d },
            ],
            self.seq_len_max,
        )
    }
}

/// Everything about one impression that does not depend on the temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Draw {
    signal: f64,
    uniforms: [f64; 2],
}

#[derive(Clone, Debug)]
struct World {
    items: Vec<Vec<f64>>,
    item_cluster: Vec<u32>,
    centroids: Vec<Vec<f64>>,
}

fn unit_near<R: Rng>(rng: &mut R, centre: &[f64], spread: f64) -> Vec<f64> {
    let d = centre.len();
    let noise: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let scale = spread / (d as f64).sqrt();
    let v: Vec<f64> = centre.iter().zip(&noise).map(|(c, n)| c + scale * n).collect();
    normalize(v)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-user stream seed.
fn user_seed(seed: u64, user: u64) -> u64 {
    let mut z = seed ^ user.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn world(spec: &GeneratorSpec) -> World {
    let mut rng = seeded_rng(spec.seed);
    let centroids: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| normalize((0..spec.latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
        .collect();
    let item_cluster: Vec<u32> = (0..spec.n_items).map(|_| rng.gen_range(0..spec.n_clusters as u32)).collect();
    let items = item_cluster
        .iter()
        .map(|&c| unit_near(&mut rng, &centroids[c as usize], spec.cluster_spread))
        .collect();
    World { items, item_cluster, centroids }
}

/// Sequence items whose latent cosine with `v` exceeds the threshold,
/// capped. Latents are unit vectors, so the cosine is the dot product.
fn match_count(world: &World, seq: &[u32], v: &[f64]) -> usize {
    seq.iter()
        .filter(|&&i| dot(&world.items[i as usize], v) > MATCH_COSINE)
        .count()
        .min(MATCH_CAP)
}

fn user_requests(spec: &GeneratorSpec, world: &World, user: usize, n: usize) -> Vec<(Request, Vec<Draw>)> {
    let mut rng = seeded_rng(user_seed(spec.seed, user as u64));
    let centre = &world.centroids[rng.gen_range(0..spec.n_clusters)];
    let u = unit_near(&mut rng, centre, spec.cluster_spread);
    let weights: Vec<f64> = world.items.iter().map(|v| (spec.affinity_sharpness * dot(&u, v)).exp()).collect();
    let affine = WeightedIndex::new(&weights).expect("positive weights");
    let with_cluster = |i: usize| vec![i as u32, world.item_cluster[i]];
    (0..n)
        .map(|_| {
            let t = rng.gen_range(spec.seq_len_min..=spec.seq_len_max);
            let seq: Vec<u32> = (0..t).map(|_| affine.sample(&mut rng) as u32).collect();
            let hour = rng.gen_range(0..N_HOURS as u32);
            let mut candidates = Vec::with_capacity(spec.k);
            let mut draws = Vec::with_capacity(spec.k);
            for _ in 0..spec.k {
                let item = if rng.gen_bool(0.5) {
                    affine.sample(&mut rng)
                } else {
                    rng.gen_range(0..spec.n_items)
                };
                let v = &world.items[item];
                let signal = spec.w_inter * dot(&u, v) + spec.w_seq * match_count(world, &seq, v) as f64;
                draws.push(Draw { signal, uniforms: [rng.gen(), rng.gen()] });
                candidates.push(with_cluster(item));
            }
            let req = Request {
                user_id: user as u32,
                user_nonseq: vec![user as u32, hour],
                sequence: seq.iter().map(|&i| with_cluster(i as usize)).collect(),
                candidates,
                labels: None,
            };
            (req, draws)
        })
        .collect()
}

/// `[p_finish, p_skip]` of one impression.
fn probabilities(spec: &GeneratorSpec, signal: f64, temperature: f64) -> [f64; 2] {
    [sigmoid(signal / temperature + spec.bias), sigmoid(-signal / temperature + spec.skip_bias)]
}

fn sample(world_draws: &mut [(Request, Vec<Draw>)], spec: &GeneratorSpec, temperature: f64) -> Vec<Vec<[f64; 2]>> {
    world_draws
        .iter_mut()
        .map(|(req, draws)| {
            let probs: Vec<[f64; 2]> = draws.iter().map(|d| probabilities(spec, d.signal, temperature)).collect();
            req.labels = Some(
                probs
                    .iter()
                    .zip(draws.iter())
                    .map(|(p, d)| vec![d.uniforms[0] < p[0], d.uniforms[1] < p[1]])
                    .collect(),
            );
            probs
        })
        .collect()
}

fn draw_all(spec: &GeneratorSpec) -> Result<Vec<(Request, Vec<Draw>)>> {
    spec.validate()?;
    let world = world(spec);
    let (per, extra) = (spec.n_requests / spec.n_users, spec.n_requests % spec.n_users);
    let per_user: Vec<Vec<(Request, Vec<Draw>)>> = (0..spec.n_users)
        .into_par_iter()
        .map(|u| user_requests(spec, &world, u, per + usize::from(u < extra)))
        .collect();
    Ok(per_user.into_iter().flatten().collect())
}

/// A generated dataset with its oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub spec: GeneratorSpec,
    pub dataset: Dataset,
    /// `oracle[request][candidate][task]`: the true label probability.
    pub oracle: Vec<Vec<[f64; 2]>>,
}

pub fn generate(spec: &GeneratorSpec) -> Result<Generated> {
    let mut draws = draw_all(spec)?;
    let oracle = sample(&mut draws, spec, spec.temperature);
    Ok(Generated {
        spec: spec.clone(),
        dataset: Dataset {
            schema: spec.schema()?,
            n_tasks: 2,
            requests: draws.into_iter().map(|(r, _)| r).collect(),
        },
        oracle,
    })
}

fn oracle_auc_of(requests: &[(Request, Vec<Draw>)], oracle: &[Vec<[f64; 2]>]) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for (t, slot) in out.iter_mut().enumerate() {
        let scores: Vec<f64> = oracle.iter().flatten().map(|p| p[t]).collect();
        let labels: Vec<bool> = requests
            .iter()
            .flat_map(|(r, _)| r.labels.as_ref().expect("sampled").iter().map(move |y| y[t]))
            .collect();
        *slot = auc(&scores, &labels)?;
    }
    Ok(out)
}

/// Mean oracle AUC over tasks.
fn mean2(a: [f64; 2]) -> f64 {
    (a[0] + a[1]) / 2.0
}

/// Bisects `log τ` until the mean oracle AUC over both tasks lies in
/// `[lo, hi]`; returns the spec with that temperature. Labels share their
/// uniforms across temperatures, so the AUC moves smoothly with `τ`.
pub fn tune_temperature(spec: &GeneratorSpec, lo: f64, hi: f64) -> Result<GeneratorSpec> {
    if !(0.5..=1.0).contains(&lo) || lo >= hi {
        return Err(Error::Config(format!("bad oracle AUC band [{lo}, {hi}]")));
    }
    let mut draws = draw_all(spec)?;
    let mut at = |tau: f64| -> Result<f64> {
        let oracle = sample(&mut draws, spec, tau);
        Ok(mean2(oracle_auc_of(&draws, &oracle)?))
    };
    let (mut log_lo, mut log_hi) = ((1e-3f64).ln(), (1e3f64).ln());
    if at(log_lo.exp())? < lo {
        return Err(Error::Config(format!(
            "oracle AUC cannot reach {lo}: the signal is too weak even at temperature {:e}",
            log_lo.exp()
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (log_lo + log_hi);
        let a = at(mid.exp())?;
        if (lo..=hi).contains(&a) {
            return Ok(GeneratorSpec { temperature: mid.exp(), ..spec.clone() });
        }
        if a > hi {
            log_lo = mid;
        } else {
            log_hi = mid;
        }
    }
    Err(Error::Config(format!("temperature search did not land in [{lo}, {hi}]")))
}

impl Generated {
    /// Oracle metrics on the requests at `indices` (all when `None`).
    pub fn oracle_summary(&self, indices: Option<&[usize]>, weighting: UaucWeighting) -> Result<MetricSummary> {
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..self.dataset.requests.len()).collect();
                &all
            }
        };
        let mut probs = vec![Vec::new(); 2];
        let mut labels = vec![Vec::new(); 2];
        let mut users = Vec::new();
        for &i in idx {
            let req = self.dataset.requests.get(i).ok_or_else(|| Error::Data(format!("no request {i}")))?;
            let y = req.labels.as_ref().ok_or_else(|| Error::Data("unlabelled request".into()))?;
            for (p, y) in self.oracle[i].iter().zip(y) {
                users.push(req.user_id);
                for t in 0..2 {
                    probs[t].push(p[t]);
                    labels[t].push(y[t]);
                }
            }
        }
        summarize(&probs, &labels, &users, weighting)
    }

    pub fn oracle_auc(&self) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        for (t, slot) in out.iter_mut().enumerate() {
            let scores: Vec<f64> = self.oracle.iter().flatten().map(|p| p[t]).collect();
            let labels: Vec<bool> = self
                .dataset
                .requests
                .iter()
                .flat_map(|r| r.labels.as_ref().expect("generated").iter().map(move |y| y[t]))
                .collect();
            *slot = auc(&scores, &labels)?;
        }
        Ok(out)
    }

    pub const ORACLE_CSV_HEADER: [&'static str; 6] = ["impression", "request", "candidate", "user_id", "p_finish", "p_skip"];

    /// Sidecar file: impression id → true probabilities. Impressions are
    /// numbered in dataset order.
    pub fn write_oracle_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::ORACLE_CSV_HEADER).map_err(csv_err)?;
        let mut id = 0u64;
        for (r, (req, probs)) in self.dataset.requests.iter().zip(&self.oracle).enumerate() {
            for (k, p) in probs.iter().enumerate() {
                out.write_record([
                    id.to_string(),
                    r.to_string(),
                    k.to_string(),
                    req.user_id.to_string(),
                    format!("{:?}", p[0]),
                    format!("{:?}", p[1]),
                ])
                .map_err(csv_err)?;
                id += 1;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_oracle_csv(path: &Path) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut out: Vec<Vec<[f64; 2]>> = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Data("short oracle row".into()));
            let num = |i: usize| -> Result<f64> {
                field(i)?.parse().map_err(|_| Error::Data(format!("bad oracle value `{}`", rec.get(i).unwrap_or(""))))
            };
            let r: usize = field(1)?.parse().map_err(|_| Error::Data("bad request index".into()))?;
            if r == out.len() {
                out.push(Vec::new());
            } else if r + 1 != out.len() {
                return Err(Error::Data("oracle rows out of order".into()));
            }
            out[r].push([num(4)?, num(5)?]);
        }
        Ok(out)
    }
}

/// Trains the mean-pooling logistic baseline in the shared harness and
/// reports its holdout metrics.
pub fn baseline_score(schema: &FeatureSchema, train: &[Request], holdout: &[Request], cfg: &TrainConfig) -> Result<MetricSummary> {
    let model = LogisticBaseline::new(schema.clone(), 2, cfg.seed)?;
    Ok(fit(model, train, holdout, cfg)?.summary)
}
