//! One function per subcommand. Each writes its reports plus the resolved
//! config into the output directory and returns what it wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mixformer::blocks::{MixFormer, Tensors};
use mixformer::datagen::{generate, tune_temperature, Generated};
use mixformer::decouple::bench::{bench_rlb, write_bench_csv, RlbBenchRow};
use mixformer::features::{Dataset, FeatureSchema, Request};
use mixformer::flopsmeter::{count_flops, rlb_savings, scaling_report, write_scaling_csv, FlopsReport, MeterSpec, ScalingAxis, SEQUENCE_POINTS};
use mixformer::trainer::{
    evaluate, holdout_indices, run_ablations, train_steps, write_log_csv, AblationResult, LogRow, LogisticBaseline, MetricSummary,
    OptimizerState,
};
use mixformer::{Error, Result};

use crate::config::RunConfig;

pub const DATASET_FILE: &str = "dataset.mxds";
pub const SCHEMA_FILE: &str = "schema.txt";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "model.opt";

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Data(format!("{other:?}")),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    cfg.write_sidecar(out)
}

fn write_rows<W: Write>(w: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        out.write_record(&r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub struct GenReport {
    pub generated: Generated,
    pub oracle_auc: [f64; 2],
}

/// Generates (tuning the temperature first when a band is set) and writes
/// dataset, schema, oracle and a per-task summary.
pub fn cmd_gen(cfg: &mut RunConfig, out: &Path) -> Result<GenReport> {
    if let Some([lo, hi]) = cfg.data.oracle_band {
        cfg.generator = tune_temperature(&cfg.generator, lo, hi)?;
    }
    let generated = generate(&cfg.generator)?;
    prepare(cfg, out)?;
    generated.dataset.schema.write(&out.join(SCHEMA_FILE))?;
    generated.dataset.write(&out.join(DATASET_FILE))?;
    generated.write_oracle_csv(create(out, ORACLE_FILE)?)?;
    let oracle_auc = generated.oracle_auc()?;
    let n = generated.dataset.n_impressions() as f64;
    let rows = (0..2).map(|t| {
        let positives = generated.dataset.requests.iter().flat_map(|r| r.labels.iter().flatten()).filter(|y| y[t]).count();
        vec![
            mixformer::datagen::TASK_NAMES[t].to_string(),
            oracle_auc[t].to_string(),
            (positives as f64 / n).to_string(),
        ]
    });
    write_rows(create(out, "gen.csv")?, &["task", "oracle_auc", "label_rate"], rows)?;
    Ok(GenReport { generated, oracle_auc })
}

/// A dataset directory written by `gen`.
pub struct Loaded {
    pub schema: FeatureSchema,
    pub requests: Vec<Request>,
    pub oracle: Option<Vec<Vec<[f64; 2]>>>,
}

pub fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Loaded> {
    let schema = FeatureSchema::read(&dir.join(SCHEMA_FILE))?;
    let mut requests = Dataset::read(&schema, &dir.join(DATASET_FILE))?.requests;
    let oracle_path = dir.join(ORACLE_FILE);
    let mut oracle = if oracle_path.exists() { Some(Generated::read_oracle_csv(&oracle_path)?) } else { None };
    if let Some(n) = cfg.data.max_requests {
        requests.truncate(n);
        if let Some(o) = &mut oracle {
            o.truncate(n);
        }
    }
    if let Some(o) = &oracle {
        if o.len() != requests.len() || o.iter().zip(&requests).any(|(p, r)| p.len() != r.n_candidates()) {
            return Err(Error::Data("oracle file does not match the dataset".into()));
        }
    }
    Ok(Loaded { schema, requests, oracle })
}

/// Train and holdout requests plus the holdout indices.
pub fn split(cfg: &RunConfig, requests: &[Request]) -> Result<(Vec<Request>, Vec<Request>, Vec<usize>)> {
    let hold = holdout_indices(requests.len(), cfg.data.holdout_fraction, cfg.train.seed)?;
    let mut is_hold = vec![false; requests.len()];
    hold.iter().for_each(|&i| is_hold[i] = true);
    let train = requests.iter().zip(&is_hold).filter(|(_, h)| !**h).map(|(r, _)| r.clone()).collect();
    let holdout = hold.iter().map(|&i| requests[i].clone()).collect();
    Ok((train, holdout, hold))
}

fn oracle_summary(loaded: &Loaded, hold: &[usize], cfg: &RunConfig) -> Result<Option<MetricSummary>> {
    let Some(oracle) = &loaded.oracle else { return Ok(None) };
    let mut probs = vec![Vec::new(); 2];
    let mut labels = vec![Vec::new(); 2];
    let mut users = Vec::new();
    for &i in hold {
        let req = &loaded.requests[i];
        let y = req.labels.as_ref().ok_or_else(|| Error::Data("unlabelled request".into()))?;
        for (p, y) in oracle[i].iter().zip(y) {
            users.push(req.user_id);
            for t in 0..2 {
                probs[t].push(p[t]);
                labels[t].push(y[t]);
            }
        }
    }
    Ok(Some(mixformer::trainer::summarize(&probs, &labels, &users, cfg.train.uauc_weighting)?))
}

pub const METRICS_HEADER: [&str; 6] = ["scorer", "task", "auc", "uauc", "n_users", "log_loss"];

fn metric_rows(scorer: &str, s: &MetricSummary) -> Vec<Vec<String>> {
    (0..s.auc.len())
        .map(|t| {
            vec![
                scorer.to_string(),
                t.to_string(),
                s.auc[t].to_string(),
                s.uauc[t].to_string(),
                s.n_users[t].to_string(),
                s.log_loss.to_string(),
            ]
        })
        .collect()
}

pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub model: MetricSummary,
    pub baseline: Option<MetricSummary>,
    pub oracle: Option<MetricSummary>,
    pub checkpoint: PathBuf,
}

/// Trains MixFormer on the training split, optionally the baseline too,
/// and writes checkpoint, optimizer state, log and holdout metrics. With
/// `resume`, continues from the checkpoint and optimizer state in `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainReport> {
    let loaded = load_data(data, cfg)?;
    let (train, holdout, hold) = split(cfg, &loaded.requests)?;
    let (mut model, mut opt) = if resume {
        let model = MixFormer::load(&out.join(MODEL_FILE))?;
        if model.config != cfg.model {
            return Err(Error::Config(format!("checkpoint config differs in {:?}", model.config.diff(&cfg.model))));
        }
        let opt = OptimizerState::load(&out.join(OPTIMIZER_FILE), model.dense.tensors().len())?;
        (model, opt)
    } else {
        (MixFormer::new(cfg.model.clone(), loaded.schema.clone(), cfg.train.seed)?, cfg.train.optimizer())
    };
    prepare(cfg, out)?;
    let log = train_steps(&mut model, &train, Some(&holdout), &mut opt, &cfg.train, cfg.max_steps)?;
    let checkpoint = out.join(MODEL_FILE);
    model.save(&checkpoint)?;
    opt.save(&out.join(OPTIMIZER_FILE))?;
    let log_name = if resume { format!("train_log_from_{}.csv", log.first().map_or(0, |r| r.step)) } else { "train_log.csv".into() };
    write_log_csv(&log, create(out, &log_name)?)?;

    let summary = evaluate(&model, &holdout, cfg.train.uauc_weighting)?;
    let baseline = if cfg.data.baseline {
        let mut b = LogisticBaseline::new(loaded.schema.clone(), cfg.model.n_tasks, cfg.train.seed)?;
        let mut bopt = cfg.train.optimizer();
        train_steps(&mut b, &train, None, &mut bopt, &cfg.train, cfg.max_steps)?;
        Some(evaluate(&b, &holdout, cfg.train.uauc_weighting)?)
    } else {
        None
    };
    let oracle = oracle_summary(&loaded, &hold, cfg)?;
    let mut rows = metric_rows("mixformer", &summary);
    if let Some(b) = &baseline {
        rows.extend(metric_rows("baseline", b));
    }
    if let Some(o) = &oracle {
        rows.extend(metric_rows("oracle", o));
    }
    write_rows(create(out, "metrics.csv")?, &METRICS_HEADER, rows)?;
    Ok(TrainReport { log, model: summary, baseline, oracle, checkpoint })
}

/// Scores the holdout split with a checkpoint.
pub fn cmd_eval(cfg: &RunConfig, data: &Path, model_path: &Path, out: &Path) -> Result<MetricSummary> {
    let loaded = load_data(data, cfg)?;
    let (_, holdout, hold) = split(cfg, &loaded.requests)?;
    let model = MixFormer::load(model_path)?;
    if model.schema != loaded.schema {
        return Err(Error::Data("checkpoint schema differs from the dataset's".into()));
    }
    prepare(cfg, out)?;
    let summary = evaluate(&model, &holdout, cfg.train.uauc_weighting)?;
    let mut rows = metric_rows("mixformer", &summary);
    if let Some(o) = oracle_summary(&loaded, &hold, cfg)? {
        rows.extend(metric_rows("oracle", &o));
    }
    write_rows(create(out, "eval.csv")?, &METRICS_HEADER, rows)?;
    Ok(summary)
}

pub struct FlopsOutput {
    pub report: FlopsReport,
    /// Present for decoupled models.
    pub rlb_savings: Option<f64>,
}

/// Component table and summary for one setting; with an axis set, also a
/// scaling sweep.
pub fn cmd_flops(cfg: &RunConfig, out: &Path) -> Result<FlopsOutput> {
    let f = &cfg.flops;
    let dims = cfg.input_dims()?;
    let mut model = cfg.model.clone();
    model.max_seq_len = model.max_seq_len.max(f.seq_len);
    let spec = MeterSpec { dims, seq_len: f.seq_len, k: f.candidates, batch: f.batch, rlb: f.rlb, sequence: f.sequence };
    let report = count_flops(&model, &spec)?;
    let savings = if model.decoupling.enabled { Some(rlb_savings(&model, dims, f.seq_len, f.candidates, f.sequence)?) } else { None };
    prepare(cfg, out)?;
    report.write_csv(create(out, "flops.csv")?)?;
    let mut summary = vec![
        ("params", report.params.to_string()),
        ("per_pass", report.per_pass().to_string()),
        ("per_request", report.per_request().to_string()),
        ("per_example", report.per_example().to_string()),
        ("per_batch", report.per_batch().to_string()),
    ];
    if let Some(s) = savings {
        summary.push(("rlb_savings", s.to_string()));
    }
    write_rows(create(out, "flops_summary.csv")?, &["metric", "value"], summary.into_iter().map(|(k, v)| vec![k.to_string(), v]))?;
    if let Some(axis) = f.axis {
        let points = match (axis, f.points.is_empty()) {
            (_, false) => f.points.clone(),
            (ScalingAxis::Sequence, true) => SEQUENCE_POINTS.to_vec(),
            (ScalingAxis::Dense, true) => [1, 2, 4, 8].iter().map(|m| m * model.head_dim).collect(),
        };
        write_scaling_csv(&scaling_report(&model, dims, f.seq_len, axis, &points)?, create(out, "scaling.csv")?)?;
    }
    Ok(FlopsOutput { report, rlb_savings: savings })
}

/// Equivalence, traced savings and wall-clock of request-level batching on
/// the first requests of the dataset. Uses the checkpoint when given, else
/// a freshly initialised model.
pub fn cmd_bench_rlb(cfg: &RunConfig, data: &Path, model_path: Option<&Path>, out: &Path) -> Result<Vec<RlbBenchRow>> {
    if !cfg.model.decoupling.enabled {
        return Err(Error::Config("bench-rlb needs a decoupled model (set model.decoupling)".into()));
    }
    let loaded = load_data(data, cfg)?;
    let model = match model_path {
        Some(p) => MixFormer::load(p)?,
        None => MixFormer::new(cfg.model.clone(), loaded.schema.clone(), cfg.train.seed)?,
    };
    let n = cfg.bench.requests.min(loaded.requests.len());
    prepare(cfg, out)?;
    let rows = bench_rlb(&model, &loaded.requests[..n], &cfg.bench.candidates, cfg.bench.repeats)?;
    write_bench_csv(&rows, create(out, "bench_rlb.csv")?)?;
    Ok(rows)
}

pub const ABLATION_HEADER: [&str; 13] = [
    "variant",
    "diff",
    "params",
    "final_loss",
    "seconds",
    "auc_0",
    "auc_1",
    "uauc_0",
    "uauc_1",
    "delta_auc_0",
    "delta_auc_1",
    "delta_uauc_mean",
    "delta_log_loss",
];

fn ablation_row(r: &AblationResult) -> Vec<String> {
    let get = |v: &[f64], i: usize| v.get(i).map(|x| x.to_string()).unwrap_or_default();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    vec![
        r.name.clone(),
        r.diff.join(";"),
        r.params.to_string(),
        r.final_loss.to_string(),
        r.seconds.to_string(),
        get(&r.summary.auc, 0),
        get(&r.summary.auc, 1),
        get(&r.summary.uauc, 0),
        get(&r.summary.uauc, 1),
        get(&r.delta.auc, 0),
        get(&r.delta.auc, 1),
        mean(&r.delta.uauc).to_string(),
        r.delta.log_loss.to_string(),
    ]
}

/// Base run plus the six single-switch variants under one seed and
/// schedule. `ablation.csv` has one row per variant; the base run goes to
/// `ablation_base.csv`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<AblationResult>> {
    let loaded = load_data(data, cfg)?;
    let (train, holdout, _) = split(cfg, &loaded.requests)?;
    prepare(cfg, out)?;
    let results = run_ablations(&cfg.model, &loaded.schema, &train, &holdout, &cfg.train)?;
    let (base, variants) = results.split_first().expect("base row");
    write_rows(create(out, "ablation_base.csv")?, &ABLATION_HEADER, [ablation_row(base)])?;
    write_rows(create(out, "ablation.csv")?, &ABLATION_HEADER, variants.iter().map(ablation_row))?;
    Ok(results)
}
