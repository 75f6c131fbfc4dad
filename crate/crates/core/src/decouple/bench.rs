//! Request-level batching against per-candidate inference on real
//! requests: numerical agreement, traced FLOPs and wall-clock time.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{forward_decoupled, require_decoupled, rlb_forward};
use crate::blocks::MixFormer;
use crate::error::{Error, Result};
use crate::features::Request;
use crate::flopsmeter::csv_err;
use crate::mathcore::trace;

/// `1, 2, 4, …, 128`.
pub const BENCH_CANDIDATES: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlbBenchRow {
    pub k: usize,
    pub requests: usize,
    /// Largest relative logit difference between the two paths.
    pub max_rel_deviation: f64,
    pub per_candidate_flops: u64,
    pub rlb_flops: u64,
    pub flops_savings: f64,
    pub per_candidate_secs: f64,
    pub rlb_secs: f64,
    /// `per_candidate_secs / rlb_secs`.
    pub speedup: f64,
}

/// `base` with exactly `k` candidates, taken in order from the pool of all
/// candidates of `pool` starting at `offset`. Labels are dropped.
pub fn with_candidates(base: &Request, pool: &[Vec<u32>], k: usize, offset: usize) -> Request {
    Request {
        candidates: (0..k).map(|j| pool[(offset + j) % pool.len()].clone()).collect(),
        labels: None,
        ..base.clone()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Runs both paths on every request, re-drawn with `k` candidates, for
/// each `k`; the timing of each path is the best of `repeats` runs.
pub fn bench_rlb(model: &MixFormer, requests: &[Request], ks: &[usize], repeats: usize) -> Result<Vec<RlbBenchRow>> {
    require_decoupled(&model.config)?;
    if requests.is_empty() || repeats == 0 {
        return Err(Error::Config("benchmark needs requests and at least one repeat".into()));
    }
    let pool: Vec<Vec<u32>> = requests.iter().flat_map(|r| r.candidates.iter().cloned()).collect();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(Error::Config("candidate counts must be positive".into()));
        }
        let reqs: Vec<Request> = requests
            .iter()
            .enumerate()
            .map(|(i, r)| with_candidates(r, &pool, k, i * k))
            .collect();
        let per_candidate = |reqs: &[Request]| -> Result<Vec<Vec<Vec<f64>>>> {
            reqs.iter()
                .map(|r| (0..k).map(|j| forward_decoupled(model, r, j)).collect())
                .collect()
        };
        let shared = |reqs: &[Request]| -> Result<Vec<Vec<Vec<f64>>>> { reqs.iter().map(|r| rlb_forward(model, r)).collect() };
        let (single, per_candidate_flops) = trace::measure(|| per_candidate(&reqs));
        let (batched, rlb_flops) = trace::measure(|| shared(&reqs));
        let (single, batched) = (single?, batched?);
        let max_rel_deviation = single
            .iter()
            .flatten()
            .flatten()
            .zip(batched.iter().flatten().flatten())
            .map(|(&a, &b)| rel(a, b))
            .fold(0.0, f64::max);
        let mut best = [f64::INFINITY; 2];
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(trace::untraced(|| per_candidate(&reqs))?);
            best[0] = best[0].min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(trace::untraced(|| shared(&reqs))?);
            best[1] = best[1].min(t.elapsed().as_secs_f64());
        }
        rows.push(RlbBenchRow {
            k,
            requests: reqs.len(),
            max_rel_deviation,
            per_candidate_flops,
            rlb_flops,
            flops_savings: 1.0 - rlb_flops as f64 / per_candidate_flops as f64,
            per_candidate_secs: best[0],
            rlb_secs: best[1],
            speedup: best[0] / best[1],
        });
    }
    Ok(rows)
}

pub const BENCH_CSV_HEADER: [&str; 9] = [
    "k",
    "requests",
    "max_rel_deviation",
    "per_candidate_flops",
    "rlb_flops",
    "flops_savings",
    "per_candidate_secs",
    "rlb_secs",
    "speedup",
];

pub fn write_bench_csv<W: Write>(rows: &[RlbBenchRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.k.to_string(),
            r.requests.to_string(),
            format!("{:e}", r.max_rel_deviation),
            r.per_candidate_flops.to_string(),
            r.rlb_flops.to_string(),
            r.flops_savings.to_string(),
            r.per_candidate_secs.to_string(),
            r.rlb_secs.to_string(),
            r.speedup.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
