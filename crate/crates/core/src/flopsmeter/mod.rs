//! Closed-form FLOP and parameter accounting.
//!
//! Conventions: a product of an `m × k` and a `k × n` matrix costs `2·m·k·n`;
//! each normalized or softmaxed element costs 5; activations, gating,
//! residual adds, masking and head mixing are free. These are the same
//! charges the execution trace records, so the meter can be checked
//! against an actual forward pass.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blocks::{layout_for_dims, ModelConfig};
use crate::error::{Error, Result};
use crate::features::InputDims;
use crate::mathcore::trace::ELEMENTWISE_REDUCTION_FLOPS as NORM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    SplitHeads,
    ActionProj,
    SeqFfn,
    KvProj,
    QueryMixer,
    Attention,
    OutputFusion,
    TaskHeads,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::SplitHeads,
        Component::ActionProj,
        Component::SeqFfn,
        Component::KvProj,
        Component::QueryMixer,
        Component::Attention,
        Component::OutputFusion,
        Component::TaskHeads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::SplitHeads => "split_heads",
            Component::ActionProj => "action_proj",
            Component::SeqFfn => "seq_ffn",
            Component::KvProj => "kv_proj",
            Component::QueryMixer => "query_mixer",
            Component::Attention => "attention",
            Component::OutputFusion => "output_fusion",
            Component::TaskHeads => "task_heads",
        }
    }

    /// Work on the behavior sequence alone.
    pub fn is_sequence(self) -> bool {
        matches!(self, Component::ActionProj | Component::SeqFfn | Component::KvProj)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a count can be computed once per request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Share {
    User,
    PerCandidate,
}

impl Share {
    pub fn name(self) -> &'static str {
        match self {
            Share::User => "user",
            Share::PerCandidate => "per_candidate",
        }
    }
}

/// How sequence-side work enters the totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceAccounting {
    /// Recomputed for every candidate unless request-level batching shares it.
    #[default]
    PerCandidate,
    /// Always computed once per request.
    PerRequest,
    /// Left out of every total.
    Excluded,
}

impl std::str::FromStr for SequenceAccounting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_candidate" => Ok(Self::PerCandidate),
            "per_request" => Ok(Self::PerRequest),
            "excluded" => Ok(Self::Excluded),
            other => Err(Error::Config(format!(
                "unknown sequence accounting `{other}` (per_candidate, per_request, excluded)"
            ))),
        }
    }
}

/// What to count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterSpec {
    pub dims: InputDims,
    pub seq_len: usize,
    /// Candidates per request.
    pub k: usize,
    /// Impressions per batch.
    pub batch: usize,
    pub rlb: bool,
    #[serde(default)]
    pub sequence: SequenceAccounting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: Component,
    pub share: Share,
    /// FLOPs of this part in one candidate's full forward pass.
    pub per_pass: u64,
    /// FLOPs of this part for one request of `k` candidates.
    pub per_request: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub spec: MeterSpec,
    pub components: Vec<ComponentCount>,
    pub params: u64,
}

impl FlopsReport {
    /// FLOPs of one request.
    pub fn per_request(&self) -> u64 {
        self.components.iter().map(|c| c.per_request).sum()
    }

    /// FLOPs of one candidate's standalone forward pass.
    pub fn per_pass(&self) -> u64 {
        self.components.iter().map(|c| c.per_pass).sum()
    }

    pub fn per_example(&self) -> f64 {
        self.per_request() as f64 / self.spec.k as f64
    }

    pub fn per_batch(&self) -> f64 {
        self.per_example() * self.spec.batch as f64
    }

    pub fn component(&self, c: Component) -> u64 {
        self.components.iter().filter(|x| x.component == c).map(|x| x.per_request).sum()
    }

    pub fn share_total(&self, s: Share) -> u64 {
        self.components.iter().filter(|x| x.share == s).map(|x| x.per_request).sum()
    }

    pub const CSV_HEADER: [&'static str; 4] = ["component", "share", "per_pass_flops", "per_request_flops"];

    /// One row per component part, then a `total` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER).map_err(csv_err)?;
        for c in &self.components {
            out.write_record([
                c.component.name().to_string(),
                c.share.name().to_string(),
                c.per_pass.to_string(),
                c.per_request.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.write_record(["total".into(), String::new(), self.per_pass().to_string(), self.per_request().to_string()])
            .map_err(csv_err)?;
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Sequence and head-row costs of one block over all `N` rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockCosts {
    pub seq_ffn: u64,
    pub kv_proj: u64,
    pub query_mixer: u64,
    pub attention: u64,
    pub output_fusion: u64,
}

fn ffn_flops(rows: u64, width: u64, hidden: u64) -> u64 {
    rows * 6 * width * hidden
}

/// Query-mixer cost of one head row, excluding self-attention.
fn qm_row(cfg: &ModelConfig) -> u64 {
    let d = cfg.head_dim as u64;
    let mut c = 0;
    if !cfg.ablations.wo_hm {
        c += NORM * d;
    }
    if !cfg.ablations.wo_qm_ffn {
        c += NORM * d + ffn_flops(1, d, cfg.ffn_hidden() as u64);
    }
    c
}

fn self_attention_flops(cfg: &ModelConfig) -> u64 {
    if cfg.ablations.wo_hm || !cfg.ablations.hm_to_sa {
        return 0;
    }
    let (n, d) = (cfg.n_heads as u64, cfg.head_dim as u64);
    3 * 2 * n * d * d + 2 * 2 * n * n * d + NORM * n * n
}

fn attention_row(cfg: &ModelConfig, t: u64) -> u64 {
    let d = cfg.head_dim as u64;
    4 * t * d + NORM * t
}

fn fusion_row(cfg: &ModelConfig) -> u64 {
    let d = cfg.head_dim as u64;
    NORM * d + ffn_flops(1, d, cfg.ffn_hidden() as u64)
}

pub fn block_costs(cfg: &ModelConfig, seq_len: usize) -> BlockCosts {
    let (n, d, w, t) = (cfg.n_heads as u64, cfg.head_dim as u64, cfg.width() as u64, seq_len as u64);
    BlockCosts {
        seq_ffn: NORM * t * w + ffn_flops(t, w, cfg.seq_ffn_hidden() as u64),
        kv_proj: n * 2 * 2 * t * d * d,
        query_mixer: n * qm_row(cfg) + self_attention_flops(cfg),
        attention: n * attention_row(cfg, t),
        output_fusion: n * fusion_row(cfg),
    }
}

pub fn task_head_flops(cfg: &ModelConfig) -> u64 {
    let h = cfg.task_hidden() as u64;
    cfg.n_tasks as u64 * (2 * cfg.width() as u64 * h + 2 * h)
}

/// Trainable parameters: dense weights plus nothing from the embedding
/// tables (their size depends on vocabularies, not on the architecture).
pub fn dense_param_count(cfg: &ModelConfig, dims: &InputDims) -> Result<u64> {
    cfg.validate()?;
    let layout = layout_for_dims(cfg, dims)?;
    let (n, d, w) = (cfg.n_heads as u64, cfg.head_dim as u64, cfg.width() as u64);
    let h = cfg.ffn_hidden() as u64;
    let ffn = 3 * d * h;
    let a = &cfg.ablations;
    let head_proj: u64 = layout.segments.iter().map(|s| s.n_heads as u64 * d * s.chunk as u64).sum();
    let action_proj = w * dims.action as u64;
    let n_seq = if a.shared_seq_ffn { 1 } else { cfg.n_blocks as u64 };
    let seq = n_seq * (w + 3 * w * cfg.seq_ffn_hidden() as u64);
    let mut block = 2 * n * d * d + d + (if a.shared_of_ffn { 1 } else { n }) * ffn;
    if !a.wo_hm {
        block += d;
        if a.hm_to_sa {
            block += 3 * d * d;
        }
    }
    if !a.wo_qm_ffn {
        block += d + n * ffn;
    }
    let th = cfg.task_hidden() as u64;
    let tasks = cfg.n_tasks as u64 * (th * w + th + th + 1);
    Ok(head_proj + action_proj + seq + cfg.n_blocks as u64 * block + tasks)
}

/// Closed-form counts of one request. Components are split into a user part
/// (computable once per request) and a per-candidate part; with
/// `rlb` the user part is counted once per request instead of `k` times.
pub fn count_flops(cfg: &ModelConfig, spec: &MeterSpec) -> Result<FlopsReport> {
    cfg.validate()?;
    if spec.k == 0 {
        return Err(Error::Config("at least one candidate per request".into()));
    }
    let layout = layout_for_dims(cfg, &spec.dims)?;
    let n_user = cfg.user_heads() as u64;
    let n_item = cfg.n_heads as u64 - n_user;
    let (d, w, t) = (cfg.head_dim as u64, cfg.width() as u64, spec.seq_len as u64);
    let l = cfg.n_blocks as u64;
    let k = spec.k as u64;

    let mut parts: Vec<(Component, Share, u64)> = Vec::new();
    let mut split = [0u64; 2];
    for seg in &layout.segments {
        let idx = usize::from(seg.first_head as u64 >= n_user);
        split[idx] += seg.n_heads as u64 * 2 * d * seg.chunk as u64;
    }
    parts.push((Component::SplitHeads, Share::User, split[0]));
    parts.push((Component::SplitHeads, Share::PerCandidate, split[1]));
    let costs = block_costs(cfg, spec.seq_len);
    parts.push((Component::ActionProj, Share::User, 2 * t * spec.dims.action as u64 * w));
    parts.push((Component::SeqFfn, Share::User, l * costs.seq_ffn));
    parts.push((Component::KvProj, Share::User, l * costs.kv_proj));
    parts.push((Component::QueryMixer, Share::User, l * n_user * qm_row(cfg)));
    parts.push((
        Component::QueryMixer,
        Share::PerCandidate,
        l * (n_item * qm_row(cfg) + self_attention_flops(cfg)),
    ));
    parts.push((Component::Attention, Share::User, l * n_user * attention_row(cfg, t)));
    parts.push((Component::Attention, Share::PerCandidate, l * n_item * attention_row(cfg, t)));
    parts.push((Component::OutputFusion, Share::User, l * n_user * fusion_row(cfg)));
    parts.push((Component::OutputFusion, Share::PerCandidate, l * n_item * fusion_row(cfg)));
    parts.push((Component::TaskHeads, Share::PerCandidate, task_head_flops(cfg)));

    let components = parts
        .into_iter()
        .map(|(component, share, per_pass)| {
            let once = match (component.is_sequence(), spec.sequence) {
                (true, SequenceAccounting::Excluded) => 0,
                (true, SequenceAccounting::PerRequest) => per_pass,
                _ if share == Share::User && spec.rlb => per_pass,
                _ => k * per_pass,
            };
            let per_pass = if component.is_sequence() && spec.sequence == SequenceAccounting::Excluded {
                0
            } else {
                per_pass
            };
            ComponentCount {
                component,
                share,
                per_pass,
                per_request: once,
            }
        })
        .collect();
    Ok(FlopsReport {
        spec: *spec,
        components,
        params: dense_param_count(cfg, &spec.dims)?,
    })
}

/// `1 − flops(rlb) / flops(no rlb)` for requests of `k` candidates.
pub fn rlb_savings(cfg: &ModelConfig, dims: InputDims, seq_len: usize, k: usize, sequence: SequenceAccounting) -> Result<f64> {
    if !cfg.decoupling.enabled {
        return Err(Error::Config("request-level batching needs a decoupled config".into()));
    }
    let spec = |rlb| MeterSpec { dims, seq_len, k, batch: k, rlb, sequence };
    let with = count_flops(cfg, &spec(true))?.per_request() as f64;
    let without = count_flops(cfg, &spec(false))?.per_request() as f64;
    Ok(1.0 - with / without)
}

/// Limit of [`rlb_savings`] as `k` grows: the user share of one pass.
pub fn user_shareable_fraction(cfg: &ModelConfig, dims: InputDims, seq_len: usize, sequence: SequenceAccounting) -> Result<f64> {
    let r = count_flops(cfg, &MeterSpec { dims, seq_len, k: 1, batch: 1, rlb: false, sequence })?;
    let user: u64 = r.components.iter().filter(|c| c.share == Share::User).map(|c| c.per_pass).sum();
    Ok(user as f64 / r.per_pass() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingAxis {
    /// Vary the head dimension with everything else fixed.
    Dense,
    /// Vary the sequence length.
    Sequence,
}

/// Sequence lengths of the sequence-scaling sweep.
pub const SEQUENCE_POINTS: [usize; 4] = [512, 2048, 8192, 10000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_heads: usize,
    pub n_blocks: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub params: u64,
    /// FLOPs of one candidate's forward pass.
    pub flops: u64,
}

/// One row per point: head dims on the dense axis (at the base sequence
/// length), sequence lengths on the sequence axis.
pub fn scaling_report(base: &ModelConfig, dims: InputDims, seq_len: usize, axis: ScalingAxis, points: &[usize]) -> Result<Vec<ScalingRow>> {
    if points.is_empty() {
        return Err(Error::Config("scaling report needs at least one point".into()));
    }
    points
        .iter()
        .map(|&p| {
            let mut cfg = base.clone();
            let mut t = seq_len;
            match axis {
                ScalingAxis::Dense => cfg.head_dim = p,
                ScalingAxis::Sequence => {
                    t = p;
                    cfg.max_seq_len = cfg.max_seq_len.max(p);
                }
            }
            let r = count_flops(&cfg, &MeterSpec { dims, seq_len: t, k: 1, batch: 1, rlb: false, sequence: SequenceAccounting::PerCandidate })?;
            Ok(ScalingRow {
                n_heads: cfg.n_heads,
                n_blocks: cfg.n_blocks,
                head_dim: cfg.head_dim,
                seq_len: t,
                params: r.params,
                flops: r.per_pass(),
            })
        })
        .collect()
}

pub const SCALING_CSV_HEADER: [&str; 6] = ["n_heads", "n_blocks", "head_dim", "seq_len", "params", "flops"];

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCALING_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([r.n_heads, r.n_blocks, r.head_dim, r.seq_len].map(|v| v.to_string()).iter().chain(&[r.params.to_string(), r.flops.to_string()]))
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::trace;
    use crate::mathcore::{Matrix, op::{DifferentiableOp, Linear}};

    fn dims() -> InputDims {
        InputDims { user: 24, item: 16, action: 12 }
    }

    fn spec(t: usize, k: usize, rlb: bool) -> MeterSpec {
        MeterSpec { dims: dims(), seq_len: t, k, batch: k, rlb, sequence: SequenceAccounting::PerCandidate }
    }

    #[test]
    fn linear_convention() {
        let op = Linear { weight: Matrix::zeros(5, 3) };
        assert_eq!(op.flops((1, 3)), 30);
        let (_, traced) = trace::measure(|| op.forward(&Matrix::zeros(1, 3)).unwrap());
        assert_eq!(traced, 30);
    }

    #[test]
    fn total_is_affine_in_sequence_length() {
        let cfg = ModelConfig::new(4, 2, 16, 4096);
        let f = |t| count_flops(&cfg, &spec(t, 1, false)).unwrap();
        let (a, b, c) = (f(100), f(200), f(400));
        let seq = |r: &FlopsReport| r.component(Component::SeqFfn) + r.component(Component::KvProj) + r.component(Component::Attention);
        assert_eq!(seq(&b), 2 * seq(&a));
        assert_eq!(b.component(Component::QueryMixer), a.component(Component::QueryMixer));
        let slope = b.per_pass() - a.per_pass();
        assert_eq!(c.per_pass(), b.per_pass() + 2 * slope);
        let intercept = a.per_pass() - slope;
        assert_eq!(f(0).per_pass(), intercept);
    }

    #[test]
    fn rlb_savings_increase_with_k_towards_user_share() {
        let cfg = ModelConfig::new(4, 2, 16, 64).with_decoupling(2);
        let s: Vec<f64> = [1, 2, 4, 8, 32, 1024]
            .iter()
            .map(|&k| rlb_savings(&cfg, dims(), 64, k, SequenceAccounting::PerCandidate).unwrap())
            .collect();
        assert_eq!(s[0], 0.0);
        assert!(s.windows(2).all(|p| p[0] < p[1]), "{s:?}");
        let limit = user_shareable_fraction(&cfg, dims(), 64, SequenceAccounting::PerCandidate).unwrap();
        assert!(s[5] < limit && limit - s[5] < 1e-2);
        assert!(rlb_savings(&ModelConfig::new(4, 2, 16, 64), dims(), 64, 8, SequenceAccounting::PerCandidate).is_err());
    }

    #[test]
    fn per_example_rlb_cost_decreases_to_item_cost() {
        let cfg = ModelConfig::new(4, 1, 8, 32).with_decoupling(2);
        let per_ex: Vec<f64> = (1..10).map(|k| count_flops(&cfg, &spec(32, k, true)).unwrap().per_example()).collect();
        assert!(per_ex.windows(2).all(|p| p[0] > p[1]));
        let item = count_flops(&cfg, &spec(32, 1, true)).unwrap().share_total(Share::PerCandidate) as f64;
        assert!(per_ex.iter().all(|&v| v > item));
    }

    #[test]
    fn params_and_scaling() {
        let cfg = ModelConfig::new(4, 2, 16, 512);
        let rows = scaling_report(&cfg, dims(), 512, ScalingAxis::Sequence, &SEQUENCE_POINTS).unwrap();
        assert!(rows.iter().all(|r| r.params == rows[0].params));
        assert!(rows.windows(2).all(|p| p[0].flops < p[1].flops));
        let dense = scaling_report(&cfg, dims(), 512, ScalingAxis::Dense, &[16, 32]).unwrap();
        assert!(dense[1].params > dense[0].params);
        assert!(scaling_report(&cfg, dims(), 512, ScalingAxis::Dense, &[]).is_err());
        let mut buf = Vec::new();
        write_scaling_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n_heads,n_blocks,head_dim,seq_len,params,flops\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn doubling_head_dim_quadruples_square_maps() {
        let a = block_costs(&ModelConfig::new(4, 1, 16, 8), 8);
        let b = block_costs(&ModelConfig::new(4, 1, 32, 8), 8);
        assert_eq!(b.kv_proj, 4 * a.kv_proj);
        assert_eq!(b.seq_ffn - 5 * 8 * 128, 4 * (a.seq_ffn - 5 * 8 * 64));
    }
}
