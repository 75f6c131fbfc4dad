use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::features::HeadLayout;
use crate::mathcore::{xavier_uniform, FfnParams, Matrix, NormParams};

/// Flat views of every trainable tensor, in canonical order.
pub trait Tensors {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Tensors for Matrix {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(self.data());
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.data_mut());
    }
}

impl Tensors for Vec<f64> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(self);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self);
    }
}

impl Tensors for NormParams {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(&self.scale);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.scale);
    }
}

impl<T: Tensors> Tensors for Vec<T> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        for t in self {
            t.collect(out);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for t in self {
            t.collect_mut(out);
        }
    }
}

impl<T: Tensors> Tensors for Option<T> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        if let Some(t) = self {
            t.collect(out);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        if let Some(t) = self {
            t.collect_mut(out);
        }
    }
}

macro_rules! tensor_fields {
    ($t:ty: $($f:ident),+) => {
        impl Tensors for $t {
            fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
                $(self.$f.collect(out);)+
            }
            fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
                $(self.$f.collect_mut(out);)+
            }
        }
    };
}

tensor_fields!(FfnParams: gate, up, down);
tensor_fields!(SelfAttnParams: query, key, value);
tensor_fields!(SeqFfnParams: norm, ffn);
tensor_fields!(BlockParams: mix_norm, self_attn, qm_norm, qm_ffn, key_proj, value_proj, of_norm, of_ffn);
tensor_fields!(TaskHeadParams: hidden, hidden_bias, out, out_bias);
tensor_fields!(DenseParams: head_proj, action_proj, seq, blocks, tasks);

/// Query/key/value maps of the self-attention that replaces head mixing in
/// the `hm_to_sa` variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttnParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Per-layer action FFN with its norm. Applied to the raw action rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqFfnParams {
    pub norm: NormParams,
    pub ffn: FfnParams,
}

/// One block. A sublayer that an ablation removes has no norm and no
/// weights (`None` or an empty list).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// Norm of the mixing sublayer; `None` under `wo_hm`.
    pub mix_norm: Option<NormParams>,
    pub self_attn: Option<SelfAttnParams>,
    pub qm_norm: Option<NormParams>,
    /// One per head; empty under `wo_qm_ffn`.
    pub qm_ffn: Vec<FfnParams>,
    pub key_proj: Vec<Matrix>,
    pub value_proj: Vec<Matrix>,
    pub of_norm: NormParams,
    /// One per head, or a single shared FFN under `shared_of_ffn`.
    pub of_ffn: Vec<FfnParams>,
}

/// Two-layer task network: `out · swish(hidden · f + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadParams {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub out: Matrix,
    pub out_bias: Vec<f64>,
}

/// All dense weights. `seq` has one entry per block, or one shared entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// One `D × chunk` map per head.
    pub head_proj: Vec<Matrix>,
    /// `N·D × Σ action dims`.
    pub action_proj: Matrix,
    pub seq: Vec<SeqFfnParams>,
    pub blocks: Vec<BlockParams>,
    pub tasks: Vec<TaskHeadParams>,
}

fn norm(cfg: &ModelConfig, dim: usize) -> NormParams {
    NormParams::with_eps(dim, cfg.norm_eps)
}

impl BlockParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (n, d, h) = (cfg.n_heads, cfg.head_dim, cfg.ffn_hidden());
        let a = &cfg.ablations;
        let self_attn = (a.hm_to_sa && !a.wo_hm).then(|| SelfAttnParams {
            query: xavier_uniform(rng, d, d),
            key: xavier_uniform(rng, d, d),
            value: xavier_uniform(rng, d, d),
        });
        let qm_ffn = if a.wo_qm_ffn {
            Vec::new()
        } else {
            (0..n).map(|_| FfnParams::random(rng, d, h, d)).collect()
        };
        let key_proj = (0..n).map(|_| xavier_uniform(rng, d, d)).collect();
        let value_proj = (0..n).map(|_| xavier_uniform(rng, d, d)).collect();
        let n_of = if a.shared_of_ffn { 1 } else { n };
        let of_ffn = (0..n_of).map(|_| FfnParams::random(rng, d, h, d)).collect();
        Self {
            mix_norm: (!a.wo_hm).then(|| norm(cfg, d)),
            self_attn,
            qm_norm: (!a.wo_qm_ffn).then(|| norm(cfg, d)),
            qm_ffn,
            key_proj,
            value_proj,
            of_norm: norm(cfg, d),
            of_ffn,
        }
    }
}

impl SeqFfnParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = cfg.width();
        Self {
            norm: norm(cfg, w),
            ffn: FfnParams::random(rng, w, cfg.seq_ffn_hidden(), w),
        }
    }
}

impl TaskHeadParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let hidden = cfg.task_hidden();
        Self {
            hidden: xavier_uniform(rng, hidden, cfg.width()),
            hidden_bias: vec![0.0; hidden],
            out: xavier_uniform(rng, 1, hidden),
            out_bias: vec![0.0],
        }
    }
}

impl DenseParams {
    /// Random initialization in canonical order: head projections, action
    /// projection, action FFNs, blocks, task heads.
    pub fn init<R: Rng>(cfg: &ModelConfig, layout: &HeadLayout, action_width: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if layout.n_heads != cfg.n_heads || layout.head_dim != cfg.head_dim {
            return shape_err("head layout does not match the config");
        }
        let head_proj = (0..cfg.n_heads)
            .map(|j| {
                let (rows, cols) = layout.proj_shape(j);
                xavier_uniform(rng, rows, cols)
            })
            .collect();
        let action_proj = xavier_uniform(rng, cfg.width(), action_width);
        let n_seq = if cfg.ablations.shared_seq_ffn { 1 } else { cfg.n_blocks };
        let seq = (0..n_seq).map(|_| SeqFfnParams::init(cfg, rng)).collect();
        let blocks = (0..cfg.n_blocks).map(|_| BlockParams::init(cfg, rng)).collect();
        let tasks = (0..cfg.n_tasks).map(|_| TaskHeadParams::init(cfg, rng)).collect();
        Ok(Self {
            head_proj,
            action_proj,
            seq,
            blocks,
            tasks,
        })
    }

    /// Same structure, every value zero (norm scales included).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }

    /// Action FFN used by block `l`.
    pub fn seq_for(&self, l: usize) -> &SeqFfnParams {
        &self.seq[l.min(self.seq.len() - 1)]
    }

    pub fn seq_index(&self, l: usize) -> usize {
        l.min(self.seq.len() - 1)
    }

    pub fn add_assign(&mut self, other: &DenseParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
