//! User-item decoupling: head allocation, the mixing mask and
//! request-level batching.
//!
//! With `N_U` user heads, the mask keeps user rows from reading item rows
//! during head mixing. Every other sublayer is row-local, so user rows at
//! every layer depend only on request-level features and the sequence.
//! [`rlb_forward`] computes those rows once per request and runs only the
//! item rows per candidate. Item rows still read the shared user rows.

pub mod bench;

use std::cell::RefCell;

use crate::blocks::layers::{attend_rows, mix_rows, output_fusion_forward, per_head_ffn_forward, residual_forward, task_forward};
use crate::blocks::{MixFormer, ModelConfig, SequenceSide};
use crate::error::{shape_err, Error, Result};
use crate::features::{embed_item_side, embed_nonseq, embed_request_side, Request};
use crate::mathcore::{Matrix, NormParams};

/// `(N_U, N_G)` with `N_G = ⌊D_item·N / D_ns⌋`, clamped so both sides get
/// at least one head.
pub fn allocate_heads(user_dim: usize, item_dim: usize, n_heads: usize) -> Result<(usize, usize)> {
    if n_heads < 2 {
        return Err(Error::Config(format!("decoupling needs at least 2 heads, got {n_heads}")));
    }
    let total = user_dim + item_dim;
    if total == 0 {
        return Err(Error::Config("no non-sequential features to allocate".into()));
    }
    let n_item = (item_dim * n_heads / total).clamp(1, n_heads - 1);
    Ok((n_heads - n_item, n_item))
}

/// `N × D` 0/1 matrix: `M[i][j] = 0` iff `i < N_U` and `j ≥ N_U·D/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupleMask {
    pub matrix: Matrix,
    pub n_user: usize,
}

pub fn build_mask(n_heads: usize, n_user: usize, head_dim: usize) -> Result<DecoupleMask> {
    if n_heads == 0 || head_dim % n_heads != 0 {
        return shape_err(format!("head dim {head_dim} is not a multiple of {n_heads} heads"));
    }
    if n_user > n_heads {
        return shape_err(format!("{n_user} user heads out of {n_heads}"));
    }
    let cut = n_user * head_dim / n_heads;
    let mut m = Matrix::filled(n_heads, head_dim, 1.0);
    for i in 0..n_user {
        m.row_mut(i)[cut..].fill(0.0);
    }
    Ok(DecoupleMask { matrix: m, n_user })
}

/// `M ⊙ HeadMixing(X)`.
pub fn head_mixing_masked(x: &Matrix, mask: &DecoupleMask) -> Result<Matrix> {
    crate::blocks::head_mixing(x)?.hadamard(&mask.matrix)
}

fn require_decoupled(cfg: &ModelConfig) -> Result<()> {
    if !cfg.decoupling.enabled {
        return Err(Error::Config("model is not user-item decoupled".into()));
    }
    Ok(())
}

/// Per-candidate logits of a decoupled model, computing everything for
/// this candidate alone.
pub fn forward_decoupled(model: &MixFormer, req: &Request, k: usize) -> Result<Vec<f64>> {
    require_decoupled(&model.config)?;
    model.forward(req, k)
}

/// Everything a request's candidates share.
#[derive(Clone, Debug)]
pub struct SharedUserState {
    pub n_user: usize,
    /// Concatenated user and context embeddings.
    pub e_user: Vec<f64>,
    /// User rows entering each block, plus the final output: `L + 1`
    /// matrices of `N_U × D`.
    pub user_rows: Vec<Matrix>,
    /// Per block, the user rows the mixing sublayer reads (normalized
    /// under pre-norm, raw under post-norm).
    pub mix_sources: Vec<Matrix>,
    pub sequence: SequenceSide,
}

fn mixing_residual(cfg: &ModelConfig, norm: &NormParams, x: &Matrix, user_src: Option<&Matrix>, rows: std::ops::Range<usize>) -> Result<(Matrix, Matrix)> {
    let seen = RefCell::new(None);
    let n = cfg.n_heads;
    let n_user = cfg.user_heads();
    let (y, _) = residual_forward(cfg.norm_kind(), cfg.ablations.post_ln, norm, x, |v| {
        let src = match user_src {
            Some(u) => Matrix::vstack(u, v)?,
            None => v.clone(),
        };
        let out = mix_rows(&src, n, rows, n_user);
        *seen.borrow_mut() = Some(v.clone());
        Ok((out, ()))
    })?;
    let src = seen.into_inner().expect("mixing ran");
    Ok((y, src))
}

/// Rows `first_head..` of one block after the mixing sublayer.
fn block_rows(model: &MixFormer, l: usize, p_rows: Matrix, first_head: usize, kv: &crate::blocks::LayerKv) -> Result<Matrix> {
    let cfg = &model.config;
    let p = &model.dense.blocks[l];
    let q = match &p.qm_norm {
        Some(norm) => {
            residual_forward(cfg.norm_kind(), cfg.ablations.post_ln, norm, &p_rows, |v| {
                per_head_ffn_forward(v, &p.qm_ffn, first_head)
            })?
            .0
        }
        None => p_rows,
    };
    let (z, _) = attend_rows(&q, kv, first_head)?;
    Ok(output_fusion_forward(cfg, p, &z, first_head)?.0)
}

pub fn shared_user_state(model: &MixFormer, req: &Request) -> Result<SharedUserState> {
    let cfg = &model.config;
    require_decoupled(cfg)?;
    let n_user = cfg.user_heads();
    let sequence = model.sequence_side(req)?;
    let e_user = embed_request_side(req, &model.tables)?;
    let mut x = Matrix::zeros(0, cfg.head_dim);
    for seg in model.layout.segments.iter().filter(|s| s.first_head < n_user) {
        let part = &e_user[seg.offset..seg.offset + seg.len];
        x = Matrix::vstack(&x, &model.layout.project_segment(seg, part, &model.dense.head_proj)?)?;
    }
    let mut user_rows = vec![x.clone()];
    let mut mix_sources = Vec::with_capacity(cfg.n_blocks);
    for (l, p) in model.dense.blocks.iter().enumerate() {
        let p_rows = match &p.mix_norm {
            Some(norm) => {
                let (y, src) = mixing_residual(cfg, norm, &x, None, 0..n_user)?;
                mix_sources.push(src);
                y
            }
            None => {
                mix_sources.push(Matrix::zeros(n_user, cfg.head_dim));
                x.clone()
            }
        };
        x = block_rows(model, l, p_rows, 0, &sequence.layers[l])?;
        user_rows.push(x.clone());
    }
    Ok(SharedUserState {
        n_user,
        e_user,
        user_rows,
        mix_sources,
        sequence,
    })
}

/// Logits of candidate `k` given the shared state; computes only item rows.
pub fn candidate_logits(model: &MixFormer, req: &Request, k: usize, state: &SharedUserState) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let n_user = state.n_user;
    let mut x = if n_user == 0 {
        // No user heads: the joint layout, every row per candidate.
        model.layout.split(&embed_nonseq(req, k, &model.tables)?, &model.dense.head_proj)?
    } else {
        let e_item = embed_item_side(req, k, &model.tables)?;
        let user_len = state.e_user.len();
        let mut x = Matrix::zeros(0, cfg.head_dim);
        for seg in model.layout.segments.iter().filter(|s| s.first_head >= n_user) {
            if seg.offset < user_len {
                return shape_err("item heads read request-level features; the layout is not decoupled");
            }
            let start = seg.offset - user_len;
            x = Matrix::vstack(&x, &model.layout.project_segment(seg, &e_item[start..start + seg.len], &model.dense.head_proj)?)?;
        }
        x
    };
    for (l, p) in model.dense.blocks.iter().enumerate() {
        let p_rows = match &p.mix_norm {
            Some(norm) => mixing_residual(cfg, norm, &x, Some(&state.mix_sources[l]), n_user..cfg.n_heads)?.0,
            None => x,
        };
        x = block_rows(model, l, p_rows, n_user, &state.sequence.layers[l])?;
    }
    let last = state.user_rows.last().expect("at least the input rows");
    let flat = Matrix::row_vector(Matrix::vstack(last, &x)?.data());
    let logits = model
        .dense
        .tasks
        .iter()
        .map(|t| Ok(task_forward(t, &flat)?.0))
        .collect::<Result<Vec<f64>>>()?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    Ok(logits)
}

/// Request-level batching: shared user state once, then item rows per
/// candidate. Row `k` equals `forward_decoupled(req, k)`.
pub fn rlb_forward(model: &MixFormer, req: &Request) -> Result<Vec<Vec<f64>>> {
    let state = shared_user_state(model, req)?;
    (0..req.n_candidates())
        .map(|k| candidate_logits(model, req, k, &state))
        .collect()
}
