//! Forward passes with caches and the matching reverse passes of the block
//! sublayers. Row-local sublayers take the index of their first head so
//! that they can run on a subset of head rows.

use std::ops::Range;

use super::config::ModelConfig;
use super::params::{BlockParams, SelfAttnParams, SeqFfnParams, TaskHeadParams};
use crate::error::{shape_err, Result};
use crate::mathcore::softmax::softmax_unchecked;
use crate::mathcore::{
    ffn_backward, ffn_forward, gemm, norm_rows_backward, norm_rows_forward, softmax_backward, swish,
    FfnCache, FfnParams, Matrix, NormCache, NormKind, NormParams,
};
use crate::mathcore::ffn::swish_grad;

/// Cache of a normalized residual sublayer.
#[derive(Clone, Debug)]
pub(crate) struct Residual<C> {
    norm: NormCache,
    inner: C,
}

/// Pre-norm: `f(Norm(x)) + x`. Post-norm: `Norm(f(x) + x)`.
pub(crate) fn residual_forward<C>(
    kind: NormKind,
    post: bool,
    norm: &NormParams,
    x: &Matrix,
    f: impl FnOnce(&Matrix) -> Result<(Matrix, C)>,
) -> Result<(Matrix, Residual<C>)> {
    if post {
        let (mut s, inner) = f(x)?;
        s.add_assign(x)?;
        let (y, norm) = norm_rows_forward(kind, &s, norm)?;
        Ok((y, Residual { norm, inner }))
    } else {
        let (nx, norm) = norm_rows_forward(kind, x, norm)?;
        let (mut y, inner) = f(&nx)?;
        y.add_assign(x)?;
        Ok((y, Residual { norm, inner }))
    }
}

pub(crate) fn residual_backward<C>(
    kind: NormKind,
    post: bool,
    norm: &NormParams,
    cache: &Residual<C>,
    dy: &Matrix,
    dnorm: &mut NormParams,
    fb: impl FnOnce(&C, &Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    if post {
        let ds = norm_rows_backward(kind, norm, &cache.norm, dy, &mut dnorm.scale);
        let mut dx = fb(&cache.inner, &ds)?;
        dx.add_assign(&ds)?;
        Ok(dx)
    } else {
        let dn = fb(&cache.inner, dy)?;
        let mut dx = norm_rows_backward(kind, norm, &cache.norm, &dn, &mut dnorm.scale);
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

fn ffn_for(ffns: &[FfnParams], head: usize) -> usize {
    if ffns.len() == 1 {
        0
    } else {
        head
    }
}

/// Row `r` goes through the FFN of head `first_head + r`.
pub(crate) fn per_head_ffn_forward(x: &Matrix, ffns: &[FfnParams], first_head: usize) -> Result<(Matrix, Vec<FfnCache>)> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut caches = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let idx = ffn_for(ffns, first_head + r);
        let Some(p) = ffns.get(idx) else {
            return shape_err(format!("no FFN for head {}", first_head + r));
        };
        let (y, c) = ffn_forward(&Matrix::row_vector(x.row(r)), p)?;
        if y.cols() != x.cols() {
            return shape_err("per-head FFN must preserve the head width");
        }
        out.row_mut(r).copy_from_slice(y.data());
        caches.push(c);
    }
    Ok((out, caches))
}

pub(crate) fn per_head_ffn_backward(
    ffns: &[FfnParams],
    caches: &[FfnCache],
    dy: &Matrix,
    grads: &mut [FfnParams],
    first_head: usize,
) -> Result<Matrix> {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let idx = ffn_for(ffns, first_head + r);
        let d = ffn_backward(&ffns[idx], &caches[r], &Matrix::row_vector(dy.row(r)), &mut grads[idx])?;
        dx.row_mut(r).copy_from_slice(d.data());
    }
    Ok(dx)
}

/// Rows `rows` of the head-mixed `src` over `n` heads. With `n_user > 0`
/// the user rows keep only the chunks that come from user rows, so for
/// user rows `src` may hold just the first `n_user` rows.
pub(crate) fn mix_rows(src: &Matrix, n: usize, rows: Range<usize>, n_user: usize) -> Matrix {
    let d = src.cols();
    let c = d / n;
    let mut out = Matrix::zeros(rows.len(), d);
    for (o, i) in rows.enumerate() {
        let dst = out.row_mut(o);
        for j in 0..n {
            if i < n_user && j >= n_user {
                continue;
            }
            dst[j * c..(j + 1) * c].copy_from_slice(&src.row(j)[i * c..(i + 1) * c]);
        }
    }
    out
}

pub(crate) fn mix_rows_backward(dout: &Matrix, rows: Range<usize>, n_user: usize, dsrc: &mut Matrix) {
    let (n, d) = dsrc.shape();
    let c = d / n;
    for (o, i) in rows.enumerate() {
        let g = dout.row(o);
        for j in 0..n {
            if i < n_user && j >= n_user {
                continue;
            }
            let dst = &mut dsrc.row_mut(j)[i * c..(i + 1) * c];
            for (a, b) in dst.iter_mut().zip(&g[j * c..(j + 1) * c]) {
                *a += b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SaCache {
    y: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
}

fn attn_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

fn softmax_rows(s: &Matrix) -> Matrix {
    let mut a = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        a.row_mut(r).copy_from_slice(&softmax_unchecked(s.row(r)));
    }
    a
}

/// Single-head scaled dot-product self-attention over the rows of `y`.
pub(crate) fn self_attention_forward(y: &Matrix, p: &SelfAttnParams) -> Result<(Matrix, SaCache)> {
    let q = y.matmul_nt(&p.query)?;
    let k = y.matmul_nt(&p.key)?;
    let v = y.matmul_nt(&p.value)?;
    let mut s = q.matmul_nt(&k)?;
    s.scale(attn_scale(y.cols()));
    s.ensure_finite("self-attention scores")?;
    let a = softmax_rows(&s);
    let out = a.matmul(&v)?;
    Ok((out, SaCache { y: y.clone(), q, k, v, a }))
}

pub(crate) fn self_attention_backward(p: &SelfAttnParams, c: &SaCache, dout: &Matrix, g: &mut SelfAttnParams) -> Result<Matrix> {
    let da = dout.matmul_nt(&c.v)?;
    let dv = c.a.matmul_tn(dout)?;
    let mut ds = Matrix::zeros(da.rows(), da.cols());
    for r in 0..da.rows() {
        ds.row_mut(r).copy_from_slice(&softmax_backward(c.a.row(r), da.row(r)));
    }
    ds.scale(attn_scale(c.y.cols()));
    let dq = ds.matmul(&c.k)?;
    let dk = ds.matmul_tn(&c.q)?;
    gemm(&dq, true, &c.y, false, &mut g.query, true)?;
    gemm(&dk, true, &c.y, false, &mut g.key, true)?;
    gemm(&dv, true, &c.y, false, &mut g.value, true)?;
    let mut dy = dq.matmul(&p.query)?;
    gemm(&dk, false, &p.key, false, &mut dy, true)?;
    gemm(&dv, false, &p.value, false, &mut dy, true)?;
    Ok(dy)
}

#[derive(Clone, Debug)]
pub(crate) enum MixCache {
    HeadMixing,
    SelfAttention(SaCache),
}

/// Keys and values of one layer, one `T × D` matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl LayerKv {
    pub fn seq_len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Vec<Matrix>| m.iter().map(|k| Matrix::zeros(k.rows(), k.cols())).collect();
        Self {
            keys: z(&self.keys),
            values: z(&self.values),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SeqLayerCache {
    h: Matrix,
    res: Residual<FfnCache>,
}

/// `h_t = FFN(Norm(s_t)) + s_t`, then per-head keys and values.
pub(crate) fn seq_layer_forward(cfg: &ModelConfig, seq: &SeqFfnParams, block: &BlockParams, s: &Matrix) -> Result<(LayerKv, SeqLayerCache)> {
    if s.cols() != cfg.width() {
        return shape_err(format!("action rows of width {} vs N·D = {}", s.cols(), cfg.width()));
    }
    let kind = cfg.norm_kind();
    let (h, res) = residual_forward(kind, cfg.ablations.post_ln, &seq.norm, s, |x| ffn_forward(x, &seq.ffn))?;
    let d = cfg.head_dim;
    let mut keys = Vec::with_capacity(cfg.n_heads);
    let mut values = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let hi = h.slice_cols(i * d, (i + 1) * d);
        keys.push(hi.matmul_nt(&block.key_proj[i])?);
        values.push(hi.matmul_nt(&block.value_proj[i])?);
    }
    Ok((LayerKv { keys, values }, SeqLayerCache { h, res }))
}

/// Returns the gradient with respect to the raw action rows.
pub(crate) fn seq_layer_backward(
    cfg: &ModelConfig,
    seq: &SeqFfnParams,
    block: &BlockParams,
    cache: &SeqLayerCache,
    dkv: &LayerKv,
    gseq: &mut SeqFfnParams,
    gblock: &mut BlockParams,
) -> Result<Matrix> {
    let d = cfg.head_dim;
    let t = cache.h.rows();
    let mut dh = Matrix::zeros(t, cfg.width());
    for i in 0..cfg.n_heads {
        let hi = cache.h.slice_cols(i * d, (i + 1) * d);
        gemm(&dkv.keys[i], true, &hi, false, &mut gblock.key_proj[i], true)?;
        gemm(&dkv.values[i], true, &hi, false, &mut gblock.value_proj[i], true)?;
        let mut dhi = dkv.keys[i].matmul(&block.key_proj[i])?;
        gemm(&dkv.values[i], false, &block.value_proj[i], false, &mut dhi, true)?;
        for r in 0..t {
            dh.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(dhi.row(r));
        }
    }
    let kind = cfg.norm_kind();
    let SeqFfnParams { norm: gnorm, ffn: gffn } = gseq;
    residual_backward(kind, cfg.ablations.post_ln, &seq.norm, &cache.res, &dh, gnorm, |c, dy| {
        ffn_backward(&seq.ffn, c, dy, gffn)
    })
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    q: Matrix,
    weights: Vec<Vec<f64>>,
}

/// `z_i = Σ_t softmax_t(q_i·k_t^i / √D) v_t^i + q_i` for the rows of `q`,
/// row `r` being head `first_head + r`.
pub(crate) fn attend_rows(q: &Matrix, kv: &LayerKv, first_head: usize) -> Result<(Matrix, AttnCache)> {
    let mut z = q.clone();
    let mut weights = Vec::with_capacity(q.rows());
    let scale = attn_scale(q.cols());
    for r in 0..q.rows() {
        let head = first_head + r;
        let (Some(k), Some(v)) = (kv.keys.get(head), kv.values.get(head)) else {
            return shape_err(format!("no keys/values for head {head}"));
        };
        if k.rows() == 0 {
            weights.push(Vec::new());
            continue;
        }
        let qr = Matrix::row_vector(q.row(r));
        let mut s = qr.matmul_nt(k)?;
        s.scale(scale);
        s.ensure_finite("attention scores")?;
        let w = softmax_unchecked(s.data());
        let wm = Matrix::row_vector(&w);
        let mut zr = Matrix::row_vector(q.row(r));
        gemm(&wm, false, v, false, &mut zr, true)?;
        z.row_mut(r).copy_from_slice(zr.data());
        weights.push(w);
    }
    Ok((z, AttnCache { q: q.clone(), weights }))
}

pub(crate) fn attend_rows_backward(
    cache: &AttnCache,
    kv: &LayerKv,
    first_head: usize,
    dz: &Matrix,
    dkv: &mut LayerKv,
) -> Result<Matrix> {
    let mut dq = dz.clone();
    let scale = attn_scale(dz.cols());
    for r in 0..dz.rows() {
        let head = first_head + r;
        let w = &cache.weights[r];
        if w.is_empty() {
            continue;
        }
        let dzr = Matrix::row_vector(dz.row(r));
        let wm = Matrix::row_vector(w);
        gemm(&wm, true, &dzr, false, &mut dkv.values[head], true)?;
        let dw = dzr.matmul_nt(&kv.values[head])?;
        let mut ds = Matrix::row_vector(&softmax_backward(w, dw.data()));
        ds.scale(scale);
        let mut dqr = Matrix::row_vector(dq.row(r));
        gemm(&ds, false, &kv.keys[head], false, &mut dqr, true)?;
        dq.row_mut(r).copy_from_slice(dqr.data());
        let qr = Matrix::row_vector(cache.q.row(r));
        gemm(&ds, true, &qr, false, &mut dkv.keys[head], true)?;
    }
    Ok(dq)
}

/// Cache of one block evaluated on all `N` rows.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    mix: Option<Residual<MixCache>>,
    qm_ffn: Option<Residual<Vec<FfnCache>>>,
    attn: AttnCache,
    of: Residual<Vec<FfnCache>>,
}

pub(crate) fn query_mixer_forward(
    cfg: &ModelConfig,
    p: &BlockParams,
    x: &Matrix,
) -> Result<(Matrix, Option<Residual<MixCache>>, Option<Residual<Vec<FfnCache>>>)> {
    let kind = cfg.norm_kind();
    let post = cfg.ablations.post_ln;
    let n_user = cfg.user_heads();
    let (p_mat, mix) = match &p.mix_norm {
        Some(norm) => {
            let (y, c) = residual_forward(kind, post, norm, x, |y| match &p.self_attn {
                Some(sa) => {
                    let (o, c) = self_attention_forward(y, sa)?;
                    Ok((o, MixCache::SelfAttention(c)))
                }
                None => Ok((mix_rows(y, y.rows(), 0..y.rows(), n_user), MixCache::HeadMixing)),
            })?;
            (y, Some(c))
        }
        None => (x.clone(), None),
    };
    let (q, qm) = match &p.qm_norm {
        Some(norm) => {
            let (y, c) = residual_forward(kind, post, norm, &p_mat, |v| per_head_ffn_forward(v, &p.qm_ffn, 0))?;
            (y, Some(c))
        }
        None => (p_mat, None),
    };
    Ok((q, mix, qm))
}

pub(crate) fn output_fusion_forward(cfg: &ModelConfig, p: &BlockParams, z: &Matrix, first_head: usize) -> Result<(Matrix, Residual<Vec<FfnCache>>)> {
    residual_forward(cfg.norm_kind(), cfg.ablations.post_ln, &p.of_norm, z, |v| {
        per_head_ffn_forward(v, &p.of_ffn, first_head)
    })
}

pub(crate) fn block_forward(cfg: &ModelConfig, p: &BlockParams, x: &Matrix, kv: &LayerKv) -> Result<(Matrix, BlockCache)> {
    let (q, mix, qm_ffn) = query_mixer_forward(cfg, p, x)?;
    let (z, attn) = attend_rows(&q, kv, 0)?;
    let (o, of) = output_fusion_forward(cfg, p, &z, 0)?;
    Ok((o, BlockCache { mix, qm_ffn, attn, of }))
}

/// Accumulates parameter gradients into `g` and key/value gradients into
/// `dkv`; returns the input gradient.
pub(crate) fn block_backward(
    cfg: &ModelConfig,
    p: &BlockParams,
    cache: &BlockCache,
    kv: &LayerKv,
    dy: &Matrix,
    g: &mut BlockParams,
    dkv: &mut LayerKv,
) -> Result<Matrix> {
    let kind = cfg.norm_kind();
    let post = cfg.ablations.post_ln;
    let n_user = cfg.user_heads();
    let BlockParams {
        mix_norm: g_mix_norm,
        self_attn: g_sa,
        qm_norm: g_qm_norm,
        qm_ffn: g_qm_ffn,
        of_norm: g_of_norm,
        of_ffn: g_of_ffn,
        ..
    } = g;
    let dz = residual_backward(kind, post, &p.of_norm, &cache.of, dy, g_of_norm, |c, d| {
        per_head_ffn_backward(&p.of_ffn, c, d, g_of_ffn, 0)
    })?;
    let dq = attend_rows_backward(&cache.attn, kv, 0, &dz, dkv)?;
    let dp = match (&cache.qm_ffn, &p.qm_norm, g_qm_norm) {
        (Some(c), Some(norm), Some(gn)) => residual_backward(kind, post, norm, c, &dq, gn, |c, d| {
            per_head_ffn_backward(&p.qm_ffn, c, d, g_qm_ffn, 0)
        })?,
        _ => dq,
    };
    let dx = match (&cache.mix, &p.mix_norm, g_mix_norm) {
        (Some(c), Some(norm), Some(gn)) => residual_backward(kind, post, norm, c, &dp, gn, |c, d| match c {
            MixCache::HeadMixing => {
                let mut dsrc = Matrix::zeros(d.rows(), d.cols());
                mix_rows_backward(d, 0..d.rows(), n_user, &mut dsrc);
                Ok(dsrc)
            }
            MixCache::SelfAttention(sc) => {
                let (Some(sa), Some(gsa)) = (&p.self_attn, g_sa.as_mut()) else {
                    return shape_err("self-attention cache without parameters");
                };
                self_attention_backward(sa, sc, d, gsa)
            }
        })?,
        _ => dp,
    };
    Ok(dx)
}

#[derive(Clone, Debug)]
pub(crate) struct TaskCache {
    f: Matrix,
    pre: Matrix,
    act: Matrix,
}

pub(crate) fn task_forward(p: &TaskHeadParams, f: &Matrix) -> Result<(f64, TaskCache)> {
    let mut pre = f.matmul_nt(&p.hidden)?;
    for (v, b) in pre.data_mut().iter_mut().zip(&p.hidden_bias) {
        *v += b;
    }
    let mut act = pre.clone();
    for v in act.data_mut() {
        *v = swish(*v);
    }
    let logit = act.matmul_nt(&p.out)?.data()[0] + p.out_bias[0];
    Ok((
        logit,
        TaskCache {
            f: f.clone(),
            pre,
            act,
        },
    ))
}

pub(crate) fn task_backward(p: &TaskHeadParams, c: &TaskCache, dlogit: f64, g: &mut TaskHeadParams) -> Result<Matrix> {
    let dl = Matrix::row_vector(&[dlogit]);
    g.out_bias[0] += dlogit;
    gemm(&dl, true, &c.act, false, &mut g.out, true)?;
    let mut dpre = dl.matmul(&p.out)?;
    for (d, z) in dpre.data_mut().iter_mut().zip(c.pre.data()) {
        *d *= swish_grad(*z);
    }
    for (b, d) in g.hidden_bias.iter_mut().zip(dpre.data()) {
        *b += d;
    }
    gemm(&dpre, true, &c.f, false, &mut g.hidden, true)?;
    dpre.matmul(&p.hidden)
}
