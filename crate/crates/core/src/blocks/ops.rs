use super::config::ModelConfig;
use super::layers::{
    attend_rows, block_backward, block_forward, mix_rows, output_fusion_forward, query_mixer_forward, seq_layer_forward,
    LayerKv,
};
use super::params::{BlockParams, SeqFfnParams};
use crate::error::{shape_err, Result};
use crate::mathcore::{DifferentiableOp, Matrix};

fn check_heads(x: &Matrix) -> Result<()> {
    let (n, d) = x.shape();
    if n == 0 || d % n != 0 {
        return shape_err(format!("{n}x{d} head matrix: head dim must be a multiple of the head count"));
    }
    Ok(())
}

/// Output row `i`, chunk `j` is input row `j`, chunk `i` (chunk width
/// `D/N`). Parameter-free.
pub fn head_mixing(x: &Matrix) -> Result<Matrix> {
    check_heads(x)?;
    Ok(mix_rows(x, x.rows(), 0..x.rows(), 0))
}

fn check_block(x: &Matrix, cfg: &ModelConfig) -> Result<()> {
    if x.shape() != (cfg.n_heads, cfg.head_dim) {
        return shape_err(format!(
            "head matrix {:?}, config expects {:?}",
            x.shape(),
            (cfg.n_heads, cfg.head_dim)
        ));
    }
    Ok(())
}

/// Mixing sublayer then per-head FFN sublayer, each with its residual.
pub fn query_mixer(x: &Matrix, p: &BlockParams, cfg: &ModelConfig) -> Result<Matrix> {
    check_block(x, cfg)?;
    Ok(query_mixer_forward(cfg, p, x)?.0)
}

/// Per-head keys and values of one block from the raw action rows `S`.
pub fn project_actions(s: &Matrix, seq: &SeqFfnParams, p: &BlockParams, cfg: &ModelConfig) -> Result<LayerKv> {
    Ok(seq_layer_forward(cfg, seq, p, s)?.0)
}

/// Per-head attention over the sequence plus the query residual. An empty
/// sequence returns `Q`.
pub fn cross_attention(q: &Matrix, kv: &LayerKv) -> Result<Matrix> {
    if kv.keys.len() != q.rows() || kv.values.len() != q.rows() {
        return shape_err(format!("{} heads but {} key sets", q.rows(), kv.keys.len()));
    }
    for (k, v) in kv.keys.iter().zip(&kv.values) {
        if k.cols() != q.cols() || v.cols() != q.cols() || k.rows() != v.rows() {
            return shape_err("keys and values must be T x D per head");
        }
    }
    Ok(attend_rows(q, kv, 0)?.0)
}

pub fn output_fusion(z: &Matrix, p: &BlockParams, cfg: &ModelConfig) -> Result<Matrix> {
    check_block(z, cfg)?;
    Ok(output_fusion_forward(cfg, p, z, 0)?.0)
}

pub fn mixformer_block(x: &Matrix, s_raw: &Matrix, seq: &SeqFfnParams, p: &BlockParams, cfg: &ModelConfig) -> Result<Matrix> {
    check_block(x, cfg)?;
    let kv = project_actions(s_raw, seq, p, cfg)?;
    Ok(block_forward(cfg, p, x, &kv)?.0)
}

/// One block as a function of its head input, with the action rows and
/// weights held fixed.
pub struct BlockOp<'a> {
    pub cfg: &'a ModelConfig,
    pub seq: &'a SeqFfnParams,
    pub block: &'a BlockParams,
    pub actions: &'a Matrix,
}

impl DifferentiableOp for BlockOp<'_> {
    fn name(&self) -> String {
        format!("mixformer block N={} D={}", self.cfg.n_heads, self.cfg.head_dim)
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        mixformer_block(x, self.actions, self.seq, self.block, self.cfg)
    }

    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        check_block(x, self.cfg)?;
        let kv = project_actions(self.actions, self.seq, self.block, self.cfg)?;
        let (_, cache) = block_forward(self.cfg, self.block, x, &kv)?;
        let mut g = self.block.clone();
        let mut dkv = kv.zeros_like();
        block_backward(self.cfg, self.block, &cache, &kv, dy, &mut g, &mut dkv)
    }

    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        input
    }

    fn flops(&self, _input: (usize, usize)) -> u64 {
        let c = crate::flopsmeter::block_costs(self.cfg, self.actions.rows());
        c.seq_ffn + c.kv_proj + c.query_mixer + c.attention + c.output_fusion
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::init::uniform_matrix;
    use crate::mathcore::{grad_check, rms_norm, seeded_rng, trace, FfnParams, NormParams};
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn head_mixing_hand_case() {
        let x = m(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        assert_eq!(head_mixing(&x).unwrap(), m(&[&[1.0, 2.0, 5.0, 6.0], &[3.0, 4.0, 7.0, 8.0]]));
        // Identical rows are not fixed: row i becomes chunk i repeated.
        let same = m(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(head_mixing(&same).unwrap(), m(&[&[1.0, 2.0, 1.0, 2.0], &[3.0, 4.0, 3.0, 4.0]]));
        // Fixed points are the block-symmetric matrices.
        let sym = m(&[&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 7.0, 8.0]]);
        assert_eq!(head_mixing(&sym).unwrap(), sym);
        let constant_chunks = m(&[&[1.0, 2.0, 1.0, 2.0], &[1.0, 2.0, 1.0, 2.0]]);
        assert_eq!(head_mixing(&constant_chunks).unwrap(), constant_chunks);
        assert!(head_mixing(&Matrix::zeros(2, 3)).is_err());
        let (_, flops) = trace::measure(|| head_mixing(&x).unwrap());
        assert_eq!(flops, 0);
    }

    proptest! {
        #[test]
        fn head_mixing_is_an_involution_and_permutation(seed in 0u64..500, n in 1usize..5, c in 1usize..4) {
            let x = uniform_matrix(&mut seeded_rng(seed), n, n * c, 3.0);
            let y = head_mixing(&x).unwrap();
            prop_assert_eq!(head_mixing(&y).unwrap(), x.clone());
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let sq = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>();
            prop_assert_eq!(sq(&a).to_bits(), sq(&b).to_bits());
            prop_assert_eq!(a, b);
            prop_assert!((y.frobenius_norm() - x.frobenius_norm()).abs() <= 1e-12 * x.frobenius_norm().max(1.0));
        }
    }

    fn zero_block(cfg: &ModelConfig) -> (SeqFfnParams, BlockParams) {
        let mut rng = seeded_rng(0);
        let mut seq = SeqFfnParams::init(cfg, &mut rng);
        let mut b = BlockParams::init(cfg, &mut rng);
        seq.ffn = seq.ffn.zeros_like();
        for f in b.qm_ffn.iter_mut().chain(b.of_ffn.iter_mut()) {
            *f = f.zeros_like();
        }
        for w in b.key_proj.iter_mut().chain(b.value_proj.iter_mut()) {
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        (seq, b)
    }

    #[test]
    fn query_mixer_cases() {
        let cfg = ModelConfig::new(2, 1, 4, 3);
        let (_, p) = zero_block(&cfg);
        assert_eq!(query_mixer(&Matrix::zeros(2, 4), &p, &cfg).unwrap(), Matrix::zeros(2, 4));

        // Unit RMSNorm then head mixing then residual; zero FFN leaves it.
        let x = m(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let unit = NormParams::with_eps(4, cfg.norm_eps);
        let r0 = rms_norm(x.row(0), &unit).unwrap();
        let r1 = rms_norm(x.row(1), &unit).unwrap();
        let expected = m(&[
            &[r0[0] + 1.0, r0[1] + 2.0, r1[0] + 3.0, r1[1] + 4.0],
            &[r0[2] + 5.0, r0[3] + 6.0, r1[2] + 7.0, r1[3] + 8.0],
        ]);
        let out = query_mixer(&x, &p, &cfg).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12, "{out:?}");

        let id_cfg = cfg.clone().with_ablation("wo_hm").unwrap().with_ablation("wo_qm_ffn").unwrap();
        let q = BlockParams::init(&id_cfg, &mut seeded_rng(1));
        let y = uniform_matrix(&mut seeded_rng(2), 2, 4, 1.0);
        assert_eq!(query_mixer(&y, &q, &id_cfg).unwrap(), y);
    }

    #[test]
    fn project_actions_cases() {
        let cfg = ModelConfig::new(2, 1, 2, 3);
        let (mut seq, mut p) = zero_block(&cfg);
        let kv = project_actions(&Matrix::zeros(3, 4), &seq, &p, &cfg).unwrap();
        assert!(kv.keys.iter().chain(&kv.values).all(|k| k == &Matrix::zeros(3, 2)));

        p.key_proj = vec![Matrix::identity(2); 2];
        p.value_proj = vec![Matrix::identity(2); 2];
        seq.ffn = FfnParams::zeros(4, 8, 4);
        let s = m(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let kv = project_actions(&s, &seq, &p, &cfg).unwrap();
        assert_eq!(kv.keys[1], m(&[&[3.0, 4.0], &[7.0, 8.0]]));
        assert_eq!(kv.values[0], m(&[&[1.0, 2.0], &[5.0, 6.0]]));
    }

    #[test]
    fn cross_attention_cases() {
        let q = m(&[&[1.0]]);
        let kv = LayerKv {
            keys: vec![m(&[&[2f64.ln()], &[0.0]])],
            values: vec![m(&[&[3.0], &[0.0]])],
        };
        let z = cross_attention(&q, &kv).unwrap();
        assert!((z.get(0, 0) - 3.0).abs() < 1e-12);

        let empty = LayerKv { keys: vec![Matrix::zeros(0, 1)], values: vec![Matrix::zeros(0, 1)] };
        assert_eq!(cross_attention(&q, &empty).unwrap(), q);

        let uniform = LayerKv {
            keys: vec![m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]])],
            values: vec![m(&[&[1.0, 0.0], &[2.0, 3.0], &[3.0, 0.0]])],
        };
        let z = cross_attention(&m(&[&[1.0, -1.0]]), &uniform).unwrap();
        assert!(z.max_abs_diff(&m(&[&[3.0, 0.0]])) < 1e-12);
    }

    #[test]
    fn output_fusion_cases() {
        let cfg = ModelConfig::new(2, 1, 4, 3);
        let (_, p) = zero_block(&cfg);
        let z = uniform_matrix(&mut seeded_rng(3), 2, 4, 1.0);
        assert_eq!(output_fusion(&z, &p, &cfg).unwrap(), z);
        let q = BlockParams::init(&cfg, &mut seeded_rng(4));
        assert_eq!(output_fusion(&Matrix::zeros(2, 4), &q, &cfg).unwrap(), Matrix::zeros(2, 4));

        let shared = cfg.clone().with_ablation("shared_of_ffn").unwrap();
        let s = BlockParams::init(&shared, &mut seeded_rng(5));
        let row = uniform_matrix(&mut seeded_rng(6), 1, 4, 1.0);
        let same = Matrix::vstack(&row, &row).unwrap();
        let out = output_fusion(&same, &s, &shared).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn zero_block_is_identity_and_empty_sequence_skips_attention() {
        let cfg = ModelConfig::new(2, 1, 4, 3);
        let (seq, mut p) = zero_block(&cfg);
        for n in [&mut p.mix_norm, &mut p.qm_norm] {
            n.as_mut().unwrap().scale.fill(0.0);
        }
        p.of_norm.scale.fill(0.0);
        let x = uniform_matrix(&mut seeded_rng(7), 2, 4, 1.0);
        let s = uniform_matrix(&mut seeded_rng(8), 3, 8, 1.0);
        assert_eq!(mixformer_block(&x, &s, &seq, &p, &cfg).unwrap(), x);

        let full = BlockParams::init(&cfg, &mut seeded_rng(9));
        let seq = SeqFfnParams::init(&cfg, &mut seeded_rng(10));
        let out = mixformer_block(&x, &Matrix::zeros(0, 8), &seq, &full, &cfg).unwrap();
        let expected = output_fusion(&query_mixer(&x, &full, &cfg).unwrap(), &full, &cfg).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn block_gradient_checks() {
        let base = ModelConfig::new(2, 1, 4, 3);
        let mut variants = vec![base.clone(), base.clone().with_decoupling(1)];
        for name in crate::blocks::Ablations::NAMES {
            variants.push(base.clone().with_ablation(name).unwrap());
        }
        for (i, cfg) in variants.iter().enumerate() {
            for seed in 0..3u64 {
                let mut rng = seeded_rng(100 * i as u64 + seed);
                let seq = SeqFfnParams::init(cfg, &mut rng);
                let block = BlockParams::init(cfg, &mut rng);
                let actions = uniform_matrix(&mut rng, 3, 8, 1.0);
                let x = uniform_matrix(&mut rng, 2, 4, 1.0);
                let op = BlockOp { cfg, seq: &seq, block: &block, actions: &actions };
                let r = grad_check(&op, &x, 1e-4).unwrap();
                assert!(r.passed(), "{:?} seed {seed}: {r:?}", cfg.ablations);
            }
        }
    }

    #[test]
    fn block_op_flops_match_trace() {
        let cfg = ModelConfig::new(2, 1, 4, 3);
        let mut rng = seeded_rng(11);
        let seq = SeqFfnParams::init(&cfg, &mut rng);
        let block = BlockParams::init(&cfg, &mut rng);
        let actions = uniform_matrix(&mut rng, 3, 8, 1.0);
        let x = uniform_matrix(&mut rng, 2, 4, 1.0);
        let op = BlockOp { cfg: &cfg, seq: &seq, block: &block, actions: &actions };
        let (_, traced) = trace::measure(|| op.forward(&x).unwrap());
        assert_eq!(traced, op.flops((2, 4)));
    }
}
