mod common;

use common::{assign, flatten, model, request, rng, schema};
use mixformer::blocks::{Ablations, Gradients, MixFormer, ModelConfig, Tensors};
use mixformer::decouple::rlb_forward;
use mixformer::flopsmeter::{count_flops, MeterSpec, SequenceAccounting};
use mixformer::mathcore::{grad_check_scalar, trace};
use mixformer::Error;
use rand::Rng;

fn sparse_flat(m: &MixFormer, g: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for (table, rows) in m.tables.tables.iter().zip(&g.sparse) {
        let mut dense = vec![0.0; table.weights.len()];
        for (&id, row) in rows {
            let start = id as usize * table.dim;
            dense[start..start + table.dim].copy_from_slice(row);
        }
        out.extend(dense);
    }
    out
}

fn full_grad_check(cfg: ModelConfig, seed: u64) -> f64 {
    let m = model(cfg.clone(), seed);
    let req = request(&mut rng(seed + 100), 2, 3, cfg.n_tasks);
    let mut g = Gradients::zeros(&m);
    m.accumulate_gradients(&req, &mut g).unwrap();
    let mut analytic: Vec<f64> = g.dense.tensors().concat();
    analytic.extend(sparse_flat(&m, &g));
    let point = flatten(&m);
    let mut probe = m.clone();
    let report = grad_check_scalar(
        &mut |x| {
            assign(&mut probe, x);
            probe.request_loss(&req)
        },
        &point,
        &analytic,
        None,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.checked, point.len());
    report.max_rel_error
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..10 {
        let err = full_grad_check(ModelConfig::new(2, 2, 4, 3), seed);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn variant_gradients_match_finite_differences() {
    let mut cfgs: Vec<ModelConfig> = Ablations::NAMES
        .iter()
        .map(|a| ModelConfig::new(2, 2, 4, 3).with_ablation(a).unwrap())
        .collect();
    cfgs.push(ModelConfig::new(2, 2, 4, 3).with_decoupling(1));
    for (i, cfg) in cfgs.into_iter().enumerate() {
        let err = full_grad_check(cfg.clone(), 40 + i as u64);
        assert!(err < 1e-4, "{:?}: {err:e}", cfg.ablations);
    }
}

#[test]
fn zero_parameters_give_zero_logits() {
    let cfg = ModelConfig::new(4, 2, 8, 6);
    let m = MixFormer::zeroed(cfg.clone(), schema(6)).unwrap();
    let req = request(&mut rng(1), 3, 5, 2);
    for z in m.forward_request(&req).unwrap() {
        assert_eq!(z, vec![0.0, 0.0]);
    }
}

#[test]
fn identical_candidates_score_identically() {
    let m = model(ModelConfig::new(4, 2, 8, 6), 2);
    let mut req = request(&mut rng(2), 4, 6, 2);
    req.candidates[3] = req.candidates[1].clone();
    let z = m.forward_request(&req).unwrap();
    assert_eq!(z[1], z[3]);
}

#[test]
fn logits_ignore_sequence_order() {
    let m = model(ModelConfig::new(4, 2, 8, 6), 3);
    let req = request(&mut rng(3), 3, 6, 2);
    let mut shuffled = req.clone();
    shuffled.sequence.reverse();
    shuffled.sequence.swap(0, 3);
    let (a, b) = (m.forward_request(&req).unwrap(), m.forward_request(&shuffled).unwrap());
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn zero_sublayers_leave_heads_on_the_residual_path() {
    let mut m = model(ModelConfig::new(4, 2, 8, 6), 4);
    for b in &mut m.dense.blocks {
        for ffn in b.qm_ffn.iter_mut().chain(b.of_ffn.iter_mut()) {
            ffn.down.data_mut().fill(0.0);
        }
        for w in b.key_proj.iter_mut().chain(b.value_proj.iter_mut()) {
            w.data_mut().fill(0.0);
        }
        b.mix_norm.as_mut().unwrap().scale.fill(0.0);
    }
    let req = request(&mut rng(4), 2, 6, 2);
    let acts = m.head_activations(&req, 1).unwrap();
    for x in &acts[1..] {
        assert_eq!(x, &acts[0]);
    }
}

#[test]
fn forward_request_matches_standalone_passes() {
    let m = model(ModelConfig::new(4, 2, 8, 6), 5);
    let req = request(&mut rng(5), 5, 4, 2);
    let all = m.forward_request(&req).unwrap();
    for (k, z) in all.iter().enumerate() {
        assert_eq!(z, &m.forward(&req, k).unwrap());
    }
}

#[test]
fn overlong_sequence_is_a_data_error() {
    let m = model(ModelConfig::new(4, 1, 8, 4), 6);
    let req = request(&mut rng(6), 1, 5, 2);
    assert!(matches!(m.forward(&req, 0), Err(Error::Data(_))));
}

#[test]
fn checkpoint_preserves_predictions() {
    let m = model(ModelConfig::new(4, 2, 8, 6).with_decoupling(2), 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m.save(&path).unwrap();
    let back = MixFormer::load(&path).unwrap();
    let req = request(&mut rng(7), 3, 6, 2);
    assert_eq!(back.forward_request(&req).unwrap(), m.forward_request(&req).unwrap());
}

fn random_config(r: &mut impl Rng) -> ModelConfig {
    let n = [1, 2, 4][r.gen_range(0..3)];
    let d = n * r.gen_range(1..4);
    let mut cfg = ModelConfig::new(n, r.gen_range(1..4), d, 8);
    cfg.expansion_ratio = r.gen_range(1..4);
    cfg.n_tasks = r.gen_range(1..4);
    for name in Ablations::NAMES {
        if r.gen_bool(0.3) {
            cfg.ablations.set(name, true).unwrap();
        }
    }
    if n > 1 && !cfg.ablations.hm_to_sa && r.gen_bool(0.5) {
        cfg = cfg.with_decoupling(r.gen_range(1..n));
    }
    cfg
}

#[test]
fn meter_equals_execution_trace() {
    let mut r = rng(99);
    for case in 0..30 {
        let cfg = random_config(&mut r);
        let m = model(cfg.clone(), case);
        let t = r.gen_range(0..=8);
        let k = r.gen_range(1..6);
        let req = request(&mut r, k, t, cfg.n_tasks);
        let spec = |k, rlb, sequence| MeterSpec { dims: m.schema.input_dims(), seq_len: t, k, batch: k, rlb, sequence };

        let (_, traced) = trace::measure(|| m.forward(&req, 0).unwrap());
        let meter = count_flops(&cfg, &spec(1, false, SequenceAccounting::PerCandidate)).unwrap();
        assert_eq!(traced, meter.per_pass(), "case {case}: {cfg:?}");
        assert_eq!(traced, meter.per_request());

        let (_, traced) = trace::measure(|| m.forward_request(&req).unwrap());
        let meter = count_flops(&cfg, &spec(k, false, SequenceAccounting::PerRequest)).unwrap();
        assert_eq!(traced, meter.per_request(), "case {case}: {cfg:?}");

        if cfg.decoupling.enabled {
            let (_, traced) = trace::measure(|| rlb_forward(&m, &req).unwrap());
            let meter = count_flops(&cfg, &spec(k, true, SequenceAccounting::PerCandidate)).unwrap();
            assert_eq!(traced, meter.per_request(), "case {case}: {cfg:?}");
        }
    }
}
