#![allow(dead_code)]

use mixformer::blocks::{MixFormer, ModelConfig, Tensors};
use mixformer::features::{ActionField, FeatureSchema, FieldSpec, Request, Side};
use rand::Rng;
use mixformer::mathcore::{seeded_rng, ModelRng};

pub fn rng(seed: u64) -> ModelRng {
    seeded_rng(seed)
}

/// user 3 + context 2 request-level dims, item 3 + 2 item dims, two action fields.
pub fn schema(max_seq_len: usize) -> FeatureSchema {
    let f = |name: &str, vocab_size, dim, side| FieldSpec { name: name.into(), vocab_size, dim, side };
    FeatureSchema::new(
        vec![
            f("user", 11, 3, Side::User),
            f("hour", 4, 2, Side::Context),
            f("item", 13, 3, Side::Item),
            f("author", 5, 2, Side::Item),
        ],
        vec![
            ActionField { name: "act_item".into(), vocab_size: 13, dim: 2 },
            ActionField { name: "act_kind".into(), vocab_size: 3, dim: 2 },
        ],
        max_seq_len,
    )
    .unwrap()
}

pub fn request(rng: &mut impl Rng, k: usize, t: usize, n_tasks: usize) -> Request {
    Request {
        user_id: rng.gen_range(0..11),
        user_nonseq: vec![rng.gen_range(0..11), rng.gen_range(0..4)],
        sequence: (0..t).map(|_| vec![rng.gen_range(0..13), rng.gen_range(0..3)]).collect(),
        candidates: (0..k).map(|_| vec![rng.gen_range(0..13), rng.gen_range(0..5)]).collect(),
        labels: Some((0..k).map(|_| (0..n_tasks).map(|_| rng.gen_bool(0.5)).collect()).collect()),
    }
}

/// Random model with all norm scales and biases perturbed away from their
/// initial values so every parameter carries gradient, and embeddings of
/// order one (at init scale the head rows are tiny and the norms' curvature
/// swamps a finite-difference check).
pub fn model(cfg: ModelConfig, seed: u64) -> MixFormer {
    let mut m = MixFormer::new(cfg.clone(), schema(cfg.max_seq_len), seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    for t in m.dense.tensors_mut() {
        for v in t.iter_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    for t in &mut m.tables.tables {
        for v in &mut t.weights {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    m
}

/// Dense parameters, then every embedding table.
pub fn flatten(m: &MixFormer) -> Vec<f64> {
    let mut out: Vec<f64> = m.dense.tensors().concat();
    for t in &m.tables.tables {
        out.extend(&t.weights);
    }
    out
}

pub fn assign(m: &mut MixFormer, values: &[f64]) {
    let mut i = 0;
    for t in m.dense.tensors_mut() {
        t.copy_from_slice(&values[i..i + t.len()]);
        i += t.len();
    }
    for t in &mut m.tables.tables {
        let n = t.weights.len();
        t.weights.copy_from_slice(&values[i..i + n]);
        i += n;
    }
    assert_eq!(i, values.len());
}
