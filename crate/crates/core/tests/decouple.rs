mod common;

use common::{model, request, rng};
use mixformer::blocks::{MixFormer, ModelConfig};
use mixformer::decouple::{forward_decoupled, rlb_forward, shared_user_state};
use mixformer::features::Request;
use mixformer::Error;
use rand::Rng;

fn max_rel_dev(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

fn variants() -> Vec<ModelConfig> {
    let base = ModelConfig::new(4, 2, 8, 12).with_decoupling(2);
    let mut out = vec![base.clone(), ModelConfig::new(4, 3, 8, 12).with_decoupling(1), ModelConfig::new(4, 1, 8, 12).with_decoupling(3)];
    for a in ["wo_hm", "wo_qm_ffn", "shared_seq_ffn", "shared_of_ffn", "post_ln"] {
        out.push(base.clone().with_ablation(a).unwrap());
    }
    out
}

#[test]
fn rlb_matches_per_candidate_forward() {
    for (i, cfg) in variants().into_iter().enumerate() {
        let m = model(cfg, i as u64);
        for k in [1, 2, 8, 32] {
            let req = request(&mut rng(k as u64 * 7 + i as u64), k, 12, 2);
            let shared = rlb_forward(&m, &req).unwrap();
            let single: Vec<Vec<f64>> = (0..k).map(|j| forward_decoupled(&m, &req, j).unwrap()).collect();
            let dev = max_rel_dev(&shared, &single);
            assert!(dev <= 1e-9, "variant {i}, K={k}: {dev:e}");
        }
    }
}

#[test]
fn rlb_on_an_empty_sequence() {
    let m = model(ModelConfig::new(4, 2, 8, 12).with_decoupling(2), 3);
    let req = request(&mut rng(3), 4, 0, 2);
    let single: Vec<Vec<f64>> = (0..4).map(|j| m.forward(&req, j).unwrap()).collect();
    assert!(max_rel_dev(&rlb_forward(&m, &req).unwrap(), &single) <= 1e-9);
}

fn user_rows(m: &MixFormer, req: &Request, k: usize) -> Vec<Vec<f64>> {
    let n_user = m.config.user_heads();
    m.head_activations(req, k)
        .unwrap()
        .iter()
        .map(|x| x.slice_rows(0, n_user).into_data())
        .collect()
}

fn perturb_table(m: &mut MixFormer, table: usize, r: &mut impl Rng) {
    for v in &mut m.tables.tables[table].weights {
        *v += r.gen_range(-1.0..1.0);
    }
}

#[test]
fn user_rows_ignore_item_features() {
    for (i, cfg) in variants().into_iter().enumerate() {
        let mut m = model(cfg, 10 + i as u64);
        let mut r = rng(i as u64);
        let req = request(&mut r, 3, 12, 2);
        let before = user_rows(&m, &req, 0);
        for item in 0..m.tables.n_item {
            let t = m.tables.item_table(item);
            perturb_table(&mut m, t, &mut r);
        }
        let mut other = req.clone();
        other.candidates[0] = req.candidates[2].clone();
        other.candidates[0][0] = (other.candidates[0][0] + 1) % 13;
        assert_eq!(user_rows(&m, &req, 0), before, "variant {i}");
        assert_eq!(user_rows(&m, &other, 0), before, "variant {i}");
        let state = shared_user_state(&m, &req).unwrap();
        for (a, b) in state.user_rows.iter().zip(&before) {
            assert_eq!(a.data(), &b[..]);
        }
    }
}

#[test]
fn user_features_reach_item_rows() {
    let mut m = model(ModelConfig::new(4, 2, 8, 12).with_decoupling(2), 20);
    let req = request(&mut rng(20), 1, 4, 2);
    let item_rows = |m: &MixFormer| m.head_activations(&req, 0).unwrap().last().unwrap().slice_rows(2, 4);
    let before = item_rows(&m);
    let t = m.tables.request_table(0);
    perturb_table(&mut m, t, &mut rng(21));
    assert!(item_rows(&m).max_abs_diff(&before) > 1e-6);
}

#[test]
fn zero_user_heads_reproduce_the_base_model() {
    for (i, ablation) in [None, Some("wo_qm_ffn"), Some("post_ln")].into_iter().enumerate() {
        let mut base = ModelConfig::new(4, 2, 8, 12);
        if let Some(a) = ablation {
            base = base.with_ablation(a).unwrap();
        }
        let coupled = model(base.clone(), 30 + i as u64);
        let mut decoupled = coupled.clone();
        decoupled.config = base.with_decoupling(0);
        decoupled.config.validate().unwrap();
        assert_eq!(decoupled.layout, coupled.layout);
        let req = request(&mut rng(30), 5, 12, 2);
        let a = coupled.forward_request(&req).unwrap();
        assert_eq!(rlb_forward(&decoupled, &req).unwrap(), a);
        for k in 0..5 {
            assert_eq!(forward_decoupled(&decoupled, &req, k).unwrap(), a[k]);
        }
    }
}

#[test]
fn coupled_models_are_rejected() {
    let m = model(ModelConfig::new(4, 2, 8, 12), 40);
    let req = request(&mut rng(40), 2, 3, 2);
    assert!(matches!(rlb_forward(&m, &req), Err(Error::Config(_))));
    assert!(matches!(forward_decoupled(&m, &req, 0), Err(Error::Config(_))));
}
