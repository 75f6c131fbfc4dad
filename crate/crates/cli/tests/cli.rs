use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixformer::blocks::MixFormer;
use mixformer::datagen::Generated;
use mixformer::features::FeatureSchema;
use mixformer::trainer::auc;
use mixformer_cli::config::{RunConfig, RUN_FILE};

const TINY: &str = r#"
[generator]
n_users = 40
n_items = 60
n_requests = 120
seq_len_min = 2
seq_len_max = 10
n_clusters = 8
seed = 3

[model]
n_heads = 2
n_blocks = 1
head_dim = 4
max_seq_len = 10

[train]
batch_size = 64

[train.dense]
lr = 0.001
"#;

fn mixformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), format!("{TINY}{extra}")).unwrap();
    dir
}

fn gen(dir: &Path, out: &str) -> String {
    ok(mixformer(dir, &["--config", "run.toml", "--out", out, "gen"]))
}

#[test]
fn gen_is_deterministic_and_reproducible_from_its_sidecar() {
    let dir = setup("");
    let d = dir.path();
    gen(d, "a");
    gen(d, "b");
    let bytes = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(bytes("a/dataset.mxds"), bytes("b/dataset.mxds"));
    assert_eq!(bytes("a/oracle.csv"), bytes("b/oracle.csv"));
    ok(mixformer(d, &["--config", "a/run.toml", "--out", "c", "gen"]));
    assert_eq!(bytes("a/dataset.mxds"), bytes("c/dataset.mxds"));
    assert_eq!(bytes("a/run.toml"), bytes("c/run.toml"));
    ok(mixformer(d, &["--config", "run.toml", "--seed", "9", "--out", "e", "gen"]));
    assert_ne!(bytes("a/dataset.mxds"), bytes("e/dataset.mxds"));
}

#[test]
fn printed_oracle_auc_matches_the_files() {
    let dir = setup("");
    let d = dir.path();
    let stdout = gen(d, "g");
    let schema = FeatureSchema::read(&d.join("g/schema.txt")).unwrap();
    let data = mixformer::features::Dataset::read(&schema, &d.join("g/dataset.mxds")).unwrap();
    let oracle = Generated::read_oracle_csv(&d.join("g/oracle.csv")).unwrap();
    let scores: Vec<f64> = oracle.iter().flatten().map(|p| p[0]).collect();
    let labels: Vec<bool> = data.requests.iter().flat_map(|r| r.labels.clone().unwrap()).map(|y| y[0]).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(stdout.contains(&format!("finish {a:.4}")), "{stdout} vs {a}");
}

#[test]
fn sidecar_round_trips() {
    let dir = setup("");
    gen(dir.path(), "g");
    let text = fs::read_to_string(dir.path().join("g").join(RUN_FILE)).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.to_toml().unwrap(), text);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn exit_codes() {
    let dir = setup("");
    let d = dir.path();
    let code = |out: Output| out.status.code().unwrap();

    let out = mixformer(d, &["--preset", "huge", "flops"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paper-medium-corrected"));
    fs::write(d.join("bad.toml"), "[train]\nepoch = 2\n").unwrap();
    assert_eq!(code(mixformer(d, &["--config", "bad.toml", "flops"])), 2);
    assert_eq!(code(mixformer(d, &["--config", "missing.toml", "flops"])), 3);
    assert_eq!(code(mixformer(d, &["--config", "run.toml", "train", "--data", "nowhere"])), 3);
    gen(d, "g");
    assert_eq!(code(mixformer(d, &["--config", "run.toml", "bench-rlb", "--data", "g"])), 2);
    fs::write(d.join("hot.toml"), format!("{TINY}\n[train.sparse]\nlr = 1e300\n").replace("lr = 0.001", "lr = 1e300")).unwrap();
    assert_eq!(code(mixformer(d, &["--config", "hot.toml", "--out", "t", "train", "--data", "g"])), 4);
}

#[test]
fn zero_learning_rates_leave_the_initial_model() {
    let dir = setup("\n[train.sparse]\nlr = 0.0\n");
    let d = dir.path();
    fs::write(d.join("run.toml"), fs::read_to_string(d.join("run.toml")).unwrap().replace("lr = 0.001", "lr = 0.0")).unwrap();
    gen(d, "g");
    ok(mixformer(d, &["--config", "run.toml", "--out", "t", "train", "--data", "g"]));
    let cfg = RunConfig::load(Some(&d.join("run.toml")), &Default::default()).unwrap();
    let schema = FeatureSchema::read(&d.join("g/schema.txt")).unwrap();
    let fresh = MixFormer::new(cfg.model, schema, cfg.train.seed).unwrap();
    assert_eq!(MixFormer::load(&d.join("t/model.ckpt")).unwrap(), fresh);
}

#[test]
fn resume_reproduces_the_next_steps_bit_exactly() {
    let dir = setup("");
    let d = dir.path();
    gen(d, "g");
    let with_steps = |n: u64| fs::write(d.join(format!("s{n}.toml")), format!("max_steps = {n}\n{TINY}")).unwrap();
    with_steps(3);
    with_steps(2);
    with_steps(5);
    ok(mixformer(d, &["--config", "s5.toml", "--out", "straight", "train", "--data", "g"]));
    ok(mixformer(d, &["--config", "s3.toml", "--out", "split", "train", "--data", "g"]));
    ok(mixformer(d, &["--config", "s2.toml", "--out", "split", "train", "--data", "g", "--resume"]));
    let bytes = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(bytes("straight/model.ckpt"), bytes("split/model.ckpt"));
    assert_eq!(bytes("straight/model.opt"), bytes("split/model.opt"));
    let log = fs::read_to_string(d.join("split/train_log_from_4.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn eval_matches_training_metrics() {
    let dir = setup("");
    let d = dir.path();
    gen(d, "g");
    ok(mixformer(d, &["--config", "run.toml", "--out", "t", "train", "--data", "g"]));
    ok(mixformer(d, &["--config", "run.toml", "--out", "e", "eval", "--data", "g", "--model", "t/model.ckpt"]));
    let rows = |p: &str| -> Vec<String> { fs::read_to_string(d.join(p)).unwrap().lines().map(String::from).collect() };
    let (train, eval) = (rows("t/metrics.csv"), rows("e/eval.csv"));
    assert_eq!(train[..3], eval[..3]);
    assert!(train.iter().any(|l| l.starts_with("oracle,")));
}

#[test]
fn flops_scaling_is_affine_in_sequence_length() {
    let dir = setup("");
    let d = dir.path();
    ok(mixformer(d, &["--config", "run.toml", "--out", "f", "flops", "--axis", "sequence"]));
    let text = fs::read_to_string(d.join("f/scaling.csv")).unwrap();
    let pts: Vec<(i128, i128)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[3].parse().unwrap(), c[5].parse().unwrap())
        })
        .collect();
    assert_eq!(pts.iter().map(|p| p.0).collect::<Vec<_>>(), vec![512, 2048, 8192, 10000]);
    let (t0, f0) = pts[0];
    let (t1, f1) = pts[1];
    for &(t, f) in &pts[2..] {
        assert_eq!((f - f0) * (t1 - t0), (f1 - f0) * (t - t0));
    }
    let out = ok(mixformer(d, &["--config", "run.toml", "--out", "f", "flops", "--axis", "dense"]));
    assert!(out.contains("params"));
    assert_eq!(fs::read_to_string(d.join("f/scaling.csv")).unwrap().lines().count(), 5);
}

#[test]
fn rlb_flops_and_bench_on_a_decoupled_model() {
    let dir = setup("\n[model.decoupling]\nenabled = true\nn_user_heads = 1\nn_item_heads = 1\n\n[bench]\nrequests = 4\ncandidates = [1, 2, 4, 8]\nrepeats = 1\n");
    let d = dir.path();
    let out = ok(mixformer(d, &["--config", "run.toml", "--out", "f", "flops", "--rlb", "--candidates", "4"]));
    assert!(out.contains("rlb savings at K=4"), "{out}");
    gen(d, "g");
    ok(mixformer(d, &["--config", "run.toml", "--out", "b", "bench-rlb", "--data", "g"]));
    let text = fs::read_to_string(d.join("b/bench_rlb.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][2], 0.0);
    assert!(rows.windows(2).all(|w| w[1][5] >= w[0][5]));
}

#[test]
fn ablate_writes_six_single_switch_rows() {
    let dir = setup("");
    let d = dir.path();
    fs::write(d.join("run.toml"), format!("max_steps = 1\n{TINY}")).unwrap();
    gen(d, "g");
    ok(mixformer(d, &["--config", "run.toml", "--out", "a", "ablate", "--data", "g"]));
    let text = fs::read_to_string(d.join("a/ablation.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for (row, name) in rows.iter().zip(mixformer::blocks::Ablations::NAMES) {
        let c: Vec<&str> = row.split(',').collect();
        assert_eq!((c[0], c[1]), (name, format!("ablations.{name}").as_str()));
        assert!(c[3].parse::<f64>().unwrap().is_finite());
    }
    assert!(d.join("a/run.toml").exists());
}
