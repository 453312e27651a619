use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use l2rec::config::Config;
use l2rec::datagen::ingest;
use l2rec::evalkit::{evaluate, MetricReport};
use l2rec::trainkit::Checkpoint;
use serde_json::Value;

const TINY: &str = r#"
[backbone]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
adapted_targets = ["attn_q", "ff_up"]

[experts]
n_semantic = 2
n_behavioral = 2
rank = 2
router_hidden = 4

[views]
t_max = 24
l_max = 6

[pretrain]
steps = 0

[train]
steps = 6
batch_size = 4

[loss]
k_neg = 3

[data]
n_users = 30
n_items = 24
interactions_min = 3
interactions_max = 8
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l2rec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: String,
    data: String,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.toml");
        std::fs::write(&cfg, TINY).unwrap();
        let cfg = cfg.to_str().unwrap().to_string();
        let gen = root.join("gen");
        ok(&["--config", &cfg, "gen-data", "--out", gen.to_str().unwrap()]);
        let data = gen.join("interactions.jsonl").to_str().unwrap().to_string();
        Self { _dir: dir, root, cfg, data }
    }

    fn path(&self, p: &str) -> String {
        self.root.join(p).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let out = self.path(out);
        let mut args = vec!["--config", &self.cfg, "train", "--data", &self.data, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn gen_data_counts_and_seeds() {
    let env = Env::new();
    let a = env.path("a");
    let summary: Value = serde_json::from_str(ok(&["--config", &env.cfg, "gen-data", "--out", &a]).trim()).unwrap();
    let n = lines(&Path::new(&a).join("interactions.jsonl")).len();
    assert_eq!(summary["records"].as_u64().unwrap() as usize, n);
    assert!(Path::new(&a).join("ground_truth.json").exists());
    assert!(std::fs::read_to_string(Path::new(&a).join("config.toml")).unwrap().starts_with("# l2rec "));

    let (b, c) = (env.path("b"), env.path("c"));
    ok(&["--config", &env.cfg, "gen-data", "--out", &b, "--seed", "5"]);
    ok(&["--config", &env.cfg, "gen-data", "--out", &c, "--seed", "5"]);
    let read = |d: &str| std::fs::read(Path::new(d).join("interactions.jsonl")).unwrap();
    assert_eq!(read(&b), read(&c));
    assert_ne!(read(&a), read(&b));

    let bad = run(&["--config", &env.cfg, "--set", "data.n_genres=1000", "gen-data", "--out", &env.path("d")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("n_genres"));
    let unknown = run(&["--set", "data.genres=3", "gen-data", "--out", &env.path("e")]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn train_snapshot_and_resume() {
    let env = Env::new();
    env.train("full", &["--ablate", "no_bpc"]);
    let snap = Config::load(&PathBuf::from(env.path("full/config.toml"))).unwrap();
    assert!(snap.train.ablation.no_bpc);
    let full = lines(&PathBuf::from(env.path("full/metrics.jsonl")));
    assert_eq!(full.len(), 6);

    let part = env.train("part", &["--ablate", "no_bpc", "--stop-after", "2"]);
    let v: Value = serde_json::from_str(part.trim()).unwrap();
    assert_eq!(v["done"], Value::Bool(false));
    let ck = env.path("part/checkpoint.l2r");
    env.train("part", &["--resume", &ck]);
    assert_eq!(lines(&PathBuf::from(env.path("part/metrics.jsonl"))), full);
    assert_eq!(
        std::fs::read(env.path("part/checkpoint.l2r")).unwrap(),
        std::fs::read(env.path("full/checkpoint.l2r")).unwrap()
    );

    let bad = run(&["--config", &env.cfg, "train", "--data", &env.data, "--out", &env.path("x"), "--ablate", "no_such"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_matches_library_and_dumps_ranks() {
    let env = Env::new();
    env.train("run", &[]);
    let ck = env.path("run/checkpoint.l2r");
    let out = env.path("ev");
    let stdout = ok(&["eval", "--checkpoint", &ck, "--data", &env.data, "--out", &out, "--dump-ranks"]);
    let rep: MetricReport = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();

    let ds = ingest(Path::new(&env.data)).unwrap();
    let c = Checkpoint::load(Path::new(&ck)).unwrap();
    let cfg = Config::from_toml(&c.config).unwrap();
    let model = c.restore_model().unwrap();
    let lib = evaluate(&model, &ds, &cfg.eval, cfg.train.ablation.encode_options()).unwrap();
    assert_eq!(rep, lib.clone().without_ranks());
    assert_eq!(lines(&Path::new(&out).join("ranks.jsonl")).len(), lib.n_users);

    let missing = run(&["eval", "--checkpoint", &env.path("nope.l2r"), "--data", &env.data]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.l2r"));
}

#[test]
fn ablate_has_six_named_rows() {
    let env = Env::new();
    let out = env.path("abl");
    ok(&["--config", &env.cfg, "ablate", "--data", &env.data, "--out", &out]);
    let rows: Vec<Value> = lines(&Path::new(&out).join("ablation.jsonl"))
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["L2Rec", "w/o Adapt", "w/o Semantic", "w/o Behavioral", "w/o BPC", "w/o PR"]);
    let hashes: Vec<&str> = rows.iter().filter_map(|r| r["data_hash"].as_str()).collect();
    assert_eq!(hashes.len(), 5);
    assert!(hashes.iter().all(|h| *h == hashes[0]));
}

#[test]
fn sweep_rows_and_precondition() {
    let env = Env::new();
    let out = env.path("sw");
    let args = ["--config", &env.cfg, "sweep", "--param", "rank", "--values", "2,4,8,16", "--data", &env.data, "--out", &out];
    let first = ok(&args);
    assert_eq!(lines(&Path::new(&out).join("sweep.jsonl")).len(), 4);
    assert_eq!(ok(&args), first);

    let bad = run(&["--config", &env.cfg, "sweep", "--param", "top_n", "--values", "1,3", "--data", &env.data, "--out", &env.path("sw2")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!Path::new(&env.path("sw2")).exists());
}

#[test]
fn route_inspect_records() {
    let env = Env::new();
    env.train("run", &[]);
    let out = env.path("ri");
    ok(&[
        "route-inspect",
        "--checkpoint",
        &env.path("run/checkpoint.l2r"),
        "--data",
        &env.data,
        "--users",
        "u00000,u00001",
        "--out",
        &out,
    ]);
    let recs = lines(&Path::new(&out).join("routes.jsonl"));
    assert!(!recs.is_empty());
    for l in &recs {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v["selected"].as_array().unwrap().len() <= 2);
        assert!(v["user_id"].as_str().unwrap().starts_with('u'));
    }
    let usage: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&out).join("usage.json")).unwrap()).unwrap();
    let views = usage["views"].as_array().unwrap();
    assert_eq!(views.len(), 2);
    for v in views {
        let s: f64 = v["fractions"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
