//! End-to-end tests of the `rgi` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rgi::data::{self, Labels, SbmConfig};
use rgi::Tensor;

fn rgi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgi")).args(args).env_remove("RGI_SELFCHECK_FAULT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A toy dataset on disk and a config that trains on it for a few epochs.
    /// Large enough that a 10% training split contains every class.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ds = data::generate_sbm(&SbmConfig {
            num_blocks: 3,
            nodes_per_block: 50,
            p_in: 0.15,
            p_out: 0.02,
            feature_dim: 8,
            signal: 1.0,
            noise_sigma: 0.8,
            seed: 4,
        })
        .unwrap();
        data::save_dataset(&ds, &dir.path().join("data")).unwrap();
        let config = serde_json::json!({
            "dataset": {"manifest": "data/manifest.json"},
            "output_dir": "out",
            "seed": 1,
            "encoder": {"hidden_dim": 16, "output_dim": 8},
            "schedule": {"base_lr": 0.01, "n_warmup": 2, "n_epochs": 6},
            "eval": {"num_seeds": 3}
        });
        fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> String {
        self.path("config.json").to_string_lossy().into_owned()
    }

    fn train(&self) -> Output {
        rgi(&["train", "--config", &self.config()])
    }

    fn embed(&self, out: &Path) -> Output {
        let ckpt = self.path("out/checkpoint.rgi");
        rgi(&["embed", "--config", &self.config(), "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()])
    }
}

#[test]
fn train_embed_eval() {
    let ws = Workspace::new();
    let o = ws.train();
    assert!(o.status.success(), "{}", stderr(&o));

    let metrics = fs::read_to_string(ws.path("out/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,lr,rec,var,cov,total"));
    assert_eq!(lines.count(), 6);

    let emb = ws.path("out/emb.csv");
    let o = ws.embed(&emb);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data::read_matrix_csv(&emb).unwrap().shape(), (150, 8));

    let o = rgi(&["eval", "--config", &ws.config(), "--embeddings", emb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    assert!(lines[0].starts_with("sbm,0,0,accuracy,"), "{}", lines[0]);
    let summary = lines[3];
    let (mean, std) = summary.strip_prefix("mean=").unwrap().split_once(" std=").unwrap();
    assert_eq!(mean.split_once('.').unwrap().1.len(), 4);
    assert_eq!(std.split_once('.').unwrap().1.len(), 4);
    assert!(ws.path("out/eval.csv").is_file());
}

#[test]
fn training_is_reproducible() {
    let ws = Workspace::new();
    assert!(ws.train().status.success());
    let first = (fs::read(ws.path("out/metrics.csv")).unwrap(), fs::read(ws.path("out/checkpoint.rgi")).unwrap());
    assert!(ws.train().status.success());
    let second = (fs::read(ws.path("out/metrics.csv")).unwrap(), fs::read(ws.path("out/checkpoint.rgi")).unwrap());
    assert_eq!(first, second);
}

#[test]
fn one_hot_embeddings_score_one() {
    let ws = Workspace::new();
    let ds = data::load_manifest(&ws.path("data/manifest.json")).unwrap();
    let Labels::Multiclass { classes, .. } = &ds.labels else { unreachable!() };
    let emb = Tensor::from_fn(ds.num_nodes(), 3, |i, j| f64::from(u8::from(classes[i] == j)));
    let path = ws.path("onehot.csv");
    data::write_matrix_csv(&path, &emb).unwrap();
    let o = rgi(&["eval", "--config", &ws.config(), "--embeddings", path.to_str().unwrap(), "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last(), Some("mean=1.0000 std=0.0000"));
}

#[test]
fn missing_manifest_exits_one_and_names_it() {
    let ws = Workspace::new();
    fs::remove_file(ws.path("data/manifest.json")).unwrap();
    let o = ws.train();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_one() {
    let ws = Workspace::new();
    assert!(ws.train().status.success());
    let ckpt = ws.path("out/checkpoint.rgi");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let o = ws.embed(&ws.path("out/emb.csv"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn mismatched_embeddings_exit_one() {
    let ws = Workspace::new();
    let path = ws.path("short.csv");
    data::write_matrix_csv(&path, &Tensor::zeros(5, 2)).unwrap();
    let o = rgi(&["eval", "--config", &ws.config(), "--embeddings", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_exits_one() {
    let ws = Workspace::new();
    fs::write(ws.path("config.json"), r#"{"dataset": {"manifest": "data/manifest.json"}, "bogus": 1}"#).unwrap();
    assert_eq!(ws.train().status.code(), Some(1));
}

#[test]
fn selfcheck_passes_and_detects_faults() {
    let o = rgi(&["selfcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| !l.starts_with("FAIL")));

    let o = Command::new(env!("CARGO_BIN_EXE_rgi")).arg("selfcheck").env("RGI_SELFCHECK_FAULT", "relu").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}
