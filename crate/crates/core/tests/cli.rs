use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use saig::evaluator::RetrievalReport;

fn saig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saig")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY_CONFIG: &str = r#"{
  "epochs": 2,
  "lr": 0.003,
  "batch_size": 8,
  "seed": 4,
  "model": {
    "variant": "custom", "depth": 2, "dim": 32, "heads": 2,
    "stem_channels": [8, 8, 8, 16, 16, 32], "stem_strides": [2, 2, 1, 2, 1, 2],
    "projection_dim": 32, "head": "gap", "input_hw": [32, 64]
  }
}"#;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn paramcount_prints_the_count() {
    let o = saig(&["paramcount", "--variant", "saig-s", "--classes", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    let n: u64 = stdout(&o).split_whitespace().next().unwrap().parse().unwrap();
    assert!((9_400_000..9_600_000).contains(&n), "{n}");
}

#[test]
fn usage_errors_exit_with_two() {
    let o = saig(&["paramcount", "--variant", "saig-s", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));
    assert_eq!(saig(&["paramcount", "--variant", "saig-x"]).status.code(), Some(2));
    assert_eq!(saig(&["nonsense"]).status.code(), Some(2));
    assert_eq!(saig(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = saig(&["eval", "--checkpoint", "missing.bin", "--data", "nowhere.json", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.bin"));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"lr": -1}"#).unwrap();
    let o = saig(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = saig(&["gradcheck", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("config.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let data = root.join("data");
    let o = saig(&["gen-data", "--n", "16", "--seed", "3", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = data.join("manifest.json");

    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let o = saig(&[
            "train", "--config", p(&cfg), "--data", p(&manifest), "--out", p(&out), "--deterministic",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().count(), 2);
        logs.push(fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(fs::read(root.join("a/last.ckpt")).unwrap(), fs::read(root.join("b/last.ckpt")).unwrap());

    let eval_dir = root.join("eval");
    let o = saig(&[
        "eval", "--checkpoint", p(&root.join("a/best.ckpt")), "--data", p(&manifest), "--out", p(&eval_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: RetrievalReport = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.n_queries, 16);
    assert!(report.hit_rate >= report.r_at[&1]);
    assert_eq!(report.checkpoint_hash.as_ref().map(String::len), Some(64));
    assert_eq!(report.config_hash.as_ref().map(String::len), Some(64));
    let index = saig::evaluator::DescriptorIndex::load(&eval_dir.join("index.bin")).unwrap();
    assert_eq!(index.len(), 16);

    let resumed = root.join("resumed");
    let o = saig(&["train", "--resume", p(&root.join("a/last.ckpt")), "--out", p(&resumed)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(resumed.join("metrics.jsonl")).unwrap(), logs[0]);
}
