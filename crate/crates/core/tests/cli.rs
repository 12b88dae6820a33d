//! End-to-end runs of the `sbssl` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sbssl::checkpoint::Checkpoint;
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "seed": 3,
  "data": { "synth": { "exams": 16, "image_size": 16, "min_slices": 3, "max_slices": 5, "band_width": 3.0 } },
  "model": { "image_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2 },
  "pretrain": { "epochs": 4, "batch_size": 16, "checkpoint_every": 2, "preview_every": 2 },
  "finetune": { "epochs": 2, "batch_size": 4, "ensemble": 1 },
  "attn": { "count": 2 }
}"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("run.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn sbssl(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sbssl"))
            .current_dir(self.dir.path())
            .env_remove("SBSSL_SEED")
            .args(["--config", "run.json"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.sbssl(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.sbssl(args).status.code().unwrap()
    }
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Everything but `config.json`, which records the output directory.
fn outputs(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    tree_bytes(root).into_iter().filter(|(p, _)| p != Path::new("config.json")).collect()
}

#[test]
fn synth_layout_and_determinism() {
    let run = Run::new();
    run.ok(&["synth", "--out", "a"]);
    run.ok(&["synth", "--out", "b"]);
    let npy = |split: &str| {
        fs::read_dir(run.path(&format!("a/{split}/sagittal")))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "npy"))
            .count()
    };
    assert_eq!(npy("train") + npy("valid"), 16);
    assert!(run.path("a/manifest.json").exists());
    assert!(run.path("a/train-sagittal.csv").exists());
    assert_eq!(outputs(&run.path("a")), outputs(&run.path("b")));

    assert_eq!(run.code(&["synth", "--out", "a"]), 2);
    run.ok(&["synth", "--out", "a", "--force"]);
}

#[test]
fn config_errors_exit_2() {
    let run = Run::new();
    fs::write(run.path("bad.json"), r#"{"data": {"synth": {"positive_rate": 1.5}}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sbssl"))
        .current_dir(run.dir.path())
        .args(["--config", "bad.json", "synth"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    fs::write(run.path("typo.json"), r#"{"pretrian": {}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sbssl"))
        .current_dir(run.dir.path())
        .args(["--config", "typo.json", "synth"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_seed_overrides_config() {
    let run = Run::new();
    let out = Command::new(env!("CARGO_BIN_EXE_sbssl"))
        .current_dir(run.dir.path())
        .env("SBSSL_SEED", "11")
        .args(["--config", "run.json", "synth", "--out", "d"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let resolved = fs::read_to_string(run.path("d/config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(v["seed"], 11);
}

#[test]
fn missing_dataset_exits_3() {
    let run = Run::new();
    assert_eq!(run.code(&["pretrain", "--data", "nowhere"]), 3);
    assert_eq!(run.code(&["eval", "missing.bin", "--data", "nowhere"]), 3);
}

#[test]
fn full_pipeline() {
    let run = Run::new();
    run.ok(&["synth", "--out", "data"]);

    // Pretraining, and the same run split in two via resume.
    run.ok(&["pretrain", "--out", "full"]);
    let full = run.path("full/pretrain");
    for f in ["config.json", "loss.csv", "checkpoint.bin", "checkpoint_epoch0002.bin", "previews/epoch0004.png"] {
        assert!(full.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    run.ok(&["pretrain", "--out", "split", "--until", "2"]);
    run.ok(&["pretrain", "--out", "split", "--resume", "split/pretrain/checkpoint.bin"]);
    assert_eq!(fs::read_to_string(run.path("split/pretrain/loss.csv")).unwrap(), log);
    let a = Checkpoint::load(&run.path("split/pretrain/checkpoint.bin")).unwrap();
    let b = Checkpoint::load(&full.join("checkpoint.bin")).unwrap();
    assert_eq!(a.meta.epoch, 4);
    assert_eq!(a.meta.adam_step, b.meta.adam_step);
    for (pa, pb) in a.params.iter().zip(b.params.iter()) {
        assert_eq!((&pa.name, &pa.value), (&pb.name, &pb.value));
    }

    // Worker count does not change results.
    run.ok(&["pretrain", "--out", "par", "--workers", "3"]);
    assert_eq!(fs::read_to_string(run.path("par/pretrain/loss.csv")).unwrap(), log);

    // Finetuning from the checkpoint and from scratch.
    run.ok(&["finetune", "--out", "ft", "--checkpoint", "full/pretrain/checkpoint.bin", "--ensemble", "2"]);
    for f in ["member_0.bin", "member_1.bin", "metrics_0.csv", "metrics_1.csv", "ensemble.json", "config.json"] {
        assert!(run.path("ft/finetune").join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.path("ft/finetune/metrics_0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    run.ok(&["finetune", "--out", "ft2", "--checkpoint", "full/pretrain/checkpoint.bin", "--ensemble", "2"]);
    assert_eq!(
        fs::read_to_string(run.path("ft2/finetune/metrics_1.csv")).unwrap(),
        fs::read_to_string(run.path("ft/finetune/metrics_1.csv")).unwrap()
    );
    run.ok(&["finetune", "--out", "ft", "--scratch"]);
    assert!(run.path("ft/finetune_scratch/member_0.bin").exists());

    // A checkpoint from a different architecture is rejected.
    fs::write(
        run.path("other.json"),
        CONFIG.replace(r#""depth": 2"#, r#""depth": 3"#),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sbssl"))
        .current_dir(run.dir.path())
        .args(["--config", "other.json", "finetune", "--out", "x", "--checkpoint", "full/pretrain/checkpoint.bin"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Evaluation of the manifest and of a single member.
    run.ok(&["eval", "--out", "ev", "ft/finetune/ensemble.json"]);
    let m = fs::read_to_string(run.path("ev/eval/metrics.csv")).unwrap();
    let mut lines = m.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"accuracy") && header.contains(&"auc"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "2");
    let roc = fs::read_to_string(run.path("ev/eval/roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\n"));
    run.ok(&["eval", "--out", "ev1", "ft/finetune/member_0.bin"]);
    assert!(fs::read_to_string(run.path("ev1/eval/metrics.csv")).unwrap().lines().nth(1).unwrap().starts_with("1,"));
    assert_eq!(run.code(&["eval", "--out", "ev2", "ft/finetune/member_9.bin"]), 3);

    // Attention overlays: deterministic, and slice bounds are checked.
    let exam = fs::read_to_string(run.path("data/valid-sagittal.csv")).unwrap();
    let exam = exam.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    run.ok(&["attn", "--out", "at1", "--model", "ft/finetune/member_0.bin", "--exam", &exam, "--mid"]);
    run.ok(&["attn", "--out", "at2", "--model", "ft/finetune/member_0.bin", "--exam", &exam, "--mid"]);
    let a = tree_bytes(&run.path("at1/attn"));
    assert_eq!(a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count(), 1);
    assert_eq!(a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "pgm")).count(), 1);
    assert_eq!(outputs(&run.path("at1/attn")), outputs(&run.path("at2/attn")));
    assert_eq!(
        run.code(&["attn", "--out", "at3", "--model", "ft/finetune/member_0.bin", "--exam", &exam, "--slice", "99"]),
        2
    );
    run.ok(&["attn", "--out", "at4", "--model", "full/pretrain/checkpoint.bin"]);
    assert_eq!(tree_bytes(&run.path("at4/attn")).len(), 2 * 2 + 1);
}
