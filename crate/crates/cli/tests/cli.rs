use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.n_images=16",
    "text.embedding_dim=8",
    "text.hidden_dim=4",
    "generator.noise_dim=4",
    "generator.condition_dim=4",
    "generator.base_feature_channels=8",
    "generator.base_resolution=8",
    "generator.stage_count=2",
    "generator.residual_blocks=1",
    "discriminator.base_channels=4",
    "discriminator.max_channels=8",
    "discriminator.condition_dim=4",
    "damsm.channels=[4, 8]",
    "vqa.image_channels=4",
    "vqa.feature_dim=8",
    "vqa.question_embedding_dim=4",
    "vqa.attention_dim=4",
    "pretrain.damsm_epochs=1",
    "pretrain.vqa_epochs=1",
    "pretrain.batch_size=4",
    "train.batch_size=4",
    "train.checkpoint_every=1",
    "train.warmup_epochs=0",
    "eval.n_samples=8",
    "eval.is_splits=2",
    "eval.r_precision_distractors=3",
    "eval.batch_size=8",
];

fn qagan(out: &Path, args: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qagan"));
    c.env("RUST_LOG", "warn").arg("--out").arg(out).arg("--seed").arg("3");
    for kv in TINY {
        c.arg("--set").arg(kv);
    }
    c.args(args).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                v.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn help_lists_config_keys() {
    let o = Command::new(env!("CARGO_BIN_EXE_qagan")).arg("--help").output().unwrap();
    ok(&o);
    let s = String::from_utf8_lossy(&o.stdout);
    for key in ["train.epochs", "train.variant", "train.loss.lambda_vqa", "seed"] {
        assert!(s.contains(key), "{key} missing from help");
    }
}

#[test]
fn unknown_keys_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = qagan(dir.path(), &["--set", "train.epochz=3", "synth-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochz"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn synthetic_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&qagan(a.path(), &["synth-data"]));
    ok(&qagan(b.path(), &["synth-data"]));
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&qagan(d, &["synth-data"]));
    ok(&qagan(d, &["pretrain-damsm"]));
    let o = qagan(d, &["train", "--variant", "adapted", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain-vqa"));
    ok(&qagan(d, &["pretrain-vqa"]));
    ok(&qagan(d, &["train", "--variant", "adapted", "--epochs", "2"]));
    let report = d.join("eval.json");
    let o = qagan(
        d,
        &["--set", "train.variant=adapted", "--set", "train.epochs=2", "evaluate", "--checkpoint", "best", "--report", report.to_str().unwrap()],
    );
    ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v, stdout);
    assert_eq!(v["n_samples"], 8);
    assert_eq!(v["seed"], 3);
    for k in ["is_mean", "fid", "r_precision", "vqa_acc_consensus"] {
        assert!(v[k].as_f64().unwrap().is_finite(), "{k}: {v}");
    }
    // the best checkpoint now carries its score
    let again = qagan(d, &["--set", "train.variant=adapted", "--set", "train.epochs=2", "evaluate"]);
    ok(&again);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&again.stdout).unwrap(), v);
}
