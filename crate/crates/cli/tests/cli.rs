use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sphere_latent::config::RunConfig;

fn sle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sle"))
        .args(args)
        .env_remove("SLE_THREADS")
        .output()
        .expect("sle runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, epochs: usize) -> PathBuf {
    let mut cfg = RunConfig::reference();
    cfg.run_id = name.into();
    cfg.output_dir = dir.join(name);
    cfg.data.n_per_class = 12;
    cfg.model.hidden = 16;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 20;
    cfg.train.checkpoint_every = 2;
    cfg.eval.n_samples = 64;
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "run", 4);
    let out = sle(&["train", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("run").join("final.ckpt")
}

#[test]
fn train_writes_metrics_checkpoints_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    for f in ["final.ckpt", "epoch-0002.ckpt", "epoch-0004.ckpt", "latents.sle", "reference-seed0.sle"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(run.join("train.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("epoch,"));
    assert!(lines[4].starts_with("4,"));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    let full = fs::read(&ckpt).unwrap();
    let csv = fs::read_to_string(run.join("train.csv")).unwrap();
    let cfg = dir.path().join("run.toml");
    let out = sle(&["train", p(&cfg), "--resume", p(&run.join("epoch-0002.ckpt"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&ckpt).unwrap(), full);
    assert_eq!(fs::read_to_string(run.join("train.csv")).unwrap(), csv);
}

#[test]
fn resuming_with_another_configuration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let other = write_config(dir.path(), "other", 6);
    let text = fs::read_to_string(&other).unwrap().replace("lr = 0.001", "lr = 0.002");
    fs::write(&other, text).unwrap();
    let out = sle(&["train", p(&other), "--resume", p(&ckpt)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sample_writes_labelled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let csv = dir.path().join("s.csv");
    let out = sle(&["sample", p(&ckpt), "--n", "10", "--steps", "2", "--out", p(&csv)]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# checkpoint="));
    assert!(lines[1].starts_with("label,x0,"));
    assert_eq!(lines.len(), 12);
    let labels: Vec<&str> = lines[2..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0", "1", "2", "3", "4", "5", "6", "7", "0", "1"]);
    assert_eq!(lines[2].split(',').count(), 33);

    let again = dir.path().join("t.csv");
    sle(&["sample", p(&ckpt), "--n", "10", "--steps", "2", "--out", p(&again)]);
    assert_eq!(fs::read_to_string(&again).unwrap().lines().skip(1).collect::<Vec<_>>(), lines[1..]);
}

#[test]
fn sample_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let csv = dir.path().join("s.csv");
    assert_eq!(code(&sle(&["sample", p(&ckpt), "--label", "8", "--out", p(&csv)])), 2);
    let out = sle(&["sample", p(&ckpt), "--n", "0", "--out", p(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);
    let out = sle(&["sample", p(&ckpt), "--label", "3", "--n", "2", "--omega", "2", "--out", p(&csv)]);
    assert_eq!(code(&out), 0);
    assert!(fs::read_to_string(&csv).unwrap().lines().skip(2).all(|l| l.starts_with("3,")));
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(code(&sle(&["sample", p(&missing)])), 1);
}

#[test]
fn eval_appends_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = sle(&["eval", p(&ckpt), "--steps", "2,4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 2);
    let out = sle(&["eval", p(&ckpt), "--reference-self"]);
    assert_eq!(code(&out), 0);
    let self_fid: f64 = stdout(&out).trim().split(',').nth(4).unwrap().parse().unwrap();
    assert!(self_fid.abs() < 1e-9);
    let csv = fs::read_to_string(ckpt.parent().unwrap().join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run_id,steps,omega,gamma,toy_fid,mmd2,class_acc");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("run,2,"));
}

#[test]
fn eval_rejects_unbalanced_sample_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    assert_eq!(code(&sle(&["eval", p(&ckpt), "--n", "12"])), 2);
    assert_eq!(code(&sle(&["eval", p(&ckpt), "--steps", "0"])), 2);
}

#[test]
fn paper_cost_table_passes() {
    let out = sle(&["cost", "--mode", "paper", "--steps", "4", "--cfg"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("13324"));
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));

    let out = sle(&["cost", "--mode", "paper", "--steps", "6", "--cfg", "--format", "csv"]);
    let text = stdout(&out);
    let row = text.lines().find(|l| l.starts_with("ImageNet-1K,Sphere Latent Encoder")).unwrap();
    assert_eq!(row.split(',').nth(4).unwrap(), "2973");
}

#[test]
fn toy_cost_counts_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = sle(&["cost", "--mode", "toy", "--checkpoint", p(&ckpt), "--steps", "3", "--format", "csv"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("toy,denoiser x3,")));
    assert!(text.lines().any(|l| l.starts_with("toy,decoder x1,")));
    assert_eq!(code(&sle(&["cost", "--mode", "toy"])), 2);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "bogus = 1\n").unwrap();
    let out = sle(&["train", p(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let cfg = write_config(dir.path(), "x", 2);
    let text = fs::read_to_string(&cfg).unwrap();
    let without_lr: String = text.lines().filter(|l| !l.starts_with("lr ")).map(|l| format!("{l}\n")).collect();
    fs::write(&cfg, without_lr).unwrap();
    let out = sle(&["train", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let out = Command::new(env!("CARGO_BIN_EXE_sle"))
        .args(["cost", "--mode", "paper"])
        .env("SLE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert_eq!(code(&sle(&["frobnicate"])), 2);
}

#[test]
fn worker_count_does_not_change_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let csv = dir.path().join(format!("s{threads}.csv"));
        let out = Command::new(env!("CARGO_BIN_EXE_sle"))
            .args(["sample", p(&ckpt), "--n", "16", "--omega", "2", "--out", p(&csv)])
            .env("SLE_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        outputs.push(fs::read_to_string(&csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
