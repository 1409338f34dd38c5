use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use arlab::data::{synth_dataset, write_idx, SynthSpec};
use arlab::nn::load_checkpoint;
use arlab::EvalReport;
use tempfile::TempDir;

fn arlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = arlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small 10-class IDX fixture in the standard MNIST file layout.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = |per_class, seed| SynthSpec {
        classes: 10,
        per_class,
        side: 8,
        seed,
    };
    let train = synth_dataset::<f32>(spec(20, 1)).unwrap();
    let test = synth_dataset::<f32>(spec(4, 2)).unwrap();
    let p = dir.path();
    write_idx(&train, p.join("train-images-idx3-ubyte"), p.join("train-labels-idx1-ubyte")).unwrap();
    write_idx(&test, p.join("t10k-images-idx3-ubyte"), p.join("t10k-labels-idx1-ubyte")).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained(data: &Path, out: &Path) -> PathBuf {
    ok(&[
        "train", "--data-dir", s(data), "--arch", "mlp", "--epochs", "2", "--batch-size", "20",
        "--out", s(out),
    ]);
    out.join("model.arlb")
}

#[test]
fn train_writes_checkpoint_metrics_and_resolved_config() {
    let data = fixture();
    let out = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "train", "--data-dir", s(data.path()), "--arch", "mlp", "--epochs", "2", "--batch-size",
        "20", "--objective", "lsq", "--lambda", "0.5", "--noise-sigma", "0.5", "--out",
        s(out.path()),
    ]);
    assert!(stdout.contains("final clean accuracy"));
    let ck = load_checkpoint::<f32>(out.path().join("model.arlb")).unwrap();
    assert_eq!(ck.metadata.objective, "lsq");
    assert_eq!((ck.metadata.lambda, ck.metadata.noise_sigma), (0.5, 0.5));
    let metrics = std::fs::read_to_string(out.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("train_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["objective"], "lsq");
    assert_eq!(cfg["epochs"], 2);
}

#[test]
fn adv_fraction_one_is_full_adversarial_training() {
    let data = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "train", "--data-dir", s(data.path()), "--arch", "mlp", "--epochs", "1", "--batch-size",
        "50", "--attack-iters", "3", "--objective", "plain", "--adv-fraction", "1.0", "--out",
        s(out.path()),
    ]);
    let ck = load_checkpoint::<f32>(out.path().join("model.arlb")).unwrap();
    assert_eq!(ck.metadata.adv_fraction, 1.0);
    assert!(ck.metadata.extra.contains_key("inner_attack"));
}

#[test]
fn missing_dataset_names_the_flag() {
    let out = tempfile::tempdir().unwrap();
    let r = arlab(&["train", "--out", s(out.path())]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("--train-images"));
}

#[test]
fn exit_codes_classify_failures() {
    let data = fixture();
    let out = tempfile::tempdir().unwrap();
    assert_eq!(code(&arlab(&["attack", "--no-such-flag"])), 1);
    let bogus = out.path().join("bogus.arlb");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let r = arlab(&["attack", "--checkpoint", s(&bogus), "--data-dir", s(data.path()), "--out", s(out.path())]);
    assert_eq!(code(&r), 2);
    let r = arlab(&[
        "train", "--data-dir", s(data.path()), "--arch", "mlp", "--epochs", "2", "--batch-size", "20", "--lr", "1e38",
        "--out", s(out.path()),
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn attack_normalizes_pixel_units() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let ckpt = trained(data.path(), &work.path().join("m"));
    let out = work.path().join("a");
    ok(&[
        "attack", "--checkpoint", s(&ckpt), "--data-dir", s(data.path()), "--eps", "76.5",
        "--step", "2.55", "--iters", "5", "--restarts", "1", "--examples", "20", "--out", s(&out),
    ]);
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let arlab::Attack::Pgd(c) = report.rows[0].attack else { panic!("expected PGD") };
    assert!((c.epsilon - 0.3).abs() < 1e-12 && (c.step - 0.01).abs() < 1e-12);
    assert_eq!(report.eval.examples, 20);
    assert!(out.join("attack_0.csv").exists());
    assert_eq!(code(&arlab(&["attack", "--checkpoint", s(&ckpt), "--data-dir", s(data.path()), "--eps", "300", "--out", s(&out)])), 1);
}

#[test]
fn spsa_and_suite_from_config_file() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let ckpt = trained(data.path(), &work.path().join("m"));
    let cfg = work.path().join("suite.json");
    std::fs::write(
        &cfg,
        r#"{"examples": 10, "eps": 25.5, "suite": [
            {"iters": 3},
            {"spsa": true, "iters": 2, "samples": 16}
        ]}"#,
    )
    .unwrap();
    let out = work.path().join("a");
    ok(&["attack", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data-dir", s(data.path()), "--out", s(&out)]);
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(matches!(report.rows[1].attack, arlab::Attack::Spsa(c) if c.samples_per_step == 16));
    assert!((report.rows[0].attack.epsilon() - 0.1).abs() < 1e-12);
}

#[test]
fn instruments_are_reproducible_across_workers_and_resolved_configs() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let ckpt = trained(data.path(), &work.path().join("m"));
    let base = ["--checkpoint", s(&ckpt), "--data-dir", s(data.path())];
    let runs: [(&str, &[&str], &str); 3] = [
        ("sweep", &["--examples", "10", "--steps", "0.01,0.1", "--iters", "2,4"], "heatmap.csv"),
        ("surface", &["--eps", "38.25", "--k", "3", "--example", "1"], "surface.csv"),
        ("histogram", &["--restarts", "12", "--iters", "3", "--example", "3"], "histogram.csv"),
    ];
    for (cmd, extra, artifact) in runs {
        let mut outputs = Vec::new();
        for workers in ["1", "4"] {
            let out = work.path().join(format!("{cmd}_{workers}"));
            let mut args = vec![cmd, "--workers", workers];
            args.extend_from_slice(&base);
            args.extend_from_slice(extra);
            args.extend_from_slice(&["--out", s(&out)]);
            ok(&args);
            outputs.push(std::fs::read(out.join(artifact)).unwrap());
        }
        assert_eq!(outputs[0], outputs[1], "{cmd} differs across worker counts");
        let first = work.path().join(format!("{cmd}_1"));
        let again = work.path().join(format!("{cmd}_again"));
        let resolved = first.join(format!("{cmd}_config.json"));
        ok(&[cmd, "--config", s(&resolved), "--out", s(&again)]);
        assert_eq!(std::fs::read(again.join(artifact)).unwrap(), outputs[0], "{cmd} rerun differs");
    }
    let surface = std::fs::read_to_string(work.path().join("surface_1/surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 7 * 7);
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(work.path().join("histogram_1/histogram.json")).unwrap(),
    )
    .unwrap();
    assert!((meta["threshold"].as_f64().unwrap() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn config_for_another_command_rejected() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("c.json");
    std::fs::write(&cfg, r#"{"command": "sweep"}"#).unwrap();
    let r = arlab(&["surface", "--config", s(&cfg), "--data-dir", s(data.path()), "--out", s(work.path())]);
    assert_eq!(code(&r), 1);
    std::fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    let r = arlab(&["surface", "--config", s(&cfg), "--out", s(work.path())]);
    assert_eq!(code(&r), 2);
}
