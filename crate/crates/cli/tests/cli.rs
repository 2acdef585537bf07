use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use primek::config::RunConfig;
use primek::spectral::{snr_db, wav_read, wav_write};
use primek::tensor::Tensor;
use primek::trainer::{si_snr, Split, CHECKPOINT_FILE, LOSS_LOG_FILE};

fn primek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primek"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny() -> String {
    configs().join("tiny.cfg").to_string_lossy().into_owned()
}

#[test]
fn analyze_default_reports_dense_ratio_and_hash() {
    let out = primek(&["analyze", "--analytic-only"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains(&format!("config hash {}", RunConfig::full().hash())));
    assert!(text.contains("ddb weights 368640, dsddb weights 46720, dsddb/ddb = 12.67%"), "{text}");
}

#[test]
fn shipped_default_config_is_the_builtin_one() {
    let file = configs().join("default.cfg");
    assert_eq!(RunConfig::load(&file).unwrap(), RunConfig::full());
    assert_eq!(RunConfig::load(&configs().join("tiny.cfg")).unwrap(), RunConfig::tiny());
}

#[test]
fn analyze_single_layer_dense_counts() {
    let out = primek(&["analyze", "--analytic-only", "--set", "model.channels=8", "--set", "dense.depth=1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("ddb weights 576, dsddb weights 136"), "{}", stdout(&out));
}

#[test]
fn analyze_json_is_machine_readable() {
    let out = primek(&["analyze", "--config", &tiny(), "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["config_hash"], RunConfig::tiny().hash());
    let report = &v["report"];
    assert_eq!(report["total_analytic_macs"], report["total_measured_macs"]);
    // Two layers at C = 8, K = 3: (8·9 + 8·8) + (16·9 + 16·8).
    assert_eq!(report["dense_comparison"]["dsddb_params"], 408);
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 1\ntrain.lr = fast\n").unwrap();
    let out = primek(&["analyze", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let out = primek(&["analyze", "--set", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = primek(&["analyze", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let out = primek(&["enhance", "--checkpoint", "/nonexistent/model.pkck", "in.wav", "out.wav"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/nonexistent/model.pkck"));
    let out = primek(&["analyze", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = primek(&["gradcheck", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0), "{}{}", stdout(&a), stderr(&a));
    assert!(stdout(&a).contains("overall PASS"));
    let b = primek(&["gradcheck", "--seed", "5"]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn injected_fault_exits_4() {
    let out = primek(&["gradcheck", "--draws", "2", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn bench_memory_slopes() {
    let out = primek(&["bench-memory", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let g = v["report"]["gpfca_slope"].as_f64().unwrap();
    let a = v["report"]["attention_slope"].as_f64().unwrap();
    assert!((g - 1.0).abs() <= 0.1 && (a - 2.0).abs() <= 0.2, "{g} {a}");

    let out = primek(&["bench-memory", "--lengths", "120"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("120") && !text.contains("slope"), "{text}");
}

#[test]
fn identity_enhance_reconstructs_input() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.wav"), dir.path().join("out.wav"));
    let n = 12_345;
    let wave: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.05).sin() + 0.1 * (i as f64 * 0.31).cos()).collect();
    wav_write(&input, &Tensor::new(&[1, n], wave).unwrap(), 16_000).unwrap();
    let out = primek(&["enhance", "--identity", input.to_str().unwrap(), output.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (a, _) = wav_read(&input).unwrap();
    let (b, rate) = wav_read(&output).unwrap();
    assert_eq!((b.numel(), rate), (n, 16_000));
    assert!(snr_db(a.data(), b.data()) > 60.0);
}

#[test]
fn train_then_enhance_improves_heldout_audio() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = primek(&["train", "--config", &tiny(), "--set", "train.steps=500", "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("held-out si-snr"));
    assert_eq!(std::fs::read_to_string(run.join(LOSS_LOG_FILE)).unwrap().lines().count(), 500);
    let mut cfg = RunConfig::tiny();
    cfg.train.steps = 500;
    assert_eq!(RunConfig::load(&run.join("config.cfg")).unwrap(), cfg);

    let checkpoint = run.join(CHECKPOINT_FILE);
    let mut gains = Vec::new();
    for i in 0..4 {
        let ex = cfg.task.example(Split::Heldout, i);
        let n = ex.clean.len();
        let (noisy_path, enhanced_path) = (dir.path().join(format!("noisy{i}.wav")), dir.path().join(format!("enh{i}.wav")));
        wav_write(&noisy_path, &Tensor::new(&[1, n], ex.noisy).unwrap(), 16_000).unwrap();
        let out = primek(&[
            "enhance",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            noisy_path.to_str().unwrap(),
            enhanced_path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let clean = Tensor::new(&[1, n], ex.clean).unwrap();
        let (noisy, _) = wav_read(&noisy_path).unwrap();
        let (enhanced, _) = wav_read(&enhanced_path).unwrap();
        gains.push(si_snr(&enhanced, &clean).unwrap() - si_snr(&noisy, &clean).unwrap());
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(mean >= 5.0, "gains {gains:?}");
}

#[test]
fn selftest_passes() {
    let out = primek(&["selftest", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["report"]["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}
