use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cps(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cps"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch cps")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sample_count(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    text.split("\n\n").filter(|block| !block.trim().is_empty()).count()
}

const SMALL_RUN: &str = r#"
seed = 3
[data]
count = 40
horizon = 16
[denoiser.training]
iterations = 150
learning_rate = 1e-3
hidden_width = 32
hidden_layers = 2
embedding_dim = 8
log_every = 10
[schedule]
steps = 50
[sampler]
count = 4
[constraints]
features = ["mean", "value@1", "value@last", "argmax"]
"#;

/// Generate data and train a small model in `dir`; returns the config path.
fn small_pipeline(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    for cmd in ["gen-data", "train"] {
        let out = cps(dir, &["--config", &cfg, cmd]);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
    }
    cfg
}

#[test]
fn gen_data_default_and_scaled_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("nested/out");
    let out = cps(&dir, &["gen-data", "--count", "100"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(sample_count(&dir.join("train.csv")), 80);
    assert_eq!(sample_count(&dir.join("val.csv")), 10);
    assert_eq!(sample_count(&dir.join("test.csv")), 10);

    let full = tmp.path().join("full");
    assert_eq!(code(&cps(&full, &["gen-data"])), 0);
    assert_eq!(sample_count(&full.join("train.csv")), 13320);
    assert_eq!(sample_count(&full.join("val.csv")), 1665);
    assert_eq!(sample_count(&full.join("test.csv")), 1665);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    assert_eq!(code(&cps(&a, &["--seed", "9", "gen-data", "--count", "30"])), 0);
    let resolved = a.join("config.resolved.toml");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 9"));
    assert!(text.contains("count = 30"));

    let b = tmp.path().join("b");
    let out = cps(&b, &["--config", resolved.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(a.join("train.csv")).unwrap(), fs::read(b.join("train.csv")).unwrap());
    assert_eq!(text, fs::read_to_string(b.join("config.resolved.toml")).unwrap().replace(
        &b.display().to_string(),
        &a.display().to_string()
    ));
}

#[test]
fn unknown_config_keys_exit_with_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[sampler]\nmethd = \"cps\"\n").unwrap();
    let out = cps(tmp.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("methd"), "{}", stderr(&out));
}

#[test]
fn train_sample_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_pipeline(dir);

    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    let smoothed: Vec<f64> = loss.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(smoothed.last().unwrap() < smoothed.first().unwrap());

    let out = cps(dir, &["--config", &cfg, "sample"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["count"], 4);
    assert_eq!(report["violation_rate"], 0.0);
    let first = fs::read(dir.join("samples.csv")).unwrap();
    assert_eq!(sample_count(&dir.join("samples.csv")), 4);
    assert_eq!(sample_count(&dir.join("references.csv")), 4);

    // same seed, same samples
    assert_eq!(code(&cps(dir, &["--config", &cfg, "sample"])), 0);
    assert_eq!(first, fs::read(dir.join("samples.csv")).unwrap());

    let out = cps(dir, &["--config", &cfg, "eval"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["samples"], 4);
    assert_eq!(metrics["violation_rate_per_reference"], 0.0);
    let rows = fs::read_to_string(dir.join("pair_metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);

    // a sample scored against itself
    let refs = dir.join("references.csv");
    let out = cps(
        dir,
        &["--config", &cfg, "eval", "--generated", refs.to_str().unwrap(), "--references", refs.to_str().unwrap()],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["dtw_mean"], 0.0);
    assert_eq!(metrics["ssim_mean"], 1.0);

    for method in ["ddim", "guided", "cop"] {
        let out = cps(dir, &["--config", &cfg, "sample", "--method", method, "--guidance-weight", "0.01"]);
        assert_eq!(code(&out), 0, "{method}: {}", stderr(&out));
    }
}

#[test]
fn cps_without_constraints_points_to_ddim() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_pipeline(dir);
    let out = cps(dir, &["--config", &cfg, "sample", "--features", ""]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ddim"), "{}", stderr(&out));
    let out = cps(dir, &["--config", &cfg, "sample", "--features", "", "--method", "ddim"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn resume_and_corrupt_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_pipeline(dir);
    let out = cps(dir, &["--config", &cfg, "train", "--resume", "--iterations", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert!(loss.lines().nth(1).unwrap().starts_with("150,"), "{loss}");

    fs::write(dir.join("model.json"), "{\"format\": \"something else\"}").unwrap();
    let out = cps(dir, &["--config", &cfg, "sample"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn divergence_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&cps(dir, &["gen-data", "--count", "20", "--horizon", "8"])), 0);
    let out = cps(dir, &["train", "--learning-rate", "1e300", "--iterations", "5"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn verify_exit_codes_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = cps(dir, &["verify", "--instances", "5", "--steps", "300"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("theorem_report.csv")).unwrap();
    assert!(csv.starts_with("id,n,m,k,T,measured,bound,margin\n"));
    assert_eq!(csv.lines().count(), 1 + 5 * 3);

    // k must exceed 1
    assert_eq!(code(&cps(dir, &["verify", "--k", "1"])), 1);
    // a single step leaves no room for the bound
    assert_eq!(code(&cps(dir, &["verify", "--instances", "3", "--steps", "1"])), 3);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cps(tmp.path(), &["sample", "--method", "langevin"])), 1);
    assert_eq!(code(&cps(tmp.path(), &["no-such-command"])), 1);
}

#[test]
fn help_lists_config_keys() {
    let out = Command::new(env!("CARGO_BIN_EXE_cps")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["[sampler.projection]", "guidance_weight", "cop_seed", "gamma_clip", "norm_checks", "explicit"] {
        assert!(text.contains(key), "missing {key}");
    }
}
