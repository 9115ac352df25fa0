// Named to sort ahead of the acceptance suite: cargo stops at the first failing
// test binary, and these should run even when a criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rover_sysid::harness::read_results_csv;
use rover_sysid::metatrain::{ModelCheckpoint, MetaConfig};
use rover_sysid::roversim::read_episode_jsonl;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rover-sysid"))
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("spawn binary")
}

/// Runs and returns the printed run directory.
fn run_ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn stderr_line(o: &Output) -> String {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "stderr must be one line: {text:?}");
    text.trim().to_string()
}

#[test]
fn simulate_one_transition_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["simulate", "--terrain", "loose_sand", "--steps", "1", "--seed", "7"];
    let da = run_ok(a.path(), &args);
    let db = run_ok(b.path(), &args);
    let ep = read_episode_jsonl(fs::File::open(da.join("episode_000.jsonl")).map(std::io::BufReader::new).unwrap()).unwrap();
    assert_eq!(ep.len(), 1);
    assert_eq!(ep.seed, 7);
    for f in ["episode_000.jsonl", "manifest.json", "config.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_compact_sand_hundred_steps_in_range() {
    let out = tempfile::tempdir().unwrap();
    let dir = run_ok(out.path(), &["simulate", "--terrain", "compact_sand", "--steps", "100", "--policy", "consistency"]);
    let ep = read_episode_jsonl(std::io::BufReader::new(fs::File::open(dir.join("episode_000.jsonl")).unwrap())).unwrap();
    assert_eq!(ep.len(), 100);
    for tr in &ep.transitions {
        assert!(tr.state.v.is_finite() && tr.next.v.is_finite() && tr.next.x >= tr.state.x - 1e-12);
        for w in 0..3 {
            assert!((0.0..=1.0).contains(&tr.input.slip[w]));
            assert!(tr.input.sinkage[w] >= 0.0 && tr.input.sinkage[w] < ep.config.geom.r);
            assert!(tr.input.torque[w].is_finite());
        }
    }
}

#[test]
fn simulate_rejects_unknown_preset() {
    let out = tempfile::tempdir().unwrap();
    let o = run(out.path(), &["simulate", "--terrain", "gravel"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[argument]"));
}

#[test]
fn train_zero_iterations_writes_untrained_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let dir = run_ok(out.path(), &["train", "--iterations", "0", "--hidden", "[8,8]", "--n_net", "3", "--seed", "4"]);
    let ck = ModelCheckpoint::from_json(&fs::read_to_string(dir.join("model.json")).unwrap()).unwrap();
    assert_eq!(ck.iterations_run, 0);
    let cfg = MetaConfig { iterations: 0, hidden: [8, 8], n_net: 3, seed: 4, ..Default::default() };
    assert_eq!(ck.config, cfg);
    let untrained = rover_sysid::metatrain::MetaModel::init(&cfg).unwrap();
    assert_eq!(ck.restore().unwrap(), untrained);
    assert_eq!(fs::read_to_string(dir.join("loss.csv")).unwrap().lines().count(), 1);
    let echoed: MetaConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn config_precedence_is_flag_over_file_over_default() {
    let out = tempfile::tempdir().unwrap();
    let file = out.path().join("cfg.json");
    fs::write(&file, r#"{"iterations": 0, "n_net": 2, "learning_rate": 0.5}"#).unwrap();
    let f = file.to_str().unwrap();
    let dir = run_ok(out.path(), &["train", "--config", f, "--n_net", "5", "--set", "hidden=[4,4]"]);
    let echoed: MetaConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!((echoed.n_net, echoed.learning_rate, echoed.hidden), (5, 0.5, [4, 4]));
    assert_eq!(echoed.tasks_per_batch, MetaConfig::default().tasks_per_batch);
    let o = run(out.path(), &["train", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("no_such_key"));
}

#[test]
fn train_model_preset_applies_nominal_switch() {
    let out = tempfile::tempdir().unwrap();
    let dir = run_ok(out.path(), &["train", "--iterations", "0", "--model", "palpaca_plain", "--n_net", "2", "--hidden", "[4,4]"]);
    let echoed: MetaConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert!(!echoed.use_nominal);
    assert_eq!(echoed.lambda_orth, 0.0);
    let o = run(out.path(), &["train", "--model", "linear"]);
    assert!(!o.status.success());
    stderr_line(&o);
}

#[test]
fn linear_only_evaluate_needs_no_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let dir = run_ok(out.path(), &["evaluate", "--spec.models", r#"["linear"]"#, "--spec.seeds", "[0,1]", "--spec.episode_length", "10"]);
    let rows = read_results_csv(fs::File::open(dir.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 10);
    assert!(rows.iter().all(|r| r.model == "linear" && r.metric == "velocity_rel_error"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["kind"], "summary");
}

#[test]
fn empty_model_set_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let o = run(out.path(), &["evaluate", "--spec.models", "[]"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error[argument]"));
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn missing_checkpoint_names_the_model() {
    let out = tempfile::tempdir().unwrap();
    let o = run(out.path(), &["evaluate", "--spec.models", r#"["linear","palpaca_nominal"]"#]);
    assert!(!o.status.success());
    let line = stderr_line(&o);
    assert!(line.starts_with("error[missing_checkpoint]") && line.contains("palpaca_nominal"), "{line}");
}

#[test]
fn evaluate_loads_a_trained_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let model = run_ok(out.path(), &["train", "--iterations", "2", "--hidden", "[8,8]", "--n_net", "2", "--tasks_per_batch", "2"]);
    let ck = model.join("model.json");
    let dir = run_ok(
        out.path(),
        &[
            "evaluate",
            "--spec.models",
            r#"["palpaca_nominal"]"#,
            "--spec.seeds",
            "[3]",
            "--spec.episode_length",
            "12",
            "--coverage_seeds",
            "4",
            "--set",
            &format!("checkpoints.palpaca_nominal={}", ck.display()),
        ],
    );
    let rows = read_results_csv(fs::File::open(dir.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 12);
    assert!(rows.iter().all(|r| r.ci_halfwidth.is_some()));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["coverage"]["palpaca_nominal"]["intervals"], 8);
    // A plain checkpoint cannot stand in for the nominal model.
    let plain = run_ok(out.path(), &["train", "--iterations", "0", "--model", "palpaca_plain", "--hidden", "[8,8]", "--n_net", "2"]);
    let o = run(
        out.path(),
        &[
            "evaluate",
            "--spec.models",
            r#"["palpaca_nominal"]"#,
            "--set",
            &format!("checkpoints.palpaca_nominal={}", plain.join("model.json").display()),
        ],
    );
    assert!(!o.status.success());
    stderr_line(&o);
}

#[test]
fn help_lists_every_config_key_with_default() {
    for (sub, keys) in [
        ("simulate", &["--terrain", "--steps", "--policy", "--rover.geom.r", "--perturbation"][..]),
        ("train", &["--iterations", "--lambda_orth", "--prior_std_net", "--rover.mass", "--noise_var"][..]),
        ("evaluate", &["--spec.models", "--spec.seeds", "--checkpoints", "--coverage_seeds"][..]),
        ("sweep", &["--lambda_grid", "--train_seeds", "--training.iterations", "--eval.terrains"][..]),
    ] {
        let o = bin().args([sub, "--help"]).output().unwrap();
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        for common in ["--config", "--out", "--seed", "--jobs", "--set"] {
            assert!(text.contains(common), "{sub} lacks {common}");
        }
        for key in keys {
            let line = text.lines().position(|l| l.trim_start().starts_with(&format!("{key} "))).unwrap_or_else(|| panic!("{sub} lacks {key}"));
            let rest: String = text.lines().skip(line).take(2).collect();
            assert!(rest.contains("[default: "), "{sub} {key}");
        }
    }
}

#[test]
fn single_lambda_sweep_writes_one_row_set() {
    let out = tempfile::tempdir().unwrap();
    let dir = run_ok(
        out.path(),
        &[
            "sweep",
            "--lambda_grid",
            "[0.1]",
            "--train_seeds",
            "[0]",
            "--training.iterations",
            "2",
            "--training.hidden",
            "[8,8]",
            "--training.n_net",
            "2",
            "--eval.seeds",
            "[0]",
            "--eval.episode_length",
            "10",
        ],
    );
    let rows = read_results_csv(fs::File::open(dir.join("results.csv")).unwrap()).unwrap();
    let mut metrics: Vec<(String, String)> = rows.iter().map(|r| (r.terrain.clone(), r.metric.clone())).collect();
    metrics.sort();
    assert_eq!(rows.len(), 5, "{metrics:?}");
    assert!(rows.iter().all(|r| r.model == rover_sysid::harness::sweep_model_label(0.1)));
}
