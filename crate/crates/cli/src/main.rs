//! `rover-sysid`: simulate episodes, meta-train models, evaluate them on
//! held-out soils and sweep the orthogonality weight.
//!
//! Every run writes into `<out>/<subcommand>-<hash>`, where the hash covers
//! the fully resolved configuration, which is echoed as `config.json`. The run
//! directory is printed on stdout. Failures print one line
//! `error[<kind>]: <message>` on stderr and exit nonzero.

mod config;

use clap::{Arg, ArgAction, ArgMatches, Command};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use config::{flatten, parse_value, split_assignment, Layered};
use rover_sysid::harness::{
    config_hash, credible_coverage, run_dir, run_estimate, run_predict, run_sweep, sweep_summary, write_results_csv,
    Experiment, ExperimentSpec, ModelKind, ModelStore, Summary, SweepSpec,
};
use rover_sysid::metatrain::{train, write_history_csv, MetaConfig, ModelCheckpoint, TerrainTaskSampler};
use rover_sysid::roversim::{generate_episode, write_episode_jsonl, InputPolicy, RoverConfig};
use rover_sysid::terramech::TerrainClass;
use rover_sysid::{harness, jsonfmt, Error, Result};

const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    terrain: TerrainClass,
    steps: usize,
    episodes: usize,
    policy: InputPolicy,
    /// Overrides the preset cohesion.
    cohesion_kpa: Option<f64>,
    /// Overrides the preset friction angle.
    friction_deg: Option<f64>,
    /// Relative perturbation of the secondary soil parameters.
    perturbation: f64,
    /// Episode `i` uses seed `seed + i`.
    seed: u64,
    rover: RoverConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            terrain: TerrainClass::LooseSand,
            steps: 100,
            episodes: 1,
            policy: InputPolicy::Sampled,
            cohesion_kpa: None,
            friction_deg: None,
            perturbation: 0.0,
            seed: 0,
            rover: RoverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateConfig {
    spec: ExperimentSpec,
    /// Checkpoint path per learned model name.
    checkpoints: BTreeMap<String, String>,
    /// Model-matched episodes for the credible-interval coverage check; 0 skips it.
    coverage_seeds: usize,
    coverage_context: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { spec: ExperimentSpec::default(), checkpoints: BTreeMap::new(), coverage_seeds: 200, coverage_context: 10 }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Sub {
    Simulate,
    Train,
    Evaluate,
    Sweep,
}

impl Sub {
    const ALL: [Sub; 4] = [Sub::Simulate, Sub::Train, Sub::Evaluate, Sub::Sweep];

    fn name(self) -> &'static str {
        match self {
            Sub::Simulate => "simulate",
            Sub::Train => "train",
            Sub::Evaluate => "evaluate",
            Sub::Sweep => "sweep",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Sub::Simulate => "Generate rover episodes on one soil and write them as JSONL",
            Sub::Train => "Meta-train a feature network and prior; writes model.json and loss.csv",
            Sub::Evaluate => "Score models on held-out soils; writes results.csv and summary.json",
            Sub::Sweep => "Retrain over a grid of orthogonality weights; writes results.csv and summary.json",
        }
    }

    fn defaults(self) -> Value {
        let v = match self {
            Sub::Simulate => serde_json::to_value(SimulateConfig::default()),
            Sub::Train => serde_json::to_value(MetaConfig::default()),
            Sub::Evaluate => serde_json::to_value(EvaluateConfig::default()),
            Sub::Sweep => serde_json::to_value(SweepSpec::default()),
        };
        v.expect("default configs serialize")
    }

    fn open_maps(self) -> &'static [&'static str] {
        match self {
            Sub::Evaluate => &["checkpoints"],
            _ => &[],
        }
    }
}

/// Config keys that get their own flag; `seed` is covered by `--seed`.
fn key_flags(sub: Sub) -> Vec<(String, Value)> {
    flatten(&sub.defaults()).into_iter().filter(|(k, _)| k != "seed").collect()
}

fn subcommand(sub: Sub) -> Command {
    let mut cmd = Command::new(sub.name())
        .about(sub.about())
        .arg(Arg::new("config").long("config").value_name("PATH").help("JSON config file"))
        .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs").help("Root output directory"))
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .value_parser(clap::value_parser!(u64))
                .help(match sub {
                    Sub::Simulate | Sub::Train => "Random seed (config key `seed`)",
                    Sub::Evaluate | Sub::Sweep => "Offset added to every seed list",
                }),
        )
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("Worker threads [default: available cores]"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override a config key; repeatable, applied last"),
        );
    if sub == Sub::Train {
        cmd = cmd.arg(
            Arg::new("model")
                .long("model")
                .value_name("KIND")
                .help("Apply the training preset of a learned model kind (palpaca_plain, palpaca_nominal, palpaca_nominal_orth)"),
        );
    }
    for (key, default) in key_flags(sub) {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help_heading("Config keys (JSON values)")
                .help(format!("[default: {default}]")),
        );
    }
    cmd
}

fn command() -> Command {
    Command::new("rover-sysid")
        .about("Terrain system identification for a planetary rover")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(Sub::ALL.map(subcommand))
}

/// Defaults, then the config file, then key flags, then `--set`.
fn layered_config(sub: Sub, m: &ArgMatches) -> Result<Layered> {
    let mut layered = Layered::new(&sub.defaults(), sub.open_maps())?;
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::Argument(format!("cannot read config file {path}: {e}")))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("config file {path}: {e}")))?;
        layered.merge_file(&doc)?;
    }
    for (key, _) in key_flags(sub) {
        if let Some(text) = m.get_one::<String>(&key) {
            layered.set(&key, parse_value(text))?;
        }
    }
    for item in m.get_many::<String>("set").into_iter().flatten() {
        let (key, text) = split_assignment(item)?;
        layered.set(key, parse_value(text))?;
    }
    Ok(layered)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Creates the run directory and echoes the resolved config into it.
fn prepare_run<T: Serialize>(sub: Sub, m: &ArgMatches, resolved: &T) -> Result<PathBuf> {
    let root = PathBuf::from(m.get_one::<String>("out").expect("has default"));
    let dir = run_dir(&root, sub.name(), &config_hash(resolved)?);
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    write_file(&dir.join("config.json"), format!("{}\n", jsonfmt::to_string(resolved)?).as_bytes())?;
    Ok(dir)
}

fn shift_seeds(seeds: &mut [u64], offset: Option<u64>) {
    if let Some(offset) = offset {
        seeds.iter_mut().for_each(|s| *s = s.wrapping_add(offset));
    }
}

fn simulate(m: &ArgMatches) -> Result<PathBuf> {
    let mut layered = layered_config(Sub::Simulate, m)?;
    if let Some(seed) = m.get_one::<u64>("seed") {
        layered.set("seed", json!(seed))?;
    }
    let cfg: SimulateConfig = layered.resolve()?;
    if cfg.steps == 0 || cfg.episodes == 0 {
        return Err(Error::Argument("steps and episodes must be >= 1".into()));
    }
    let preset = cfg.terrain.preset();
    let mut terrain = harness::perturb_secondary(&preset, cfg.perturbation, cfg.seed)?;
    terrain = terrain.with_strength(
        cfg.cohesion_kpa.unwrap_or(preset.cohesion_kpa()),
        cfg.friction_deg.map_or(preset.friction_angle, f64::to_radians),
    );
    terrain.validate()?;
    let episodes = (0..cfg.episodes as u64)
        .into_par_iter()
        .map(|i| generate_episode(&terrain, cfg.terrain, &cfg.rover, cfg.steps, cfg.policy, cfg.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let dir = prepare_run(Sub::Simulate, m, &cfg)?;
    let mut entries = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let file = format!("episode_{i:03}.jsonl");
        let mut buf = Vec::new();
        write_episode_jsonl(ep, &mut buf)?;
        write_file(&dir.join(&file), &buf)?;
        entries.push(json!({
            "file": file,
            "seed": ep.seed,
            "transitions": ep.len(),
            "clamped_steps": ep.clamped_steps,
            "torque_adjustments": ep.torque_adjustments,
        }));
    }
    let manifest = json!({
        "kind": "manifest",
        "version": MANIFEST_FORMAT_VERSION,
        "config_hash": config_hash(&cfg)?,
        "terrain": terrain,
        "episodes": entries,
    });
    write_file(&dir.join("manifest.json"), format!("{}\n", jsonfmt::to_string(&manifest)?).as_bytes())?;
    Ok(dir)
}

fn train_cmd(m: &ArgMatches) -> Result<PathBuf> {
    let mut layered = layered_config(Sub::Train, m)?;
    if let Some(seed) = m.get_one::<u64>("seed") {
        layered.set("seed", json!(seed))?;
    }
    let mut cfg: MetaConfig = layered.resolve()?;
    if let Some(name) = m.get_one::<String>("model") {
        let kind = ModelKind::from_name(name)?;
        cfg = kind
            .training_config(&cfg)
            .ok_or_else(|| Error::Argument(format!("model `{name}` is not trained")))?;
    }
    cfg.validate()?;
    let dir = prepare_run(Sub::Train, m, &cfg)?;
    let write_log = |history| -> Result<()> {
        let mut buf = Vec::new();
        write_history_csv(history, &mut buf)?;
        write_file(&dir.join("loss.csv"), &buf)
    };
    match train(&cfg, &TerrainTaskSampler::new(&cfg)) {
        Ok(state) => {
            write_log(&state.history)?;
            let ck = ModelCheckpoint::from_state(&state)?;
            write_file(&dir.join("model.json"), format!("{}\n", ck.to_json()?).as_bytes())?;
            Ok(dir)
        }
        Err(Error::Divergence { iteration, history }) => {
            write_log(&history)?;
            Err(Error::Divergence { iteration, history })
        }
        Err(e) => Err(e),
    }
}

fn load_store(cfg: &EvaluateConfig) -> Result<ModelStore> {
    let mut store = ModelStore::default();
    for &kind in &cfg.spec.models {
        if !kind.is_bayesian() {
            continue;
        }
        let path = cfg.checkpoints.get(kind.name()).ok_or_else(|| Error::MissingCheckpoint(kind.name().into()))?;
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingCheckpoint(format!("{} ({path}: {e})", kind.name())))?;
        store.insert(kind, ModelCheckpoint::from_json(&text)?.restore()?)?;
    }
    Ok(store)
}

fn write_outputs(dir: &Path, rows: &[harness::ResultRow], summary: &Summary) -> Result<()> {
    let mut buf = Vec::new();
    write_results_csv(rows, &mut buf)?;
    write_file(&dir.join("results.csv"), &buf)?;
    write_file(&dir.join("summary.json"), format!("{}\n", summary.to_json()?).as_bytes())
}

fn evaluate(m: &ArgMatches) -> Result<PathBuf> {
    let mut cfg: EvaluateConfig = layered_config(Sub::Evaluate, m)?.resolve()?;
    shift_seeds(&mut cfg.spec.seeds, m.get_one::<u64>("seed").copied());
    cfg.spec.validate()?;
    let store = load_store(&cfg)?;
    let rows = match cfg.spec.experiment {
        Experiment::Predict => run_predict(&cfg.spec, &store)?,
        Experiment::Estimate => run_estimate(&cfg.spec, &store)?,
        Experiment::Sweep => return Err(Error::Argument("use the sweep subcommand for sweeps".into())),
    };
    let mut summary = Summary::new(&config_hash(&cfg)?, &rows);
    if cfg.coverage_seeds > 0 {
        for &kind in &cfg.spec.models {
            if let Ok(model) = store.get(kind) {
                if model.n_nom() > 0 {
                    let report = credible_coverage(model, &cfg.spec, cfg.coverage_seeds, cfg.coverage_context)?;
                    summary.coverage.insert(kind.name().into(), report);
                }
            }
        }
    }
    let dir = prepare_run(Sub::Evaluate, m, &cfg)?;
    write_outputs(&dir, &rows, &summary)?;
    Ok(dir)
}

fn sweep(m: &ArgMatches) -> Result<PathBuf> {
    let mut spec: SweepSpec = layered_config(Sub::Sweep, m)?.resolve()?;
    let offset = m.get_one::<u64>("seed").copied();
    shift_seeds(&mut spec.eval.seeds, offset);
    shift_seeds(&mut spec.train_seeds, offset);
    let rows = run_sweep(&spec, &spec.lambda_grid)?;
    let mut summary = Summary::new(&config_hash(&spec)?, &rows);
    summary.sweep = Some(sweep_summary(&rows)?);
    let dir = prepare_run(Sub::Sweep, m, &spec)?;
    write_outputs(&dir, &rows, &summary)?;
    Ok(dir)
}

fn run(name: &str, m: &ArgMatches) -> Result<PathBuf> {
    if let Some(&jobs) = m.get_one::<usize>("jobs") {
        if jobs == 0 {
            return Err(Error::Argument("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?;
    }
    match name {
        "simulate" => simulate(m),
        "train" => train_cmd(m),
        "evaluate" => evaluate(m),
        "sweep" => sweep(m),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(if matches!(e, Error::Argument(_)) { 2 } else { 1 })
        }
    }
}
