//! Desk-scale experiments: velocity prediction, terrain-parameter estimation
//! and the orthogonality-weight sweep.
//!
//! Every experiment runs on held-out soils: cohesion and friction angle come
//! from the reserved test bands and the secondary parameters of the true soil
//! are perturbed, while every model keeps using the unperturbed presets.
//! Results are flat rows keyed by (experiment, model, terrain, seed, t,
//! metric), written as CSV next to a JSON summary.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bayes::GaussianBelief;
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::metatrain::{
    feature_cross_correlation, train, MetaConfig, MetaModel, TaskData, TerrainTaskSampler, TEST_COHESION_KPA,
    TEST_FRICTION_DEG,
};
use crate::nominal::{
    iagnemma_estimate, linear_ls_estimate, nominal_dynamics_features, wheel_measurements, TerrainEstimate,
};
use crate::roversim::{generate_episode, step, Episode, InputPolicy, RoverConfig, Transition};
use crate::terramech::{TerrainClass, TerrainParams};

/// Velocity floor of the relative prediction error, m/s.
pub const EPS_V: f64 = 0.01;
/// Two-sided 95% standard-normal quantile.
pub const CREDIBLE_Z: f64 = 1.959_963_984_540_054;
pub const RESULTS_HEADER: [&str; 8] = ["experiment", "model", "terrain", "seed", "t", "metric", "value", "ci_halfwidth"];
pub const SUMMARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Nominal model with least-squares strength parameters.
    Linear,
    /// P-ALPaCA with learned features only.
    PalpacaPlain,
    /// P-ALPaCA with nominal and learned features, no orthogonality weight.
    PalpacaNominal,
    /// P-ALPaCA with nominal and learned features and orthogonality weight.
    PalpacaNominalOrth,
    /// Force-based least-squares estimator driving the nominal model.
    Iagnemma,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Linear,
        ModelKind::PalpacaPlain,
        ModelKind::PalpacaNominal,
        ModelKind::PalpacaNominalOrth,
        ModelKind::Iagnemma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::PalpacaPlain => "palpaca_plain",
            ModelKind::PalpacaNominal => "palpaca_nominal",
            ModelKind::PalpacaNominalOrth => "palpaca_nominal_orth",
            ModelKind::Iagnemma => "iagnemma",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Argument(format!("unknown model `{name}`")))
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, ModelKind::PalpacaPlain | ModelKind::PalpacaNominal | ModelKind::PalpacaNominalOrth)
    }

    /// Whether the model produces strength-parameter estimates.
    pub fn estimates_parameters(self) -> bool {
        self != ModelKind::PalpacaPlain
    }

    /// Training configuration of a learned model, derived from `base`.
    /// The orthogonality weight of `base` is kept only for the regularised kind.
    pub fn training_config(self, base: &MetaConfig) -> Option<MetaConfig> {
        let (use_nominal, lambda_orth) = match self {
            ModelKind::Linear | ModelKind::Iagnemma => return None,
            ModelKind::PalpacaPlain => (false, 0.0),
            ModelKind::PalpacaNominal => (true, 0.0),
            ModelKind::PalpacaNominalOrth => (true, base.lambda_orth),
        };
        Some(MetaConfig { use_nominal, lambda_orth, ..base.clone() })
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Predict,
    Estimate,
    Sweep,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Predict => "predict",
            Experiment::Estimate => "estimate",
            Experiment::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub terrains: Vec<TerrainClass>,
    /// Half-width of the uniform relative perturbation of the true secondary parameters.
    pub perturbation: f64,
    pub episode_length: usize,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub policy: InputPolicy,
    /// `(c_kpa, tan_phi)` used by the point estimators until they have enough data.
    pub fallback_estimate: [f64; 2],
    pub rover: RoverConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            experiment: Experiment::Predict,
            terrains: TerrainClass::ALL.to_vec(),
            perturbation: 0.05,
            episode_length: 100,
            models: ModelKind::ALL.to_vec(),
            seeds: (0..10).collect(),
            policy: InputPolicy::Consistency,
            fallback_estimate: [2.5, 0.7],
            rover: RoverConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.perturbation.is_finite() && (0.0..1.0).contains(&self.perturbation)) {
            return Err(Error::Argument(format!("perturbation must lie in [0, 1), got {}", self.perturbation)));
        }
        if self.models.is_empty() {
            return Err(Error::Argument("empty model set".into()));
        }
        if self.terrains.is_empty() || self.seeds.is_empty() {
            return Err(Error::Argument("need at least one terrain and one seed".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Argument("episode_length must be >= 1".into()));
        }
        self.rover.validate()
    }
}

/// One result value with its full key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub terrain: String,
    pub seed: u64,
    pub t: usize,
    pub metric: String,
    pub value: f64,
    /// 95% credible half-width; Bayesian models only.
    pub ci_halfwidth: Option<f64>,
}

/// Multiplies each secondary parameter by `1 + u`, `u ~ U(-fraction, fraction)`.
pub fn perturb_secondary(params: &TerrainParams, fraction: f64, seed: u64) -> Result<TerrainParams> {
    if !(fraction.is_finite() && (0.0..1.0).contains(&fraction)) {
        return Err(Error::Argument(format!("perturbation fraction must lie in [0, 1), got {fraction}")));
    }
    if fraction == 0.0 {
        return Ok(*params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = || 1.0 + rng.random_range(-fraction..=fraction);
    let mut p = *params;
    p.n *= scale();
    p.k_c *= scale();
    p.k_phi *= scale();
    p.k *= scale();
    p.c1 *= scale();
    p.c2 *= scale();
    Ok(p)
}

/// A held-out soil: the true parameters and the presets the models assume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestTerrain {
    pub class: TerrainClass,
    pub truth: TerrainParams,
    pub nominal: TerrainParams,
    pub episode_seed: u64,
}

/// Held-out soil of `class` for `seed`; strengths are uniform over the test bands.
pub fn test_terrain(class: TerrainClass, seed: u64, perturbation: f64) -> Result<TestTerrain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + class as u64);
    let cohesion = rng.random_range(TEST_COHESION_KPA.0..=TEST_COHESION_KPA.1);
    let phi = rng.random_range(TEST_FRICTION_DEG.0..=TEST_FRICTION_DEG.1).to_radians();
    let perturb_seed = rng.random();
    let episode_seed = rng.random();
    let nominal = class.preset();
    let truth = perturb_secondary(&nominal, perturbation, perturb_seed)?.with_strength(cohesion, phi);
    Ok(TestTerrain { class, truth, nominal, episode_seed })
}

pub fn test_episode(spec: &ExperimentSpec, class: TerrainClass, seed: u64) -> Result<(TestTerrain, Episode)> {
    let terrain = test_terrain(class, seed, spec.perturbation)?;
    let episode =
        generate_episode(&terrain.truth, class, &spec.rover, spec.episode_length, spec.policy, terrain.episode_seed)?;
    Ok((terrain, episode))
}

/// Relative velocity prediction error with the [`EPS_V`] floor.
pub fn relative_velocity_error(predicted: f64, truth: f64) -> f64 {
    (predicted - truth).abs() / truth.abs().max(EPS_V)
}

/// Mean relative error of `(c, tan(phi))`.
pub fn parameter_error(estimate: &TerrainEstimate, truth: &TerrainParams) -> f64 {
    let c = truth.cohesion_kpa();
    let t = truth.tan_phi();
    0.5 * ((estimate.cohesion_kpa - c).abs() / c + (estimate.tan_phi - t).abs() / t)
}

/// 95% credible half-widths of `(c, tan(phi))`, if the estimate carries a covariance.
pub fn credible_halfwidths(estimate: &TerrainEstimate) -> Option<[f64; 2]> {
    estimate.covariance.map(|c| [CREDIBLE_Z * c[(0, 0)].max(0.0).sqrt(), CREDIBLE_Z * c[(1, 1)].max(0.0).sqrt()])
}

/// A model that predicts the next velocity from the transitions seen so far.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Linear,
    Iagnemma,
    Bayesian(&'a MetaModel),
    /// The noiseless simulator on the true soil; a reference for the metrics.
    GroundTruth(TerrainParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub v_true: f64,
    pub v_pred: f64,
    /// Predictive standard deviation of the velocity.
    pub v_std: Option<f64>,
    /// Strength estimate from transitions `0..t`.
    pub estimate: Option<TerrainEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    /// Estimate after conditioning on the whole episode.
    pub final_estimate: Option<TerrainEstimate>,
}

fn point_estimate(
    result: Result<TerrainEstimate>,
    fallback: [f64; 2],
) -> Result<TerrainEstimate> {
    match result {
        Err(Error::RankDeficient { .. }) => {
            Ok(TerrainEstimate { cohesion_kpa: fallback[0], tan_phi: fallback[1], covariance: None })
        }
        other => other,
    }
}

fn estimate_from(
    predictor: &Predictor,
    history: &[Transition],
    config: &RoverConfig,
    nominal: &TerrainParams,
    belief: Option<&GaussianBelief>,
    fallback: [f64; 2],
) -> Result<Option<TerrainEstimate>> {
    Ok(match predictor {
        Predictor::Linear => Some(point_estimate(linear_ls_estimate(history, config, nominal), fallback)?),
        Predictor::Iagnemma => {
            let samples: Vec<_> = history.iter().flat_map(|tr| wheel_measurements(tr, config)).collect();
            Some(point_estimate(iagnemma_estimate(&samples, &config.geom, nominal), fallback)?)
        }
        Predictor::Bayesian(model) => match belief {
            Some(b) if model.n_nom() > 0 => {
                let (mean, cov) = b.nominal_marginal()?;
                Some(TerrainEstimate { cohesion_kpa: mean[0], tan_phi: mean[1], covariance: Some(cov) })
            }
            _ => None,
        },
        Predictor::GroundTruth(truth) => {
            Some(TerrainEstimate { cohesion_kpa: truth.cohesion_kpa(), tan_phi: truth.tan_phi(), covariance: None })
        }
    })
}

/// Walks through `episode`, predicting each next velocity from the
/// transitions before it. `nominal` holds the secondary parameters the models
/// assume.
pub fn rollout(
    predictor: &Predictor,
    episode: &Episode,
    nominal: &TerrainParams,
    fallback: [f64; 2],
) -> Result<Rollout> {
    let config = &episode.config;
    let mut belief = match predictor {
        Predictor::Bayesian(model) => Some(model.prior_belief()?),
        _ => None,
    };
    let mut steps = Vec::with_capacity(episode.len());
    for (t, tr) in episode.transitions.iter().enumerate() {
        let history = &episode.transitions[..t];
        let estimate = estimate_from(predictor, history, config, nominal, belief.as_ref(), fallback)?;
        let (v_pred, v_std) = match predictor {
            Predictor::Linear | Predictor::Iagnemma => {
                let e = estimate.expect("point estimators always estimate");
                let f = nominal_dynamics_features(&tr.state, &tr.input, config, nominal)?;
                (f.predict(e.cohesion_kpa, e.tan_phi)[1], None)
            }
            Predictor::Bayesian(model) => {
                let b = belief.as_mut().expect("belief exists for Bayesian models");
                let (phi, offset) = model.features(&tr.state, &tr.input, nominal)?;
                let pred = b.predict(&phi, &offset, &model.noise)?;
                let out = (pred.mean[1], Some(pred.covariance[(1, 1)].max(0.0).sqrt()));
                let x = DVector::from_vec(vec![tr.next.x, tr.next.v]);
                b.update(&phi, &x, &offset, &model.noise)?;
                out
            }
            Predictor::GroundTruth(truth) => (step::<ChaCha8Rng>(&tr.state, &tr.input, truth, config, None)?.v, None),
        };
        steps.push(StepRecord { t, v_true: tr.next.v, v_pred, v_std, estimate });
    }
    let final_estimate =
        estimate_from(predictor, &episode.transitions, config, nominal, belief.as_ref(), fallback)?;
    Ok(Rollout { steps, final_estimate })
}

/// Trained models by kind.
#[derive(Debug, Clone, Default)]
pub struct ModelStore {
    models: BTreeMap<ModelKind, MetaModel>,
}

impl ModelStore {
    pub fn insert(&mut self, kind: ModelKind, model: MetaModel) -> Result<()> {
        if !kind.is_bayesian() {
            return Err(Error::Argument(format!("model `{kind}` takes no checkpoint")));
        }
        if (model.n_nom() > 0) != (kind != ModelKind::PalpacaPlain) {
            return Err(Error::Argument(format!("checkpoint does not match the feature layout of `{kind}`")));
        }
        self.models.insert(kind, model);
        Ok(())
    }

    pub fn get(&self, kind: ModelKind) -> Result<&MetaModel> {
        self.models.get(&kind).ok_or_else(|| Error::MissingCheckpoint(kind.name().into()))
    }

    pub fn predictor(&self, kind: ModelKind) -> Result<Predictor<'_>> {
        Ok(match kind {
            ModelKind::Linear => Predictor::Linear,
            ModelKind::Iagnemma => Predictor::Iagnemma,
            _ => Predictor::Bayesian(self.get(kind)?),
        })
    }
}

fn row(
    experiment: Experiment,
    model: &str,
    terrain: &str,
    seed: u64,
    t: usize,
    metric: &str,
    value: f64,
    ci: Option<f64>,
) -> ResultRow {
    ResultRow {
        experiment: experiment.name().into(),
        model: model.into(),
        terrain: terrain.into(),
        seed,
        t,
        metric: metric.into(),
        value,
        ci_halfwidth: ci,
    }
}

/// Generates the test episodes of `spec`, one per (terrain, seed).
fn episodes(spec: &ExperimentSpec) -> Result<Vec<(TestTerrain, u64, Episode)>> {
    let cells: Vec<(TerrainClass, u64)> =
        spec.terrains.iter().flat_map(|&c| spec.seeds.iter().map(move |&s| (c, s))).collect();
    cells
        .par_iter()
        .map(|&(class, seed)| test_episode(spec, class, seed).map(|(t, e)| (t, seed, e)))
        .collect()
}

/// Runs every model of `spec` over the test episodes and maps each rollout to rows.
fn run_models<F>(spec: &ExperimentSpec, store: &ModelStore, models: &[ModelKind], to_rows: F) -> Result<Vec<ResultRow>>
where
    F: Fn(ModelKind, &TestTerrain, u64, &Rollout) -> Vec<ResultRow> + Sync,
{
    spec.validate()?;
    let predictors: Vec<(ModelKind, Predictor)> =
        models.iter().map(|&k| store.predictor(k).map(|p| (k, p))).collect::<Result<_>>()?;
    let eps = episodes(spec)?;
    let cells: Vec<(usize, usize)> =
        (0..eps.len()).flat_map(|e| (0..predictors.len()).map(move |m| (e, m))).collect();
    let chunks: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(e, m)| {
            let (terrain, seed, episode) = &eps[e];
            let (kind, predictor) = &predictors[m];
            let r = rollout(predictor, episode, &terrain.nominal, spec.fallback_estimate)?;
            Ok(to_rows(*kind, terrain, *seed, &r))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Per-step relative velocity prediction error of every model.
pub fn run_predict(spec: &ExperimentSpec, store: &ModelStore) -> Result<Vec<ResultRow>> {
    run_models(spec, store, &spec.models, |kind, terrain, seed, r| {
        r.steps
            .iter()
            .map(|s| {
                let denom = s.v_true.abs().max(EPS_V);
                row(
                    Experiment::Predict,
                    kind.name(),
                    terrain.class.name(),
                    seed,
                    s.t,
                    "velocity_rel_error",
                    relative_velocity_error(s.v_pred, s.v_true),
                    s.v_std.map(|sd| CREDIBLE_Z * sd / denom),
                )
            })
            .collect()
    })
}

fn estimate_rows(kind: &str, class: &str, seed: u64, t: usize, e: &TerrainEstimate, truth: &TerrainParams) -> [ResultRow; 3] {
    let ci = credible_halfwidths(e);
    [
        row(Experiment::Estimate, kind, class, seed, t, "cohesion_kpa", e.cohesion_kpa, ci.map(|c| c[0])),
        row(Experiment::Estimate, kind, class, seed, t, "tan_phi", e.tan_phi, ci.map(|c| c[1])),
        row(Experiment::Estimate, kind, class, seed, t, "param_error", parameter_error(e, truth), None),
    ]
}

/// Time series of strength estimates with credible half-widths, the
/// parameter error, and one `truth` row pair per episode. Models without a
/// nominal block are skipped.
pub fn run_estimate(spec: &ExperimentSpec, store: &ModelStore) -> Result<Vec<ResultRow>> {
    let models: Vec<ModelKind> = spec.models.iter().copied().filter(|k| k.estimates_parameters()).collect();
    if models.is_empty() {
        return Err(Error::Argument("no model in the set estimates terrain parameters".into()));
    }
    let mut rows = Vec::new();
    for class in &spec.terrains {
        for &seed in &spec.seeds {
            let truth = test_terrain(*class, seed, spec.perturbation)?.truth;
            rows.push(row(Experiment::Estimate, "truth", class.name(), seed, 0, "cohesion_kpa", truth.cohesion_kpa(), None));
            rows.push(row(Experiment::Estimate, "truth", class.name(), seed, 0, "tan_phi", truth.tan_phi(), None));
        }
    }
    rows.extend(run_models(spec, store, &models, |kind, terrain, seed, r| {
        let n = r.steps.len();
        let series = r.steps.iter().filter_map(|s| s.estimate.map(|e| (s.t, e)));
        series
            .chain(r.final_estimate.map(|e| (n, e)))
            .flat_map(|(t, e)| estimate_rows(kind.name(), terrain.class.name(), seed, t, &e, &terrain.truth))
            .collect()
    })?);
    Ok(rows)
}

/// Sweep settings: evaluation episodes plus the base training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub eval: ExperimentSpec,
    pub training: MetaConfig,
    /// Training seeds; one model per (lambda, seed).
    pub train_seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
}

/// `0` followed by `1e-4, 1e-3, ..., 1e0`.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((-4..=0).map(|e| 10f64.powi(e))).collect()
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            eval: ExperimentSpec { experiment: Experiment::Sweep, seeds: (0..5).collect(), ..Default::default() },
            training: MetaConfig { iterations: 200, ..Default::default() },
            train_seeds: (0..5).collect(),
            lambda_grid: default_lambda_grid(),
        }
    }
}

/// Label of the nominal P-ALPaCA model trained with orthogonality weight `lambda`.
pub fn sweep_model_label(lambda: f64) -> String {
    format!("palpaca_nominal:lambda_orth={lambda:e}")
}

fn parse_sweep_label(label: &str) -> Option<f64> {
    label.strip_prefix("palpaca_nominal:lambda_orth=")?.parse().ok()
}

/// Retrains the nominal P-ALPaCA model for every weight in `lambda_grid` and
/// every training seed, then reports per terrain the final parameter error and
/// the mean velocity error (each averaged over the evaluation seeds), plus the
/// nominal/learned feature cross-correlation. A failed training run yields a
/// `training_failed` row and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, lambda_grid: &[f64]) -> Result<Vec<ResultRow>> {
    spec.eval.validate()?;
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Argument("lambda grid must be non-empty and contain finite weights >= 0".into()));
    }
    if spec.train_seeds.is_empty() {
        return Err(Error::Argument("need at least one training seed".into()));
    }
    let eps = episodes(&spec.eval)?;
    let tasks: Vec<TaskData> = eps
        .iter()
        .map(|(terrain, _, ep)| TaskData::from_episode(ep, &terrain.nominal, true, 0))
        .collect::<Result<_>>()?;
    let cells: Vec<(f64, u64)> =
        lambda_grid.iter().flat_map(|&l| spec.train_seeds.iter().map(move |&s| (l, s))).collect();
    let t_end = spec.eval.episode_length;
    let mut rows = Vec::new();
    for (lambda, seed) in cells {
        let label = sweep_model_label(lambda);
        let cfg = MetaConfig { lambda_orth: lambda, seed, use_nominal: true, ..spec.training.clone() };
        let model = match train(&cfg, &TerrainTaskSampler::new(&cfg)) {
            Ok(state) => state.model,
            Err(_) => {
                rows.push(row(Experiment::Sweep, &label, "all", seed, 0, "training_failed", 1.0, None));
                continue;
            }
        };
        let predictor = Predictor::Bayesian(&model);
        let results: Vec<(TerrainClass, f64, f64)> = eps
            .par_iter()
            .map(|(terrain, _, ep)| {
                let r = rollout(&predictor, ep, &terrain.nominal, spec.eval.fallback_estimate)?;
                let est = r.final_estimate.expect("nominal model estimates");
                let pe = parameter_error(&est, &terrain.truth);
                let ve = r.steps.iter().map(|s| relative_velocity_error(s.v_pred, s.v_true)).sum::<f64>()
                    / r.steps.len() as f64;
                Ok((terrain.class, pe, ve))
            })
            .collect::<Result<_>>()?;
        for class in &spec.eval.terrains {
            let mine: Vec<&(TerrainClass, f64, f64)> = results.iter().filter(|r| r.0 == *class).collect();
            let n = mine.len() as f64;
            let pe = mine.iter().map(|r| r.1).sum::<f64>() / n;
            let ve = mine.iter().map(|r| r.2).sum::<f64>() / n;
            rows.push(row(Experiment::Sweep, &label, class.name(), seed, t_end, "param_error", pe, None));
            rows.push(row(Experiment::Sweep, &label, class.name(), seed, t_end, "velocity_rel_error", ve, None));
        }
        let cc = feature_cross_correlation(&model, &tasks)?;
        rows.push(row(Experiment::Sweep, &label, "all", seed, 0, "feature_cross_correlation", cc, None));
    }
    Ok(rows)
}

/// Spearman rank correlation with average ranks for ties; `NaN` if either
/// input is constant or shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Per-weight means of the sweep metrics and their rank correlations with the weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambdas: Vec<f64>,
    pub param_error: Vec<f64>,
    pub velocity_rel_error: Vec<f64>,
    pub feature_cross_correlation: Vec<f64>,
    pub spearman_param_error: f64,
    pub spearman_velocity_rel_error: f64,
    /// Every positive weight has a lower mean cross-correlation than weight zero;
    /// `None` if zero is not in the grid.
    pub cross_correlation_lower_with_orth: Option<bool>,
    pub failed_runs: usize,
}

pub fn sweep_summary(rows: &[ResultRow]) -> Result<SweepSummary> {
    let mut acc: BTreeMap<u64, (f64, [Vec<f64>; 3])> = BTreeMap::new();
    let mut failed_runs = 0;
    for r in rows.iter().filter(|r| r.experiment == Experiment::Sweep.name()) {
        let lambda = parse_sweep_label(&r.model)
            .ok_or_else(|| Error::Format(format!("unexpected sweep model label `{}`", r.model)))?;
        let entry = acc.entry(lambda.to_bits()).or_insert_with(|| (lambda, Default::default()));
        match r.metric.as_str() {
            "param_error" => entry.1[0].push(r.value),
            "velocity_rel_error" => entry.1[1].push(r.value),
            "feature_cross_correlation" => entry.1[2].push(r.value),
            "training_failed" => failed_runs += 1,
            other => return Err(Error::Format(format!("unexpected sweep metric `{other}`"))),
        }
    }
    let mut entries: Vec<(f64, [f64; 3])> = acc
        .into_values()
        .filter(|(_, v)| v.iter().all(|x| !x.is_empty()))
        .map(|(l, v)| (l, v.map(|x| x.iter().sum::<f64>() / x.len() as f64)))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lambdas: Vec<f64> = entries.iter().map(|e| e.0).collect();
    let col = |i: usize| entries.iter().map(|e| e.1[i]).collect::<Vec<f64>>();
    let (pe, ve, cc) = (col(0), col(1), col(2));
    let lower = lambdas
        .iter()
        .position(|&l| l == 0.0)
        .map(|z| lambdas.iter().zip(&cc).all(|(&l, &c)| l == 0.0 || c < cc[z]));
    Ok(SweepSummary {
        spearman_param_error: spearman(&lambdas, &pe),
        spearman_velocity_rel_error: spearman(&lambdas, &ve),
        lambdas,
        param_error: pe,
        velocity_rel_error: ve,
        feature_cross_correlation: cc,
        cross_correlation_lower_with_orth: lower,
        failed_runs,
    })
}

/// Empirical coverage of 95% credible intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub intervals: usize,
    pub covered: usize,
    pub coverage: f64,
}

/// Coverage of the credible intervals on `(c, tan(phi))` on model-matched
/// data: for each seed the parameters are drawn from the model prior, the
/// next states of a held-out episode are replaced by the model's own
/// predictions plus noise, and the belief is conditioned on the first
/// `context` transitions.
pub fn credible_coverage(model: &MetaModel, spec: &ExperimentSpec, n_seeds: usize, context: usize) -> Result<CoverageReport> {
    spec.validate()?;
    if model.n_nom() == 0 {
        return Err(Error::Argument("coverage needs a model with nominal parameters".into()));
    }
    if context > spec.episode_length {
        return Err(Error::Argument("context longer than the episode".into()));
    }
    let spec = &ExperimentSpec { episode_length: context.max(1), ..spec.clone() };
    let l = model.prior.l_matrix();
    let kbar0 = DVector::from_column_slice(&model.prior.mean);
    let noise_l = model.noise.matrix().clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("noise".into()))?.l();
    let hits: Vec<[bool; 2]> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let class = spec.terrains[seed as usize % spec.terrains.len()];
            let (terrain, episode) = test_episode(spec, class, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(7);
            let z = DVector::from_fn(kbar0.len(), |_, _| StandardNormal.sample(&mut rng));
            let k = &kbar0 + l.transpose().solve_upper_triangular(&z).expect("triangular factor with positive diagonal");
            let mut belief = model.prior_belief()?;
            for tr in &episode.transitions[..context] {
                let (phi, offset) = model.features(&tr.state, &tr.input, &terrain.nominal)?;
                let e: DVector<f64> = &noise_l * DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
                let x = &phi * &k + offset.clone() + e;
                belief.update(&phi, &x, &offset, &model.noise)?;
            }
            let (mean, cov) = belief.nominal_marginal()?;
            Ok([0, 1].map(|j| (mean[j] - k[j]).abs() <= CREDIBLE_Z * cov[(j, j)].sqrt()))
        })
        .collect::<Result<_>>()?;
    let intervals = 2 * hits.len();
    let covered = hits.iter().flatten().filter(|&&h| h).count();
    Ok(CoverageReport { intervals, covered, coverage: covered as f64 / intervals.max(1) as f64 })
}

/// Statistics of one (model, terrain, metric) group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiment: String,
    pub model: String,
    pub terrain: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Groups rows by (experiment, model, terrain, metric), in sorted key order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(&str, &str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((&r.experiment, &r.model, &r.terrain, &r.metric))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((e, m, t, k), mut v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Aggregate {
                experiment: e.into(),
                model: m.into(),
                terrain: t.into(),
                metric: k.into(),
                count: v.len(),
                median: median(&mut v),
                mean,
                min,
                max,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    /// Credible-interval coverage per model.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub coverage: BTreeMap<String, CoverageReport>,
}

impl Summary {
    pub fn new(config_hash: &str, rows: &[ResultRow]) -> Self {
        Summary {
            kind: "summary".into(),
            version: SUMMARY_FORMAT_VERSION,
            config_hash: config_hash.into(),
            aggregates: aggregate(rows),
            sweep: None,
            coverage: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        jsonfmt::to_string(self)
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    let digest = Sha256::digest(jsonfmt::to_string(config)?.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// `root/<name>-<hash>`.
pub fn run_dir(root: &Path, name: &str, hash: &str) -> PathBuf {
    root.join(format!("{name}-{hash}"))
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.model.clone(),
            r.terrain.clone(),
            r.seed.to_string(),
            r.t.to_string(),
            r.metric.clone(),
            jsonfmt::fmt_f64(r.value),
            r.ci_halfwidth.map(jsonfmt::fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Format(format!("unexpected results header {header:?}")));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ResultRow {
                experiment: rec[0].into(),
                model: rec[1].into(),
                terrain: rec[2].into(),
                seed: rec[3].parse().map_err(|_| Error::Format(format!("bad seed `{}`", &rec[3])))?,
                t: rec[4].parse().map_err(|_| Error::Format(format!("bad t `{}`", &rec[4])))?,
                metric: rec[5].into(),
                value: num(&rec[6], "value")?,
                ci_halfwidth: if rec[7].is_empty() { None } else { Some(num(&rec[7], "ci_halfwidth")?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terramech::{COMPACT_SAND, LOOSE_SAND};

    #[test]
    fn zero_perturbation_is_identity() {
        assert_eq!(perturb_secondary(&LOOSE_SAND, 0.0, 3).unwrap(), LOOSE_SAND);
        assert!(perturb_secondary(&LOOSE_SAND, -0.1, 3).is_err());
    }

    #[test]
    fn perturbation_is_bounded_and_seeded() {
        for seed in 0..200 {
            let p = perturb_secondary(&COMPACT_SAND, 0.05, seed).unwrap();
            assert_eq!(p, perturb_secondary(&COMPACT_SAND, 0.05, seed).unwrap());
            assert_eq!((p.cohesion, p.friction_angle), (COMPACT_SAND.cohesion, COMPACT_SAND.friction_angle));
            let pairs = [(p.n, COMPACT_SAND.n), (p.k_c, COMPACT_SAND.k_c), (p.k_phi, COMPACT_SAND.k_phi), (p.k, COMPACT_SAND.k), (p.c1, COMPACT_SAND.c1), (p.c2, COMPACT_SAND.c2)];
            for (a, b) in pairs {
                assert!((a / b - 1.0).abs() <= 0.05 + 1e-15);
            }
        }
        assert_ne!(perturb_secondary(&COMPACT_SAND, 0.05, 1).unwrap(), perturb_secondary(&COMPACT_SAND, 0.05, 2).unwrap());
    }

    #[test]
    fn test_terrains_stay_in_the_bands() {
        for seed in 0..100 {
            for class in TerrainClass::ALL {
                let t = test_terrain(class, seed, 0.05).unwrap();
                assert!((0.7..=1.3).contains(&t.truth.cohesion_kpa()));
                assert!((20.0..=45.0).contains(&t.truth.friction_angle.to_degrees()));
                assert_eq!(t.nominal, class.preset());
            }
        }
    }

    #[test]
    fn spearman_reference_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
        assert!(spearman(&[1.0], &[1.0]).is_nan());
    }

    #[test]
    fn relative_error_uses_the_floor() {
        assert!((relative_velocity_error(0.11, 0.1) - 0.1).abs() < 1e-14);
        assert!((relative_velocity_error(0.002, 0.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![
            row(Experiment::Predict, "linear", "loose_sand", 3, 7, "velocity_rel_error", 0.25, None),
            row(Experiment::Estimate, "palpaca_nominal", "compact_sand", 1, 0, "tan_phi", 0.7, Some(0.1)),
        ];
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("experiment,model,terrain,seed,t,metric,value,ci_halfwidth\n"));
        assert_eq!(read_results_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&ExperimentSpec::default()).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, config_hash(&ExperimentSpec::default()).unwrap());
        let b = config_hash(&ExperimentSpec { perturbation: 0.04, ..Default::default() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn sweep_labels_round_trip() {
        for l in default_lambda_grid() {
            assert_eq!(parse_sweep_label(&sweep_model_label(l)), Some(l));
        }
    }

    #[test]
    fn empty_model_set_is_rejected() {
        let spec = ExperimentSpec { models: vec![], ..Default::default() };
        assert!(matches!(run_predict(&spec, &ModelStore::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_checkpoint_names_the_model() {
        let spec = ExperimentSpec { models: vec![ModelKind::PalpacaNominal], seeds: vec![0], ..Default::default() };
        match run_predict(&spec, &ModelStore::default()) {
            Err(Error::MissingCheckpoint(name)) => assert_eq!(name, "palpaca_nominal"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
