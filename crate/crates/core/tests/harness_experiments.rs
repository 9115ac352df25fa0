use nalgebra::DVector;
use rover_sysid::harness::{
    credible_coverage, read_results_csv, rollout, run_estimate, run_predict, run_sweep, sweep_model_label,
    sweep_summary, test_episode, write_results_csv, Experiment, ExperimentSpec, ModelKind, ModelStore, Predictor,
    SweepSpec,
};
use rover_sysid::metatrain::{train, MetaConfig, MetaModel, TerrainTaskSampler};
use rover_sysid::nominal::{linear_ls_estimate, nominal_dynamics_features};
use rover_sysid::roversim::{generate_episode, InputPolicy, RoverConfig, RoverState, Transition};
use rover_sysid::terramech::{TerrainClass, LOOSE_SAND};

fn noiseless() -> RoverConfig {
    RoverConfig { noise_std: [0.0, 0.0], ..Default::default() }
}

fn small_training() -> MetaConfig {
    MetaConfig { iterations: 3, hidden: [8, 8], n_net: 3, tasks_per_batch: 2, ..Default::default() }
}

#[test]
fn ground_truth_predictor_is_exact_without_noise() {
    let spec = ExperimentSpec { rover: noiseless(), seeds: vec![0, 1], episode_length: 30, ..Default::default() };
    for class in TerrainClass::ALL {
        for seed in [0, 1] {
            let (terrain, ep) = test_episode(&spec, class, seed).unwrap();
            let r = rollout(&Predictor::GroundTruth(terrain.truth), &ep, &terrain.nominal, spec.fallback_estimate).unwrap();
            for s in &r.steps {
                assert!((s.v_pred - s.v_true).abs() <= 1e-12 * s.v_true.abs().max(1.0), "{class} {seed} {s:?}");
            }
        }
    }
}

#[test]
fn linear_model_velocity_error_stays_below_five_percent() {
    let spec = ExperimentSpec { models: vec![ModelKind::Linear], ..Default::default() };
    let mut errors: Vec<f64> = run_predict(&spec, &ModelStore::default()).unwrap().into_iter().map(|r| r.value).collect();
    assert_eq!(errors.len(), 2 * 10 * 100);
    let median = rover_sysid::harness::median(&mut errors);
    assert!(median < 0.05, "median {median}");
}

#[test]
fn credible_halfwidths_never_grow_with_data() {
    let cfg = small_training();
    let mut store = ModelStore::default();
    store.insert(ModelKind::PalpacaNominal, MetaModel::init(&cfg).unwrap()).unwrap();
    let spec = ExperimentSpec {
        experiment: Experiment::Estimate,
        models: vec![ModelKind::PalpacaNominal, ModelKind::Linear],
        seeds: vec![4, 5],
        episode_length: 40,
        ..Default::default()
    };
    let rows = run_estimate(&spec, &store).unwrap();
    for terrain in TerrainClass::ALL {
        for seed in [4, 5] {
            for metric in ["cohesion_kpa", "tan_phi"] {
                let mut series: Vec<(usize, f64)> = rows
                    .iter()
                    .filter(|r| r.model == "palpaca_nominal" && r.terrain == terrain.name() && r.seed == seed && r.metric == metric)
                    .map(|r| (r.t, r.ci_halfwidth.unwrap()))
                    .collect();
                series.sort_by_key(|s| s.0);
                assert_eq!(series.len(), 41);
                for w in series.windows(2) {
                    assert!(w[1].1 <= w[0].1 * (1.0 + 1e-9), "{terrain} {seed} {metric} {w:?}");
                }
            }
        }
    }
    assert!(rows.iter().filter(|r| r.model == "linear").all(|r| r.ci_halfwidth.is_none()));
    assert_eq!(rows.iter().filter(|r| r.model == "truth").count(), 2 * 2 * 2);
}

/// Rich-excitation transitions whose next states follow the nominal model exactly.
fn model_matched(c: f64, tan_phi: f64, n: usize) -> Vec<Transition> {
    let cfg = noiseless();
    let ep = generate_episode(&LOOSE_SAND, TerrainClass::LooseSand, &cfg, n, InputPolicy::Sampled, 99).unwrap();
    ep.transitions
        .iter()
        .map(|tr| {
            let p = nominal_dynamics_features(&tr.state, &tr.input, &cfg, &LOOSE_SAND).unwrap().predict(c, tan_phi);
            Transition { next: RoverState { x: p[0], v: p[1] }, ..*tr }
        })
        .collect()
}

#[test]
fn model_matched_data_is_recovered() {
    let (c, t) = (1.1, 0.62);
    let data = model_matched(c, t, 100);
    let est = linear_ls_estimate(&data, &noiseless(), &LOOSE_SAND).unwrap();
    assert!((est.cohesion_kpa - c).abs() < 1e-8 && (est.tan_phi - t).abs() < 1e-8, "{est:?}");
    let model = MetaModel::init(&MetaConfig::default()).unwrap();
    let mut belief = model.prior_belief().unwrap();
    for tr in &data {
        let (phi, offset) = model.features(&tr.state, &tr.input, &LOOSE_SAND).unwrap();
        belief.update(&phi, &DVector::from_vec(vec![tr.next.x, tr.next.v]), &offset, &model.noise).unwrap();
    }
    let (mean, _) = belief.nominal_marginal().unwrap();
    assert!((mean[0] - c).abs() < 1e-4 && (mean[1] - t).abs() < 1e-4, "{mean}");
}

fn small_sweep() -> SweepSpec {
    let mut spec = SweepSpec { training: small_training(), train_seeds: vec![0, 1], ..Default::default() };
    spec.eval.seeds = vec![0, 1];
    spec.eval.episode_length = 15;
    spec
}

#[test]
fn zero_weight_sweep_matches_the_unregularized_model() {
    let spec = small_sweep();
    let rows = run_sweep(&spec, &[0.0]).unwrap();
    for &seed in &spec.train_seeds {
        let base = MetaConfig { seed, ..spec.training.clone() };
        let cfg = ModelKind::PalpacaNominal.training_config(&base).unwrap();
        let mut store = ModelStore::default();
        store.insert(ModelKind::PalpacaNominal, train(&cfg, &TerrainTaskSampler::new(&cfg)).unwrap().model).unwrap();
        let eval = ExperimentSpec { models: vec![ModelKind::PalpacaNominal], ..spec.eval.clone() };
        let predicted = run_predict(&eval, &store).unwrap();
        for class in &eval.terrains {
            let mine: Vec<f64> = predicted.iter().filter(|r| r.terrain == class.name()).map(|r| r.value).collect();
            let expected = mine.iter().sum::<f64>() / mine.len() as f64;
            let got = rows
                .iter()
                .find(|r| r.seed == seed && r.terrain == class.name() && r.metric == "velocity_rel_error")
                .unwrap();
            assert_eq!(got.model, sweep_model_label(0.0));
            assert!((got.value - expected).abs() <= 1e-12 * expected, "{} vs {expected}", got.value);
        }
    }
}

#[test]
fn single_weight_grid_gives_one_row_set_per_seed() {
    let spec = small_sweep();
    let rows = run_sweep(&spec, &[0.5]).unwrap();
    assert_eq!(rows.len(), spec.train_seeds.len() * (2 * spec.eval.terrains.len() + 1));
    let summary = sweep_summary(&rows).unwrap();
    assert_eq!(summary.lambdas, vec![0.5]);
    assert!(summary.spearman_param_error.is_nan());
    assert_eq!(summary.cross_correlation_lower_with_orth, None);
    assert_eq!(run_sweep(&spec, &[0.5]).unwrap(), rows);
}

#[test]
fn experiments_are_reproducible_and_round_trip_through_csv() {
    let cfg = small_training();
    let mut store = ModelStore::default();
    store.insert(ModelKind::PalpacaNominalOrth, MetaModel::init(&cfg).unwrap()).unwrap();
    let spec = ExperimentSpec {
        models: vec![ModelKind::Linear, ModelKind::Iagnemma, ModelKind::PalpacaNominalOrth],
        seeds: vec![2, 3],
        episode_length: 20,
        ..Default::default()
    };
    let a = run_predict(&spec, &store).unwrap();
    assert_eq!(a, run_predict(&spec, &store).unwrap());
    let mut buf = Vec::new();
    write_results_csv(&a, &mut buf).unwrap();
    assert_eq!(read_results_csv(buf.as_slice()).unwrap(), a);
    let other = run_predict(&ExperimentSpec { seeds: vec![4, 5], ..spec.clone() }, &store).unwrap();
    assert_ne!(a, other);
}

#[test]
fn coverage_on_model_matched_data_is_near_nominal() {
    let model = MetaModel::init(&MetaConfig { hidden: [8, 8], n_net: 3, ..Default::default() }).unwrap();
    let spec = ExperimentSpec::default();
    let report = credible_coverage(&model, &spec, 200, 10).unwrap();
    assert_eq!(report.intervals, 400);
    assert!((0.9..=0.99).contains(&report.coverage), "{report:?}");
    let plain = MetaModel::init(&MetaConfig { use_nominal: false, hidden: [8, 8], n_net: 3, ..Default::default() }).unwrap();
    assert!(credible_coverage(&plain, &spec, 10, 10).is_err());
}
