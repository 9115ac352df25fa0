use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rover_sysid::metatrain::{meta_loss, LossOptions, MetaConfig, MetaModel, TaskData, TaskSampler, TerrainTaskSampler};

/// Tasks of ten transitions whose targets are mirrored about the offset, so
/// the episode posterior puts negative mass on the nominal parameters.
fn tasks(cfg: &MetaConfig) -> Vec<TaskData> {
    let sampler = TerrainTaskSampler::new(cfg);
    (0..3)
        .map(|i| {
            let mut t = sampler.sample(900 + i as u64, i).unwrap();
            t.split = [3, 0, 7][i];
            for (x, o) in t.next.iter_mut().zip(&t.offsets) {
                *x = 2.0 * o - &*x;
            }
            t
        })
        .collect()
}

fn check(opts: LossOptions, cfg: &MetaConfig, seed: u64) {
    let model = MetaModel::init(cfg).unwrap();
    let tasks = tasks(cfg);
    let (terms, grad) = meta_loss(&model, &tasks, &opts, true).unwrap();
    let grad = grad.unwrap();
    assert!(terms.pos > 0.0, "positivity term inactive");
    let base = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_net = model.net.num_params();
    let mut picks: Vec<usize> = (0..20).map(|_| rng.random_range(0..n_net)).collect();
    picks.extend((0..6).map(|_| rng.random_range(n_net..base.len())));
    // The orthogonality term makes the loss large, so a small step would be
    // dominated by round-off in the difference.
    let h = 1e-3;
    for &k in &picks {
        let mut m = model.clone();
        let mut p = base.clone();
        p[k] = base[k] + h;
        m.set_params(&p).unwrap();
        let lp = meta_loss(&m, &tasks, &opts, false).unwrap().0.total;
        p[k] = base[k] - h;
        m.set_params(&p).unwrap();
        let lm = meta_loss(&m, &tasks, &opts, false).unwrap().0.total;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - grad[k]).abs();
        assert!(err <= 1e-4 * fd.abs() || err <= 1e-7, "param {k}: analytic {} vs finite difference {fd}", grad[k]);
    }
}

#[test]
fn composite_loss_gradient_matches_finite_differences() {
    let cfg = MetaConfig { transitions_per_task: 10, ..Default::default() };
    check(LossOptions { lambda_orth: 1e-2, lambda_pos: 1e-1, detach_conditioning: false }, &cfg, 1);
}

#[test]
fn learned_only_model_gradient_matches_finite_differences() {
    let cfg = MetaConfig { transitions_per_task: 10, use_nominal: false, hidden: [32, 32], ..Default::default() };
    let model = MetaModel::init(&cfg).unwrap();
    let tasks = tasks(&cfg);
    let opts = LossOptions { lambda_orth: 1e-1, lambda_pos: 0.0, detach_conditioning: false };
    let (_, grad) = meta_loss(&model, &tasks, &opts, true).unwrap();
    let grad = grad.unwrap();
    let base = model.params();
    let h = 1e-5;
    for k in (0..base.len()).step_by(97) {
        let mut m = model.clone();
        let mut p = base.clone();
        p[k] += h;
        m.set_params(&p).unwrap();
        let lp = meta_loss(&m, &tasks, &opts, false).unwrap().0.total;
        p[k] -= 2.0 * h;
        m.set_params(&p).unwrap();
        let lm = meta_loss(&m, &tasks, &opts, false).unwrap().0.total;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - grad[k]).abs();
        assert!(err <= 1e-4 * fd.abs() || err <= 1e-7, "param {k}: analytic {} vs finite difference {fd}", grad[k]);
    }
}

#[test]
fn gradient_flows_through_the_conditioning() {
    let cfg = MetaConfig { transitions_per_task: 10, hidden: [32, 32], ..Default::default() };
    let model = MetaModel::init(&cfg).unwrap();
    let tasks = tasks(&cfg);
    let full = LossOptions { lambda_orth: 0.0, lambda_pos: 0.0, detach_conditioning: false };
    let detached = LossOptions { detach_conditioning: true, ..full };
    let (a, ga) = meta_loss(&model, &tasks, &full, true).unwrap();
    let (b, gb) = meta_loss(&model, &tasks, &detached, true).unwrap();
    assert_eq!(a, b);
    let n_net = model.net.num_params();
    let diff: f64 = ga.unwrap()[..n_net].iter().zip(&gb.unwrap()[..n_net]).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 0.0);
}
