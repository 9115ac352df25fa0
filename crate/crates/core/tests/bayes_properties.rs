use nalgebra::{DMatrix, DVector};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rover_sysid::bayes::{GaussianBelief, MatrixNormalBelief, NoiseCovariance};

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

fn random_noise(rng: &mut ChaCha8Rng, n_x: usize) -> NoiseCovariance {
    let a = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-0.3..0.3));
    NoiseCovariance::new(&a * a.transpose() + DMatrix::identity(n_x, n_x) * 0.2).unwrap()
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1.0)
}

struct Obs {
    phi: DMatrix<f64>,
    x: DVector<f64>,
    offset: DVector<f64>,
}

fn random_obs(rng: &mut ChaCha8Rng, n_x: usize, n_phi: usize) -> Obs {
    Obs {
        phi: DMatrix::from_fn(n_x, n_phi, |_, _| rng.random_range(-1.0..1.0)),
        x: DVector::from_fn(n_x, |_, _| rng.random_range(-2.0..2.0)),
        offset: DVector::from_fn(n_x, |_, _| rng.random_range(-0.5..0.5)),
    }
}

#[test]
fn recursive_update_equals_batch_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let n_phi = rng.random_range(1..=8);
        let n_x = rng.random_range(1..=3);
        let t = rng.random_range(1..=20);
        let lambda0 = random_spd(&mut rng, n_phi);
        let kbar0 = DVector::from_fn(n_phi, |_, _| rng.random_range(-1.0..1.0));
        let noise = random_noise(&mut rng, n_x);
        let mut belief = GaussianBelief::from_mean(kbar0.clone(), lambda0.clone(), 0).unwrap();
        let obs: Vec<Obs> = (0..t).map(|_| random_obs(&mut rng, n_x, n_phi)).collect();
        for o in &obs {
            belief.update(&o.phi, &o.x, &o.offset, &noise).unwrap();
        }
        let si = noise.matrix().clone().try_inverse().unwrap();
        let mut lambda = lambda0.clone();
        let mut q = &lambda0 * &kbar0;
        for o in &obs {
            lambda += o.phi.transpose() * &si * &o.phi;
            q += o.phi.transpose() * &si * (&o.x - &o.offset);
        }
        let kbar = lambda.clone().lu().solve(&q).unwrap();
        assert!(rel_err(belief.precision(), &lambda) < 1e-8);
        let got = DMatrix::from_column_slice(n_phi, 1, belief.mean().unwrap().as_slice());
        assert!(rel_err(&got, &DMatrix::from_column_slice(n_phi, 1, kbar.as_slice())) < 1e-8);
    }
}

#[test]
fn rank_one_recursion_equals_batch_matrix_normal_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n_phi = rng.random_range(1..=8);
        let t = rng.random_range(1..=20);
        let lambda0 = random_spd(&mut rng, n_phi);
        let kbar0 = DMatrix::from_fn(2, n_phi, |_, _| rng.random_range(-1.0..1.0));
        let mut b = MatrixNormalBelief::new(kbar0.clone(), lambda0.clone(), random_noise(&mut rng, 2)).unwrap();
        let mut phis = DMatrix::zeros(t, n_phi);
        let mut xs = DMatrix::zeros(t, 2);
        for s in 0..t {
            let phi = DVector::from_fn(n_phi, |_, _| rng.random_range(-1.0..1.0));
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            b.update(&phi, &x).unwrap();
            phis.set_row(s, &phi.transpose());
            xs.set_row(s, &x.transpose());
        }
        let lambda = &lambda0 + phis.transpose() * &phis;
        let inv = lambda.try_inverse().unwrap();
        let kbar = (xs.transpose() * &phis + &kbar0 * &lambda0) * &inv;
        assert!(rel_err(&b.lambda_inv, &inv) < 1e-10);
        assert!(rel_err(&b.kbar, &kbar) < 1e-10);
    }
}

#[test]
fn posterior_is_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n_phi = 5;
    let noise = random_noise(&mut rng, 2);
    let prior = GaussianBelief::from_mean(DVector::zeros(n_phi), random_spd(&mut rng, n_phi), 2).unwrap();
    let mut obs: Vec<Obs> = (0..12).map(|_| random_obs(&mut rng, 2, n_phi)).collect();
    let mut a = prior.clone();
    for o in &obs {
        a.update(&o.phi, &o.x, &o.offset, &noise).unwrap();
    }
    obs.shuffle(&mut rng);
    let mut b = prior.clone();
    for o in &obs {
        b.update(&o.phi, &o.x, &o.offset, &noise).unwrap();
    }
    assert!(rel_err(a.precision(), b.precision()) < 1e-10);
    assert!((a.mean().unwrap() - b.mean().unwrap()).abs().max() < 1e-10);
}

#[test]
fn epistemic_variance_never_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n_phi = 6;
    let noise = random_noise(&mut rng, 2);
    let mut belief = GaussianBelief::from_mean(DVector::zeros(n_phi), random_spd(&mut rng, n_phi), 2).unwrap();
    let query = DMatrix::from_fn(2, n_phi, |_, _| rng.random_range(-1.0..1.0));
    let epistemic = |b: &GaussianBelief| &query * b.covariance().unwrap() * query.transpose();
    let mut prev = epistemic(&belief);
    for _ in 0..30 {
        let o = random_obs(&mut rng, 2, n_phi);
        belief.update(&o.phi, &o.x, &o.offset, &noise).unwrap();
        let cur = epistemic(&belief);
        let diff = &prev - &cur;
        let min_eig = diff.symmetric_eigenvalues().min();
        assert!(min_eig > -1e-12 * prev.abs().max(), "epistemic term grew: {min_eig}");
        prev = cur;
    }
}

#[test]
fn posterior_contracts_onto_the_generating_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n_phi = 8;
    let k_true = DVector::from_fn(n_phi, |_, _| rng.random_range(-2.0..2.0));
    let noise = NoiseCovariance::diagonal(&[1e-6, 1e-6]).unwrap();
    let mut belief = GaussianBelief::from_mean(DVector::zeros(n_phi), DMatrix::identity(n_phi, n_phi), 2).unwrap();
    for _ in 0..1000 {
        let o = random_obs(&mut rng, 2, n_phi);
        let x = &o.phi * &k_true + &o.offset;
        belief.update(&o.phi, &x, &o.offset, &noise).unwrap();
    }
    assert!((belief.mean().unwrap() - &k_true).norm() < 1e-6);
}
