//! Offline meta-training of the feature network and the parameter prior.
//!
//! Each task is a short episode on a randomly drawn soil. The belief is
//! conditioned on a prefix of the episode and scored on the remainder; the
//! gradient of the resulting predictive NLL flows back through the
//! conditioning into the network weights and into the prior
//! `N(kbar0, (L L')^-1)`, where `L` is lower triangular with a softplus
//! diagonal so the prior precision stays positive definite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

use crate::bayes::{BeliefSnapshot, GaussianBelief, NoiseCovariance};
use crate::error::{Error, Result};
use crate::featnet::{assemble_features, FeatNetCheckpoint, FeatureNet, GradientTape, DEFAULT_HIDDEN, DEFAULT_N_NET};
use crate::jsonfmt;
use crate::nominal::nominal_dynamics_features;
use crate::roversim::{generate_episode, Episode, InputPolicy, RoverConfig, RoverInput, RoverState};
use crate::terramech::{TerrainClass, TerrainParams};
use crate::{NOMINAL_DIM, STATE_DIM};

/// Cohesion band (kPa) reserved for testing.
pub const TEST_COHESION_KPA: (f64, f64) = (0.7, 1.3);
/// Friction-angle band (degrees) reserved for testing.
pub const TEST_FRICTION_DEG: (f64, f64) = (20.0, 45.0);
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub iterations: usize,
    pub tasks_per_batch: usize,
    pub transitions_per_task: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_orth: f64,
    pub lambda_pos: f64,
    /// Learned features per state dimension.
    pub n_net: usize,
    pub hidden: [usize; 2],
    /// Include the physics features `Phi_nom`; without them the model is purely learned.
    pub use_nominal: bool,
    pub cohesion_range_kpa: [f64; 2],
    pub cohesion_excluded_kpa: [f64; 2],
    pub friction_range_deg: [f64; 2],
    pub friction_excluded_deg: [f64; 2],
    /// Diagonal of the observation noise covariance (m^2, m^2/s^2).
    pub noise_var: [f64; 2],
    /// Initial prior mean of `(c_kpa, tan_phi)`.
    pub prior_mean_nominal: [f64; 2],
    pub prior_std_nominal: f64,
    pub prior_std_net: f64,
    /// Stop gradients through the context update of the belief.
    pub detach_conditioning: bool,
    pub seed: u64,
    pub rover: RoverConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            iterations: 1000,
            tasks_per_batch: 8,
            transitions_per_task: 20,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_orth: 1e-2,
            lambda_pos: 1e-1,
            n_net: DEFAULT_N_NET,
            hidden: DEFAULT_HIDDEN,
            use_nominal: true,
            cohesion_range_kpa: [0.5, 5.0],
            cohesion_excluded_kpa: [TEST_COHESION_KPA.0, TEST_COHESION_KPA.1],
            friction_range_deg: [0.0, 60.0],
            friction_excluded_deg: [TEST_FRICTION_DEG.0, TEST_FRICTION_DEG.1],
            noise_var: [1e-8, 1e-6],
            prior_mean_nominal: [2.5, 0.7],
            prior_std_nominal: 2.0,
            prior_std_net: 1e-2,
            detach_conditioning: false,
            seed: 0,
            rover: RoverConfig::default(),
        }
    }
}

fn check_band(name: &str, range: [f64; 2], excluded: [f64; 2], test: (f64, f64)) -> Result<()> {
    if !(range[0] <= range[1] && excluded[0] <= excluded[1]) {
        return Err(Error::Argument(format!("{name}: empty range")));
    }
    if excluded[0] > test.0 || excluded[1] < test.1 {
        return Err(Error::Argument(format!(
            "{name}: excluded band [{}, {}] must cover the test band [{}, {}]",
            excluded[0], excluded[1], test.0, test.1
        )));
    }
    let kept = (excluded[0].min(range[1]) - range[0]).max(0.0) + (range[1] - excluded[1].max(range[0])).max(0.0);
    if kept <= 0.0 {
        return Err(Error::Argument(format!("{name}: nothing left to sample outside the excluded band")));
    }
    Ok(())
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_orth", self.lambda_orth),
            ("lambda_pos", self.lambda_pos),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Argument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.tasks_per_batch == 0 || self.transitions_per_task == 0 {
            return Err(Error::Argument("tasks_per_batch and transitions_per_task must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Argument("invalid optimizer moments".into()));
        }
        if !(self.prior_std_nominal > 0.0 && self.prior_std_net > 0.0) {
            return Err(Error::Argument("prior standard deviations must be positive".into()));
        }
        if self.noise_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Argument("noise variances must be positive".into()));
        }
        if self.cohesion_range_kpa[0] < 0.0 || self.friction_range_deg[0] < 0.0 || self.friction_range_deg[1] >= 90.0 {
            return Err(Error::Argument("soil strength ranges outside the physical domain".into()));
        }
        check_band("cohesion", self.cohesion_range_kpa, self.cohesion_excluded_kpa, TEST_COHESION_KPA)?;
        check_band("friction angle", self.friction_range_deg, self.friction_excluded_deg, TEST_FRICTION_DEG)?;
        self.rover.validate()
    }

    pub fn n_nom(&self) -> usize {
        if self.use_nominal {
            NOMINAL_DIM
        } else {
            0
        }
    }

    pub fn noise(&self) -> Result<NoiseCovariance> {
        NoiseCovariance::diagonal(&self.noise_var)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Prior `N(mean, (L L')^-1)`; `factor` packs the rows of `L`'s lower
/// triangle, with each diagonal entry stored as its softplus pre-image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub mean: Vec<f64>,
    pub factor: Vec<f64>,
}

fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl PriorParams {
    /// Independent prior with the given per-parameter standard deviations.
    pub fn diagonal(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        let n = mean.len();
        if std.len() != n || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Argument("prior needs one positive standard deviation per parameter".into()));
        }
        let mut factor = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            factor[tri_index(i, i)] = softplus_inv(1.0 / std[i]);
        }
        Ok(PriorParams { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_params(&self) -> usize {
        self.mean.len() + self.factor.len()
    }

    pub fn l_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => softplus(self.factor[tri_index(i, i)]),
            std::cmp::Ordering::Greater => self.factor[tri_index(i, j)],
        })
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let l = self.l_matrix();
        &l * l.transpose()
    }

    pub fn belief(&self, n_nom: usize) -> Result<GaussianBelief> {
        GaussianBelief::from_mean(DVector::from_column_slice(&self.mean), self.precision(), n_nom)
    }
}

/// Network, prior and the fixed settings needed to turn transitions into
/// features: everything required for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub net: FeatureNet,
    pub prior: PriorParams,
    pub use_nominal: bool,
    pub noise: NoiseCovariance,
    pub rover: RoverConfig,
}

impl MetaModel {
    /// Untrained model for `config`, with network weights drawn from its seed.
    pub fn init(config: &MetaConfig) -> Result<Self> {
        config.validate()?;
        let net = FeatureNet::new(STATE_DIM, config.hidden, config.n_net, config.seed)?;
        let n_nom = config.n_nom();
        let mut mean = vec![0.0; n_nom + config.n_net];
        let mut std = vec![config.prior_std_net; n_nom + config.n_net];
        for j in 0..n_nom {
            mean[j] = config.prior_mean_nominal[j];
            std[j] = config.prior_std_nominal;
        }
        Ok(MetaModel {
            net,
            prior: PriorParams::diagonal(mean, &std)?,
            use_nominal: config.use_nominal,
            noise: config.noise()?,
            rover: config.rover,
        })
    }

    pub fn n_nom(&self) -> usize {
        if self.use_nominal {
            NOMINAL_DIM
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.n_nom() + self.net.n_net()
    }

    pub fn prior_belief(&self) -> Result<GaussianBelief> {
        self.prior.belief(self.n_nom())
    }

    /// Nominal block and offset of a transition: the physics features when
    /// enabled, otherwise an empty block with the coasting offset.
    pub fn nominal_part(
        &self,
        state: &RoverState,
        input: &RoverInput,
        secondary: &TerrainParams,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        nominal_part(self.use_nominal, state, input, &self.rover, secondary)
    }

    /// Full feature matrix `[Phi_nom, Phi_net]` and offset of a transition.
    pub fn features(
        &self,
        state: &RoverState,
        input: &RoverInput,
        secondary: &TerrainParams,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (phi_nom, offset) = self.nominal_part(state, input, secondary)?;
        let phi = assemble_features(&phi_nom, &self.net.forward(state, input)?)?;
        Ok((phi, offset))
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.prior.num_params()
    }

    /// Flat trainable parameters: network, prior mean, prior factor.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(self.net.params());
        p.extend_from_slice(&self.prior.mean);
        p.extend_from_slice(&self.prior.factor);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", p.len(), self.num_params())));
        }
        let (a, rest) = p.split_at(self.net.num_params());
        let (b, c) = rest.split_at(self.prior.mean.len());
        self.net.params_mut().copy_from_slice(a);
        self.prior.mean.copy_from_slice(b);
        self.prior.factor.copy_from_slice(c);
        Ok(())
    }
}

pub(crate) fn nominal_part(
    use_nominal: bool,
    state: &RoverState,
    input: &RoverInput,
    rover: &RoverConfig,
    secondary: &TerrainParams,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if use_nominal {
        let f = nominal_dynamics_features(state, input, rover, secondary)?;
        Ok((
            DMatrix::from_column_slice(STATE_DIM, NOMINAL_DIM, f.phi_nom.as_slice()),
            DVector::from_column_slice(f.offset.as_slice()),
        ))
    } else {
        Ok((
            DMatrix::zeros(STATE_DIM, 0),
            DVector::from_vec(vec![state.x + rover.dt * state.v, state.v]),
        ))
    }
}

/// One task: an episode with its nominal features, split into a context
/// prefix of length `split` and the scored remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub states: Vec<RoverState>,
    pub inputs: Vec<RoverInput>,
    pub phi_nom: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub next: Vec<DVector<f64>>,
    pub split: usize,
}

impl TaskData {
    pub fn from_episode(
        episode: &Episode,
        secondary: &TerrainParams,
        use_nominal: bool,
        split: usize,
    ) -> Result<Self> {
        if split >= episode.len() {
            return Err(Error::Argument(format!(
                "split {split} leaves no target in an episode of {} transitions",
                episode.len()
            )));
        }
        let mut task = TaskData {
            states: Vec::with_capacity(episode.len()),
            inputs: Vec::with_capacity(episode.len()),
            phi_nom: Vec::with_capacity(episode.len()),
            offsets: Vec::with_capacity(episode.len()),
            next: Vec::with_capacity(episode.len()),
            split,
        };
        for tr in &episode.transitions {
            let (phi, off) = nominal_part(use_nominal, &tr.state, &tr.input, &episode.config, secondary)?;
            task.states.push(tr.state);
            task.inputs.push(tr.input);
            task.phi_nom.push(phi);
            task.offsets.push(off);
            task.next.push(DVector::from_vec(vec![tr.next.x, tr.next.v]));
        }
        Ok(task)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `||I - (1/T) sum_t phi_t phi_t'||_F^2` summed over the rows of the feature
/// matrices `features[t]`.
pub fn orthogonality_loss(features: &[DMatrix<f64>]) -> f64 {
    orthogonality(features, None)
}

fn orthogonality(features: &[DMatrix<f64>], mut grad: Option<(&mut [DMatrix<f64>], f64)>) -> f64 {
    let Some(first) = features.first() else { return 0.0 };
    let (n_rows, n) = first.shape();
    let t = features.len() as f64;
    let mut loss = 0.0;
    for i in 0..n_rows {
        let mut d = DMatrix::<f64>::identity(n, n);
        for phi in features {
            let row = phi.row(i).transpose();
            d -= &row * row.transpose() / t;
        }
        loss += d.norm_squared();
        if let Some((g, weight)) = grad.as_mut() {
            for (phi, g) in features.iter().zip(g.iter_mut()) {
                let gi = &d * phi.row(i).transpose() * (-4.0 * *weight / t);
                for j in 0..n {
                    g[(i, j)] += gi[j];
                }
            }
        }
    }
    loss
}

/// `sum_j max(0, -k_j)^2` over the entries `indices` of `kbar`.
pub fn positivity_loss(kbar: &[f64], indices: &[usize]) -> f64 {
    indices.iter().map(|&j| (-kbar[j]).max(0.0).powi(2)).sum()
}

/// Per-term values of the meta-loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean over tasks of the mean target NLL.
    pub nll: f64,
    /// Orthogonality loss summed over tasks.
    pub orth: f64,
    /// Positivity loss summed over tasks.
    pub pos: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub lambda_orth: f64,
    pub lambda_pos: f64,
    pub detach_conditioning: bool,
}

impl From<&MetaConfig> for LossOptions {
    fn from(c: &MetaConfig) -> Self {
        LossOptions {
            lambda_orth: c.lambda_orth,
            lambda_pos: c.lambda_pos,
            detach_conditioning: c.detach_conditioning,
        }
    }
}

struct TaskOutput {
    nll: f64,
    orth: f64,
    pos: f64,
    grad: Option<Vec<f64>>,
}

fn chol(m: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    nalgebra::Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite(what.into()))
}

/// Posterior in square-root form: `R` upper triangular with `R' R = Lambda`,
/// obtained from a QR factorisation of the whitened prior and observation
/// rows. Avoids forming `Lambda`, whose condition number is the square of
/// that of `R`.
struct SqrtPosterior {
    r: DMatrix<f64>,
    mean: DVector<f64>,
}

impl SqrtPosterior {
    fn new(
        l: &DMatrix<f64>,
        kbar0: &DVector<f64>,
        phis: &[DMatrix<f64>],
        residuals: &[DVector<f64>],
        whiten: &DMatrix<f64>,
        what: &str,
    ) -> Result<Self> {
        let n = l.nrows();
        let n_x = whiten.nrows();
        let rows = n + n_x * phis.len();
        let mut a = DMatrix::zeros(rows, n);
        let mut b = DVector::zeros(rows);
        a.view_mut((0, 0), (n, n)).copy_from(&l.transpose());
        b.rows_mut(0, n).copy_from(&(l.transpose() * kbar0));
        for (t, (phi, r)) in phis.iter().zip(residuals).enumerate() {
            a.view_mut((n + n_x * t, 0), (n_x, n)).copy_from(&(whiten * phi));
            b.rows_mut(n + n_x * t, n_x).copy_from(&(whiten * r));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
        let qr = a.qr();
        qr.q_tr_mul(&mut b);
        let r = qr.r();
        let dmax = r.diagonal().abs().max();
        if r.diagonal().iter().any(|d| !(d.abs() > 1e-14 * dmax)) {
            return Err(Error::NotPositiveDefinite(what.into()));
        }
        let mean = r
            .solve_upper_triangular(&b.rows(0, n).into_owned())
            .ok_or_else(|| Error::NotPositiveDefinite(what.into()))?;
        Ok(SqrtPosterior { r, mean })
    }

    /// `Lambda^-1 v`.
    fn covariance_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.r.tr_solve_upper_triangular(v).expect("nonsingular factor");
        self.r.solve_upper_triangular(&w).expect("nonsingular factor")
    }

    fn covariance(&self) -> DMatrix<f64> {
        let n = self.r.nrows();
        let r_inv = self.r.solve_upper_triangular(&DMatrix::identity(n, n)).expect("nonsingular factor");
        &r_inv * r_inv.transpose()
    }
}

/// Upstream gradient of a posterior `(Lambda, q)` written as
/// `dL/dLambda = -P H P - u k'` and `dL/dq = u`, where `P = Lambda^-1`,
/// `k = P q` and `u = P dL/dk`. Expressing the contributions through the
/// residuals `r_t - Phi_t k` avoids the cancellation between the large terms
/// `u q'` and `r_t u'` when the noise is small.
struct PosteriorGrad<'a> {
    k: &'a DVector<f64>,
    u: DVector<f64>,
    /// `P H P`, if the loss depends on `P` directly.
    php: Option<DMatrix<f64>>,
}

impl PosteriorGrad<'_> {
    fn backprop(
        &self,
        g_phi: &mut [DMatrix<f64>],
        phis: &[DMatrix<f64>],
        residuals: &[DVector<f64>],
        s_inv: &DMatrix<f64>,
        range: std::ops::Range<usize>,
    ) {
        let sym = self.php.as_ref().map(|m| m + m.transpose());
        for t in range {
            let phi = &phis[t];
            let e = &residuals[t] - phi * self.k;
            let mut inner = e * self.u.transpose() - (phi * &self.u) * self.k.transpose();
            if let Some(sym) = &sym {
                inner -= phi * sym;
            }
            g_phi[t] += s_inv * inner;
        }
    }

    /// Adds `dL/dLambda0` (given `q0 = Lambda0 kbar0`) and `dL/dq0`.
    fn prior(&self, kbar0: &DVector<f64>, g_lambda0: &mut DMatrix<f64>, g_q0: &mut DVector<f64>) {
        if let Some(php) = &self.php {
            *g_lambda0 -= php;
        }
        *g_lambda0 -= &self.u * (self.k - kbar0).transpose();
        *g_q0 += &self.u;
    }
}

fn task_loss(
    model: &MetaModel,
    task: &TaskData,
    opts: &LossOptions,
    nll_weight: f64,
    want_grad: bool,
) -> Result<TaskOutput> {
    let n_t = task.len();
    let s = task.split;
    if s >= n_t {
        return Err(Error::Argument("task has no target transitions".into()));
    }
    let n_nom = model.n_nom();
    let n = model.dim();
    let n_x = STATE_DIM;
    let net = &model.net;
    let mut tape = GradientTape::new(net);
    let mut phis = Vec::with_capacity(n_t);
    let mut tape_idx = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let (phi_net, idx) = if want_grad {
            net.forward_taped(&task.states[t], &task.inputs[t], &mut tape)?
        } else {
            (net.forward(&task.states[t], &task.inputs[t])?, 0)
        };
        if task.phi_nom[t].ncols() != n_nom {
            return Err(Error::Shape("task nominal features do not match the model".into()));
        }
        phis.push(assemble_features(&task.phi_nom[t], &phi_net)?);
        tape_idx.push(idx);
    }
    let residuals: Vec<DVector<f64>> = (0..n_t).map(|t| &task.next[t] - &task.offsets[t]).collect();
    let s_inv = model.noise.inverse();
    let sigma = model.noise.matrix();

    let l = model.prior.l_matrix();
    let lambda0 = &l * l.transpose();
    let kbar0 = DVector::from_column_slice(&model.prior.mean);

    let whiten = model.noise.whitener();
    let ctx = SqrtPosterior::new(&l, &kbar0, &phis[..s], &residuals[..s], whiten, "context posterior")?;
    let p = ctx.covariance();
    let k = ctx.mean.clone();

    let mut g_phi: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n_x, n); n_t];
    let mut g_k = DVector::zeros(n);
    let mut g_p = DMatrix::zeros(n, n);
    let m = (n_t - s) as f64;
    let w = nll_weight / m;
    let log2pi = (2.0 * PI).ln();
    let mut nll = 0.0;
    for t in s..n_t {
        let phi = &phis[t];
        let phi_p = phi * &p;
        let e = &residuals[t] - phi * &k;
        let c = &phi_p * phi.transpose() + sigma;
        let cc = chol(c, "predictive covariance")?;
        let a = cc.solve(&e);
        let logdet: f64 = 2.0 * cc.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        nll += 0.5 * (e.dot(&a) + logdet + n_x as f64 * log2pi);
        if want_grad {
            let g = (cc.inverse() - &a * a.transpose()) * 0.5;
            g_phi[t] += (-(&a * k.transpose()) + &g * &phi_p * 2.0) * w;
            g_k -= phi.transpose() * &a * w;
            g_p += phi.transpose() * &g * phi * w;
        }
    }
    nll /= m;

    let mut g_lambda0 = DMatrix::zeros(n, n);
    let mut g_q0 = DVector::zeros(n);
    if want_grad {
        let pg = PosteriorGrad { k: &k, u: &p * &g_k, php: Some(&p * &g_p * &p) };
        if !opts.detach_conditioning {
            pg.backprop(&mut g_phi, &phis, &residuals, s_inv, 0..s);
        }
        pg.prior(&kbar0, &mut g_lambda0, &mut g_q0);
    }

    let mut pos = 0.0;
    if n_nom >= NOMINAL_DIM {
        let fin = SqrtPosterior::new(&l, &kbar0, &phis, &residuals, whiten, "episode posterior")?;
        let k_f = &fin.mean;
        let idx = [0, 1];
        pos = positivity_loss(k_f.as_slice(), &idx);
        if want_grad && pos > 0.0 && opts.lambda_pos > 0.0 {
            let mut g_kf = DVector::zeros(n);
            for j in idx {
                g_kf[j] = -2.0 * (-k_f[j]).max(0.0) * opts.lambda_pos;
            }
            let pg = PosteriorGrad { k: k_f, u: fin.covariance_times(&g_kf), php: None };
            if !opts.detach_conditioning {
                pg.backprop(&mut g_phi, &phis, &residuals, s_inv, 0..n_t);
            }
            pg.prior(&kbar0, &mut g_lambda0, &mut g_q0);
        }
    }

    let orth = if want_grad && opts.lambda_orth > 0.0 {
        orthogonality(&phis, Some((&mut g_phi, opts.lambda_orth)))
    } else {
        orthogonality(&phis, None)
    };

    let grad = if want_grad {
        for t in 0..n_t {
            let d_net = g_phi[t].columns(n_nom, n - n_nom).into_owned();
            net.backward(&mut tape, tape_idx[t], &d_net)?;
        }
        let g_kbar0 = &lambda0 * &g_q0;
        let g_l = (&g_lambda0 + g_lambda0.transpose()) * &l;
        let mut grad = tape.into_gradient();
        grad.extend(g_kbar0.iter());
        for i in 0..n {
            for j in 0..=i {
                let g = g_l[(i, j)];
                grad.push(if i == j { g * sigmoid(model.prior.factor[tri_index(i, i)]) } else { g });
            }
        }
        Some(grad)
    } else {
        None
    };
    Ok(TaskOutput { nll, orth, pos, grad })
}

/// Loss over a batch of tasks and, if requested, its gradient with respect
/// to [`MetaModel::params`].
pub fn meta_loss(
    model: &MetaModel,
    tasks: &[TaskData],
    opts: &LossOptions,
    want_grad: bool,
) -> Result<(LossTerms, Option<Vec<f64>>)> {
    if tasks.is_empty() {
        return Err(Error::Argument("empty task batch".into()));
    }
    let b = tasks.len() as f64;
    let outputs: Vec<TaskOutput> = tasks
        .par_iter()
        .map(|task| task_loss(model, task, opts, 1.0 / b, want_grad))
        .collect::<Result<_>>()?;
    let mut terms = LossTerms::default();
    let mut grad = want_grad.then(|| vec![0.0; model.num_params()]);
    for out in &outputs {
        terms.nll += out.nll / b;
        terms.orth += out.orth;
        terms.pos += out.pos;
        if let (Some(g), Some(og)) = (grad.as_mut(), out.grad.as_ref()) {
            g.iter_mut().zip(og).for_each(|(a, b)| *a += b);
        }
    }
    terms.total = terms.nll + opts.lambda_orth * terms.orth + opts.lambda_pos * terms.pos;
    Ok((terms, grad))
}

/// Mean target NLL of `model` over `tasks`.
pub fn mean_target_nll(model: &MetaModel, tasks: &[TaskData]) -> Result<f64> {
    let opts = LossOptions { lambda_orth: 0.0, lambda_pos: 0.0, detach_conditioning: false };
    Ok(meta_loss(model, tasks, &opts, false)?.0.nll)
}

/// Root-mean-square correlation between nominal and learned feature columns
/// of the velocity row over the given transitions.
pub fn feature_cross_correlation(model: &MetaModel, tasks: &[TaskData]) -> Result<f64> {
    let n_nom = model.n_nom();
    let n = model.dim();
    if n_nom == 0 || n == n_nom {
        return Err(Error::Argument("cross-correlation needs nominal and learned features".into()));
    }
    let mut gram = DMatrix::zeros(n, n);
    let mut count = 0usize;
    for task in tasks {
        for t in 0..task.len() {
            let phi_net = model.net.forward(&task.states[t], &task.inputs[t])?;
            let phi = assemble_features(&task.phi_nom[t], &phi_net)?;
            let row = phi.row(1).transpose();
            gram += &row * row.transpose();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Argument("no transitions".into()));
    }
    gram /= count as f64;
    let mut sum = 0.0;
    for i in 0..n_nom {
        for j in n_nom..n {
            let denom = (gram[(i, i)] * gram[(j, j)]).sqrt();
            let corr = if denom > 0.0 { gram[(i, j)] / denom } else { 0.0 };
            sum += corr * corr;
        }
    }
    Ok((sum / (n_nom * (n - n_nom)) as f64).sqrt())
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], config: &MetaConfig) {
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= config.learning_rate * mh / (vh.sqrt() + config.adam_eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub nll: f64,
    pub orth_loss: f64,
    pub pos_loss: f64,
    pub total: f64,
}

/// Source of training tasks; `sample` must be a pure function of its arguments.
pub trait TaskSampler: Sync {
    fn sample(&self, seed: u64, index: usize) -> Result<TaskData>;
}

/// Draws soils from the training ranges (test bands excluded), alternating
/// the loose and compact secondary presets by task index, and simulates
/// sampled-input episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainTaskSampler {
    pub config: MetaConfig,
}

/// Uniform draw from `[range] \ (excluded)`.
fn sample_outside<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2], excluded: [f64; 2]) -> f64 {
    let lo_len = (excluded[0].min(range[1]) - range[0]).max(0.0);
    let hi_start = excluded[1].max(range[0]);
    let hi_len = (range[1] - hi_start).max(0.0);
    let u = rng.random_range(0.0..lo_len + hi_len);
    if u < lo_len {
        range[0] + u
    } else {
        hi_start + (u - lo_len)
    }
}

impl TerrainTaskSampler {
    pub fn new(config: &MetaConfig) -> Self {
        TerrainTaskSampler { config: config.clone() }
    }

    /// Soil of task `index` drawn with `rng`.
    pub fn terrain<R: Rng + ?Sized>(&self, rng: &mut R, index: usize) -> (TerrainClass, TerrainParams) {
        let c = &self.config;
        let class = TerrainClass::ALL[index % 2];
        let cohesion = sample_outside(rng, c.cohesion_range_kpa, c.cohesion_excluded_kpa);
        let phi = sample_outside(rng, c.friction_range_deg, c.friction_excluded_deg);
        (class, class.preset().with_strength(cohesion, phi.to_radians()))
    }
}

/// Simulates a sampled-input task episode on `terrain` and splits it at a
/// uniformly drawn point.
fn sample_task<R: Rng + ?Sized>(
    config: &MetaConfig,
    rng: &mut R,
    class: TerrainClass,
    terrain: TerrainParams,
) -> Result<TaskData> {
    let n_t = config.transitions_per_task;
    let split = rng.random_range(0..n_t);
    let episode_seed = rng.random();
    let episode = generate_episode(&terrain, class, &config.rover, n_t, InputPolicy::Sampled, episode_seed)?;
    TaskData::from_episode(&episode, &class.preset(), config.use_nominal, split)
}

impl TaskSampler for TerrainTaskSampler {
    fn sample(&self, seed: u64, index: usize) -> Result<TaskData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (class, terrain) = self.terrain(&mut rng, index);
        sample_task(&self.config, &mut rng, class, terrain)
    }
}

/// Tasks like [`TerrainTaskSampler`] but with cohesion and friction angle
/// drawn from the reserved test bands.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutTaskSampler {
    pub config: MetaConfig,
}

impl HeldOutTaskSampler {
    pub fn new(config: &MetaConfig) -> Self {
        HeldOutTaskSampler { config: config.clone() }
    }
}

impl TaskSampler for HeldOutTaskSampler {
    fn sample(&self, seed: u64, index: usize) -> Result<TaskData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class = TerrainClass::ALL[index % 2];
        let cohesion = rng.random_range(TEST_COHESION_KPA.0..=TEST_COHESION_KPA.1);
        let phi = rng.random_range(TEST_FRICTION_DEG.0..=TEST_FRICTION_DEG.1);
        let terrain = class.preset().with_strength(cohesion, phi.to_radians());
        sample_task(&self.config, &mut rng, class, terrain)
    }
}

/// `n` tasks from `sampler` with seeds derived from `seed`.
pub fn sample_tasks<S: TaskSampler>(sampler: &S, n: usize, seed: u64) -> Result<Vec<TaskData>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    seeds.par_iter().enumerate().map(|(i, &s)| sampler.sample(s, i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: MetaConfig,
    pub model: MetaModel,
    pub optimizer: Adam,
    pub history: Vec<LossRecord>,
    /// Batches skipped because an intermediate matrix lost positive definiteness.
    pub skipped_batches: usize,
}

impl TrainState {
    pub fn new(config: &MetaConfig) -> Result<Self> {
        let model = MetaModel::init(config)?;
        let optimizer = Adam::new(model.num_params());
        Ok(TrainState { config: config.clone(), model, optimizer, history: Vec::new(), skipped_batches: 0 })
    }
}

/// Seeds of the tasks of every batch, drawn from one stream so that runs are
/// reproducible regardless of thread count.
fn batch_seeds(config: &MetaConfig, rng: &mut ChaCha8Rng) -> Vec<u64> {
    (0..config.tasks_per_batch).map(|_| rng.random()).collect()
}

/// Runs `config.iterations` optimizer steps. A non-finite loss aborts with
/// [`Error::Divergence`] carrying the history so far.
pub fn train<S: TaskSampler>(config: &MetaConfig, sampler: &S) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    let opts = LossOptions::from(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a5c);
    for iteration in 0..config.iterations {
        let seeds = batch_seeds(config, &mut rng);
        let tasks: Vec<TaskData> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| sampler.sample(s, i))
            .collect::<Result<_>>()?;
        let (terms, grad) = match meta_loss(&state.model, &tasks, &opts, true) {
            Ok(v) => v,
            Err(Error::NotPositiveDefinite(_)) => {
                state.skipped_batches += 1;
                continue;
            }
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence { iteration, history: state.history });
            }
            Err(e) => return Err(e),
        };
        let grad = grad.expect("gradient requested");
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration, history: state.history });
        }
        state.history.push(LossRecord {
            iteration,
            nll: terms.nll,
            orth_loss: terms.orth,
            pos_loss: terms.pos,
            total: terms.total,
        });
        let mut params = state.model.params();
        state.optimizer.apply(&mut params, &grad, config);
        state.model.set_params(&params)?;
    }
    Ok(state)
}

/// Writes the loss history as CSV.
pub fn write_history_csv<W: Write>(history: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "nll", "orth_loss", "pos_loss", "total"])?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            jsonfmt::fmt_f64(r.nll),
            jsonfmt::fmt_f64(r.orth_loss),
            jsonfmt::fmt_f64(r.pos_loss),
            jsonfmt::fmt_f64(r.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Serialized trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub version: u32,
    pub config: MetaConfig,
    pub net: FeatNetCheckpoint,
    pub prior_params: PriorParams,
    pub prior: BeliefSnapshot,
    pub iterations_run: usize,
    pub skipped_batches: usize,
}

impl ModelCheckpoint {
    pub fn from_state(state: &TrainState) -> Result<Self> {
        Ok(ModelCheckpoint {
            kind: "meta_model".into(),
            version: MODEL_FORMAT_VERSION,
            config: state.config.clone(),
            net: state.model.net.checkpoint(),
            prior_params: state.model.prior.clone(),
            prior: state.model.prior_belief()?.snapshot(),
            iterations_run: state.history.len() + state.skipped_batches,
            skipped_batches: state.skipped_batches,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        jsonfmt::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(text)?;
        if ck.kind != "meta_model" || ck.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model checkpoint kind={} version={}",
                ck.kind, ck.version
            )));
        }
        Ok(ck)
    }

    pub fn restore(&self) -> Result<MetaModel> {
        let net = self.net.restore()?;
        let model = MetaModel {
            net,
            prior: self.prior_params.clone(),
            use_nominal: self.config.use_nominal,
            noise: self.config.noise()?,
            rover: self.config.rover,
        };
        if model.prior.dim() != model.dim() || model.prior.factor.len() != model.dim() * (model.dim() + 1) / 2 {
            return Err(Error::Format("prior size does not match the network".into()));
        }
        Ok(model)
    }
}
