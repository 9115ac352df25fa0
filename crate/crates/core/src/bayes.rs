//! Conjugate Gaussian inference over linear-in-parameters dynamics.
//!
//! [`GaussianBelief`] holds the shared-parameter posterior in natural form
//! `(q, Lambda)` with `kbar = Lambda^-1 q`; observations `x = Phi k + offset + eps`
//! enter additively. [`MatrixNormalBelief`] is the per-output-dimension
//! matrix-normal model with a rank-1 recursive update, kept for comparison.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| {
        let asym = (m - m.transpose()).abs().max();
        Error::NotPositiveDefinite(format!(
            "{what} ({}x{}, max diagonal {:.3e}, min diagonal {:.3e}, asymmetry {:.3e})",
            m.nrows(),
            m.ncols(),
            m.diagonal().max(),
            m.diagonal().min(),
            asym
        ))
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Observation noise covariance `Sigma_eps` with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    sigma: DMatrix<f64>,
    inv: DMatrix<f64>,
    whitener: DMatrix<f64>,
}

impl NoiseCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::Argument(format!(
                "noise covariance must be square, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if (&sigma - sigma.transpose()).abs().max() > 1e-12 * sigma.abs().max() {
            return Err(Error::Argument("noise covariance is not symmetric".into()));
        }
        let chol = cholesky(&sigma, "noise covariance").map_err(|e| Error::Argument(e.to_string()))?;
        let n = sigma.nrows();
        let whitener = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Argument("noise covariance factor is singular".into()))?;
        Ok(NoiseCovariance { inv: chol.inverse(), sigma, whitener })
    }

    /// Diagonal covariance from per-dimension variances.
    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    /// `W = C^-1` for the Cholesky factor `Sigma = C C'`, so that `W' W = Sigma^-1`.
    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }
}

/// Gaussian posterior predictive over the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDist {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PredictiveDist {
    /// Negative log density of `x`.
    pub fn nll(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "observation has length {}, predictive has {}",
                x.len(),
                self.mean.len()
            )));
        }
        let chol = cholesky(&self.covariance, "predictive covariance")?;
        let e = x - &self.mean;
        let a = chol.solve(&e);
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(0.5 * (e.dot(&a) + logdet + e.len() as f64 * (2.0 * PI).ln()))
    }

    /// Per-dimension standard deviation.
    pub fn marginal_std(&self) -> DVector<f64> {
        self.covariance.diagonal().map(f64::sqrt)
    }
}

/// Gaussian belief over `k = [k_nom; k_net]` in natural parameters.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    q: DVector<f64>,
    lambda: DMatrix<f64>,
    n_nom: usize,
    factor: OnceLock<Cholesky<f64, Dyn>>,
}

impl PartialEq for GaussianBelief {
    fn eq(&self, other: &Self) -> bool {
        self.q == other.q && self.lambda == other.lambda && self.n_nom == other.n_nom
    }
}

impl GaussianBelief {
    /// Belief from natural parameters; `Lambda` must be symmetric positive definite.
    pub fn from_natural(q: DVector<f64>, lambda: DMatrix<f64>, n_nom: usize) -> Result<Self> {
        if !lambda.is_square() || lambda.nrows() != q.len() {
            return Err(Error::Shape(format!(
                "precision {}x{} does not match natural mean of length {}",
                lambda.nrows(),
                lambda.ncols(),
                q.len()
            )));
        }
        if n_nom > q.len() {
            return Err(Error::Shape(format!("n_nom {n_nom} exceeds dimension {}", q.len())));
        }
        let factor = cholesky(&lambda, "precision")?;
        Ok(GaussianBelief { q, lambda, n_nom, factor: OnceLock::from(factor) })
    }

    /// Belief with mean `kbar` and precision `lambda`.
    pub fn from_mean(kbar: DVector<f64>, lambda: DMatrix<f64>, n_nom: usize) -> Result<Self> {
        if lambda.ncols() != kbar.len() {
            return Err(Error::Shape("prior mean and precision disagree".into()));
        }
        let q = &lambda * &kbar;
        Self::from_natural(q, lambda, n_nom)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn n_nom(&self) -> usize {
        self.n_nom
    }

    pub fn n_net(&self) -> usize {
        self.q.len() - self.n_nom
    }

    pub fn natural_mean(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    fn factor(&self) -> Result<&Cholesky<f64, Dyn>> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = cholesky(&self.lambda, "precision")?;
        Ok(self.factor.get_or_init(|| f))
    }

    /// Posterior mean `kbar = Lambda^-1 q`.
    pub fn mean(&self) -> Result<DVector<f64>> {
        let k = self.factor()?.solve(&self.q);
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior mean".into()));
        }
        Ok(k)
    }

    /// Posterior covariance `Lambda^-1`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(self.factor()?.inverse())
    }

    /// Mean and covariance of the first two (nominal) parameters.
    pub fn nominal_marginal(&self) -> Result<(Vector2<f64>, Matrix2<f64>)> {
        if self.n_nom < 2 {
            return Err(Error::Shape(format!("belief has {} nominal parameters", self.n_nom)));
        }
        let k = self.mean()?;
        let s = self.covariance()?;
        Ok((
            Vector2::new(k[0], k[1]),
            Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]),
        ))
    }

    fn check_features(&self, phi: &DMatrix<f64>, offset: &DVector<f64>, noise: &NoiseCovariance) -> Result<()> {
        if phi.ncols() != self.dim() || phi.nrows() != noise.dim() || offset.len() != noise.dim() {
            return Err(Error::Shape(format!(
                "features {}x{}, offset {}, noise {} for belief of dimension {}",
                phi.nrows(),
                phi.ncols(),
                offset.len(),
                noise.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Conditions the belief on `x = Phi k + offset + eps`.
    pub fn update(
        &mut self,
        phi: &DMatrix<f64>,
        x: &DVector<f64>,
        offset: &DVector<f64>,
        noise: &NoiseCovariance,
    ) -> Result<()> {
        self.check_features(phi, offset, noise)?;
        if x.len() != noise.dim() {
            return Err(Error::Shape(format!("observation length {} != {}", x.len(), noise.dim())));
        }
        let pt_si = phi.transpose() * noise.inverse();
        self.lambda += &pt_si * phi;
        symmetrize(&mut self.lambda);
        self.q += pt_si * (x - offset);
        self.factor = OnceLock::new();
        Ok(())
    }

    /// Posterior predictive of `Phi k + offset + eps`.
    pub fn predict(
        &self,
        phi: &DMatrix<f64>,
        offset: &DVector<f64>,
        noise: &NoiseCovariance,
    ) -> Result<PredictiveDist> {
        self.check_features(phi, offset, noise)?;
        let f = self.factor()?;
        let mean = phi * f.solve(&self.q) + offset;
        let mut covariance = phi * f.solve(&phi.transpose()) + noise.matrix();
        symmetrize(&mut covariance);
        Ok(PredictiveDist { mean, covariance })
    }

    pub fn snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot {
            kind: "belief".into(),
            version: BELIEF_FORMAT_VERSION,
            n_nom: self.n_nom,
            n_net: self.n_net(),
            q: self.q.iter().copied().collect(),
            lambda: self.lambda.transpose().iter().copied().collect(),
        }
    }
}

/// Returns `belief` conditioned on one transition.
pub fn palpaca_update(
    belief: &GaussianBelief,
    phi: &DMatrix<f64>,
    x: &DVector<f64>,
    offset: &DVector<f64>,
    noise: &NoiseCovariance,
) -> Result<GaussianBelief> {
    let mut b = belief.clone();
    b.update(phi, x, offset, noise)?;
    Ok(b)
}

pub fn palpaca_predict(
    belief: &GaussianBelief,
    phi: &DMatrix<f64>,
    offset: &DVector<f64>,
    noise: &NoiseCovariance,
) -> Result<PredictiveDist> {
    belief.predict(phi, offset, noise)
}

pub const BELIEF_FORMAT_VERSION: u32 = 1;

/// Serialized belief: natural mean and row-major precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub kind: String,
    pub version: u32,
    pub n_nom: usize,
    pub n_net: usize,
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl BeliefSnapshot {
    pub fn restore(&self) -> Result<GaussianBelief> {
        if self.kind != "belief" || self.version != BELIEF_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported belief snapshot kind={} version={}",
                self.kind, self.version
            )));
        }
        let n = self.n_nom + self.n_net;
        if self.q.len() != n || self.lambda.len() != n * n {
            return Err(Error::Format("belief snapshot sizes disagree with n_nom + n_net".into()));
        }
        GaussianBelief::from_natural(
            DVector::from_column_slice(&self.q),
            DMatrix::from_row_slice(n, n, &self.lambda),
            self.n_nom,
        )
    }
}

/// Matrix-normal belief `K ~ MN(Kbar, Lambda^-1, Sigma_eps)` over the
/// `n_x x n_phi` weights of `x = K phi + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalBelief {
    pub kbar: DMatrix<f64>,
    pub lambda_inv: DMatrix<f64>,
    pub q_acc: DMatrix<f64>,
    pub sigma_eps: NoiseCovariance,
}

impl MatrixNormalBelief {
    pub fn new(kbar0: DMatrix<f64>, lambda0: DMatrix<f64>, sigma_eps: NoiseCovariance) -> Result<Self> {
        if kbar0.nrows() != sigma_eps.dim() || !lambda0.is_square() || lambda0.nrows() != kbar0.ncols() {
            return Err(Error::Shape(format!(
                "prior mean {}x{}, precision {}x{}, noise {}",
                kbar0.nrows(),
                kbar0.ncols(),
                lambda0.nrows(),
                lambda0.ncols(),
                sigma_eps.dim()
            )));
        }
        let lambda_inv = cholesky(&lambda0, "prior precision")?.inverse();
        let q_acc = &kbar0 * &lambda0;
        Ok(MatrixNormalBelief { kbar: kbar0, lambda_inv, q_acc, sigma_eps })
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        Ok(cholesky(&self.lambda_inv, "posterior covariance")?.inverse())
    }

    /// Conditions on `x = K phi + eps` with a rank-1 update of `Lambda^-1`.
    pub fn update(&mut self, phi: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
        if phi.len() != self.kbar.ncols() || x.len() != self.kbar.nrows() {
            return Err(Error::Shape(format!(
                "feature length {}, observation length {} for a {}x{} belief",
                phi.len(),
                x.len(),
                self.kbar.nrows(),
                self.kbar.ncols()
            )));
        }
        let u = &self.lambda_inv * phi;
        let denom = 1.0 + phi.dot(&u);
        self.lambda_inv -= (&u * u.transpose()) / denom;
        symmetrize(&mut self.lambda_inv);
        self.q_acc += x * phi.transpose();
        self.kbar = &self.q_acc * &self.lambda_inv;
        Ok(())
    }

    /// Posterior predictive `N(Kbar phi, (1 + phi' Lambda^-1 phi) Sigma_eps)`.
    pub fn predict(&self, phi: &DVector<f64>) -> Result<PredictiveDist> {
        if phi.len() != self.kbar.ncols() {
            return Err(Error::Shape(format!("feature length {} != {}", phi.len(), self.kbar.ncols())));
        }
        let scale = 1.0 + phi.dot(&(&self.lambda_inv * phi));
        Ok(PredictiveDist { mean: &self.kbar * phi, covariance: self.sigma_eps.matrix() * scale })
    }
}

pub fn alpaca_update(belief: &MatrixNormalBelief, phi: &DVector<f64>, x: &DVector<f64>) -> Result<MatrixNormalBelief> {
    let mut b = belief.clone();
    b.update(phi, x)?;
    Ok(b)
}

pub fn alpaca_predict(belief: &MatrixNormalBelief, phi: &DVector<f64>) -> Result<PredictiveDist> {
    belief.predict(phi)
}
