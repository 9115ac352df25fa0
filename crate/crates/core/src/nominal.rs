//! Grey-box rover model that is affine in cohesion and `tan(phi)`, and the two
//! least-squares terrain estimators built on it.
//!
//! The nominal parameter vector is `[c, tan(phi)]` with `c` in kPa.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roversim::{RoverConfig, RoverInput, RoverState, Transition};
use crate::terramech::{
    max_stresses, stress_coefficients, TerrainParams, WheelContact, WheelGeometry, THETA_EPS,
};

/// Relative singular-value cutoff of the pseudo-inverse.
pub const RANK_RTOL: f64 = 1e-10;

const KPA: f64 = 1e3;

/// Parameter-coefficient block and parameter-free remainder of one discrete
/// step: `x_next = phi_nom * [c_kpa, tan_phi] + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalFeatures {
    pub phi_nom: Matrix2<f64>,
    pub offset: Vector2<f64>,
}

impl NominalFeatures {
    pub fn predict(&self, cohesion_kpa: f64, tan_phi: f64) -> Vector2<f64> {
        self.phi_nom * Vector2::new(cohesion_kpa, tan_phi) + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainEstimate {
    pub cohesion_kpa: f64,
    pub tan_phi: f64,
    /// Marginal posterior covariance of `(c_kpa, tan_phi)`; `None` for point estimators.
    pub covariance: Option<Matrix2<f64>>,
}

impl TerrainEstimate {
    pub fn friction_angle(&self) -> f64 {
        self.tan_phi.atan()
    }
}

/// Rows `Q`, `R` with `N = Q . [c, tan(phi), 1]` and `T = R . [c, tan(phi), 1]`,
/// `c` in Pa.
pub fn qr_rows(contact: &WheelContact) -> ([f64; 3], [f64; 3]) {
    let f = contact.coeffs;
    let (sm, a) = (contact.sigma_m, contact.a);
    let q = [-f.f0 * (f.f3 + a * f.f2), -f.f0 * sm * a * f.f2, f.f0 * sm * f.f1];
    let r = [f.f0 * (-f.f4 + a * f.f1), f.f0 * sm * a * f.f1, f.f0 * sm * f.f2];
    (q, r)
}

/// Coefficients `a` with `F_x = a . [c, tan(phi), 1]` (`c` in Pa), evaluated
/// with the secondary parameters of `secondary`.
pub fn forward_force_row(
    input: &RoverInput,
    config: &RoverConfig,
    secondary: &TerrainParams,
) -> Result<[f64; 3]> {
    let s = config.force_map();
    let mut row = [0.0; 3];
    for w in 0..3 {
        let contact = WheelContact::new(&config.geom, secondary, input.slip[w], input.sinkage[w])?;
        let (q, r) = qr_rows(&contact);
        for j in 0..3 {
            row[j] += s[w] * q[j] + s[w + 3] * r[j];
        }
    }
    Ok(row)
}

/// Euler-discretised nominal dynamics for one step.
pub fn nominal_dynamics_features(
    state: &RoverState,
    input: &RoverInput,
    config: &RoverConfig,
    secondary: &TerrainParams,
) -> Result<NominalFeatures> {
    let a = forward_force_row(input, config, secondary)?;
    let g = config.dt / config.mass;
    Ok(NominalFeatures {
        phi_nom: Matrix2::new(0.0, 0.0, g * a[0] * KPA, g * a[1]),
        offset: Vector2::new(state.x + config.dt * state.v, state.v + g * a[2]),
    })
}

/// Least squares with a rank-revealing SVD; fails unless `a` has full column rank.
pub(crate) fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>, rtol: f64) -> Result<DVector<f64>> {
    let cols = a.ncols();
    if a.nrows() < cols {
        return Err(Error::RankDeficient { rank: a.nrows(), required: cols });
    }
    if a.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares data".into()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| smax > 0.0 && s > rtol * smax)
        .count();
    if rank < cols {
        return Err(Error::RankDeficient { rank, required: cols });
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let uty = u.transpose() * y;
    let scaled = DVector::from_iterator(
        cols,
        uty.iter().zip(svd.singular_values.iter()).map(|(c, s)| c / s),
    );
    Ok(vt.transpose() * scaled)
}

/// Ordinary least squares for `(c, tan(phi))` on the velocity rows of the
/// nominal model.
pub fn linear_ls_estimate(
    transitions: &[Transition],
    config: &RoverConfig,
    secondary: &TerrainParams,
) -> Result<TerrainEstimate> {
    let n = transitions.len();
    let mut a = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for (row, tr) in transitions.iter().enumerate() {
        let f = nominal_dynamics_features(&tr.state, &tr.input, config, secondary)?;
        a[(row, 0)] = f.phi_nom[(1, 0)];
        a[(row, 1)] = f.phi_nom[(1, 1)];
        y[row] = tr.next.v - f.offset[1];
    }
    let k = lstsq(&a, &y, RANK_RTOL)?;
    Ok(TerrainEstimate { cohesion_kpa: k[0], tan_phi: k[1], covariance: None })
}

/// Per-wheel quantities the force-based baseline consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelMeasurement {
    /// Vertical load, N.
    pub normal: f64,
    /// Drive torque, N*m.
    pub torque: f64,
    pub slip: f64,
    /// Sinkage, m.
    pub sinkage: f64,
}

/// Wheel measurements of a transition: static loads and commanded torques.
pub fn wheel_measurements(tr: &Transition, config: &RoverConfig) -> [WheelMeasurement; 3] {
    let loads = config.wheel_loads();
    [0, 1, 2].map(|w| WheelMeasurement {
        normal: loads[w],
        torque: tr.input.torque[w],
        slip: tr.input.slip[w],
        sinkage: tr.input.sinkage[w],
    })
}

/// Force-based estimator: least squares on the normal-force and torque rows of
/// the closed-form wheel model, assuming the stress peak sits halfway into the
/// contact patch (`theta_m = theta1 / 2`).
pub fn iagnemma_estimate(
    samples: &[WheelMeasurement],
    geom: &WheelGeometry,
    secondary: &TerrainParams,
) -> Result<TerrainEstimate> {
    let mut a = DMatrix::zeros(2 * samples.len(), 2);
    let mut y = DVector::zeros(2 * samples.len());
    let half = 0.5 * geom.r * geom.r * geom.b;
    for (s, m) in samples.iter().enumerate() {
        let theta1 = (1.0 - m.sinkage / geom.r).clamp(-1.0, 1.0).acos();
        let (rn, rm) = (2 * s, 2 * s + 1);
        y[rn] = m.normal;
        y[rm] = m.torque;
        if theta1 < 2.0 * THETA_EPS {
            continue;
        }
        let theta_m = 0.5 * theta1;
        let f = stress_coefficients(theta1, theta_m, geom)?;
        let st = max_stresses(theta1, theta_m, m.slip, geom, secondary)?;
        a[(rn, 0)] = f.f0 * (-f.f3 - st.a * f.f2) * KPA;
        a[(rn, 1)] = -f.f0 * st.sigma_m * st.a * f.f2;
        y[rn] -= f.f0 * st.sigma_m * f.f1;
        a[(rm, 0)] = half * (st.a * theta1 + theta_m) * KPA;
        a[(rm, 1)] = half * st.sigma_m * st.a * theta1;
    }
    let k = lstsq(&a, &y, RANK_RTOL)?;
    Ok(TerrainEstimate { cohesion_kpa: k[0], tan_phi: k[1], covariance: None })
}
