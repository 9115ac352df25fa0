//! Rigid-wheel / deformable-soil interaction.
//!
//! Angles are measured from the vertical through the wheel axle. The wheel
//! first touches the soil at `theta1`, loses contact at `theta2 = 0` and the
//! stresses peak at `theta_m`. Forces come out in N and torques in N*m; soil
//! strengths are stored in Pa.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quadrature::simpson_vec;

/// Guard band keeping `theta_m` strictly inside `(0, theta1)`.
pub const THETA_EPS: f64 = 1e-9;

/// Soil description.
///
/// `cohesion`, `k_c` and `k_phi` are in Pa (the Bekker moduli are quoted in
/// "kPa" in the usual tables, i.e. kN/m^(n+1) and kN/m^(n+2)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainParams {
    /// Cohesion `c`, Pa.
    pub cohesion: f64,
    /// Internal friction angle `phi`, rad.
    pub friction_angle: f64,
    /// Cohesive sinkage modulus, Pa-scaled.
    pub k_c: f64,
    /// Frictional sinkage modulus, Pa-scaled.
    pub k_phi: f64,
    /// Sinkage exponent.
    pub n: f64,
    /// Shear deformation modulus, m.
    pub k: f64,
    /// Maximum-stress-angle coefficients.
    pub c1: f64,
    pub c2: f64,
}

const fn deg(x: f64) -> f64 {
    x * PI / 180.0
}

/// Loose sand. Secondary parameters from the Wong-Reece tables; `c`, `phi`
/// sit at the low end of the sand band.
pub const LOOSE_SAND: TerrainParams = TerrainParams {
    cohesion: 0.7e3,
    friction_angle: deg(28.0),
    k_c: 0.9e3,
    k_phi: 1523.4e3,
    n: 1.1,
    k: 0.025,
    c1: 0.18,
    c2: 0.32,
};

/// Compact sand.
pub const COMPACT_SAND: TerrainParams = TerrainParams {
    cohesion: 1.3e3,
    friction_angle: deg(35.0),
    k_c: 0.9e3,
    k_phi: 1523.4e3,
    n: 0.47,
    k: 0.038,
    c1: 0.43,
    c2: 0.32,
};

/// Named soil classes with representative secondary parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainClass {
    LooseSand,
    CompactSand,
}

impl TerrainClass {
    pub const ALL: [TerrainClass; 2] = [TerrainClass::LooseSand, TerrainClass::CompactSand];

    pub fn preset(self) -> TerrainParams {
        match self {
            TerrainClass::LooseSand => LOOSE_SAND,
            TerrainClass::CompactSand => COMPACT_SAND,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TerrainClass::LooseSand => "loose_sand",
            TerrainClass::CompactSand => "compact_sand",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "loose_sand" => Ok(TerrainClass::LooseSand),
            "compact_sand" => Ok(TerrainClass::CompactSand),
            other => Err(Error::Argument(format!(
                "unknown terrain preset `{other}` (expected loose_sand or compact_sand)"
            ))),
        }
    }
}

impl std::fmt::Display for TerrainClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl TerrainParams {
    /// Same secondary parameters, new strength parameters (`c` in kPa, `phi` in rad).
    pub fn with_strength(self, cohesion_kpa: f64, friction_angle: f64) -> Self {
        TerrainParams {
            cohesion: cohesion_kpa * 1e3,
            friction_angle,
            ..self
        }
    }

    pub fn cohesion_kpa(&self) -> f64 {
        self.cohesion * 1e-3
    }

    pub fn tan_phi(&self) -> f64 {
        self.friction_angle.tan()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.cohesion,
            self.friction_angle,
            self.k_c,
            self.k_phi,
            self.n,
            self.k,
            self.c1,
            self.c2,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("terrain parameter".into()));
        }
        if self.cohesion < 0.0 {
            return Err(Error::Argument("cohesion must be >= 0".into()));
        }
        if !(0.0..PI / 2.0).contains(&self.friction_angle) {
            return Err(Error::Argument("friction angle must lie in [0, pi/2)".into()));
        }
        if self.n <= 0.0 || self.k <= 0.0 || self.c1 <= 0.0 || self.c2 < 0.0 {
            return Err(Error::Argument(
                "need n > 0, k > 0, c1 > 0 and c2 >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelGeometry {
    /// Radius, m.
    pub r: f64,
    /// Width, m.
    pub b: f64,
}

impl Default for WheelGeometry {
    fn default() -> Self {
        WheelGeometry { r: 0.4, b: 0.1 }
    }
}

impl WheelGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.b > 0.0) {
            return Err(Error::Argument("wheel radius and width must be positive".into()));
        }
        Ok(())
    }
}

/// The geometric factors `f0..f4` of the closed-form force expressions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StressCoefficients {
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxStresses {
    pub sigma_m: f64,
    pub tau_m: f64,
    /// Shear modulation factor `A` in `[0, 1)`.
    pub a: f64,
}

/// Normal force, traction and drive torque on one wheel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelForces {
    pub normal: f64,
    pub traction: f64,
    pub torque: f64,
}

/// Entry angle and angle of maximum stress for sinkage `z` and slip `i`.
pub fn contact_angles(
    geom: &WheelGeometry,
    z: f64,
    slip: f64,
    params: &TerrainParams,
) -> Result<(f64, f64)> {
    if !z.is_finite() || z < 0.0 {
        return Err(Error::Domain(format!("sinkage must be >= 0, got {z}")));
    }
    if z >= geom.r {
        return Err(Error::Domain(format!(
            "sinkage {z} m >= wheel radius {} m (wheel fully buried)",
            geom.r
        )));
    }
    let theta1 = (1.0 - z / geom.r).acos();
    let theta_m = (params.c1 + slip * params.c2) * theta1;
    Ok((theta1, theta_m))
}

/// Closed-form geometric coefficients. Requires `0 < theta_m < theta1`.
pub fn stress_coefficients(
    theta1: f64,
    theta_m: f64,
    geom: &WheelGeometry,
) -> Result<StressCoefficients> {
    if !(theta_m > 0.0 && theta_m < theta1) {
        return Err(Error::Singularity(format!(
            "need 0 < theta_m < theta1, got theta_m = {theta_m}, theta1 = {theta1}"
        )));
    }
    let (s1, c1) = theta1.sin_cos();
    let (sm, cm) = theta_m.sin_cos();
    Ok(StressCoefficients {
        f0: geom.r * geom.b / (theta_m * (theta1 - theta_m)),
        f1: -theta_m * c1 + theta1 * cm - theta1 + theta_m,
        f2: theta_m * s1 - theta1 * sm,
        f3: theta1 * sm - theta_m * sm - theta_m * theta1 + theta_m * theta_m,
        f4: theta1 * cm - theta_m * cm + theta_m - theta1,
    })
}

/// Peak radial and shear stresses (Pa) and the shear modulation factor.
pub fn max_stresses(
    theta1: f64,
    theta_m: f64,
    slip: f64,
    geom: &WheelGeometry,
    params: &TerrainParams,
) -> Result<MaxStresses> {
    let mut base = geom.r * (theta_m.cos() - theta1.cos());
    if base < 0.0 {
        // cos is only monotone up to rounding
        if theta_m <= theta1 {
            base = 0.0;
        } else if params.n.fract() != 0.0 {
            return Err(Error::Domain(format!(
                "negative sinkage base {base} with non-integer exponent {}",
                params.n
            )));
        }
    }
    let sigma_m = (params.k_c / geom.b + params.k_phi) * base.powf(params.n);
    let bracket = theta1 - theta_m - (1.0 - slip) * (theta1.sin() - theta_m.sin());
    let a = -(-(geom.r / params.k) * bracket).exp_m1();
    let tau_m = (params.cohesion + sigma_m * params.tan_phi()) * a;
    Ok(MaxStresses { sigma_m, tau_m, a })
}

/// Full interaction state of one wheel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelContact {
    pub slip: f64,
    /// Sinkage, m.
    pub sinkage: f64,
    pub theta1: f64,
    pub theta2: f64,
    /// Angle of maximum stress after the singularity guard.
    pub theta_m: f64,
    pub sigma_m: f64,
    pub tau_m: f64,
    pub a: f64,
    pub coeffs: StressCoefficients,
}

impl WheelContact {
    /// Evaluates the contact for slip `slip` and sinkage `z`.
    ///
    /// `theta_m` is clamped into `[THETA_EPS, theta1 - THETA_EPS]`; a contact
    /// patch narrower than `2 * THETA_EPS` is treated as no contact at all.
    pub fn new(geom: &WheelGeometry, params: &TerrainParams, slip: f64, z: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&slip) {
            return Err(Error::Domain(format!("slip must lie in [0, 1], got {slip}")));
        }
        let (theta1, theta_m_raw) = contact_angles(geom, z, slip, params)?;
        if theta1 < 2.0 * THETA_EPS {
            return Ok(WheelContact {
                slip,
                sinkage: z,
                theta1,
                theta2: 0.0,
                theta_m: 0.0,
                sigma_m: 0.0,
                tau_m: 0.0,
                a: 0.0,
                coeffs: StressCoefficients::default(),
            });
        }
        let theta_m = theta_m_raw.clamp(THETA_EPS, theta1 - THETA_EPS);
        let coeffs = stress_coefficients(theta1, theta_m, geom)?;
        let s = max_stresses(theta1, theta_m, slip, geom, params)?;
        Ok(WheelContact {
            slip,
            sinkage: z,
            theta1,
            theta2: 0.0,
            theta_m,
            sigma_m: s.sigma_m,
            tau_m: s.tau_m,
            a: s.a,
            coeffs,
        })
    }

    pub fn in_contact(&self) -> bool {
        self.theta1 >= 2.0 * THETA_EPS
    }
}

/// Closed-form `N`, `T`, `M` for the piecewise-linear stress distribution.
pub fn wheel_forces_closed_form(
    contact: &WheelContact,
    geom: &WheelGeometry,
    params: &TerrainParams,
) -> WheelForces {
    if !contact.in_contact() {
        return WheelForces::default();
    }
    let StressCoefficients { f0, f1, f2, f3, f4 } = contact.coeffs;
    let (sm, tm, c) = (contact.sigma_m, contact.tau_m, params.cohesion);
    WheelForces {
        normal: f0 * (sm * f1 - tm * f2 - c * f3),
        traction: f0 * (sm * f2 + tm * f1 - c * f4),
        torque: 0.5 * geom.r * geom.r * geom.b * (tm * contact.theta1 + c * contact.theta_m),
    }
}

/// Piecewise-linear stress distribution over the contact patch.
///
/// Radial stress rises from 0 at `theta1` to `sigma_m` at `theta_m` and falls
/// back to 0 at `theta2 = 0`. Shear stress rises from 0 at `theta1` to `tau_m`
/// and then runs linearly to the cohesion `c` at `theta2`.
#[derive(Debug, Clone, Copy)]
pub struct LinearStressProfile {
    pub theta1: f64,
    pub theta_m: f64,
    pub sigma_m: f64,
    pub tau_m: f64,
    pub cohesion: f64,
}

impl LinearStressProfile {
    pub fn new(contact: &WheelContact, params: &TerrainParams) -> Self {
        LinearStressProfile {
            theta1: contact.theta1,
            theta_m: contact.theta_m,
            sigma_m: contact.sigma_m,
            tau_m: contact.tau_m,
            cohesion: params.cohesion,
        }
    }

    pub fn sigma(&self, theta: f64) -> f64 {
        if theta >= self.theta_m {
            self.sigma_m * (self.theta1 - theta) / (self.theta1 - self.theta_m)
        } else {
            self.sigma_m * theta / self.theta_m
        }
    }

    pub fn tau(&self, theta: f64) -> f64 {
        if theta >= self.theta_m {
            self.tau_m * (self.theta1 - theta) / (self.theta1 - self.theta_m)
        } else {
            self.cohesion + (self.tau_m - self.cohesion) * theta / self.theta_m
        }
    }
}

/// Integrates an arbitrary stress distribution over `[theta2, theta1]`.
///
/// The range is split at each breakpoint (kinks of the profile) and every
/// piece gets `n_intervals` Simpson intervals. The returned normal force is
/// the vertical load `W` and the traction is the drawbar pull `DP`.
pub fn integrate_stress_profile<S, T>(
    sigma: S,
    tau: T,
    theta2: f64,
    theta1: f64,
    breakpoints: &[f64],
    geom: &WheelGeometry,
    n_intervals: usize,
) -> Result<WheelForces>
where
    S: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let mut knots = vec![theta2];
    knots.extend(breakpoints.iter().copied().filter(|&t| t > theta2 && t < theta1));
    knots.push(theta1);
    let integrand = |theta: f64| {
        let (s, c) = theta.sin_cos();
        let sg = sigma(theta);
        let ta = tau(theta);
        [sg * c + ta * s, ta * c - sg * s, ta]
    };
    let mut sum = [0.0; 3];
    for w in knots.windows(2) {
        let piece = simpson_vec(integrand, w[0], w[1], n_intervals)?;
        for (acc, v) in sum.iter_mut().zip(piece) {
            *acc += v;
        }
    }
    let rb = geom.r * geom.b;
    Ok(WheelForces {
        normal: rb * sum[0],
        traction: rb * sum[1],
        torque: geom.r * rb * sum[2],
    })
}

/// Forces by Simpson quadrature of the force/moment balance integrals.
pub fn wheel_forces_quadrature(
    contact: &WheelContact,
    geom: &WheelGeometry,
    params: &TerrainParams,
    n_intervals: usize,
) -> Result<WheelForces> {
    if n_intervals < 2 || n_intervals % 2 != 0 {
        return Err(Error::Argument(format!(
            "Simpson rule needs an even interval count >= 2, got {n_intervals}"
        )));
    }
    if !contact.in_contact() {
        return Ok(WheelForces::default());
    }
    let profile = LinearStressProfile::new(contact, params);
    integrate_stress_profile(
        |t| profile.sigma(t),
        |t| profile.tau(t),
        contact.theta2,
        contact.theta1,
        &[contact.theta_m],
        geom,
        n_intervals,
    )
}
