//! Ground-truth planar rocker-bogie simulator.
//!
//! Wheel forces come from quadrature of the stress distribution, are mapped
//! to a net forward force through the suspension contact angles and integrated
//! with an explicit Euler step.

mod equilibrium;
mod io;

pub use equilibrium::{equilibrium_contact, EquilibriumOptions, WheelEquilibrium};
pub use io::{read_episode_jsonl, write_episode_jsonl, EPISODE_FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terramech::{
    wheel_forces_quadrature, TerrainClass, TerrainParams, WheelContact, WheelForces,
    WheelGeometry,
};

/// Sampling ranges for states and wheel inputs.
pub const VELOCITY_RANGE: (f64, f64) = (0.0, 1.0);
pub const TORQUE_RANGE: (f64, f64) = (0.0, 5.0);
pub const SLIP_RANGE: (f64, f64) = (0.0, 1.0);
pub const SINKAGE_RANGE: (f64, f64) = (0.0, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoverConfig {
    /// Rover mass, kg.
    pub mass: f64,
    pub geom: WheelGeometry,
    /// Terrain contact angle `alpha` of each wheel, rad.
    pub contact_angles: [f64; 3],
    /// Integration step, s.
    pub dt: f64,
    pub gravity: f64,
    /// Share of the rover weight carried by each wheel.
    pub load_fraction: [f64; 3],
    /// Process noise standard deviations for `(x, v)`; zero disables noise.
    pub noise_std: [f64; 2],
    /// Simpson intervals per piece of the stress distribution.
    pub quadrature_intervals: usize,
}

impl Default for RoverConfig {
    fn default() -> Self {
        RoverConfig {
            mass: 10.0,
            geom: WheelGeometry::default(),
            contact_angles: [0.0; 3],
            dt: 0.1,
            gravity: 9.81,
            load_fraction: [1.0 / 3.0; 3],
            noise_std: [1e-4, 1e-3],
            quadrature_intervals: 128,
        }
    }
}

impl RoverConfig {
    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if !(self.mass > 0.0 && self.dt > 0.0) {
            return Err(Error::Argument("mass and dt must be positive".into()));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Argument("noise standard deviations must be >= 0".into()));
        }
        if self.quadrature_intervals < 2 || self.quadrature_intervals % 2 != 0 {
            return Err(Error::Argument("quadrature_intervals must be even and >= 2".into()));
        }
        Ok(())
    }

    /// Static vertical load on each wheel, N.
    pub fn wheel_loads(&self) -> [f64; 3] {
        self.load_fraction.map(|f| f * self.mass * self.gravity)
    }

    /// The force-mapping vector `[-s1, -s2, -s3, c1, c2, c3]`.
    pub fn force_map(&self) -> [f64; 6] {
        let a = self.contact_angles;
        [-a[0].sin(), -a[1].sin(), -a[2].sin(), a[0].cos(), a[1].cos(), a[2].cos()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoverState {
    /// Position, m.
    pub x: f64,
    /// Forward velocity, m/s.
    pub v: f64,
}

/// Per-wheel drive torque (N*m), slip and sinkage (m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoverInput {
    pub torque: [f64; 3],
    pub slip: [f64; 3],
    pub sinkage: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: RoverState,
    pub input: RoverInput,
    pub next: RoverState,
}

/// How wheel inputs are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPolicy {
    /// Torque, slip and sinkage drawn independently from their ranges; the
    /// start velocity of every transition is resampled.
    Sampled,
    /// Torque drawn from its range, slip and sinkage solved from the static
    /// wheel load and that torque; the trajectory is chained.
    Consistency,
}

impl InputPolicy {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sampled" => Ok(InputPolicy::Sampled),
            "consistency" => Ok(InputPolicy::Consistency),
            other => Err(Error::Argument(format!("unknown input policy `{other}`"))),
        }
    }
}

/// One episode of transitions under a fixed soil.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// True soil for the whole episode.
    pub terrain: TerrainParams,
    /// Declared soil class; its preset supplies the nominal model's secondary parameters.
    pub terrain_class: TerrainClass,
    pub config: RoverConfig,
    pub policy: InputPolicy,
    pub seed: u64,
    pub transitions: Vec<Transition>,
    /// Steps whose start velocity had to be clamped into the sampling range.
    pub clamped_steps: usize,
    /// Wheel torques moved to the nearest achievable value (consistency mode).
    pub torque_adjustments: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Net forward force from three wheel force sets.
pub fn net_forward_force(forces: &[WheelForces; 3], config: &RoverConfig) -> f64 {
    let s = config.force_map();
    (0..3)
        .map(|w| s[w] * forces[w].normal + s[w + 3] * forces[w].traction)
        .sum()
}

/// Quadrature wheel forces for the given per-wheel slip and sinkage.
pub fn wheel_forces(
    input: &RoverInput,
    terrain: &TerrainParams,
    config: &RoverConfig,
) -> Result<[WheelForces; 3]> {
    let mut out = [WheelForces::default(); 3];
    for (w, f) in out.iter_mut().enumerate() {
        let contact = WheelContact::new(&config.geom, terrain, input.slip[w], input.sinkage[w])?;
        *f = wheel_forces_quadrature(&contact, &config.geom, terrain, config.quadrature_intervals)?;
    }
    Ok(out)
}

/// One Euler step of the true dynamics. Noise is added when `rng` is given
/// and the configured standard deviations are non-zero.
pub fn step<R: Rng + ?Sized>(
    state: &RoverState,
    input: &RoverInput,
    terrain: &TerrainParams,
    config: &RoverConfig,
    rng: Option<&mut R>,
) -> Result<RoverState> {
    let forces = wheel_forces(input, terrain, config)?;
    let fx = net_forward_force(&forces, config);
    let mut next = RoverState {
        x: state.x + config.dt * state.v,
        v: state.v + config.dt * fx / config.mass,
    };
    if let Some(rng) = rng {
        let [sx, sv] = config.noise_std;
        if sx > 0.0 {
            next.x += Normal::new(0.0, sx).expect("valid std").sample(rng);
        }
        if sv > 0.0 {
            next.v += Normal::new(0.0, sv).expect("valid std").sample(rng);
        }
    }
    if !(next.x.is_finite() && next.v.is_finite()) {
        return Err(Error::NonFinite("simulated state".into()));
    }
    Ok(next)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

/// Draws one set of wheel inputs. In consistency mode a torque outside the
/// reachable range of a wheel is redrawn from the reachable part of the
/// nominal torque range and counted in `adjustments`.
fn sample_input<R: Rng + ?Sized>(
    rng: &mut R,
    policy: InputPolicy,
    solvers: &[WheelEquilibrium<'_>],
    adjustments: &mut usize,
) -> Result<RoverInput> {
    let mut input = RoverInput::default();
    match policy {
        InputPolicy::Sampled => {
            for w in 0..3 {
                input.torque[w] = uniform(rng, TORQUE_RANGE);
                input.slip[w] = uniform(rng, SLIP_RANGE);
                input.sinkage[w] = uniform(rng, SINKAGE_RANGE);
            }
        }
        InputPolicy::Consistency => {
            for (w, eq) in solvers.iter().enumerate() {
                let (min, max) = eq.torque_range();
                let mut torque = uniform(rng, TORQUE_RANGE);
                if torque < min || torque > max {
                    let lo = min.max(TORQUE_RANGE.0);
                    let hi = max.min(TORQUE_RANGE.1);
                    if lo > hi {
                        return Err(Error::Saturation { requested: torque, min, max });
                    }
                    *adjustments += 1;
                    torque = uniform(rng, (lo, hi));
                }
                let (slip, z) = eq.solve(torque)?;
                input.torque[w] = torque;
                input.slip[w] = slip;
                input.sinkage[w] = z;
            }
        }
    }
    Ok(input)
}

/// Generates an episode of `length` transitions; deterministic in `seed`.
pub fn generate_episode(
    terrain: &TerrainParams,
    terrain_class: TerrainClass,
    config: &RoverConfig,
    length: usize,
    policy: InputPolicy,
    seed: u64,
) -> Result<Episode> {
    if length == 0 {
        return Err(Error::Argument("episode length must be >= 1".into()));
    }
    terrain.validate()?;
    config.validate()?;
    let loads = config.wheel_loads();
    let opts = EquilibriumOptions { n_intervals: config.quadrature_intervals, ..EquilibriumOptions::default() };
    let solvers: Vec<WheelEquilibrium<'_>> = match policy {
        InputPolicy::Sampled => Vec::new(),
        InputPolicy::Consistency => loads
            .iter()
            .map(|&load| WheelEquilibrium::new(terrain, &config.geom, load, &opts))
            .collect::<Result<_>>()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = RoverState { x: 0.0, v: uniform(&mut rng, VELOCITY_RANGE) };
    let mut transitions = Vec::with_capacity(length);
    let mut clamped_steps = 0;
    let mut torque_adjustments = 0;
    for t in 0..length {
        if t > 0 {
            match policy {
                InputPolicy::Sampled => state.v = uniform(&mut rng, VELOCITY_RANGE),
                InputPolicy::Consistency => {
                    let v = state.v.clamp(VELOCITY_RANGE.0, VELOCITY_RANGE.1);
                    if v != state.v {
                        clamped_steps += 1;
                        state.v = v;
                    }
                }
            }
        }
        let input = sample_input(&mut rng, policy, &solvers, &mut torque_adjustments)?;
        let next = step(&state, &input, terrain, config, Some(&mut rng))?;
        transitions.push(Transition { state, input, next });
        state = next;
    }
    Ok(Episode {
        terrain: *terrain,
        terrain_class,
        config: *config,
        policy,
        seed,
        transitions,
        clamped_steps,
        torque_adjustments,
    })
}
