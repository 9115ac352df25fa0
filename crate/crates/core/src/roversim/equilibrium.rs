//! Inverse wheel model: slip and sinkage that carry a given load and torque.

use crate::error::{Error, Result};
use crate::terramech::{
    wheel_forces_closed_form, wheel_forces_quadrature, TerrainParams, WheelContact, WheelForces,
    WheelGeometry,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumOptions {
    /// Accepted torque residual, N*m.
    pub tol_torque: f64,
    /// Accepted normal-force residual, N.
    pub tol_normal: f64,
    /// Simpson intervals used for the final residual check.
    pub n_intervals: usize,
    /// Largest admissible sinkage as a fraction of the wheel radius.
    pub max_sinkage_fraction: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            tol_torque: 1e-3,
            tol_normal: 1e-2,
            n_intervals: 128,
            max_sinkage_fraction: 0.95,
        }
    }
}

struct Wheel<'a> {
    geom: &'a WheelGeometry,
    soil: &'a TerrainParams,
    n_intervals: usize,
}

impl Wheel<'_> {
    fn closed(&self, slip: f64, z: f64) -> Result<WheelForces> {
        let c = WheelContact::new(self.geom, self.soil, slip, z)?;
        Ok(wheel_forces_closed_form(&c, self.geom, self.soil))
    }

    fn quadrature(&self, slip: f64, z: f64) -> Result<WheelForces> {
        let c = WheelContact::new(self.geom, self.soil, slip, z)?;
        wheel_forces_quadrature(&c, self.geom, self.soil, self.n_intervals)
    }
}

/// Bisection for a root of `f` on `[lo, hi]` given `f(lo) <= 0 <= f(hi)`.
fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid == lo || mid == hi {
            return Ok(mid);
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Number of slip samples used to locate the torque peak.
const SLIP_SCAN: usize = 32;

/// Inverse wheel model for a fixed soil and vertical load.
///
/// Along the curve of contacts that carry the load, torque is not monotone in
/// slip: it rises from `i = 0` to a peak and may fall slightly before `i = 1`.
/// The solver therefore returns the smallest slip that transmits a requested
/// torque, and reports the reachable torque range `[torque_min, torque_max]`.
pub struct WheelEquilibrium<'a> {
    wheel: Wheel<'a>,
    load: f64,
    z_max: f64,
    opts: EquilibriumOptions,
    slip_min: f64,
    slip_peak: f64,
    torque_min: f64,
    torque_max: f64,
}

impl<'a> WheelEquilibrium<'a> {
    pub fn new(
        terrain: &'a TerrainParams,
        geom: &'a WheelGeometry,
        load: f64,
        opts: &EquilibriumOptions,
    ) -> Result<Self> {
        if !load.is_finite() || load < 0.0 {
            return Err(Error::Argument(format!("wheel load must be finite and non-negative, got {load}")));
        }
        let mut eq = WheelEquilibrium {
            wheel: Wheel { geom, soil: terrain, n_intervals: opts.n_intervals },
            load,
            z_max: opts.max_sinkage_fraction * geom.r,
            opts: *opts,
            slip_min: 0.0,
            slip_peak: 0.0,
            torque_min: 0.0,
            torque_max: 0.0,
        };
        if load == 0.0 {
            return Ok(eq);
        }
        let samples: Vec<(f64, f64)> = (0..=SLIP_SCAN)
            .map(|k| {
                let i = k as f64 / SLIP_SCAN as f64;
                eq.torque_at(i).map(|m| (i, m))
            })
            .collect::<Result<_>>()?;
        let k_peak = (0..samples.len())
            .max_by(|&a, &b| samples[a].1.total_cmp(&samples[b].1))
            .expect("non-empty scan");
        let (slip_peak, torque_max) = if k_peak == 0 || k_peak == SLIP_SCAN {
            samples[k_peak]
        } else {
            eq.golden_max(samples[k_peak - 1].0, samples[k_peak + 1].0)?
        };
        let (slip_min, torque_min) = samples[..=k_peak]
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty scan");
        eq.slip_min = slip_min;
        eq.slip_peak = slip_peak;
        eq.torque_min = torque_min;
        eq.torque_max = torque_max;
        Ok(eq)
    }

    /// Torque range (N*m) reachable while carrying the load.
    pub fn torque_range(&self) -> (f64, f64) {
        (self.torque_min, self.torque_max)
    }

    /// Slip at which the transmitted torque peaks.
    pub fn slip_at_peak(&self) -> f64 {
        self.slip_peak
    }

    /// Sinkage (m) that carries the load at the given slip.
    pub fn sinkage_for_load(&self, slip: f64) -> Result<f64> {
        let capacity = self.wheel.closed(slip, self.z_max)?.normal;
        if capacity < self.load {
            return Err(Error::BearingCapacity { requested: self.load, capacity });
        }
        bisect(|z| Ok(self.wheel.closed(slip, z)?.normal - self.load), 0.0, self.z_max, 1e-15)
    }

    fn torque_at(&self, slip: f64) -> Result<f64> {
        let z = self.sinkage_for_load(slip)?;
        Ok(self.wheel.closed(slip, z)?.torque)
    }

    fn golden_max(&self, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = self.torque_at(x1)?;
        let mut f2 = self.torque_at(x2)?;
        while b - a > 1e-12 {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = self.torque_at(x2)?;
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = self.torque_at(x1)?;
            }
        }
        Ok(if f1 > f2 { (x1, f1) } else { (x2, f2) })
    }

    /// Smallest slip, with its sinkage, that transmits `torque`.
    ///
    /// A bisection on the closed-form forces brackets the solution; a damped
    /// Newton iteration with a finite-difference Jacobian then polishes it
    /// against the quadrature forces.
    pub fn solve(&self, torque: f64) -> Result<(f64, f64)> {
        if !torque.is_finite() {
            return Err(Error::NonFinite("equilibrium torque".into()));
        }
        let tol = self.opts.tol_torque;
        let saturated = || Error::Saturation { requested: torque, min: self.torque_min, max: self.torque_max };
        if self.load == 0.0 {
            return if torque.abs() <= tol { Ok((0.0, 0.0)) } else { Err(saturated()) };
        }
        let slip = if torque <= self.torque_min {
            if self.torque_min - torque > tol {
                return Err(saturated());
            }
            self.slip_min
        } else if torque >= self.torque_max {
            if torque - self.torque_max > tol {
                return Err(saturated());
            }
            self.slip_peak
        } else {
            bisect(|i| Ok(self.torque_at(i)? - torque), self.slip_min, self.slip_peak, 1e-15)?
        };
        let z = self.sinkage_for_load(slip)?;
        polish(&self.wheel, slip, z, self.load, torque, self.z_max, &self.opts)
    }
}

/// Slip and sinkage `(i, z)` for which the wheel carries `load` (N) while
/// transmitting `torque` (N*m); see [`WheelEquilibrium`].
///
/// Torques outside the reachable range give [`Error::Saturation`] carrying
/// that range.
pub fn equilibrium_contact(
    torque: f64,
    terrain: &TerrainParams,
    geom: &WheelGeometry,
    load: f64,
    opts: &EquilibriumOptions,
) -> Result<(f64, f64)> {
    WheelEquilibrium::new(terrain, geom, load, opts)?.solve(torque)
}

fn polish(
    wheel: &Wheel<'_>,
    mut slip: f64,
    mut z: f64,
    load: f64,
    torque: f64,
    z_max: f64,
    opts: &EquilibriumOptions,
) -> Result<(f64, f64)> {
    let residual = |i: f64, z: f64| -> Result<[f64; 2]> {
        let f = wheel.quadrature(i, z)?;
        Ok([f.normal - load, f.torque - torque])
    };
    let merit = |r: [f64; 2]| (r[0] / opts.tol_normal).powi(2) + (r[1] / opts.tol_torque).powi(2);
    let mut r = residual(slip, z)?;
    for _ in 0..30 {
        if r[0].abs() <= 1e-2 * opts.tol_normal && r[1].abs() <= 1e-2 * opts.tol_torque {
            break;
        }
        let hi = if slip + 1e-7 <= 1.0 { 1e-7 } else { -1e-7 };
        let hz = 1e-7 * z.max(1e-4) * if z + 1e-6 < z_max { 1.0 } else { -1.0 };
        let ri = residual(slip + hi, z)?;
        let rz = residual(slip, z + hz)?;
        let j = [
            [(ri[0] - r[0]) / hi, (rz[0] - r[0]) / hz],
            [(ri[1] - r[1]) / hi, (rz[1] - r[1]) / hz],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let di = -(j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let dz = -(-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        let mut damping = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let ni = (slip + damping * di).clamp(0.0, 1.0);
            let nz = (z + damping * dz).clamp(0.0, z_max);
            let nr = residual(ni, nz)?;
            if merit(nr) < merit(r) {
                slip = ni;
                z = nz;
                r = nr;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if r[0].abs() <= opts.tol_normal && r[1].abs() <= opts.tol_torque {
        Ok((slip, z))
    } else {
        Err(Error::NoConvergence { residual_normal: r[0], residual_torque: r[1] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terramech::{COMPACT_SAND, LOOSE_SAND};
    use proptest::prelude::*;

    const GEOM: WheelGeometry = WheelGeometry { r: 0.4, b: 0.1 };

    fn forward(soil: &TerrainParams, i: f64, z: f64) -> WheelForces {
        let c = WheelContact::new(&GEOM, soil, i, z).unwrap();
        wheel_forces_quadrature(&c, &GEOM, soil, 128).unwrap()
    }

    #[test]
    fn zero_load_and_torque_is_the_free_wheel() {
        let (i, z) = equilibrium_contact(0.0, &LOOSE_SAND, &GEOM, 0.0, &Default::default()).unwrap();
        assert_eq!((i, z), (0.0, 0.0));
    }

    #[test]
    fn compact_sand_third_of_the_weight() {
        let opts = EquilibriumOptions::default();
        let load = 10.0 * 9.81 / 3.0;
        let (i, z) = equilibrium_contact(1.5, &COMPACT_SAND, &GEOM, load, &opts).unwrap();
        assert!((0.0..=1.0).contains(&i));
        assert!(z > 0.0 && z < 0.1);
        let f = forward(&COMPACT_SAND, i, z);
        assert!((f.torque - 1.5).abs() < 1e-3);
        assert!((f.normal - load).abs() < 1e-2);
        // Two newton-metres is beyond what this contact can transmit.
        match equilibrium_contact(2.0, &COMPACT_SAND, &GEOM, load, &opts) {
            Err(Error::Saturation { min, max, .. }) => assert!(min < 1.5 && max > 1.5 && max < 2.0),
            other => panic!("expected saturation, got {other:?}"),
        }
    }

    #[test]
    fn torque_peaks_inside_the_slip_range() {
        let load = 10.0 * 9.81 / 3.0;
        let opts = EquilibriumOptions::default();
        for soil in [LOOSE_SAND, COMPACT_SAND] {
            let eq = WheelEquilibrium::new(&soil, &GEOM, load, &opts).unwrap();
            let (lo, hi) = eq.torque_range();
            let i_peak = eq.slip_at_peak();
            let z = eq.sinkage_for_load(i_peak).unwrap();
            assert!((forward(&soil, i_peak, z).torque - hi).abs() < 1e-3);
            for k in 0..=20 {
                let i = k as f64 / 20.0;
                let m = forward(&soil, i, eq.sinkage_for_load(i).unwrap()).torque;
                assert!(m >= lo - 1e-3 && m <= hi + 1e-3, "{m} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn oversized_torque_saturates() {
        let load = 10.0 * 9.81 / 3.0;
        match equilibrium_contact(500.0, &LOOSE_SAND, &GEOM, load, &Default::default()) {
            Err(Error::Saturation { min, max, .. }) => assert!(min < max && max < 500.0),
            other => panic!("expected saturation, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn inverse_recovers_forward_contact(
            i in 0.02..0.98f64, z in 0.002..0.08f64, compact in proptest::bool::ANY
        ) {
            let soil = if compact { COMPACT_SAND } else { LOOSE_SAND };
            let f = forward(&soil, i, z);
            let eq = WheelEquilibrium::new(&soil, &GEOM, f.normal, &Default::default()).unwrap();
            // Past the torque peak the same torque is also reached at lower slip.
            prop_assume!(i < eq.slip_at_peak() - 1e-3);
            let (ri, rz) = eq.solve(f.torque).unwrap();
            prop_assert!((ri - i).abs() < 1e-4, "slip {} vs {}", ri, i);
            prop_assert!((rz - z).abs() < 1e-4, "sinkage {} vs {}", rz, z);
        }
    }
}
