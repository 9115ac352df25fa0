//! Composite Simpson quadrature.

use crate::error::{Error, Result};

/// Composite Simpson rule for a vector-valued integrand over `[a, b]`.
///
/// `n_intervals` must be even and at least 2. Integrating several
/// components at once shares the (usually trigonometric) setup work.
pub fn simpson_vec<const K: usize, F>(f: F, a: f64, b: f64, n_intervals: usize) -> Result<[f64; K]>
where
    F: Fn(f64) -> [f64; K],
{
    if n_intervals < 2 || n_intervals % 2 != 0 {
        return Err(Error::Argument(format!(
            "Simpson rule needs an even interval count >= 2, got {n_intervals}"
        )));
    }
    let h = (b - a) / n_intervals as f64;
    let mut acc = [0.0; K];
    let ends = [f(a), f(b)];
    for e in ends {
        for (s, v) in acc.iter_mut().zip(e) {
            *s += v;
        }
    }
    for i in 1..n_intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        let y = f(a + h * i as f64);
        for (s, v) in acc.iter_mut().zip(y) {
            *s += w * v;
        }
    }
    for s in acc.iter_mut() {
        *s *= h / 3.0;
    }
    Ok(acc)
}

/// Scalar composite Simpson rule.
pub fn simpson<F>(f: F, a: f64, b: f64, n_intervals: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    simpson_vec(|x| [f(x)], a, b, n_intervals).map(|[v]| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_cubics() {
        let v = simpson(|x| 3.0 * x * x * x - x + 2.0, -1.0, 2.0, 2).unwrap();
        // antiderivative 3/4 x^4 - x^2/2 + 2x
        let exact = (0.75 * 16.0 - 2.0 + 4.0) - (0.75 - 0.5 - 2.0);
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn rejects_odd_counts() {
        assert!(matches!(simpson(|x| x, 0.0, 1.0, 3), Err(Error::Argument(_))));
        assert!(simpson(|x| x, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn fourth_order_convergence() {
        let exact = 1.0 - 1.0f64.cos();
        let errs: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&n| (simpson(f64::sin, 0.0, 1.0, n).unwrap() - exact).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
        }
    }
}
