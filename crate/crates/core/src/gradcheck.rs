//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Gradients below this magnitude are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coords_checked: usize,
    pub worst_coord: Option<usize>,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// With `max_coords = Some(n)` and more than `n` coordinates, a seeded
/// random subset of `n` coordinates is checked.
pub fn central_difference_check(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> FdReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let coords: Vec<usize> = match max_coords {
        Some(n) if n < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, x.len(), n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..x.len()).collect(),
    };
    let mut probe = x.to_vec();
    let mut report = FdReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        coords_checked: coords.len(),
        worst_coord: None,
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        report.max_absolute_error = report.max_absolute_error.max((analytic[i] - numeric).abs());
        if rel > report.max_relative_error || report.worst_coord.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            report.worst_coord = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_of_linear_model_is_exact() {
        // f(w) = 0.5 |A w - b|^2
        let a = [[1.0, 2.0, -1.0], [0.5, -0.3, 2.0]];
        let b = [0.7, -1.2];
        let f = |w: &[f64]| {
            a.iter()
                .zip(&b)
                .map(|(row, bi)| {
                    let r: f64 = row.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - bi;
                    0.5 * r * r
                })
                .sum::<f64>()
        };
        let w = [0.3, -0.8, 1.5];
        let mut grad = [0.0; 3];
        for (row, bi) in a.iter().zip(&b) {
            let r: f64 = row.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() - bi;
            for (g, x) in grad.iter_mut().zip(row) {
                *g += r * x;
            }
        }
        let report = central_difference_check(&w, &grad, 1e-5, None, 0, f);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn subset_sampling_is_seeded() {
        let x = vec![0.0; 500];
        let g = vec![0.0; 500];
        let a = central_difference_check(&x, &g, 1e-5, Some(200), 3, |_| 0.0);
        assert_eq!(a.coords_checked, 200);
    }

    #[test]
    fn detects_wrong_gradient() {
        let report = central_difference_check(&[1.0], &[3.0], 1e-5, None, 0, |x| x[0] * x[0]);
        assert!(report.max_relative_error > 0.3);
    }
}
