//! Deterministic quadrature used by the identity checks and by the
//! closed-form routines of `highdim`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Composite Simpson rule on `[a, b]` with `n_intervals` sub-intervals
/// (rounded up to an even number).
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, n_intervals: usize) -> f64 {
    let n = (n_intervals.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Nodes and weights of the probabilists' Gauss–Hermite rule: for smooth `g`,
/// `sum_i w_i g(z_i) ~ E[g(Z)]` with `Z ~ N(0, 1)`. Weights sum to one.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix of the
    /// probabilists' Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jac[(k - 1, k)] = b;
            jac[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut g: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * g(z))
            .sum()
    }
}

/// `E[g(W)]` for `W ~ N(mean, sd^2)` by Simpson on `mean ± 12 sd`.
pub fn gaussian_expectation<F: FnMut(f64) -> f64>(mut g: F, mean: f64, sd: f64, n_intervals: usize) -> f64 {
    if sd == 0.0 {
        return g(mean);
    }
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    simpson(
        |w| {
            let t = (w - mean) / sd;
            g(w) * norm * (-0.5 * t * t).exp()
        },
        mean - 12.0 * sd,
        mean + 12.0 * sd,
        n_intervals,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 2.0, 4);
        assert!((v - (15.0 / 4.0 - 3.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn gauss_hermite_moments() {
        let gh = GaussHermite::new(20);
        assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-12);
        assert!(gh.expect(|z| z).abs() < 1e-12);
        assert!((gh.expect(|z| z * z) - 1.0).abs() < 1e-10);
        assert!((gh.expect(|z| z.powi(4)) - 3.0).abs() < 1e-9);
        assert!((gh.expect(|z| z.powi(6)) - 15.0).abs() < 1e-8);
    }

    #[test]
    fn gaussian_expectation_matches_moments() {
        let m = gaussian_expectation(|w| w * w, 1.0, 2.0, 2000);
        assert!((m - 5.0).abs() < 1e-10);
    }
}
