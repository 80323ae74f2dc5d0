//! Product-form targets in the `n_y -> infinity` regime: the Fisher-type
//! term `I^2(x0)`, the limiting acceptance `abar0(l)` and the local 0.234 rule.
//!
//! With `B(x, u) = sum_j b(x, u_j)` and jumps `l n_y^{-1/2}`, the local
//! acceptance converges to `E[F(N(-l^2 I^2 / 2, l^2 I^2))]`. `l` sits inside
//! both Gaussian parameters here; without it `l^2 abar0(l)` has no maximum.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::accept::AcceptFunction;
use crate::diffusion::McEstimate;
use crate::error::{Error, Result};
use crate::quadrature::simpson;
use crate::rng::stream;
use crate::targets::{CurvedRidge, RidgeModel};

/// One factor `b(x, .)` of a product-form conditional, taken from a model
/// with `n_y = 1` (its `log_conditional` is `b`).
#[derive(Clone)]
pub struct ProductMarginal {
    factor: Arc<dyn RidgeModel>,
}

impl std::fmt::Debug for ProductMarginal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProductMarginal").field("factor", &self.factor.name()).finish()
    }
}

impl ProductMarginal {
    pub fn new(factor: Arc<dyn RidgeModel>) -> Result<Self> {
        if factor.n_y() != 1 {
            return Err(Error::DimensionMismatch {
                what: "product factor n_y",
                expected: 1,
                got: factor.n_y(),
            });
        }
        Ok(ProductMarginal { factor })
    }

    /// The factor of `product_ridge(n_y)`: `u ~ N(0, 1 / (1 + x^2))`.
    pub fn curved() -> Self {
        ProductMarginal { factor: Arc::new(CurvedRidge::new(1)) }
    }

    pub fn n_x(&self) -> usize {
        self.factor.n_x()
    }

    pub fn b(&self, x: &[f64], u: f64) -> f64 {
        self.factor.log_conditional(x, &[u])
    }

    pub fn db(&self, x: &[f64], u: f64) -> f64 {
        let mut g = [0.0];
        self.factor.grad_u_log_conditional(x, &[u], &mut g);
        g[0]
    }

    /// Central difference of `db`.
    pub fn d2b(&self, x: &[f64], u: f64) -> f64 {
        let h = 1e-5 * (1.0 + u.abs());
        (self.db(x, u + h) - self.db(x, u - h)) / (2.0 * h)
    }

    pub fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<f64> {
        let mut u = [0.0];
        self.factor.sample_conditional(x, rng, &mut u)?;
        Ok(u[0])
    }

    fn scale(&self, x: &[f64]) -> f64 {
        self.factor.conditional_scale(x).unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FisherTerm {
    pub value: f64,
    /// Relative change when the integration domain is doubled.
    pub tail_change: f64,
    pub warning: bool,
}

/// `I^2(x0) = E[(d_u b(x0, Y))^2]`, `Y ~ exp b(x0, .)`, by Simpson on
/// `mu ± 12 sigma` with `n_quad` intervals.
pub fn fisher_term(pm: &ProductMarginal, x0: &[f64], n_quad: usize) -> Result<FisherTerm> {
    crate::error::check_dim("x0", pm.n_x(), x0.len())?;
    if n_quad < 2 {
        return Err(Error::InvalidArgument("n_quad must be at least 2".into()));
    }
    let s = pm.scale(x0);
    let mu = simpson(|u| u * pm.b(x0, u).exp(), -24.0 * s, 24.0 * s, 2 * n_quad);
    let integral = |half: f64, n: usize| {
        let mass = simpson(|u| pm.b(x0, u).exp(), mu - half, mu + half, n);
        let m2 = simpson(
            |u| {
                let d = pm.db(x0, u);
                d * d * pm.b(x0, u).exp()
            },
            mu - half,
            mu + half,
            n,
        );
        m2 / mass
    };
    let value = integral(12.0 * s, n_quad);
    let doubled = integral(24.0 * s, 2 * n_quad);
    let tail_change = ((doubled - value) / value).abs();
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::InvalidArgument(format!("fisher term is not positive: {value}")));
    }
    Ok(FisherTerm { value, tail_change, warning: tail_change > 1e-6 })
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `abar0(l) = E[F(N(-l^2 I^2 / 2, l^2 I^2))]`; closed form `2 Phi(-l I / 2)` for MH.
pub fn limiting_acceptance(i2: f64, ell: f64, accept: &AcceptFunction) -> f64 {
    let c = ell * i2.sqrt();
    if matches!(accept, AcceptFunction::MetropolisHastings) {
        return 2.0 * std_normal_cdf(-0.5 * c);
    }
    crate::quadrature::gaussian_expectation(|r| accept.value(r), -0.5 * c * c, c, 4000)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HighdimOptimum {
    pub ell: f64,
    pub acceptance: f64,
    pub speed: f64,
}

/// Golden-section maximiser of `l^2 abar0(l)`.
pub fn optimal_ell_highdim(i2: f64, accept: &AcceptFunction) -> Result<HighdimOptimum> {
    if !(i2 > 0.0 && i2.is_finite()) {
        return Err(Error::InvalidArgument(format!("I^2 must be positive, got {i2}")));
    }
    let inv = 1.0 / i2.sqrt();
    let speed = |l: f64| l * l * limiting_acceptance(i2, l, accept);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.1 * inv, 10.0 * inv);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (speed(c), speed(d));
    while (b - a) > 1e-11 * inv {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = speed(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = speed(d);
        }
    }
    let ell = 0.5 * (a + b);
    Ok(HighdimOptimum { ell, acceptance: limiting_acceptance(i2, ell, accept), speed: speed(ell) })
}

/// MC estimate of `E[F(sum_j b(x0, Y_j + l' Z_j) - b(x0, Y_j))]`. The caller
/// passes `l' = l n_y^{-1/2}`. Replicate `i` reads its own stream, drawing
/// `(Y_j, Z_j)` for `j = 1, 2, ...` in order, so calls with the same master
/// seed and different `n_y` share common random numbers.
pub fn empirical_local_acceptance(
    pm: &ProductMarginal,
    n_y: usize,
    x0: &[f64],
    ell_scaled: f64,
    accept: &AcceptFunction,
    n_mc: usize,
    rng: &mut dyn RngCore,
) -> Result<McEstimate> {
    crate::error::check_dim("x0", pm.n_x(), x0.len())?;
    if n_y == 0 || n_mc < 2 {
        return Err(Error::InvalidArgument("need n_y >= 1 and n_mc >= 2".into()));
    }
    let master = rng.next_u64();
    let values: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut r = stream(master, i as u64);
            let mut delta = 0.0;
            for _ in 0..n_y {
                let y = pm.sample(x0, &mut r)?;
                let z: f64 = r.sample(StandardNormal);
                delta += pm.b(x0, y + ell_scaled * z) - pm.b(x0, y);
            }
            Ok(accept.value(delta))
        })
        .collect::<Result<_>>()?;
    let n = n_mc as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate { mean, std_error: (var / n).sqrt() })
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalRuleRow {
    pub n_y: usize,
    pub x0: f64,
    pub ell_scaled: f64,
    pub empirical: f64,
    pub std_error: f64,
    pub limit: f64,
    pub gap: f64,
}

/// Empirical local acceptance at `l*(x0) n_y^{-1/2}` against `abar0(l*)`
/// for every `n_y` in the list (common random numbers across rows).
pub fn local_rule_table(
    pm: &ProductMarginal,
    x0: f64,
    n_ys: &[usize],
    accept: &AcceptFunction,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<LocalRuleRow>> {
    let i2 = fisher_term(pm, &[x0], 2048)?.value;
    let opt = optimal_ell_highdim(i2, accept)?;
    n_ys.iter()
        .map(|&n_y| {
            let ell_scaled = opt.ell / (n_y as f64).sqrt();
            let mut r = stream(seed, 0);
            let e = empirical_local_acceptance(pm, n_y, &[x0], ell_scaled, accept, n_mc, &mut r)?;
            Ok(LocalRuleRow {
                n_y,
                x0,
                ell_scaled,
                empirical: e.mean,
                std_error: e.std_error,
                limit: opt.acceptance,
                gap: (e.mean - opt.acceptance).abs(),
            })
        })
        .collect()
}

pub fn write_local_rule_csv(rows: &[LocalRuleRow], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "n_y,x0,ell_scaled,empirical,std_error,limit,gap")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.n_y, r.x0, r.ell_scaled, r.empirical, r.std_error, r.limit, r.gap
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    // golden-section optimum of c^2 * 2 Phi(-c/2), computed independently
    const C_STAR: f64 = 2.381_202_5;

    #[test]
    fn fisher_term_examples() {
        let pm = ProductMarginal::curved();
        let f0 = fisher_term(&pm, &[0.0], 2048).unwrap();
        assert!((f0.value - 1.0).abs() < 1e-10, "{f0:?}");
        assert!(!f0.warning);
        let f1 = fisher_term(&pm, &[1.0], 2048).unwrap();
        assert!((f1.value - 2.0).abs() < 1e-10);
        let f2 = fisher_term(&pm, &[1.0], 4096).unwrap();
        assert!((f1.value - f2.value).abs() < 1e-8);
    }

    #[test]
    fn mh_limit_is_one_for_small_steps() {
        let mh = AcceptFunction::MetropolisHastings;
        assert!((limiting_acceptance(1.0, 1e-9, &mh) - 1.0).abs() < 1e-8);
        // the Gaussian quadrature path agrees with the closed form
        let q = crate::quadrature::gaussian_expectation(|r| mh.value(r), -0.5 * 1.7f64.powi(2), 1.7, 4000);
        assert!((q - limiting_acceptance(1.0, 1.7, &mh)).abs() < 1e-6);
    }

    #[test]
    fn acceptance_root_near_238() {
        let mh = AcceptFunction::MetropolisHastings;
        let (mut a, mut b) = (1.0, 4.0);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if limiting_acceptance(1.0, m, &mh) > 0.234 {
                a = m;
            } else {
                b = m;
            }
        }
        assert!((a - 2.380).abs() < 5e-4, "root {a}");
    }

    #[test]
    fn optimum_is_0234() {
        let mh = AcceptFunction::MetropolisHastings;
        let opt = optimal_ell_highdim(1.0, &mh).unwrap();
        assert!((opt.ell - C_STAR).abs() < 1e-6, "{opt:?}");
        assert!((opt.acceptance - 0.234).abs() < 1e-3);
        let barker = optimal_ell_highdim(1.0, &AcceptFunction::Barker).unwrap();
        assert!(barker.acceptance > 0.0 && barker.acceptance < 0.5);
    }

    #[test]
    fn optimum_scales_with_fisher_term() {
        let mh = AcceptFunction::MetropolisHastings;
        let c: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&i2: &f64| optimal_ell_highdim(i2, &mh).unwrap().ell * i2.sqrt())
            .collect();
        for w in c.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-6, "{c:?}");
        }
        // exact dependence on l I only
        let a = limiting_acceptance(2.0, 1.3, &mh);
        let b = limiting_acceptance(0.5, 2.6, &mh);
        assert!((a - b).abs() < 1e-15);
        assert!(optimal_ell_highdim(0.0, &mh).is_err());
    }

    #[test]
    fn empirical_small_step_is_one() {
        let pm = ProductMarginal::curved();
        let mh = AcceptFunction::MetropolisHastings;
        let e = empirical_local_acceptance(&pm, 1, &[0.3], 1e-8, &mh, 1000, &mut stream(1, 0)).unwrap();
        assert!(e.mean > 0.999_999);
    }

    #[test]
    fn local_rule_at_two_positions() {
        let pm = ProductMarginal::curved();
        let mh = AcceptFunction::MetropolisHastings;
        for &x0 in &[0.0, 1.0] {
            let rows = local_rule_table(&pm, x0, &[200], &mh, 20_000, 5).unwrap();
            assert!((rows[0].empirical - 0.234).abs() < 0.02, "{rows:?}");
        }
    }

    #[test]
    fn gap_shrinks_with_dimension() {
        let pm = ProductMarginal::curved();
        let mh = AcceptFunction::MetropolisHastings;
        let rows = local_rule_table(&pm, 1.0, &[10, 100, 1000], &mh, 20_000, 11).unwrap();
        assert!(rows[0].gap > rows[1].gap && rows[0].gap > rows[2].gap, "{rows:?}");
    }
}
