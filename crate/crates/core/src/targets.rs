//! Two-scale target densities.
//!
//! A target is described by its slow log-marginal `A(x)` and the standardized
//! conditional log-density `B(x, u)` of `u = y / eps`. The thickness `eps` only
//! enters through [`MultiscaleTarget::log_density`]; everything else works in
//! the standardized law `pi(x, u) = exp{A(x) + B(x, u)}`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::quadrature::simpson;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// The `(A, B)` pair of a ridged density with its derivatives and optional
/// exact samplers. Implementations must be immutable; they are shared across
/// concurrently running chains.
pub trait RidgeModel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn n_x(&self) -> usize;
    fn n_y(&self) -> usize;

    /// `A(x)`, the log-density of the slow marginal.
    fn log_marginal(&self, x: &[f64]) -> f64;
    fn grad_log_marginal(&self, x: &[f64], out: &mut [f64]);

    /// `B(x, u)`, the log-density of `u` given `x`.
    fn log_conditional(&self, x: &[f64], u: &[f64]) -> f64;
    fn grad_x_log_conditional(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn grad_u_log_conditional(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// Typical per-coordinate scale of `u | x`, used to size quadrature domains.
    fn conditional_scale(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn has_exact_sampler(&self) -> bool {
        false
    }

    fn sample_marginal(&self, _rng: &mut dyn RngCore, _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported(format!("{} has no exact marginal sampler", self.name())))
    }

    fn sample_conditional(&self, _x: &[f64], _rng: &mut dyn RngCore, _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported(format!("{} has no exact conditional sampler", self.name())))
    }
}

fn standard_normal(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

/// `A(x) = -|x|^2/2 - (n_x/2) log 2pi`, shared by every builtin.
fn gaussian_marginal(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - HALF_LN_2PI * x.len() as f64
}

/// `B(x, u) = -u^2/2 - log(2pi)/2`; the conditional does not depend on `x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussRidge;

impl RidgeModel for GaussRidge {
    fn name(&self) -> String {
        "gauss_ridge".into()
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn log_marginal(&self, x: &[f64]) -> f64 {
        gaussian_marginal(x)
    }
    fn grad_log_marginal(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0];
    }
    fn log_conditional(&self, _x: &[f64], u: &[f64]) -> f64 {
        -0.5 * u[0] * u[0] - HALF_LN_2PI
    }
    fn grad_x_log_conditional(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn grad_u_log_conditional(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = -u[0];
    }
    fn conditional_scale(&self, _x: &[f64]) -> Option<f64> {
        Some(1.0)
    }
    fn has_exact_sampler(&self) -> bool {
        true
    }
    fn sample_marginal(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        out[0] = standard_normal(rng);
        Ok(())
    }
    fn sample_conditional(&self, _x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        out[0] = standard_normal(rng);
        Ok(())
    }
}

/// Product of `n_y` copies of
/// `b(x, u) = -(1 + x^2) u^2 / 2 + log((1 + x^2) / 2pi) / 2`,
/// i.e. `u_j | x` i.i.d. centred Gaussian with variance `1 / (1 + x^2)`.
/// `n_y = 1` is the `curved_ridge` builtin.
#[derive(Debug, Clone, Copy)]
pub struct CurvedRidge {
    n_y: usize,
}

impl CurvedRidge {
    pub fn new(n_y: usize) -> Self {
        assert!(n_y >= 1, "n_y must be positive");
        CurvedRidge { n_y }
    }

    #[inline]
    fn precision(x: &[f64]) -> f64 {
        1.0 + x[0] * x[0]
    }
}

impl RidgeModel for CurvedRidge {
    fn name(&self) -> String {
        if self.n_y == 1 {
            "curved_ridge".into()
        } else {
            format!("product_ridge({})", self.n_y)
        }
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        self.n_y
    }
    fn log_marginal(&self, x: &[f64]) -> f64 {
        gaussian_marginal(x)
    }
    fn grad_log_marginal(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0];
    }
    fn log_conditional(&self, x: &[f64], u: &[f64]) -> f64 {
        let p = Self::precision(x);
        let ss: f64 = u.iter().map(|v| v * v).sum();
        -0.5 * p * ss + 0.5 * self.n_y as f64 * (p.ln() - (2.0 * PI).ln())
    }
    fn grad_x_log_conditional(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let p = Self::precision(x);
        let ss: f64 = u.iter().map(|v| v * v).sum();
        out[0] = -x[0] * ss + self.n_y as f64 * x[0] / p;
    }
    fn grad_u_log_conditional(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let p = Self::precision(x);
        for (o, v) in out.iter_mut().zip(u) {
            *o = -p * v;
        }
    }
    fn conditional_scale(&self, x: &[f64]) -> Option<f64> {
        Some(1.0 / Self::precision(x).sqrt())
    }
    fn has_exact_sampler(&self) -> bool {
        true
    }
    fn sample_marginal(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        out[0] = standard_normal(rng);
        Ok(())
    }
    fn sample_conditional(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        let s = 1.0 / Self::precision(x).sqrt();
        for o in out.iter_mut() {
            *o = s * standard_normal(rng);
        }
        Ok(())
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type PairFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type PairGradFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// A user-supplied target given as a bundle of closures. No exact samplers;
/// normalization of `exp B(x, .)` is the caller's responsibility and can be
/// spot-checked with [`normalization_error`].
pub struct CustomRidge {
    pub name: String,
    pub n_x: usize,
    pub n_y: usize,
    pub a: Box<ScalarFn>,
    pub grad_a: Box<VectorFn>,
    pub b: Box<PairFn>,
    pub grad_x_b: Box<PairGradFn>,
    pub grad_u_b: Box<PairGradFn>,
    pub scale: Option<f64>,
}

impl fmt::Debug for CustomRidge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomRidge")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_y", &self.n_y)
            .finish_non_exhaustive()
    }
}

impl RidgeModel for CustomRidge {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn n_x(&self) -> usize {
        self.n_x
    }
    fn n_y(&self) -> usize {
        self.n_y
    }
    fn log_marginal(&self, x: &[f64]) -> f64 {
        (self.a)(x)
    }
    fn grad_log_marginal(&self, x: &[f64], out: &mut [f64]) {
        (self.grad_a)(x, out)
    }
    fn log_conditional(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.b)(x, u)
    }
    fn grad_x_log_conditional(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.grad_x_b)(x, u, out)
    }
    fn grad_u_log_conditional(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.grad_u_b)(x, u, out)
    }
    fn conditional_scale(&self, _x: &[f64]) -> Option<f64> {
        self.scale
    }
}

/// Names of the builtin targets as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinTargetId {
    GaussRidge,
    CurvedRidge,
    ProductRidge { n_y: usize },
}

impl BuiltinTargetId {
    pub fn model(self) -> Arc<dyn RidgeModel> {
        match self {
            BuiltinTargetId::GaussRidge => Arc::new(GaussRidge),
            BuiltinTargetId::CurvedRidge => Arc::new(CurvedRidge::new(1)),
            BuiltinTargetId::ProductRidge { n_y } => Arc::new(CurvedRidge::new(n_y)),
        }
    }

    pub fn n_y(self) -> usize {
        match self {
            BuiltinTargetId::ProductRidge { n_y } => n_y,
            _ => 1,
        }
    }

    pub fn label(self) -> String {
        match self {
            BuiltinTargetId::GaussRidge => "gauss_ridge".into(),
            BuiltinTargetId::CurvedRidge => "curved_ridge".into(),
            BuiltinTargetId::ProductRidge { n_y } => format!("product_ridge({n_y})"),
        }
    }
}

/// `pi_eps(x, y) = eps^{-n_y} exp{A(x) + B(x, y / eps)}`.
#[derive(Debug, Clone)]
pub struct MultiscaleTarget {
    model: Arc<dyn RidgeModel>,
    epsilon: f64,
}

impl MultiscaleTarget {
    pub fn new(model: Arc<dyn RidgeModel>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(MultiscaleTarget { model, epsilon })
    }

    pub fn builtin(id: BuiltinTargetId, epsilon: f64) -> Result<Self> {
        if let BuiltinTargetId::ProductRidge { n_y: 0 } = id {
            return Err(Error::InvalidArgument("product_ridge needs n_y >= 1".into()));
        }
        Self::new(id.model(), epsilon)
    }

    pub fn model(&self) -> &Arc<dyn RidgeModel> {
        &self.model
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.model.clone(), epsilon)
    }

    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    pub fn n_y(&self) -> usize {
        self.model.n_y()
    }

    fn check(&self, x: &[f64], v: &[f64]) -> Result<()> {
        check_dim("x", self.n_x(), x.len())?;
        check_dim("y/u", self.n_y(), v.len())
    }

    /// `log pi_eps(x, y)` in the original coordinates.
    pub fn log_density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(x, y)?;
        let u: Vec<f64> = y.iter().map(|v| v / self.epsilon).collect();
        Ok(-(self.n_y() as f64) * self.epsilon.ln()
            + self.model.log_marginal(x)
            + self.model.log_conditional(x, &u))
    }

    /// `log pi(x, u) = A(x) + B(x, u)`, the law of `(x, y / eps)`.
    pub fn log_density_standardized(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check(x, u)?;
        Ok(self.model.log_marginal(x) + self.model.log_conditional(x, u))
    }

    /// I.i.d. draws of `(x, u)` from `pi`.
    pub fn sample_stationary(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if !self.model.has_exact_sampler() {
            return Err(Error::Unsupported(format!(
                "target {} has no exact joint sampler",
                self.model.name()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut x = vec![0.0; self.n_x()];
            let mut u = vec![0.0; self.n_y()];
            self.model.sample_marginal(rng, &mut x)?;
            self.model.sample_conditional(&x, rng, &mut u)?;
            out.push((x, u));
        }
        Ok(out)
    }
}

/// `|int exp B(x, u) du - 1|` by Simpson on `[-10 s, 10 s]` for a
/// one-dimensional `u`, with `s` the model's conditional scale (1 if unknown).
pub fn normalization_error(model: &dyn RidgeModel, x: &[f64]) -> Result<f64> {
    check_dim("u", 1, model.n_y())?;
    let s = model.conditional_scale(x).unwrap_or(1.0);
    let total = simpson(|u| model.log_conditional(x, &[u]).exp(), -10.0 * s, 10.0 * s, 4000);
    Ok((total - 1.0).abs())
}

/// Largest relative error between the analytic gradients of `A` and `B` and
/// central finite differences at `(x, u)`, with step `1e-5 (1 + |coordinate|)`.
pub fn gradient_check(model: &dyn RidgeModel, x: &[f64], u: &[f64]) -> f64 {
    let (nx, ny) = (model.n_x(), model.n_y());
    let mut worst: f64 = 0.0;
    let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(1.0);

    let mut ga = vec![0.0; nx];
    let mut gbx = vec![0.0; nx];
    let mut gbu = vec![0.0; ny];
    model.grad_log_marginal(x, &mut ga);
    model.grad_x_log_conditional(x, u, &mut gbx);
    model.grad_u_log_conditional(x, u, &mut gbu);

    let mut xp = x.to_vec();
    for i in 0..nx {
        let h = 1e-5 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let (ap, bp) = (model.log_marginal(&xp), model.log_conditional(&xp, u));
        xp[i] = x[i] - h;
        let (am, bm) = (model.log_marginal(&xp), model.log_conditional(&xp, u));
        xp[i] = x[i];
        worst = worst.max(rel(ga[i], (ap - am) / (2.0 * h)));
        worst = worst.max(rel(gbx[i], (bp - bm) / (2.0 * h)));
    }
    let mut up = u.to_vec();
    for j in 0..ny {
        let h = 1e-5 * (1.0 + u[j].abs());
        up[j] = u[j] + h;
        let bp = model.log_conditional(x, &up);
        up[j] = u[j] - h;
        let bm = model.log_conditional(x, &up);
        up[j] = u[j];
        worst = worst.max(rel(gbu[j], (bp - bm) / (2.0 * h)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    #[test]
    fn log_density_examples() {
        let g = MultiscaleTarget::builtin(BuiltinTargetId::GaussRidge, 1.0).unwrap();
        assert!((g.log_density(&[0.0], &[0.0]).unwrap() + LN_2PI).abs() < 1e-14);
        let g = g.with_epsilon(0.1).unwrap();
        let v = g.log_density(&[0.0], &[0.0]).unwrap();
        assert!((v - (-LN_2PI + 10f64.ln())).abs() < 1e-12);

        let c = MultiscaleTarget::builtin(BuiltinTargetId::CurvedRidge, 1.0).unwrap();
        let v = c.log_density(&[1.0], &[0.0]).unwrap();
        assert!((v - (-0.5 - LN_2PI + 0.5 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn standardized_examples() {
        let g = MultiscaleTarget::builtin(BuiltinTargetId::GaussRidge, 0.3).unwrap();
        assert!((g.log_density_standardized(&[0.0], &[0.0]).unwrap() + LN_2PI).abs() < 1e-14);
        let c = MultiscaleTarget::builtin(BuiltinTargetId::CurvedRidge, 0.3).unwrap();
        // A(2) = -2 - ln(2pi)/2 ; B(2, 0.5) = -5 * 0.25 / 2 + ln(5 / 2pi) / 2
        let expected = (-2.0 - 0.5 * LN_2PI) + (-0.625 + 0.5 * (5f64.ln() - LN_2PI));
        assert!((c.log_density_standardized(&[2.0], &[0.5]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let g = MultiscaleTarget::builtin(BuiltinTargetId::GaussRidge, 1.0).unwrap();
        assert!(matches!(
            g.log_density(&[0.0, 1.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(g.log_density_standardized(&[0.0], &[]).is_err());
    }

    #[test]
    fn product_ridge_is_a_sum_of_curved_terms() {
        let p = CurvedRidge::new(3);
        let c = CurvedRidge::new(1);
        let x = [0.7];
        let u = [0.2, -1.1, 0.4];
        let sum: f64 = u.iter().map(|&v| c.log_conditional(&x, &[v])).sum();
        assert!((p.log_conditional(&x, &u) - sum).abs() < 1e-12);
    }

    #[test]
    fn normalization_and_gradients_on_grid() {
        for id in [BuiltinTargetId::GaussRidge, BuiltinTargetId::CurvedRidge] {
            let m = id.model();
            for i in 0..=20 {
                let x = -4.0 + 0.4 * i as f64;
                assert!(normalization_error(m.as_ref(), &[x]).unwrap() < 1e-10);
            }
        }
        let mut rng = stream(11, 0);
        for id in [
            BuiltinTargetId::GaussRidge,
            BuiltinTargetId::CurvedRidge,
            BuiltinTargetId::ProductRidge { n_y: 3 },
        ] {
            let m = id.model();
            for _ in 0..100 {
                let x = [3.0 * standard_normal(&mut rng)];
                let u: Vec<f64> = (0..m.n_y()).map(|_| 3.0 * standard_normal(&mut rng)).collect();
                assert!(gradient_check(m.as_ref(), &x, &u) < 1e-5);
            }
        }
    }

    #[test]
    fn stationary_sampling() {
        let g = MultiscaleTarget::builtin(BuiltinTargetId::GaussRidge, 0.1).unwrap();
        let mut rng = stream(3, 0);
        assert!(g.sample_stationary(0, &mut rng).unwrap().is_empty());
        let n = 100_000;
        let draws = g.sample_stationary(n, &mut rng).unwrap();
        let mean = draws.iter().map(|d| d.0[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());

        let c = MultiscaleTarget::builtin(BuiltinTargetId::CurvedRidge, 0.1).unwrap();
        let draws = c.sample_stationary(n, &mut rng).unwrap();
        let z: Vec<f64> = draws.iter().map(|d| d.1[0] * (1.0 + d.0[0] * d.0[0]).sqrt()).collect();
        let var = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
        // Var of a chi-square(1)/n average is 2/n
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        // E[u^2] = E[1 / (1 + x^2)] under x ~ N(0,1)
        let u2 = draws.iter().map(|d| d.1[0] * d.1[0]).sum::<f64>() / n as f64;
        let oracle = simpson(
            |x| (-0.5 * x * x).exp() / (2.0 * PI).sqrt() / (1.0 + x * x),
            -12.0,
            12.0,
            4000,
        );
        assert!((u2 - oracle).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn custom_targets_have_no_sampler() {
        let custom = CustomRidge {
            name: "flat".into(),
            n_x: 1,
            n_y: 1,
            a: Box::new(gaussian_marginal),
            grad_a: Box::new(|x, o| o[0] = -x[0]),
            b: Box::new(|_, u| -0.5 * u[0] * u[0] - HALF_LN_2PI),
            grad_x_b: Box::new(|_, _, o| o[0] = 0.0),
            grad_u_b: Box::new(|_, u, o| o[0] = -u[0]),
            scale: None,
        };
        assert!(normalization_error(&custom, &[0.3]).unwrap() < 1e-10);
        let t = MultiscaleTarget::new(Arc::new(custom), 0.5).unwrap();
        let mut rng = stream(0, 0);
        assert!(matches!(t.sample_stationary(3, &mut rng), Err(Error::Unsupported(_))));
    }
}
