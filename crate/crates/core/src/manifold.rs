//! Ridges around a curved manifold `M = { r(x) }`: chart geometry, the
//! tube coordinates `w = r(x) + Q(x) y`, ambient-space RWM, and the
//! conjectured limiting SDE with `sigma sigma^T = G^{-1} a0 l^2`.
//!
//! Everything downstream of the SDE is a CONJECTURE; only the geometric
//! identities are hard checks.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accept::AcceptFunction;
use crate::diffusion::{a0_quadrature, simulate_diffusion, DiffusionInit, PathEnsemble, Sigma2Table};
use crate::error::{check_dim, Error, Result};
use crate::rwm::StepMode;
use crate::targets::RidgeModel;

/// Builtin charts; both are curves in the plane (`n_x = n_y = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldChart {
    /// `r(x) = (x, x^2)`, globally invertible.
    Parabola,
    /// `r(t) = (cos t, sin t)`; only locally invertible, the angle is
    /// tracked continuously (unwrapped) through warm-started projections.
    Circle,
}

impl ManifoldChart {
    pub fn n_x(self) -> usize {
        1
    }

    pub fn n_y(self) -> usize {
        1
    }

    pub fn ambient_dim(self) -> usize {
        self.n_x() + self.n_y()
    }

    pub fn name(self) -> &'static str {
        match self {
            ManifoldChart::Parabola => "parabola",
            ManifoldChart::Circle => "circle",
        }
    }

    pub fn globally_invertible(self) -> bool {
        matches!(self, ManifoldChart::Parabola)
    }

    pub fn r(self, x: &[f64]) -> DVector<f64> {
        let t = x[0];
        match self {
            ManifoldChart::Parabola => DVector::from_vec(vec![t, t * t]),
            ManifoldChart::Circle => DVector::from_vec(vec![t.cos(), t.sin()]),
        }
    }

    /// Jacobian `Dr(x)`, `(n_x + n_y) x n_x`.
    pub fn dr(self, x: &[f64]) -> DMatrix<f64> {
        let t = x[0];
        match self {
            ManifoldChart::Parabola => DMatrix::from_column_slice(2, 1, &[1.0, 2.0 * t]),
            ManifoldChart::Circle => DMatrix::from_column_slice(2, 1, &[-t.sin(), t.cos()]),
        }
    }

    /// Second derivatives: entry `j` is `d Dr / d x_j`.
    pub fn d2r(self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let t = x[0];
        match self {
            ManifoldChart::Parabola => vec![DMatrix::from_column_slice(2, 1, &[0.0, 2.0])],
            ManifoldChart::Circle => vec![DMatrix::from_column_slice(2, 1, &[-t.cos(), -t.sin()])],
        }
    }
}

/// `G(x) = Dr^T Dr`.
pub fn metric_tensor(chart: ManifoldChart, x: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("x", chart.n_x(), x.len())?;
    let dr = chart.dr(x);
    let g = dr.transpose() * &dr;
    let eig = g.clone().symmetric_eigen().eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * g.trace().max(1.0)) {
        return Err(Error::DegenerateChart { x: x.to_vec() });
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentNormalFrame {
    pub x: Vec<f64>,
    pub g: DMatrix<f64>,
    /// Orthonormal basis of the normal space, one column per normal direction.
    pub q: DMatrix<f64>,
    /// `J = G^{-1} Dr^T`.
    pub j: DMatrix<f64>,
    /// `K = Q^T (I - Dr G^{-1} Dr^T)`.
    pub k: DMatrix<f64>,
}

pub fn frame(chart: ManifoldChart, x: &[f64]) -> Result<TangentNormalFrame> {
    let g = metric_tensor(chart, x)?;
    let dr = chart.dr(x);
    let g_inv = g.clone().try_inverse().ok_or_else(|| Error::DegenerateChart { x: x.to_vec() })?;
    let j = &g_inv * dr.transpose();
    let m = chart.ambient_dim();
    let proj_n = DMatrix::<f64>::identity(m, m) - &dr * &j;

    // Gram–Schmidt on the projected coordinate axes
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(chart.n_y());
    for i in 0..m {
        if basis.len() == chart.n_y() {
            break;
        }
        let mut v = proj_n.column(i).into_owned();
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    if basis.len() != chart.n_y() {
        return Err(Error::DegenerateChart { x: x.to_vec() });
    }
    if chart.n_y() == 1 {
        // orientation det[Dr | q] > 0 is smooth along the chart
        let mut full = DMatrix::zeros(m, m);
        full.view_mut((0, 0), (m, chart.n_x())).copy_from(&dr);
        full.set_column(m - 1, &basis[0]);
        if full.determinant() < 0.0 {
            basis[0] = -basis[0].clone();
        }
    } else {
        for b in basis.iter_mut() {
            if let Some(first) = b.iter().copied().find(|v| v.abs() > 1e-12) {
                if first < 0.0 {
                    *b = -b.clone();
                }
            }
        }
    }
    let q = DMatrix::from_columns(&basis);
    let k = q.transpose() * &proj_n;
    Ok(TangentNormalFrame { x: x.to_vec(), g, q, j, k })
}

/// Closest chart coordinate to `w` by damped Gauss–Newton on `|r(x) - w|^2`,
/// started at `x_init`; stops when `|Dr^T (r - w)| < tol`.
pub fn project(chart: ManifoldChart, w: &DVector<f64>, x_init: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_dim("x", chart.n_x(), x_init.len())?;
    check_dim("w", chart.ambient_dim(), w.len())?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("projection tolerance must be positive".into()));
    }
    let mut x = DVector::from_column_slice(x_init);
    let objective = |x: &DVector<f64>| (chart.r(x.as_slice()) - w).norm_squared();
    let mut grad_norm = f64::INFINITY;
    for _ in 0..PROJECTION_MAX_ITER {
        let res = chart.r(x.as_slice()) - w;
        let dr = chart.dr(x.as_slice());
        let grad = dr.transpose() * &res;
        grad_norm = grad.norm();
        if grad_norm < tol {
            return Ok(x.as_slice().to_vec());
        }
        // Newton on |r(x) - w|^2; Gauss-Newton when the curvature term
        // makes the Hessian indefinite (far outside the reach)
        let g = dr.transpose() * &dr;
        let mut hess = g.clone();
        for (j, d2) in chart.d2r(x.as_slice()).iter().enumerate() {
            let col = d2.transpose() * &res;
            for i in 0..hess.nrows() {
                hess[(i, j)] += col[i];
            }
        }
        let pd = hess.clone().symmetric_eigen().eigenvalues.iter().all(|&l| l > 1e-8 * g.trace());
        let step = if pd { hess } else { g }
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::DegenerateChart { x: x.as_slice().to_vec() })?;
        let f0 = res.norm_squared();
        let mut t = 1.0;
        let mut next = &x - &step * t;
        while objective(&next) > f0 * (1.0 + 1e-10) && t > 1e-6 {
            t *= 0.5;
            next = &x - &step * t;
        }
        x = next;
    }
    Err(Error::ProjectionFailure {
        iterations: PROJECTION_MAX_ITER,
        residual: grad_norm,
    })
}

const PROJECTION_MAX_ITER: usize = 100;

pub const PROJECTION_TOL: f64 = 1e-10;

/// `(x, y)` with `x` the foot point and `y = Q^T (w - r(x))`.
pub fn tangent_normal_coords(chart: ManifoldChart, w: &DVector<f64>, x_init: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = project(chart, w, x_init, PROJECTION_TOL)?;
    let fr = frame(chart, &x)?;
    let y = fr.q.transpose() * (w - chart.r(&x));
    Ok((x, y.as_slice().to_vec()))
}

/// `w = r(x) + Q(x) y`.
pub fn ambient_point(chart: ManifoldChart, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
    let fr = frame(chart, x)?;
    Ok(chart.r(x) + &fr.q * DVector::from_column_slice(y))
}

/// `log |det dw / d(x, y)|` for `w = r(x) + Q(x) y` (frame derivative by
/// central differences).
pub fn log_tube_jacobian(chart: ManifoldChart, x: &[f64], y: &[f64]) -> Result<f64> {
    let m = chart.ambient_dim();
    let (nx, ny) = (chart.n_x(), chart.n_y());
    let fr = frame(chart, x)?;
    let dr = chart.dr(x);
    let yv = DVector::from_column_slice(y);
    let mut jac = DMatrix::zeros(m, m);
    for i in 0..nx {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let dq = (frame(chart, &xp)?.q - frame(chart, &xm)?.q) / (2.0 * h);
        jac.set_column(i, &(dr.column(i) + dq * &yv));
    }
    for j in 0..ny {
        jac.set_column(nx + j, &fr.q.column(j));
    }
    let det = jac.determinant().abs();
    if !(det > 0.0) {
        return Err(Error::DegenerateChart { x: x.to_vec() });
    }
    Ok(det.ln())
}

/// Ambient proposal of the manifold chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ManifoldStep {
    /// `w' = w + l h(eps) Z`, `Z ~ N(0, I_{n_x + n_y})`.
    Isotropic { mode: StepMode },
    /// `w' = w + l h(eps) Dr(x) Z_x + l eps Q(x) Z_y`.
    Anisotropic { tangent: StepMode },
}

impl ManifoldStep {
    pub fn label(&self) -> String {
        match self {
            ManifoldStep::Isotropic { mode } => format!("isotropic:{}", mode.label()),
            ManifoldStep::Anisotropic { tangent } => format!("anisotropic:{}", tangent.label()),
        }
    }
}

/// `A = N(0, 0.5^2)` in the angle, `B` standard Gaussian in `u`: the
/// circle experiment's target, concentrated on an arc around angle 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct CircleArc;

const ARC_SD: f64 = 0.5;

impl RidgeModel for CircleArc {
    fn name(&self) -> String {
        "circle_arc".into()
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn log_marginal(&self, x: &[f64]) -> f64 {
        let t = x[0] / ARC_SD;
        -0.5 * t * t - (ARC_SD * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }
    fn grad_log_marginal(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0] / (ARC_SD * ARC_SD);
    }
    fn log_conditional(&self, _x: &[f64], u: &[f64]) -> f64 {
        -0.5 * u[0] * u[0] - 0.5 * (2.0 * std::f64::consts::PI).ln()
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
        out[0] = ARC_SD * rng.sample::<f64, _>(StandardNormal);
        Ok(())
    }
    fn sample_conditional(&self, _x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        out[0] = rng.sample(StandardNormal);
        Ok(())
    }
}

#[derive(Clone)]
pub struct ManifoldRwm {
    pub chart: ManifoldChart,
    pub model: Arc<dyn RidgeModel>,
    pub eps: f64,
    pub ell: f64,
    pub accept: AcceptFunction,
    pub step: ManifoldStep,
    /// Divide by the tube Jacobian so that `(x, y)` has density
    /// `e^{A + B} / eps^{n_y}`.
    pub jacobian: bool,
}

impl std::fmt::Debug for ManifoldRwm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManifoldRwm")
            .field("chart", &self.chart)
            .field("model", &self.model.name())
            .field("eps", &self.eps)
            .field("ell", &self.ell)
            .field("step", &self.step)
            .field("jacobian", &self.jacobian)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldState {
    pub iteration: u64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldTrajectory {
    pub states: Vec<ManifoldState>,
    pub accepted: u64,
    pub iterations: u64,
    /// Sum of the acceptance probabilities of every proposal.
    pub accept_prob_sum: f64,
}

impl ManifoldTrajectory {
    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.accepted as f64 / self.iterations as f64
    }

    pub fn mean_accept_prob(&self) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.accept_prob_sum / self.iterations as f64
    }

    /// Columns `iter, x.., u.., w.., accepted`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let first = match self.states.first() {
            Some(s) => s,
            None => return writeln!(w, "iter,accepted"),
        };
        let mut head = vec!["iter".to_string()];
        head.extend((1..=first.x.len()).map(|i| format!("x{i}")));
        head.extend((1..=first.u.len()).map(|i| format!("u{i}")));
        head.extend((1..=first.w.len()).map(|i| format!("w{i}")));
        head.push("accepted".into());
        writeln!(w, "{}", head.join(","))?;
        for s in &self.states {
            write!(w, "{}", s.iteration)?;
            for v in s.x.iter().chain(&s.u).chain(&s.w) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", u8::from(s.accepted))?;
        }
        Ok(())
    }
}

struct Point {
    x: Vec<f64>,
    u: Vec<f64>,
    w: DVector<f64>,
    log_pi: f64,
}

impl ManifoldRwm {
    fn validate(&self) -> Result<()> {
        check_dim("model n_x", self.chart.n_x(), self.model.n_x())?;
        check_dim("model n_y", self.chart.n_y(), self.model.n_y())?;
        if !(self.eps > 0.0 && self.ell > 0.0) {
            return Err(Error::InvalidArgument("manifold RWM needs eps > 0 and l > 0".into()));
        }
        Ok(())
    }

    fn log_target(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        let mut lp = self.model.log_marginal(x) + self.model.log_conditional(x, u);
        if self.jacobian {
            let y: Vec<f64> = u.iter().map(|v| v * self.eps).collect();
            lp -= log_tube_jacobian(self.chart, x, &y)?;
        }
        Ok(lp)
    }

    fn point(&self, x: Vec<f64>, u: Vec<f64>, w: DVector<f64>) -> Result<Point> {
        let log_pi = self.log_target(&x, &u)?;
        Ok(Point { x, u, w, log_pi })
    }

    /// Square factor `M` of the anisotropic proposal covariance `M M^T`.
    fn proposal_factor(&self, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let fr = frame(self.chart, x)?;
        let dr = self.chart.dr(x);
        let (m, nx) = (self.chart.ambient_dim(), self.chart.n_x());
        let mut f = DMatrix::zeros(m, m);
        f.view_mut((0, 0), (m, nx)).copy_from(&(dr * (self.ell * h)));
        f.view_mut((0, nx), (m, self.chart.n_y())).copy_from(&(&fr.q * (self.ell * self.eps)));
        Ok(f)
    }

    fn log_proposal(&self, factor: &DMatrix<f64>, d: &DVector<f64>) -> Result<f64> {
        let lu = factor.clone().lu();
        let z = lu.solve(d).ok_or_else(|| Error::InvalidArgument("singular proposal covariance".into()))?;
        Ok(-lu.determinant().abs().ln() - 0.5 * z.norm_squared())
    }

    fn advance(&self, cur: &mut Point, rng: &mut dyn RngCore) -> Result<(f64, bool)> {
        let m = self.chart.ambient_dim();
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        // (tangent step, log q(w' | w)) for the position-dependent proposal
        let (delta, forward) = match self.step {
            ManifoldStep::Isotropic { mode } => (&z * (self.ell * mode.h(self.eps)), None),
            ManifoldStep::Anisotropic { tangent } => {
                let h = tangent.h(self.eps);
                let f = self.proposal_factor(&cur.x, h)?;
                let log_q = -f.determinant().abs().ln() - 0.5 * z.norm_squared();
                (f * &z, Some((h, log_q)))
            }
        };
        let xi: f64 = rng.random();
        let w_new = &cur.w + &delta;
        let (x_new, y_new) = tangent_normal_coords(self.chart, &w_new, &cur.x)?;
        let u_new: Vec<f64> = y_new.iter().map(|v| v / self.eps).collect();
        let prop = self.point(x_new, u_new, w_new)?;
        let mut log_r = prop.log_pi - cur.log_pi;
        if let Some((h, log_q)) = forward {
            let back = self.proposal_factor(&prop.x, h)?;
            log_r += self.log_proposal(&back, &(-&delta))? - log_q;
        }
        let p = if log_r.is_nan() { 0.0 } else { self.accept.value(log_r) };
        let accepted = xi < p;
        if accepted {
            *cur = prop;
        }
        Ok((p, accepted))
    }

    /// Runs `n_steps` from the tube point with coordinates `(x0, u0)`,
    /// recording every `thinning`-th state (and the initial one).
    pub fn run(&self, n_steps: u64, x0: &[f64], u0: &[f64], thinning: u64, rng: &mut dyn RngCore) -> Result<ManifoldTrajectory> {
        self.validate()?;
        check_dim("x0", self.chart.n_x(), x0.len())?;
        check_dim("u0", self.chart.n_y(), u0.len())?;
        if thinning == 0 {
            return Err(Error::InvalidArgument("thinning must be positive".into()));
        }
        let y0: Vec<f64> = u0.iter().map(|v| v * self.eps).collect();
        let w0 = ambient_point(self.chart, x0, &y0)?;
        let mut cur = self.point(x0.to_vec(), u0.to_vec(), w0)?;
        let record = |it: u64, p: &Point, acc: bool| ManifoldState {
            iteration: it,
            x: p.x.clone(),
            u: p.u.clone(),
            w: p.w.as_slice().to_vec(),
            accepted: acc,
        };
        let mut states = vec![record(0, &cur, false)];
        let (mut accepted, mut prob_sum) = (0u64, 0.0);
        for it in 1..=n_steps {
            let (p, acc) = self
                .advance(&mut cur, rng)
                .map_err(|e| Error::ManifoldStep { step: it, source: Box::new(e) })?;
            prob_sum += p;
            accepted += u64::from(acc);
            if it % thinning == 0 {
                states.push(record(it, &cur, acc));
            }
        }
        Ok(ManifoldTrajectory { states, accepted, iterations: n_steps, accept_prob_sum: prob_sum })
    }

    /// Initial tube coordinates drawn from `e^{A(x) + B(x, u)}`.
    pub fn stationary_start(&self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut x = vec![0.0; self.chart.n_x()];
        let mut u = vec![0.0; self.chart.n_y()];
        self.model.sample_marginal(rng, &mut x)?;
        self.model.sample_conditional(&x, rng, &mut u)?;
        Ok((x, u))
    }
}

/// CONJECTURE: `sigma sigma^T(x) = G(x)^{-1} a0(x, l) l^2` on a grid, where
/// `a0` uses the normal response `u' = u + l K(x) Z` (for `n_y = 1`,
/// `K Z ~ N(0, K K^T)`).
pub fn conjecture_sigma2_table(
    chart: ManifoldChart,
    model: &dyn RidgeModel,
    ell: f64,
    accept: &AcceptFunction,
    xs: &[f64],
    quad_n: usize,
) -> Result<Sigma2Table> {
    check_dim("model n_x", chart.n_x(), model.n_x())?;
    check_dim("model n_y", 1, model.n_y())?;
    if xs.len() < 2 || xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("sigma^2 grid must be increasing with at least two points".into()));
    }
    let s2 = |x: f64| -> Result<f64> {
        let fr = frame(chart, &[x])?;
        let k_scale = (&fr.k * fr.k.transpose())[(0, 0)].sqrt();
        let a0 = a0_quadrature(model, accept, &[x], ell * k_scale, quad_n)?;
        Ok(ell * ell * a0 / fr.g[(0, 0)])
    };
    let h = 1e-3;
    let mut sigma2 = Vec::with_capacity(xs.len());
    let mut dsigma2 = Vec::with_capacity(xs.len());
    for &x in xs {
        sigma2.push(s2(x)?);
        dsigma2.push((s2(x + h)? - s2(x - h)?) / (2.0 * h));
    }
    Ok(Sigma2Table { xs: xs.to_vec(), sigma2, dsigma2 })
}

/// CONJECTURE: Euler–Maruyama for `dX = (1/2 (s2)' + 1/2 s2 A') dt + sqrt(s2) dW`
/// with `s2` from [`conjecture_sigma2_table`], started from `e^A`.
#[allow(clippy::too_many_arguments)]
pub fn conjecture_sde_simulate(
    model: &dyn RidgeModel,
    table: &Sigma2Table,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    record_every: usize,
    rng: &mut dyn RngCore,
) -> Result<PathEnsemble> {
    simulate_diffusion(model, table, t_end, dt, n_paths, &DiffusionInit::Stationary, record_every, rng)
}
