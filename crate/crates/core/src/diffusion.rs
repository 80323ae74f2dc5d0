//! The diffusive regime `h(eps) = eps`: the limiting acceptance `a0(x, l)`,
//! the volatility `sigma^2(x) = l(x)^2 a0(x, l(x))`, the Langevin-type drift
//! `sigma^2'/2 + sigma^2 A'/2`, Euler–Maruyama simulation of the limit, and
//! numeric checks of the generator identities behind it.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accept::AcceptFunction;
use crate::error::{check_dim, Error, Result};
use crate::quadrature::{simpson, GaussHermite};
use crate::rng::stream;
use crate::rwm::{PinnedChain, StepSize};
use crate::targets::RidgeModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A0Method {
    /// Monte Carlo with `u` drawn from the exact conditional sampler.
    ExactConditional,
    /// Ergodic average along the pinned chain after burn-in.
    PinnedErgodic,
    /// Tensor quadrature over `(u, z)`; one-dimensional `u` only.
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A0Estimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Set when the pinned chain's two halves disagree by more than 5 SE.
    pub warning: bool,
}

/// `a0(x, l) = E[F(B(x, u + l Z) - B(x, u))]`, `u ~ exp B(x, .)`.
///
/// Every call restarts the same random stream, so estimates at different
/// `(x, l)` share common random numbers and finite differences are smooth.
#[derive(Debug, Clone)]
pub struct A0Estimator {
    pub method: A0Method,
    pub accept: AcceptFunction,
    pub n_mc: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Simpson intervals per axis for [`A0Method::Quadrature`].
    pub quad_intervals: usize,
}

impl A0Estimator {
    pub fn new(method: A0Method, accept: AcceptFunction, n_mc: usize, seed: u64) -> Self {
        A0Estimator {
            method,
            accept,
            n_mc,
            burn_in: 1000,
            seed,
            quad_intervals: 800,
        }
    }

    pub fn estimate(&self, model: &dyn RidgeModel, x: &[f64], ell: f64) -> Result<A0Estimate> {
        check_dim("x", model.n_x(), x.len())?;
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(Error::InvalidArgument(format!("jump parameter must be positive, got {ell}")));
        }
        match self.method {
            A0Method::ExactConditional => self.exact(model, x, ell),
            A0Method::PinnedErgodic => self.pinned(model, x, ell),
            A0Method::Quadrature => Ok(A0Estimate {
                estimate: a0_quadrature(model, &self.accept, x, ell, self.quad_intervals)?,
                std_error: 0.0,
                warning: false,
            }),
        }
    }

    fn exact(&self, model: &dyn RidgeModel, x: &[f64], ell: f64) -> Result<A0Estimate> {
        if self.n_mc < 2 {
            return Err(Error::InvalidArgument("n_mc must be at least 2".into()));
        }
        let ny = model.n_y();
        let mut rng = stream(self.seed, 0);
        let (mut u, mut up) = (vec![0.0; ny], vec![0.0; ny]);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..self.n_mc {
            model.sample_conditional(x, &mut rng, &mut u)?;
            for j in 0..ny {
                up[j] = u[j] + ell * rng.sample::<f64, _>(StandardNormal);
            }
            let p = self.accept.value(model.log_conditional(x, &up) - model.log_conditional(x, &u));
            s += p;
            s2 += p * p;
        }
        let n = self.n_mc as f64;
        let m = s / n;
        let var = ((s2 / n - m * m) * n / (n - 1.0)).max(0.0);
        Ok(A0Estimate {
            estimate: m,
            std_error: (var / n).sqrt(),
            warning: false,
        })
    }

    fn pinned(&self, model: &dyn RidgeModel, x: &[f64], ell: f64) -> Result<A0Estimate> {
        const BATCHES: usize = 40;
        if self.n_mc < 2 * BATCHES {
            return Err(Error::InvalidArgument(format!("pinned estimator needs n_mc >= {}", 2 * BATCHES)));
        }
        let mut rng = stream(self.seed, 1);
        let mut u0 = vec![0.0; model.n_y()];
        if model.has_exact_sampler() {
            model.sample_conditional(x, &mut rng, &mut u0)?;
        }
        let mut chain = PinnedChain::new(model, &self.accept, x, ell, &u0)?;
        for _ in 0..self.burn_in {
            chain.advance(&mut rng);
        }
        let per = self.n_mc / BATCHES;
        let mut means = Vec::with_capacity(BATCHES);
        for _ in 0..BATCHES {
            let mut s = 0.0;
            for _ in 0..per {
                s += chain.advance(&mut rng).accept_prob;
            }
            means.push(s / per as f64);
        }
        let (m, se) = batch_stats(&means);
        let (m1, se1) = batch_stats(&means[..BATCHES / 2]);
        let (m2, se2) = batch_stats(&means[BATCHES / 2..]);
        let warning = (m1 - m2).abs() > 5.0 * (se1 * se1 + se2 * se2).sqrt();
        Ok(A0Estimate {
            estimate: m,
            std_error: se,
            warning,
        })
    }
}

fn batch_stats(means: &[f64]) -> (f64, f64) {
    let b = means.len() as f64;
    let m = means.iter().sum::<f64>() / b;
    let v = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (b - 1.0);
    (m, (v / b).sqrt())
}

fn quad_scale(model: &dyn RidgeModel, x: &[f64]) -> f64 {
    model.conditional_scale(x).unwrap_or(1.0)
}

/// `a0(x, l)` by Simpson over `u` on `±12 s` and over `z` on `±10`, where `s`
/// is the model's conditional scale. Requires `n_y = 1`.
pub fn a0_quadrature(model: &dyn RidgeModel, accept: &AcceptFunction, x: &[f64], ell: f64, n: usize) -> Result<f64> {
    check_dim("u", 1, model.n_y())?;
    let s = quad_scale(model, x);
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    Ok(simpson(
        |u| {
            let b = model.log_conditional(x, &[u]);
            let inner = simpson(
                |z| accept.value(model.log_conditional(x, &[u + ell * z]) - b) * (-0.5 * z * z).exp(),
                -10.0,
                10.0,
                n,
            );
            inner * inv_sqrt_2pi * b.exp()
        },
        -12.0 * s,
        12.0 * s,
        n,
    ))
}

/// Estimates of `a0` on an `(x, l)` lattice, `n_x = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A0Lattice {
    pub xs: Vec<f64>,
    pub ells: Vec<f64>,
    /// Row-major in `(x, l)`.
    pub entries: Vec<A0Estimate>,
}

impl A0Lattice {
    pub fn compute(est: &A0Estimator, model: &dyn RidgeModel, xs: &[f64], ells: &[f64]) -> Result<Self> {
        check_dim("x", 1, model.n_x())?;
        if xs.len() < 2 || ells.is_empty() || xs.windows(2).any(|w| w[1] <= w[0]) || ells.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("lattice axes must be increasing, with at least two x values".into()));
        }
        let cells: Vec<(f64, f64)> = xs.iter().flat_map(|&x| ells.iter().map(move |&l| (x, l))).collect();
        let entries = cells
            .par_iter()
            .map(|&(x, l)| est.estimate(model, &[x], l))
            .collect::<Result<Vec<_>>>()?;
        Ok(A0Lattice {
            xs: xs.to_vec(),
            ells: ells.to_vec(),
            entries,
        })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.ells.len() + j].estimate
    }

    /// Bilinear interpolation, clamped to the lattice.
    pub fn interpolate(&self, x: f64, ell: f64) -> f64 {
        let (i, tx) = bracket(&self.xs, x);
        if self.ells.len() == 1 {
            return (1.0 - tx) * self.at(i, 0) + tx * self.at(i + 1, 0);
        }
        let (j, tl) = bracket(&self.ells, ell);
        let lo = (1.0 - tl) * self.at(i, j) + tl * self.at(i, j + 1);
        let hi = (1.0 - tl) * self.at(i + 1, j) + tl * self.at(i + 1, j + 1);
        (1.0 - tx) * lo + tx * hi
    }

    /// Columns `x, ell, estimate, std_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,ell,estimate,std_error")?;
        for (i, x) in self.xs.iter().enumerate() {
            for (j, l) in self.ells.iter().enumerate() {
                let e = &self.entries[i * self.ells.len() + j];
                writeln!(w, "{x},{l},{},{}", e.estimate, e.std_error)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows: Vec<[f64; 4]> = Vec::new();
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("a0 lattice line {}: {e}", k + 1)))?;
            if vals.len() != 4 {
                return Err(Error::InvalidArgument(format!("a0 lattice line {}: expected 4 columns", k + 1)));
            }
            rows.push([vals[0], vals[1], vals[2], vals[3]]);
        }
        let mut xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        xs.dedup();
        let n_l = rows.len() / xs.len().max(1);
        let ells: Vec<f64> = rows.iter().take(n_l).map(|r| r[1]).collect();
        if xs.len() * ells.len() != rows.len() {
            return Err(Error::InvalidArgument("a0 lattice is not a full grid".into()));
        }
        Ok(A0Lattice {
            xs,
            ells,
            entries: rows
                .iter()
                .map(|r| A0Estimate {
                    estimate: r[2],
                    std_error: r[3],
                    warning: false,
                })
                .collect(),
        })
    }
}

/// Index `i` and weight `t` with `v ~ (1 - t) g[i] + t g[i + 1]`, clamped.
fn bracket(g: &[f64], v: f64) -> (usize, f64) {
    let n = g.len();
    if v <= g[0] {
        return (0, 0.0);
    }
    if v >= g[n - 1] {
        return (n - 2, 1.0);
    }
    let i = g.partition_point(|&a| a <= v) - 1;
    let i = i.min(n - 2);
    (i, (v - g[i]) / (g[i + 1] - g[i]))
}

/// `sigma^2(x) = l(x)^2 a0(x, l(x))` and the drift of the limiting SDE.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub model: Arc<dyn RidgeModel>,
    pub ell: StepSize,
    pub a0: A0Estimator,
    pub fd_step: f64,
}

impl DiffusionModel {
    pub fn new(model: Arc<dyn RidgeModel>, ell: StepSize, a0: A0Estimator) -> Self {
        DiffusionModel {
            model,
            ell,
            a0,
            fd_step: 1e-3,
        }
    }

    pub fn sigma2(&self, x: &[f64]) -> Result<A0Estimate> {
        let l = self.ell.at(x);
        let a = self.a0.estimate(self.model.as_ref(), x, l)?;
        Ok(A0Estimate {
            estimate: l * l * a.estimate,
            std_error: l * l * a.std_error,
            warning: a.warning,
        })
    }

    /// Central differences with step `fd_step`; the estimator's fixed seed
    /// supplies common random numbers at `x ± fd_step`.
    pub fn grad_sigma2(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut xp = x.to_vec();
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            xp[i] = x[i] + self.fd_step;
            let up = self.sigma2(&xp)?.estimate;
            xp[i] = x[i] - self.fd_step;
            let dn = self.sigma2(&xp)?.estimate;
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * self.fd_step);
        }
        Ok(g)
    }

    /// `grad(sigma^2)/2 + sigma^2 grad(A)/2`.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("x", self.model.n_x(), x.len())?;
        let s2 = self.sigma2(x)?.estimate;
        let mut ga = vec![0.0; x.len()];
        self.model.grad_log_marginal(x, &mut ga);
        let g = self.grad_sigma2(x)?;
        Ok(g.iter().zip(&ga).map(|(d, a)| 0.5 * d + 0.5 * s2 * a).collect())
    }

    /// Tabulates `sigma^2` and its derivative on `xs` (`n_x = 1`).
    pub fn tabulate(&self, xs: &[f64]) -> Result<Sigma2Table> {
        check_dim("x", 1, self.model.n_x())?;
        if xs.len() < 2 || xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("sigma^2 grid must be increasing with at least two points".into()));
        }
        let rows = xs
            .par_iter()
            .map(|&x| Ok((self.sigma2(&[x])?.estimate, self.grad_sigma2(&[x])?[0])))
            .collect::<Result<Vec<(f64, f64)>>>()?;
        Ok(Sigma2Table {
            xs: xs.to_vec(),
            sigma2: rows.iter().map(|r| r.0).collect(),
            dsigma2: rows.iter().map(|r| r.1).collect(),
        })
    }

    /// The default Euler–Maruyama step `1e-3 min(1, 1 / sigma2_max)`.
    pub fn default_dt(sigma2_max: f64) -> f64 {
        1e-3 * (1.0f64).min(1.0 / sigma2_max)
    }
}

/// The coefficient `sigma^2(x)` of the limiting SDE.
pub trait Volatility: Send + Sync {
    fn sigma2(&self, x: &[f64]) -> f64;
    fn grad_sigma2(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantVolatility(pub f64);

impl Volatility for ConstantVolatility {
    fn sigma2(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn grad_sigma2(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Precomputed `sigma^2` and `d sigma^2 / dx` on a 1-d grid, linearly
/// interpolated and held constant outside the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Table {
    pub xs: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub dsigma2: Vec<f64>,
}

impl Sigma2Table {
    pub fn max_sigma2(&self) -> f64 {
        self.sigma2.iter().copied().fold(0.0, f64::max)
    }
}

impl Volatility for Sigma2Table {
    fn sigma2(&self, x: &[f64]) -> f64 {
        let (i, t) = bracket(&self.xs, x[0]);
        (1.0 - t) * self.sigma2[i] + t * self.sigma2[i + 1]
    }
    fn grad_sigma2(&self, x: &[f64], out: &mut [f64]) {
        if x[0] < self.xs[0] || x[0] > self.xs[self.xs.len() - 1] {
            out[0] = 0.0;
            return;
        }
        let (i, t) = bracket(&self.xs, x[0]);
        out[0] = (1.0 - t) * self.dsigma2[i] + t * self.dsigma2[i + 1];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionInit {
    /// Independent draws from `exp A`.
    Stationary,
    Fixed(Vec<f64>),
}

/// Recorded states `paths[p][k]` at `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub paths: Vec<Vec<Vec<f64>>>,
}

impl PathEnsemble {
    /// Coordinate `coord` of every path at recorded index `k`.
    pub fn marginal(&self, k: usize, coord: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p[k][coord]).collect()
    }

    /// Columns `path, t, x1..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n_x = self.paths.first().and_then(|p| p.first()).map_or(0, |s| s.len());
        let cols: Vec<String> = (1..=n_x).map(|i| format!("x{i}")).collect();
        writeln!(w, "path,t,{}", cols.join(","))?;
        for (p, path) in self.paths.iter().enumerate() {
            for (t, s) in self.times.iter().zip(path) {
                write!(w, "{p},{t}")?;
                for v in s {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Euler–Maruyama for `dX = (grad sigma^2 / 2 + sigma^2 grad A / 2) dt + sigma dW`
/// with fixed step `dt`, recording every `record_every` steps (and at 0).
/// Path `p` uses stream `p` of a master seed drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_diffusion(
    model: &dyn RidgeModel,
    vol: &dyn Volatility,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    init: &DiffusionInit,
    record_every: usize,
    rng: &mut dyn RngCore,
) -> Result<PathEnsemble> {
    if !(dt > 0.0 && t_end >= dt * (1.0 - 1e-12)) {
        return Err(Error::InvalidArgument(format!("need dt > 0 and T >= dt, got dt = {dt}, T = {t_end}")));
    }
    if record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be at least 1".into()));
    }
    let n_x = model.n_x();
    if let DiffusionInit::Fixed(x) = init {
        check_dim("x", n_x, x.len())?;
    } else if !model.has_exact_sampler() {
        return Err(Error::Unsupported(format!("{} has no marginal sampler", model.name())));
    }
    let n_steps = (t_end / dt).round().max(1.0) as usize;
    let master = rng.next_u64();
    let mut times: Vec<f64> = (0..=n_steps).step_by(record_every).map(|k| k as f64 * dt).collect();
    if n_steps % record_every != 0 {
        times.push(n_steps as f64 * dt);
    }

    let paths = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = stream(master, p as u64);
            let mut x = match init {
                DiffusionInit::Fixed(x) => x.clone(),
                DiffusionInit::Stationary => {
                    let mut x = vec![0.0; n_x];
                    model.sample_marginal(&mut r, &mut x)?;
                    x
                }
            };
            let (mut ga, mut gs) = (vec![0.0; n_x], vec![0.0; n_x]);
            let mut rec = Vec::with_capacity(times.len());
            rec.push(x.clone());
            let sq = dt.sqrt();
            for k in 1..=n_steps {
                let s2 = vol.sigma2(&x);
                vol.grad_sigma2(&x, &mut gs);
                model.grad_log_marginal(&x, &mut ga);
                let s = s2.max(0.0).sqrt();
                for i in 0..n_x {
                    let drift = 0.5 * gs[i] + 0.5 * s2 * ga[i];
                    x[i] += drift * dt + s * sq * r.sample::<f64, _>(StandardNormal);
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Blowup { path: p, step: k });
                }
                if k % record_every == 0 || k == n_steps {
                    rec.push(x.clone());
                }
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble { times, paths })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalEll {
    pub ell: f64,
    /// `l^2 a0(x, l)` at the optimum.
    pub speed: f64,
    pub a0: f64,
    pub at_boundary: bool,
}

/// Grid argmax of `l^2 a0(x, l)` refined by golden-section search on the
/// bracketing interval. The estimator's fixed seed makes the objective a
/// deterministic function of `l`.
pub fn optimal_ell(model: &dyn RidgeModel, est: &A0Estimator, x: &[f64], grid: &[f64]) -> Result<OptimalEll> {
    if grid.len() < 3 || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] <= 0.0 {
        return Err(Error::InvalidArgument("l grid must be positive, increasing, with at least 3 points".into()));
    }
    let speed = |l: f64| -> Result<f64> { Ok(l * l * est.estimate(model, x, l)?.estimate) };
    let values = grid.iter().map(|&l| speed(l)).collect::<Result<Vec<_>>>()?;
    let k = (0..grid.len()).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    let at_boundary = k == 0 || k == grid.len() - 1;
    let (mut a, mut b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (speed(c)?, speed(d)?);
    for _ in 0..60 {
        if (b - a).abs() < 1e-7 * (1.0 + a.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = speed(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = speed(d)?;
        }
    }
    let mut ell = 0.5 * (a + b);
    let mut best = speed(ell)?;
    if values[k] > best {
        ell = grid[k];
        best = values[k];
    }
    Ok(OptimalEll {
        ell,
        speed: best,
        a0: best / (ell * ell),
        at_boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpKind {
    /// `exp(1 - 1 / (1 - s))`, infinitely smooth.
    GaussBump,
    /// `(1 - s)^4`.
    PolyBump,
    /// Equal to 1 for `s <= 1/4`, then a quintic smoothstep down to 0 at `s = 1`.
    Plateau,
}

/// A compactly supported radial test function of `s = |x - c|^2 / R^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub kind: BumpKind,
    pub center: Vec<f64>,
    pub radius: f64,
}

const PLATEAU: f64 = 0.25;

impl TestFunction {
    pub fn new(kind: BumpKind, center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("test-function radius must be positive, got {radius}")));
        }
        Ok(TestFunction { kind, center, radius })
    }

    fn s(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / (self.radius * self.radius)
    }

    /// `(psi, psi', psi'')` as functions of `s`.
    fn profile(&self, s: f64) -> (f64, f64, f64) {
        if s >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        match self.kind {
            BumpKind::GaussBump => {
                let q = 1.0 - s;
                let v = (1.0 - 1.0 / q).exp();
                let g1 = -1.0 / (q * q);
                let g2 = -2.0 / (q * q * q);
                (v, v * g1, v * (g2 + g1 * g1))
            }
            BumpKind::PolyBump => {
                let q = 1.0 - s;
                (q.powi(4), -4.0 * q.powi(3), 12.0 * q * q)
            }
            BumpKind::Plateau => {
                if s <= PLATEAU {
                    return (1.0, 0.0, 0.0);
                }
                let w = 1.0 - PLATEAU;
                let t = (s - PLATEAU) / w;
                let v = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
                let d1 = -30.0 * t * t * (1.0 - t) * (1.0 - t);
                let d2 = -60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
                (v, d1 / w, d2 / (w * w))
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.profile(self.s(x)).0
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let (_, d1, _) = self.profile(self.s(x));
        let r2 = self.radius * self.radius;
        for i in 0..out.len() {
            out[i] = d1 * 2.0 * (x[i] - self.center[i]) / r2;
        }
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let s = self.s(x);
        let (_, d1, d2) = self.profile(s);
        let r2 = self.radius * self.radius;
        d2 * 4.0 * s / r2 + d1 * 2.0 * x.len() as f64 / r2
    }

    /// Row-major Hessian.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let (_, d1, d2) = self.profile(self.s(x));
        let r2 = self.radius * self.radius;
        for i in 0..n {
            for j in 0..n {
                let gi = 2.0 * (x[i] - self.center[i]) / r2;
                let gj = 2.0 * (x[j] - self.center[j]) / r2;
                out[i * n + j] = d2 * gi * gj + if i == j { d1 * 2.0 / r2 } else { 0.0 };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

fn finish(s: f64, s2: f64, n: usize) -> McEstimate {
    let nf = n as f64;
    let m = s / nf;
    let var = if n > 1 { ((s2 / nf - m * m) * nf / (nf - 1.0)).max(0.0) } else { 0.0 };
    McEstimate {
        mean: m,
        std_error: (var / nf).sqrt(),
    }
}

fn check_point(model: &dyn RidgeModel, phi: &TestFunction, x: &[f64], u: &[f64], ell: f64, n_mc: usize) -> Result<()> {
    check_dim("x", model.n_x(), x.len())?;
    check_dim("u", model.n_y(), u.len())?;
    check_dim("test-function center", model.n_x(), phi.center.len())?;
    if !(ell > 0.0 && ell.is_finite()) {
        return Err(Error::InvalidArgument(format!("jump parameter must be positive, got {ell}")));
    }
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be positive".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of
/// `l^2 <E[F'(DB) grad_x(A + B(x, u + l Z))], grad phi> + l^2/2 E[F(DB)] lap phi`.
#[allow(clippy::too_many_arguments)]
pub fn limit_operator_a_phi<R: Rng + ?Sized>(
    model: &dyn RidgeModel,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    ell: f64,
    accept: &AcceptFunction,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_point(model, phi, x, u, ell, n_mc)?;
    if !accept.is_smooth() {
        return Err(Error::Unsupported(format!("the limit operator needs a smooth accept function, got {}", accept.name())));
    }
    let (nx, ny) = (model.n_x(), model.n_y());
    let (mut ga, mut gb, mut gphi) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    model.grad_log_marginal(x, &mut ga);
    phi.gradient(x, &mut gphi);
    let lap = phi.laplacian(x);
    let b0 = model.log_conditional(x, u);
    let mut up = vec![0.0; ny];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_mc {
        for _ in 0..nx {
            let _: f64 = rng.sample(StandardNormal);
        }
        for j in 0..ny {
            up[j] = u[j] + ell * rng.sample::<f64, _>(StandardNormal);
        }
        let db = model.log_conditional(x, &up) - b0;
        model.grad_x_log_conditional(x, &up, &mut gb);
        let dot: f64 = (0..nx).map(|i| (ga[i] + gb[i]) * gphi[i]).sum();
        let v = ell * ell * accept.derivative_value(db) * dot + 0.5 * ell * ell * accept.value(db) * lap;
        s += v;
        s2 += v * v;
    }
    Ok(finish(s, s2, n_mc))
}

/// `E[phi(X_1) - phi(x)] / eps^2` for one RWM step with `h(eps) = eps`,
/// averaging the acceptance probability over the uniform.
#[allow(clippy::too_many_arguments)]
pub fn one_step_generator<R: Rng + ?Sized>(
    model: &dyn RidgeModel,
    eps: f64,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    ell: f64,
    accept: &AcceptFunction,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_point(model, phi, x, u, ell, n_mc)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let (nx, ny) = (model.n_x(), model.n_y());
    let base = model.log_marginal(x) + model.log_conditional(x, u);
    let phi0 = phi.value(x);
    let (mut xp, mut up) = (vec![0.0; nx], vec![0.0; ny]);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_mc {
        for i in 0..nx {
            xp[i] = x[i] + ell * eps * rng.sample::<f64, _>(StandardNormal);
        }
        for j in 0..ny {
            up[j] = u[j] + ell * rng.sample::<f64, _>(StandardNormal);
        }
        let r = model.log_marginal(&xp) + model.log_conditional(&xp, &up) - base;
        let v = (phi.value(&xp) - phi0) * accept.value(r) / (eps * eps);
        s += v;
        s2 += v * v;
    }
    Ok(finish(s, s2, n_mc))
}

/// Signed estimate of `L_eps phi(x, u) - A phi(x, u)` from a single set of
/// draws `(Z_x, Z_y)`: each sample is the one-step increment minus two
/// mean-zero or mean-matching companions built from the same draws,
///
/// ```text
/// l <Z_x, grad phi> F(DB) / eps                              (mean 0)
/// l^2 F'(DB) <g, Z_x><Z_x, grad phi> + l^2/2 F(DB) Z_x' H Z_x   (mean A phi)
/// ```
///
/// with `g = grad_x(A + B)(x, u + l Z_y)` and `H` the Hessian of `phi`, so the
/// per-sample variance is `O(eps^2)` rather than `O(eps^-2)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_gap<R: Rng + ?Sized>(
    model: &dyn RidgeModel,
    eps: f64,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    ell: f64,
    accept: &AcceptFunction,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_point(model, phi, x, u, ell, n_mc)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    if !accept.is_smooth() {
        return Err(Error::Unsupported(format!("the limit operator needs a smooth accept function, got {}", accept.name())));
    }
    let (nx, ny) = (model.n_x(), model.n_y());
    let base = model.log_marginal(x) + model.log_conditional(x, u);
    let b0 = model.log_conditional(x, u);
    let phi0 = phi.value(x);
    let (mut ga, mut gb, mut gphi) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    let mut hess = vec![0.0; nx * nx];
    model.grad_log_marginal(x, &mut ga);
    phi.gradient(x, &mut gphi);
    phi.hessian(x, &mut hess);
    let (mut zx, mut xp, mut up) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; ny]);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_mc {
        for i in 0..nx {
            zx[i] = rng.sample(StandardNormal);
            xp[i] = x[i] + ell * eps * zx[i];
        }
        for j in 0..ny {
            up[j] = u[j] + ell * rng.sample::<f64, _>(StandardNormal);
        }
        let r = model.log_marginal(&xp) + model.log_conditional(&xp, &up) - base;
        let step = (phi.value(&xp) - phi0) * accept.value(r) / (eps * eps);

        let db = model.log_conditional(x, &up) - b0;
        model.grad_x_log_conditional(x, &up, &mut gb);
        let (f, fp) = (accept.value(db), accept.derivative_value(db));
        let z_phi: f64 = (0..nx).map(|i| zx[i] * gphi[i]).sum();
        let z_g: f64 = (0..nx).map(|i| zx[i] * (ga[i] + gb[i])).sum();
        let mut zhz = 0.0;
        for i in 0..nx {
            for j in 0..nx {
                zhz += zx[i] * hess[i * nx + j] * zx[j];
            }
        }
        let control = ell * z_phi * f / eps;
        let mirror = ell * ell * fp * z_g * z_phi + 0.5 * ell * ell * f * zhz;
        let v = step - control - mirror;
        s += v;
        s2 += v * v;
    }
    Ok(finish(s, s2, n_mc))
}

/// Result of comparing `int A phi(x, u) e^{B(x, u)} du` with `L phi(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragingCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// Error budget: node-doubling differences of both sides plus the
    /// finite-difference error of `a0'`, floored at `1e-10`.
    pub tolerance: f64,
}

/// The two half-identities obtained by averaging over `u`:
/// `int E[F'(DB)] e^B du = a0 / 2` and `int E[F'(DB) d_x B(x, u + l Z)] e^B du = a0' / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfIdentities {
    pub mean_fprime: f64,
    pub half_a0: f64,
    pub mean_fprime_dxb: f64,
    pub half_da0: f64,
}

struct Quad1d<'a> {
    model: &'a dyn RidgeModel,
    accept: &'a AcceptFunction,
    ell: f64,
    n_u: usize,
    gh: GaussHermite,
}

impl Quad1d<'_> {
    /// `int E[g(DB, u, u + l Z)] e^{B(x, u)} du`.
    fn average<G: Fn(f64, f64, f64) -> f64>(&self, x: f64, g: G) -> f64 {
        let m = self.model;
        let s = quad_scale(m, &[x]);
        simpson(
            |u| {
                let b = m.log_conditional(&[x], &[u]);
                let inner = self.gh.expect(|z| {
                    let up = u + self.ell * z;
                    g(m.log_conditional(&[x], &[up]) - b, u, up)
                });
                inner * b.exp()
            },
            -12.0 * s,
            12.0 * s,
            self.n_u,
        )
    }

    fn a0(&self, x: f64) -> f64 {
        self.average(x, |db, _, _| self.accept.value(db))
    }

    fn da0(&self, x: f64, h: f64) -> f64 {
        (self.a0(x + h) - self.a0(x - h)) / (2.0 * h)
    }

    fn dxb(&self, x: f64, u: f64) -> f64 {
        let mut g = [0.0];
        self.model.grad_x_log_conditional(&[x], &[u], &mut g);
        g[0]
    }

    fn lhs(&self, phi: &TestFunction, x: f64) -> f64 {
        let mut ga = [0.0];
        self.model.grad_log_marginal(&[x], &mut ga);
        let mut gphi = [0.0];
        phi.gradient(&[x], &mut gphi);
        let lap = phi.laplacian(&[x]);
        let l2 = self.ell * self.ell;
        self.average(x, |db, _, up| {
            l2 * self.accept.derivative_value(db) * (ga[0] + self.dxb(x, up)) * gphi[0] + 0.5 * l2 * self.accept.value(db) * lap
        })
    }

    fn rhs(&self, phi: &TestFunction, x: f64, h: f64) -> f64 {
        let mut ga = [0.0];
        self.model.grad_log_marginal(&[x], &mut ga);
        let mut gphi = [0.0];
        phi.gradient(&[x], &mut gphi);
        let l2 = self.ell * self.ell;
        let a0 = self.a0(x);
        0.5 * l2 * (a0 * ga[0] + self.da0(x, h)) * gphi[0] + 0.5 * l2 * a0 * phi.laplacian(&[x])
    }
}

fn quad_setup<'a>(model: &'a dyn RidgeModel, accept: &'a AcceptFunction, ell: f64, level: usize) -> Result<Quad1d<'a>> {
    if model.n_x() != 1 || model.n_y() != 1 {
        return Err(Error::Unsupported("identity checks are implemented for n_x = n_y = 1".into()));
    }
    if !accept.is_smooth() {
        return Err(Error::Unsupported(format!("identity checks need a smooth accept function, got {}", accept.name())));
    }
    if !(ell > 0.0 && ell.is_finite()) {
        return Err(Error::InvalidArgument(format!("jump parameter must be positive, got {ell}")));
    }
    Ok(Quad1d {
        model,
        accept,
        ell,
        n_u: 400 * level,
        gh: GaussHermite::new(60 * level),
    })
}

const FD_STEP: f64 = 1e-3;

pub fn averaging_identity_check(
    model: &dyn RidgeModel,
    phi: &TestFunction,
    x: f64,
    ell: f64,
    accept: &AcceptFunction,
) -> Result<AveragingCheck> {
    check_dim("test-function center", 1, phi.center.len())?;
    let q1 = quad_setup(model, accept, ell, 1)?;
    let q2 = quad_setup(model, accept, ell, 2)?;
    let (lhs, lhs_coarse) = (q2.lhs(phi, x), q1.lhs(phi, x));
    let (rhs, rhs_coarse) = (q2.rhs(phi, x, FD_STEP), q1.rhs(phi, x, FD_STEP));
    let mut gphi = [0.0];
    phi.gradient(&[x], &mut gphi);
    // Central differences have error ~ c h^2; the step-doubling difference
    // is ~ 3 c h^2, an upper bound on it.
    let fd_err = 0.5 * ell * ell * gphi[0].abs() * (q2.da0(x, FD_STEP) - q2.da0(x, 2.0 * FD_STEP)).abs();
    let tolerance = (lhs - lhs_coarse).abs() + (rhs - rhs_coarse).abs() + fd_err + 1e-10;
    Ok(AveragingCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        tolerance,
    })
}

pub fn half_identities(model: &dyn RidgeModel, x: f64, ell: f64, accept: &AcceptFunction) -> Result<HalfIdentities> {
    let q = quad_setup(model, accept, ell, 2)?;
    Ok(HalfIdentities {
        mean_fprime: q.average(x, |db, _, _| accept.derivative_value(db)),
        half_a0: 0.5 * q.a0(x),
        mean_fprime_dxb: q.average(x, |db, _, up| accept.derivative_value(db) * q.dxb(x, up)),
        half_da0: 0.5 * q.da0(x, FD_STEP),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::BuiltinTargetId;
    use std::f64::consts::PI;

    fn gauss() -> Arc<dyn RidgeModel> {
        BuiltinTargetId::GaussRidge.model()
    }
    fn curved() -> Arc<dyn RidgeModel> {
        BuiltinTargetId::CurvedRidge.model()
    }

    /// Acceptance rate of 1-d RWM with step `l` on N(0, 1) under MH.
    fn mh_gauss_a0(l: f64) -> f64 {
        2.0 / PI * (2.0 / l).atan()
    }

    /// Independent 2-d midpoint rule over (u, z) for a Gaussian conditional
    /// with variance `v` under the accept function `f`.
    fn oracle_a0(v: f64, l: f64, f: impl Fn(f64) -> f64) -> f64 {
        let n = 2000;
        let (lo, hi) = (-11.0, 11.0);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let a = lo + (i as f64 + 0.5) * h;
            let u = a * v.sqrt();
            for j in 0..n {
                let z = lo + (j as f64 + 0.5) * h;
                let up = u + l * z;
                let r = -(up * up - u * u) / (2.0 * v);
                acc += f(r) * (-(a * a + z * z) / 2.0).exp();
            }
        }
        acc * h * h / (2.0 * PI)
    }

    fn barker(r: f64) -> f64 {
        1.0 / (1.0 + (-r).exp())
    }

    #[test]
    fn oracle_agrees_with_closed_form() {
        let l = 2.38;
        let q = oracle_a0(1.0, l, |r| r.exp().min(1.0));
        assert!((q - mh_gauss_a0(l)).abs() < 2e-5, "{q} vs {}", mh_gauss_a0(l));
    }

    #[test]
    fn exact_estimator_matches_frozen_value() {
        // frozen: 2/pi atan(2 / 2.38)
        let frozen = 0.444_906_1;
        assert!((mh_gauss_a0(2.38) - frozen).abs() < 1e-6);
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::MetropolisHastings, 200_000, 11);
        let a = est.estimate(gauss().as_ref(), &[0.0], 2.38).unwrap();
        assert!((a.estimate - frozen).abs() < 3.0 * a.std_error, "{a:?}");
        let q = A0Estimator::new(A0Method::Quadrature, AcceptFunction::MetropolisHastings, 0, 0);
        assert!((q.estimate(gauss().as_ref(), &[0.0], 2.38).unwrap().estimate - frozen).abs() < 1e-4);
    }

    #[test]
    fn small_steps_always_accepted() {
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::MetropolisHastings, 20_000, 1);
        let a = est.estimate(gauss().as_ref(), &[0.0], 1e-4).unwrap();
        assert!((a.estimate - 1.0).abs() < 1e-3);
        let dm = DiffusionModel::new(gauss(), StepSize::Constant(1e-4), est);
        assert!((dm.sigma2(&[0.0]).unwrap().estimate / 1e-8 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gauss_ridge_a0_is_position_free() {
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::Barker, 50_000, 2);
        let a = est.estimate(gauss().as_ref(), &[0.0], 1.0).unwrap();
        let b = est.estimate(gauss().as_ref(), &[5.0], 1.0).unwrap();
        assert!((a.estimate - b.estimate).abs() <= 3.0 * (a.std_error.hypot(b.std_error)) + 1e-15);
        let dm = DiffusionModel::new(gauss(), StepSize::Constant(1.0), est);
        let s0 = dm.sigma2(&[0.0]).unwrap();
        let s3 = dm.sigma2(&[3.0]).unwrap();
        assert!((s0.estimate - s3.estimate).abs() <= 3.0 * s0.std_error.hypot(s3.std_error) + 1e-15);
    }

    #[test]
    fn curved_ridge_volatility_decreases_with_x() {
        // oracle: conditional variance 1/(1+x^2)
        let o0 = oracle_a0(1.0, 1.0, barker);
        let o2 = oracle_a0(0.2, 1.0, barker);
        assert!(o2 < o0);
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::Barker, 100_000, 3);
        let dm = DiffusionModel::new(curved(), StepSize::Constant(1.0), est);
        let s0 = dm.sigma2(&[0.0]).unwrap();
        let s2 = dm.sigma2(&[2.0]).unwrap();
        assert!(s2.estimate < s0.estimate);
        assert!((s0.estimate - o0).abs() < 3.0 * s0.std_error);
        assert!((s2.estimate - o2).abs() < 3.0 * s2.std_error);
    }

    #[test]
    fn pinned_and_exact_estimators_agree() {
        let m = curved();
        let exact = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::Barker, 100_000, 4);
        let pinned = A0Estimator::new(A0Method::PinnedErgodic, AcceptFunction::Barker, 200_000, 5);
        for (x, l) in [(0.3, 0.8), (1.5, 2.0), (-1.0, 1.2)] {
            let a = exact.estimate(m.as_ref(), &[x], l).unwrap();
            let b = pinned.estimate(m.as_ref(), &[x], l).unwrap();
            assert!((a.estimate - b.estimate).abs() < 3.0 * a.std_error.hypot(b.std_error), "{a:?} {b:?}");
            assert!(a.estimate > 0.0 && a.estimate <= 1.0);
        }
    }

    #[test]
    fn a0_is_monotone_in_ell_under_common_random_numbers() {
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::MetropolisHastings, 20_000, 6);
        let vals: Vec<f64> = (1..=20).map(|k| est.estimate(curved().as_ref(), &[0.7], 0.25 * k as f64).unwrap().estimate).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn drift_examples() {
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::Barker, 50_000, 7);
        let dm = DiffusionModel::new(gauss(), StepSize::Constant(1.0), est);
        assert!(dm.drift(&[0.0]).unwrap()[0].abs() < 1e-12);
        let s2 = dm.sigma2(&[1.0]).unwrap().estimate;
        assert!((dm.drift(&[1.0]).unwrap()[0] + 0.5 * s2).abs() < 1e-12);

        // curved ridge at x = 1 against the oracle sigma^2 at 1 +- 0.01
        let q = A0Estimator::new(A0Method::Quadrature, AcceptFunction::Barker, 0, 0);
        let dm = DiffusionModel::new(curved(), StepSize::Constant(1.0), q);
        let h = 0.01;
        let s = |x: f64| oracle_a0(1.0 / (1.0 + x * x), 1.0, barker);
        let expected = 0.5 * (s(1.0 + h) - s(1.0 - h)) / (2.0 * h) - 0.5 * s(1.0);
        let got = dm.drift(&[1.0]).unwrap()[0];
        assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
    }

    #[test]
    fn ou_limit_is_stationary_and_decorrelates() {
        let s2 = 0.6;
        let mut rng = stream(8, 0);
        let ens = simulate_diffusion(gauss().as_ref(), &ConstantVolatility(s2), 5.0, 1e-3, 4000, &DiffusionInit::Stationary, 1000, &mut rng).unwrap();
        let last = ens.marginal(ens.times.len() - 1, 0);
        let n = last.len() as f64;
        let var = last.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        // lag-1 autocorrelation exp(-sigma^2 / 2)
        let x0 = ens.marginal(0, 0);
        let x1 = ens.marginal(1, 0);
        let c = x0.iter().zip(&x1).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((c - (-s2 / 2.0f64).exp()).abs() < 4.0 / n.sqrt());
    }

    #[test]
    fn single_step_increment_variance() {
        let s2 = 0.5;
        let dt = 0.01;
        let mut rng = stream(9, 0);
        let ens = simulate_diffusion(gauss().as_ref(), &ConstantVolatility(s2), dt, dt, 10_000, &DiffusionInit::Fixed(vec![0.0]), 1, &mut rng).unwrap();
        assert_eq!(ens.times.len(), 2);
        let inc = ens.marginal(1, 0);
        let n = inc.len() as f64;
        let var = inc.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - s2 * dt).abs() < 4.0 * s2 * dt * (2.0 / n).sqrt());
        assert!(simulate_diffusion(gauss().as_ref(), &ConstantVolatility(s2), 0.001, 0.01, 1, &DiffusionInit::Stationary, 1, &mut rng).is_err());
    }

    #[test]
    fn blowup_is_reported() {
        struct Bad;
        impl Volatility for Bad {
            fn sigma2(&self, _x: &[f64]) -> f64 {
                1.0
            }
            fn grad_sigma2(&self, x: &[f64], out: &mut [f64]) {
                out[0] = 1e200 * x[0].abs().max(1.0);
            }
        }
        let mut rng = stream(10, 0);
        let err = simulate_diffusion(gauss().as_ref(), &Bad, 1.0, 0.01, 2, &DiffusionInit::Fixed(vec![1.0]), 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Blowup { .. }));
    }

    #[test]
    fn optimal_ell_examples() {
        // With one fast coordinate a0 decays like 1/l, so l^2 a0 is increasing
        // (oracle: the closed form) and the argmax sits on the grid boundary.
        assert!((1..100).all(|k| {
            let (a, b) = (0.1 * k as f64, 0.1 * (k + 1) as f64);
            b * b * mh_gauss_a0(b) > a * a * mh_gauss_a0(a)
        }));
        let q = A0Estimator::new(A0Method::Quadrature, AcceptFunction::MetropolisHastings, 0, 0);
        let grid: Vec<f64> = (1..=16).map(|k| 0.5 * k as f64).collect();
        let o = optimal_ell(gauss().as_ref(), &q, &[0.0], &grid).unwrap();
        assert!(o.at_boundary && o.ell == 8.0, "{o:?}");
        assert!((o.a0 - mh_gauss_a0(8.0)).abs() < 1e-4);
        let o2 = optimal_ell(gauss().as_ref(), &q, &[2.0], &grid).unwrap();
        assert!((o.ell - o2.ell).abs() < 1e-6);

        // Three fast coordinates: interior optimum, and a0 depends on l only
        // through l sqrt(1 + x^2), so l*(0) = sqrt(5) l*(2).
        let m = BuiltinTargetId::ProductRidge { n_y: 3 }.model();
        let est = A0Estimator::new(A0Method::ExactConditional, AcceptFunction::Barker, 100_000, 21);
        let grid: Vec<f64> = (1..=30).map(|k| 0.2 * k as f64).collect();
        let c0 = optimal_ell(m.as_ref(), &est, &[0.0], &grid).unwrap();
        let c2 = optimal_ell(m.as_ref(), &est, &[2.0], &grid).unwrap();
        assert!(!c0.at_boundary && !c2.at_boundary, "{c0:?} {c2:?}");
        assert!(c0.ell > c2.ell);
        assert!((c0.ell / c2.ell - 5f64.sqrt()).abs() < 0.05, "{c0:?} {c2:?}");
    }

    #[test]
    fn test_function_derivatives_match_finite_differences() {
        for kind in [BumpKind::GaussBump, BumpKind::PolyBump, BumpKind::Plateau] {
            let phi = TestFunction::new(kind, vec![0.2, -0.1], 1.5).unwrap();
            let x = [0.7, 0.3];
            let h = 1e-4;
            let mut g = [0.0; 2];
            phi.gradient(&x, &mut g);
            let mut hs = [0.0; 4];
            phi.hessian(&x, &mut hs);
            let mut lap_fd = 0.0;
            for i in 0..2 {
                let mut p = x;
                p[i] += h;
                let mut m = x;
                m[i] -= h;
                let d = (phi.value(&p) - phi.value(&m)) / (2.0 * h);
                assert!((d - g[i]).abs() < 1e-6, "{kind:?}");
                lap_fd += (phi.value(&p) - 2.0 * phi.value(&x) + phi.value(&m)) / (h * h);
            }
            assert!((lap_fd - phi.laplacian(&x)).abs() < 1e-4);
            assert!((hs[0] + hs[3] - phi.laplacian(&x)).abs() < 1e-12);
            assert_eq!(phi.value(&[5.0, 5.0]), 0.0);
        }
    }

    #[test]
    fn operators_vanish_where_phi_is_flat() {
        let phi = TestFunction::new(BumpKind::Plateau, vec![0.0], 2.0).unwrap();
        let mut rng = stream(12, 0);
        let a = limit_operator_a_phi(curved().as_ref(), &phi, &[0.2], &[0.1], 1.0, &AcceptFunction::Barker, 1000, &mut rng).unwrap();
        assert_eq!(a.mean, 0.0);
        let c = averaging_identity_check(curved().as_ref(), &phi, 0.2, 1.0, &AcceptFunction::Barker).unwrap();
        assert!(c.lhs.abs() < 1e-14 && c.rhs.abs() < 1e-14);
        assert!(limit_operator_a_phi(curved().as_ref(), &phi, &[0.2], &[0.1], 1.0, &AcceptFunction::MetropolisHastings, 10, &mut rng).is_err());
    }

    #[test]
    fn gauss_ridge_limit_operator_reduces() {
        // grad_x B = 0 so A phi = l^2 E[F'(DB)] A'(x) phi' + l^2/2 E[F] phi''
        let phi = TestFunction::new(BumpKind::GaussBump, vec![0.0], 3.0).unwrap();
        let (x, u, l) = (0.5, 0.3, 1.0);
        let mut rng = stream(13, 0);
        let got = limit_operator_a_phi(gauss().as_ref(), &phi, &[x], &[u], l, &AcceptFunction::Barker, 200_000, &mut rng).unwrap();
        let gh = GaussHermite::new(80);
        let b = |v: f64| -v * v / 2.0;
        let ef = gh.expect(|z| barker(b(u + l * z) - b(u)));
        let efp = gh.expect(|z| {
            let p = barker(b(u + l * z) - b(u));
            p * (1.0 - p)
        });
        let mut g = [0.0];
        phi.gradient(&[x], &mut g);
        let expected = l * l * efp * (-x) * g[0] + 0.5 * l * l * ef * phi.laplacian(&[x]);
        assert!((got.mean - expected).abs() < 4.0 * got.std_error, "{got:?} vs {expected}");
    }

    #[test]
    fn one_step_generator_vanishes_for_tiny_steps() {
        let phi = TestFunction::new(BumpKind::GaussBump, vec![0.0], 3.0).unwrap();
        let mut rng = stream(14, 0);
        let v = one_step_generator(gauss().as_ref(), 0.1, &phi, &[0.5], &[0.0], 1e-9, &AcceptFunction::Barker, 1000, &mut rng).unwrap();
        assert!(v.mean.abs() < 1e-6);
    }

    #[test]
    fn generator_gap_matches_separate_estimates() {
        let phi = TestFunction::new(BumpKind::GaussBump, vec![0.0], 3.0).unwrap();
        let (x, u, l, eps) = ([0.5], [0.3], 1.0, 0.1);
        let f = AcceptFunction::Barker;
        let m = curved();
        let gap = generator_gap(m.as_ref(), eps, &phi, &x, &u, l, &f, 200_000, &mut stream(15, 0)).unwrap();
        let ls = one_step_generator(m.as_ref(), eps, &phi, &x, &u, l, &f, 400_000, &mut stream(16, 0)).unwrap();
        let a = limit_operator_a_phi(m.as_ref(), &phi, &x, &u, l, &f, 400_000, &mut stream(17, 0)).unwrap();
        let diff = ls.mean - a.mean;
        let se = (ls.std_error.powi(2) + a.std_error.powi(2) + gap.std_error.powi(2)).sqrt();
        assert!((gap.mean - diff).abs() < 4.0 * se, "{gap:?} vs {diff} +- {se}");
        assert!(gap.std_error < 0.1 * ls.std_error);
    }

    #[test]
    fn averaging_identity_holds() {
        let f = AcceptFunction::Barker;
        for m in [gauss(), curved()] {
            for x in [-1.0, 0.0, 0.5, 2.0] {
                let phi = TestFunction::new(BumpKind::GaussBump, vec![0.3], 3.0).unwrap();
                let c = averaging_identity_check(m.as_ref(), &phi, x, 1.0, &f).unwrap();
                assert!(c.gap < 3.0 * c.tolerance, "{} x={x}: {c:?}", m.name());
                assert!(c.gap < 1e-2);
            }
        }
    }

    #[test]
    fn half_identities_hold() {
        let h = half_identities(curved().as_ref(), 0.5, 1.0, &AcceptFunction::Barker).unwrap();
        assert!((h.mean_fprime - h.half_a0).abs() < 1e-3, "{h:?}");
        assert!((h.mean_fprime_dxb - h.half_da0).abs() < 1e-3, "{h:?}");
    }

    #[test]
    fn lattice_round_trip_and_interpolation() {
        let q = A0Estimator::new(A0Method::Quadrature, AcceptFunction::Barker, 0, 0);
        let lat = A0Lattice::compute(&q, curved().as_ref(), &[0.0, 1.0, 2.0], &[0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        lat.write_csv(&mut buf).unwrap();
        let back = A0Lattice::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.xs, lat.xs);
        assert_eq!(back.ells, lat.ells);
        for (a, b) in back.entries.iter().zip(&lat.entries) {
            assert_eq!(a.estimate, b.estimate);
        }
        assert_eq!(lat.interpolate(1.0, 1.0), lat.entries[3].estimate);
        let mid = lat.interpolate(0.5, 0.5);
        assert!((mid - 0.5 * (lat.entries[0].estimate + lat.entries[2].estimate)).abs() < 1e-14);
        assert_eq!(lat.interpolate(-9.0, 0.1), lat.entries[0].estimate);
    }
}
