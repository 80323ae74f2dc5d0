//! The vanishing-acceptance regime `h(eps) = 1`.
//!
//! With O(1) proposals a move is accepted with probability `O(eps^{n_y})`;
//! after accelerating time by `eps^{-n_y}` the chain converges to a jump
//! process that waits `Exp(r(x, u))` and then jumps according to
//! `K = Q / r`, where
//!
//! ```text
//! Q(x, u, xb, ub) = F(A(xb) - A(x) + B(xb, ub) - B(x, u)) exp(-|xb - x|^2 / 2l^2) / (2 pi l^2)^{(n_x + n_y)/2}
//! ```
//!
//! Both `r` and `K` are handled by importance sampling from
//! `xb ~ N(x, l^2)`, `ub ~ exp B(xb, .)`, whose weights
//! `F(D) exp(-B(xb, ub)) / (2 pi l^2)^{n_y/2}` are bounded because `F <= e^D`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accept::AcceptFunction;
use crate::diagnostics::{iact_pooled, scaling_fit, ScalingRow, ScalingTable, SlopeFit};
use crate::error::{check_dim, Error, Result};
use crate::rng::{child_seed, stream};
use crate::rwm::{Chain, ChainState, ProposalRule, StepMode, StepSize};
use crate::targets::{MultiscaleTarget, RidgeModel};

#[derive(Debug, Clone)]
pub struct JumpModel {
    pub model: Arc<dyn RidgeModel>,
    pub ell: f64,
    pub accept: AcceptFunction,
    pub rate_mc: usize,
    pub kernel_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub rate: f64,
    pub std_error: f64,
    /// Effective sample size of the importance weights over `rate_mc`.
    pub ess_fraction: f64,
    /// Set when `ess_fraction < 0.05`.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextJump {
    pub holding_time: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl JumpModel {
    pub fn new(model: Arc<dyn RidgeModel>, ell: f64, accept: AcceptFunction) -> Result<Self> {
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(Error::InvalidArgument(format!("jump parameter must be positive, got {ell}")));
        }
        Ok(JumpModel {
            model,
            ell,
            accept,
            rate_mc: 20_000,
            kernel_batch: 4096,
        })
    }

    fn check(&self, x: &[f64], u: &[f64]) -> Result<()> {
        check_dim("x", self.model.n_x(), x.len())?;
        check_dim("u", self.model.n_y(), u.len())
    }

    fn require_sampler(&self) -> Result<()> {
        if !self.model.has_exact_sampler() {
            return Err(Error::Unsupported(format!(
                "{} has no exact conditional sampler for importance sampling",
                self.model.name()
            )));
        }
        Ok(())
    }

    pub fn q_density(&self, x: &[f64], u: &[f64], xb: &[f64], ub: &[f64]) -> Result<f64> {
        self.check(x, u)?;
        self.check(xb, ub)?;
        let m = &self.model;
        let d = m.log_marginal(xb) - m.log_marginal(x) + m.log_conditional(xb, ub) - m.log_conditional(x, u);
        let sq: f64 = xb.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let n = (m.n_x() + m.n_y()) as f64;
        let l2 = self.ell * self.ell;
        Ok(self.accept.value(d) * (-sq / (2.0 * l2)).exp() / (2.0 * PI * l2).powf(0.5 * n))
    }

    /// Draws one importance proposal into `(xb, ub)` and returns its weight.
    fn weighted_proposal(&self, x: &[f64], base: f64, rng: &mut dyn RngCore, xb: &mut [f64], ub: &mut [f64]) -> Result<f64> {
        let m = &self.model;
        for i in 0..xb.len() {
            xb[i] = x[i] + self.ell * rng.sample::<f64, _>(StandardNormal);
        }
        m.sample_conditional(xb, rng, ub)?;
        let bb = m.log_conditional(xb, ub);
        let d = m.log_marginal(xb) + bb - base;
        let norm = (2.0 * PI * self.ell * self.ell).powf(0.5 * m.n_y() as f64);
        Ok(self.accept.value(d) * (-bb).exp() / norm)
    }

    /// Importance-sampling estimate of `r(x, u) = int Q(x, u, ., .)`.
    pub fn jump_rate(&self, x: &[f64], u: &[f64], rng: &mut dyn RngCore) -> Result<RateEstimate> {
        self.check(x, u)?;
        self.require_sampler()?;
        if self.rate_mc < 2 {
            return Err(Error::InvalidArgument("rate_mc must be at least 2".into()));
        }
        let m = &self.model;
        let base = m.log_marginal(x) + m.log_conditional(x, u);
        let (mut xb, mut ub) = (vec![0.0; m.n_x()], vec![0.0; m.n_y()]);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..self.rate_mc {
            let w = self.weighted_proposal(x, base, rng, &mut xb, &mut ub)?;
            s += w;
            s2 += w * w;
        }
        let n = self.rate_mc as f64;
        let mean = s / n;
        let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
        let ess_fraction = if s2 > 0.0 { s * s / s2 / n } else { 0.0 };
        Ok(RateEstimate {
            rate: mean,
            std_error: (var / n).sqrt(),
            ess_fraction,
            degenerate: ess_fraction < 0.05,
        })
    }

    /// Upper bound `exp(-A(x) - B(x, u)) / (2 pi l^2)^{n/2}` on `r(x, u)`
    /// implied by `F <= e^D` and the normalisation of `A` and `B`.
    pub fn rate_bound(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check(x, u)?;
        let m = &self.model;
        let n = (m.n_x() + m.n_y()) as f64;
        Ok((-m.log_marginal(x) - m.log_conditional(x, u)).exp() / (2.0 * PI * self.ell * self.ell).powf(0.5 * n))
    }

    /// Holding time `~ Exp(rate)` and the next state by self-normalised
    /// importance resampling from `kernel_batch` proposals. The resampled
    /// state carries an `O(1 / kernel_batch)` bias. An all-zero batch is
    /// retried with a doubled batch up to three times.
    pub fn sample_next_jump(&self, x: &[f64], u: &[f64], rate: f64, rng: &mut dyn RngCore) -> Result<NextJump> {
        self.check(x, u)?;
        self.require_sampler()?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("jump rate must be positive, got {rate}")));
        }
        let holding_time = rng.sample::<f64, _>(Exp1) / rate;
        let m = &self.model;
        let base = m.log_marginal(x) + m.log_conditional(x, u);
        let (nx, ny) = (m.n_x(), m.n_y());
        let mut batch = self.kernel_batch.max(1);
        for _ in 0..=3 {
            let mut xs = vec![0.0; batch * nx];
            let mut us = vec![0.0; batch * ny];
            let mut cum = Vec::with_capacity(batch);
            let mut total = 0.0;
            for k in 0..batch {
                let w = self.weighted_proposal(x, base, rng, &mut xs[k * nx..(k + 1) * nx], &mut us[k * ny..(k + 1) * ny])?;
                total += w;
                cum.push(total);
            }
            if total > 0.0 && total.is_finite() {
                let target = rng.random::<f64>() * total;
                let k = cum.partition_point(|&c| c <= target).min(batch - 1);
                return Ok(NextJump {
                    holding_time,
                    x: xs[k * nx..(k + 1) * nx].to_vec(),
                    u: us[k * ny..(k + 1) * ny].to_vec(),
                });
            }
            batch *= 2;
        }
        Err(Error::ResamplingFailure { retries: 3 })
    }

    /// Gillespie simulation on `[0, T]`; the first event is the initial state at `t = 0`.
    pub fn simulate(&self, t_end: f64, x0: &[f64], u0: &[f64], rng: &mut dyn RngCore) -> Result<Vec<JumpEvent>> {
        self.check(x0, u0)?;
        if !(t_end > 0.0) {
            return Err(Error::InvalidArgument(format!("T must be positive, got {t_end}")));
        }
        let mut events = vec![JumpEvent {
            t: 0.0,
            x: x0.to_vec(),
            u: u0.to_vec(),
        }];
        let (mut t, mut x, mut u) = (0.0, x0.to_vec(), u0.to_vec());
        loop {
            let r = self.jump_rate(&x, &u, rng)?;
            let next = self.sample_next_jump(&x, &u, r.rate, rng)?;
            t += next.holding_time;
            if t > t_end {
                return Ok(events);
            }
            x = next.x;
            u = next.u;
            events.push(JumpEvent {
                t,
                x: x.clone(),
                u: u.clone(),
            });
        }
    }
}

pub fn simulate_jump_process(jm: &JumpModel, t_end: f64, init: (&[f64], &[f64]), rng: &mut dyn RngCore) -> Result<Vec<JumpEvent>> {
    jm.simulate(t_end, init.0, init.1, rng)
}

/// Columns `t, x1.., u1..`.
pub fn write_events_csv<W: Write>(events: &[JumpEvent], mut w: W) -> std::io::Result<()> {
    let Some(first) = events.first() else {
        return Ok(());
    };
    let mut header = vec!["t".to_string()];
    header.extend((1..=first.x.len()).map(|i| format!("x{i}")));
    header.extend((1..=first.u.len()).map(|i| format!("u{i}")));
    writeln!(w, "{}", header.join(","))?;
    for e in events {
        write!(w, "{}", e.t)?;
        for v in e.x.iter().chain(&e.u) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Runs the `h(eps) = 1` chain for `floor(T eps^{-n_y})` steps and emits an
/// event at rescaled time `k eps^{n_y}` for every accepted move.
pub fn accelerated_prelimit(
    target: &MultiscaleTarget,
    ell: f64,
    accept: &AcceptFunction,
    t_end: f64,
    init: (&[f64], &[f64]),
    rng: &mut dyn RngCore,
) -> Result<Vec<JumpEvent>> {
    let scale = target.epsilon().powi(target.n_y() as i32);
    let rule = ProposalRule::unit(ell)?;
    let mut chain = Chain::new(target, &rule, accept, ChainState::new(init.0.to_vec(), init.1.to_vec()))?;
    let n_steps = (t_end / scale).floor() as u64;
    let mut events = vec![JumpEvent {
        t: 0.0,
        x: init.0.to_vec(),
        u: init.1.to_vec(),
    }];
    for k in 1..=n_steps {
        if chain.advance(rng) {
            let s = chain.state();
            events.push(JumpEvent {
                t: k as f64 * scale,
                x: s.x.clone(),
                u: s.u.clone(),
            });
        }
    }
    Ok(events)
}

/// Stationary acceptance rate of the `h(eps) = 1` chain: the mean acceptance
/// probability along `n_chains` chains of `n_steps`, started from `pi`.
pub fn prelimit_acceptance_rate(
    target: &MultiscaleTarget,
    ell: f64,
    accept: &AcceptFunction,
    n_chains: usize,
    n_steps: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let rule = ProposalRule::unit(ell)?;
    let per_chain = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c as u64);
            let (x, u) = target.sample_stationary(1, &mut rng)?.remove(0);
            let mut chain = Chain::new(target, &rule, accept, ChainState::new(x, u))?;
            let mut s = 0.0;
            for _ in 0..n_steps {
                chain.advance(&mut rng);
                s += chain.last_accept_prob();
            }
            Ok(s / n_steps as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = per_chain.len() as f64;
    let m = per_chain.iter().sum::<f64>() / n;
    let v = per_chain.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((m, (v / n).sqrt()))
}

#[derive(Debug, Clone)]
pub struct ComplexityConfig {
    pub accept: AcceptFunction,
    pub ell_unit: f64,
    pub ell_scaled: f64,
    pub n_chains: usize,
    /// Stop when the pooled length reaches `budget_factor * tau`.
    pub budget_factor: f64,
    pub pilot_steps: u64,
    pub max_steps_per_chain: u64,
    pub seed: u64,
}

impl ComplexityConfig {
    pub fn new(accept: AcceptFunction, seed: u64) -> Self {
        ComplexityConfig {
            accept,
            ell_unit: 1.0,
            ell_scaled: 1.0,
            n_chains: 16,
            budget_factor: 2000.0,
            pilot_steps: 4096,
            max_steps_per_chain: 50_000_000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityResult {
    pub table: ScalingTable,
    pub fits: Vec<(String, SlopeFit)>,
}

/// Pooled IACT of `x_1` for stationary chains of one `(eps, mode)` setting.
///
/// Chains are extended (doubling) until their pooled length is at least
/// `budget_factor` times the current IACT estimate; the first component is
/// recorded with a stride of about a tenth of the pilot IACT, and the
/// estimate is rescaled by the stride. Rows that hit the step cap or whose
/// window exceeds a tenth of the thinned length are flagged.
pub fn iact_at(target: &MultiscaleTarget, mode: StepMode, cfg: &ComplexityConfig, seed: u64) -> Result<(f64, bool)> {
    let ell = if mode == StepMode::Unit { cfg.ell_unit } else { cfg.ell_scaled };
    let rule = ProposalRule::new(mode, StepSize::Constant(ell))?;
    let mut chains = (0..cfg.n_chains)
        .map(|c| {
            let mut rng = stream(seed, c as u64);
            let (x, u) = target.sample_stationary(1, &mut rng)?.remove(0);
            Ok((Chain::new(target, &rule, &cfg.accept, ChainState::new(x, u))?, rng, Vec::new()))
        })
        .collect::<Result<Vec<_>>>()?;

    type Slot<'a> = (Chain<'a>, crate::rng::StreamRng, Vec<f64>);
    let advance = |chains: &mut Vec<Slot>, steps: u64, stride: u64| {
        chains.par_iter_mut().for_each(|(chain, rng, rec)| {
            for k in 1..=steps {
                chain.advance(rng);
                if k % stride == 0 {
                    rec.push(chain.state().x[0]);
                }
            }
        });
    };
    let mut stride: u64 = 1;
    let mut done = cfg.pilot_steps.max(64);
    advance(&mut chains, done, stride);
    loop {
        let recs: Vec<Vec<f64>> = chains.iter().map(|c| c.2.clone()).collect();
        let est = iact_pooled(&recs);
        let tau = if est.degenerate { f64::INFINITY } else { est.tau * stride as f64 };
        let recorded = (recs[0].len() as u64 * stride * cfg.n_chains as u64) as f64;
        if est.converged && recorded >= cfg.budget_factor * tau {
            return Ok((tau, false));
        }
        if done >= cfg.max_steps_per_chain {
            return Ok((tau, true));
        }
        // Coarsen the record once the estimate says the stride is far below
        // tau / 10; the chains themselves keep running.
        let wanted = if tau.is_finite() { ((tau / 10.0).floor() as u64).max(1) } else { stride * 2 };
        if wanted >= 2 * stride {
            stride = wanted;
            for c in chains.iter_mut() {
                c.2.clear();
            }
        }
        let steps = done.min(cfg.max_steps_per_chain - done).max(stride);
        let steps = steps - steps % stride;
        advance(&mut chains, steps, stride);
        done += steps;
    }
}

/// IACT of `x_1` for every `(eps, mode)` and a log-log slope per mode.
pub fn complexity_comparison(model: Arc<dyn RidgeModel>, eps_list: &[f64], modes: &[StepMode], cfg: &ComplexityConfig) -> Result<ComplexityResult> {
    if !model.has_exact_sampler() {
        return Err(Error::Unsupported(format!("{} has no exact sampler for stationary starts", model.name())));
    }
    let mut table = ScalingTable::default();
    for (mi, mode) in modes.iter().enumerate() {
        for (ei, &eps) in eps_list.iter().enumerate() {
            let target = MultiscaleTarget::new(model.clone(), eps)?;
            let seed = child_seed(cfg.seed, (mi * 1000 + ei) as u64);
            let (tau, flagged) = iact_at(&target, *mode, cfg, seed)?;
            table.push(ScalingRow {
                eps,
                mode: mode.label(),
                statistic: tau,
                std_error: f64::NAN,
                flagged,
            });
        }
    }
    let mut fits = Vec::new();
    for mode in modes {
        let pts: Vec<(f64, f64)> = table.rows.iter().filter(|r| r.mode == mode.label()).map(|r| (r.eps, r.statistic)).collect();
        if pts.len() >= 3 {
            fits.push((mode.label(), scaling_fit(&pts)?));
        }
    }
    Ok(ComplexityResult { table, fits })
}
