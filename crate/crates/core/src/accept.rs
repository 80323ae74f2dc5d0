//! Accept/reject functions `F` with `exp(r) F(-r) = F(r)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Config-file names of the builtin accept functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptId {
    MetropolisHastings,
    Barker,
}

type RealFn = dyn Fn(f64) -> f64 + Send + Sync;

pub struct CustomAccept {
    name: String,
    f: Box<RealFn>,
    df: Box<RealFn>,
}

impl fmt::Debug for CustomAccept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomAccept").field("name", &self.name).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum AcceptFunction {
    /// `min(1, e^r)`. Not differentiable at zero.
    MetropolisHastings,
    /// `e^r / (1 + e^r)`.
    Barker,
    Custom(Arc<CustomAccept>),
}

/// Grid used by the registration hook: `[-10, 10]` with step `0.01`.
pub fn reversibility_grid() -> Vec<f64> {
    (0..=2000).map(|i| -10.0 + 0.01 * i as f64).collect()
}

impl From<AcceptId> for AcceptFunction {
    fn from(id: AcceptId) -> Self {
        match id {
            AcceptId::MetropolisHastings => AcceptFunction::MetropolisHastings,
            AcceptId::Barker => AcceptFunction::Barker,
        }
    }
}

impl AcceptFunction {
    /// Registers a user accept function. Rejected when the reversibility
    /// violation on [`reversibility_grid`] exceeds `1e-9`.
    pub fn register<F, D>(name: &str, f: F, df: D) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let candidate = AcceptFunction::Custom(Arc::new(CustomAccept {
            name: name.to_string(),
            f: Box::new(f),
            df: Box::new(df),
        }));
        let violation = candidate.check_reversibility(&reversibility_grid());
        if !(violation <= 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "accept function `{name}` violates exp(r) F(-r) = F(r) by {violation:e}"
            )));
        }
        Ok(candidate)
    }

    pub fn name(&self) -> String {
        match self {
            AcceptFunction::MetropolisHastings => "metropolis_hastings".into(),
            AcceptFunction::Barker => "barker".into(),
            AcceptFunction::Custom(c) => c.name.clone(),
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, AcceptFunction::MetropolisHastings)
    }

    /// Hot-path evaluation; `r = -inf` gives 0, NaN propagates.
    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        match self {
            AcceptFunction::MetropolisHastings => {
                if r >= 0.0 {
                    1.0
                } else {
                    r.exp()
                }
            }
            AcceptFunction::Barker => {
                if r >= 0.0 {
                    1.0 / (1.0 + (-r).exp())
                } else {
                    let e = r.exp();
                    e / (1.0 + e)
                }
            }
            AcceptFunction::Custom(c) => (c.f)(r),
        }
    }

    pub fn evaluate(&self, r: f64) -> Result<f64> {
        if r.is_nan() {
            return Err(Error::InvalidArgument("accept function evaluated at NaN".into()));
        }
        Ok(self.value(r))
    }

    /// `F'(r)`. For Metropolis–Hastings the derivative is `e^r` on `r < 0`,
    /// zero on `r > 0`, and undefined at zero.
    pub fn derivative(&self, r: f64) -> Result<f64> {
        if r.is_nan() {
            return Err(Error::InvalidArgument("derivative evaluated at NaN".into()));
        }
        match self {
            AcceptFunction::MetropolisHastings if r == 0.0 => Err(Error::NonDifferentiable {
                name: "metropolis_hastings",
                r,
            }),
            _ => Ok(self.derivative_value(r)),
        }
    }

    /// Derivative without the error path. The Metropolis–Hastings kink at 0
    /// has measure zero under the continuous laws used by the estimators.
    #[inline]
    pub fn derivative_value(&self, r: f64) -> f64 {
        match self {
            AcceptFunction::MetropolisHastings => {
                if r < 0.0 {
                    r.exp()
                } else {
                    0.0
                }
            }
            AcceptFunction::Barker => {
                let p = self.value(r);
                p * (1.0 - p)
            }
            AcceptFunction::Custom(c) => (c.df)(r),
        }
    }

    /// `max |exp(r) F(-r) - F(r)|` over `grid`.
    pub fn check_reversibility(&self, grid: &[f64]) -> f64 {
        grid.iter()
            .map(|&r| (r.exp() * self.value(-r) - self.value(r)).abs())
            .fold(0.0, f64::max)
    }
}
