//! Chain statistics: ESJD, autocorrelation, integrated autocorrelation time,
//! two-sample Kolmogorov–Smirnov, and log-log slope fits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rwm::Trajectory;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coords {
    X,
    U,
    All,
    /// Indices into the concatenated `(x, u)` vector.
    Indices(Vec<usize>),
}

fn selected(c: &Coords, x: &[f64], u: &[f64], i: usize) -> Option<f64> {
    match c {
        Coords::X => x.get(i).copied(),
        Coords::U => u.get(i).copied(),
        Coords::All => {
            if i < x.len() {
                Some(x[i])
            } else {
                u.get(i - x.len()).copied()
            }
        }
        Coords::Indices(ix) => ix.get(i).and_then(|&k| if k < x.len() { Some(x[k]) } else { u.get(k - x.len()).copied() }),
    }
}

/// Mean squared displacement between consecutive recorded states.
pub fn esjd(trajectory: &Trajectory, coords: &Coords) -> Result<f64> {
    let s = &trajectory.states;
    if s.len() < 2 {
        return Err(Error::InvalidArgument("ESJD needs at least two states".into()));
    }
    let mut total = 0.0;
    for w in s.windows(2) {
        let mut i = 0;
        while let (Some(a), Some(b)) = (selected(coords, &w[0].x, &w[0].u, i), selected(coords, &w[1].x, &w[1].u, i)) {
            total += (b - a) * (b - a);
            i += 1;
        }
    }
    Ok(total / (s.len() - 1) as f64)
}

fn mean_var(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let m = series.iter().sum::<f64>() / n;
    let v = series.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v)
}

fn autocov(series: &[f64], mean: f64, lag: usize) -> f64 {
    let n = series.len();
    if lag >= n {
        return 0.0;
    }
    let s: f64 = series[..n - lag].iter().zip(&series[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum();
    s / n as f64
}

/// Biased-normalized autocorrelations at lags `0..=max_lag`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() < 10 * max_lag.max(1) {
        return Err(Error::InvalidArgument(format!(
            "series of length {} too short for max_lag {max_lag}",
            series.len()
        )));
    }
    let (m, v) = mean_var(series);
    if v <= 0.0 {
        return Err(Error::InvalidArgument("constant series has no autocorrelation".into()));
    }
    Ok((0..=max_lag).map(|k| autocov(series, m, k) / v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iact {
    pub tau: f64,
    /// Number of lags summed.
    pub window: usize,
    /// False when the window exceeds a tenth of the series length.
    pub converged: bool,
    /// True for a constant series (`tau` is then NaN).
    pub degenerate: bool,
}

/// Initial-positive-sequence IACT from autocovariances averaged over chains
/// that share a common mean and variance.
fn ips(chains: &[&[f64]]) -> Iact {
    let n_min = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mean = chains.iter().flat_map(|c| c.iter()).sum::<f64>() / total as f64;
    let gamma = |lag: usize| chains.iter().map(|c| autocov(c, mean, lag)).sum::<f64>() / chains.len() as f64;
    let g0 = gamma(0);
    if !(g0 > 0.0) {
        return Iact {
            tau: f64::NAN,
            window: 0,
            converged: false,
            degenerate: true,
        };
    }
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n_min {
        let pair = (gamma(2 * k) + gamma(2 * k + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    let window = 2 * k;
    Iact {
        tau: tau.max(1.0),
        window,
        converged: window * 10 <= n_min,
        degenerate: false,
    }
}

pub fn iact(series: &[f64]) -> Iact {
    ips(&[series])
}

/// Pooled IACT of several chains of the same stationary process.
pub fn iact_pooled(chains: &[Vec<f64>]) -> Iact {
    let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).filter(|c| !c.is_empty()).collect();
    if refs.is_empty() {
        return Iact {
            tau: f64::NAN,
            window: 0,
            converged: false,
            degenerate: true,
        };
    }
    ips(&refs)
}

/// Asymptotic Kolmogorov tail `Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS statistic and asymptotic p-value (with the usual
/// small-sample correction of the argument).
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("KS sample contains NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let en = ((na * nb) as f64 / (na + nb) as f64).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok((d, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    /// Two standard errors.
    pub half_width: f64,
}

/// Least-squares slope of `log(stat)` against `log(eps)`.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("slope fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(e, s)| !(e > 0.0 && s > 0.0)) {
        return Err(Error::InvalidArgument("slope fit needs positive eps and statistic values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument("slope fit needs distinct eps values".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let std_error = (rss / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        std_error,
        half_width: 2.0 * std_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub mode: String,
    pub statistic: f64,
    pub std_error: f64,
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn push(&mut self, row: ScalingRow) {
        self.rows.push(row);
    }

    pub fn fit(&self, mode: &str) -> Result<SlopeFit> {
        let pts: Vec<(f64, f64)> = self.rows.iter().filter(|r| r.mode == mode).map(|r| (r.eps, r.statistic)).collect();
        scaling_fit(&pts)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "eps,mode,statistic,std_error,flagged")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.eps, r.mode, r.statistic, r.std_error, r.flagged as u8)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::rwm::ChainState;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut rng = stream(seed, 0);
        (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory {
            states: points.iter().map(|&(x, u)| ChainState::new(vec![x], vec![u])).collect(),
            thinning: 1,
            accepted: 0,
            iterations: points.len() as u64 - 1,
            seed: None,
        }
    }

    #[test]
    fn esjd_examples() {
        assert_eq!(esjd(&traj(&[(1.0, 2.0); 5]), &Coords::All).unwrap(), 0.0);
        let t = traj(&[(0.0, 0.0), (3.0, 4.0)]);
        assert_eq!(esjd(&t, &Coords::All).unwrap(), 25.0);
        // additivity over disjoint selectors
        assert_eq!(esjd(&t, &Coords::X).unwrap() + esjd(&t, &Coords::U).unwrap(), 25.0);
        assert_eq!(esjd(&t, &Coords::Indices(vec![1])).unwrap(), 16.0);
        assert!(esjd(&traj(&[(0.0, 0.0)]), &Coords::X).is_err());
    }

    #[test]
    fn acf_of_iid_is_small() {
        let s = normals(1, 100_000, 0.0);
        let r = acf(&s, 20).unwrap();
        assert_eq!(r[0], 1.0);
        let bound = 4.0 / (s.len() as f64).sqrt();
        assert!(r[1..].iter().all(|v| v.abs() < bound));
        assert!(acf(&s[..50], 10).is_err());
    }

    #[test]
    fn iact_of_ar1() {
        let rho: f64 = 0.9;
        let mut rng = stream(2, 0);
        let mut v = 0.0;
        let sd = (1.0 - rho * rho).sqrt();
        let s: Vec<f64> = (0..200_000)
            .map(|_| {
                v = rho * v + sd * rng.sample::<f64, _>(StandardNormal);
                v
            })
            .collect();
        let r = iact(&s);
        let exact = (1.0 + rho) / (1.0 - rho);
        assert!((r.tau - exact).abs() < 0.15 * exact, "tau {}", r.tau);
        assert!(r.converged && !r.degenerate);
        // pooled estimate over independent pieces agrees
        let pieces: Vec<Vec<f64>> = s.chunks(50_000).map(|c| c.to_vec()).collect();
        assert!((iact_pooled(&pieces).tau - exact).abs() < 0.15 * exact);
    }

    #[test]
    fn iact_edge_cases() {
        assert!(iact(&[2.0; 100]).degenerate);
        assert!(iact(&normals(3, 1000, 0.0)).tau >= 1.0);
    }

    #[test]
    fn ks_examples() {
        let a = normals(4, 1000, 0.0);
        assert_eq!(ks_distance(&a, &a).unwrap().0, 0.0);
        let b = normals(5, 10_000, 1.0);
        let c = normals(6, 10_000, 0.0);
        assert!(ks_distance(&b, &c).unwrap().1 < 1e-6);
        let (d1, p1) = ks_distance(&a, &b).unwrap();
        let (d2, p2) = ks_distance(&b, &a).unwrap();
        assert!(d1 == d2 && p1 == p2 && (0.0..=1.0).contains(&d1));
        assert!(ks_distance(&[], &a).is_err());
    }

    #[test]
    fn ks_calibration() {
        let pass = (0..40)
            .filter(|&k| ks_distance(&normals(100 + k, 10_000, 0.0), &normals(500 + k, 10_000, 0.0)).unwrap().1 > 0.01)
            .count();
        assert!(pass >= 38, "{pass}/40");
    }

    #[test]
    fn slope_examples() {
        let f = scaling_fit(&[(1.0, 1.0), (2.0, 4.0), (4.0, 16.0)]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && f.std_error < 1e-7);
        let f = scaling_fit(&[(1.0, 2.0), (2.0, 2.0), (4.0, 2.0)]).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(scaling_fit(&[(1.0, 2.0), (2.0, 2.0)]).is_err());
        assert!(scaling_fit(&[(1.0, 2.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn slope_recovered_under_jitter() {
        let mut rng = stream(7, 0);
        let pts: Vec<(f64, f64)> = [0.01, 0.02, 0.04, 0.08, 0.16, 0.32]
            .iter()
            .map(|&e: &f64| (e, e.powf(-1.5) * (0.05 * rng.sample::<f64, _>(StandardNormal)).exp()))
            .collect();
        let f = scaling_fit(&pts).unwrap();
        assert!((f.slope + 1.5).abs() < f.half_width.max(1e-3), "{f:?}");
    }
}
