//! WAIC, hold-out ELPD and coverage, the empirical semivariogram, and
//! k-fold splits.
//!
//! WAIC is computed from the likelihood conditional on the latent field:
//! every observed entry `y_ij` contributes `log f(y_ij | W_ij⁽ˡ⁾)` at each
//! stored draw.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::geometry::SiteSet;
use crate::mcmc::PosteriorChain;
use crate::predict::{MarginSummary, PredictiveDraws, PredictionTarget};
use crate::rng::stream;
use crate::stats::{mean, variance};

/// `log mean exp(xs)`, stable.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

/// Pointwise WAIC terms for one observed entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaicPoint {
    pub site: usize,
    pub response: usize,
    pub lppd: f64,
    pub p_waic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaicReport {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    pub points: Vec<WaicPoint>,
}

/// `WAIC = −2 Σ (lppd_ij − p_ij)` over observed entries, with
/// `lppd_ij = log mean_l f(y_ij | W⁽ˡ⁾_ij)` and `p_ij = var_l log f`.
pub fn waic(chain: &PosteriorChain, data: &SpatialDataset) -> Result<WaicReport> {
    let ws = chain
        .w
        .as_ref()
        .ok_or_else(|| Error::Config("WAIC needs stored W draws".into()))?;
    if ws.len() < 2 {
        return Err(Error::Config(format!("WAIC needs at least 2 draws, got {}", ws.len())));
    }
    if chain.n != data.n() || chain.q != data.q() {
        return Err(Error::Dimension("chain and dataset shapes differ".into()));
    }
    let mut points = Vec::new();
    for i in 0..data.n() {
        for j in 0..data.q() {
            let y = data.y[(i, j)];
            if y.is_nan() {
                continue;
            }
            let f = data.family_at(i, j);
            let ll: Vec<f64> = ws.iter().map(|w| f.log_likelihood(y, w[(i, j)])).collect();
            points.push(WaicPoint { site: i, response: j, lppd: log_mean_exp(&ll), p_waic: variance(&ll) });
        }
    }
    let lppd: f64 = points.iter().map(|p| p.lppd).sum();
    let p_waic: f64 = points.iter().map(|p| p.p_waic).sum();
    Ok(WaicReport { waic: -2.0 * (lppd - p_waic), lppd, p_waic, points })
}

/// Hold-out predictive metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutReport {
    /// Mean over hold-out sites of the site log predictive density.
    pub elpd: f64,
    pub elpd_se: f64,
    /// Fraction of observed hold-out entries inside their interval.
    pub coverage: f64,
    pub coverage_se: f64,
    pub level: f64,
    /// Per-site log predictive density (`NaN` where nothing was observed).
    pub pointwise: Vec<f64>,
    pub covered: usize,
    pub entries: usize,
}

/// ELPD and interval coverage at hold-out sites. The site density sums the
/// log-likelihood over its observed responses before averaging over draws;
/// coverage is counted per entry with equal-tailed intervals of the `Y*`
/// draws.
pub fn elpd_and_coverage(
    pred: &PredictiveDraws,
    y_holdout: &crate::linalg::Matrix,
    target: &PredictionTarget,
    level: f64,
) -> Result<HoldoutReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("interval level must lie in (0,1), got {level}")));
    }
    if pred.is_empty() {
        return Err(Error::Config("no predictive draws".into()));
    }
    let (u, q) = (pred.u(), pred.q());
    if y_holdout.shape() != (u, q) || target.sites.len() != u {
        return Err(Error::Dimension(format!(
            "hold-out responses are {}×{} but predictions are {u}×{q}",
            y_holdout.nrows(),
            y_holdout.ncols()
        )));
    }
    let mut pointwise = Vec::with_capacity(u);
    let (mut covered, mut entries) = (0usize, 0usize);
    for i in 0..u {
        let obs: Vec<usize> = (0..q).filter(|&j| !y_holdout[(i, j)].is_nan()).collect();
        if obs.is_empty() {
            pointwise.push(f64::NAN);
            continue;
        }
        let ll: Vec<f64> = pred
            .w_star
            .iter()
            .map(|w| obs.iter().map(|&j| target.family_at(i, j).log_likelihood(y_holdout[(i, j)], w[(i, j)])).sum())
            .collect();
        pointwise.push(log_mean_exp(&ll));
        for &j in &obs {
            entries += 1;
            if MarginSummary::from_draws(&pred.y_entry(i, j), level).covers(y_holdout[(i, j)]) {
                covered += 1;
            }
        }
    }
    let finite: Vec<f64> = pointwise.iter().copied().filter(|v| !v.is_nan()).collect();
    if finite.is_empty() {
        return Err(Error::Data { row: 0, column: "holdout".into(), message: "no observed hold-out responses".into() });
    }
    let cov = covered as f64 / entries as f64;
    Ok(HoldoutReport {
        elpd: mean(&finite),
        elpd_se: (variance(&finite) / finite.len() as f64).sqrt(),
        coverage: cov,
        coverage_se: (cov * (1.0 - cov) / entries as f64).sqrt(),
        level,
        pointwise,
        covered,
        entries,
    })
}

/// One distance bin of the semivariogram; `semivariance` is `None` when the
/// bin holds no pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariogramBin {
    pub lag: f64,
    pub semivariance: Option<f64>,
    pub count: usize,
}

/// Matheron estimator over `n_bins` equal bins on `(0, max_lag]`. `lag` is
/// the bin midpoint.
pub fn empirical_semivariogram(
    residuals: &[f64],
    sites: &SiteSet,
    n_bins: usize,
    max_lag: f64,
) -> Result<Vec<VariogramBin>> {
    let n = sites.len();
    if residuals.len() != n {
        return Err(Error::Dimension(format!("{} residuals for {n} sites", residuals.len())));
    }
    if n < 2 || n_bins == 0 || !(max_lag > 0.0) {
        return Err(Error::Config("semivariogram needs n >= 2, n_bins >= 1 and max_lag > 0".into()));
    }
    let width = max_lag / n_bins as f64;
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for a in 0..n {
        for b in (a + 1)..n {
            let d = sites.distance(a, b);
            if d > max_lag || d == 0.0 {
                continue;
            }
            let k = ((d / width).ceil() as usize).clamp(1, n_bins) - 1;
            sum[k] += (residuals[a] - residuals[b]).powi(2);
            count[k] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|k| VariogramBin {
            lag: (k as f64 + 0.5) * width,
            semivariance: (count[k] > 0).then(|| sum[k] / (2.0 * count[k] as f64)),
            count: count[k],
        })
        .collect())
}

/// Seeded random partition of `0..n` into `k` folds of near-equal size.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("need 2 <= k <= n for k-fold, got k = {k}, n = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 0));
    let mut folds = vec![Vec::new(); k];
    for (t, i) in idx.into_iter().enumerate() {
        folds[t % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Seeded split of `0..n` into `(train, holdout)` with `round(frac·n)` held out.
pub fn holdout_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 0));
    let h = ((frac * n as f64).round() as usize).min(n);
    let mut hold = idx[..h].to_vec();
    let mut train = idx[h..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}
