//! Summary statistics for chains: quantiles, Monte Carlo standard errors,
//! effective sample size and a Kolmogorov–Smirnov test.

/// Empirical quantile with linear interpolation between order statistics
/// (type 7). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], prob: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, prob)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Monte Carlo standard error of the mean by non-overlapping batch means
/// with `⌊√N⌋` batches.
pub fn batch_means_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    let nb = ((n as f64).sqrt().floor() as usize).max(2);
    let size = n / nb;
    if size == 0 {
        return (variance(xs) / n as f64).sqrt();
    }
    let batches: Vec<f64> = (0..nb).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    (variance(&batches) / nb as f64).sqrt()
}

/// Effective sample size from the initial positive sequence of
/// autocorrelation pairs.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag).map(|t| (xs[t] - m) * (xs[t + lag] - m)).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    (n as f64 / tau.max(1e-12)).min(n as f64)
}

/// One-sample Kolmogorov–Smirnov test against `Uniform(a, b)`; returns the
/// statistic `D` and the asymptotic p-value.
pub fn ks_uniform(xs: &[f64], a: f64, b: f64) -> (f64, f64) {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = ((x - a) / (b - a)).clamp(0.0, 1.0);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    (d, kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d))
}

/// `P(K > t)` for the Kolmogorov distribution.
fn kolmogorov_sf(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}
