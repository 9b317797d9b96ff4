//! Matérn correlation and the modified Bessel function of the second kind.
//!
//! `K_ν(x)` is evaluated with Temme's series for `x < 2` and Steed's
//! continued fraction for `x ≥ 2`, both at `|μ| ≤ 1/2` where `μ = ν - round(ν)`,
//! followed by forward recurrence up to `ν`. The routines work with the
//! exponentially scaled value `eˣ K_ν(x)` so the Matérn kernel can be formed
//! in log space.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::SiteSet;
use crate::linalg::Matrix;

/// Range `phi` and smoothness `nu` of the Matérn kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub phi: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(phi: f64, nu: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::Domain(format!("range phi must be positive, got {phi}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Domain(format!("smoothness nu must be positive, got {nu}")));
        }
        Ok(MaternParams { phi, nu })
    }
}

/// Taylor coefficients of `1/Γ(z) = Σ_k c[k] z^(k+1)`.
const RGAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// Temme's auxiliary gamma quantities for `|mu| ≤ 1/2`:
/// `(gam1, gam2, 1/Γ(1+μ), 1/Γ(1-μ))`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mut gam1 = 0.0;
    let mut gam2 = 0.0;
    // 1/Γ(1+μ) = Σ_j c[j] μ^j; gam2 takes the even powers, gam1 the odd ones over -μ.
    let mu2 = mu * mu;
    let mut pow = 1.0;
    for pair in RGAMMA.chunks(2) {
        gam2 += pair[0] * pow;
        if let Some(c) = pair.get(1) {
            gam1 -= c * pow;
        }
        pow *= mu2;
    }
    (gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1)
}

const EPS: f64 = 1e-17;
const MAXIT: usize = 10_000;

/// `(eˣ K_μ(x), eˣ K_{μ+1}(x))` for `|μ| ≤ 1/2`.
fn bessel_k_pair_scaled(mu: f64, x: f64) -> (f64, f64) {
    let mu2 = mu * mu;
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < 1e-15 { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < 1e-15 { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAXIT {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        let scale = x.exp();
        (sum * scale, sum1 * (2.0 / x) * scale)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAXIT {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        let kmu = (PI / (2.0 * x)).sqrt() / s;
        (kmu, kmu * (mu + x + 0.5 - h) / x)
    }
}

/// Exponentially scaled Bessel function `eˣ K_ν(x)`.
pub fn bessel_k_scaled(nu: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("bessel_k needs x > 0, got {x}")));
    }
    if !nu.is_finite() {
        return Err(Error::Domain(format!("bessel_k needs finite order, got {nu}")));
    }
    let nu = nu.abs();
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut k0, mut k1) = bessel_k_pair_scaled(mu, x);
    for i in 1..=(nl as usize) {
        let next = (mu + i as f64) * (2.0 / x) * k1 + k0;
        k0 = k1;
        k1 = next;
    }
    Ok(k0)
}

/// Modified Bessel function of the second kind `K_ν(x)`, `x > 0`.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    Ok(bessel_k_scaled(nu, x)? * (-x).exp())
}

/// Matérn correlation at distance `d`.
pub fn matern(d: f64, params: MaternParams) -> f64 {
    let MaternParams { phi, nu } = params;
    if d < 1e-14 * phi {
        return 1.0;
    }
    let x = d / phi;
    if nu == 0.5 {
        return (-x).exp();
    }
    if nu == 1.5 {
        return (1.0 + x) * (-x).exp();
    }
    if nu == 2.5 {
        return (1.0 + x + x * x / 3.0) * (-x).exp();
    }
    let ks = match bessel_k_scaled(nu, x) {
        Ok(v) => v,
        Err(_) => return 0.0,
    };
    let log = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() + ks.ln() - x;
    log.exp().min(1.0)
}

/// Matrix of Matérn correlations between `rows` and `cols` of `sites`.
pub fn correlation_submatrix(
    sites: &SiteSet,
    rows: &[usize],
    cols: &[usize],
    params: MaternParams,
) -> Matrix {
    Matrix::from_fn(rows.len(), cols.len(), |a, b| {
        let (i, j) = (rows[a], cols[b]);
        if i == j {
            1.0
        } else {
            matern(sites.distance(i, j), params)
        }
    })
}

/// Full `n × n` correlation matrix.
pub fn correlation_matrix(sites: &SiteSet, params: MaternParams) -> Matrix {
    let idx: Vec<usize> = (0..sites.len()).collect();
    correlation_submatrix(sites, &idx, &idx, params)
}
