//! Matrix-normal, inverse-Wishart and truncated-normal distributions.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp, StandardNormal};
use libm::erfc;

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_lower, psd_cholesky_lower, solve_lower, solve_lower_transpose, symmetrize, Matrix,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Row-covariance factor of a matrix-normal law.
#[derive(Debug, Clone, PartialEq)]
pub enum RowFactor {
    /// Lower `L` with `L Lᵀ` the row covariance.
    CovarianceLower(Matrix),
    /// Upper `R` with `Rᵀ R` the row precision.
    PrecisionUpper(Matrix),
}

impl RowFactor {
    pub fn dim(&self) -> usize {
        match self {
            RowFactor::CovarianceLower(l) | RowFactor::PrecisionUpper(l) => l.nrows(),
        }
    }

    /// `log |row covariance|`.
    pub fn logdet_cov(&self) -> f64 {
        match self {
            RowFactor::CovarianceLower(l) => 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            RowFactor::PrecisionUpper(r) => -2.0 * r.diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        }
    }

    /// `A` such that `A Z` has row covariance given by this factor.
    fn color(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            RowFactor::CovarianceLower(l) => Ok(l * z),
            RowFactor::PrecisionUpper(r) => r
                .solve_upper_triangular(z)
                .ok_or_else(|| Error::Numeric("singular precision factor".into())),
        }
    }

    /// `A⁻¹ x`, whitening the rows.
    fn whiten(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            RowFactor::CovarianceLower(l) => solve_lower(l, x),
            RowFactor::PrecisionUpper(r) => Ok(r * x),
        }
    }
}

/// `MN(mean, row, col_cov)`: `vec(X) ~ N(vec(mean), col_cov ⊗ row_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalParams {
    pub mean: Matrix,
    pub row: RowFactor,
    pub col_cov: Matrix,
}

impl MatrixNormalParams {
    fn check(&self) -> Result<()> {
        let (r, c) = self.mean.shape();
        if self.row.dim() != r || self.col_cov.shape() != (c, c) {
            return Err(Error::Dimension(format!(
                "matrix-normal mean is {r}×{c}, row factor {}×{0}, column covariance {}×{}",
                self.row.dim(),
                self.col_cov.nrows(),
                self.col_cov.ncols()
            )));
        }
        Ok(())
    }
}

/// `r × c` matrix of independent standard normals, filled row by row.
pub fn standard_normal_matrix<R: Rng + ?Sized>(r: usize, c: usize, rng: &mut R) -> Matrix {
    let data: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_row_slice(r, c, &data)
}

/// Draw `M + A Z L_cᵀ` with `L_c` a (semi-definite tolerant) Cholesky factor
/// of the column covariance.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    params: &MatrixNormalParams,
    rng: &mut R,
) -> Result<Matrix> {
    params.check()?;
    let (r, c) = params.mean.shape();
    if !params.col_cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite column covariance".into()));
    }
    let lc = psd_cholesky_lower(&params.col_cov, 1e-14)?;
    let z = standard_normal_matrix(r, c, rng);
    let draw = &params.mean + params.row.color(&z)? * lc.transpose();
    if !draw.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite matrix-normal draw".into()));
    }
    Ok(draw)
}

/// Log-density of the matrix-normal law, from factor log-determinants.
pub fn matrix_normal_logdensity(x: &Matrix, params: &MatrixNormalParams) -> Result<f64> {
    params.check()?;
    if x.shape() != params.mean.shape() {
        return Err(Error::Dimension(format!(
            "point is {}×{}, mean is {}×{}",
            x.nrows(),
            x.ncols(),
            params.mean.nrows(),
            params.mean.ncols()
        )));
    }
    let (r, c) = x.shape();
    let lc = cholesky_lower(&params.col_cov, "column covariance")?;
    let a = params.row.whiten(&(x - &params.mean))?;
    let b = solve_lower(&lc, &a.transpose())?;
    let quad: f64 = b.iter().map(|v| v * v).sum();
    let logdet_col = 2.0 * lc.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (r * c) as f64 * LN_2PI
        - 0.5 * c as f64 * params.row.logdet_cov()
        - 0.5 * r as f64 * logdet_col
        - 0.5 * quad)
}

/// `IW(scale, dof)` with density ∝ `|Σ|^{-(dof+q+1)/2} exp(-tr(scale Σ⁻¹)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishartParams {
    pub scale: Matrix,
    pub dof: f64,
}

impl InverseWishartParams {
    pub fn new(scale: Matrix, dof: f64) -> Result<Self> {
        let q = scale.nrows();
        if scale.ncols() != q || q == 0 {
            return Err(Error::Dimension("inverse-Wishart scale must be square".into()));
        }
        if !(dof > q as f64 - 1.0) {
            return Err(Error::Config(format!(
                "inverse-Wishart degrees of freedom {dof} must exceed q-1 = {}",
                q - 1
            )));
        }
        Ok(InverseWishartParams { scale, dof })
    }

    pub fn mean(&self) -> Option<Matrix> {
        let q = self.scale.nrows() as f64;
        (self.dof > q + 1.0).then(|| &self.scale / (self.dof - q - 1.0))
    }
}

/// Bartlett draw: with `S = L Lᵀ` and `A` the Bartlett factor of a standard
/// Wishart, `Σ = (L A⁻ᵀ)(L A⁻ᵀ)ᵀ`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    params: &InverseWishartParams,
    rng: &mut R,
) -> Result<Matrix> {
    let q = params.scale.nrows();
    let ls = cholesky_lower(&params.scale, "inverse-Wishart scale")?;
    let mut a = Matrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(params.dof - i as f64)
            .map_err(|e| Error::Config(format!("inverse-Wishart dof: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // A⁻ᵀ = (A⁻¹)ᵀ; solve Aᵀ T = I.
    let t = solve_lower_transpose(&a, &Matrix::identity(q, q))?;
    let g = ls * t;
    let mut sigma = &g * g.transpose();
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// `log Φ(x)`, accurate into the far lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > -37.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // Asymptotic Mills-ratio expansion.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - 0.5 * LN_2PI - (-x).ln() + series.ln()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)`: statrs' inverse error function refined by one Halley step
/// against the accurate `erfc`.
fn normal_quantile(p: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    let refined = x - u / (1.0 + 0.5 * x * u);
    if refined.is_finite() {
        refined
    } else {
        x
    }
}

/// `log(Φ((high-mean)/sd) - Φ((low-mean)/sd))`.
pub fn log_trunc_mass(mean: f64, sd: f64, low: f64, high: f64) -> f64 {
    let (mut a, mut b) = ((low - mean) / sd, (high - mean) / sd);
    if a > 0.0 {
        (a, b) = (-b, -a);
    }
    // Now a ≤ 0, so Φ(a) carries no cancellation.
    let lb = log_normal_cdf(b);
    let la = log_normal_cdf(a);
    if la == f64::NEG_INFINITY {
        return lb;
    }
    lb + (-(la - lb).exp()).ln_1p()
}

/// Draw from `N(mean, sd²)` restricted to `(low, high)`.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    low: f64,
    high: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(low < high) {
        return Err(Error::Config(format!("truncation bounds need low < high, got ({low}, {high})")));
    }
    if !(sd > 0.0) {
        return Err(Error::Config(format!("truncated normal needs sd > 0, got {sd}")));
    }
    let (a, b) = ((low - mean) / sd, (high - mean) / sd);
    let flip = a > 0.0;
    let (a, b) = if flip { (-b, -a) } else { (a, b) };
    let z = loop {
        let z = standard_truncated(a, b, rng);
        if z > a && z < b {
            break z;
        }
    };
    let z = if flip { -z } else { z };
    let x = mean + sd * z;
    Ok(x.clamp(low.next_up(), high.next_down()))
}

/// Standard normal on `(a, b)` with `a ≤ 0`.
fn standard_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let pa = normal_cdf(a);
    let pb = normal_cdf(b);
    if pb - pa > 1e-12 * pb.max(1e-300) && pb > 1e-290 {
        let u: f64 = rng.random();
        let p = pa + u * (pb - pa);
        let z = normal_quantile(p);
        if z.is_finite() {
            return z;
        }
    }
    // Deep tail or a very narrow interval.
    if b - a < 1e-3 || b > 0.0 {
        // Uniform proposal on the interval, accept by density ratio to its max.
        let top = if a <= 0.0 && b >= 0.0 { 0.0 } else if b < 0.0 { b * b } else { a * a };
        loop {
            let z = a + (b - a) * rng.random::<f64>();
            if rng.random::<f64>().ln() < -0.5 * (z * z - top) {
                return z;
            }
        }
    }
    // Interval in the far lower tail: mirror to (-b, -a) and use an
    // exponential proposal.
    let c = -b;
    let lambda = 0.5 * (c + (c * c + 4.0).sqrt());
    let exp = Exp::new(lambda).expect("positive rate");
    loop {
        let z = c + exp.sample(rng);
        if z < -a && rng.random::<f64>().ln() < -0.5 * (z - lambda) * (z - lambda) {
            return -z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn kron(a: &Matrix, b: &Matrix) -> Matrix {
        a.kronecker(b)
    }

    fn dense_mvn_logpdf(x: &[f64], mean: &[f64], cov: &Matrix) -> f64 {
        let l = cholesky_lower(cov, "cov").unwrap();
        let d = Matrix::from_column_slice(x.len(), 1, &x.iter().zip(mean).map(|(a, b)| a - b).collect::<Vec<_>>());
        let z = solve_lower(&l, &d).unwrap();
        -0.5 * x.len() as f64 * LN_2PI - 0.5 * crate::linalg::chol_logdet(&l) - 0.5 * z.norm_squared()
    }

    fn random_spd<R: Rng>(k: usize, rng: &mut R) -> Matrix {
        let a = standard_normal_matrix(k, k, rng);
        &a * a.transpose() + Matrix::identity(k, k) * 0.5
    }

    #[test]
    fn standard_moments() {
        let mut rng = stream(1, 0);
        let p = MatrixNormalParams {
            mean: Matrix::zeros(2, 2),
            row: RowFactor::CovarianceLower(Matrix::identity(2, 2)),
            col_cov: Matrix::identity(2, 2),
        };
        let n = 100_000;
        let mut sum = Matrix::zeros(2, 2);
        let mut sq = Matrix::zeros(2, 2);
        for _ in 0..n {
            let d = sample_matrix_normal(&p, &mut rng).unwrap();
            sum += &d;
            sq += d.component_mul(&d);
        }
        let tol = 4.0 / (n as f64).sqrt();
        for v in (sum / n as f64).iter() {
            assert!(v.abs() < tol);
        }
        for v in (sq / n as f64).iter() {
            assert!((v - 1.0).abs() < 4.0 * 2f64.sqrt() / (n as f64).sqrt());
        }
    }

    #[test]
    fn degenerate_column_is_constant() {
        let mut rng = stream(2, 0);
        let mean = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = MatrixNormalParams {
            mean: mean.clone(),
            row: RowFactor::CovarianceLower(Matrix::identity(3, 3)),
            col_cov: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        };
        for _ in 0..100 {
            let d = sample_matrix_normal(&p, &mut rng).unwrap();
            assert_eq!(d.column(1), mean.column(1));
        }
    }

    #[test]
    fn empirical_kronecker_covariance() {
        let mut rng = stream(3, 0);
        let row = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        for factor in [
            RowFactor::CovarianceLower(cholesky_lower(&row, "r").unwrap()),
            RowFactor::PrecisionUpper(
                cholesky_lower(&row.clone().try_inverse().unwrap(), "p").unwrap().transpose(),
            ),
        ] {
            let p = MatrixNormalParams { mean: Matrix::zeros(2, 2), row: factor, col_cov: Matrix::identity(2, 2) };
            let n = 100_000;
            let mut acc = Matrix::zeros(4, 4);
            for _ in 0..n {
                let d = sample_matrix_normal(&p, &mut rng).unwrap();
                let v = Matrix::from_column_slice(4, 1, d.as_slice());
                acc += &v * v.transpose();
            }
            let emp = acc / n as f64;
            let want = kron(&Matrix::identity(2, 2), &row);
            assert!((emp - want).abs().max() < 0.03);
        }
    }

    #[test]
    fn logdensity_trivial_cases() {
        let p = MatrixNormalParams {
            mean: Matrix::zeros(1, 1),
            row: RowFactor::CovarianceLower(Matrix::identity(1, 1)),
            col_cov: Matrix::identity(1, 1),
        };
        let v = matrix_normal_logdensity(&Matrix::zeros(1, 1), &p).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);

        let mut rng = stream(4, 0);
        let u = random_spd(3, &mut rng);
        let vcol = random_spd(2, &mut rng);
        let mean = standard_normal_matrix(3, 2, &mut rng);
        let p = MatrixNormalParams {
            mean: mean.clone(),
            row: RowFactor::CovarianceLower(cholesky_lower(&u, "u").unwrap()),
            col_cov: vcol.clone(),
        };
        let want = -3.0 * LN_2PI - 1.0 * u.determinant().ln() - 1.5 * vcol.determinant().ln();
        assert!((matrix_normal_logdensity(&mean, &p).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            matrix_normal_logdensity(&Matrix::zeros(2, 2), &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn logdensity_matches_dense_kronecker() {
        let mut rng = stream(5, 0);
        for r in 1..=6 {
            for c in 1..=6 {
                let u = random_spd(r, &mut rng);
                let vcol = random_spd(c, &mut rng);
                let mean = standard_normal_matrix(r, c, &mut rng);
                let x = standard_normal_matrix(r, c, &mut rng);
                let dense = dense_mvn_logpdf(x.as_slice(), mean.as_slice(), &kron(&vcol, &u));
                let lu = cholesky_lower(&u, "u").unwrap();
                let prec = cholesky_lower(&u.clone().try_inverse().unwrap(), "p").unwrap().transpose();
                for row in [RowFactor::CovarianceLower(lu), RowFactor::PrecisionUpper(prec)] {
                    let p = MatrixNormalParams { mean: mean.clone(), row, col_cov: vcol.clone() };
                    let got = matrix_normal_logdensity(&x, &p).unwrap();
                    assert!((got - dense).abs() < 1e-10 * dense.abs().max(1.0), "{r}x{c}: {got} vs {dense}");
                }
            }
        }
    }

    #[test]
    fn inverse_wishart_means() {
        let mut rng = stream(6, 0);
        let n = 100_000;
        let p = InverseWishartParams::new(Matrix::from_element(1, 1, 2.0), 6.0).unwrap();
        let draws: Vec<f64> = (0..n).map(|_| sample_inverse_wishart(&p, &mut rng).unwrap()[(0, 0)]).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((m - 0.5).abs() < 4.0 * sd / (n as f64).sqrt());

        for q in 2..=3 {
            let s = random_spd(q, &mut rng);
            let p = InverseWishartParams::new(s, q as f64 + 4.0).unwrap();
            let mut acc = Matrix::zeros(q, q);
            for _ in 0..n {
                let d = sample_inverse_wishart(&p, &mut rng).unwrap();
                assert!(crate::linalg::is_spd(&d));
                acc += d;
            }
            let emp = acc / n as f64;
            let want = p.mean().unwrap();
            assert!(crate::linalg::frobenius(&(emp - &want)) / crate::linalg::frobenius(&want) < 0.05);
        }
        assert!(InverseWishartParams::new(Matrix::identity(3, 3), 1.5).is_err());
    }

    #[test]
    fn truncated_normal_moments() {
        let mut rng = stream(7, 0);
        let n = 200_000;
        let mean_of = |f: &mut dyn FnMut() -> f64| (0..n).map(|_| f()).sum::<f64>() / n as f64;
        let m = mean_of(&mut || sample_truncated_normal(0.0, 1.0, -1.5, 1.5, &mut rng).unwrap());
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        let m = mean_of(&mut || sample_truncated_normal(2.0, 1.0, -1e3, 1e3, &mut rng).unwrap());
        assert!((m - 2.0).abs() < 4.0 / (n as f64).sqrt());
        let m = mean_of(&mut || sample_truncated_normal(0.0, 1.0, 0.0, 1e3, &mut rng).unwrap());
        // half-normal sd = sqrt(1 - 2/pi)
        let se = (1.0 - 2.0 / std::f64::consts::PI).sqrt() / (n as f64).sqrt();
        assert!((m - (2.0 / std::f64::consts::PI).sqrt()).abs() < 4.0 * se);
    }

    #[test]
    fn truncated_normal_stays_inside() {
        let mut rng = stream(8, 0);
        let cases = [(0.0, 1.0, 0.0, 1.0), (5.0, 0.1, 0.0, 1.0), (-40.0, 1.0, 0.0, 0.5), (0.3, 1e-4, 0.0, 0.30001), (50.0, 1.0, -1.0, 0.0)];
        for &(m, s, lo, hi) in &cases {
            for _ in 0..200_000 {
                let x = sample_truncated_normal(m, s, lo, hi, &mut rng).unwrap();
                assert!(x > lo && x < hi, "{x} outside ({lo},{hi})");
            }
        }
        assert!(sample_truncated_normal(0.0, 1.0, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn trunc_mass_values() {
        assert!((log_trunc_mass(0.0, 1.0, 0.0, f64::INFINITY) - 0.5f64.ln()).abs() < 1e-15);
        let v = log_trunc_mass(0.0, 1.0, -1.96, 1.96);
        assert!((v.exp() - 0.950_004_209_703_559_1).abs() < 1e-12);
        // symmetric under reflection
        assert!((log_trunc_mass(0.2, 0.5, 0.0, 1.0) - log_trunc_mass(0.8, 0.5, 0.0, 1.0)).abs() < 1e-14);
        // deep tail stays finite: log(Φ(-39) - Φ(-40))
        let t = log_trunc_mass(0.0, 1.0, 39.0, 40.0);
        assert!(t.is_finite() && (t - log_normal_cdf(-39.0)).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn truncated_normal_support_property(mean in -20.0f64..20.0, sd in 0.01f64..5.0, low in -5.0f64..5.0, width in 1e-3f64..5.0, seed in 0u64..500) {
            let high = low + width;
            let x = sample_truncated_normal(mean, sd, low, high, &mut stream(seed, 3)).unwrap();
            proptest::prop_assert!(x > low && x < high, "{} not in ({}, {})", x, low, high);
            let lm = log_trunc_mass(mean, sd, low, high);
            proptest::prop_assert!(lm <= 0.0 && lm.is_finite());
        }
    }
}
