//! Exponential-family response layer with canonical links.
//!
//! | family       | natural domain | b(w)             | ψ            |
//! |--------------|----------------|------------------|--------------|
//! | gaussian     | ℝ              | w²/2             | variance σ²  |
//! | bernoulli    | ℝ              | log(1+eʷ)        | 1            |
//! | poisson      | ℝ              | eʷ               | 1            |
//! | binomial     | ℝ              | m·log(1+eʷ)      | 1            |
//! | gamma        | w < 0          | −log(−w)         | shape α      |
//! | negbinomial  | w < 0          | −r·log(1−eʷ)     | size r       |
//!
//! The gamma density is `Gamma(shape α, scale −1/w)` and the negative binomial
//! is the count of successes before the `r`-th failure with success
//! probability `eʷ`. Both are normalized exactly.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
    Poisson,
    Binomial,
    Gamma,
    #[serde(rename = "negbinomial")]
    NegBinomial,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Binomial => "binomial",
            FamilyKind::Gamma => "gamma",
            FamilyKind::NegBinomial => "negbinomial",
        }
    }

    /// Logit-linked families, whose latent scale is not identified.
    pub fn is_logit(self) -> bool {
        matches!(self, FamilyKind::Bernoulli | FamilyKind::Binomial)
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian" => FamilyKind::Gaussian,
            "bernoulli" => FamilyKind::Bernoulli,
            "poisson" => FamilyKind::Poisson,
            "binomial" => FamilyKind::Binomial,
            "gamma" => FamilyKind::Gamma,
            "negbinomial" => FamilyKind::NegBinomial,
            other => return Err(Error::Config(format!("unknown family `{other}`"))),
        })
    }
}

/// A response family with its dispersion and (binomial) trial count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFamily")]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub psi: f64,
    /// Default binomial trial count; datasets may override per site.
    pub trials: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFamily {
    kind: FamilyKind,
    #[serde(default = "one")]
    psi: f64,
    #[serde(default = "one_u32")]
    trials: u32,
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

impl TryFrom<RawFamily> for FamilySpec {
    type Error = Error;
    fn try_from(r: RawFamily) -> Result<Self> {
        Ok(FamilySpec::new(r.kind, r.psi)?.with_trials(r.trials))
    }
}

impl FamilySpec {
    pub fn new(kind: FamilyKind, psi: f64) -> Result<Self> {
        if !(psi > 0.0 && psi.is_finite()) {
            return Err(Error::Config(format!("{} dispersion must be positive, got {psi}", kind.name())));
        }
        let psi = match kind {
            FamilyKind::Bernoulli | FamilyKind::Poisson | FamilyKind::Binomial => 1.0,
            _ => psi,
        };
        Ok(FamilySpec { kind, psi, trials: 1 })
    }

    pub fn gaussian(var: f64) -> Self {
        Self::new(FamilyKind::Gaussian, var).expect("positive variance")
    }
    pub fn bernoulli() -> Self {
        Self::new(FamilyKind::Bernoulli, 1.0).unwrap()
    }
    pub fn poisson() -> Self {
        Self::new(FamilyKind::Poisson, 1.0).unwrap()
    }
    pub fn binomial(trials: u32) -> Self {
        Self::new(FamilyKind::Binomial, 1.0).unwrap().with_trials(trials)
    }
    pub fn gamma(shape: f64) -> Self {
        Self::new(FamilyKind::Gamma, shape).expect("positive shape")
    }
    pub fn negbinomial(size: f64) -> Self {
        Self::new(FamilyKind::NegBinomial, size).expect("positive size")
    }

    pub fn with_trials(mut self, trials: u32) -> Self {
        self.trials = trials;
        self
    }

    pub fn in_domain(&self, w: f64) -> bool {
        match self.kind {
            FamilyKind::Gamma | FamilyKind::NegBinomial => w < 0.0,
            _ => w.is_finite(),
        }
    }

    fn check(&self, w: f64) -> Result<()> {
        if self.in_domain(w) {
            Ok(())
        } else {
            Err(Error::Domain(format!("w = {w} is outside the {} natural domain", self.kind.name())))
        }
    }

    /// `b(w)`.
    pub fn cumulant(&self, w: f64) -> Result<f64> {
        self.check(w)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => 0.5 * w * w,
            FamilyKind::Bernoulli => softplus(w),
            FamilyKind::Poisson => w.exp(),
            FamilyKind::Binomial => self.trials as f64 * softplus(w),
            FamilyKind::Gamma => -(-w).ln(),
            FamilyKind::NegBinomial => -self.psi * ln_one_minus_exp(w),
        })
    }

    /// `b′(w)`.
    pub fn cumulant_d1(&self, w: f64) -> Result<f64> {
        self.check(w)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => w,
            FamilyKind::Bernoulli => logistic(w),
            FamilyKind::Poisson => w.exp(),
            FamilyKind::Binomial => self.trials as f64 * logistic(w),
            FamilyKind::Gamma => -1.0 / w,
            FamilyKind::NegBinomial => self.psi * odds_of_exp(w),
        })
    }

    /// `b″(w)`.
    pub fn cumulant_d2(&self, w: f64) -> Result<f64> {
        self.check(w)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Bernoulli => logistic(w) * logistic(-w),
            FamilyKind::Poisson => w.exp(),
            FamilyKind::Binomial => self.trials as f64 * logistic(w) * logistic(-w),
            FamilyKind::Gamma => 1.0 / (w * w),
            FamilyKind::NegBinomial => {
                let e = w.exp();
                let om = -w.exp_m1();
                self.psi * e / (om * om)
            }
        })
    }

    /// Canonical inverse link `g⁻¹(w) = b′(w)`.
    pub fn inverse_link(&self, w: f64) -> Result<f64> {
        self.cumulant_d1(w)
    }

    /// `E[Y | w]` on the response scale (differs from the inverse link only
    /// for the gamma family, whose mean is `α·(−1/w)`).
    pub fn response_mean(&self, w: f64) -> Result<f64> {
        let m = self.inverse_link(w)?;
        Ok(if self.kind == FamilyKind::Gamma { self.psi * m } else { m })
    }

    /// `log f(y | w)`; `-∞` when `w` is outside the natural domain.
    pub fn log_likelihood(&self, y: f64, w: f64) -> f64 {
        if !self.in_domain(w) {
            return f64::NEG_INFINITY;
        }
        let psi = self.psi;
        match self.kind {
            FamilyKind::Gaussian => {
                -0.5 * (LN_2PI + psi.ln()) - 0.5 * y * y / psi + (y * w - 0.5 * w * w) / psi
            }
            FamilyKind::Bernoulli => y * w - softplus(w),
            FamilyKind::Poisson => y * w - w.exp() - ln_gamma(y + 1.0),
            FamilyKind::Binomial => {
                let m = self.trials as f64;
                ln_choose(m, y) + y * w - m * softplus(w)
            }
            FamilyKind::Gamma => {
                (psi - 1.0) * y.ln() - ln_gamma(psi) + y * w + psi * (-w).ln()
            }
            FamilyKind::NegBinomial => {
                ln_gamma(y + psi) - ln_gamma(psi) - ln_gamma(y + 1.0)
                    + y * w
                    + psi * ln_one_minus_exp(w)
            }
        }
    }

    /// Whether `y` lies in the support; the message explains a violation.
    pub fn check_support(&self, y: f64) -> std::result::Result<(), String> {
        let int = y.fract() == 0.0;
        let ok = match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Poisson | FamilyKind::NegBinomial => y.is_finite() && y >= 0.0 && int,
            FamilyKind::Binomial => y.is_finite() && int && y >= 0.0 && y <= self.trials as f64,
            FamilyKind::Gamma => y.is_finite() && y > 0.0,
        };
        if ok {
            return Ok(());
        }
        Err(match self.kind {
            FamilyKind::Gaussian => format!("{y} is not a finite real"),
            FamilyKind::Bernoulli => format!("{y} is not 0 or 1"),
            FamilyKind::Poisson | FamilyKind::NegBinomial => format!("{y} is not a nonnegative integer count"),
            FamilyKind::Binomial => format!("{y} is not an integer in 0..={}", self.trials),
            FamilyKind::Gamma => format!("{y} is not a positive real"),
        })
    }

    /// Draw `Y | w`.
    pub fn sample_response<R: Rng + ?Sized>(&self, w: f64, rng: &mut R) -> Result<f64> {
        self.check(w)?;
        let dist_err = |e: &dyn std::fmt::Display| Error::Numeric(format!("{} draw at w = {w}: {e}", self.kind.name()));
        Ok(match self.kind {
            FamilyKind::Gaussian => Normal::new(w, self.psi.sqrt()).map_err(|e| dist_err(&e))?.sample(rng),
            FamilyKind::Bernoulli => f64::from(u8::from(rng.random::<f64>() < logistic(w))),
            FamilyKind::Poisson => poisson(w.exp(), rng)?,
            FamilyKind::Binomial => {
                Binomial::new(u64::from(self.trials), logistic(w)).map_err(|e| dist_err(&e))?.sample(rng) as f64
            }
            FamilyKind::Gamma => {
                let g = Gamma::new(self.psi, -1.0 / w).map_err(|e| dist_err(&e))?;
                // A draw can underflow to 0 for tiny shapes; keep it in the support.
                g.sample(rng).max(f64::MIN_POSITIVE)
            }
            FamilyKind::NegBinomial => {
                let lambda = Gamma::new(self.psi, odds_of_exp(w)).map_err(|e| dist_err(&e))?.sample(rng);
                poisson(lambda, rng)?
            }
        })
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda < 1e-300 {
        return Ok(0.0);
    }
    Poisson::new(lambda)
        .map(|d| d.sample(rng))
        .map_err(|e| Error::Numeric(format!("poisson draw with rate {lambda}: {e}")))
}

/// `log(1 + eʷ)`, stable for large `|w|`.
pub fn softplus(w: f64) -> f64 {
    if w > 30.0 {
        w + (-w).exp()
    } else if w < -30.0 {
        w.exp()
    } else {
        w.exp().ln_1p()
    }
}

/// `1 / (1 + e⁻ʷ)`.
pub fn logistic(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

/// `log(1 − eʷ)` for `w < 0`.
fn ln_one_minus_exp(w: f64) -> f64 {
    if w > -std::f64::consts::LN_2 {
        (-w.exp_m1()).ln()
    } else {
        (-w.exp()).ln_1p()
    }
}

/// `eʷ / (1 − eʷ)` for `w < 0`.
fn odds_of_exp(w: f64) -> f64 {
    w.exp() / -w.exp_m1()
}

fn ln_choose(m: f64, k: f64) -> f64 {
    ln_gamma(m + 1.0) - ln_gamma(k + 1.0) - ln_gamma(m - k + 1.0)
}
