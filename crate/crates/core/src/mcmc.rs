//! Posterior sampler: Metropolis–Hastings for the range φ, blocked MNIW
//! Gibbs for `(Σ, B)`, elliptical slice sampling for `W`.
//!
//! Internally every n-row matrix is held in max–min order; stored `W` draws
//! are returned in the dataset's original site order.

use log::{debug, warn};
use rand::Rng;

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::families::{FamilyKind, FamilySpec};
use crate::geometry::{build_conditioning_sets, maxmin_order, ConditioningSets, Ordering};
use crate::kernels::{matern, MaternParams};
use crate::linalg::{
    chol_solve, cholesky_lower, is_spd, solve_lower_transpose, symmetrize, Matrix,
};
use crate::matrixvariate::{
    log_trunc_mass, sample_inverse_wishart, sample_truncated_normal, standard_normal_matrix,
    InverseWishartParams,
};
use crate::rng::{stream, SpatialRng};
use crate::vecchia::{build_factor_from_geometry, NeighborGeometry, VecchiaFactor};

/// Matrix-normal–inverse-Wishart prior on `(B, Σ)`, uniform prior on
/// `φ ∈ (0, b_φ)`, fixed smoothness `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// `M`, p×q.
    pub mean: Matrix,
    /// `V`, p×p.
    pub row_cov: Matrix,
    /// `S`, q×q.
    pub scale: Matrix,
    /// `v`.
    pub dof: f64,
    pub b_phi: f64,
    pub nu: f64,
}

impl PriorSpec {
    pub fn new(mean: Matrix, row_cov: Matrix, scale: Matrix, dof: f64, b_phi: f64, nu: f64) -> Result<Self> {
        let (p, q) = mean.shape();
        if row_cov.shape() != (p, p) || scale.shape() != (q, q) {
            return Err(Error::Dimension(format!(
                "prior mean is {p}×{q} but V is {}×{} and S is {}×{}",
                row_cov.nrows(),
                row_cov.ncols(),
                scale.nrows(),
                scale.ncols()
            )));
        }
        if p > 0 && !is_spd(&row_cov) {
            return Err(Error::Config("prior row covariance V is not positive definite".into()));
        }
        if !is_spd(&scale) {
            return Err(Error::Config("prior scale S is not positive definite".into()));
        }
        InverseWishartParams::new(scale.clone(), dof)?;
        if !(b_phi > 0.0 && b_phi.is_finite()) {
            return Err(Error::Config(format!("b_phi must be positive, got {b_phi}")));
        }
        MaternParams::new(1.0, nu)?;
        Ok(PriorSpec { mean, row_cov, scale, dof, b_phi, nu })
    }

    /// `M = 0`, `V = 100 I`, `S = I`, `v = q + 1`.
    pub fn default_for(p: usize, q: usize, b_phi: f64, nu: f64) -> Result<Self> {
        Self::new(
            Matrix::zeros(p, q),
            Matrix::identity(p, p) * 100.0,
            Matrix::identity(q, q),
            q as f64 + 1.0,
            b_phi,
            nu,
        )
    }

    pub fn p(&self) -> usize {
        self.mean.nrows()
    }
    pub fn q(&self) -> usize {
        self.mean.ncols()
    }
}

/// Range at which the Matérn correlation equals `threshold` at distance
/// `diameter`, by bisection on `(1e-6 Δ, 1e3 Δ)`.
pub fn range_upper_bound(diameter: f64, nu: f64, threshold: f64) -> Result<f64> {
    if !(diameter > 0.0) {
        return Err(Error::Config(format!("domain diameter must be positive, got {diameter}")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("correlation threshold must lie in (0,1), got {threshold}")));
    }
    let f = |b: f64| matern(diameter, MaternParams { phi: b, nu }) - threshold;
    let (mut lo, mut hi) = (1e-6 * diameter, 1e3 * diameter);
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(Error::Config(format!(
            "correlation {threshold} at distance {diameter} is not reachable for nu = {nu}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Run settings for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Neighbour cap `m`; clamped to `n − 1` on tiny datasets.
    pub m: usize,
    /// Initial sd of the φ proposal; `None` uses `b_φ / 10`.
    pub proposal_sd: Option<f64>,
    /// Burn-in iterations per adaptation batch.
    pub adapt_window: usize,
    pub jitter: f64,
    pub seed: u64,
    /// Stream index for this chain under `seed`.
    pub chain: u64,
    pub store_w: bool,
    /// Hold φ at this value and skip its update.
    pub fix_phi: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            m: 10,
            proposal_sd: None,
            adapt_window: 50,
            jitter: 1e-8,
            seed: 1,
            chain: 0,
            store_w: true,
            fix_phi: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must be at least burn_in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("neighbour count m must be at least 1".into()));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adapt_window must be at least 1".into()));
        }
        if let Some(sd) = self.proposal_sd {
            if !(sd > 0.0) {
                return Err(Error::Config(format!("proposal_sd must be positive, got {sd}")));
            }
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Current sampler state, rows in factor order.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub w: Matrix,
    pub b: Matrix,
    pub sigma: Matrix,
    pub sigma_chol: Matrix,
    pub phi: f64,
    /// Factor at the current `phi`.
    pub factor: VecchiaFactor,
}

impl ModelState {
    pub fn set_sigma(&mut self, sigma: Matrix) -> Result<()> {
        self.sigma_chol = cholesky_lower(&sigma, "Sigma")?;
        self.sigma = sigma;
        Ok(())
    }
}

/// Update stages, reported to an observer in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStep {
    Phi,
    SigmaB,
    W,
}

/// Draw `(Σ, B)` from their joint full conditional.
///
/// With `UX`, `UW` the whitened design and latent matrix:
/// `P = (UX)ᵀUX + V⁻¹`, `M̃ = P⁻¹((UX)ᵀUW + V⁻¹M)`,
/// `S̃ = S + (UW − UX M̃)ᵀ(UW − UX M̃) + (M̃ − M)ᵀV⁻¹(M̃ − M)`,
/// `Σ ~ IW(S̃, v + n)`, `B = M̃ + L_P⁻ᵀ Z L_Σᵀ`.
pub fn gibbs_update_sigma_b<R: Rng + ?Sized>(
    w: &Matrix,
    x: &Matrix,
    factor: &VecchiaFactor,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    let (p, q) = prior.mean.shape();
    let n = factor.n;
    if w.shape() != (n, q) || x.shape() != (n, p) {
        return Err(Error::Dimension(format!(
            "W is {}×{}, X is {}×{}; expected {n}×{q} and {n}×{p}",
            w.nrows(),
            w.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    let ux = factor.apply(x)?;
    let uw = factor.apply(w)?;
    let lv = cholesky_lower(&prior.row_cov, "prior V")?;
    let v_inv = chol_solve(&lv, &Matrix::identity(p, p))?;
    let prec = ux.transpose() * &ux + &v_inv;
    let lp = cholesky_lower(&prec, "posterior precision of B")?;
    let m_tilde = chol_solve(&lp, &(ux.transpose() * &uw + &v_inv * &prior.mean))?;
    let resid = &uw - &ux * &m_tilde;
    let dm = &m_tilde - &prior.mean;
    let mut s_tilde = &prior.scale + resid.transpose() * &resid + dm.transpose() * &v_inv * &dm;
    symmetrize(&mut s_tilde);
    let iw = InverseWishartParams::new(s_tilde, prior.dof + n as f64)?;
    let sigma = sample_inverse_wishart(&iw, rng)
        .map_err(|e| Error::Numeric(format!("posterior scale S~ is not positive definite: {e}")))?;
    let lsig = cholesky_lower(&sigma, "Sigma draw")?;
    let z = standard_normal_matrix(p, q, rng);
    let b = m_tilde + solve_lower_transpose(&lp, &z)? * lsig.transpose();
    Ok((sigma, b))
}

/// Matrix-normal log-density of `W` under mean `XB` and factor `f`.
fn latent_logdensity(state_w: &Matrix, mean: &Matrix, f: &VecchiaFactor, sigma_chol: &Matrix) -> Result<f64> {
    f.matrix_normal_logdensity(state_w, mean, sigma_chol)
}

/// Log acceptance ratio for moving φ to `phi_new` given the factor there.
/// The truncated-normal proposal contributes `log Z(φ) − log Z(φ′)` where
/// `Z(c)` is its mass on `(0, b_φ)` when centred at `c`.
pub fn mh_log_ratio(
    state: &ModelState,
    x: &Matrix,
    phi_new: f64,
    factor_new: &VecchiaFactor,
    b_phi: f64,
    sd: f64,
) -> Result<f64> {
    let mean = x * &state.b;
    let cur = latent_logdensity(&state.w, &mean, &state.factor, &state.sigma_chol)?;
    let new = latent_logdensity(&state.w, &mean, factor_new, &state.sigma_chol)?;
    Ok(new - cur + log_trunc_mass(state.phi, sd, 0.0, b_phi) - log_trunc_mass(phi_new, sd, 0.0, b_phi))
}

/// One Metropolis–Hastings step for φ. Returns whether the move was accepted.
pub fn mh_update_phi<R: Rng + ?Sized>(
    state: &mut ModelState,
    x: &Matrix,
    geom: &NeighborGeometry,
    prior: &PriorSpec,
    jitter: f64,
    sd: f64,
    rng: &mut R,
) -> Result<bool> {
    let phi_new = sample_truncated_normal(state.phi, sd, 0.0, prior.b_phi, rng)?;
    let factor_new = match build_factor_from_geometry(geom, MaternParams { phi: phi_new, nu: prior.nu }, jitter) {
        Ok(f) => f,
        Err(e) => {
            warn!("rejecting phi = {phi_new}: {e}");
            return Ok(false);
        }
    };
    let log_r = mh_log_ratio(state, x, phi_new, &factor_new, prior.b_phi, sd)?;
    let u: f64 = rng.random();
    if log_r.is_finite() && u.ln() < log_r {
        state.phi = phi_new;
        state.factor = factor_new;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Bookkeeping from one elliptical slice sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EssOutcome {
    pub shrinks: usize,
    pub stalled: bool,
}

/// Bracket shrinks allowed before a sweep gives up and keeps `W`.
pub const ESS_MAX_SHRINKS: usize = 100;

/// One elliptical slice sweep over the whole latent matrix. `loglik` is the
/// data log-likelihood; non-finite values count as rejections.
pub fn ess_update_w<R: Rng + ?Sized>(
    w: &Matrix,
    mean: &Matrix,
    factor: &VecchiaFactor,
    sigma_chol: &Matrix,
    loglik: &dyn Fn(&Matrix) -> f64,
    rng: &mut R,
) -> Result<(Matrix, EssOutcome)> {
    use std::f64::consts::TAU;
    let q = sigma_chol.nrows();
    let z = standard_normal_matrix(factor.n, q, rng);
    let prior_draw = factor.solve(&(z * sigma_chol.transpose()))?;
    let centred = w - mean;
    let cur = loglik(w);
    let threshold = cur + rng.random::<f64>().ln();
    let mut gamma = rng.random::<f64>() * TAU;
    let (mut lo, mut hi) = (gamma - TAU, gamma);
    let mut shrinks = 0;
    loop {
        let cand = mean + &centred * gamma.cos() + &prior_draw * gamma.sin();
        let ll = loglik(&cand);
        if ll.is_finite() && ll > threshold {
            return Ok((cand, EssOutcome { shrinks, stalled: false }));
        }
        if shrinks == ESS_MAX_SHRINKS {
            warn!("elliptical slice sweep stalled after {ESS_MAX_SHRINKS} shrinks; keeping W");
            return Ok((w.clone(), EssOutcome { shrinks, stalled: true }));
        }
        if gamma < 0.0 {
            lo = gamma;
        } else {
            hi = gamma;
        }
        gamma = lo + (hi - lo) * rng.random::<f64>();
        shrinks += 1;
    }
}

/// Observed responses flattened as `(row, column, y, family)` in factor order.
#[derive(Debug, Clone)]
pub struct Observations {
    entries: Vec<(usize, usize, f64, FamilySpec)>,
}

impl Observations {
    /// From a dataset, with rows mapped through `ordering` (ordered position
    /// `k` holds site `perm[k]`).
    pub fn new(ds: &SpatialDataset, ordering: &Ordering) -> Self {
        let mut entries = Vec::new();
        for (k, &i) in ordering.perm.iter().enumerate() {
            for j in 0..ds.q() {
                let y = ds.y[(i, j)];
                if !y.is_nan() {
                    entries.push((k, j, y, ds.family_at(i, j)));
                }
            }
        }
        Observations { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Σ log f(y_ij | w_ij)` over observed entries.
    pub fn log_likelihood(&self, w: &Matrix) -> f64 {
        self.entries.iter().map(|&(k, j, y, f)| f.log_likelihood(y, w[(k, j)])).sum()
    }
}

/// Rescale stored Σ draws so every logit-linked coordinate has unit variance:
/// `Σ ← D Σ D` with `D_jj = 1/√Σ_jj` on those coordinates, then the
/// constrained diagonal is set to exactly 1.
pub fn postprocess_identifiability(chain: &mut PosteriorChain) {
    let constrained: Vec<usize> =
        chain.families.iter().enumerate().filter(|(_, f)| f.kind.is_logit()).map(|(j, _)| j).collect();
    if constrained.is_empty() {
        return;
    }
    for s in chain.sigma.iter_mut() {
        let q = s.nrows();
        let mut d = vec![1.0; q];
        for &j in &constrained {
            d[j] = 1.0 / s[(j, j)].sqrt();
        }
        for a in 0..q {
            for b in 0..q {
                s[(a, b)] *= d[a] * d[b];
            }
        }
        for &j in &constrained {
            s[(j, j)] = 1.0;
        }
    }
    chain.postprocessed = true;
}

/// Stored posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub families: Vec<FamilySpec>,
    pub phi: Vec<f64>,
    pub b: Vec<Matrix>,
    pub sigma: Vec<Matrix>,
    /// Latent draws in original site order, when stored.
    pub w: Option<Vec<Matrix>>,
    pub phi_accepted: usize,
    pub phi_proposed: usize,
    /// Proposal sd in force after burn-in.
    pub proposal_sd: f64,
    pub ess_shrinks: usize,
    pub ess_stalls: usize,
    pub iterations: usize,
    pub postprocessed: bool,
    pub b_phi: f64,
    pub nu: f64,
    pub m: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.phi_proposed == 0 {
            0.0
        } else {
            self.phi_accepted as f64 / self.phi_proposed as f64
        }
    }

    /// Concatenate chains run on the same data and model.
    pub fn concat(chains: &[PosteriorChain]) -> Result<PosteriorChain> {
        let first = chains.first().ok_or_else(|| Error::Config("no chains to combine".into()))?;
        let mut out = first.clone();
        for c in &chains[1..] {
            if (c.n, c.p, c.q) != (first.n, first.p, first.q) || c.families != first.families {
                return Err(Error::Dimension("chains have different shapes".into()));
            }
            out.phi.extend_from_slice(&c.phi);
            out.b.extend(c.b.iter().cloned());
            out.sigma.extend(c.sigma.iter().cloned());
            out.w = match (out.w.take(), &c.w) {
                (Some(mut a), Some(b)) => {
                    a.extend(b.iter().cloned());
                    Some(a)
                }
                _ => None,
            };
            out.phi_accepted += c.phi_accepted;
            out.phi_proposed += c.phi_proposed;
            out.ess_shrinks += c.ess_shrinks;
            out.ess_stalls += c.ess_stalls;
            out.iterations += c.iterations;
        }
        Ok(out)
    }

    /// Draws of one scalar, e.g. `|d| d.sigma[l][(0, 1)]`.
    pub fn trace(&self, f: impl Fn(&Self, usize) -> f64) -> Vec<f64> {
        (0..self.len()).map(|l| f(self, l)).collect()
    }
}

/// Warm start for `W` (factor order): link-transformed data, clamped where
/// the link is unbounded. Missing entries get the column mean of the
/// transformed observed values.
pub fn warm_start_latent(ds: &SpatialDataset, ordering: &Ordering) -> Matrix {
    let n = ds.n();
    let q = ds.q();
    let mut w = Matrix::from_element(n, q, f64::NAN);
    for (k, &i) in ordering.perm.iter().enumerate() {
        for j in 0..q {
            let y = ds.y[(i, j)];
            if y.is_nan() {
                continue;
            }
            let f = ds.family_at(i, j);
            let logit = |p: f64| (p / (1.0 - p)).ln().clamp(-2.0, 2.0);
            w[(k, j)] = match f.kind {
                FamilyKind::Gaussian => y,
                FamilyKind::Bernoulli => logit((y + 0.5) / 2.0),
                FamilyKind::Binomial => logit((y + 0.5) / (f.trials as f64 + 1.0)),
                FamilyKind::Poisson => (y + 0.5).ln(),
                FamilyKind::Gamma => -f.psi / y,
                FamilyKind::NegBinomial => ((y + 0.5) / (y + 0.5 + f.psi)).ln(),
            };
        }
    }
    for j in 0..q {
        let obs: Vec<f64> = w.column(j).iter().copied().filter(|v| !v.is_nan()).collect();
        let fill = if obs.is_empty() {
            match ds.families[j].kind {
                FamilyKind::Gamma | FamilyKind::NegBinomial => -1.0,
                _ => 0.0,
            }
        } else {
            obs.iter().sum::<f64>() / obs.len() as f64
        };
        for k in 0..n {
            if w[(k, j)].is_nan() {
                w[(k, j)] = fill;
            }
        }
    }
    w
}

/// Per-response least squares of `W` on `X`; the prior mean when `X` is
/// not of full column rank.
fn least_squares(x: &Matrix, w: &Matrix, fallback: &Matrix) -> Matrix {
    let xtx = x.transpose() * x;
    match cholesky_lower(&xtx, "XᵀX").and_then(|l| chol_solve(&l, &(x.transpose() * w))) {
        Ok(b) => b,
        Err(_) => fallback.clone(),
    }
}

/// Preprocessed inputs shared by every iteration of a chain.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub geom: NeighborGeometry,
    /// Covariates in factor order.
    pub x: Matrix,
    pub obs: Observations,
    pub families: Vec<FamilySpec>,
    pub n: usize,
}

impl FitProblem {
    pub fn new(ds: &SpatialDataset, m: usize) -> Result<Self> {
        let n = ds.n();
        let ordering = maxmin_order(&ds.sites);
        let csets = if n == 1 {
            ConditioningSets::empty(1)
        } else {
            let eff = m.min(n - 1);
            if eff < m {
                debug!("clamping m = {m} to n - 1 = {eff}");
            }
            build_conditioning_sets(&ds.sites, &ordering, eff)?
        };
        let geom = NeighborGeometry::new(&ds.sites, &ordering, &csets)?;
        Ok(FitProblem {
            x: ordering.apply_rows(&ds.x),
            obs: Observations::new(ds, &ordering),
            families: ds.families.clone(),
            geom,
            n,
        })
    }

    pub fn ordering(&self) -> &Ordering {
        &self.geom.ordering
    }
}

/// Run one chain.
pub fn run_chain(ds: &SpatialDataset, prior: &PriorSpec, cfg: &McmcConfig) -> Result<PosteriorChain> {
    run_chain_observed(ds, prior, cfg, &mut |_| {})
}

/// Run one chain, reporting every update stage to `observer`.
pub fn run_chain_observed(
    ds: &SpatialDataset,
    prior: &PriorSpec,
    cfg: &McmcConfig,
    observer: &mut dyn FnMut(UpdateStep),
) -> Result<PosteriorChain> {
    cfg.validate()?;
    if prior.p() != ds.p() || prior.q() != ds.q() {
        return Err(Error::Dimension(format!(
            "prior is for p = {}, q = {} but the dataset has p = {}, q = {}",
            prior.p(),
            prior.q(),
            ds.p(),
            ds.q()
        )));
    }
    ds.check_fittable()?;
    let problem = FitProblem::new(ds, cfg.m)?;
    let mut rng = stream(cfg.seed, cfg.chain);
    let mut state = initial_state(ds, &problem, prior, cfg)?;
    sample_chain(&problem, prior, cfg, &mut state, &mut rng, observer)
}

fn initial_state(ds: &SpatialDataset, problem: &FitProblem, prior: &PriorSpec, cfg: &McmcConfig) -> Result<ModelState> {
    let q = ds.q();
    let w_warm = warm_start_latent(ds, problem.ordering());
    let b = if problem.obs.is_empty() { prior.mean.clone() } else { least_squares(&problem.x, &w_warm, &prior.mean) };
    let w = if problem.obs.is_empty() { &problem.x * &b } else { w_warm };
    let mut sigma = if prior.dof > q as f64 + 1.0 {
        &prior.scale / (prior.dof - q as f64 - 1.0)
    } else {
        prior.scale.clone()
    };
    let mut bump = 1e-10;
    while !is_spd(&sigma) {
        sigma += Matrix::identity(q, q) * bump;
        bump *= 10.0;
    }
    let phi = match cfg.fix_phi {
        Some(v) => {
            if !(v > 0.0 && v < prior.b_phi) {
                return Err(Error::Config(format!("fixed phi = {v} must lie in (0, b_phi = {})", prior.b_phi)));
            }
            v
        }
        None => prior.b_phi / 2.0,
    };
    let factor = build_factor_from_geometry(&problem.geom, MaternParams::new(phi, prior.nu)?, cfg.jitter)?;
    let sigma_chol = cholesky_lower(&sigma, "initial Sigma")?;
    Ok(ModelState { w, b, sigma, sigma_chol, phi, factor })
}

fn snapshot(state: &ModelState) -> String {
    format!("phi = {:.6}, Sigma diagonal = {:?}", state.phi, state.sigma.diagonal().as_slice())
}

/// The iteration loop, from a prepared state.
pub fn sample_chain(
    problem: &FitProblem,
    prior: &PriorSpec,
    cfg: &McmcConfig,
    state: &mut ModelState,
    rng: &mut SpatialRng,
    observer: &mut dyn FnMut(UpdateStep),
) -> Result<PosteriorChain> {
    let stored = if cfg.iterations > cfg.burn_in { (cfg.iterations - cfg.burn_in).div_ceil(cfg.thin) } else { 0 };
    let mut chain = PosteriorChain {
        n: problem.n,
        p: prior.p(),
        q: prior.q(),
        families: problem.families.clone(),
        phi: Vec::with_capacity(stored),
        b: Vec::with_capacity(stored),
        sigma: Vec::with_capacity(stored),
        w: cfg.store_w.then(|| Vec::with_capacity(stored)),
        phi_accepted: 0,
        phi_proposed: 0,
        proposal_sd: 0.0,
        ess_shrinks: 0,
        ess_stalls: 0,
        iterations: cfg.iterations,
        postprocessed: false,
        b_phi: prior.b_phi,
        nu: prior.nu,
        m: problem.geom.csets.m,
        jitter: cfg.jitter,
        seed: cfg.seed,
    };
    let mut log_sd = cfg.proposal_sd.unwrap_or(prior.b_phi / 10.0).ln();
    let mut window_acc = 0usize;
    let mut batch = 0usize;
    let loglik = |w: &Matrix| problem.obs.log_likelihood(w);

    for it in 0..cfg.iterations {
        let ctx = |e: Error, state: &ModelState| {
            Error::Numeric(format!("iteration {it} ({}): {e}", snapshot(state)))
        };
        if cfg.fix_phi.is_none() {
            observer(UpdateStep::Phi);
            let sd = log_sd.exp();
            let acc = mh_update_phi(state, &problem.x, &problem.geom, prior, cfg.jitter, sd, rng)
                .map_err(|e| ctx(e, state))?;
            chain.phi_proposed += 1;
            if acc {
                chain.phi_accepted += 1;
                window_acc += 1;
            }
            if it < cfg.burn_in && (it + 1) % cfg.adapt_window == 0 {
                batch += 1;
                let rate = window_acc as f64 / cfg.adapt_window as f64;
                let step = (1.0 / (batch as f64).sqrt()).min(0.5);
                log_sd += if rate > 0.44 { step } else { -step };
                log_sd = log_sd.min(prior.b_phi.ln());
                window_acc = 0;
            }
        }

        observer(UpdateStep::SigmaB);
        let (sigma, b) =
            gibbs_update_sigma_b(&state.w, &problem.x, &state.factor, prior, rng).map_err(|e| ctx(e, state))?;
        state.b = b;
        state.set_sigma(sigma).map_err(|e| ctx(e, state))?;

        observer(UpdateStep::W);
        let mean = &problem.x * &state.b;
        let (w, out) = ess_update_w(&state.w, &mean, &state.factor, &state.sigma_chol, &loglik, rng)
            .map_err(|e| ctx(e, state))?;
        state.w = w;
        chain.ess_shrinks += out.shrinks;
        chain.ess_stalls += usize::from(out.stalled);

        if it >= cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thin) {
            chain.phi.push(state.phi);
            chain.b.push(state.b.clone());
            chain.sigma.push(state.sigma.clone());
            if let Some(ws) = chain.w.as_mut() {
                ws.push(problem.ordering().unapply_rows(&state.w));
            }
        }
    }
    chain.proposal_sd = log_sd.exp();
    postprocess_identifiability(&mut chain);
    Ok(chain)
}

/// Run `chains` independent chains in parallel (chain `c` uses stream `c`
/// of the seed) and concatenate their draws.
pub fn run_chains(
    ds: &SpatialDataset,
    prior: &PriorSpec,
    cfg: &McmcConfig,
    chains: usize,
) -> Result<Vec<PosteriorChain>> {
    use rayon::prelude::*;
    (0..chains.max(1) as u64)
        .into_par_iter()
        .map(|c| run_chain(ds, prior, &McmcConfig { chain: c, ..cfg.clone() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SiteSet;
    use crate::stats::{batch_means_se, ks_uniform, mean, variance};

    fn unit_params() -> MaternParams {
        MaternParams::new(1.0, 0.5).unwrap()
    }

    #[test]
    fn b_phi_solves_threshold() {
        let b = range_upper_bound(2f64.sqrt(), 0.5, 0.05).unwrap();
        assert!((b - 2f64.sqrt() / 20f64.ln()).abs() < 1e-12);
        let b = range_upper_bound(1.0, 0.3, 0.05).unwrap();
        assert!((matern(1.0, MaternParams::new(b, 0.3).unwrap()) - 0.05).abs() < 1e-12);
        assert!(range_upper_bound(1.0, 0.5, 1.5).is_err());
    }

    #[test]
    fn conjugate_mean_limit() {
        let mut rng = stream(41, 0);
        let n = 30;
        let f = VecchiaFactor::identity(n, unit_params());
        let w = standard_normal_matrix(n, 1, &mut rng).add_scalar(2.0);
        let x = Matrix::from_element(n, 1, 1.0);
        let prior = PriorSpec::new(Matrix::zeros(1, 1), Matrix::from_element(1, 1, 1e6), Matrix::identity(1, 1), 2.0, 1.0, 0.5).unwrap();
        let draws: Vec<f64> = (0..20_000).map(|_| gibbs_update_sigma_b(&w, &x, &f, &prior, &mut rng).unwrap().1[(0, 0)]).collect();
        let wbar = w.mean();
        assert!((mean(&draws) - wbar).abs() < 4.0 * (variance(&draws) / draws.len() as f64).sqrt());
    }

    #[test]
    fn prior_only_gibbs() {
        let mut rng = stream(42, 0);
        let f = VecchiaFactor::identity(0, unit_params());
        let prior = PriorSpec::new(
            Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 0.0]),
            Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            6.0,
            1.0,
            0.5,
        )
        .unwrap();
        let n = 100_000;
        let mut sig = Matrix::zeros(2, 2);
        let mut bsum = Matrix::zeros(2, 2);
        let mut b00sq = 0.0;
        for _ in 0..n {
            let (s, b) = gibbs_update_sigma_b(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2), &f, &prior, &mut rng).unwrap();
            b00sq += (b[(0, 0)] - 1.0).powi(2);
            sig += s;
            bsum += b;
        }
        let want_sig = &prior.scale / (6.0 - 3.0);
        assert!(((sig / n as f64) - &want_sig).abs().max() < 0.05 * want_sig.abs().max());
        assert!(((bsum / n as f64) - &prior.mean).abs().max() < 0.03);
        // Var(B_00) = V_00 · E[Σ_00]
        assert!((b00sq / n as f64 - 2.0 * want_sig[(0, 0)]).abs() < 0.05 * 2.0 * want_sig[(0, 0)]);
    }

    /// Dense conjugate oracle: analytic posterior means from dense inverses.
    #[test]
    fn gibbs_matches_dense_mniw() {
        let mut rng = stream(43, 0);
        let (n, p, q) = (10, 2, 2);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let s = SiteSet::from_points(&pts).unwrap();
        let params = MaternParams::new(0.3, 0.5).unwrap();
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, n - 1).unwrap();
        let f = crate::vecchia::build_factor(&s, &o, &cs, params, 0.0).unwrap();
        let k = crate::kernels::correlation_matrix(&s.permuted(&o.perm), params);
        let mut x = standard_normal_matrix(n, p, &mut rng);
        x.column_mut(0).fill(1.0);
        let w = standard_normal_matrix(n, q, &mut rng);
        let prior = PriorSpec::new(Matrix::zeros(p, q), Matrix::identity(p, p) * 10.0, Matrix::identity(q, q), 4.0, 1.0, 0.5).unwrap();

        let kinv = k.try_inverse().unwrap();
        let vinv = prior.row_cov.clone().try_inverse().unwrap();
        let vt = (x.transpose() * &kinv * &x + &vinv).try_inverse().unwrap();
        let mt = &vt * (x.transpose() * &kinv * &w + &vinv * &prior.mean);
        let st = &prior.scale + w.transpose() * &kinv * &w + prior.mean.transpose() * &vinv * &prior.mean
            - mt.transpose() * vt.clone().try_inverse().unwrap() * &mt;
        let e_sigma = &st / (prior.dof + n as f64 - q as f64 - 1.0);

        let draws = 50_000;
        let mut bs: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); p * q];
        let mut ss: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); q * q];
        for _ in 0..draws {
            let (sig, b) = gibbs_update_sigma_b(&w, &x, &f, &prior, &mut rng).unwrap();
            for (t, v) in b.iter().enumerate() {
                bs[t].push(*v);
            }
            for (t, v) in sig.iter().enumerate() {
                ss[t].push(*v);
            }
        }
        for (t, want) in mt.iter().enumerate() {
            let se = (variance(&bs[t]) / draws as f64).sqrt();
            assert!((mean(&bs[t]) - want).abs() < 4.0 * se, "B[{t}]");
        }
        for (t, want) in e_sigma.iter().enumerate() {
            let se = (variance(&ss[t]) / draws as f64).sqrt();
            assert!((mean(&ss[t]) - want).abs() < 4.0 * se, "Sigma[{t}]");
        }
    }

    #[test]
    fn degenerate_proposal_has_unit_ratio() {
        let s = SiteSet::from_points(&[[0.0, 0.0], [0.5, 0.1], [0.2, 0.9]]).unwrap();
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, 2).unwrap();
        let f = crate::vecchia::build_factor(&s, &o, &cs, MaternParams::new(0.4, 0.5).unwrap(), 1e-8).unwrap();
        let state = ModelState {
            w: Matrix::from_row_slice(3, 1, &[0.3, -0.2, 1.0]),
            b: Matrix::zeros(1, 1),
            sigma: Matrix::identity(1, 1),
            sigma_chol: Matrix::identity(1, 1),
            phi: 0.4,
            factor: f.clone(),
        };
        let r = mh_log_ratio(&state, &Matrix::from_element(3, 1, 1.0), 0.4, &f, 1.0, 0.1).unwrap();
        assert_eq!(r, 0.0);
    }

    fn flat_dataset(n: usize, seed: u64) -> SpatialDataset {
        flat_dataset_p(n, 1, seed)
    }

    fn flat_dataset_p(n: usize, p: usize, seed: u64) -> SpatialDataset {
        let mut rng = stream(seed, 9);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        SpatialDataset::new(
            SiteSet::from_points(&pts).unwrap(),
            Matrix::from_element(n, p, 1.0),
            vec!["intercept".into(); p],
            Matrix::from_element(n, 1, f64::NAN),
            vec!["y".into()],
            vec![FamilySpec::gaussian(1.0)],
            vec![None],
        )
        .unwrap()
    }

    #[test]
    fn single_site_phi_is_uniform() {
        // K = [1] for every φ, so the φ chain targets its uniform prior.
        let ds = flat_dataset_p(1, 0, 1);
        let prior = PriorSpec::default_for(0, 1, 0.8, 0.5).unwrap();
        let cfg = McmcConfig { iterations: 100_000, burn_in: 0, thin: 20, proposal_sd: Some(0.4), seed: 5, store_w: false, ..Default::default() };
        let chain = run_chain(&ds, &prior, &cfg).unwrap();
        let (_, pval) = ks_uniform(&chain.phi, 0.0, 0.8);
        assert!(pval > 0.01, "KS p = {pval}");
    }

    #[test]
    fn ess_flat_likelihood_accepts_first_candidate_and_keeps_prior() {
        let mut rng = stream(44, 0);
        let n = 5;
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let s = SiteSet::from_points(&pts).unwrap();
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, 2).unwrap();
        let f = crate::vecchia::build_factor(&s, &o, &cs, MaternParams::new(0.5, 0.5).unwrap(), 0.0).unwrap();
        let sigma = Matrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        let lsig = cholesky_lower(&sigma, "s").unwrap();
        let mean = Matrix::from_element(n, 2, 0.5);
        let mut w = mean.clone();
        let k = (f.to_dense().transpose() * f.to_dense()).try_inverse().unwrap();
        let target = sigma.kronecker(&k);
        let flat = |_: &Matrix| 0.0;
        let sweeps = 100_000;
        let mut acc = Matrix::zeros(2 * n, 2 * n);
        let mut msum = Matrix::zeros(n, 2);
        for _ in 0..sweeps {
            let (nw, out) = ess_update_w(&w, &mean, &f, &lsig, &flat, &mut rng).unwrap();
            assert_eq!(out.shrinks, 0);
            w = nw;
            let c = &w - &mean;
            msum += &c;
            // column-major vec(W) has covariance Σ ⊗ K
            let v = Matrix::from_column_slice(2 * n, 1, c.as_slice());
            acc += &v * v.transpose();
        }
        assert!((msum / sweeps as f64).abs().max() < 0.05);
        let emp = acc / sweeps as f64;
        assert!((emp - target.clone()).abs().max() < 0.06 * target.abs().max());
    }

    #[test]
    fn ess_forced_rejection_shrinks_and_stalls() {
        let mut rng = stream(45, 0);
        let f = VecchiaFactor::identity(2, unit_params());
        let w = Matrix::from_element(2, 1, 0.25);
        let never = |_: &Matrix| f64::NAN;
        let (nw, out) = ess_update_w(&w, &Matrix::zeros(2, 1), &f, &Matrix::identity(1, 1), &never, &mut rng).unwrap();
        assert!(out.stalled);
        assert_eq!(out.shrinks, ESS_MAX_SHRINKS);
        assert_eq!(nw, w);
    }

    #[test]
    fn ess_scalar_conjugate_gaussian() {
        // W ~ N(μ, s²) prior, y | W ~ N(W, 1): posterior N((μ/s² + y)/(1/s² + 1), 1/(1/s² + 1)).
        let mut rng = stream(46, 0);
        let f = VecchiaFactor::identity(1, unit_params());
        let (mu, s2, y): (f64, f64, f64) = (0.5, 2.0, 1.7);
        let fam = FamilySpec::gaussian(1.0);
        let ll = |w: &Matrix| fam.log_likelihood(y, w[(0, 0)]);
        let lsig = Matrix::from_element(1, 1, s2.sqrt());
        let mu_m = Matrix::from_element(1, 1, mu);
        let mut w = mu_m.clone();
        let draws: Vec<f64> = (0..200_000)
            .map(|_| {
                w = ess_update_w(&w, &mu_m, &f, &lsig, &ll, &mut rng).unwrap().0;
                w[(0, 0)]
            })
            .collect();
        let pv = 1.0 / (1.0 / s2 + 1.0);
        let pm = pv * (mu / s2 + y);
        assert!((mean(&draws) - pm).abs() < 4.0 * batch_means_se(&draws));
        let sq: Vec<f64> = draws.iter().map(|d| (d - pm).powi(2)).collect();
        assert!((mean(&sq) - pv).abs() < 4.0 * batch_means_se(&sq));
    }

    #[test]
    fn postprocess_rules() {
        let mut chain = PosteriorChain {
            n: 1,
            p: 1,
            q: 2,
            families: vec![FamilySpec::bernoulli(), FamilySpec::gaussian(1.0)],
            phi: vec![0.1],
            b: vec![Matrix::zeros(1, 2)],
            sigma: vec![Matrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 1.0])],
            w: None,
            phi_accepted: 0,
            phi_proposed: 0,
            proposal_sd: 0.1,
            ess_shrinks: 0,
            ess_stalls: 0,
            iterations: 1,
            postprocessed: false,
            b_phi: 1.0,
            nu: 0.5,
            m: 1,
            jitter: 0.0,
            seed: 0,
        };
        let untouched = {
            let mut c = chain.clone();
            c.families = vec![FamilySpec::poisson(), FamilySpec::gaussian(1.0)];
            let before = c.clone();
            postprocess_identifiability(&mut c);
            assert_eq!(c, before);
            c
        };
        drop(untouched);
        chain.sigma[0] = Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        postprocess_identifiability(&mut chain);
        assert_eq!(chain.sigma[0], Matrix::identity(2, 2));

        let mut rng = stream(47, 0);
        chain.sigma = (0..500)
            .map(|_| {
                let a = standard_normal_matrix(2, 2, &mut rng);
                &a * a.transpose() + Matrix::identity(2, 2) * 0.01
            })
            .collect();
        chain.families = vec![FamilySpec::bernoulli(), FamilySpec::binomial(3)];
        postprocess_identifiability(&mut chain);
        for s in &chain.sigma {
            assert_eq!((s[(0, 0)], s[(1, 1)]), (1.0, 1.0));
            assert!(crate::linalg::min_eigenvalue(s) > 0.0);
        }
    }

    #[test]
    fn update_order_and_empty_chain() {
        let ds = flat_dataset(6, 2);
        let prior = PriorSpec::default_for(1, 1, 0.5, 0.5).unwrap();
        let cfg = McmcConfig { iterations: 3, burn_in: 3, m: 3, ..Default::default() };
        let mut steps = Vec::new();
        let chain = run_chain_observed(&ds, &prior, &cfg, &mut |s| steps.push(s)).unwrap();
        assert!(chain.is_empty());
        assert_eq!(steps, [UpdateStep::Phi, UpdateStep::SigmaB, UpdateStep::W].repeat(3));
    }

    #[test]
    fn chains_are_deterministic() {
        let mut ds = flat_dataset(20, 3);
        let mut rng = stream(48, 0);
        for i in 0..20 {
            ds.y[(i, 0)] = rng.random::<f64>();
        }
        let prior = PriorSpec::default_for(1, 1, 0.5, 0.5).unwrap();
        let cfg = McmcConfig { iterations: 200, burn_in: 100, m: 5, seed: 9, ..Default::default() };
        let a = run_chain(&ds, &prior, &cfg).unwrap();
        let b = run_chain(&ds, &prior, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.phi.iter().all(|&p| p > 0.0 && p < 0.5));
        assert!(a.sigma.iter().all(is_spd));
    }
}
