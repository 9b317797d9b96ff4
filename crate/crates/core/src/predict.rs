//! Posterior predictive sampling at new sites.
//!
//! For each stored draw `l`, with `R = W⁽ˡ⁾ − X B⁽ˡ⁾` on the observed rows,
//!
//! ```text
//! W*⁽ˡ⁾ = X* B⁽ˡ⁾ − Q_uu⁻¹ Q_un R + L_uu⁻ᵀ Z L_Σᵀ
//! ```
//!
//! where `Q = UᵀU` is the precision of the joint observed-then-prediction
//! Vecchia factor at `φ⁽ˡ⁾`. Responses are then drawn entrywise.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::families::FamilySpec;
use crate::geometry::{joint_prediction_ordering, JointOrdering, Ordering, SiteSet};
use crate::kernels::MaternParams;
use crate::linalg::{cholesky_lower, Matrix};
use crate::matrixvariate::standard_normal_matrix;
use crate::mcmc::PosteriorChain;
use crate::rng::stream;
use crate::stats::{mean, quantile_sorted};
use crate::vecchia::{build_factor_from_geometry, prediction_blocks, NeighborGeometry, PredictionBlocks};

/// Prediction sites with their covariates and optional per-site trial counts.
#[derive(Debug, Clone)]
pub struct PredictionTarget {
    pub sites: SiteSet,
    /// `X*`, u×p.
    pub x: Matrix,
    pub families: Vec<FamilySpec>,
    pub trials: Vec<Option<Vec<u32>>>,
}

impl PredictionTarget {
    pub fn new(sites: SiteSet, x: Matrix, families: Vec<FamilySpec>) -> Self {
        let q = families.len();
        PredictionTarget { sites, x, families, trials: vec![None; q] }
    }

    pub fn family_at(&self, i: usize, j: usize) -> FamilySpec {
        match &self.trials[j] {
            Some(t) => self.families[j].with_trials(t[i]),
            None => self.families[j],
        }
    }
}

/// Joint geometry of observed and prediction sites; builds precision blocks
/// for any φ.
#[derive(Debug, Clone)]
pub struct PredictionGeometry {
    pub joint: JointOrdering,
    geom: NeighborGeometry,
    obs_order: Ordering,
    pred_order: Ordering,
}

impl PredictionGeometry {
    pub fn new(observed: &SiteSet, prediction: &SiteSet, m: usize) -> Result<Self> {
        let total = observed.len() + prediction.len();
        let joint = joint_prediction_ordering(observed, Some(prediction), m.min(total.saturating_sub(1)).max(1))?;
        let geom = NeighborGeometry::new(&joint.sites, &joint.ordering, &joint.csets)?;
        let obs_order = Ordering { perm: joint.observed_perm().to_vec() };
        let pred_order = Ordering { perm: joint.prediction_perm() };
        Ok(PredictionGeometry { joint, geom, obs_order, pred_order })
    }

    pub fn n(&self) -> usize {
        self.joint.n_observed
    }

    pub fn u(&self) -> usize {
        self.joint.n_prediction
    }

    pub fn blocks(&self, params: MaternParams, jitter: f64) -> Result<PredictionBlocks> {
        let f = build_factor_from_geometry(&self.geom, params, jitter)?;
        prediction_blocks(&f, self.n(), self.u())
    }
}

/// Predictive draws, rows in the prediction-site input order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub w_star: Vec<Matrix>,
    pub y_star: Vec<Matrix>,
}

impl PredictiveDraws {
    pub fn len(&self) -> usize {
        self.w_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_star.is_empty()
    }

    pub fn u(&self) -> usize {
        self.w_star.first().map_or(0, |m| m.nrows())
    }

    pub fn q(&self) -> usize {
        self.w_star.first().map_or(0, |m| m.ncols())
    }

    /// Draws of entry `(i, j)` on the response scale.
    pub fn y_entry(&self, i: usize, j: usize) -> Vec<f64> {
        self.y_star.iter().map(|m| m[(i, j)]).collect()
    }

    pub fn w_entry(&self, i: usize, j: usize) -> Vec<f64> {
        self.w_star.iter().map(|m| m[(i, j)]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub seed: u64,
    pub jitter: f64,
    /// Add the `Q_uu⁻¹` noise term; off gives the kriging mean.
    pub noise: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { seed: 1, jitter: 1e-8, noise: true }
    }
}

/// Draw `W*` and `Y*` for every stored chain draw. Observed covariates `x`
/// are in the dataset's original site order, as are the chain's `W` draws.
///
/// Blocks are built once per distinct `φ`; draw `l` uses generator stream `l`.
pub fn sample_predictive(
    chain: &PosteriorChain,
    geometry: &PredictionGeometry,
    x: &Matrix,
    target: &PredictionTarget,
    opts: &PredictOptions,
) -> Result<PredictiveDraws> {
    let ws = chain.w.as_ref().ok_or_else(|| {
        Error::Config("chain has no stored W draws; refit with store_w enabled to predict".into())
    })?;
    let (n, u, p, q) = (geometry.n(), geometry.u(), chain.p, chain.q);
    if x.shape() != (n, p) || target.x.shape() != (u, p) || target.families.len() != q || chain.n != n {
        return Err(Error::Dimension(format!(
            "prediction inputs do not match the chain: n = {n}, u = {u}, p = {p}, q = {q}"
        )));
    }
    let x_obs = geometry.obs_order.apply_rows(x);
    let x_pred = geometry.pred_order.apply_rows(&target.x);

    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (l, phi) in chain.phi.iter().enumerate() {
        groups.entry(phi.to_bits()).or_default().push(l);
    }
    let groups: Vec<(f64, Vec<usize>)> = groups.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();

    let per_group: Vec<Vec<(usize, Matrix, Matrix)>> = groups
        .par_iter()
        .map(|(phi, idx)| {
            let blocks = geometry.blocks(MaternParams::new(*phi, chain.nu)?, opts.jitter)?;
            idx.iter()
                .map(|&l| {
                    let mut rng = stream(opts.seed, l as u64);
                    let b = &chain.b[l];
                    let resid = geometry.obs_order.apply_rows(&ws[l]) - &x_obs * b;
                    let mut w = &x_pred * b + blocks.kriging_offset(&resid)?;
                    if opts.noise {
                        let z = standard_normal_matrix(u, q, &mut rng);
                        let lsig = cholesky_lower(&chain.sigma[l], "Sigma draw")?;
                        w += blocks.noise(&z, &lsig)?;
                    }
                    let w = geometry.pred_order.unapply_rows(&w);
                    let mut y = Matrix::zeros(u, q);
                    for j in 0..q {
                        for i in 0..u {
                            y[(i, j)] = target.family_at(i, j).sample_response(w[(i, j)], &mut rng)?;
                        }
                    }
                    Ok((l, w, y))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut slots: Vec<Option<(Matrix, Matrix)>> = vec![None; chain.len()];
    for (l, w, y) in per_group.into_iter().flatten() {
        slots[l] = Some((w, y));
    }
    let (w_star, y_star) = slots.into_iter().map(|s| s.expect("every draw assigned")).unzip();
    Ok(PredictiveDraws { w_star, y_star })
}

/// Summary of one predictive margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginSummary {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl MarginSummary {
    pub fn from_draws(draws: &[f64], level: f64) -> Self {
        let mut s = draws.to_vec();
        s.sort_by(f64::total_cmp);
        let a = (1.0 - level) / 2.0;
        MarginSummary {
            mean: mean(&s),
            median: quantile_sorted(&s, 0.5),
            lower: quantile_sorted(&s, a),
            upper: quantile_sorted(&s, 1.0 - a),
        }
    }

    pub fn covers(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

/// Per-site, per-response summaries of the response draws, `[site][response]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictiveSummary {
    pub level: f64,
    pub y: Vec<Vec<MarginSummary>>,
    pub w: Vec<Vec<MarginSummary>>,
}

/// Equal-tailed intervals at `level`.
pub fn predictive_summary(draws: &PredictiveDraws, level: f64) -> Result<PredictiveSummary> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("interval level must lie in (0,1), got {level}")));
    }
    if draws.len() < 2 {
        return Err(Error::Config(format!("need at least 2 predictive draws, got {}", draws.len())));
    }
    let (u, q) = (draws.u(), draws.q());
    let table = |f: &dyn Fn(usize, usize) -> Vec<f64>| -> Vec<Vec<MarginSummary>> {
        (0..u).map(|i| (0..q).map(|j| MarginSummary::from_draws(&f(i, j), level)).collect()).collect()
    };
    Ok(PredictiveSummary {
        level,
        y: table(&|i, j| draws.y_entry(i, j)),
        w: table(&|i, j| draws.w_entry(i, j)),
    })
}
