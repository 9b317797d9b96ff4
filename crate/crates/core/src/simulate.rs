//! Synthetic datasets on the unit square.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::evaluate::holdout_split;
use crate::families::FamilySpec;
use crate::geometry::{build_conditioning_sets, maxmin_order, SiteSet};
use crate::kernels::{correlation_matrix, MaternParams};
use crate::linalg::{cholesky_lower, is_spd, Matrix};
use crate::matrixvariate::standard_normal_matrix;
use crate::rng::{child_seed, stream};
use crate::vecchia::{build_factor, sample_latent_prior};

/// Largest `n` simulated with an exact dense Cholesky.
pub const DENSE_SIM_LIMIT: usize = 3000;
/// Neighbour count for Vecchia simulation beyond [`DENSE_SIM_LIMIT`].
pub const SIM_VECCHIA_M: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    pub n: usize,
    pub holdout_fraction: f64,
    pub families: Vec<FamilySpec>,
    /// `B⁰` rows, p×q with p = 3 for `[1, lon, lat]`.
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub phi: f64,
    pub nu: f64,
    pub seed: u64,
    pub replicates: usize,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} rows have unequal lengths")));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl SimulationScenario {
    /// Two-response design on `[0,1]²` with `X = [1, lon, lat]` and
    /// `B⁰ = [[1.0, −0.5], [3, 1.5], [−1.2, 0]]`.
    pub fn bivariate(families: [FamilySpec; 2], n: usize, phi: f64, dependent: bool, seed: u64) -> Self {
        SimulationScenario {
            n,
            holdout_fraction: 0.2,
            families: families.to_vec(),
            b: vec![vec![1.0, -0.5], vec![3.0, 1.5], vec![-1.2, 0.0]],
            sigma: if dependent {
                vec![vec![2.0, 1.0], vec![1.0, 1.0]]
            } else {
                vec![vec![2.0, 0.0], vec![0.0, 1.0]]
            },
            phi,
            nu: 0.5,
            seed,
            replicates: 1,
        }
    }

    pub fn gaussian_poisson(n: usize, phi: f64, dependent: bool, seed: u64) -> Self {
        Self::bivariate([FamilySpec::gaussian(1.0), FamilySpec::poisson()], n, phi, dependent, seed)
    }

    pub fn gaussian_bernoulli(n: usize, phi: f64, dependent: bool, seed: u64) -> Self {
        Self::bivariate([FamilySpec::gaussian(1.0), FamilySpec::bernoulli()], n, phi, dependent, seed)
    }

    pub fn b_matrix(&self) -> Result<Matrix> {
        rows_to_matrix(&self.b, "B")
    }

    pub fn sigma_matrix(&self) -> Result<Matrix> {
        rows_to_matrix(&self.sigma, "Sigma")
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.families.len();
        let b = self.b_matrix()?;
        let s = self.sigma_matrix()?;
        if b.shape() != (3, q) {
            return Err(Error::Config(format!("B must be 3×{q}, got {}×{}", b.nrows(), b.ncols())));
        }
        if s.shape() != (q, q) || !is_spd(&s) {
            return Err(Error::Config("Sigma must be a q×q positive definite matrix".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout fraction must lie in [0,1), got {}", self.holdout_fraction)));
        }
        if self.n < 2 {
            return Err(Error::Config("need at least 2 sites".into()));
        }
        MaternParams::new(self.phi, self.nu)?;
        Ok(())
    }
}

/// A simulated replicate.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub full: SpatialDataset,
    pub train: SpatialDataset,
    pub holdout: SpatialDataset,
    pub train_idx: Vec<usize>,
    pub holdout_idx: Vec<usize>,
    /// True latent field over all `n` sites, in site order.
    pub w: Matrix,
}

/// Draw one replicate. Replicate `r` uses streams derived from
/// `child_seed(seed, r)`.
pub fn simulate_dataset(scn: &SimulationScenario, replicate: u64) -> Result<SimulatedData> {
    scn.validate()?;
    let seed = child_seed(scn.seed, replicate);
    let mut rng = stream(seed, 0);
    let n = scn.n;
    let q = scn.families.len();
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let sites = SiteSet::from_points(&pts)?;
    let x = Matrix::from_fn(n, 3, |i, c| if c == 0 { 1.0 } else { pts[i][c - 1] });
    let b = scn.b_matrix()?;
    let lsig = cholesky_lower(&scn.sigma_matrix()?, "Sigma")?;
    let params = MaternParams::new(scn.phi, scn.nu)?;
    let mean = &x * &b;
    let w = if n <= DENSE_SIM_LIMIT {
        let mut k = correlation_matrix(&sites, params);
        for i in 0..n {
            k[(i, i)] += 1e-10;
        }
        let lk = cholesky_lower(&k, "simulation correlation matrix")?;
        &mean + lk * standard_normal_matrix(n, q, &mut rng) * lsig.transpose()
    } else {
        let o = maxmin_order(&sites);
        let cs = build_conditioning_sets(&sites, &o, SIM_VECCHIA_M.min(n - 1))?;
        let f = build_factor(&sites, &o, &cs, params, 1e-8)?;
        let w_ord = sample_latent_prior(&f, &o.apply_rows(&mean), &lsig, &mut rng)?;
        o.unapply_rows(&w_ord)
    };
    let mut y = Matrix::zeros(n, q);
    for j in 0..q {
        for i in 0..n {
            y[(i, j)] = scn.families[j].sample_response(w[(i, j)], &mut rng)?;
        }
    }
    let full = SpatialDataset::new(
        sites,
        x,
        vec!["intercept".into(), "x_lon".into(), "x_lat".into()],
        y,
        (0..q).map(|j| format!("y{}", j + 1)).collect(),
        scn.families.clone(),
        vec![None; q],
    )?;
    let (train_idx, holdout_idx) = holdout_split(n, scn.holdout_fraction, child_seed(seed, 1));
    Ok(SimulatedData {
        train: full.subset(&train_idx)?,
        holdout: full.subset(&holdout_idx)?,
        full,
        train_idx,
        holdout_idx,
        w,
    })
}

/// All replicates of a scenario, in parallel.
pub fn simulate_replicates(scn: &SimulationScenario) -> Result<Vec<SimulatedData>> {
    (0..scn.replicates as u64).into_par_iter().map(|r| simulate_dataset(scn, r)).collect()
}
