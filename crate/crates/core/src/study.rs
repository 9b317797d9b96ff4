//! Fit, predict and score pipelines shared by the command line and the
//! replicated comparisons of joint and separate models.
//!
//! The separate model is the joint code path run once per response with
//! `q = 1`.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::evaluate::{elpd_and_coverage, waic, HoldoutReport};
use crate::io::RunConfig;
use crate::linalg::Matrix;
use crate::mcmc::{run_chains, PosteriorChain, PriorSpec};
use crate::predict::{sample_predictive, MarginSummary, PredictOptions, PredictionGeometry, PredictionTarget, PredictiveDraws};
use crate::rng::child_seed;
use crate::simulate::{simulate_dataset, SimulatedData, SimulationScenario};
use crate::stats::{mean, variance};

/// Joint prior restricted to response `j`: column `j` of `M`, `S_jj`, and
/// `v − (q − 1)` degrees of freedom (2 by default).
pub fn separate_prior(cfg: &RunConfig, ds_j: &SpatialDataset, joint: &PriorSpec, j: usize) -> Result<PriorSpec> {
    let dof = cfg.prior.dof.map_or(2.0, |v| v - (joint.q() as f64 - 1.0));
    PriorSpec::new(
        joint.mean.columns(j, 1).into_owned(),
        joint.row_cov.clone(),
        Matrix::from_element(1, 1, joint.scale[(j, j)]),
        dof,
        joint.b_phi,
        joint.nu,
    )
    .map_err(|e| Error::Config(format!("separate prior for `{}`: {e}", ds_j.response_names[0])))
}

/// Run `cfg.chains` chains and concatenate them.
pub fn fit(ds: &SpatialDataset, prior: &PriorSpec, cfg: &RunConfig) -> Result<PosteriorChain> {
    PosteriorChain::concat(&run_chains(ds, prior, &cfg.mcmc_config(0), cfg.chains)?)
}

/// One fit per response.
pub fn fit_separate(ds: &SpatialDataset, cfg: &RunConfig) -> Result<Vec<PosteriorChain>> {
    let joint = cfg.prior_for(ds)?;
    (0..ds.q())
        .into_par_iter()
        .map(|j| {
            let dj = ds.select_responses(&[j]);
            let prior = separate_prior(cfg, &dj, &joint, j)?;
            let mut c = cfg.clone();
            c.seed = child_seed(cfg.seed, 1000 + j as u64);
            fit(&dj, &prior, &c)
        })
        .collect()
}

/// Predict at the sites of `target_ds` (its responses are ignored).
pub fn predict_at(
    chain: &PosteriorChain,
    train: &SpatialDataset,
    target_ds: &SpatialDataset,
    cfg: &RunConfig,
) -> Result<(PredictionTarget, PredictiveDraws)> {
    let geom = PredictionGeometry::new(&train.sites, &target_ds.sites, cfg.model.m)?;
    let target = PredictionTarget {
        sites: target_ds.sites.clone(),
        x: target_ds.x.clone(),
        families: target_ds.families.clone(),
        trials: target_ds.trials.clone(),
    };
    let opts = PredictOptions { seed: child_seed(cfg.seed, 2), jitter: cfg.model.jitter, noise: true };
    let draws = sample_predictive(chain, &geom, &train.x, &target, &opts)?;
    Ok((target, draws))
}

/// Column-wise merge of per-response predictive draws, pairing draw `l`.
pub fn merge_draws(parts: &[PredictiveDraws]) -> Result<PredictiveDraws> {
    let l = parts.iter().map(PredictiveDraws::len).min().unwrap_or(0);
    if parts.iter().any(|p| p.len() != l) {
        return Err(Error::Dimension("separate fits stored different draw counts".into()));
    }
    let cat = |f: &dyn Fn(&PredictiveDraws) -> &Vec<Matrix>, k: usize| {
        let cols: Vec<&Matrix> = parts.iter().map(|p| &f(p)[k]).collect();
        let u = cols[0].nrows();
        Matrix::from_fn(u, cols.len(), |i, j| cols[j][(i, 0)])
    };
    Ok(PredictiveDraws {
        w_star: (0..l).map(|k| cat(&|p| &p.w_star, k)).collect(),
        y_star: (0..l).map(|k| cat(&|p| &p.y_star, k)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScores {
    pub waic: f64,
    pub holdout: Option<HoldoutReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub replicate: u64,
    pub joint: ModelScores,
    pub separate: Option<ModelScores>,
    /// Posterior summary of `Σ_12` in the joint fit, when `q ≥ 2`.
    pub sigma12: Option<MarginSummary>,
    pub sigma12_true: Option<f64>,
}

fn score(chains: &[PosteriorChain], train: &[SpatialDataset], holdout: &SpatialDataset, cfg: &RunConfig) -> Result<ModelScores> {
    let w: f64 = chains.iter().zip(train).map(|(c, d)| waic(c, d).map(|r| r.waic)).sum::<Result<f64>>()?;
    let holdout_rep = if holdout.n() > 0 {
        let parts: Vec<(PredictionTarget, PredictiveDraws)> =
            chains.iter().zip(train).map(|(c, d)| {
                let js: Vec<usize> = if d.q() == holdout.q() {
                    (0..d.q()).collect()
                } else {
                    (0..holdout.q()).filter(|&j| holdout.response_names[j] == d.response_names[0]).collect()
                };
                predict_at(c, d, &holdout.select_responses(&js), cfg)
            }).collect::<Result<_>>()?;
        let draws = if parts.len() == 1 {
            parts[0].1.clone()
        } else {
            merge_draws(&parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?
        };
        let target = PredictionTarget {
            sites: holdout.sites.clone(),
            x: holdout.x.clone(),
            families: holdout.families.clone(),
            trials: holdout.trials.clone(),
        };
        Some(elpd_and_coverage(&draws, &holdout.y, &target, cfg.predict.level)?)
    } else {
        None
    };
    Ok(ModelScores { waic: w, holdout: holdout_rep })
}

/// Fit joint (and optionally separate) models on a simulated replicate and
/// score them.
pub fn run_replicate(sim: &SimulatedData, scn: &SimulationScenario, cfg: &RunConfig, replicate: u64, separate: bool) -> Result<ReplicateResult> {
    let mut c = cfg.clone();
    c.seed = child_seed(cfg.seed, replicate);
    let prior = c.prior_for(&sim.train)?;
    let joint = fit(&sim.train, &prior, &c)?;
    let joint_scores = score(std::slice::from_ref(&joint), std::slice::from_ref(&sim.train), &sim.holdout, &c)?;
    let sep = if separate {
        let chains = fit_separate(&sim.train, &c)?;
        let trains: Vec<SpatialDataset> = (0..sim.train.q()).map(|j| sim.train.select_responses(&[j])).collect();
        Some(score(&chains, &trains, &sim.holdout, &c)?)
    } else {
        None
    };
    let (sigma12, sigma12_true) = if joint.q >= 2 {
        let d: Vec<f64> = joint.sigma.iter().map(|s| s[(0, 1)]).collect();
        (Some(MarginSummary::from_draws(&d, c.predict.level)), scn.sigma.first().and_then(|r| r.get(1)).copied())
    } else {
        (None, None)
    };
    Ok(ReplicateResult { replicate, joint: joint_scores, separate: sep, sigma12, sigma12_true })
}

/// Mean and standard error across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        MeanSe { mean: mean(xs), se: (variance(xs) / xs.len() as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelAggregate {
    pub waic: MeanSe,
    pub elpd: Option<MeanSe>,
    pub coverage: Option<MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub scenario: SimulationScenario,
    pub replicates: Vec<ReplicateResult>,
    pub joint: ModelAggregate,
    pub separate: Option<ModelAggregate>,
    pub sigma12_mean: Option<MeanSe>,
    pub sigma12_lower: Option<MeanSe>,
    pub sigma12_upper: Option<MeanSe>,
    pub sigma12_coverage: Option<MeanSe>,
    /// Fraction of replicates where the joint WAIC is below the separate one.
    pub joint_waic_wins: Option<f64>,
}

fn aggregate(scores: &[&ModelScores]) -> ModelAggregate {
    let w: Vec<f64> = scores.iter().map(|s| s.waic).collect();
    let h: Vec<&HoldoutReport> = scores.iter().filter_map(|s| s.holdout.as_ref()).collect();
    ModelAggregate {
        waic: MeanSe::of(&w),
        elpd: (!h.is_empty()).then(|| MeanSe::of(&h.iter().map(|r| r.elpd).collect::<Vec<_>>())),
        coverage: (!h.is_empty()).then(|| MeanSe::of(&h.iter().map(|r| r.coverage).collect::<Vec<_>>())),
    }
}

/// Replicated joint-versus-separate study. Replicates run in parallel.
pub fn replicate_study(scn: &SimulationScenario, cfg: &RunConfig, separate: bool) -> Result<StudyReport> {
    let reps: Vec<ReplicateResult> = (0..scn.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let sim = simulate_dataset(scn, r)?;
            run_replicate(&sim, scn, cfg, r, separate)
        })
        .collect::<Result<_>>()?;
    if reps.is_empty() {
        return Err(Error::Config("replicate study needs at least one replicate".into()));
    }
    let joint = aggregate(&reps.iter().map(|r| &r.joint).collect::<Vec<_>>());
    let sep_scores: Vec<&ModelScores> = reps.iter().filter_map(|r| r.separate.as_ref()).collect();
    let separate_agg = (!sep_scores.is_empty()).then(|| aggregate(&sep_scores));
    let s12: Vec<(MarginSummary, f64)> = reps.iter().filter_map(|r| Some((r.sigma12?, r.sigma12_true?))).collect();
    let pick = |f: &dyn Fn(&(MarginSummary, f64)) -> f64| (!s12.is_empty()).then(|| MeanSe::of(&s12.iter().map(f).collect::<Vec<_>>()));
    let wins = (!sep_scores.is_empty()).then(|| {
        reps.iter().filter(|r| r.separate.as_ref().is_some_and(|s| r.joint.waic < s.waic)).count() as f64 / reps.len() as f64
    });
    Ok(StudyReport {
        scenario: scn.clone(),
        joint,
        separate: separate_agg,
        sigma12_mean: pick(&|(m, _)| m.mean),
        sigma12_lower: pick(&|(m, _)| m.lower),
        sigma12_upper: pick(&|(m, _)| m.upper),
        sigma12_coverage: pick(&|(m, t)| f64::from(u8::from(m.covers(*t)))),
        joint_waic_wins: wins,
        replicates: reps,
    })
}

/// Configuration matching a simulation scenario's response families.
pub fn config_for_scenario(scn: &SimulationScenario) -> RunConfig {
    use crate::io::ResponseConfig;
    let mut cfg = RunConfig::for_responses(
        scn.families
            .iter()
            .enumerate()
            .map(|(j, f)| ResponseConfig {
                name: format!("y{}", j + 1),
                family: f.kind,
                psi: f.psi,
                trials: f.trials,
                trials_column: None,
            })
            .collect(),
    );
    cfg.data.covariates = Some(vec!["x_lon".into(), "x_lat".into()]);
    cfg.model.nu = scn.nu;
    cfg.seed = scn.seed;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_study_has_se_columns() {
        let mut scn = SimulationScenario::gaussian_poisson(50, 0.1, true, 11);
        scn.replicates = 2;
        let mut cfg = config_for_scenario(&scn);
        cfg.mcmc.iterations = 60;
        cfg.mcmc.burn_in = 30;
        cfg.model.m = 5;
        let r = replicate_study(&scn, &cfg, true).unwrap();
        assert_eq!(r.replicates.len(), 2);
        assert!(r.joint.waic.se >= 0.0);
        assert!(r.separate.as_ref().unwrap().elpd.unwrap().se >= 0.0);
        let c = r.joint.coverage.unwrap().mean;
        assert!((0.0..=1.0).contains(&c));
        assert!(r.sigma12_mean.is_some());
    }

    #[test]
    fn merge_pairs_draws() {
        let a = PredictiveDraws { w_star: vec![Matrix::from_element(2, 1, 1.0)], y_star: vec![Matrix::from_element(2, 1, 2.0)] };
        let b = PredictiveDraws { w_star: vec![Matrix::from_element(2, 1, 3.0)], y_star: vec![Matrix::from_element(2, 1, 4.0)] };
        let m = merge_draws(&[a, b]).unwrap();
        assert_eq!(m.w_star[0], Matrix::from_row_slice(2, 2, &[1.0, 3.0, 1.0, 3.0]));
    }
}
