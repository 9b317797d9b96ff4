use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mixspat::data::SpatialDataset;
use mixspat::evaluate::{waic, HoldoutReport, WaicReport};
use mixspat::io::{
    chain_summary, load_dataset, load_prediction_sites, read_chain, write_chain, write_dataset, write_json, write_predictive,
    Provenance, RunConfig,
};
use mixspat::mcmc::PosteriorChain;
use mixspat::predict::predictive_summary;
use mixspat::simulate::{simulate_dataset, SimulationScenario};
use mixspat::study::{config_for_scenario, fit, fit_separate, merge_draws, predict_at, replicate_study};
use mixspat::{Error, Result};

#[derive(Parser)]
#[command(name = "mixspat", version, about = "Joint spatial models for mixed-type responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured number of chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pair {
    GaussianPoisson,
    GaussianBernoulli,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario file (TOML); overrides the flags below.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    phi: f64,
    #[arg(long, value_enum, default_value_t = Pair::GaussianPoisson)]
    pair: Pair,
    /// Use a diagonal cross-covariance.
    #[arg(long)]
    independent: bool,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate replicated datasets on the unit square.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Fit the joint model and write chain.bin and summary.json.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (overrides data.path).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also fit one single-response model per response.
        #[arg(long)]
        separate: bool,
    },
    /// Draw from the posterior predictive at new sites.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Chain file written by `fit`.
        #[arg(long)]
        chain: PathBuf,
        /// CSV with coordinates and covariates of the prediction sites.
        #[arg(long)]
        sites: PathBuf,
    },
    /// WAIC on the training data and, with --holdout, ELPD and coverage.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory written by `fit`.
        #[arg(long)]
        fit_dir: PathBuf,
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Replicated joint versus separate comparison on simulated data.
    ReplicateStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Skip the separate-model fits.
        #[arg(long)]
        joint_only: bool,
    },
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    kind: &'a str,
    message: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&ErrorJson { kind: "usage", message: e.to_string().trim().to_string() });
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&ErrorJson { kind: e.kind(), message: e.to_string() });
            ExitCode::FAILURE
        }
    }
}

fn report(e: &ErrorJson) {
    eprintln!("{}", serde_json::to_string(e).unwrap_or_else(|_| format!("{{\"kind\":\"{}\"}}", e.kind)));
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { common, scenario } => simulate(&common, &scenario),
        Command::Fit { common, data, separate } => fit_cmd(&common, data, separate),
        Command::Predict { common, data, chain, sites } => predict_cmd(&common, data, &chain, &sites),
        Command::Evaluate { common, data, fit_dir, holdout } => evaluate_cmd(&common, data, &fit_dir, holdout),
        Command::ReplicateStudy { common, scenario, joint_only } => study_cmd(&common, &scenario, !joint_only),
    }
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = &cfg.data.path {
        if Path::new(d).is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.data.path = Some(base.join(d).to_string_lossy().into_owned());
        }
    }
    apply_overrides(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = common.chains {
        cfg.chains = c;
    }
}

fn training_data(cfg: &RunConfig, data: Option<PathBuf>) -> Result<SpatialDataset> {
    let path = data
        .or_else(|| cfg.data.path.clone().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.path".into()))?;
    load_dataset(path, cfg)
}

fn provenance(cfg: &RunConfig) -> Result<Provenance> {
    Ok(Provenance { config_hash: cfg.hash()?, seed: cfg.seed })
}

fn scenario(args: &ScenarioArgs, common: &Common) -> Result<SimulationScenario> {
    let mut scn = match &args.scenario {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => {
            let seed = common.seed.unwrap_or(1);
            let mut s = match args.pair {
                Pair::GaussianPoisson => SimulationScenario::gaussian_poisson(args.n, args.phi, !args.independent, seed),
                Pair::GaussianBernoulli => SimulationScenario::gaussian_bernoulli(args.n, args.phi, !args.independent, seed),
            };
            s.replicates = args.replicates;
            s
        }
    };
    if let (Some(_), Some(seed)) = (&args.scenario, common.seed) {
        scn.seed = seed;
    }
    scn.validate()?;
    Ok(scn)
}

fn simulate(common: &Common, args: &ScenarioArgs) -> Result<()> {
    let scn = scenario(args, common)?;
    let dir = out_dir(common, None)?;
    for r in 0..scn.replicates {
        let sim = simulate_dataset(&scn, r as u64)?;
        let rdir = dir.join(format!("replicate_{r:03}"));
        fs::create_dir_all(&rdir)?;
        write_dataset(rdir.join("full.csv"), &sim.full)?;
        write_dataset(rdir.join("train.csv"), &sim.train)?;
        write_dataset(rdir.join("holdout.csv"), &sim.holdout)?;
    }
    let mut cfg = config_for_scenario(&scn);
    cfg.data.path = Some("replicate_000/train.csv".into());
    mixspat::io::atomic_write(dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    mixspat::io::atomic_write(
        dir.join("scenario.toml"),
        toml::to_string(&scn).map_err(|e| Error::Format(e.to_string()))?.as_bytes(),
    )?;
    Ok(())
}

fn write_fit(dir: &Path, stem: &str, chain: &PosteriorChain, cfg: &RunConfig) -> Result<()> {
    let prov = provenance(cfg)?;
    write_chain(dir.join(format!("{stem}.bin")), chain, &prov)?;
    let summary = chain_summary(chain, &prov, cfg.predict.level)?;
    write_json(dir.join(format!("{}.json", stem.replace("chain", "summary"))), &summary)
}

fn fit_cmd(common: &Common, data: Option<PathBuf>, separate: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = training_data(&cfg, data)?;
    let dir = out_dir(common, Some(&cfg))?;
    let prior = cfg.prior_for(&ds)?;
    let chain = fit(&ds, &prior, &cfg)?;
    write_fit(&dir, "chain", &chain, &cfg)?;
    if separate {
        for (j, c) in fit_separate(&ds, &cfg)?.iter().enumerate() {
            write_fit(&dir, &format!("chain_separate_{j}"), c, &cfg)?;
        }
    }
    Ok(())
}

fn predict_cmd(common: &Common, data: Option<PathBuf>, chain_path: &Path, sites: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = training_data(&cfg, data)?;
    let target = load_prediction_sites(sites, &cfg)?;
    let (chain, _) = read_chain(chain_path)?;
    let dir = out_dir(common, Some(&cfg))?;
    let (_, draws) = predict_at(&chain, &ds, &target, &cfg)?;
    let prov = provenance(&cfg)?;
    write_predictive(dir.join("predictive.csv"), &draws, &prov)?;
    write_json(dir.join("predictive_summary.json"), &predictive_summary(&draws, cfg.predict.level)?)
}

#[derive(Serialize)]
struct ModelMetrics {
    waic: WaicSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout: Option<HoldoutSummary>,
}

#[derive(Serialize)]
struct WaicSummary {
    waic: f64,
    lppd: f64,
    p_waic: f64,
}

impl From<&WaicReport> for WaicSummary {
    fn from(r: &WaicReport) -> Self {
        WaicSummary { waic: r.waic, lppd: r.lppd, p_waic: r.p_waic }
    }
}

#[derive(Serialize)]
struct HoldoutSummary {
    elpd: f64,
    elpd_se: f64,
    coverage: f64,
    coverage_se: f64,
    level: f64,
    entries: usize,
}

impl From<&HoldoutReport> for HoldoutSummary {
    fn from(r: &HoldoutReport) -> Self {
        HoldoutSummary {
            elpd: r.elpd,
            elpd_se: r.elpd_se,
            coverage: r.coverage,
            coverage_se: r.coverage_se,
            level: r.level,
            entries: r.entries,
        }
    }
}

#[derive(Serialize)]
struct MetricReport {
    config_hash: String,
    seed: u64,
    joint: ModelMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    separate: Option<ModelMetrics>,
}

fn holdout_metrics(
    chains: &[(PosteriorChain, SpatialDataset)],
    holdout: &SpatialDataset,
    cfg: &RunConfig,
) -> Result<HoldoutSummary> {
    let parts = chains
        .iter()
        .map(|(c, d)| {
            let js: Vec<usize> = (0..holdout.q()).filter(|&j| d.response_names.contains(&holdout.response_names[j])).collect();
            predict_at(c, d, &holdout.select_responses(&js), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = if parts.len() == 1 {
        parts[0].1.clone()
    } else {
        merge_draws(&parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?
    };
    let target = mixspat::predict::PredictionTarget {
        sites: holdout.sites.clone(),
        x: holdout.x.clone(),
        families: holdout.families.clone(),
        trials: holdout.trials.clone(),
    };
    Ok((&mixspat::evaluate::elpd_and_coverage(&draws, &holdout.y, &target, cfg.predict.level)?).into())
}

fn model_metrics(chains: &[(PosteriorChain, SpatialDataset)], holdout: Option<&SpatialDataset>, cfg: &RunConfig) -> Result<ModelMetrics> {
    let reports = chains.iter().map(|(c, d)| waic(c, d)).collect::<Result<Vec<_>>>()?;
    let total = WaicSummary {
        waic: reports.iter().map(|r| r.waic).sum(),
        lppd: reports.iter().map(|r| r.lppd).sum(),
        p_waic: reports.iter().map(|r| r.p_waic).sum(),
    };
    let holdout = holdout.map(|h| holdout_metrics(chains, h, cfg)).transpose()?;
    Ok(ModelMetrics { waic: if reports.len() == 1 { (&reports[0]).into() } else { total }, holdout })
}

fn evaluate_cmd(common: &Common, data: Option<PathBuf>, fit_dir: &Path, holdout: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = training_data(&cfg, data)?;
    let holdout = holdout.map(|p| load_prediction_sites(p, &cfg)).transpose()?;
    let (joint, _) = read_chain(fit_dir.join("chain.bin"))?;
    let joint = model_metrics(&[(joint, ds.clone())], holdout.as_ref(), &cfg)?;
    let sep_paths: Vec<PathBuf> = (0..ds.q()).map(|j| fit_dir.join(format!("chain_separate_{j}.bin"))).collect();
    let separate = if sep_paths.iter().all(|p| p.exists()) {
        let chains = sep_paths
            .iter()
            .enumerate()
            .map(|(j, p)| Ok((read_chain(p)?.0, ds.select_responses(&[j]))))
            .collect::<Result<Vec<_>>>()?;
        Some(model_metrics(&chains, holdout.as_ref(), &cfg)?)
    } else {
        None
    };
    let dir = out_dir(common, Some(&cfg))?;
    write_json(dir.join("metrics.json"), &MetricReport { config_hash: cfg.hash()?, seed: cfg.seed, joint, separate })
}

fn study_cmd(common: &Common, args: &ScenarioArgs, separate: bool) -> Result<()> {
    let scn = scenario(args, common)?;
    let mut cfg = match &common.config {
        Some(_) => {
            let mut c = load_config(common)?;
            c.model.nu = scn.nu;
            c
        }
        None => {
            let mut c = config_for_scenario(&scn);
            apply_overrides(&mut c, common);
            c
        }
    };
    if common.seed.is_none() {
        cfg.seed = scn.seed;
    }
    let report = replicate_study(&scn, &cfg, separate)?;
    let dir = out_dir(common, Some(&cfg))?;
    write_json(dir.join("study.json"), &report)?;
    mixspat::io::atomic_write(dir.join("study.csv"), study_table(&report)?.as_bytes())
}

/// Plot-ready aggregate: one row per model and metric with mean and SE.
fn study_table(r: &mixspat::study::StudyReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "metric", "mean", "se"])?;
    let mut models = vec![("joint", &r.joint)];
    if let Some(s) = &r.separate {
        models.push(("separate", s));
    }
    for (name, agg) in models {
        for (metric, v) in [("waic", Some(agg.waic)), ("elpd", agg.elpd), ("coverage", agg.coverage)] {
            if let Some(v) = v {
                w.write_record([name, metric, &v.mean.to_string(), &v.se.to_string()])?;
            }
        }
    }
    for (metric, v) in [
        ("sigma12_mean", r.sigma12_mean),
        ("sigma12_lower", r.sigma12_lower),
        ("sigma12_upper", r.sigma12_upper),
        ("sigma12_coverage", r.sigma12_coverage),
    ] {
        if let Some(v) = v {
            w.write_record(["joint", metric, &v.mean.to_string(), &v.se.to_string()])?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}
