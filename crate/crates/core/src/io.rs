//! Run configuration, CSV ingestion and result files.
//!
//! Every file is written atomically (temporary file in the target directory,
//! then rename). Chain files are a fixed binary layout: the magic bytes
//! `MSCHAIN1`, a little-endian `u64` header length, a JSON header, then for
//! each draw `φ`, `B`, `Σ` and optionally `W` as little-endian `f64` in
//! column-major order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::families::{FamilyKind, FamilySpec};
use crate::geometry::SiteSet;
use crate::linalg::Matrix;
use crate::mcmc::{range_upper_bound, McmcConfig, PosteriorChain, PriorSpec};
use crate::predict::{MarginSummary, PredictiveDraws};

fn default_seed() -> u64 {
    1
}
fn default_chains() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_lon() -> String {
    "lon".into()
}
fn default_lat() -> String {
    "lat".into()
}
fn default_one() -> f64 {
    1.0
}
fn default_one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default = "default_lon")]
    pub lon: String,
    #[serde(default = "default_lat")]
    pub lat: String,
    /// Covariate columns; all remaining columns when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub responses: Vec<ResponseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseConfig {
    pub name: String,
    pub family: FamilyKind,
    /// Gaussian variance, Gamma shape or negative-binomial size.
    #[serde(default = "default_one")]
    pub psi: f64,
    #[serde(default = "default_one_u32")]
    pub trials: u32,
    /// Column holding per-site binomial trial counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials_column: Option<String>,
}

impl ResponseConfig {
    pub fn family(&self) -> Result<FamilySpec> {
        Ok(FamilySpec::new(self.family, self.psi)?.with_trials(self.trials))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub nu: f64,
    pub m: usize,
    pub jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { nu: 0.5, m: 10, jitter: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// `M` rows (p×q); zero when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<Vec<f64>>>,
    /// `V = v_scale · I` unless `v` is given.
    pub v_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<Vec<f64>>>,
    /// `S`; identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<Vec<f64>>>,
    /// Inverse-Wishart degrees of freedom; `q + 1` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dof: Option<f64>,
    /// Correlation at the domain diameter that fixes `b_φ`.
    pub cor_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_phi: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { mean: None, v_scale: 100.0, v: None, s: None, dof: None, cor_threshold: 0.05, b_phi: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal_sd: Option<f64>,
    pub adapt_window: usize,
    pub store_w: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fix_phi: Option<f64>,
}

impl Default for McmcSettings {
    fn default() -> Self {
        let d = McmcConfig::default();
        McmcSettings {
            iterations: d.iterations,
            burn_in: d.burn_in,
            thin: d.thin,
            proposal_sd: d.proposal_sd,
            adapt_window: d.adapt_window,
            store_w: d.store_w,
            fix_phi: d.fix_phi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub level: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Config(format!("prior {what} rows have unequal lengths")));
    }
    Ok(Matrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

impl RunConfig {
    /// Minimal configuration for the given responses.
    pub fn for_responses(responses: Vec<ResponseConfig>) -> Self {
        RunConfig {
            seed: 1,
            chains: 1,
            data: DataConfig {
                path: None,
                lon: default_lon(),
                lat: default_lat(),
                covariates: None,
                intercept: true,
                responses,
            },
            model: ModelConfig::default(),
            prior: PriorConfig::default(),
            mcmc: McmcSettings::default(),
            predict: PredictConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.responses.is_empty() {
            return Err(Error::Config("at least one response is required".into()));
        }
        for r in &self.data.responses {
            r.family()?;
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if !(self.predict.level > 0.0 && self.predict.level < 1.0) {
            return Err(Error::Config("predict.level must lie in (0,1)".into()));
        }
        self.mcmc_config(0).validate()
    }

    pub fn families(&self) -> Result<Vec<FamilySpec>> {
        self.data.responses.iter().map(ResponseConfig::family).collect()
    }

    pub fn mcmc_config(&self, chain: u64) -> McmcConfig {
        McmcConfig {
            iterations: self.mcmc.iterations,
            burn_in: self.mcmc.burn_in,
            thin: self.mcmc.thin,
            m: self.model.m,
            proposal_sd: self.mcmc.proposal_sd,
            adapt_window: self.mcmc.adapt_window,
            jitter: self.model.jitter,
            seed: self.seed,
            chain,
            store_w: self.mcmc.store_w,
            fix_phi: self.mcmc.fix_phi,
        }
    }

    /// Prior for a dataset; `b_φ` from the site diameter unless given.
    pub fn prior_for(&self, ds: &SpatialDataset) -> Result<PriorSpec> {
        let (p, q) = (ds.p(), ds.q());
        let pc = &self.prior;
        let mean = match &pc.mean {
            Some(m) => rows_to_matrix(m, "mean")?,
            None => Matrix::zeros(p, q),
        };
        let v = match &pc.v {
            Some(v) => rows_to_matrix(v, "V")?,
            None => Matrix::identity(p, p) * pc.v_scale,
        };
        let s = match &pc.s {
            Some(s) => rows_to_matrix(s, "S")?,
            None => Matrix::identity(q, q),
        };
        let b_phi = match pc.b_phi {
            Some(b) => b,
            None => range_upper_bound(ds.sites.diameter(), self.model.nu, pc.cor_threshold)?,
        };
        PriorSpec::new(mean, v, s, pc.dof.unwrap_or(q as f64 + 1.0), b_phi, self.model.nu)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| Error::Data {
        row,
        column: column.into(),
        message: format!("cannot parse `{t}` as a number"),
    })
}

/// Read a dataset from CSV text: coordinate columns, covariates, responses,
/// optional trial-count columns. Rows are numbered from 0 after the header.
pub fn read_dataset(text: &str, cfg: &RunConfig) -> Result<SpatialDataset> {
    let ds = parse_dataset(text, cfg, false)?;
    ds.check_fittable()?;
    Ok(ds)
}

/// Read prediction sites: same layout as [`read_dataset`], but response and
/// trial columns may be absent (read as missing) and no rank check is made.
pub fn read_prediction_sites(text: &str, cfg: &RunConfig) -> Result<SpatialDataset> {
    parse_dataset(text, cfg, true)
}

pub fn load_prediction_sites(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<SpatialDataset> {
    read_prediction_sites(&fs::read_to_string(path)?, cfg)
}

fn parse_dataset(text: &str, cfg: &RunConfig, target: bool) -> Result<SpatialDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &str| -> Result<usize> {
        col.get(name).copied().ok_or_else(|| Error::Data {
            row: 0,
            column: name.into(),
            message: "column missing from header".into(),
        })
    };
    let dc = &cfg.data;
    let lon = find(&dc.lon)?;
    let lat = find(&dc.lat)?;
    let optional = |name: &str| if target { Ok(col.get(name).copied()) } else { find(name).map(Some) };
    let resp: Vec<Option<usize>> = dc.responses.iter().map(|r| optional(&r.name)).collect::<Result<_>>()?;
    let trial_cols: Vec<Option<usize>> = dc
        .responses
        .iter()
        .map(|r| r.trials_column.as_deref().map(optional).transpose().map(Option::flatten))
        .collect::<Result<_>>()?;
    let covariates: Vec<String> = match &dc.covariates {
        Some(c) => c.clone(),
        None => {
            let mut used = vec![lon, lat];
            used.extend(resp.iter().flatten());
            used.extend(trial_cols.iter().flatten());
            header.iter().enumerate().filter(|(i, _)| !used.contains(i)).map(|(_, h)| h.clone()).collect()
        }
    };
    let cov_idx: Vec<usize> = covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut coords = Vec::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut trials: Vec<Vec<u32>> = vec![Vec::new(); resp.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        for (i, name) in [(lon, &dc.lon), (lat, &dc.lat)] {
            let v = parse_cell(get(i), row, name)?;
            if !v.is_finite() {
                return Err(Error::Data { row, column: name.clone(), message: "missing or non-finite coordinate".into() });
            }
            coords.push(v);
        }
        let mut xr = Vec::with_capacity(cov_idx.len() + 1);
        if dc.intercept {
            xr.push(1.0);
        }
        for (k, &i) in cov_idx.iter().enumerate() {
            let v = parse_cell(get(i), row, &covariates[k])?;
            if !v.is_finite() {
                return Err(Error::Data { row, column: covariates[k].clone(), message: "missing or non-finite covariate".into() });
            }
            xr.push(v);
        }
        xs.push(xr);
        ys.push(
            resp.iter()
                .zip(&dc.responses)
                .map(|(i, r)| i.map_or(Ok(f64::NAN), |i| parse_cell(get(i), row, &r.name)))
                .collect::<Result<_>>()?,
        );
        for (j, tc) in trial_cols.iter().enumerate() {
            if let Some(i) = tc {
                let name = dc.responses[j].trials_column.as_deref().unwrap_or("");
                let v = parse_cell(get(*i), row, name)?;
                if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                    return Err(Error::Data { row, column: name.into(), message: "trial count must be a nonnegative integer".into() });
                }
                trials[j].push(v as u32);
            }
        }
    }
    let n = xs.len();
    if n == 0 {
        return Err(Error::Data { row: 0, column: dc.lon.clone(), message: "dataset has no rows".into() });
    }
    let sites = SiteSet::new(2, coords).map_err(|e| match e {
        Error::Data { row, message, .. } => Error::Data { row, column: format!("{},{}", dc.lon, dc.lat), message },
        e => e,
    })?;
    let p = xs[0].len();
    let x = Matrix::from_fn(n, p, |i, c| xs[i][c]);
    let y = Matrix::from_fn(n, resp.len(), |i, j| ys[i][j]);
    let mut names = Vec::new();
    if dc.intercept {
        names.push("intercept".to_string());
    }
    names.extend(covariates);
    let trials = trial_cols.iter().zip(trials).map(|(c, t)| c.map(|_| t)).collect();
    SpatialDataset::new(
        sites,
        x,
        names,
        y,
        dc.responses.iter().map(|r| r.name.clone()).collect(),
        cfg.families()?,
        trials,
    )
}

pub fn load_dataset(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<SpatialDataset> {
    read_dataset(&fs::read_to_string(path)?, cfg)
}

/// CSV text for a dataset: `lon,lat`, covariates other than a column named
/// `intercept`, responses (missing written empty), then `<name>_trials`
/// columns where per-site trials exist.
pub fn dataset_csv(ds: &SpatialDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let covs: Vec<usize> = (0..ds.p()).filter(|&c| ds.covariate_names[c] != "intercept").collect();
    let mut header = vec!["lon".to_string(), "lat".to_string()];
    header.extend(covs.iter().map(|&c| ds.covariate_names[c].clone()));
    header.extend(ds.response_names.iter().cloned());
    for (j, t) in ds.trials.iter().enumerate() {
        if t.is_some() {
            header.push(format!("{}_trials", ds.response_names[j]));
        }
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.sites.point(i).iter().map(|v| format!("{v}")).collect();
        rec.extend(covs.iter().map(|&c| format!("{}", ds.x[(i, c)])));
        rec.extend((0..ds.q()).map(|j| {
            let v = ds.y[(i, j)];
            if v.is_nan() {
                String::new()
            } else {
                format!("{v}")
            }
        }));
        for t in ds.trials.iter().flatten() {
            rec.push(t[i].to_string());
        }
        w.write_record(&rec)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &SpatialDataset) -> Result<()> {
    atomic_write(path, dataset_csv(ds)?.as_bytes())
}

/// Configuration hash and seed stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

const CHAIN_MAGIC: &[u8; 8] = b"MSCHAIN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainHeader {
    pub format: String,
    pub layout: String,
    pub fields: Vec<String>,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub draws: usize,
    pub has_w: bool,
    pub families: Vec<FamilySpec>,
    pub phi_accepted: usize,
    pub phi_proposed: usize,
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
    pub provenance: Provenance,
}

pub fn chain_to_bytes(chain: &PosteriorChain, prov: &Provenance) -> Result<Vec<u8>> {
    let has_w = chain.w.is_some();
    let mut fields = vec!["phi".to_string(), "B".into(), "Sigma".into()];
    if has_w {
        fields.push("W".into());
    }
    let header = ChainHeader {
        format: "mixspat-chain-1".into(),
        layout: "per draw: fields in order, each column-major little-endian f64".into(),
        fields,
        n: chain.n,
        p: chain.p,
        q: chain.q,
        draws: chain.len(),
        has_w,
        families: chain.families.clone(),
        phi_accepted: chain.phi_accepted,
        phi_proposed: chain.phi_proposed,
        proposal_sd: chain.proposal_sd,
        ess_shrinks: chain.ess_shrinks,
        ess_stalls: chain.ess_stalls,
        iterations: chain.iterations,
        postprocessed: chain.postprocessed,
        b_phi: chain.b_phi,
        nu: chain.nu,
        m: chain.m,
        jitter: chain.jitter,
        seed: chain.seed,
        provenance: prov.clone(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHAIN_MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for l in 0..chain.len() {
        out.extend_from_slice(&chain.phi[l].to_le_bytes());
        let mut mats = vec![&chain.b[l], &chain.sigma[l]];
        if let Some(ws) = &chain.w {
            mats.push(&ws[l]);
        }
        for m in mats {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn chain_from_bytes(bytes: &[u8]) -> Result<(PosteriorChain, Provenance)> {
    if bytes.len() < 16 || &bytes[..8] != CHAIN_MAGIC {
        return Err(Error::Format("not a chain file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16 + hlen;
    let h: ChainHeader = serde_json::from_slice(bytes.get(16..body_start).ok_or_else(|| Error::Format("truncated chain header".into()))?)?;
    let per_draw = 1 + h.p * h.q + h.q * h.q + if h.has_w { h.n * h.q } else { 0 };
    let body = &bytes[body_start..];
    if body.len() != per_draw * h.draws * 8 {
        return Err(Error::Format(format!("chain body has {} bytes, expected {}", body.len(), per_draw * h.draws * 8)));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut chain = PosteriorChain {
        n: h.n,
        p: h.p,
        q: h.q,
        families: h.families,
        phi: Vec::with_capacity(h.draws),
        b: Vec::with_capacity(h.draws),
        sigma: Vec::with_capacity(h.draws),
        w: h.has_w.then(Vec::new),
        phi_accepted: h.phi_accepted,
        phi_proposed: h.phi_proposed,
        proposal_sd: h.proposal_sd,
        ess_shrinks: h.ess_shrinks,
        ess_stalls: h.ess_stalls,
        iterations: h.iterations,
        postprocessed: h.postprocessed,
        b_phi: h.b_phi,
        nu: h.nu,
        m: h.m,
        jitter: h.jitter,
        seed: h.seed,
    };
    for d in vals.chunks_exact(per_draw) {
        chain.phi.push(d[0]);
        let mut off = 1;
        let mut take = |r: usize, c: usize| {
            let m = Matrix::from_column_slice(r, c, &d[off..off + r * c]);
            off += r * c;
            m
        };
        chain.b.push(take(h.p, h.q));
        chain.sigma.push(take(h.q, h.q));
        if let Some(ws) = chain.w.as_mut() {
            ws.push(take(h.n, h.q));
        }
    }
    Ok((chain, h.provenance))
}

pub fn write_chain(path: impl AsRef<Path>, chain: &PosteriorChain, prov: &Provenance) -> Result<()> {
    atomic_write(path, &chain_to_bytes(chain, prov)?)
}

pub fn read_chain(path: impl AsRef<Path>) -> Result<(PosteriorChain, Provenance)> {
    chain_from_bytes(&fs::read(path)?)
}

/// Posterior summary written next to a chain file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub provenance: Provenance,
    pub draws: usize,
    pub acceptance_rate: f64,
    pub proposal_sd: f64,
    pub ess_stalls: usize,
    pub b_phi: f64,
    pub phi: MarginSummary,
    pub phi_ess: f64,
    /// `[row][column]`.
    pub b: Vec<Vec<MarginSummary>>,
    pub sigma: Vec<Vec<MarginSummary>>,
    pub sigma_ess: Vec<Vec<f64>>,
}

pub fn chain_summary(chain: &PosteriorChain, prov: &Provenance, level: f64) -> Result<ChainSummary> {
    if chain.is_empty() {
        return Err(Error::Config("chain has no stored draws to summarize".into()));
    }
    let table = |m: &[Matrix], r: usize, c: usize| -> Vec<Vec<MarginSummary>> {
        (0..r)
            .map(|i| (0..c).map(|j| MarginSummary::from_draws(&m.iter().map(|x| x[(i, j)]).collect::<Vec<_>>(), level)).collect())
            .collect()
    };
    let ess = crate::stats::effective_sample_size;
    Ok(ChainSummary {
        provenance: prov.clone(),
        draws: chain.len(),
        acceptance_rate: chain.acceptance_rate(),
        proposal_sd: chain.proposal_sd,
        ess_stalls: chain.ess_stalls,
        b_phi: chain.b_phi,
        phi: MarginSummary::from_draws(&chain.phi, level),
        phi_ess: ess(&chain.phi),
        b: table(&chain.b, chain.p, chain.q),
        sigma: table(&chain.sigma, chain.q, chain.q),
        sigma_ess: (0..chain.q)
            .map(|i| (0..chain.q).map(|j| ess(&chain.sigma.iter().map(|s| s[(i, j)]).collect::<Vec<_>>())).collect())
            .collect(),
    })
}

/// Long-format CSV: `site_id,response_id,draw_id,w_star,y_star`.
pub fn predictive_csv(draws: &PredictiveDraws, prov: &Provenance) -> Result<String> {
    let mut out = format!("# config_hash={} seed={}\n", prov.config_hash, prov.seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["site_id", "response_id", "draw_id", "w_star", "y_star"])?;
    for i in 0..draws.u() {
        for j in 0..draws.q() {
            for l in 0..draws.len() {
                w.write_record(&[
                    i.to_string(),
                    j.to_string(),
                    l.to_string(),
                    format!("{}", draws.w_star[l][(i, j)]),
                    format!("{}", draws.y_star[l][(i, j)]),
                ])?;
            }
        }
    }
    out.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))?);
    Ok(out)
}

pub fn write_predictive(path: impl AsRef<Path>, draws: &PredictiveDraws, prov: &Provenance) -> Result<()> {
    atomic_write(path, predictive_csv(draws, prov)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
seed = 7

[data]
responses = [
  { name = "y1", family = "gaussian", psi = 0.5 },
  { name = "y2", family = "poisson" },
]

[mcmc]
iterations = 20
burn_in = 10
"#;

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let c = RunConfig::from_toml_str(CFG).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.mcmc.thin, 1);
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash().unwrap(), again.hash().unwrap());
        let bad = CFG.replace("burn_in = 10", "burn_in = 10\nburnin = 3");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = CFG.replace("poisson", "poison");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    fn cfg_y() -> RunConfig {
        RunConfig::for_responses(vec![ResponseConfig {
            name: "y".into(),
            family: FamilyKind::Poisson,
            psi: 1.0,
            trials: 1,
            trials_column: None,
        }])
    }

    #[test]
    fn minimal_csv() {
        let ds = read_dataset("lon,lat,y\n0,0,1\n1,0,2\n0,1,0\n", &cfg_y()).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.q()), (3, 1, 1));
        assert_eq!(ds.covariate_names, ["intercept"]);
    }

    #[test]
    fn ingestion_errors_name_row_and_column() {
        match read_dataset("lon,lat,y\n0,0,1\n1,0,-2\n0,1,0\n", &cfg_y()) {
            Err(Error::Data { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "y")),
            r => panic!("{r:?}"),
        }
        assert!(matches!(read_dataset("lon,lat,y\n0,0,1\n0,0,2\n0,1,0\n", &cfg_y()), Err(Error::Data { .. })));
        assert!(matches!(read_dataset("lon,lat,x,y\n0,0,1,1\n1,0,1,2\n0,1,1,0\n", &cfg_y()), Err(Error::Data { .. })));
        let mut c = cfg_y();
        c.data.responses[0].family = FamilyKind::Bernoulli;
        match read_dataset("lon,lat,y\n0,0,1\n1,0,2\n0,1,0\n", &c) {
            Err(Error::Data { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "y")),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn dataset_csv_round_trip_with_missing_and_trials() {
        let text = "lon,lat,elev,y,n\n0,0,1.5,1,3\n1,0,2.5,,4\n0,1,0.5,0,2\n2,2,1,2,2\n";
        let mut c = cfg_y();
        c.data.responses[0].family = FamilyKind::Binomial;
        c.data.responses[0].trials_column = Some("n".into());
        let ds = read_dataset(text, &c).unwrap();
        assert!(ds.y[(1, 0)].is_nan());
        assert_eq!(ds.trials[0].as_ref().unwrap(), &vec![3, 4, 2, 2]);
        let out = dataset_csv(&ds).unwrap();
        c.data.responses[0].trials_column = Some("y_trials".into());
        let back = read_dataset(&out, &c).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.trials, ds.trials);
        assert_eq!(back.sites, ds.sites);
    }

    #[test]
    fn chain_bytes_round_trip() {
        let mut rng = crate::rng::stream(1, 0);
        let chain = PosteriorChain {
            n: 3,
            p: 2,
            q: 2,
            families: vec![FamilySpec::gaussian(0.5), FamilySpec::binomial(4)],
            phi: vec![0.1, 0.2],
            b: (0..2).map(|_| crate::matrixvariate::standard_normal_matrix(2, 2, &mut rng)).collect(),
            sigma: vec![Matrix::identity(2, 2); 2],
            w: Some((0..2).map(|_| crate::matrixvariate::standard_normal_matrix(3, 2, &mut rng)).collect()),
            phi_accepted: 1,
            phi_proposed: 2,
            proposal_sd: 0.05,
            ess_shrinks: 4,
            ess_stalls: 0,
            iterations: 2,
            postprocessed: true,
            b_phi: 0.6,
            nu: 0.5,
            m: 2,
            jitter: 1e-8,
            seed: 9,
        };
        let prov = Provenance { config_hash: "abc".into(), seed: 9 };
        let bytes = chain_to_bytes(&chain, &prov).unwrap();
        let (back, p) = chain_from_bytes(&bytes).unwrap();
        assert_eq!(back, chain);
        assert_eq!(p, prov);
        assert!(chain_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    proptest::proptest! {
        #[test]
        fn config_round_trips(seed in 0u64..u64::MAX / 2, m in 1usize..50, iters in 10usize..5000, nu in 0.1f64..3.0, psi in 0.01f64..10.0) {
            let mut cfg = RunConfig::for_responses(vec![
                ResponseConfig { name: "a".into(), family: FamilyKind::Gaussian, psi, trials: 1, trials_column: None },
                ResponseConfig { name: "b".into(), family: FamilyKind::Binomial, psi: 1.0, trials: 4, trials_column: Some("n".into()) },
            ]);
            cfg.seed = seed;
            cfg.model.m = m;
            cfg.model.nu = nu;
            cfg.mcmc.iterations = iters;
            cfg.mcmc.burn_in = iters / 2;
            let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            proptest::prop_assert_eq!(&back, &cfg);
            proptest::prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        }
    }
}
