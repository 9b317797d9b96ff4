//! The in-memory spatial dataset.

use crate::error::{Error, Result};
use crate::families::FamilySpec;
use crate::geometry::SiteSet;
use crate::linalg::{column_rank, Matrix};

/// `n` sites with covariates `X` (n×p) and mixed-type responses `Y` (n×q).
/// Missing responses are `NaN` and drop out of the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    pub sites: SiteSet,
    pub x: Matrix,
    pub covariate_names: Vec<String>,
    pub y: Matrix,
    pub response_names: Vec<String>,
    pub families: Vec<FamilySpec>,
    /// Per-site binomial trial counts for each response (`None` means the
    /// family default applies).
    pub trials: Vec<Option<Vec<u32>>>,
}

impl SpatialDataset {
    /// Assemble and validate. Every non-missing response must lie in its
    /// family support.
    pub fn new(
        sites: SiteSet,
        x: Matrix,
        covariate_names: Vec<String>,
        y: Matrix,
        response_names: Vec<String>,
        families: Vec<FamilySpec>,
        trials: Vec<Option<Vec<u32>>>,
    ) -> Result<Self> {
        let n = sites.len();
        let q = families.len();
        if x.nrows() != n || y.nrows() != n {
            return Err(Error::Dimension(format!(
                "{n} sites but X has {} rows and Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if y.ncols() != q || response_names.len() != q || trials.len() != q {
            return Err(Error::Dimension(format!(
                "Y has {} columns for {q} families and {} names",
                y.ncols(),
                response_names.len()
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::Dimension("covariate names do not match X".into()));
        }
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() {
                let (r, c) = (i % n, i / n);
                return Err(Error::Data {
                    row: r,
                    column: covariate_names[c].clone(),
                    message: "non-finite covariate".into(),
                });
            }
        }
        for t in trials.iter().flatten() {
            if t.len() != n {
                return Err(Error::Dimension("trial counts must have one entry per site".into()));
            }
        }
        let ds = SpatialDataset { sites, x, covariate_names, y, response_names, families, trials };
        for j in 0..q {
            for i in 0..n {
                let v = ds.y[(i, j)];
                if v.is_nan() {
                    continue;
                }
                let fam = ds.family_at(i, j);
                if fam.kind == crate::families::FamilyKind::Binomial && fam.trials == 0 {
                    return Err(Error::Data {
                        row: i,
                        column: ds.response_names[j].clone(),
                        message: "binomial trial count must be at least 1".into(),
                    });
                }
                fam.check_support(v).map_err(|message| Error::Data {
                    row: i,
                    column: ds.response_names[j].clone(),
                    message: format!("{message} ({} response)", fam.kind.name()),
                })?;
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.sites.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.families.len()
    }

    /// Family of response `j` at site `i`, with that site's trial count.
    pub fn family_at(&self, i: usize, j: usize) -> FamilySpec {
        match &self.trials[j] {
            Some(t) => self.families[j].with_trials(t[i]),
            None => self.families[j],
        }
    }

    /// The full-column-rank condition `rank(X) = p < n` needed for a proper
    /// posterior.
    pub fn check_fittable(&self) -> Result<()> {
        let (n, p) = (self.n(), self.p());
        if p >= n {
            return Err(Error::Data {
                row: 0,
                column: "covariates".into(),
                message: format!("need p < n for a proper posterior, got p = {p}, n = {n}"),
            });
        }
        let r = column_rank(&self.x);
        if r < p {
            return Err(Error::Data {
                row: 0,
                column: "covariates".into(),
                message: format!("design matrix has rank {r} < p = {p}; X must have full column rank"),
            });
        }
        Ok(())
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let pick = |m: &Matrix| Matrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)]);
        let coords: Vec<f64> = idx.iter().flat_map(|&i| self.sites.point(i).to_vec()).collect();
        Ok(SpatialDataset {
            sites: if idx.is_empty() { SiteSet::empty(self.sites.dim()) } else { SiteSet::new(self.sites.dim(), coords)? },
            x: pick(&self.x),
            covariate_names: self.covariate_names.clone(),
            y: pick(&self.y),
            response_names: self.response_names.clone(),
            families: self.families.clone(),
            trials: self
                .trials
                .iter()
                .map(|t| t.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()))
                .collect(),
        })
    }

    /// Dataset restricted to the responses `js` (used for separate fits).
    pub fn select_responses(&self, js: &[usize]) -> Self {
        SpatialDataset {
            sites: self.sites.clone(),
            x: self.x.clone(),
            covariate_names: self.covariate_names.clone(),
            y: Matrix::from_fn(self.n(), js.len(), |i, c| self.y[(i, js[c])]),
            response_names: js.iter().map(|&j| self.response_names[j].clone()).collect(),
            families: js.iter().map(|&j| self.families[j]).collect(),
            trials: js.iter().map(|&j| self.trials[j].clone()).collect(),
        }
    }

    /// Same sites and covariates with every response marked missing; the
    /// likelihood becomes flat and the posterior equals the prior.
    pub fn without_responses(&self) -> Self {
        let mut d = self.clone();
        d.y.fill(f64::NAN);
        d
    }
}
