//! Sparse upper-triangular Vecchia factor `U` with `UᵀU ≈ K⁻¹`.
//!
//! Everything here works in *ordered* coordinates: row `i` of a matrix passed
//! to [`VecchiaFactor::apply`] or returned by [`VecchiaFactor::solve`] refers
//! to ordered position `i`, i.e. original site `ordering.perm[i]`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ConditioningSets, Ordering, SiteSet};
use crate::kernels::{correlation_matrix, matern, MaternParams};
use crate::linalg::{cholesky_lower, solve_lower, Matrix};
use crate::matrixvariate::standard_normal_matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Distances needed to build every row, independent of the kernel
/// parameters. Built once per (sites, ordering, m) and reused for every φ.
#[derive(Debug, Clone)]
pub struct NeighborGeometry {
    pub ordering: Ordering,
    pub csets: ConditioningSets,
    /// `to_nbr[i][a]`: distance from position `i` to its `a`-th neighbour.
    to_nbr: Vec<Vec<f64>>,
    /// Packed strict lower triangle of neighbour-to-neighbour distances.
    among: Vec<Vec<f64>>,
}

impl NeighborGeometry {
    pub fn new(sites: &SiteSet, ordering: &Ordering, csets: &ConditioningSets) -> Result<Self> {
        let n = sites.len();
        if ordering.len() != n || csets.len() != n {
            return Err(Error::Dimension(format!(
                "{n} sites, ordering of {}, {} conditioning sets",
                ordering.len(),
                csets.len()
            )));
        }
        let ordered = sites.permuted(&ordering.perm);
        let (to_nbr, among) = (0..n)
            .into_par_iter()
            .map(|i| {
                let set = &csets.sets[i];
                let to: Vec<f64> = set.iter().map(|&j| ordered.distance(i, j)).collect();
                let mut am = Vec::with_capacity(set.len() * set.len().saturating_sub(1) / 2);
                for a in 0..set.len() {
                    for b in 0..a {
                        am.push(ordered.distance(set[a], set[b]));
                    }
                }
                (to, am)
            })
            .unzip();
        Ok(NeighborGeometry { ordering: ordering.clone(), csets: csets.clone(), to_nbr, among })
    }

    pub fn len(&self) -> usize {
        self.to_nbr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_nbr.is_empty()
    }
}

/// Upper-triangular factor stored row-wise: a diagonal plus, for row `i`,
/// entries at the columns in `𝓜(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VecchiaFactor {
    pub n: usize,
    pub m: usize,
    pub ordering: Ordering,
    pub params: MaternParams,
    pub jitter: f64,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Build the factor from sites, ordering and conditioning sets.
pub fn build_factor(
    sites: &SiteSet,
    order: &Ordering,
    csets: &ConditioningSets,
    params: MaternParams,
    jitter: f64,
) -> Result<VecchiaFactor> {
    let geom = NeighborGeometry::new(sites, order, csets)?;
    build_factor_from_geometry(&geom, params, jitter)
}

/// Build the factor from precomputed neighbour distances. Rows are computed
/// in parallel; each row is a pure function of its inputs so the result does
/// not depend on the thread count.
pub fn build_factor_from_geometry(
    geom: &NeighborGeometry,
    params: MaternParams,
    jitter: f64,
) -> Result<VecchiaFactor> {
    if !(jitter >= 0.0) {
        return Err(Error::Config(format!("jitter must be nonnegative, got {jitter}")));
    }
    let n = geom.len();
    let rows: Vec<Result<(f64, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| build_row(i, &geom.to_nbr[i], &geom.among[i], params, jitter))
        .collect();
    let mut diag = Vec::with_capacity(n);
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for (i, row) in rows.into_iter().enumerate() {
        let (d, off) = row?;
        diag.push(d);
        cols.extend_from_slice(&geom.csets.sets[i]);
        vals.extend(off);
        row_ptr.push(cols.len());
    }
    Ok(VecchiaFactor {
        n,
        m: geom.csets.m,
        ordering: geom.ordering.clone(),
        params,
        jitter,
        diag,
        row_ptr,
        cols,
        vals,
    })
}

fn build_row(
    i: usize,
    to_nbr: &[f64],
    among: &[f64],
    params: MaternParams,
    jitter: f64,
) -> Result<(f64, Vec<f64>)> {
    let k = to_nbr.len();
    if k == 0 {
        return Ok((1.0, Vec::new()));
    }
    // Lower Cholesky of the local block, in place, row-major k×k.
    let mut l = vec![0.0; k * k];
    let mut p = 0;
    for a in 0..k {
        for b in 0..a {
            l[a * k + b] = matern(among[p], params);
            p += 1;
        }
        l[a * k + a] = 1.0 + jitter;
    }
    for j in 0..k {
        let mut d = l[j * k + j];
        for t in 0..j {
            d -= l[j * k + t] * l[j * k + t];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric(format!(
                "row {i}: neighbour correlation block is not positive definite (phi = {}, nu = {})",
                params.phi, params.nu
            )));
        }
        let djj = d.sqrt();
        l[j * k + j] = djj;
        for a in (j + 1)..k {
            let mut s = l[a * k + j];
            for t in 0..j {
                s -= l[a * k + t] * l[j * k + t];
            }
            l[a * k + j] = s / djj;
        }
    }
    // y = L⁻¹ k_Mi; v = 1 - yᵀy; b = L⁻ᵀ y.
    let mut y: Vec<f64> = to_nbr.iter().map(|&d| matern(d, params)).collect();
    for a in 0..k {
        let mut s = y[a];
        for t in 0..a {
            s -= l[a * k + t] * y[t];
        }
        y[a] = s / l[a * k + a];
    }
    let v = 1.0 - y.iter().map(|t| t * t).sum::<f64>();
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Numeric(format!(
            "row {i}: non-positive conditional variance {v:e} (phi = {}, nu = {})",
            params.phi, params.nu
        )));
    }
    for a in (0..k).rev() {
        let mut s = y[a];
        for t in (a + 1)..k {
            s -= l[t * k + a] * y[t];
        }
        y[a] = s / l[a * k + a];
    }
    let d = v.powf(-0.5);
    Ok((d, y.into_iter().map(|b| -d * b).collect()))
}

impl VecchiaFactor {
    /// `U = I` on `n` sites (independent sites, `K = I`). `n` may be zero.
    pub fn identity(n: usize, params: MaternParams) -> Self {
        VecchiaFactor {
            n,
            m: 0,
            ordering: Ordering::identity(n),
            params,
            jitter: 0.0,
            diag: vec![1.0; n],
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Diagonal entries `U_ii`.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.n + self.vals.len()
    }

    /// `log |UᵀU| = 2 Σ log U_ii`.
    pub fn logdet_precision(&self) -> f64 {
        2.0 * self.diag.iter().map(|d| d.ln()).sum::<f64>()
    }

    fn check_rows(&self, m: &Matrix) -> Result<()> {
        if m.nrows() != self.n {
            return Err(Error::Dimension(format!(
                "matrix has {} rows, factor has {}",
                m.nrows(),
                self.n
            )));
        }
        Ok(())
    }

    /// Sparse product `U M`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.check_rows(m)?;
        let k = m.ncols();
        let mut out = Matrix::zeros(self.n, k);
        for i in 0..self.n {
            for c in 0..k {
                let mut s = self.diag[i] * m[(i, c)];
                for (j, u) in self.row(i) {
                    s += u * m[(j, c)];
                }
                out[(i, c)] = s;
            }
        }
        Ok(out)
    }

    /// Solve `U X = Z` by back substitution.
    pub fn solve(&self, z: &Matrix) -> Result<Matrix> {
        self.check_rows(z)?;
        let k = z.ncols();
        let mut x = Matrix::zeros(self.n, k);
        for i in (0..self.n).rev() {
            for c in 0..k {
                let mut s = z[(i, c)];
                for (j, u) in self.row(i) {
                    s -= u * x[(j, c)];
                }
                x[(i, c)] = s / self.diag[i];
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite value in factor solve".into()));
        }
        Ok(x)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut u = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            u[(i, i)] = self.diag[i];
            for (j, v) in self.row(i) {
                u[(i, j)] = v;
            }
        }
        u
    }

    /// Log-density of `W ~ MN(mean, (UᵀU)⁻¹, Σ)` given the lower Cholesky
    /// factor of Σ. `w` and `mean` are in ordered rows.
    pub fn matrix_normal_logdensity(&self, w: &Matrix, mean: &Matrix, sigma_chol: &Matrix) -> Result<f64> {
        let q = w.ncols();
        if mean.shape() != w.shape() || sigma_chol.shape() != (q, q) {
            return Err(Error::Dimension("latent matrix, mean and Σ factor disagree".into()));
        }
        let ur = self.apply(&(w - mean))?;
        let quad = solve_lower(sigma_chol, &ur.transpose())?.norm_squared();
        let logdet_sigma = 2.0 * sigma_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let n = self.n as f64;
        Ok(-0.5 * n * q as f64 * LN_2PI + 0.5 * q as f64 * self.logdet_precision()
            - 0.5 * n * logdet_sigma
            - 0.5 * quad)
    }

    /// Key identifying this factor in a cache.
    pub fn cache_key(&self, sites: &SiteSet) -> FactorKey {
        FactorKey::new(sites, &self.ordering, self.m, self.params, self.jitter)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 8 * (3 * self.n + 2 * self.vals.len()));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        for v in [self.n as u64, self.m as u64, self.vals.len() as u64] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.params.phi, self.params.nu, self.jitter] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &p in &self.ordering.perm {
            b.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &p in &self.row_ptr {
            b.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in &self.cols {
            b.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for v in self.diag.iter().chain(&self.vals) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a Vecchia factor file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Format(format!("unsupported factor version {version}")));
        }
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let nnz = r.u64()? as usize;
        let params = MaternParams::new(r.f64()?, r.f64()?)?;
        let jitter = r.f64()?;
        let perm = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let row_ptr = (0..=n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let cols = (0..nnz).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let diag = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let vals = (0..nnz).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let ordering = Ordering { perm };
        if !ordering.is_permutation() || row_ptr.last() != Some(&nnz) || r.pos != bytes.len() {
            return Err(Error::Format("corrupt Vecchia factor file".into()));
        }
        Ok(VecchiaFactor { n, m, ordering, params, jitter, diag, row_ptr, cols, vals })
    }
}

const MAGIC: &[u8; 4] = b"VECF";

struct ByteReader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        let s = self
            .b
            .get(self.pos..self.pos + k)
            .ok_or_else(|| Error::Format("truncated Vecchia factor file".into()))?;
        self.pos += k;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Cache key `(site hash, ordering, m, φ, ν, jitter)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactorKey(pub String);

impl FactorKey {
    pub fn new(sites: &SiteSet, ordering: &Ordering, m: usize, params: MaternParams, jitter: f64) -> Self {
        let mut h = Sha256::new();
        for c in sites.coords() {
            h.update(c.to_le_bytes());
        }
        for &p in &ordering.perm {
            h.update((p as u64).to_le_bytes());
        }
        h.update((m as u64).to_le_bytes());
        for v in [params.phi, params.nu, jitter] {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        FactorKey(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// On-disk factor cache: one binary file per key.
#[derive(Debug, Clone)]
pub struct FactorCache {
    dir: PathBuf,
}

impl FactorCache {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(FactorCache { dir: dir.as_ref().to_path_buf() })
    }

    fn path(&self, key: &FactorKey) -> PathBuf {
        self.dir.join(format!("{}.vecf", key.0))
    }

    pub fn get(&self, key: &FactorKey) -> Result<Option<VecchiaFactor>> {
        let p = self.path(key);
        if !p.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        std::fs::File::open(p)?.read_to_end(&mut bytes)?;
        VecchiaFactor::from_bytes(&bytes).map(Some)
    }

    pub fn put(&self, key: &FactorKey, f: &VecchiaFactor) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&f.to_bytes())?;
        tmp.persist(self.path(key)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    /// Fetch or build, storing the built factor.
    pub fn get_or_build(
        &self,
        sites: &SiteSet,
        order: &Ordering,
        csets: &ConditioningSets,
        params: MaternParams,
        jitter: f64,
    ) -> Result<VecchiaFactor> {
        let key = FactorKey::new(sites, order, csets.m, params, jitter);
        if let Some(f) = self.get(&key)? {
            return Ok(f);
        }
        let f = build_factor(sites, order, csets, params, jitter)?;
        self.put(&key, &f)?;
        Ok(f)
    }
}

/// Draw `W = mean + U⁻¹ (Z Lᵀ)` with `L` a lower factor of the column
/// covariance. Rows are in factor order.
pub fn sample_latent_prior<R: Rng + ?Sized>(
    f: &VecchiaFactor,
    mean: &Matrix,
    col_factor: &Matrix,
    rng: &mut R,
) -> Result<Matrix> {
    let q = col_factor.nrows();
    if mean.shape() != (f.n, q) || col_factor.ncols() != q {
        return Err(Error::Dimension("prior mean or column factor has the wrong shape".into()));
    }
    let z = standard_normal_matrix(f.n, q, rng);
    Ok(mean + f.solve(&(z * col_factor.transpose()))?)
}

/// Cholesky factor of `Q^{(u,u)}`.
#[derive(Debug, Clone)]
pub enum QuuFactor {
    /// Dense lower factor.
    Dense(Matrix),
    /// Envelope (skyline) lower factor: row `i` stores columns `first[i]..=i`.
    Skyline { first: Vec<usize>, rows: Vec<Vec<f64>> },
}

impl QuuFactor {
    pub fn dim(&self) -> usize {
        match self {
            QuuFactor::Dense(l) => l.nrows(),
            QuuFactor::Skyline { first, .. } => first.len(),
        }
    }

    /// Solve `L x = b`.
    pub fn solve_lower(&self, b: &Matrix) -> Result<Matrix> {
        match self {
            QuuFactor::Dense(l) => solve_lower(l, b),
            QuuFactor::Skyline { first, rows } => {
                let mut x = b.clone();
                for c in 0..x.ncols() {
                    for i in 0..first.len() {
                        let row = &rows[i];
                        let mut s = x[(i, c)];
                        for (t, &lv) in row[..row.len() - 1].iter().enumerate() {
                            s -= lv * x[(first[i] + t, c)];
                        }
                        x[(i, c)] = s / row[row.len() - 1];
                    }
                }
                Ok(x)
            }
        }
    }

    /// Solve `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &Matrix) -> Result<Matrix> {
        match self {
            QuuFactor::Dense(l) => crate::linalg::solve_lower_transpose(l, b),
            QuuFactor::Skyline { first, rows } => {
                let mut y = b.clone();
                for c in 0..y.ncols() {
                    for i in (0..first.len()).rev() {
                        let row = &rows[i];
                        let xi = y[(i, c)] / row[row.len() - 1];
                        y[(i, c)] = xi;
                        for (t, &lv) in row[..row.len() - 1].iter().enumerate() {
                            y[(first[i] + t, c)] -= lv * xi;
                        }
                    }
                }
                Ok(y)
            }
        }
    }
}

/// Precision blocks of the joint observed-then-prediction factor.
#[derive(Debug, Clone)]
pub struct PredictionBlocks {
    pub n: usize,
    pub u: usize,
    pub quu_factor: QuuFactor,
    /// Rows of the joint factor restricted to observed positions; supplies
    /// `Q^{(u,n)} = U_nuᵀ U_nn` without forming it.
    joint: VecchiaFactor,
}

/// Dense factorization of `Q^{(u,u)}` is used up to this size.
pub const DENSE_QUU_LIMIT: usize = 2000;

pub fn prediction_blocks(joint_factor: &VecchiaFactor, n: usize, u: usize) -> Result<PredictionBlocks> {
    prediction_blocks_with_limit(joint_factor, n, u, DENSE_QUU_LIMIT)
}

/// As [`prediction_blocks`], with an explicit dense/sparse switch point.
pub fn prediction_blocks_with_limit(
    joint_factor: &VecchiaFactor,
    n: usize,
    u: usize,
    dense_limit: usize,
) -> Result<PredictionBlocks> {
    if n + u != joint_factor.n || u == 0 {
        return Err(Error::Dimension(format!(
            "partition n = {n}, u = {u} does not fit a factor of size {}",
            joint_factor.n
        )));
    }
    // Every row k of U contributes the outer product of its prediction-block
    // entries to Q^{(u,u)}.
    let pred_entries = |k: usize| -> Vec<(usize, f64)> {
        let mut e: Vec<(usize, f64)> =
            joint_factor.row(k).filter(|&(j, _)| j >= n).map(|(j, v)| (j - n, v)).collect();
        if k >= n {
            e.push((k - n, joint_factor.diag[k]));
        }
        e
    };
    let quu_factor = if u <= dense_limit {
        let mut q = Matrix::zeros(u, u);
        for k in 0..joint_factor.n {
            let e = pred_entries(k);
            for &(a, va) in &e {
                for &(b, vb) in &e {
                    q[(a, b)] += va * vb;
                }
            }
        }
        QuuFactor::Dense(cholesky_lower(&q, "prediction precision block")?)
    } else {
        skyline_factor(joint_factor.n, u, pred_entries)?
    };
    Ok(PredictionBlocks { n, u, quu_factor, joint: joint_factor.clone() })
}

fn skyline_factor(
    total: usize,
    u: usize,
    pred_entries: impl Fn(usize) -> Vec<(usize, f64)>,
) -> Result<QuuFactor> {
    let mut first: Vec<usize> = (0..u).collect();
    let all: Vec<Vec<(usize, f64)>> = (0..total).map(&pred_entries).collect();
    for e in &all {
        if let Some(lo) = e.iter().map(|x| x.0).min() {
            for &(a, _) in e {
                first[a] = first[a].min(lo);
            }
        }
    }
    let mut rows: Vec<Vec<f64>> = (0..u).map(|i| vec![0.0; i - first[i] + 1]).collect();
    for e in &all {
        for &(a, va) in e {
            for &(b, vb) in e {
                if b <= a {
                    rows[a][b - first[a]] += va * vb;
                }
            }
        }
    }
    for i in 0..u {
        for j in first[i]..=i {
            let lo = first[i].max(first[j]);
            let mut s = rows[i][j - first[i]];
            for k in lo..j {
                s -= rows[i][k - first[i]] * rows[j][k - first[j]];
            }
            if j == i {
                if !(s > 0.0) {
                    return Err(Error::Numeric(format!(
                        "prediction precision block is not positive definite at row {i}"
                    )));
                }
                rows[i][i - first[i]] = s.sqrt();
            } else {
                rows[i][j - first[i]] = s / rows[j][j - first[j]];
            }
        }
    }
    Ok(QuuFactor::Skyline { first, rows })
}

impl PredictionBlocks {
    /// `Q^{(u,n)} R` for an `n × k` matrix in observed order.
    pub fn qun_apply(&self, r: &Matrix) -> Result<Matrix> {
        if r.nrows() != self.n {
            return Err(Error::Dimension(format!("expected {} rows, got {}", self.n, r.nrows())));
        }
        let k = r.ncols();
        let mut out = Matrix::zeros(self.u, k);
        for row in 0..self.n {
            let mut t = vec![0.0; k];
            let mut has_pred = false;
            for (c, tc) in t.iter_mut().enumerate() {
                *tc = self.joint.diag[row] * r[(row, c)];
            }
            for (j, v) in self.joint.row(row) {
                if j < self.n {
                    for (c, tc) in t.iter_mut().enumerate() {
                        *tc += v * r[(j, c)];
                    }
                } else {
                    has_pred = true;
                }
            }
            if !has_pred {
                continue;
            }
            for (j, v) in self.joint.row(row) {
                if j >= self.n {
                    for (c, tc) in t.iter().enumerate() {
                        out[(j - self.n, c)] += v * tc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `Q_uu⁻¹ B`.
    pub fn quu_solve(&self, b: &Matrix) -> Result<Matrix> {
        self.quu_factor.solve_upper(&self.quu_factor.solve_lower(b)?)
    }

    /// Kriging offset `-Q_uu⁻¹ Q_un R` where `R = W - XB` on observed rows.
    pub fn kriging_offset(&self, resid: &Matrix) -> Result<Matrix> {
        Ok(-self.quu_solve(&self.qun_apply(resid)?)?)
    }

    /// Noise `L⁻ᵀ Z L_Σᵀ` with row covariance `Q_uu⁻¹`.
    pub fn noise(&self, z: &Matrix, sigma_chol: &Matrix) -> Result<Matrix> {
        Ok(self.quu_factor.solve_upper(z)? * sigma_chol.transpose())
    }

    /// Dense predictive row covariance `Q_uu⁻¹` (tests and small `u`).
    pub fn covariance(&self) -> Result<Matrix> {
        self.quu_solve(&Matrix::identity(self.u, self.u))
    }
}

/// Gaussian KL divergence `KL(N(0, K) ‖ N(0, (UᵀU)⁻¹))` on the max–min
/// ordering with `m` neighbours and no jitter. Dense; `n ≤ 500`.
pub fn kl_exact_vs_vecchia(sites: &SiteSet, params: MaternParams, m: usize) -> Result<f64> {
    let n = sites.len();
    if n > 500 {
        return Err(Error::Config(format!("KL diagnostic densifies; n = {n} exceeds 500")));
    }
    let order = crate::geometry::maxmin_order(sites);
    let csets = if n == 1 {
        ConditioningSets::empty(1)
    } else {
        crate::geometry::build_conditioning_sets(sites, &order, m)?
    };
    let f = build_factor(sites, &order, &csets, params, 0.0)?;
    let k = correlation_matrix(&sites.permuted(&order.perm), params);
    let lk = cholesky_lower(&k, "exact correlation matrix")?;
    let tr = f.apply(&lk)?.norm_squared();
    let logdet_k = crate::linalg::chol_logdet(&lk);
    let kl = 0.5 * (tr - n as f64 - f.logdet_precision() - logdet_k);
    if kl < 0.0 && kl > -1e-10 {
        return Ok(0.0);
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_conditioning_sets, joint_prediction_ordering, maxmin_order};
    use crate::linalg::frobenius;
    use crate::matrixvariate::{matrix_normal_logdensity, MatrixNormalParams, RowFactor};
    use crate::rng::stream;

    fn random_sites(n: usize, seed: u64) -> SiteSet {
        let mut rng = stream(seed, 0);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        SiteSet::from_points(&pts).unwrap()
    }

    fn full_factor(s: &SiteSet, params: MaternParams, jitter: f64) -> VecchiaFactor {
        let o = maxmin_order(s);
        let cs = build_conditioning_sets(s, &o, s.len() - 1).unwrap();
        build_factor(s, &o, &cs, params, jitter).unwrap()
    }

    #[test]
    fn single_site() {
        let s = SiteSet::from_points(&[[0.2, 0.2]]).unwrap();
        let f = build_factor(&s, &Ordering::identity(1), &ConditioningSets::empty(1), MaternParams::new(0.3, 0.5).unwrap(), 1e-8).unwrap();
        assert_eq!(f.to_dense(), Matrix::identity(1, 1));
        assert_eq!(f.logdet_precision(), 0.0);
    }

    #[test]
    fn two_sites_exact() {
        let s = SiteSet::from_points(&[[0.0, 0.0], [0.3, 0.0]]).unwrap();
        let p = MaternParams::new(0.3 / 2f64.ln(), 0.5).unwrap(); // ρ = 0.5
        let f = full_factor(&s, p, 0.0);
        let q = f.to_dense().transpose() * f.to_dense();
        let want = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]).try_inverse().unwrap();
        assert!((q - want).abs().max() < 1e-14);
        assert!((f.logdet_precision() + 0.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn full_conditioning_reproduces_inverse() {
        let s = random_sites(30, 11);
        let p = MaternParams::new(0.2, 0.5).unwrap();
        let f = full_factor(&s, p, 0.0);
        let k = correlation_matrix(&s.permuted(&f.ordering.perm), p);
        let kinv = k.clone().try_inverse().unwrap();
        let u = f.to_dense();
        assert!(frobenius(&(u.transpose() * &u - &kinv)) / frobenius(&kinv) < 1e-8);
        // structure
        for i in 0..f.n {
            for j in 0..f.n {
                if u[(i, j)] != 0.0 {
                    assert!(j == i || f.row(i).any(|(c, _)| c == j));
                }
            }
        }
        let s20 = random_sites(20, 12);
        let f20 = full_factor(&s20, p, 0.0);
        let k20 = correlation_matrix(&s20, p);
        assert!((f20.logdet_precision() + k20.determinant().ln()).abs() < 1e-9);
    }

    #[test]
    fn apply_and_solve_against_dense() {
        let s = random_sites(40, 13);
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, 5).unwrap();
        let f = build_factor(&s, &o, &cs, MaternParams::new(0.1, 1.3).unwrap(), 1e-8).unwrap();
        let mut rng = stream(13, 1);
        let m = standard_normal_matrix(40, 3, &mut rng);
        let dense = f.to_dense() * &m;
        assert!((f.apply(&m).unwrap() - &dense).abs().max() < 1e-12);
        assert!((f.solve(&dense).unwrap() - &m).abs().max() < 1e-9);
        assert_eq!(f.apply(&Matrix::zeros(40, 2)).unwrap(), Matrix::zeros(40, 2));
        assert!(matches!(f.apply(&Matrix::zeros(3, 2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn parallel_build_is_bit_identical() {
        let s = random_sites(300, 14);
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, 10).unwrap();
        let p = MaternParams::new(0.15, 0.3).unwrap();
        let par = build_factor(&s, &o, &cs, p, 1e-8).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| build_factor(&s, &o, &cs, p, 1e-8).unwrap());
        assert_eq!(par.to_bytes(), seq.to_bytes());
    }

    #[test]
    fn logdensity_matches_dense_matrix_normal() {
        let mut rng = stream(15, 0);
        for n in [5, 17, 40] {
            let s = random_sites(n, 100 + n as u64);
            let p = MaternParams::new(0.3, 0.5).unwrap();
            let f = full_factor(&s, p, 0.0);
            let k = correlation_matrix(&s.permuted(&f.ordering.perm), p);
            let sigma = Matrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
            let lsig = cholesky_lower(&sigma, "s").unwrap();
            let w = standard_normal_matrix(n, 2, &mut rng);
            let mean = standard_normal_matrix(n, 2, &mut rng);
            let dense = matrix_normal_logdensity(
                &w,
                &MatrixNormalParams { mean: mean.clone(), row: RowFactor::CovarianceLower(cholesky_lower(&k, "k").unwrap()), col_cov: sigma },
            )
            .unwrap();
            let got = f.matrix_normal_logdensity(&w, &mean, &lsig).unwrap();
            assert!((got - dense).abs() < 1e-8, "{got} vs {dense}");
        }
    }

    #[test]
    fn prior_draws() {
        let id = VecchiaFactor {
            n: 3,
            m: 0,
            ordering: Ordering::identity(3),
            params: MaternParams::new(1.0, 0.5).unwrap(),
            jitter: 0.0,
            diag: vec![1.0; 3],
            row_ptr: vec![0; 4],
            cols: vec![],
            vals: vec![],
        };
        let mut rng = stream(16, 0);
        let draws = 50_000;
        let mut sq = 0.0;
        for _ in 0..draws {
            let w = sample_latent_prior(&id, &Matrix::zeros(3, 2), &Matrix::identity(2, 2), &mut rng).unwrap();
            sq += w.norm_squared();
        }
        assert!((sq / (6.0 * draws as f64) - 1.0).abs() < 0.02);

        // degenerate column factor
        let cf = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let mean = Matrix::from_element(3, 2, 7.0);
        let w = sample_latent_prior(&id, &mean, &cf, &mut rng).unwrap();
        assert!(w.column(1).iter().all(|&v| v == 7.0));

        // empirical row covariance equals (UᵀU)⁻¹
        let s = random_sites(4, 17);
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, 1).unwrap();
        let f = build_factor(&s, &o, &cs, MaternParams::new(0.5, 0.5).unwrap(), 0.0).unwrap();
        let target = (f.to_dense().transpose() * f.to_dense()).try_inverse().unwrap();
        let mut acc = Matrix::zeros(4, 4);
        let draws = 100_000;
        for _ in 0..draws {
            let w = sample_latent_prior(&f, &Matrix::zeros(4, 1), &Matrix::identity(1, 1), &mut rng).unwrap();
            acc += &w * w.transpose();
        }
        assert!(((acc / draws as f64) - target).abs().max() < 0.03);
    }

    #[test]
    fn cache_round_trip() {
        let s = random_sites(25, 18);
        let o = maxmin_order(&s);
        let cs = build_conditioning_sets(&s, &o, 4).unwrap();
        let p = MaternParams::new(0.2, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = FactorCache::new(dir.path()).unwrap();
        let a = cache.get_or_build(&s, &o, &cs, p, 1e-8).unwrap();
        let key = a.cache_key(&s);
        let b = cache.get(&key).unwrap().unwrap();
        assert_eq!(a, b);
        let other = FactorKey::new(&s, &o, 4, MaternParams::new(0.21, 0.5).unwrap(), 1e-8);
        assert_ne!(key, other);
        assert!(cache.get(&other).unwrap().is_none());
        assert!(VecchiaFactor::from_bytes(&a.to_bytes()[..20]).is_err());
    }

    /// Dense covariance-form kriging in ordered space.
    fn dense_kriging(sites: &SiteSet, perm: &[usize], n: usize, p: MaternParams) -> (Matrix, Matrix) {
        let k = correlation_matrix(&sites.permuted(perm), p);
        let u = k.nrows() - n;
        let knn = k.view((0, 0), (n, n)).into_owned();
        let kun = k.view((n, 0), (u, n)).into_owned();
        let kuu = k.view((n, n), (u, u)).into_owned();
        let kinv = knn.try_inverse().unwrap();
        let a = &kun * &kinv;
        let cov = kuu - &a * kun.transpose();
        (a, cov)
    }

    #[test]
    fn scalar_kriging() {
        let obs = SiteSet::from_points(&[[0.0, 0.0]]).unwrap();
        let pred = SiteSet::from_points(&[[0.25, 0.0]]).unwrap();
        let p = MaternParams::new(0.5, 0.5).unwrap();
        let rho = (-0.5f64).exp();
        let j = joint_prediction_ordering(&obs, Some(&pred), 1).unwrap();
        let f = build_factor(&j.sites, &j.ordering, &j.csets, p, 0.0).unwrap();
        let b = prediction_blocks(&f, 1, 1).unwrap();
        let r = Matrix::from_element(1, 1, 2.0);
        let mean = b.kriging_offset(&r).unwrap();
        assert!((mean[(0, 0)] - rho * 2.0).abs() < 1e-12);
        assert!((b.covariance().unwrap()[(0, 0)] - (1.0 - rho * rho)).abs() < 1e-12);
    }

    #[test]
    fn full_conditioning_matches_covariance_kriging() {
        let obs = random_sites(20, 19);
        let pred = random_sites(5, 20);
        let p = MaternParams::new(0.3, 1.3).unwrap();
        let j = joint_prediction_ordering(&obs, Some(&pred), 24).unwrap();
        let f = build_factor(&j.sites, &j.ordering, &j.csets, p, 0.0).unwrap();
        let mut rng = stream(21, 0);
        let r = standard_normal_matrix(20, 2, &mut rng);
        let (a, cov) = dense_kriging(&j.sites, &j.ordering.perm, 20, p);
        for limit in [DENSE_QUU_LIMIT, 0] {
            let b = prediction_blocks_with_limit(&f, 20, 5, limit).unwrap();
            assert!((b.kriging_offset(&r).unwrap() - &a * &r).abs().max() < 1e-8);
            assert!((b.covariance().unwrap() - &cov).abs().max() < 1e-8);
        }
    }

    #[test]
    fn skyline_matches_dense_with_sparse_conditioning() {
        let obs = random_sites(200, 22);
        let pred = random_sites(60, 23);
        let j = joint_prediction_ordering(&obs, Some(&pred), 8).unwrap();
        let f = build_factor(&j.sites, &j.ordering, &j.csets, MaternParams::new(0.1, 0.5).unwrap(), 1e-8).unwrap();
        let dense = prediction_blocks_with_limit(&f, 200, 60, 10_000).unwrap();
        let sky = prediction_blocks_with_limit(&f, 200, 60, 0).unwrap();
        let mut rng = stream(24, 0);
        let r = standard_normal_matrix(200, 2, &mut rng);
        let z = standard_normal_matrix(60, 2, &mut rng);
        let l = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.8]);
        assert!((dense.kriging_offset(&r).unwrap() - sky.kriging_offset(&r).unwrap()).abs().max() < 1e-9);
        assert!((dense.noise(&z, &l).unwrap() - sky.noise(&z, &l).unwrap()).abs().max() < 1e-9);
        assert!(prediction_blocks(&f, 100, 60).is_err());
    }

    #[test]
    fn near_coincident_prediction_has_tiny_variance() {
        let obs = random_sites(15, 25);
        let q = obs.point(3);
        let pred = SiteSet::from_points(&[[q[0] + 1e-6, q[1]]]).unwrap();
        let p = MaternParams::new(0.3, 0.5).unwrap();
        let j = joint_prediction_ordering(&obs, Some(&pred), 15).unwrap();
        let f = build_factor(&j.sites, &j.ordering, &j.csets, p, 0.0).unwrap();
        let b = prediction_blocks(&f, 15, 1).unwrap();
        let v = b.covariance().unwrap()[(0, 0)];
        let (_, cov) = dense_kriging(&j.sites, &j.ordering.perm, 15, p);
        assert!(v < 1e-4);
        assert!((v - cov[(0, 0)]).abs() < 1e-8);
    }

    #[test]
    fn kl_diagnostic() {
        let s = random_sites(40, 26);
        let p = MaternParams::new(0.2, 0.5).unwrap();
        assert!(kl_exact_vs_vecchia(&s, p, 39).unwrap().abs() < 1e-8);
        let s = random_sites(200, 27);
        let k2 = kl_exact_vs_vecchia(&s, p, 2).unwrap();
        let k10 = kl_exact_vs_vecchia(&s, p, 10).unwrap();
        assert!(k2 > 0.0 && k10 >= 0.0 && k10 < k2, "{k10} vs {k2}");
        assert!(matches!(kl_exact_vs_vecchia(&random_sites(501, 28), p, 2), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn factor_is_upper_triangular_with_positive_diagonal(n in 2usize..40, m in 1usize..8, seed in 0u64..1000, phi in 0.02f64..1.0) {
            let sites = random_sites(n, seed);
            let o = maxmin_order(&sites);
            let cs = build_conditioning_sets(&sites, &o, m.min(n - 1)).unwrap();
            let f = build_factor(&sites, &o, &cs, MaternParams::new(phi, 0.5).unwrap(), 1e-8).unwrap();
            proptest::prop_assert!(f.diag().iter().all(|d| *d >= 1.0 - 1e-12));
            for i in 0..n {
                proptest::prop_assert!(f.row(i).all(|(j, _)| j > i));
            }
            let z = Matrix::from_fn(n, 2, |i, j| (i as f64 + 1.0).sin() + j as f64);
            let back = f.solve(&f.apply(&z).unwrap()).unwrap();
            proptest::prop_assert!((back - z).abs().max() < 1e-8);
        }
    }
}
