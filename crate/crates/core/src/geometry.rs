//! Site bookkeeping: distances, max–min ordering and nearest-neighbour
//! conditioning sets.
//!
//! Conditioning sets follow the *succeeding* convention: ordered position `i`
//! conditions on a subset of `{i+1, …, n-1}`. That is what makes the Vecchia
//! factor upper triangular.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A set of `n ≥ 1` distinct sites in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSet {
    dim: usize,
    coords: Vec<f64>,
}

impl SiteSet {
    /// Build from flat row-major coordinates. Rejects empty input, non-finite
    /// coordinates and duplicated sites.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("site dimension must be positive".into()));
        }
        if coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return Err(Error::Config(format!(
                "expected a positive multiple of {dim} coordinates, got {}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::Data {
                row: pos / dim,
                column: format!("coordinate {}", pos % dim),
                message: "non-finite coordinate".into(),
            });
        }
        let set = SiteSet { dim, coords };
        if let Some((a, b)) = set.first_duplicate() {
            return Err(Error::Data {
                row: b,
                column: "coordinates".into(),
                message: format!("site {b} duplicates site {a}"),
            });
        }
        Ok(set)
    }

    /// Zero-site set, used for empty subsets such as a hold-out of size 0.
    pub(crate) fn empty(dim: usize) -> Self {
        SiteSet { dim, coords: Vec::new() }
    }

    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        Self::new(2, points.iter().flat_map(|p| p.iter().copied()).collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(self.point(i), self.point(j))
    }

    /// Sites re-indexed by `perm` (`result[k] = self[perm[k]]`).
    pub fn permuted(&self, perm: &[usize]) -> SiteSet {
        let coords = perm.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        SiteSet { dim: self.dim, coords }
    }

    /// Concatenation of two site sets of equal dimension, without the
    /// duplicate check.
    pub fn concat(&self, other: &SiteSet) -> Result<SiteSet> {
        if self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "cannot join {}-d and {}-d sites",
                self.dim, other.dim
            )));
        }
        let mut coords = self.coords.clone();
        coords.extend_from_slice(&other.coords);
        Ok(SiteSet { dim: self.dim, coords })
    }

    /// Largest inter-site distance.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| self.distance(i, j)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    fn first_duplicate(&self) -> Option<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.point(a)
                .iter()
                .zip(self.point(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.windows(2)
            .find(|w| self.point(w[0]) == self.point(w[1]))
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A permutation of site indices: `perm[k]` is the original index of the
/// `k`-th ordered site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    pub perm: Vec<usize>,
}

impl Ordering {
    pub fn identity(n: usize) -> Self {
        Ordering { perm: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `inverse()[original] = ordered position`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (k, &i) in self.perm.iter().enumerate() {
            inv[i] = k;
        }
        inv
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        for &i in &self.perm {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }

    /// Rows of `m` in ordered position (`out[k] = m[perm[k]]`).
    pub fn apply_rows(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |k, j| m[(self.perm[k], j)])
    }

    /// Inverse of [`Ordering::apply_rows`].
    pub fn unapply_rows(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for (k, &i) in self.perm.iter().enumerate() {
            out.set_row(i, &m.row(k));
        }
        out
    }
}

/// Nearest succeeding neighbours of every ordered position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningSets {
    pub m: usize,
    /// `sets[i]` holds ordered positions, sorted ascending, all `> i`.
    pub sets: Vec<Vec<usize>>,
}

impl ConditioningSets {
    /// All sets empty: the independent (diagonal) approximation. Used for a
    /// single site, where no positive `m` is admissible.
    pub fn empty(n: usize) -> Self {
        ConditioningSets { m: 0, sets: vec![Vec::new(); n] }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Dense `n × n` matrix of Euclidean distances.
pub fn pairwise_distances(sites: &SiteSet) -> Matrix {
    let n = sites.len();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sites.distance(i, j);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Exact greedy max–min ordering.
///
/// The first site is the one nearest the coordinate centroid; each following
/// site maximises its minimum distance to the sites already placed. Ties go
/// to the smallest index. O(n²).
pub fn maxmin_order(sites: &SiteSet) -> Ordering {
    let n = sites.len();
    let d = sites.dim();
    let mut centroid = vec![0.0; d];
    for i in 0..n {
        for (c, x) in centroid.iter_mut().zip(sites.point(i)) {
            *c += x;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);

    let mut first = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let dist = euclidean(sites.point(i), &centroid);
        if dist < best {
            best = dist;
            first = i;
        }
    }

    let mut perm = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut next = first;
    for _ in 0..n {
        perm.push(next);
        placed[next] = true;
        let p = sites.point(next);
        let mut arg = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for i in 0..n {
            if placed[i] {
                continue;
            }
            let dist = euclidean(sites.point(i), p);
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
            if min_dist[i] > far {
                far = min_dist[i];
                arg = i;
            }
        }
        next = arg;
    }
    Ordering { perm }
}

/// Nearest-neighbour conditioning sets on an ordering: position `i` gets the
/// `min(m, n-1-i)` closest positions among `i+1..n-1`, ties to the smaller
/// position.
pub fn build_conditioning_sets(
    sites: &SiteSet,
    order: &Ordering,
    m: usize,
) -> Result<ConditioningSets> {
    let n = sites.len();
    if order.len() != n {
        return Err(Error::Dimension(format!(
            "ordering has {} entries for {n} sites",
            order.len()
        )));
    }
    if m < 1 || m > n.saturating_sub(1) {
        return Err(Error::Config(format!(
            "neighbour count m = {m} must satisfy 1 <= m <= n-1 = {}",
            n as i64 - 1
        )));
    }
    let ordered = sites.permuted(&order.perm);
    let sets = (0..n)
        .into_par_iter()
        .map(|i| nearest_succeeding(&ordered, i, m))
        .collect();
    Ok(ConditioningSets { m, sets })
}

fn nearest_succeeding(ordered: &SiteSet, i: usize, m: usize) -> Vec<usize> {
    let n = ordered.len();
    let k = m.min(n - 1 - i);
    if k == 0 {
        return Vec::new();
    }
    let p = ordered.point(i);
    let mut cand: Vec<(f64, usize)> =
        ((i + 1)..n).map(|j| (euclidean(p, ordered.point(j)), j)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    let mut set: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
    set.sort_unstable();
    set
}

/// Ordering over observed ∪ prediction sites for prediction.
#[derive(Debug, Clone)]
pub struct JointOrdering {
    /// Observed sites followed by prediction sites, in their input order.
    pub sites: SiteSet,
    /// Ordering over `sites`: observed block first, each block in max–min order.
    pub ordering: Ordering,
    pub csets: ConditioningSets,
    pub n_observed: usize,
    pub n_prediction: usize,
}

impl JointOrdering {
    /// Max–min permutation of the observed block (indices into the observed set).
    pub fn observed_perm(&self) -> &[usize] {
        &self.ordering.perm[..self.n_observed]
    }

    /// Max–min permutation of the prediction block (indices into the prediction set).
    pub fn prediction_perm(&self) -> Vec<usize> {
        self.ordering.perm[self.n_observed..].iter().map(|&i| i - self.n_observed).collect()
    }
}

/// Single ordering over `observed ∪ prediction` with every observed site
/// before every prediction site, and conditioning sets built on it.
pub fn joint_prediction_ordering(
    observed: &SiteSet,
    prediction: Option<&SiteSet>,
    m: usize,
) -> Result<JointOrdering> {
    let n = observed.len();
    let obs_order = maxmin_order(observed);
    let (sites, perm, u) = match prediction {
        None => (observed.clone(), obs_order.perm, 0),
        Some(pred) => {
            if let Some((a, b)) = first_coincident(observed, pred) {
                return Err(Error::Data {
                    row: b,
                    column: "coordinates".into(),
                    message: format!("prediction site {b} coincides with observed site {a}"),
                });
            }
            let pred_order = maxmin_order(pred);
            let mut perm = obs_order.perm;
            perm.extend(pred_order.perm.iter().map(|&i| i + n));
            (observed.concat(pred)?, perm, pred.len())
        }
    };
    let ordering = Ordering { perm };
    let csets = if sites.len() == 1 {
        ConditioningSets::empty(1)
    } else {
        build_conditioning_sets(&sites, &ordering, m)?
    };
    Ok(JointOrdering { sites, ordering, csets, n_observed: n, n_prediction: u })
}

fn first_coincident(a: &SiteSet, b: &SiteSet) -> Option<(usize, usize)> {
    if a.dim() != b.dim() {
        return None;
    }
    for j in 0..b.len() {
        for i in 0..a.len() {
            if a.point(i) == b.point(j) {
                return Some((i, j));
            }
        }
    }
    None
}
