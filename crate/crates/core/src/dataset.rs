//! Subject records, static functional connectivity, and the canonical edge
//! indexing shared by every downstream stage.

use alloc::string::String;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::math;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DatasetError {
    #[error("bold matrix needs at least 2 time points and 2 ROIs, got {t}x{p}")]
    BoldTooSmall { t: usize, p: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("need at least {needed} training subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    CovariateDim { expected: usize, got: usize },
}

/// One subject's raw inputs: BOLD time series (T×P), covariates, label, site.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub site_id: String,
    pub label: u8,
    pub bold: Mat,
    pub covariates: Vec<f64>,
}

impl SubjectRecord {
    pub fn new(
        subject_id: String,
        site_id: String,
        label: u8,
        bold: Mat,
        covariates: Vec<f64>,
    ) -> Result<Self, DatasetError> {
        if bold.rows() < 2 || bold.cols() < 2 {
            return Err(DatasetError::BoldTooSmall { t: bold.rows(), p: bold.cols() });
        }
        if bold.data().iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite { what: "bold" });
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite { what: "covariates" });
        }
        if label > 1 {
            return Err(DatasetError::BadLabel(label));
        }
        Ok(SubjectRecord { subject_id, site_id, label, bold, covariates })
    }

    pub fn time_points(&self) -> usize {
        self.bold.rows()
    }

    pub fn roi_count(&self) -> usize {
        self.bold.cols()
    }
}

/// Bijection between edge indices `0..M` and ROI pairs `(u, v)` with
/// `u < v`, in row-major upper-triangular order. ROI indices are zero-based;
/// external reports convert to one-based labels at the serialization boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndexMap {
    p: usize,
    pairs: Vec<(usize, usize)>,
}

impl EdgeIndexMap {
    pub fn new(p: usize) -> Result<Self, DatasetError> {
        if p < 2 {
            return Err(DatasetError::BoldTooSmall { t: 2, p });
        }
        let mut pairs = Vec::with_capacity(p * (p - 1) / 2);
        for u in 0..p {
            for v in u + 1..p {
                pairs.push((u, v));
            }
        }
        Ok(EdgeIndexMap { p, pairs })
    }

    pub fn roi_count(&self) -> usize {
        self.p
    }

    /// Edge count M = P(P-1)/2.
    pub fn edge_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, j: usize) -> (usize, usize) {
        self.pairs[j]
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < v && v < self.p);
        // Row-major upper triangle: rows 0..u contribute (p-1) + ... + (p-u).
        u * (2 * self.p - u - 1) / 2 + (v - u - 1)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Vectorized static FC: entry j is the Pearson correlation of ROI pair
/// `(u_j, v_j)` over the full time series.
#[derive(Debug, Clone, PartialEq)]
pub struct FcVector {
    pub values: Vec<f64>,
}

/// Static FC plus the ROIs that had zero variance (their pairs were set to
/// correlation 0 rather than aborting the subject).
#[derive(Debug, Clone)]
pub struct StaticFc {
    pub fc: FcVector,
    pub zero_variance_rois: Vec<usize>,
}

/// Full-sequence Pearson correlation of every ROI pair, clamped to [-1, 1].
pub fn compute_static_fc(bold: &Mat, edges: &EdgeIndexMap) -> Result<StaticFc, DatasetError> {
    let t = bold.rows();
    let p = bold.cols();
    if t < 2 || p < 2 {
        return Err(DatasetError::BoldTooSmall { t, p });
    }
    assert_eq!(p, edges.roi_count());

    // Center each column once; reuse across all pairs.
    let mut centered = Mat::zeros(t, p);
    let mut ss = Vec::with_capacity(p);
    let mut zero_variance_rois = Vec::new();
    for c in 0..p {
        let col = bold.column(c);
        let m = math::mean(&col);
        let mut s = 0.0;
        for (r, &x) in col.iter().enumerate() {
            let d = x - m;
            centered.set(r, c, d);
            s += d * d;
        }
        if s == 0.0 {
            zero_variance_rois.push(c);
        }
        ss.push(s);
    }

    let mut values = Vec::with_capacity(edges.edge_count());
    for &(u, v) in edges.pairs() {
        if ss[u] == 0.0 || ss[v] == 0.0 {
            values.push(0.0);
            continue;
        }
        let mut num = 0.0;
        for r in 0..t {
            num += centered.get(r, u) * centered.get(r, v);
        }
        let rho = num / (math::sqrt(ss[u]) * math::sqrt(ss[v]));
        values.push(rho.clamp(-1.0, 1.0));
    }
    Ok(StaticFc { fc: FcVector { values }, zero_variance_rois })
}

/// Element-wise mean and population standard deviation of the pooled
/// training-site covariates; frozen after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateStandardizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CovariateStandardizer {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Components with sigma = 0 standardize to 0.
    pub fn standardize(&self, raw: &[f64]) -> Result<Vec<f64>, DatasetError> {
        if raw.len() != self.mu.len() {
            return Err(DatasetError::CovariateDim { expected: self.mu.len(), got: raw.len() });
        }
        Ok(raw
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&q, (&m, &s))| if s == 0.0 { 0.0 } else { (q - m) / s })
            .collect())
    }
}

/// Fits the standardizer on pooled training subjects (population 1/N std).
pub fn fit_standardizer(covariates: &[&[f64]]) -> Result<CovariateStandardizer, DatasetError> {
    if covariates.len() < 2 {
        return Err(DatasetError::TooFewSubjects { needed: 2, got: covariates.len() });
    }
    let d = covariates[0].len();
    for c in covariates {
        if c.len() != d {
            return Err(DatasetError::CovariateDim { expected: d, got: c.len() });
        }
    }
    let n = covariates.len() as f64;
    let mut mu = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    for k in 0..d {
        let col: Vec<f64> = covariates.iter().map(|c| c[k]).collect();
        let m = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|&q| (q - m) * (q - m)).sum::<f64>() / n;
        mu.push(m);
        sigma.push(math::sqrt(var));
    }
    Ok(CovariateStandardizer { mu, sigma })
}
