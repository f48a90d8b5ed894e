//! Line graph over scaffold edges.
//!
//! Scaffold edges become nodes; two nodes connect when their ROI pairs share
//! a region. Connections are weighted by the similarity of the normalized
//! consensus-contrast scores, then symmetric-normalized (with self-loops)
//! into the propagation matrix every subject shares.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::EdgeIndexMap;
use crate::math;
use crate::scaffold::Scaffold;

pub const EPS_SIGMA: f64 = 1e-6;
pub const EPS_ADJACENCY: f64 = 1e-6;

/// |d_com| restricted to scaffold edges, standardized into prior scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorScores {
    pub a: Vec<f64>,
    pub mu0: Vec<f64>,
    pub eps_sigma: f64,
}

/// Computes mu0 = (a - mean) / (pop std + eps) over the scaffold enumeration.
pub fn prior_scores(scaffold: &Scaffold) -> PriorScores {
    let a: Vec<f64> = scaffold.selected.iter().map(|&j| scaffold.stats.d_com[j].abs()).collect();
    let mean = math::mean(&a);
    let sd = math::pop_std(&a);
    let denom = sd + EPS_SIGMA;
    let mu0 = a.iter().map(|&v| (v - mean) / denom).collect();
    PriorScores { a, mu0, eps_sigma: EPS_SIGMA }
}

/// Symmetric-normalized propagation matrix in compressed sparse rows,
/// including the self-loop entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl Propagation {
    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, p: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    /// y = A_tilde * x for a dense vector.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for p in 0..self.node_count() {
            let mut acc = 0.0;
            for &(q, w) in self.row(p) {
                acc += w * x[q];
            }
            y[p] = acc;
        }
    }

    pub fn to_dense(&self) -> crate::mat::Mat {
        let n = self.node_count();
        let mut m = crate::mat::Mat::zeros(n, n);
        for p in 0..n {
            for &(q, w) in self.row(p) {
                m.set(p, q, w);
            }
        }
        m
    }
}

/// Scaffold enumeration, weighted adjacency, and (once normalized) the shared
/// propagation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LineGraph {
    /// Edge index j_p for each node p.
    pub enumeration: Vec<usize>,
    node_count: usize,
    /// Off-diagonal adjacency, stored once per unordered pair (p < q).
    adjacency: Vec<(usize, usize, f64)>,
    pub eps_adjacency: f64,
    propagation: Option<Propagation>,
}

impl LineGraph {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn adjacency(&self) -> &[(usize, usize, f64)] {
        &self.adjacency
    }

    pub fn propagation(&self) -> Option<&Propagation> {
        self.propagation.as_ref()
    }

    pub fn adjacency_dense(&self) -> crate::mat::Mat {
        let mut m = crate::mat::Mat::zeros(self.node_count, self.node_count);
        for &(p, q, w) in &self.adjacency {
            m.set(p, q, w);
            m.set(q, p, w);
        }
        m
    }

    /// Reassembles a line graph from serialized parts.
    pub fn from_parts(
        enumeration: Vec<usize>,
        adjacency: Vec<(usize, usize, f64)>,
        eps_adjacency: f64,
    ) -> Self {
        let node_count = enumeration.len();
        LineGraph { enumeration, node_count, adjacency, eps_adjacency, propagation: None }
    }
}

/// Builds the prior-weighted adjacency: nodes whose ROI pairs share a region
/// get weight exp(-|mu0_p - mu0_q| / (range(mu0) + eps)); all other entries
/// are zero. Call [`normalize_propagation`] afterwards.
pub fn build_adjacency(
    scaffold: &Scaffold,
    scores: &PriorScores,
    edges: &EdgeIndexMap,
) -> LineGraph {
    let n = scaffold.len();
    assert_eq!(scores.mu0.len(), n);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &scores.mu0 {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let spread = hi - lo;

    // Bucket scaffold nodes by ROI; distinct pairs share at most one region,
    // so each adjacent pair appears in exactly one bucket.
    let mut by_roi: Vec<Vec<usize>> = vec![Vec::new(); edges.roi_count()];
    for (p, &j) in scaffold.selected.iter().enumerate() {
        let (u, v) = edges.pair(j);
        by_roi[u].push(p);
        by_roi[v].push(p);
    }
    let mut adjacency = Vec::new();
    for bucket in &by_roi {
        for (i, &p) in bucket.iter().enumerate() {
            for &q in &bucket[i + 1..] {
                let gap = (scores.mu0[p] - scores.mu0[q]).abs();
                let w = math::exp(-gap / (spread + EPS_ADJACENCY));
                adjacency.push((p.min(q), p.max(q), w));
            }
        }
    }
    adjacency.sort_by_key(|&(p, q, _)| (p, q));

    LineGraph {
        enumeration: scaffold.selected.clone(),
        node_count: n,
        adjacency,
        eps_adjacency: EPS_ADJACENCY,
        propagation: None,
    }
}

/// Adds self-loops and applies symmetric degree normalization:
/// A_tilde = D^-1/2 (A + I) D^-1/2.
pub fn normalize_propagation(mut lg: LineGraph) -> LineGraph {
    let n = lg.node_count;
    let mut degree = vec![1.0f64; n];
    for &(p, q, w) in &lg.adjacency {
        degree[p] += w;
        degree[q] += w;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / math::sqrt(d)).collect();

    let mut rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|p| vec![(p, inv_sqrt[p] * inv_sqrt[p])])
        .collect();
    for &(p, q, w) in &lg.adjacency {
        let norm = w * inv_sqrt[p] * inv_sqrt[q];
        rows[p].push((q, norm));
        rows[q].push((p, norm));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for row in rows.iter_mut() {
        row.sort_by_key(|&(q, _)| q);
        entries.extend_from_slice(row);
        offsets.push(entries.len());
    }
    lg.propagation = Some(Propagation { offsets, entries });
    lg
}

/// Largest |eigenvalue| of the propagation matrix by power iteration from the
/// all-ones vector (which always overlaps the top eigenvector of the
/// normalized operator).
pub fn spectral_radius(prop: &Propagation, iterations: usize) -> f64 {
    let n = prop.node_count();
    let mut v = vec![1.0 / math::sqrt(n as f64); n];
    let mut next = vec![0.0; n];
    let mut radius = 0.0;
    for _ in 0..iterations {
        prop.apply(&v, &mut next);
        let norm = math::sqrt(next.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 {
            return 0.0;
        }
        radius = norm;
        for (a, b) in v.iter_mut().zip(&next) {
            *a = b / norm;
        }
    }
    radius
}
