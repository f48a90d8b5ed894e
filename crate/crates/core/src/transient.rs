//! Sliding-window FC trajectories over scaffold edges and their
//! fixed-dimensional temporal descriptors.

use alloc::vec::Vec;

use crate::dataset::EdgeIndexMap;
use crate::deconfound::{ResidualFc, ResidualKind};
use crate::mat::Mat;
use crate::math;
use crate::scaffold::Scaffold;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransientError {
    #[error("window length must be >= 3, stride >= 1, rho clamp in (0,1)")]
    BadConfig,
    #[error("time series too short: {t} points, need at least the window length {w}")]
    TooShort { t: usize, w: usize },
    #[error("empty scaffold")]
    EmptyScaffold,
    #[error("residual kind {got:?} does not match the phase expecting {expected:?}")]
    ResidualKindMismatch { expected: ResidualKind, got: ResidualKind },
    #[error("edge count mismatch: expected {expected}, got {got}")]
    EdgeCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    /// Window length in time points.
    pub w: usize,
    /// Stride in time points.
    pub stride: usize,
    /// Windowed correlations are clamped to |rho| <= rho_clamp before the
    /// Fisher transform, which diverges at |rho| = 1.
    pub rho_clamp: f64,
    /// Floor inside the log of the descriptor features.
    pub eps_feature: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { w: 30, stride: 5, rho_clamp: 1.0 - 1e-6, eps_feature: 1e-6 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), TransientError> {
        if self.w < 3
            || self.stride < 1
            || !(self.rho_clamp > 0.0 && self.rho_clamp < 1.0)
            || !(self.eps_feature > 0.0)
        {
            return Err(TransientError::BadConfig);
        }
        Ok(())
    }
}

/// Number of complete windows: floor((T - W) / stride) + 1.
pub fn window_count(t: usize, w: usize, stride: usize) -> usize {
    debug_assert!(t >= w && stride >= 1);
    (t - w) / stride + 1
}

/// Fisher z-transform, 0.5 * ln((1 + rho) / (1 - rho)).
pub fn fisher_z(rho: f64) -> f64 {
    0.5 * (math::ln_1p(rho) - math::ln_1p(-rho))
}

/// Windowed, Fisher-transformed correlations of one scaffold edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTrajectory {
    pub c: Vec<f64>,
}

/// Windowed Pearson correlations of ROI pair (u, v), clamped and
/// Fisher-transformed. Zero-variance windows contribute rho = 0, matching the
/// static-FC degenerate rule.
pub fn window_trajectory(
    bold: &Mat,
    pair: (usize, usize),
    cfg: &WindowConfig,
) -> Result<EdgeTrajectory, TransientError> {
    cfg.validate()?;
    let t = bold.rows();
    if t < cfg.w {
        return Err(TransientError::TooShort { t, w: cfg.w });
    }
    let (u, v) = pair;
    let l = window_count(t, cfg.w, cfg.stride);
    let mut c = Vec::with_capacity(l);
    for win in 0..l {
        let start = win * cfg.stride;
        let rho = windowed_pearson(bold, u, v, start, cfg.w);
        let clamped = rho.clamp(-cfg.rho_clamp, cfg.rho_clamp);
        c.push(fisher_z(clamped));
    }
    Ok(EdgeTrajectory { c })
}

fn windowed_pearson(bold: &Mat, u: usize, v: usize, start: usize, w: usize) -> f64 {
    let mut mu_u = 0.0;
    let mut mu_v = 0.0;
    for r in start..start + w {
        mu_u += bold.get(r, u);
        mu_v += bold.get(r, v);
    }
    mu_u /= w as f64;
    mu_v /= w as f64;
    let mut num = 0.0;
    let mut ss_u = 0.0;
    let mut ss_v = 0.0;
    for r in start..start + w {
        let a = bold.get(r, u) - mu_u;
        let b = bold.get(r, v) - mu_v;
        num += a * b;
        ss_u += a * a;
        ss_v += b * b;
    }
    if ss_u == 0.0 || ss_v == 0.0 {
        return 0.0;
    }
    (num / (math::sqrt(ss_u) * math::sqrt(ss_v))).clamp(-1.0, 1.0)
}

/// Temporal mean, volatility (population std), and flexibility (range).
pub fn temporal_descriptors(traj: &EdgeTrajectory) -> (f64, f64, f64) {
    debug_assert!(!traj.c.is_empty());
    let mean = math::mean(&traj.c);
    let s = math::pop_std(&traj.c);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &traj.c {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (mean, s, hi - lo)
}

/// Per-subject scaffold-node features: one row per scaffold edge, columns
/// (deconfounded FC, log(s + eps), log(f + eps)).
#[derive(Debug, Clone)]
pub struct NodeFeatures {
    pub h0: Mat,
}

pub fn build_node_features(
    residual: &ResidualFc,
    bold: &Mat,
    scaffold: &Scaffold,
    edges: &EdgeIndexMap,
    cfg: &WindowConfig,
    expected_kind: ResidualKind,
) -> Result<NodeFeatures, TransientError> {
    if residual.kind != expected_kind {
        return Err(TransientError::ResidualKindMismatch {
            expected: expected_kind,
            got: residual.kind,
        });
    }
    if scaffold.is_empty() {
        return Err(TransientError::EmptyScaffold);
    }
    if residual.values.len() != edges.edge_count() {
        return Err(TransientError::EdgeCount {
            expected: edges.edge_count(),
            got: residual.values.len(),
        });
    }
    let mut h0 = Mat::zeros(scaffold.len(), 3);
    for (p, &j) in scaffold.selected.iter().enumerate() {
        let traj = window_trajectory(bold, edges.pair(j), cfg)?;
        let (_, s, f) = temporal_descriptors(&traj);
        h0.set(p, 0, residual.values[j]);
        h0.set(p, 1, math::ln(s + cfg.eps_feature));
        h0.set(p, 2, math::ln(f + cfg.eps_feature));
    }
    Ok(NodeFeatures { h0 })
}

/// Standardized per-column mean gap between two feature sets; a diagnostic
/// for the shift between training features (site residuals) and inference
/// features (aggregated residuals).
pub fn feature_shift(a: &[NodeFeatures], b: &[NodeFeatures]) -> [f64; 3] {
    let collect = |set: &[NodeFeatures], col: usize| -> Vec<f64> {
        set.iter().flat_map(|f| f.h0.column(col)).collect()
    };
    let mut out = [0.0; 3];
    for (col, slot) in out.iter_mut().enumerate() {
        let xa = collect(a, col);
        let xb = collect(b, col);
        if xa.is_empty() || xb.is_empty() {
            continue;
        }
        let pooled: Vec<f64> = xa.iter().chain(&xb).copied().collect();
        let sd = math::pop_std(&pooled);
        let gap = (math::mean(&xa) - math::mean(&xb)).abs();
        *slot = if sd > 0.0 { gap / sd } else { gap };
    }
    out
}
