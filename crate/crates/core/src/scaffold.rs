//! Cross-site population scaffold extraction.
//!
//! Site-level diagnostic contrasts (robust case mean minus robust control
//! mean on deconfounded FC) are aggregated by component-wise median, scored
//! for cross-site sign consistency and bootstrap sign stability, and
//! thresholded into the population scaffold. The margin-stability check
//! compares the scaffold built from fitted nuisance parameters against the
//! scaffold built from oracle parameters, using shared bootstrap weights.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::deconfound::{self, DeconfoundError, ResidualFc, ResidualKind, SiteDeconfounder};
use crate::dataset::FcVector;
use crate::executor::Executor;
use crate::math::{self, sgn};
use crate::rng::{self, tag};
use crate::robust::{self, RobustError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScaffoldError {
    #[error("site {0} has a single class; contrast undefined")]
    SingleClass(String),
    #[error("scaffold estimation requires site residuals, got inference residuals")]
    WrongResidualKind,
    #[error("no site contrasts available")]
    NoContrasts,
    #[error("edge count mismatch: expected {expected}, got {got}")]
    EdgeCount { expected: usize, got: usize },
    #[error("empty scaffold: no edge passed (tau={tau}, eta={eta}, zeta={zeta}); relax the thresholds")]
    EmptyScaffold { tau: f64, eta: f64, zeta: f64 },
    #[error("bootstrap draws must be >= 1")]
    NoBootstrapDraws,
    #[error("empirical and oracle statistics use different bootstrap draws: seed {seed_a}/{seed_b}, B {b_a}/{b_b}")]
    BootstrapMismatch { seed_a: u64, seed_b: u64, b_a: usize, b_b: usize },
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Deconfound(#[from] DeconfoundError),
}

/// One training site's per-edge case-minus-control contrast.
#[derive(Debug, Clone)]
pub struct SiteContrast {
    pub site_id: String,
    pub d: Vec<f64>,
    pub n_case: usize,
    pub n_control: usize,
}

/// Consensus contrast with its reliability scores.
#[derive(Debug, Clone)]
pub struct ScaffoldStatistics {
    pub d_com: Vec<f64>,
    pub kappa: Vec<f64>,
    pub pi: Vec<f64>,
    pub b_draws: usize,
    pub seed: u64,
    /// Per edge, the minimum |weighted-median consensus| over the bootstrap
    /// draws; feeds the oracle margin of the stability check.
    pub min_abs_bootstrap_consensus: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaffoldThresholds {
    pub tau_e: f64,
    pub eta_e: f64,
    pub zeta_e: f64,
}

/// The selected edge set with everything needed to re-check membership.
#[derive(Debug, Clone)]
pub struct Scaffold {
    /// Sorted edge indices into the canonical edge map.
    pub selected: Vec<usize>,
    pub thresholds: ScaffoldThresholds,
    pub stats: ScaffoldStatistics,
}

impl Scaffold {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Huber robust case/control means per edge; errors on single-class sites so
/// callers can skip them with a report entry.
pub fn site_contrast<E: Executor>(
    executor: &E,
    site_id: &str,
    residuals: &[(ResidualFc, u8)],
    tuning: f64,
) -> Result<SiteContrast, ScaffoldError> {
    if residuals.iter().any(|(r, _)| r.kind != ResidualKind::SiteResidual) {
        return Err(ScaffoldError::WrongResidualKind);
    }
    let n_case = residuals.iter().filter(|(_, y)| *y == 1).count();
    let n_control = residuals.len() - n_case;
    if n_case == 0 || n_control == 0 {
        return Err(ScaffoldError::SingleClass(site_id.into()));
    }
    let m = residuals[0].0.values.len();
    for (r, _) in residuals {
        if r.values.len() != m {
            return Err(ScaffoldError::EdgeCount { expected: m, got: r.values.len() });
        }
    }
    let edge_ids: Vec<usize> = (0..m).collect();
    let per_edge: Vec<Result<f64, RobustError>> = executor.map(&edge_ids, |&j| {
        let cases: Vec<f64> =
            residuals.iter().filter(|(_, y)| *y == 1).map(|(r, _)| r.values[j]).collect();
        let controls: Vec<f64> =
            residuals.iter().filter(|(_, y)| *y == 0).map(|(r, _)| r.values[j]).collect();
        Ok(robust::robust_mean(&cases, tuning)?.value
            - robust::robust_mean(&controls, tuning)?.value)
    });
    let mut d = Vec::with_capacity(m);
    for v in per_edge {
        d.push(v?);
    }
    Ok(SiteContrast { site_id: site_id.into(), d, n_case, n_control })
}

/// Component-wise median over sites; even counts take the midpoint of the two
/// middle values (a valid L1 minimizer).
pub fn consensus_median(contrasts: &[SiteContrast]) -> Result<Vec<f64>, ScaffoldError> {
    let m = check_contrasts(contrasts)?;
    Ok((0..m)
        .map(|j| {
            let col: Vec<f64> = contrasts.iter().map(|c| c.d[j]).collect();
            math::median(&col)
        })
        .collect())
}

fn check_contrasts(contrasts: &[SiteContrast]) -> Result<usize, ScaffoldError> {
    let first = contrasts.first().ok_or(ScaffoldError::NoContrasts)?;
    let m = first.d.len();
    for c in contrasts {
        if c.d.len() != m {
            return Err(ScaffoldError::EdgeCount { expected: m, got: c.d.len() });
        }
    }
    Ok(m)
}

/// Fraction of sites whose contrast sign matches the consensus sign, with
/// sgn(0) = 0 (an exactly-zero site contrast never matches a signed
/// consensus).
pub fn sign_consistency(
    contrasts: &[SiteContrast],
    d_com: &[f64],
) -> Result<Vec<f64>, ScaffoldError> {
    let m = check_contrasts(contrasts)?;
    if d_com.len() != m {
        return Err(ScaffoldError::EdgeCount { expected: m, got: d_com.len() });
    }
    let n = contrasts.len() as f64;
    Ok((0..m)
        .map(|j| {
            let matches =
                contrasts.iter().filter(|c| sgn(c.d[j]) == sgn(d_com[j])).count();
            matches as f64 / n
        })
        .collect())
}

/// Multiplicity weights of `b_draws` seeded resamples of the site set.
/// Depends only on (seed, b_draws, n_sites), so empirical and oracle
/// statistics built from the same configuration share identical draws.
pub fn bootstrap_weight_draws(n_sites: usize, b_draws: usize, seed: u64) -> Vec<Vec<u64>> {
    (0..b_draws)
        .map(|b| {
            let mut rng = rng::stream(seed, &[tag::BOOTSTRAP, b as u64]);
            let mut weights = vec![0u64; n_sites];
            for _ in 0..n_sites {
                weights[rng.random_range(0..n_sites)] += 1;
            }
            weights
        })
        .collect()
}

/// Weighted median: sort by value, accumulate weights, and take the first
/// value whose cumulative weight reaches half the total; an exact tie at half
/// takes the midpoint with the next weighted value. Entries with zero weight
/// are absent from the resample and ignored.
pub fn weighted_median(values: &[f64], weights: &[u64]) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    let mut pairs: Vec<(f64, u64)> = values
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .filter(|&(_, w)| w > 0)
        .collect();
    debug_assert!(!pairs.is_empty(), "empty resample");
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: u64 = pairs.iter().map(|&(_, w)| w).sum();
    let mut cum = 0u64;
    for (k, &(v, w)) in pairs.iter().enumerate() {
        cum += w;
        if 2 * cum >= total {
            return if 2 * cum == total { 0.5 * (v + pairs[k + 1].0) } else { v };
        }
    }
    unreachable!("cumulative weight must reach the total")
}

struct BootstrapOutcome {
    pi: Vec<f64>,
    min_abs: Vec<f64>,
}

fn stability_from_weights(
    contrasts: &[SiteContrast],
    d_com: &[f64],
    draws: &[Vec<u64>],
) -> BootstrapOutcome {
    let m = d_com.len();
    let mut match_counts = vec![0usize; m];
    let mut min_abs = vec![f64::INFINITY; m];
    for weights in draws {
        for j in 0..m {
            let col: Vec<f64> = contrasts.iter().map(|c| c.d[j]).collect();
            let med = weighted_median(&col, weights);
            if sgn(med) == sgn(d_com[j]) {
                match_counts[j] += 1;
            }
            if med.abs() < min_abs[j] {
                min_abs[j] = med.abs();
            }
        }
    }
    let b = draws.len() as f64;
    BootstrapOutcome {
        pi: match_counts.iter().map(|&c| c as f64 / b).collect(),
        min_abs,
    }
}

/// Fraction of seeded site resamples whose weighted-median consensus keeps
/// the full-sample consensus sign.
pub fn bootstrap_stability(
    contrasts: &[SiteContrast],
    d_com: &[f64],
    b_draws: usize,
    seed: u64,
) -> Result<Vec<f64>, ScaffoldError> {
    if b_draws == 0 {
        return Err(ScaffoldError::NoBootstrapDraws);
    }
    let m = check_contrasts(contrasts)?;
    if d_com.len() != m {
        return Err(ScaffoldError::EdgeCount { expected: m, got: d_com.len() });
    }
    let draws = bootstrap_weight_draws(contrasts.len(), b_draws, seed);
    Ok(stability_from_weights(contrasts, d_com, &draws).pi)
}

/// Consensus, sign consistency, and bootstrap stability in one pass.
pub fn compute_statistics(
    contrasts: &[SiteContrast],
    b_draws: usize,
    seed: u64,
) -> Result<ScaffoldStatistics, ScaffoldError> {
    if b_draws == 0 {
        return Err(ScaffoldError::NoBootstrapDraws);
    }
    let d_com = consensus_median(contrasts)?;
    let kappa = sign_consistency(contrasts, &d_com)?;
    let draws = bootstrap_weight_draws(contrasts.len(), b_draws, seed);
    let outcome = stability_from_weights(contrasts, &d_com, &draws);
    Ok(ScaffoldStatistics {
        d_com,
        kappa,
        pi: outcome.pi,
        b_draws,
        seed,
        min_abs_bootstrap_consensus: outcome.min_abs,
    })
}

/// Nearest-rank percentile of |d_com|; the default tau_E uses the 80th.
pub fn tau_from_percentile(d_com: &[f64], percentile: f64) -> f64 {
    debug_assert!(!d_com.is_empty());
    let mut abs: Vec<f64> = d_com.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let m = abs.len();
    let frac = (percentile / 100.0).clamp(0.0, 1.0);
    let rank = ((frac * m as f64).ceil() as usize).clamp(1, m);
    abs[rank - 1]
}

/// Membership under the three-way conjunction: |d_com| strictly above tau_E,
/// kappa and pi at or above their thresholds.
pub fn membership(stats: &ScaffoldStatistics, thresholds: &ScaffoldThresholds) -> Vec<bool> {
    stats
        .d_com
        .iter()
        .zip(stats.kappa.iter().zip(&stats.pi))
        .map(|(&d, (&k, &p))| {
            d.abs() > thresholds.tau_e && k >= thresholds.eta_e && p >= thresholds.zeta_e
        })
        .collect()
}

/// Applies the thresholds; an empty result is an error because every
/// downstream stage needs at least one scaffold edge.
pub fn extract_scaffold(
    stats: ScaffoldStatistics,
    thresholds: ScaffoldThresholds,
) -> Result<Scaffold, ScaffoldError> {
    let selected: Vec<usize> = membership(&stats, &thresholds)
        .iter()
        .enumerate()
        .filter_map(|(j, &inside)| inside.then_some(j))
        .collect();
    if selected.is_empty() {
        return Err(ScaffoldError::EmptyScaffold {
            tau: thresholds.tau_e,
            eta: thresholds.eta_e,
            zeta: thresholds.zeta_e,
        });
    }
    Ok(Scaffold { selected, thresholds, stats })
}

/// One site's raw material for the margin-stability check.
pub struct MarginSiteData<'a> {
    pub site_id: &'a str,
    /// (static FC, standardized covariates, label) per subject.
    pub subjects: &'a [(FcVector, Vec<f64>, u8)],
    pub fitted: &'a SiteDeconfounder,
    pub oracle: &'a SiteDeconfounder,
}

/// Per-edge perturbations, margins, and scaffold-decision agreement.
#[derive(Debug, Clone)]
pub struct MarginReport {
    pub delta: Vec<f64>,
    pub m_star: Vec<f64>,
    pub empirical_in: Vec<bool>,
    pub oracle_in: Vec<bool>,
    pub agreement: Vec<bool>,
}

impl MarginReport {
    /// Indices where the guarantee applies (delta below the oracle margin)
    /// but the decisions disagree; must always be empty.
    pub fn violations(&self) -> Vec<usize> {
        (0..self.delta.len())
            .filter(|&j| self.delta[j] < self.m_star[j] && !self.agreement[j])
            .collect()
    }
}

/// Recomputes the scaffold from fitted and from oracle nuisance parameters
/// over the same subjects and the same bootstrap weights, then checks that no
/// edge with a perturbation below its oracle margin changes its decision.
pub fn margin_stability_check<E: Executor>(
    executor: &E,
    sites: &[MarginSiteData<'_>],
    thresholds: &ScaffoldThresholds,
    b_draws: usize,
    seed: u64,
    tuning: f64,
) -> Result<MarginReport, ScaffoldError> {
    if sites.is_empty() {
        return Err(ScaffoldError::NoContrasts);
    }
    let m = sites[0].fitted.edge_count();

    let mut delta = vec![0.0f64; m];
    let mut empirical_contrasts = Vec::with_capacity(sites.len());
    let mut oracle_contrasts = Vec::with_capacity(sites.len());
    let mut min_site_abs = vec![f64::INFINITY; m];

    for site in sites {
        // Perturbation: per class, the sup over subjects of the nuisance
        // prediction error, summed over the two classes.
        let mut sup = [vec![0.0f64; m], vec![0.0f64; m]];
        for (_, q, y) in site.subjects {
            for j in 0..m {
                let mut err = site.fitted.b[j] - site.oracle.b[j];
                for (k, &qk) in q.iter().enumerate() {
                    err += qk * (site.fitted.gamma.get(k, j) - site.oracle.gamma.get(k, j));
                }
                let slot = &mut sup[*y as usize][j];
                if err.abs() > *slot {
                    *slot = err.abs();
                }
            }
        }
        for j in 0..m {
            let site_delta = sup[0][j] + sup[1][j];
            if site_delta > delta[j] {
                delta[j] = site_delta;
            }
        }

        let emp = contrast_with(executor, site, site.fitted, tuning)?;
        let ora = contrast_with(executor, site, site.oracle, tuning)?;
        for j in 0..m {
            if ora.d[j].abs() < min_site_abs[j] {
                min_site_abs[j] = ora.d[j].abs();
            }
        }
        empirical_contrasts.push(emp);
        oracle_contrasts.push(ora);
    }

    let emp_stats = compute_statistics(&empirical_contrasts, b_draws, seed)?;
    let ora_stats = compute_statistics(&oracle_contrasts, b_draws, seed)?;
    compare_scaffolds(&emp_stats, &ora_stats, thresholds, &delta, &min_site_abs)
}

/// Builds the margin report from precomputed statistics; the bootstrap draws
/// behind both sides must be identical.
pub fn compare_scaffolds(
    empirical: &ScaffoldStatistics,
    oracle: &ScaffoldStatistics,
    thresholds: &ScaffoldThresholds,
    delta: &[f64],
    min_oracle_site_abs: &[f64],
) -> Result<MarginReport, ScaffoldError> {
    if empirical.seed != oracle.seed || empirical.b_draws != oracle.b_draws {
        return Err(ScaffoldError::BootstrapMismatch {
            seed_a: empirical.seed,
            seed_b: oracle.seed,
            b_a: empirical.b_draws,
            b_b: oracle.b_draws,
        });
    }
    let m = delta.len();
    let m_star: Vec<f64> = (0..m)
        .map(|j| {
            let dcom = oracle.d_com[j].abs();
            let mut margin = dcom;
            margin = margin.min((dcom - thresholds.tau_e).abs());
            margin = margin.min(min_oracle_site_abs[j]);
            margin = margin.min(oracle.min_abs_bootstrap_consensus[j]);
            margin
        })
        .collect();
    let empirical_in = membership(empirical, thresholds);
    let oracle_in = membership(oracle, thresholds);
    let agreement: Vec<bool> =
        empirical_in.iter().zip(&oracle_in).map(|(a, b)| a == b).collect();
    Ok(MarginReport { delta: delta.to_vec(), m_star, empirical_in, oracle_in, agreement })
}

fn contrast_with<E: Executor>(
    executor: &E,
    site: &MarginSiteData<'_>,
    dec: &SiteDeconfounder,
    tuning: f64,
) -> Result<SiteContrast, ScaffoldError> {
    let residuals: Result<Vec<(ResidualFc, u8)>, DeconfoundError> = site
        .subjects
        .iter()
        .map(|(fc, q, y)| Ok((deconfound::residualize_site(fc, q, dec, &dec.site_id)?, *y)))
        .collect();
    site_contrast(executor, site.site_id, &residuals?, tuning)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::Sequential;
    use alloc::string::ToString;

    fn contrast(site: &str, d: Vec<f64>) -> SiteContrast {
        SiteContrast { site_id: site.to_string(), d, n_case: 5, n_control: 5 }
    }

    #[test]
    fn consensus_is_component_median() {
        let c = vec![
            contrast("a", vec![1.0]),
            contrast("b", vec![2.0]),
            contrast("c", vec![10.0]),
        ];
        assert_eq!(consensus_median(&c).unwrap(), vec![2.0]);
    }

    #[test]
    fn even_count_takes_midpoint() {
        let c = vec![contrast("a", vec![1.0]), contrast("b", vec![3.0])];
        assert_eq!(consensus_median(&c).unwrap(), vec![2.0]);
    }

    #[test]
    fn sign_consistency_counts_matches() {
        let c = vec![
            contrast("a", vec![0.5]),
            contrast("b", vec![0.2]),
            contrast("c", vec![-0.1]),
        ];
        let kappa = sign_consistency(&c, &[0.2]).unwrap();
        assert!((kappa[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_zero_site_contrast_is_a_mismatch() {
        let c = vec![contrast("a", vec![0.0]), contrast("b", vec![1.0])];
        let kappa = sign_consistency(&c, &[0.5]).unwrap();
        assert!((kappa[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn site_contrast_simple_means() {
        let res = |v: f64| ResidualFc {
            values: vec![v],
            kind: ResidualKind::SiteResidual,
        };
        let data = vec![(res(1.0), 1u8), (res(1.0), 1), (res(0.0), 0), (res(0.0), 0)];
        let c = site_contrast(&Sequential, "s", &data, 1.345).unwrap();
        assert!((c.d[0] - 1.0).abs() < 1e-10);
        assert_eq!((c.n_case, c.n_control), (2, 2));

        let identical = vec![(res(0.3), 1u8), (res(0.3), 0), (res(0.3), 1), (res(0.3), 0)];
        let c = site_contrast(&Sequential, "s", &identical, 1.345).unwrap();
        assert!(c.d[0].abs() < 1e-12);
    }

    #[test]
    fn single_class_site_is_rejected() {
        let res = ResidualFc { values: vec![1.0], kind: ResidualKind::SiteResidual };
        let data = vec![(res.clone(), 1u8), (res, 1)];
        assert_eq!(
            site_contrast(&Sequential, "solo", &data, 1.345).unwrap_err(),
            ScaffoldError::SingleClass("solo".to_string())
        );
    }

    #[test]
    fn inference_residuals_are_rejected() {
        let res = ResidualFc { values: vec![1.0], kind: ResidualKind::InferenceResidual };
        let data = vec![(res.clone(), 1u8), (res, 0)];
        assert_eq!(
            site_contrast(&Sequential, "s", &data, 1.345).unwrap_err(),
            ScaffoldError::WrongResidualKind
        );
    }

    #[test]
    fn weighted_median_matches_unit_weight_median() {
        let values = [3.0, 1.0, 2.0, 5.0];
        assert_eq!(weighted_median(&values, &[1, 1, 1, 1]), math::median(&values));
        let odd = [3.0, 1.0, 2.0];
        assert_eq!(weighted_median(&odd, &[1, 1, 1]), 2.0);
    }

    #[test]
    fn weighted_median_respects_multiplicity() {
        // Weight 3 on the value 1.0 outvotes the rest.
        assert_eq!(weighted_median(&[1.0, 2.0, 3.0], &[3, 1, 1]), 1.0);
        // Tie at exactly half the total: midpoint with the next value.
        assert_eq!(weighted_median(&[1.0, 5.0], &[1, 1]), 3.0);
    }

    #[test]
    fn bootstrap_is_deterministic_and_singleton_is_stable() {
        let c = vec![contrast("a", vec![0.4, -0.2])];
        let d_com = consensus_median(&c).unwrap();
        let pi1 = bootstrap_stability(&c, &d_com, 64, 9).unwrap();
        let pi2 = bootstrap_stability(&c, &d_com, 64, 9).unwrap();
        assert_eq!(pi1, pi2);
        assert_eq!(pi1, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_sites_are_fully_stable() {
        let c = vec![
            contrast("a", vec![0.4]),
            contrast("b", vec![0.4]),
            contrast("c", vec![0.4]),
        ];
        let d_com = consensus_median(&c).unwrap();
        let pi = bootstrap_stability(&c, &d_com, 100, 3).unwrap();
        assert_eq!(pi, vec![1.0]);
    }

    #[test]
    fn extraction_conjunction_and_boundaries() {
        let stats = ScaffoldStatistics {
            d_com: vec![1.0, 0.1],
            kappa: vec![1.0, 1.0],
            pi: vec![1.0, 1.0],
            b_draws: 1,
            seed: 0,
            min_abs_bootstrap_consensus: vec![1.0, 0.1],
        };
        let th = ScaffoldThresholds { tau_e: 0.5, eta_e: 0.75, zeta_e: 0.7 };
        let s = extract_scaffold(stats.clone(), th).unwrap();
        assert_eq!(s.selected, vec![0]);

        // kappa below eta excludes regardless of contrast size.
        let mut low_kappa = stats.clone();
        low_kappa.kappa = vec![0.5, 0.5];
        assert!(matches!(
            extract_scaffold(low_kappa, th),
            Err(ScaffoldError::EmptyScaffold { .. })
        ));

        // |d_com| equal to tau is excluded (strict >); kappa equal to eta is
        // included (>=).
        let boundary = ScaffoldStatistics {
            d_com: vec![0.5, 0.8],
            kappa: vec![0.75, 0.75],
            pi: vec![0.7, 0.7],
            b_draws: 1,
            seed: 0,
            min_abs_bootstrap_consensus: vec![0.5, 0.8],
        };
        let s = extract_scaffold(boundary, th).unwrap();
        assert_eq!(s.selected, vec![1]);
    }

    #[test]
    fn tau_percentile_nearest_rank() {
        let d = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(tau_from_percentile(&d, 80.0), 0.8);
        assert_eq!(tau_from_percentile(&[0.3], 80.0), 0.3);
    }

    #[test]
    fn bootstrap_mismatch_is_contract_error() {
        let stats = |seed: u64| ScaffoldStatistics {
            d_com: vec![0.5],
            kappa: vec![1.0],
            pi: vec![1.0],
            b_draws: 8,
            seed,
            min_abs_bootstrap_consensus: vec![0.5],
        };
        let th = ScaffoldThresholds { tau_e: 0.1, eta_e: 0.5, zeta_e: 0.5 };
        let err =
            compare_scaffolds(&stats(1), &stats(2), &th, &[0.0], &[0.5]).unwrap_err();
        assert!(matches!(err, ScaffoldError::BootstrapMismatch { .. }));
    }
}
