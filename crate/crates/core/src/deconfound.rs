//! Site-aware confounder removal.
//!
//! For each training site, every FC edge gets its own Huber regression of the
//! edge value on the standardized covariates. Training subjects are
//! residualized with their own site's fit; unseen subjects are residualized
//! with the frozen equal-site average of the per-site fits, so no target-site
//! estimation ever happens at inference.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::FcVector;
use crate::executor::Executor;
use crate::mat::Mat;
use crate::robust::{self, EdgeFit, RobustError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DeconfoundError {
    #[error("site {site} has {got} subjects but needs at least {needed}")]
    TooFewSubjects { site: String, needed: usize, got: usize },
    #[error("residualize_site called with deconfounder of site {dec_site} on subject from {subject_site}")]
    SiteMismatch { dec_site: String, subject_site: String },
    #[error("deconfounder bank has not been aggregated")]
    NotAggregated,
    #[error("no site produced a usable fit")]
    NoFittedSites,
    #[error("edge count mismatch: expected {expected}, got {got}")]
    EdgeCount { expected: usize, got: usize },
    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    CovariateDim { expected: usize, got: usize },
    #[error(transparent)]
    Robust(#[from] RobustError),
}

/// Which deconfounder produced a residual. Scaffold estimation consumes only
/// site residuals; inference consumes only the frozen aggregated kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    SiteResidual,
    InferenceResidual,
}

#[derive(Debug, Clone)]
pub struct ResidualFc {
    pub values: Vec<f64>,
    pub kind: ResidualKind,
}

/// Per-site edge-wise intercepts and confounder coefficients.
#[derive(Debug, Clone)]
pub struct SiteDeconfounder {
    pub site_id: String,
    /// Edge intercepts, length M.
    pub b: Vec<f64>,
    /// Confounder coefficients, d x M (one column per edge).
    pub gamma: Mat,
    /// Huber tuning constant used for every edge fit.
    pub delta: f64,
    /// Edges whose normal equations needed ridge damping.
    pub degenerate_edges: Vec<usize>,
    /// Edges that hit the iteration cap before the coefficient tolerance.
    pub unconverged_edges: Vec<usize>,
}

impl SiteDeconfounder {
    pub fn edge_count(&self) -> usize {
        self.b.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.gamma.rows()
    }

    /// b + Gammaᵀ q for one subject, length M.
    fn predict(&self, standardized: &[f64]) -> Vec<f64> {
        predict_edges(&self.b, &self.gamma, standardized)
    }
}

fn predict_edges(b: &[f64], gamma: &Mat, standardized: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut out = b.to_vec();
    for (k, &q) in standardized.iter().enumerate() {
        if q == 0.0 {
            continue;
        }
        let row = gamma.row(k);
        for j in 0..m {
            out[j] += row[j] * q;
        }
    }
    out
}

/// Fits the per-edge Huber regressions for one site.
///
/// `subjects` pairs each FC vector with the subject's standardized covariates.
pub fn fit_site_deconfounder<E: Executor>(
    executor: &E,
    site_id: &str,
    subjects: &[(FcVector, Vec<f64>)],
    tuning: f64,
) -> Result<SiteDeconfounder, DeconfoundError> {
    let n = subjects.len();
    let d = subjects.first().map_or(0, |(_, q)| q.len());
    if n < d + 2 {
        return Err(DeconfoundError::TooFewSubjects {
            site: site_id.into(),
            needed: d + 2,
            got: n,
        });
    }
    let m = subjects[0].0.values.len();
    for (fc, q) in subjects {
        if fc.values.len() != m {
            return Err(DeconfoundError::EdgeCount { expected: m, got: fc.values.len() });
        }
        if q.len() != d {
            return Err(DeconfoundError::CovariateDim { expected: d, got: q.len() });
        }
    }

    let mut design = Mat::zeros(n, d);
    for (i, (_, q)) in subjects.iter().enumerate() {
        design.row_mut(i).copy_from_slice(q);
    }

    let edge_ids: Vec<usize> = (0..m).collect();
    let fits: Vec<Result<EdgeFit, RobustError>> = executor.map(&edge_ids, |&j| {
        let responses: Vec<f64> = subjects.iter().map(|(fc, _)| fc.values[j]).collect();
        robust::huber_fit_edge(&responses, &design, tuning)
    });

    let mut b = Vec::with_capacity(m);
    let mut gamma = Mat::zeros(d, m);
    let mut degenerate_edges = Vec::new();
    let mut unconverged_edges = Vec::new();
    for (j, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        b.push(fit.intercept);
        for k in 0..d {
            gamma.set(k, j, fit.gamma[k]);
        }
        if fit.degenerate {
            degenerate_edges.push(j);
        }
        if !fit.converged {
            unconverged_edges.push(j);
        }
    }

    Ok(SiteDeconfounder {
        site_id: site_id.into(),
        b,
        gamma,
        delta: tuning,
        degenerate_edges,
        unconverged_edges,
    })
}

/// The same Huber machinery on pooled data from every site; this is the
/// global-deconfounding baseline the residual-bias property is tested against.
pub fn fit_pooled_deconfounder<E: Executor>(
    executor: &E,
    subjects: &[(FcVector, Vec<f64>)],
    tuning: f64,
) -> Result<SiteDeconfounder, DeconfoundError> {
    fit_site_deconfounder(executor, "<pooled>", subjects, tuning)
}

/// Removes one site's nuisance trend from a training subject's FC.
pub fn residualize_site(
    fc: &FcVector,
    standardized: &[f64],
    dec: &SiteDeconfounder,
    subject_site: &str,
) -> Result<ResidualFc, DeconfoundError> {
    if dec.site_id != subject_site {
        return Err(DeconfoundError::SiteMismatch {
            dec_site: dec.site_id.clone(),
            subject_site: subject_site.into(),
        });
    }
    if fc.values.len() != dec.edge_count() {
        return Err(DeconfoundError::EdgeCount { expected: dec.edge_count(), got: fc.values.len() });
    }
    if standardized.len() != dec.covariate_dim() {
        return Err(DeconfoundError::CovariateDim {
            expected: dec.covariate_dim(),
            got: standardized.len(),
        });
    }
    let trend = dec.predict(standardized);
    let values = fc.values.iter().zip(&trend).map(|(r, t)| r - t).collect();
    Ok(ResidualFc { values, kind: ResidualKind::SiteResidual })
}

/// Per-site fits plus the frozen equal-site average used at inference.
#[derive(Debug, Clone)]
pub struct DeconfounderBank {
    pub per_site: BTreeMap<String, SiteDeconfounder>,
    /// Sites excluded from fitting (too few subjects), with their counts.
    pub skipped_sites: Vec<(String, usize)>,
    aggregated: Option<(Vec<f64>, Mat)>,
}

impl DeconfounderBank {
    /// Fits every site that has enough subjects; the rest land in
    /// `skipped_sites`. Call [`DeconfounderBank::aggregate`] before inference.
    pub fn fit<E: Executor>(
        executor: &E,
        sites: &[(String, Vec<(FcVector, Vec<f64>)>)],
        tuning: f64,
    ) -> Result<Self, DeconfoundError> {
        let mut per_site = BTreeMap::new();
        let mut skipped_sites = Vec::new();
        for (site_id, subjects) in sites {
            match fit_site_deconfounder(executor, site_id, subjects, tuning) {
                Ok(dec) => {
                    per_site.insert(site_id.clone(), dec);
                }
                Err(DeconfoundError::TooFewSubjects { got, .. }) => {
                    skipped_sites.push((site_id.clone(), got));
                }
                Err(other) => return Err(other),
            }
        }
        if per_site.is_empty() {
            return Err(DeconfoundError::NoFittedSites);
        }
        Ok(DeconfounderBank { per_site, skipped_sites, aggregated: None })
    }

    pub fn site(&self, site_id: &str) -> Option<&SiteDeconfounder> {
        self.per_site.get(site_id)
    }

    /// Equal-site average of the per-site fits, independent of site sizes.
    pub fn aggregate(&mut self) -> Result<(), DeconfoundError> {
        let n_sites = self.per_site.len();
        if n_sites == 0 {
            return Err(DeconfoundError::NoFittedSites);
        }
        let first = self.per_site.values().next().expect("non-empty");
        let m = first.edge_count();
        let d = first.covariate_dim();
        let mut b = alloc::vec![0.0; m];
        let mut gamma = Mat::zeros(d, m);
        for dec in self.per_site.values() {
            for j in 0..m {
                b[j] += dec.b[j];
            }
            for k in 0..d {
                let row = dec.gamma.row(k);
                for j in 0..m {
                    gamma.add_assign_at(k, j, row[j]);
                }
            }
        }
        let inv = 1.0 / n_sites as f64;
        for v in b.iter_mut() {
            *v *= inv;
        }
        for v in gamma.data_mut() {
            *v *= inv;
        }
        self.aggregated = Some((b, gamma));
        Ok(())
    }

    pub fn is_aggregated(&self) -> bool {
        self.aggregated.is_some()
    }

    /// (b̄, Γ̄) after [`DeconfounderBank::aggregate`].
    pub fn aggregated(&self) -> Option<(&[f64], &Mat)> {
        self.aggregated.as_ref().map(|(b, g)| (b.as_slice(), g))
    }

    /// Restores a previously serialized aggregate without refitting.
    pub fn set_aggregated(&mut self, b: Vec<f64>, gamma: Mat) {
        self.aggregated = Some((b, gamma));
    }
}

/// Residualizes an unseen subject with the frozen site-agnostic deconfounder.
pub fn residualize_inference(
    fc: &FcVector,
    standardized: &[f64],
    bank: &DeconfounderBank,
) -> Result<ResidualFc, DeconfoundError> {
    let (b, gamma) = bank.aggregated().ok_or(DeconfoundError::NotAggregated)?;
    if fc.values.len() != b.len() {
        return Err(DeconfoundError::EdgeCount { expected: b.len(), got: fc.values.len() });
    }
    if standardized.len() != gamma.rows() {
        return Err(DeconfoundError::CovariateDim {
            expected: gamma.rows(),
            got: standardized.len(),
        });
    }
    let trend = predict_edges(b, gamma, standardized);
    let values = fc.values.iter().zip(&trend).map(|(r, t)| r - t).collect();
    Ok(ResidualFc { values, kind: ResidualKind::InferenceResidual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::Sequential;
    use alloc::string::ToString;
    use alloc::vec;

    fn fc(values: Vec<f64>) -> FcVector {
        FcVector { values }
    }

    #[test]
    fn constant_site_fc_yields_intercept_only() {
        let subjects: Vec<(FcVector, Vec<f64>)> = (0..6)
            .map(|i| (fc(vec![0.4, -0.2]), vec![i as f64 - 2.5]))
            .collect();
        let dec = fit_site_deconfounder(&Sequential, "s1", &subjects, 1.345).unwrap();
        assert!((dec.b[0] - 0.4).abs() < 1e-9);
        assert!((dec.b[1] + 0.2).abs() < 1e-9);
        assert!(dec.gamma.get(0, 0).abs() < 1e-9);
        assert!(dec.gamma.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn planted_edge_dominates_recovered_gamma() {
        // Edge 0 depends on the covariate, edges 1..4 are constant.
        let subjects: Vec<(FcVector, Vec<f64>)> = (0..20)
            .map(|i| {
                let q = (i as f64) / 10.0 - 1.0;
                (fc(vec![0.1 + 0.8 * q, 0.3, -0.1, 0.2]), vec![q])
            })
            .collect();
        let dec = fit_site_deconfounder(&Sequential, "s1", &subjects, 1.345).unwrap();
        let planted = dec.gamma.get(0, 0).abs();
        for j in 1..4 {
            assert!(planted > 10.0 * dec.gamma.get(0, j).abs());
        }
    }

    #[test]
    fn residual_is_exact_on_oracle_parameters() {
        // fc = b* + Gamma*ᵀ q + s*; residualizing with the oracle returns s*.
        let b_star = vec![0.2, -0.3];
        let mut gamma = Mat::zeros(1, 2);
        gamma.set(0, 0, 0.5);
        gamma.set(0, 1, -0.7);
        let dec = SiteDeconfounder {
            site_id: "s1".to_string(),
            b: b_star.clone(),
            gamma: gamma.clone(),
            delta: 1.345,
            degenerate_edges: vec![],
            unconverged_edges: vec![],
        };
        let q = vec![1.3];
        let s_star = [0.05, -0.02];
        let fc_values: Vec<f64> = (0..2)
            .map(|j| b_star[j] + gamma.get(0, j) * q[0] + s_star[j])
            .collect();
        let res = residualize_site(&fc(fc_values), &q, &dec, "s1").unwrap();
        for (r, s) in res.values.iter().zip(s_star) {
            assert!((r - s).abs() < 1e-15);
        }
        assert_eq!(res.kind, ResidualKind::SiteResidual);
    }

    #[test]
    fn site_mismatch_is_a_contract_error() {
        let dec = SiteDeconfounder {
            site_id: "s1".to_string(),
            b: vec![0.0],
            gamma: Mat::zeros(1, 1),
            delta: 1.345,
            degenerate_edges: vec![],
            unconverged_edges: vec![],
        };
        let err = residualize_site(&fc(vec![0.0]), &[0.0], &dec, "s2").unwrap_err();
        assert!(matches!(err, DeconfoundError::SiteMismatch { .. }));
    }

    #[test]
    fn aggregation_is_equal_site_weighted() {
        let mk = |site: &str, b0: f64, n: usize| {
            (
                site.to_string(),
                (0..n)
                    .map(|i| (fc(vec![b0]), vec![(i as f64 % 5.0) - 2.0]))
                    .collect::<Vec<_>>(),
            )
        };
        // Sizes 10 and 1000, intercepts 0 and 2: the average must be 1.
        let sites = vec![mk("a", 0.0, 10), mk("b", 2.0, 1000)];
        let mut bank = DeconfounderBank::fit(&Sequential, &sites, 1.345).unwrap();
        bank.aggregate().unwrap();
        let (b, _) = bank.aggregated().unwrap();
        assert!((b[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn single_site_aggregate_is_identity() {
        let sites = vec![(
            "a".to_string(),
            (0..8)
                .map(|i| (fc(vec![0.3, 0.1]), vec![i as f64 * 0.1]))
                .collect::<Vec<_>>(),
        )];
        let mut bank = DeconfounderBank::fit(&Sequential, &sites, 1.345).unwrap();
        bank.aggregate().unwrap();
        let (b, _) = bank.aggregated().unwrap();
        let dec = bank.site("a").unwrap();
        assert_eq!(b, dec.b.as_slice());
    }

    #[test]
    fn tiny_sites_are_skipped_with_report() {
        let sites = vec![
            (
                "big".to_string(),
                (0..6)
                    .map(|i| (fc(vec![0.2]), vec![i as f64]))
                    .collect::<Vec<_>>(),
            ),
            ("tiny".to_string(), vec![(fc(vec![0.9]), vec![0.0])]),
        ];
        let bank = DeconfounderBank::fit(&Sequential, &sites, 1.345).unwrap();
        assert!(bank.site("tiny").is_none());
        assert_eq!(bank.skipped_sites, vec![("tiny".to_string(), 1)]);
    }

    #[test]
    fn inference_requires_aggregation() {
        let sites = vec![(
            "a".to_string(),
            (0..6)
                .map(|i| (fc(vec![0.2]), vec![i as f64]))
                .collect::<Vec<_>>(),
        )];
        let mut bank = DeconfounderBank::fit(&Sequential, &sites, 1.345).unwrap();
        let err = residualize_inference(&fc(vec![0.5]), &[0.0], &bank).unwrap_err();
        assert_eq!(err, DeconfoundError::NotAggregated);
        bank.aggregate().unwrap();
        let res = residualize_inference(&fc(vec![0.5]), &[0.0], &bank).unwrap();
        assert_eq!(res.kind, ResidualKind::InferenceResidual);
        // q = 0 leaves residual = fc - b̄.
        let (b, _) = bank.aggregated().unwrap();
        assert!((res.values[0] - (0.5 - b[0])).abs() < 1e-12);
    }
}
