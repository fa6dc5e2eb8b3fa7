//! Position-indicator OLS with segment-set clustered standard errors.
//!
//! The model regresses a similarity on an intercept plus one dummy per
//! position `p = 2..=n`. Because the dummies are saturated, the intercept is
//! the position-1 mean and `β_p` is the difference between the position-p
//! mean and the position-1 mean. Inference uses the CR1 cluster sandwich
//! and a t reference distribution with `G - 1` degrees of freedom.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, PivotedQr};
use crate::metrics::SimilarityKind;
use crate::scalar::Scalar;

/// Covariance convention written into run metadata.
pub const COVARIANCE_CONVENTION: &str = "CR1 cluster sandwich, scale G/(G-1)*(N-1)/(N-K), t(G-1) reference";

/// One similarity observation entering the regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub cluster: String,
    /// 1-based position.
    pub position: usize,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient<T> {
    /// 1 for the intercept (position-1 baseline), otherwise the position.
    pub position: usize,
    pub estimate: T,
    pub std_error: T,
    pub t_stat: T,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit<T> {
    pub kind: SimilarityKind,
    pub intercept: Coefficient<T>,
    /// `β_p` for `p = 2..=n`, in order.
    pub positions: Vec<Coefficient<T>>,
    /// Full covariance of `[β₀, β₂, …, β_n]`.
    pub covariance: Vec<Vec<T>>,
    pub clusters: usize,
    pub observations: usize,
}

impl<T: Scalar> OlsFit<T> {
    pub fn n_positions(&self) -> usize {
        self.positions.len() + 1
    }

    pub fn beta(&self, position: usize) -> Option<T> {
        self.positions.iter().find(|c| c.position == position).map(|c| c.estimate)
    }
}

/// Design `[1, 1{i=2}, …, 1{i=n}]` for 1-based positions.
pub fn position_design<T: Scalar>(positions: &[usize], n: usize) -> Matrix<T> {
    let mut x = Matrix::zeros(positions.len(), n);
    for (row, &p) in positions.iter().enumerate() {
        x[(row, 0)] = T::one();
        if p >= 2 {
            x[(row, p - 1)] = T::one();
        }
    }
    x
}

/// CR1 cluster-robust covariance `(XᵀX)⁻¹ (Σ_g X_gᵀ e_g e_gᵀ X_g) (XᵀX)⁻¹`.
pub fn cluster_robust_covariance<T: Scalar, C: Eq + Hash>(
    x: &Matrix<T>,
    residuals: &[T],
    clusters: &[C],
) -> Result<Matrix<T>> {
    let qr = PivotedQr::new(x);
    cluster_covariance_with(&qr, x, residuals, clusters)
}

fn cluster_covariance_with<T: Scalar, C: Eq + Hash>(
    qr: &PivotedQr<T>,
    x: &Matrix<T>,
    residuals: &[T],
    clusters: &[C],
) -> Result<Matrix<T>> {
    let (n_obs, k) = (x.rows(), x.cols());
    for len in [residuals.len(), clusters.len()] {
        if len != n_obs {
            return Err(Error::LengthMismatch {
                expected: n_obs,
                actual: len,
            });
        }
    }
    let bread = qr.gram_inverse()?;

    // Score sums per cluster, in first-appearance order.
    let mut index: HashMap<&C, usize> = HashMap::new();
    let mut scores: Vec<Vec<T>> = Vec::new();
    for (row, c) in clusters.iter().enumerate() {
        let g = *index.entry(c).or_insert_with(|| {
            scores.push(vec![T::zero(); k]);
            scores.len() - 1
        });
        let e = residuals[row];
        for (s, &xv) in scores[g].iter_mut().zip(x.row(row)) {
            *s += xv * e;
        }
    }
    let g = scores.len();
    if g < 2 {
        return Err(Error::SingleCluster(g));
    }
    if n_obs <= k {
        return Err(Error::TooFewObservations { obs: n_obs, params: k });
    }
    let mut meat = Matrix::zeros(k, k);
    for s in &scores {
        for i in 0..k {
            for j in 0..k {
                meat[(i, j)] += s[i] * s[j];
            }
        }
    }
    let mut cov = bread.matmul(&meat)?.matmul(&bread)?;
    let gf = T::from_usize_lossy(g);
    let nf = T::from_usize_lossy(n_obs);
    let kf = T::from_usize_lossy(k);
    cov.scale(gf / (gf - T::one()) * (nf - T::one()) / (nf - kf));
    // Symmetrize away rounding asymmetry.
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = (cov[(i, j)] + cov[(j, i)]) / T::lit(2.0);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    Ok(cov)
}

/// Two-sided p-value of `t` under Student's t with `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

fn coefficient<T: Scalar>(position: usize, estimate: T, variance: T, df: f64) -> Coefficient<T> {
    let std_error = variance.max(T::zero()).sqrt();
    let t_stat = if std_error > T::zero() {
        estimate / std_error
    } else if estimate == T::zero() {
        T::zero()
    } else {
        T::infinity().copysign(estimate)
    };
    Coefficient {
        position,
        estimate,
        std_error,
        t_stat,
        p_value: two_sided_p(t_stat.as_f64(), df),
    }
}

/// Fits `value ~ 1 + Σ_{p≥2} 1{position = p}` with clusters from `Observation::cluster`.
pub fn fit_position_ols<T: Scalar>(kind: SimilarityKind, observations: &[Observation<T>]) -> Result<OlsFit<T>> {
    if observations.is_empty() {
        return Err(Error::EmptyInput("no observations".into()));
    }
    let n = observations.iter().map(|o| o.position).max().unwrap_or(0);
    if observations.iter().any(|o| o.position == 0) {
        return Err(Error::InvalidPosition { position: 0, n });
    }
    if n < 2 {
        return Err(Error::RankDeficient { rank: 1, cols: n.max(1) });
    }
    let positions: Vec<usize> = observations.iter().map(|o| o.position).collect();
    let y: Vec<T> = observations.iter().map(|o| o.value).collect();
    let clusters: Vec<&str> = observations.iter().map(|o| o.cluster.as_str()).collect();

    let x = position_design::<T>(&positions, n);
    let qr = PivotedQr::new(&x);
    let beta = qr.solve(&y)?;
    let fitted = x.mul_vec(&beta)?;
    let residuals: Vec<T> = y.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
    let cov = cluster_covariance_with(&qr, &x, &residuals, &clusters)?;

    let g = clusters.iter().collect::<std::collections::HashSet<_>>().len();
    let df = (g - 1) as f64;
    let intercept = coefficient(1, beta[0], cov[(0, 0)], df);
    let positions = (1..n).map(|j| coefficient(j + 1, beta[j], cov[(j, j)], df)).collect();
    Ok(OlsFit {
        kind,
        intercept,
        positions,
        covariance: (0..n).map(|i| cov.row(i).to_vec()).collect(),
        clusters: g,
        observations: observations.len(),
    })
}

/// Reject/retain decision for each `H₀: β_p = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessDecision {
    pub alpha: f64,
    /// `(p, reject)` for `p = 2..=n`.
    pub decisions: Vec<(usize, bool)>,
}

impl FairnessDecision {
    pub fn any_rejected(&self) -> bool {
        self.decisions.iter().any(|&(_, r)| r)
    }

    pub fn all_rejected(&self) -> bool {
        self.decisions.iter().all(|&(_, r)| r)
    }
}

pub fn test_fairness<T: Scalar>(fit: &OlsFit<T>, alpha: f64) -> Result<FairnessDecision> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if fit.positions.is_empty() {
        return Err(Error::InvalidArgument("fit has no position coefficients".into()));
    }
    Ok(FairnessDecision {
        alpha,
        decisions: fit.positions.iter().map(|c| (c.position, c.p_value < alpha)).collect(),
    })
}

/// Group means by position, used as a cross-check of the saturated fit.
pub fn position_means<T: Scalar>(observations: &[Observation<T>]) -> BTreeMap<usize, T> {
    let mut acc: BTreeMap<usize, (T, usize)> = BTreeMap::new();
    for o in observations {
        let e = acc.entry(o.position).or_insert((T::zero(), 0));
        e.0 += o.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(p, (s, c))| (p, s / T::from_usize_lossy(c))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn obs(cluster: &str, position: usize, value: f64) -> Observation<f64> {
        Observation {
            cluster: cluster.into(),
            position,
            value,
        }
    }

    #[test]
    fn small_example_group_means() {
        let data = vec![
            obs("a", 1, 0.9),
            obs("b", 1, 0.8),
            obs("a", 2, 0.6),
            obs("b", 2, 0.4),
            obs("a", 3, 0.7),
            obs("b", 3, 0.5),
        ];
        let fit = fit_position_ols(SimilarityKind::Representation, &data).unwrap();
        assert_abs_diff_eq!(fit.intercept.estimate, 0.85, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.beta(2).unwrap(), -0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.beta(3).unwrap(), -0.25, epsilon = 1e-12);
        assert_eq!(fit.clusters, 2);
        assert_eq!(fit.observations, 6);
    }

    #[test]
    fn constant_response_has_zero_effects_and_errors() {
        let data: Vec<_> = ["a", "b", "c"]
            .iter()
            .flat_map(|c| (1..=3).map(move |p| obs(c, p, 0.5)))
            .collect();
        let fit = fit_position_ols(SimilarityKind::Representation, &data).unwrap();
        for c in &fit.positions {
            assert_abs_diff_eq!(c.estimate, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.std_error, 0.0, epsilon = 1e-12);
        }
        let d = test_fairness(&fit, 0.05).unwrap();
        assert!(!d.any_rejected());
    }

    #[test]
    fn missing_position_is_rank_deficient() {
        let data = vec![obs("a", 1, 0.1), obs("b", 1, 0.2), obs("a", 3, 0.3), obs("b", 3, 0.1)];
        assert!(matches!(
            fit_position_ols(SimilarityKind::Representation, &data),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn single_cluster_rejected() {
        let data = vec![obs("a", 1, 0.1), obs("a", 2, 0.2), obs("a", 1, 0.3), obs("a", 2, 0.1)];
        assert!(matches!(
            fit_position_ols(SimilarityKind::Representation, &data),
            Err(Error::SingleCluster(1))
        ));
    }

    #[test]
    fn zero_residuals_zero_covariance() {
        let x = position_design::<f64>(&[1, 2, 1, 2], 2);
        let cov = cluster_robust_covariance(&x, &[0.0; 4], &["a", "a", "b", "b"]).unwrap();
        assert!(cov.max_abs_diff(&Matrix::zeros(2, 2)) == 0.0);
    }

    #[test]
    fn p_value_edges() {
        assert_eq!(two_sided_p(0.0, 5.0), 1.0);
        assert_eq!(two_sided_p(f64::INFINITY, 5.0), 0.0);
        assert!(two_sided_p(2.571, 5.0) > 0.049 && two_sided_p(2.571, 5.0) < 0.051);
    }

    #[test]
    fn fairness_decision_boundaries() {
        let data = vec![
            obs("a", 1, 0.9),
            obs("b", 1, 0.8),
            obs("c", 1, 0.85),
            obs("a", 2, 0.6),
            obs("b", 2, 0.4),
            obs("c", 2, 0.55),
        ];
        let fit = fit_position_ols(SimilarityKind::Representation, &data).unwrap();
        let p = fit.positions[0].p_value;
        assert!(p < 1.0);
        assert!(test_fairness(&fit, 1.0).unwrap().all_rejected());
        assert!(!test_fairness(&fit, 0.0).unwrap().any_rejected());
        assert!(test_fairness(&fit, 1.5).is_err());
    }
}
