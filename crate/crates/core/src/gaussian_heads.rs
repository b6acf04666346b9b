//! Closed-form Gaussian discriminants from an aggregate bundle.
//!
//! `estimate_params` turns sums into means, priors, covariances and diagonal
//! variances; `fit_head` factorizes whatever the chosen rule needs and
//! `score`/`predict` evaluate it. Four rules are supported:
//!
//! * `NbDiag` — per-class diagonal variances,
//! * `Lda` — shared pooled covariance, linear scores,
//! * `Qda` — per-class full covariances,
//! * `DlrQda(r)` — per-class diagonal-plus-low-rank covariances
//!   `sigma_bar I + U U^T`, scored through the Woodbury identity so cost per
//!   class is `O(k r)` instead of `O(k^2)`.

use crate::datamodel::{GaussianParams, LabeledEmbeddingSet, MomentBundle};
use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView1};

/// Covariance shrinkage toward a scaled identity:
/// `(1 - alpha) * Sigma + alpha * (tr(Sigma)/k) * I`.
///
/// Class covariances are estimated from fewer samples than the pooled one,
/// so they get their own (heavier) coefficient.
#[derive(Debug, Clone, Copy)]
pub struct Shrinkage {
    /// Coefficient for the pooled covariance.
    pub alpha: f64,
    /// Coefficient for per-class covariances; `None` reuses `alpha`.
    pub class_alpha: Option<f64>,
    /// Absolute floor for diagonal variances; `None` uses
    /// `1e-6 x mean variance`.
    pub variance_floor: Option<f64>,
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage {
            alpha: 0.1,
            class_alpha: Some(0.3),
            variance_floor: None,
        }
    }
}

impl Shrinkage {
    pub fn none() -> Self {
        Shrinkage {
            alpha: 0.0,
            class_alpha: Some(0.0),
            variance_floor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ca = self.class_alpha.unwrap_or(self.alpha);
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&ca) {
            return Err(Error::InvalidParameter(format!(
                "shrinkage coefficients must lie in [0, 1], got {} / {ca}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn class(&self) -> f64 {
        self.class_alpha.unwrap_or(self.alpha)
    }
}

/// Apply shrinkage to a covariance matrix.
pub fn shrink_covariance(sigma: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let k = sigma.nrows();
    let ridge = alpha * sigma.diag().sum() / k as f64;
    let mut out = sigma.mapv(|v| (1.0 - alpha) * v);
    for i in 0..k {
        out[[i, i]] += ridge;
    }
    linalg::symmetrize(&out)
}

/// Estimate Gaussian parameters from an aggregate bundle.
///
/// Classes with fewer than `min_count.max(1)` samples are dropped and
/// recorded; remaining rows are remapped densely. The pooled covariance uses
/// the `N - C` denominator, per-class covariances use `N_c - 1`; a retained
/// class with a single sample falls back to the pooled covariance.
pub fn estimate_params(
    agg: &MomentBundle,
    shrink: &Shrinkage,
    min_count: u64,
) -> Result<GaussianParams> {
    shrink.validate()?;
    let k = agg.dim;
    let threshold = min_count.max(1);
    let retained: Vec<usize> = (0..agg.class_count)
        .filter(|&c| agg.counts[c] >= threshold)
        .collect();
    let dropped: Vec<usize> = (0..agg.class_count)
        .filter(|&c| agg.counts[c] < threshold)
        .collect();
    if retained.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no class reaches the minimum count {threshold}"
        )));
    }
    if !dropped.is_empty() {
        log::warn!(
            "dropping {} class(es) below the minimum count {threshold}: {dropped:?}",
            dropped.len()
        );
    }
    let c_r = retained.len();
    let counts: Vec<u64> = retained.iter().map(|&c| agg.counts[c]).collect();
    let n: u64 = counts.iter().sum();

    let mut class_means = Array2::<f64>::zeros((c_r, k));
    for (row, &c) in retained.iter().enumerate() {
        let nc = agg.counts[c] as f64;
        class_means
            .row_mut(row)
            .assign(&agg.first_moments.row(c).mapv(|v| v / nc));
    }
    let log_priors = Array1::from_iter(counts.iter().map(|&nc| (nc as f64 / n as f64).ln()));

    // Pooled covariance from B when sent, otherwise from the class second
    // moments (their sum is B restricted to retained classes).
    let has_second = agg.global_second.is_some() || agg.class_second.is_some();
    let pooled_cov = if has_second {
        if n <= c_r as u64 {
            return Err(Error::InsufficientData(format!(
                "pooled covariance needs more samples ({n}) than classes ({c_r})"
            )));
        }
        let mut b_used = match &agg.class_second {
            Some(ss) => {
                let mut sum = Array2::<f64>::zeros((k, k));
                for &c in &retained {
                    sum += &ss[c];
                }
                sum
            }
            None => {
                let mut b = agg.global_second.as_ref().unwrap().clone();
                // Remove what we can of dropped classes: exact for single
                // samples (their S_c is the mean outer product), approximate
                // for larger dropped counts.
                for &c in &dropped {
                    let nc = agg.counts[c] as f64;
                    if nc >= 1.0 {
                        let mu = agg.first_moments.row(c).mapv(|v| v / nc);
                        for i in 0..k {
                            for j in 0..k {
                                b[[i, j]] -= nc * mu[i] * mu[j];
                            }
                        }
                    }
                }
                b
            }
        };
        for (row, &c) in retained.iter().enumerate() {
            let nc = agg.counts[c] as f64;
            let mu = class_means.row(row);
            for i in 0..k {
                for j in 0..k {
                    b_used[[i, j]] -= nc * mu[i] * mu[j];
                }
            }
        }
        let denom = (n - c_r as u64) as f64;
        let raw = b_used.mapv(|v| v / denom);
        Some(shrink_covariance(&raw, shrink.alpha))
    } else {
        None
    };

    let class_covs = if let Some(ss) = &agg.class_second {
        let mut covs = Vec::with_capacity(c_r);
        for (row, &c) in retained.iter().enumerate() {
            let nc = agg.counts[c];
            if nc >= 2 {
                let mu = class_means.row(row);
                let mut s = ss[c].clone();
                for i in 0..k {
                    for j in 0..k {
                        s[[i, j]] -= nc as f64 * mu[i] * mu[j];
                    }
                }
                let raw = s.mapv(|v| v / (nc - 1) as f64);
                covs.push(shrink_covariance(&raw, shrink.class()));
            } else {
                log::warn!(
                    "class {c} has a single sample: its covariance falls back to the pooled one"
                );
                covs.push(pooled_cov.clone().ok_or_else(|| {
                    Error::InsufficientData(format!(
                        "class {c} needs the pooled covariance as fallback but none is available"
                    ))
                })?);
            }
        }
        Some(covs)
    } else {
        None
    };

    // Diagonal variances from D, or from diag(S) which is the same sum.
    let sq_rows: Option<Array2<f64>> = match (&agg.class_sq_sums, &agg.class_second) {
        (Some(d), _) => {
            let mut rows = Array2::<f64>::zeros((c_r, k));
            for (row, &c) in retained.iter().enumerate() {
                rows.row_mut(row).assign(&d.row(c));
            }
            Some(rows)
        }
        (None, Some(ss)) => {
            let mut rows = Array2::<f64>::zeros((c_r, k));
            for (row, &c) in retained.iter().enumerate() {
                for j in 0..k {
                    rows[[row, j]] = ss[c][[j, j]];
                }
            }
            Some(rows)
        }
        (None, None) => None,
    };
    let class_vars = sq_rows.map(|rows| {
        let mut vars = Array2::<f64>::zeros((c_r, k));
        for row in 0..c_r {
            let nc = counts[row] as f64;
            for j in 0..k {
                let v = rows[[row, j]] / nc - class_means[[row, j]] * class_means[[row, j]];
                vars[[row, j]] = v.max(0.0);
            }
        }
        let mean_var = vars.iter().sum::<f64>() / (c_r * k) as f64;
        let floor = shrink
            .variance_floor
            .unwrap_or(1e-6 * mean_var)
            .max(f64::MIN_POSITIVE);
        vars.mapv_inplace(|v| v.max(floor));
        vars
    });

    Ok(GaussianParams {
        dim: k,
        class_labels: retained,
        dropped_classes: dropped,
        counts,
        class_means,
        log_priors,
        pooled_cov,
        class_covs,
        class_vars,
    })
}

/// Which discriminant rule to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    NbDiag,
    Lda,
    Qda,
    DlrQda { rank: usize },
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::NbDiag => write!(f, "nb_diag"),
            HeadKind::Lda => write!(f, "lda"),
            HeadKind::Qda => write!(f, "qda"),
            HeadKind::DlrQda { rank } => write!(f, "dlr_qda(r={rank})"),
        }
    }
}

/// Per-class factor state for the diagonal-plus-low-rank rule.
#[derive(Debug, Clone)]
pub struct DlrClassCache {
    /// Isotropic diagonal level `sigma_bar`.
    pub sigma_bar: f64,
    /// `k x r_c` factor; `r_c` can fall below the requested rank when the
    /// spectrum flattens early.
    pub factor: Array2<f64>,
    /// Cholesky of the capacitance `I + U^T D^{-1} U`.
    pub cap_chol: Array2<f64>,
    /// `log det (D + U U^T)` via the matrix determinant lemma.
    pub logdet: f64,
}

#[derive(Debug, Clone)]
pub(crate) enum HeadCache {
    NbDiag {
        /// Per class, `sum_j ln v_cj`.
        log_var_sums: Vec<f64>,
    },
    Lda {
        /// Rows are `W_c = Sigma_pool^{-1} mu_c`.
        weights: Array2<f64>,
        /// `-1/2 mu_c^T W_c + log pi_c`.
        biases: Vec<f64>,
    },
    Qda {
        chols: Vec<Array2<f64>>,
        logdets: Vec<f64>,
    },
    DlrQda {
        classes: Vec<DlrClassCache>,
    },
}

/// A fitted closed-form head, immutable after construction.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    kind: HeadKind,
    params: GaussianParams,
    cache: HeadCache,
}

/// Fit the requested rule, factorizing the matrices it needs.
pub fn fit_head(params: &GaussianParams, kind: HeadKind) -> Result<GaussianHead> {
    let cache = match kind {
        HeadKind::NbDiag => {
            let vars = params
                .class_vars
                .as_ref()
                .ok_or_else(|| Error::MissingField("class_vars (send D or S)".into()))?;
            let log_var_sums = vars
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|v| v.ln()).sum())
                .collect();
            HeadCache::NbDiag { log_var_sums }
        }
        HeadKind::Lda => {
            let pooled = params
                .pooled_cov
                .as_ref()
                .ok_or_else(|| Error::MissingField("pooled_cov (send B or S)".into()))?;
            let l = linalg::cholesky(pooled)?;
            let mut weights = Array2::<f64>::zeros(params.class_means.raw_dim());
            let mut biases = Vec::with_capacity(params.class_count());
            for (c, mu) in params.class_means.rows().into_iter().enumerate() {
                let w = linalg::chol_solve(&l, &mu);
                let b = -0.5 * mu.dot(&w) + params.log_priors[c];
                weights.row_mut(c).assign(&w);
                biases.push(b);
            }
            HeadCache::Lda { weights, biases }
        }
        HeadKind::Qda => {
            let covs = params
                .class_covs
                .as_ref()
                .ok_or_else(|| Error::MissingField("class_covs (send S)".into()))?;
            let mut chols = Vec::with_capacity(covs.len());
            let mut logdets = Vec::with_capacity(covs.len());
            for cov in covs {
                let l = linalg::cholesky(cov)?;
                logdets.push(linalg::chol_logdet(&l));
                chols.push(l);
            }
            HeadCache::Qda { chols, logdets }
        }
        HeadKind::DlrQda { rank } => {
            let covs = params
                .class_covs
                .as_ref()
                .ok_or_else(|| Error::MissingField("class_covs (send S)".into()))?;
            let classes = covs
                .iter()
                .map(|cov| fit_dlr_class(cov, rank))
                .collect::<Result<Vec<_>>>()?;
            HeadCache::DlrQda { classes }
        }
    };
    Ok(GaussianHead {
        kind,
        params: params.clone(),
        cache,
    })
}

/// Probabilistic-PCA style split of a covariance into `sigma_bar I + U U^T`.
///
/// `sigma_bar` is the mean of the trailing `k - r` eigenvalues (the smallest
/// eigenvalue when `r >= k`), and `U` collects the leading eigenvectors
/// scaled by `sqrt(lambda_i - sigma_bar)`. The reconstruction is positive
/// definite whenever the input is.
fn fit_dlr_class(cov: &Array2<f64>, rank: usize) -> Result<DlrClassCache> {
    let k = cov.nrows();
    let (vals, vecs) = linalg::sym_eig(cov)?;
    let min_eig = vals[k - 1];
    let sigma_bar = if rank >= k {
        min_eig
    } else {
        vals.iter().skip(rank).sum::<f64>() / (k - rank) as f64
    };
    if sigma_bar <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eig });
    }
    let keep: Vec<usize> = (0..rank.min(k)).filter(|&i| vals[i] > sigma_bar).collect();
    let mut factor = Array2::<f64>::zeros((k, keep.len()));
    for (col, &i) in keep.iter().enumerate() {
        let scale = (vals[i] - sigma_bar).sqrt();
        factor
            .column_mut(col)
            .assign(&vecs.column(i).mapv(|v| v * scale));
    }
    let r_c = keep.len();
    // Capacitance I + U^T D^{-1} U with D = sigma_bar I.
    let mut cap = factor.t().dot(&factor).mapv(|v| v / sigma_bar);
    for i in 0..r_c {
        cap[[i, i]] += 1.0;
    }
    let cap_chol = linalg::cholesky(&cap)?;
    let logdet = k as f64 * sigma_bar.ln() + linalg::chol_logdet(&cap_chol);
    Ok(DlrClassCache {
        sigma_bar,
        factor,
        cap_chol,
        logdet,
    })
}

impl GaussianHead {
    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn params(&self) -> &GaussianParams {
        &self.params
    }

    pub(crate) fn cache(&self) -> &HeadCache {
        &self.cache
    }

    /// Number of retained classes.
    pub fn class_count(&self) -> usize {
        self.params.class_count()
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Count of free parameters the head stores.
    pub fn parameter_count(&self) -> usize {
        let c = self.class_count();
        let k = self.dim();
        c // priors
            + c * k // means
            + match &self.cache {
                HeadCache::NbDiag { .. } => c * k,
                HeadCache::Lda { .. } => k * (k + 1) / 2,
                HeadCache::Qda { .. } => c * k * (k + 1) / 2,
                HeadCache::DlrQda { classes } => {
                    classes.iter().map(|cl| cl.factor.len() + 1).sum::<usize>()
                }
            }
    }

    /// Log-score per retained class.
    pub fn score(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "input length {} vs head dim {}",
                x.len(),
                self.dim()
            )));
        }
        let c = self.class_count();
        let mut scores = Array1::<f64>::zeros(c);
        match &self.cache {
            HeadCache::NbDiag { log_var_sums } => {
                let vars = self.params.class_vars.as_ref().unwrap();
                for cl in 0..c {
                    let mu = self.params.class_means.row(cl);
                    let mut quad = 0.0;
                    for j in 0..x.len() {
                        let d = x[j] - mu[j];
                        quad += d * d / vars[[cl, j]];
                    }
                    scores[cl] = -0.5 * (quad + log_var_sums[cl]) + self.params.log_priors[cl];
                }
            }
            HeadCache::Lda { weights, biases } => {
                for cl in 0..c {
                    scores[cl] = weights.row(cl).dot(x) + biases[cl];
                }
            }
            HeadCache::Qda { chols, logdets } => {
                for cl in 0..c {
                    let diff = x - &self.params.class_means.row(cl);
                    let y = linalg::solve_lower(&chols[cl], &diff.view());
                    let quad = y.dot(&y);
                    scores[cl] = -0.5 * (logdets[cl] + quad) + self.params.log_priors[cl];
                }
            }
            HeadCache::DlrQda { classes } => {
                for cl in 0..c {
                    let dlr = &classes[cl];
                    let diff = x - &self.params.class_means.row(cl);
                    let a = diff.mapv(|v| v / dlr.sigma_bar);
                    let mut quad = diff.dot(&a);
                    if dlr.factor.ncols() > 0 {
                        let w = dlr.factor.t().dot(&a);
                        let t = linalg::chol_solve(&dlr.cap_chol, &w.view());
                        quad -= w.dot(&t);
                    }
                    scores[cl] = -0.5 * (dlr.logdet + quad) + self.params.log_priors[cl];
                }
            }
        }
        Ok(scores)
    }

    /// Scores for every row of `x`.
    pub fn score_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((x.nrows(), self.class_count()));
        for (i, row) in x.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.score(&row)?);
        }
        Ok(out)
    }

    /// Predicted original labels, ties broken toward the lower class index.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<u32>> {
        let scores = self.score_batch(x)?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|row| self.params.to_original_label(argmax(&row)) as u32)
            .collect())
    }

    /// Top-1 accuracy on a labeled set.
    pub fn accuracy(&self, set: &LabeledEmbeddingSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let preds = self.predict(set.features())?;
        let hits = preds
            .iter()
            .zip(set.labels())
            .filter(|(p, y)| **p == **y)
            .count();
        Ok(hits as f64 / set.len() as f64)
    }

    /// Per-original-class accuracy (classes absent from the set give NaN).
    pub fn per_class_accuracy(&self, set: &LabeledEmbeddingSet) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let preds = self.predict(set.features())?;
        let mut hits = vec![0usize; set.class_count()];
        let mut totals = vec![0usize; set.class_count()];
        for (p, &y) in preds.iter().zip(set.labels()) {
            totals[y as usize] += 1;
            if *p == y {
                hits[y as usize] += 1;
            }
        }
        Ok(hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect())
    }
}

/// Index of the row maximum; earlier index wins ties.
pub fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client_stats::{compute_bundle, StatsRequest};
    use crate::datamodel::LabeledEmbeddingSet;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn full_request() -> StatsRequest {
        StatsRequest {
            want_b: true,
            want_s: true,
            want_d: true,
            want_m34: false,
            project_with: None,
        }
    }

    fn two_class_params() -> GaussianParams {
        // classes {[0,0],[2,0]} and {[0,2],[0,4]}
        let set = LabeledEmbeddingSet::new(
            array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 4.0]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        estimate_params(&bundle, &Shrinkage::none(), 1).unwrap()
    }

    #[test]
    fn hand_computed_two_class_estimates() {
        let p = two_class_params();
        assert_eq!(p.class_means.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(p.class_means.row(1).to_vec(), vec![0.0, 3.0]);
        let priors = p.priors();
        assert_abs_diff_eq!(priors[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(priors[1], 0.5, epsilon = 1e-12);
        // (B - sum N_c mu mu^T) / (N - C) with N - C = 2
        let pooled = p.pooled_cov.as_ref().unwrap();
        assert_abs_diff_eq!(pooled[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled[[1, 1]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_shrinkage_gives_scaled_identity() {
        let sigma = array![[4.0, 1.0], [1.0, 2.0]];
        let shrunk = shrink_covariance(&sigma, 1.0);
        let level = (4.0 + 2.0) / 2.0;
        assert_eq!(shrunk, array![[level, 0.0], [0.0, level]]);
    }

    #[test]
    fn single_sample_class_falls_back_to_pooled() {
        let set = LabeledEmbeddingSet::new(
            array![[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [0.0, 2.0], [0.0, 4.0]],
            vec![0, 0, 2, 1, 1],
            3,
        )
        .unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        let p = estimate_params(&bundle, &Shrinkage::none(), 1).unwrap();
        let covs = p.class_covs.as_ref().unwrap();
        assert_eq!(&covs[2], p.pooled_cov.as_ref().unwrap());
    }

    #[test]
    fn min_count_drops_and_remaps() {
        let set = LabeledEmbeddingSet::new(
            array![[0.0, 0.0], [2.0, 0.0], [9.0, 9.0], [0.0, 2.0], [0.0, 4.0]],
            vec![0, 0, 1, 2, 2],
            3,
        )
        .unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        let p = estimate_params(&bundle, &Shrinkage::none(), 2).unwrap();
        assert_eq!(p.class_labels, vec![0, 2]);
        assert_eq!(p.dropped_classes, vec![1]);
        // With B-only statistics the dropped singleton is removed exactly.
        let req_b = StatsRequest {
            want_b: true,
            ..Default::default()
        };
        let b_only = compute_bundle(&set, &req_b).unwrap();
        let p2 = estimate_params(&b_only, &Shrinkage::none(), 2).unwrap();
        let (a, b) = (
            p.pooled_cov.as_ref().unwrap(),
            p2.pooled_cov.as_ref().unwrap(),
        );
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn all_classes_below_minimum_is_an_error() {
        let set = LabeledEmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1], 2).unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        assert!(estimate_params(&bundle, &Shrinkage::none(), 5).is_err());
    }

    #[test]
    fn pooled_with_too_few_samples_is_an_error() {
        let set = LabeledEmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1], 2).unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        // N = C = 2: pooled denominator would be zero.
        assert!(matches!(
            estimate_params(&bundle, &Shrinkage::none(), 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn lda_on_identity_pooled_recovers_means_as_weights() {
        let p = two_class_params();
        let head = fit_head(&p, HeadKind::Lda).unwrap();
        match head.cache() {
            HeadCache::Lda { weights, .. } => {
                for (w, m) in weights.iter().zip(p.class_means.iter()) {
                    assert_abs_diff_eq!(w, m, epsilon = 1e-12);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lda_two_class_hand_query() {
        // x = [1, 1.5] with identity pooled covariance and equal priors:
        // squared distances are 2.25 to mu_0 = [1,0] and 3.25 to mu_1 = [0,3],
        // so the linear rule picks class 0.
        let p = two_class_params();
        let head = fit_head(&p, HeadKind::Lda).unwrap();
        let s = head.score(&array![1.0, 1.5].view()).unwrap();
        assert_abs_diff_eq!(s[0] - s[1], 0.5, epsilon = 1e-12);
        let pred = head.predict(&array![[1.0, 1.5]]).unwrap();
        assert_eq!(pred, vec![0]);
    }

    #[test]
    fn mean_queries_hit_their_class() {
        // Equal priors, shared (near-identity) covariance, separated means:
        // querying each mean must return its own class under every rule.
        let c = 4;
        let k = 6;
        let n_per = 80;
        let mut features = Array2::<f64>::zeros((c * n_per, k));
        let mut labels = Vec::new();
        let mut ctr = 0;
        for cl in 0..c {
            for i in 0..n_per {
                for j in 0..k {
                    features[[cl * n_per + i, j]] =
                        5.0 * f64::from(j == cl) + crate::prng::normal(31, ctr);
                    ctr += 1;
                }
                labels.push(cl as u32);
            }
        }
        let set = LabeledEmbeddingSet::new(features, labels, c).unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        let p = estimate_params(&bundle, &Shrinkage::default(), 1).unwrap();
        for kind in [
            HeadKind::Lda,
            HeadKind::Qda,
            HeadKind::NbDiag,
            HeadKind::DlrQda { rank: 2 },
        ] {
            let head = fit_head(&p, kind).unwrap();
            for cl in 0..c {
                let s = head.score(&p.class_means.row(cl)).unwrap();
                assert_eq!(argmax(&s.view()), cl, "{kind} at mean {cl}");
            }
        }
    }

    #[test]
    fn missing_fields_are_reported() {
        let set = LabeledEmbeddingSet::new(
            array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 4.0]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let req = StatsRequest::default(); // counts and A only
        let bundle = compute_bundle(&set, &req).unwrap();
        let p = estimate_params(&bundle, &Shrinkage::none(), 1).unwrap();
        assert!(matches!(
            fit_head(&p, HeadKind::Lda),
            Err(Error::MissingField(_))
        ));
        assert!(matches!(
            fit_head(&p, HeadKind::Qda),
            Err(Error::MissingField(_))
        ));
        assert!(matches!(
            fit_head(&p, HeadKind::NbDiag),
            Err(Error::MissingField(_))
        ));
    }

    fn random_gaussian_params(seed: u64, c: usize, k: usize) -> GaussianParams {
        let n_per = 60;
        let mut features = Array2::<f64>::zeros((c * n_per, k));
        let mut labels = Vec::new();
        let mut ctr = 0u64;
        for cl in 0..c {
            for i in 0..n_per {
                for j in 0..k {
                    features[[cl * n_per + i, j]] =
                        crate::prng::normal(seed + cl as u64, ctr) * (1.0 + 0.3 * cl as f64)
                            + cl as f64;
                    ctr += 1;
                }
                labels.push(cl as u32);
            }
        }
        let set = LabeledEmbeddingSet::new(features, labels, c).unwrap();
        let bundle = compute_bundle(&set, &full_request()).unwrap();
        estimate_params(
            &bundle,
            &Shrinkage {
                alpha: 0.1,
                class_alpha: Some(0.1),
                variance_floor: None,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn dlr_full_rank_matches_qda() {
        let k = 8;
        let p = random_gaussian_params(5, 3, k);
        let qda = fit_head(&p, HeadKind::Qda).unwrap();
        let dlr = fit_head(&p, HeadKind::DlrQda { rank: k }).unwrap();
        for t in 0..20 {
            let x = Array1::from_iter((0..k).map(|j| crate::prng::normal(900, (t * k + j) as u64)));
            let a = qda.score(&x.view()).unwrap();
            let b = dlr.score(&x.view()).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                let rel = (u - v).abs() / u.abs().max(1.0);
                assert!(rel < 1e-8, "full-rank DLR score differs: {u} vs {v}");
            }
        }
    }

    #[test]
    fn dlr_rank_zero_is_isotropic() {
        let p = random_gaussian_params(6, 3, 6);
        let dlr = fit_head(&p, HeadKind::DlrQda { rank: 0 }).unwrap();
        match dlr.cache() {
            HeadCache::DlrQda { classes } => {
                for (cl, cov) in classes.iter().zip(p.class_covs.as_ref().unwrap()) {
                    assert_eq!(cl.factor.ncols(), 0);
                    let want = cov.diag().sum() / 6.0;
                    assert_abs_diff_eq!(cl.sigma_bar, want, epsilon = 1e-10);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dlr_logdet_matches_dense() {
        // Lemma log-determinant vs dense Cholesky of sigma_bar I + U U^T.
        let k = 16;
        let p = random_gaussian_params(7, 2, k);
        let dlr = fit_head(&p, HeadKind::DlrQda { rank: 4 }).unwrap();
        match dlr.cache() {
            HeadCache::DlrQda { classes } => {
                for cl in classes {
                    let mut dense = cl.factor.dot(&cl.factor.t());
                    for i in 0..k {
                        dense[[i, i]] += cl.sigma_bar;
                    }
                    let l = linalg::cholesky(&dense).unwrap();
                    let want = linalg::chol_logdet(&l);
                    assert!((cl.logdet - want).abs() < 1e-8 * want.abs().max(1.0));
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn woodbury_quadratic_matches_dense_solve() {
        let k = 16;
        let p = random_gaussian_params(8, 2, k);
        let dlr = fit_head(&p, HeadKind::DlrQda { rank: 4 }).unwrap();
        let (classes, means) = match dlr.cache() {
            HeadCache::DlrQda { classes } => (classes, &p.class_means),
            _ => unreachable!(),
        };
        for (c, cl) in classes.iter().enumerate() {
            let mut dense = cl.factor.dot(&cl.factor.t());
            for i in 0..k {
                dense[[i, i]] += cl.sigma_bar;
            }
            let l = linalg::cholesky(&dense).unwrap();
            for t in 0..10 {
                let x = Array1::from_iter(
                    (0..k).map(|j| crate::prng::normal(300 + c as u64, (t * k + j) as u64)),
                );
                let diff = &x - &means.row(c);
                let dense_quad = diff.dot(&linalg::chol_solve(&l, &diff.view()));
                let a = diff.mapv(|v| v / cl.sigma_bar);
                let w = cl.factor.t().dot(&a);
                let tsol = linalg::chol_solve(&cl.cap_chol, &w.view());
                let wood_quad = diff.dot(&a) - w.dot(&tsol);
                let rel = (dense_quad - wood_quad).abs() / dense_quad.abs().max(1.0);
                assert!(rel < 1e-8, "quadratic mismatch {dense_quad} vs {wood_quad}");
            }
        }
    }

    #[test]
    fn ties_break_toward_lower_index() {
        assert_eq!(argmax(&array![1.0, 1.0, 0.5].view()), 0);
        assert_eq!(argmax(&array![0.5, 1.0, 1.0].view()), 1);
    }

    #[test]
    fn accuracy_on_fitting_means_is_perfect() {
        let p = two_class_params();
        let head = fit_head(&p, HeadKind::Lda).unwrap();
        let set = LabeledEmbeddingSet::new(p.class_means.clone(), vec![0, 1], 2).unwrap();
        assert_eq!(head.accuracy(&set).unwrap(), 1.0);
    }

    #[test]
    fn empty_evaluation_set_is_an_error() {
        let p = two_class_params();
        let head = fit_head(&p, HeadKind::Lda).unwrap();
        let set = LabeledEmbeddingSet::new(array![[1.0, 0.0]], vec![0], 2).unwrap();
        assert!(head.accuracy(&set.subset(&[])).is_err());
    }

    #[test]
    fn lda_score_differences_are_affine() {
        // g_0 - g_1 along a line: the midpoint gap is the mean of the
        // endpoint gaps.
        let p = random_gaussian_params(13, 3, 5);
        let head = fit_head(&p, HeadKind::Lda).unwrap();
        let a = Array1::from_iter((0..5).map(|j| crate::prng::normal(41, j as u64)));
        let b = Array1::from_iter((0..5).map(|j| crate::prng::normal(42, j as u64)));
        let gap = |x: &Array1<f64>| {
            let s = head.score(&x.view()).unwrap();
            s[0] - s[1]
        };
        let mid = (&a + &b) * 0.5;
        let lhs = gap(&mid);
        let rhs = 0.5 * (gap(&a) + gap(&b));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn shrinkage_reduces_condition_number() {
        let p = random_gaussian_params(17, 3, 8);
        let base = p.pooled_cov.as_ref().unwrap();
        let mut prev = f64::INFINITY;
        for alpha in [0.0, 0.2, 0.5, 0.8, 1.0] {
            let shrunk = shrink_covariance(base, alpha);
            let (vals, _) = linalg::sym_eig(&shrunk).unwrap();
            let cond = vals[0] / vals[vals.len() - 1];
            assert!(
                cond <= prev * (1.0 + 1e-9),
                "condition number rose at alpha={alpha}"
            );
            prev = cond;
        }
    }
}
