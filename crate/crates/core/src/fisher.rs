//! Fisher subspace from aggregated moments.
//!
//! Solves `S_B v = lambda S_W v` with `S_W` the (shrunk) pooled covariance
//! and `S_B` the prior-weighted between-class scatter. Rather than a general
//! eigensolver, the problem is whitened through the Cholesky factor of `S_W`
//! (`M = L^{-1} S_B L^{-T}`, symmetric eigendecomposition, back-transform
//! `V = L^{-T} V~`), which keeps the numerics to the symmetric case and makes
//! the returned columns `S_W`-orthonormal by construction.
//!
//! `S_B` has rank at most `C - 1`; requesting more directions pads the basis
//! with the trailing whitened eigenvectors (flagged in `padded`).

use crate::datamodel::{GaussianParams, LabeledEmbeddingSet, MomentBundle, SpaceTag};
use crate::error::{Error, Result};
use crate::gaussian_heads::{fit_head, GaussianHead, HeadKind};
use crate::linalg;
use ndarray::{Array1, Array2};

/// How many Fisher directions to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FisherSelect {
    /// Exactly this many columns.
    Fixed(usize),
    /// Smallest count whose cumulative eigenvalue fraction reaches the
    /// threshold (0.99 is the conventional choice).
    Energy(f64),
}

/// An `S_W`-orthonormal basis of Fisher directions.
#[derive(Debug, Clone)]
pub struct FisherBasis {
    /// `k_in x k_f`; columns are generalized eigenvectors.
    pub v: Array2<f64>,
    /// Descending generalized eigenvalues for the kept columns (clamped at 0).
    pub eigenvalues: Array1<f64>,
    /// Cumulative eigenvalue fraction after each kept column.
    pub energy: Vec<f64>,
    /// Number of kept columns.
    pub k_f: usize,
    /// How many trailing columns lie beyond the rank of `S_B` (padding).
    pub padded: usize,
}

impl FisherBasis {
    pub fn input_dim(&self) -> usize {
        self.v.nrows()
    }

    /// Energy captured by all kept columns.
    pub fn captured_energy(&self) -> f64 {
        self.energy.last().copied().unwrap_or(0.0)
    }
}

/// Prior-weighted between-class scatter around the prior-weighted mean.
pub fn between_class_scatter(params: &GaussianParams) -> Array2<f64> {
    let k = params.dim;
    let priors = params.priors();
    let mut grand = Array1::<f64>::zeros(k);
    for (c, mu) in params.class_means.rows().into_iter().enumerate() {
        grand.scaled_add(priors[c], &mu);
    }
    let mut sb = Array2::<f64>::zeros((k, k));
    for (c, mu) in params.class_means.rows().into_iter().enumerate() {
        let diff = &mu - &grand;
        for i in 0..k {
            for j in 0..k {
                sb[[i, j]] += priors[c] * diff[i] * diff[j];
            }
        }
    }
    sb
}

/// Solve the generalized eigenproblem and keep directions per `select`.
pub fn fit_fisher(params: &GaussianParams, select: FisherSelect) -> Result<FisherBasis> {
    if params.class_count() < 2 {
        return Err(Error::InsufficientData(
            "a Fisher basis needs at least two classes".into(),
        ));
    }
    let sw = params
        .pooled_cov
        .as_ref()
        .ok_or_else(|| Error::MissingField("pooled_cov (send B or S)".into()))?;
    let k = params.dim;
    let sb = between_class_scatter(params);
    let l = linalg::cholesky(sw)?;

    // M = L^{-1} S_B L^{-T}: whiten one side at a time.
    let mut y = Array2::<f64>::zeros((k, k));
    for (j, col) in sb.columns().into_iter().enumerate() {
        y.column_mut(j).assign(&linalg::solve_lower(&l, &col));
    }
    let yt = y.t().to_owned();
    let mut m = Array2::<f64>::zeros((k, k));
    for (j, col) in yt.columns().into_iter().enumerate() {
        m.column_mut(j).assign(&linalg::solve_lower(&l, &col));
    }
    let m = linalg::symmetrize(&m.t().to_owned());
    let (raw_vals, vecs_white) = linalg::sym_eig(&m)?;
    let vals = raw_vals.mapv(|v| v.max(0.0));
    let total: f64 = vals.sum();

    let scale = vals[0].max(1e-300);
    let rank = vals.iter().filter(|&&v| v > 1e-10 * scale).count();
    let k_f = match select {
        FisherSelect::Fixed(want) => {
            if want == 0 || want > k {
                return Err(Error::InvalidParameter(format!(
                    "fixed Fisher dimension must be in 1..={k}, got {want}"
                )));
            }
            want
        }
        FisherSelect::Energy(theta) => {
            if !(0.0..=1.0).contains(&theta) {
                return Err(Error::InvalidParameter(format!(
                    "energy threshold must lie in [0, 1], got {theta}"
                )));
            }
            if total <= 0.0 {
                return Err(Error::InsufficientData(
                    "no between-class scatter: all class means coincide".into(),
                ));
            }
            let mut cum = 0.0;
            let mut chosen = rank.max(1);
            for (i, &v) in vals.iter().enumerate() {
                cum += v;
                if cum / total >= theta {
                    chosen = i + 1;
                    break;
                }
            }
            chosen
        }
    };
    let padded = k_f.saturating_sub(rank);
    if padded > 0 {
        log::warn!(
            "requested {k_f} Fisher directions but the between-class scatter has rank {rank}; \
             {padded} trailing direction(s) are padding"
        );
    }

    let mut v = Array2::<f64>::zeros((k, k_f));
    for j in 0..k_f {
        let col = linalg::solve_lower_transpose(&l, &vecs_white.column(j));
        v.column_mut(j).assign(&col);
    }
    let mut energy = Vec::with_capacity(k_f);
    let mut cum = 0.0;
    for j in 0..k_f {
        cum += vals[j];
        energy.push(if total > 0.0 { cum / total } else { 0.0 });
    }
    Ok(FisherBasis {
        v,
        eigenvalues: Array1::from_iter(vals.iter().take(k_f).copied()),
        energy,
        k_f,
        padded,
    })
}

/// Project an aggregate bundle onto the basis: `A V`, `V^T B V`, `V^T S_c V`;
/// square sums follow `diag(V^T S_c V)` or are dropped, like the sketch.
pub fn project_bundle_fisher(agg: &MomentBundle, basis: &FisherBasis) -> Result<MomentBundle> {
    if agg.space_tag == SpaceTag::Fisher {
        return Err(Error::TagMismatch(
            "bundle is already in a Fisher space".into(),
        ));
    }
    if agg.dim != basis.input_dim() {
        return Err(Error::DimMismatch(format!(
            "bundle dim {} vs basis input {}",
            agg.dim,
            basis.input_dim()
        )));
    }
    let v = &basis.v;
    let k_f = basis.k_f;
    let first_moments = agg.first_moments.dot(v);
    let global_second = agg
        .global_second
        .as_ref()
        .map(|b| linalg::symmetrize(&v.t().dot(b).dot(v)));
    let class_second: Option<Vec<Array2<f64>>> = agg
        .class_second
        .as_ref()
        .map(|ss| ss.iter().map(|s| linalg::symmetrize(&v.t().dot(s).dot(v))).collect());
    let class_sq_sums = match (&class_second, &agg.class_sq_sums) {
        (Some(ss), _) => {
            let mut d = Array2::<f64>::zeros((agg.class_count, k_f));
            for (c, s) in ss.iter().enumerate() {
                for j in 0..k_f {
                    d[[c, j]] = s[[j, j]];
                }
            }
            Some(d)
        }
        (None, Some(_)) => {
            log::warn!("square sums cannot follow a basis change without S_c; dropped");
            None
        }
        (None, None) => None,
    };
    if agg.class_cube_sums.is_some() {
        log::warn!("cube/fourth-power sums do not survive a basis change and are dropped");
    }
    Ok(MomentBundle {
        dim: k_f,
        class_count: agg.class_count,
        counts: agg.counts.clone(),
        first_moments,
        global_second,
        class_second,
        class_sq_sums,
        class_cube_sums: None,
        class_quart_sums: None,
        space_tag: SpaceTag::Fisher,
    })
}

/// Push already-estimated parameters through the basis: `mu V`, `V^T Sigma V`.
/// Diagonal variances are re-derived from the projected class covariances
/// when those exist and dropped otherwise.
pub fn project_params(params: &GaussianParams, basis: &FisherBasis) -> Result<GaussianParams> {
    if params.dim != basis.input_dim() {
        return Err(Error::DimMismatch(format!(
            "params dim {} vs basis input {}",
            params.dim,
            basis.input_dim()
        )));
    }
    let v = &basis.v;
    let k_f = basis.k_f;
    let class_means = params.class_means.dot(v);
    let pooled_cov = params
        .pooled_cov
        .as_ref()
        .map(|p| linalg::symmetrize(&v.t().dot(p).dot(v)));
    let class_covs: Option<Vec<Array2<f64>>> = params
        .class_covs
        .as_ref()
        .map(|cs| cs.iter().map(|c| linalg::symmetrize(&v.t().dot(c).dot(v))).collect());
    let class_vars = class_covs.as_ref().map(|cs| {
        let mut vars = Array2::<f64>::zeros((cs.len(), k_f));
        for (c, cov) in cs.iter().enumerate() {
            for j in 0..k_f {
                vars[[c, j]] = cov[[j, j]].max(f64::MIN_POSITIVE);
            }
        }
        vars
    });
    Ok(GaussianParams {
        dim: k_f,
        class_labels: params.class_labels.clone(),
        dropped_classes: params.dropped_classes.clone(),
        counts: params.counts.clone(),
        class_means,
        log_priors: params.log_priors.clone(),
        pooled_cov,
        class_covs,
        class_vars,
    })
}

/// Fit a linear head in the subspace spanned by `basis`.
pub fn subspace_lda(params: &GaussianParams, basis: &FisherBasis) -> Result<GaussianHead> {
    let projected = project_params(params, basis)?;
    fit_head(&projected, HeadKind::Lda)
}

/// One row of an [`energy_sweep`] table.
#[derive(Debug, Clone, Copy)]
pub struct EnergySweepRow {
    pub k: usize,
    pub energy: f64,
    pub lda_accuracy: f64,
}

/// For each requested dimension: fit a basis, restrict the linear head to it
/// and score a probe set, recording the captured energy.
pub fn energy_sweep(
    params: &GaussianParams,
    probe_set: &LabeledEmbeddingSet,
    ks: &[usize],
) -> Result<Vec<EnergySweepRow>> {
    if probe_set.dim() != params.dim {
        return Err(Error::DimMismatch(format!(
            "probe set dim {} vs params dim {}",
            probe_set.dim(),
            params.dim
        )));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let basis = fit_fisher(params, FisherSelect::Fixed(k))?;
        let head = subspace_lda(params, &basis)?;
        let projected = probe_set.project(&basis);
        let acc = head.accuracy(&projected)?;
        rows.push(EnergySweepRow {
            k,
            energy: basis.captured_energy(),
            lda_accuracy: acc,
        });
    }
    Ok(rows)
}

impl LabeledEmbeddingSet {
    /// Feature projection onto a Fisher basis (`z_f = x V`), labels kept.
    pub fn project(&self, basis: &FisherBasis) -> LabeledEmbeddingSet {
        self.with_features(self.features().dot(&basis.v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client_stats::{compute_bundle, StatsRequest};
    use crate::gaussian_heads::{estimate_params, Shrinkage};
    use approx::assert_abs_diff_eq;

    fn gaussian_set(
        means: &Array2<f64>,
        n_per: usize,
        seed: u64,
        noise: f64,
    ) -> LabeledEmbeddingSet {
        let c = means.nrows();
        let d = means.ncols();
        let mut features = Array2::<f64>::zeros((c * n_per, d));
        let mut labels = Vec::new();
        let mut ctr = 0u64;
        for cl in 0..c {
            for i in 0..n_per {
                for j in 0..d {
                    features[[cl * n_per + i, j]] =
                        means[[cl, j]] + noise * crate::prng::normal(seed, ctr);
                    ctr += 1;
                }
                labels.push(cl as u32);
            }
        }
        LabeledEmbeddingSet::new(features, labels, c).unwrap()
    }

    fn params_of(set: &LabeledEmbeddingSet, shrink: &Shrinkage) -> GaussianParams {
        let req = StatsRequest {
            want_b: true,
            want_s: true,
            want_d: false,
            want_m34: false,
            project_with: None,
        };
        let bundle = compute_bundle(set, &req).unwrap();
        estimate_params(&bundle, shrink, 1).unwrap()
    }

    /// Regular simplex vertices centered at the origin, embedded in `d` dims.
    fn simplex_means(c: usize, d: usize, scale: f64) -> Array2<f64> {
        assert!(d >= c);
        let mut m = Array2::<f64>::zeros((c, d));
        for i in 0..c {
            for j in 0..c {
                m[[i, j]] = if i == j { 1.0 } else { 0.0 };
                m[[i, j]] -= 1.0 / c as f64;
                m[[i, j]] *= scale;
            }
        }
        m
    }

    #[test]
    fn two_classes_give_one_direction_along_whitened_gap() {
        let means = ndarray::array![[0.0, 0.0, 0.0], [2.0, 1.0, 0.0]];
        let set = gaussian_set(&means, 400, 3, 0.5);
        let p = params_of(&set, &Shrinkage::none());
        let basis = fit_fisher(&p, FisherSelect::Energy(0.99)).unwrap();
        assert_eq!(basis.k_f, 1);
        // The direction is collinear with Sigma_pool^{-1} (mu_0 - mu_1).
        let sw = p.pooled_cov.as_ref().unwrap();
        let l = linalg::cholesky(sw).unwrap();
        let gap = &p.class_means.row(0) - &p.class_means.row(1);
        let dir = linalg::chol_solve(&l, &gap.view());
        let v0 = basis.v.column(0);
        let cosine = v0.dot(&dir) / (v0.dot(&v0).sqrt() * dir.dot(&dir).sqrt());
        assert!(cosine.abs() > 1.0 - 1e-8, "cosine {cosine}");
    }

    #[test]
    fn spherical_simplex_has_equal_eigenvalues_and_energy_selects_c_minus_1() {
        let c = 10;
        let means = simplex_means(c, 12, 6.0);
        let set = gaussian_set(&means, 300, 5, 1.0);
        let p = params_of(&set, &Shrinkage::none());
        let basis = fit_fisher(&p, FisherSelect::Energy(0.99)).unwrap();
        assert_eq!(basis.k_f, c - 1);
        let vals = &basis.eigenvalues;
        let mean_val = vals.sum() / vals.len() as f64;
        for v in vals.iter() {
            assert!(
                (v - mean_val).abs() / mean_val < 0.15,
                "eigenvalue spread too wide: {v} vs mean {mean_val}"
            );
        }
    }

    #[test]
    fn basis_is_sw_orthonormal() {
        let means = simplex_means(5, 8, 4.0);
        let set = gaussian_set(&means, 200, 7, 1.0);
        let p = params_of(&set, &Shrinkage::default());
        let basis = fit_fisher(&p, FisherSelect::Fixed(4)).unwrap();
        let sw = p.pooled_cov.as_ref().unwrap();
        let gram = basis.v.t().dot(sw).dot(&basis.v);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn generalized_eigen_residual_is_small() {
        let means = simplex_means(6, 10, 5.0);
        let set = gaussian_set(&means, 250, 9, 1.2);
        let p = params_of(&set, &Shrinkage::default());
        let basis = fit_fisher(&p, FisherSelect::Fixed(5)).unwrap();
        let sb = between_class_scatter(&p);
        let sw = p.pooled_cov.as_ref().unwrap();
        let sb_norm = sb.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..basis.k_f {
            let v = basis.v.column(j);
            let resid = &sb.dot(&v) - &sw.dot(&v).mapv(|x| x * basis.eigenvalues[j]);
            let norm = resid.dot(&resid).sqrt();
            assert!(norm <= 1e-6 * sb_norm, "residual {norm} vs {sb_norm}");
        }
    }

    #[test]
    fn fixed_beyond_rank_pads_and_flags() {
        let means = simplex_means(3, 6, 4.0);
        let set = gaussian_set(&means, 200, 11, 1.0);
        let p = params_of(&set, &Shrinkage::default());
        let basis = fit_fisher(&p, FisherSelect::Fixed(5)).unwrap();
        assert_eq!(basis.k_f, 5);
        assert_eq!(basis.padded, 3); // rank(S_B) = 2
    }

    #[test]
    fn energy_is_monotone_and_sweep_matches_full_lda_at_rank() {
        let c = 6;
        let means = simplex_means(c, 9, 5.0);
        let train = gaussian_set(&means, 400, 13, 1.0);
        let probe = gaussian_set(&means, 200, 14, 1.0);
        let p = params_of(&train, &Shrinkage::none());
        let rows = energy_sweep(&p, &probe, &[1, 2, 3, 4, 5]).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].energy >= w[0].energy - 1e-12, "energy not monotone");
        }
        let full = fit_head(&p, HeadKind::Lda).unwrap().accuracy(&probe).unwrap();
        let at_rank = rows.last().unwrap().lda_accuracy;
        assert!(
            (full - at_rank).abs() <= 0.005,
            "subspace LDA {at_rank} vs full {full}"
        );
    }

    #[test]
    fn fisher_of_fisher_is_rejected() {
        let means = simplex_means(3, 6, 4.0);
        let set = gaussian_set(&means, 150, 15, 1.0);
        let req = StatsRequest {
            want_b: true,
            want_s: true,
            ..Default::default()
        };
        let bundle = compute_bundle(&set, &req).unwrap();
        let p = estimate_params(&bundle, &Shrinkage::default(), 1).unwrap();
        let basis = fit_fisher(&p, FisherSelect::Fixed(2)).unwrap();
        let fisher_bundle = project_bundle_fisher(&bundle, &basis).unwrap();
        assert_eq!(fisher_bundle.space_tag, SpaceTag::Fisher);
        assert!(project_bundle_fisher(&fisher_bundle, &basis).is_err());
    }

    #[test]
    fn project_then_estimate_commutes_with_estimate_then_project() {
        let means = simplex_means(4, 7, 4.0);
        let set = gaussian_set(&means, 300, 17, 1.1);
        let req = StatsRequest {
            want_b: true,
            want_s: true,
            ..Default::default()
        };
        let bundle = compute_bundle(&set, &req).unwrap();
        // No shrinkage: shrinking does not commute with a non-orthogonal
        // basis change, so the commuting check applies to the raw estimates.
        let p_raw = estimate_params(&bundle, &Shrinkage::none(), 1).unwrap();
        let basis = fit_fisher(&p_raw, FisherSelect::Fixed(3)).unwrap();

        let via_bundle =
            estimate_params(&project_bundle_fisher(&bundle, &basis).unwrap(), &Shrinkage::none(), 1)
                .unwrap();
        let via_params = project_params(&p_raw, &basis).unwrap();

        let scale = via_params
            .class_means
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, y) in via_bundle
            .class_means
            .iter()
            .zip(via_params.class_means.iter())
        {
            assert!((x - y).abs() <= 1e-8 * scale.max(1.0));
        }
        let (pb, pp) = (
            via_bundle.pooled_cov.as_ref().unwrap(),
            via_params.pooled_cov.as_ref().unwrap(),
        );
        let scale = pp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, y) in pb.iter().zip(pp.iter()) {
            assert!((x - y).abs() <= 1e-8 * scale.max(1.0));
        }
    }
}
