//! Univariate Gaussianity diagnostics from aggregated power sums.
//!
//! Per class and feature dimension, skewness and excess kurtosis are
//! recovered from the raw sums `A, D, M3, M4` via the standard raw-to-central
//! conversions, so the report needs no sample access at all. Cells from
//! classes with fewer than eight samples, or with variance at the noise
//! floor, are excluded from the summaries — higher moments from a handful of
//! samples are meaningless.

use crate::datamodel::MomentBundle;
use crate::error::{Error, Result};
use serde::Serialize;

/// Minimum class count for a cell to enter the summaries.
pub const MIN_COUNT_FOR_DIAGNOSTICS: u64 = 8;

/// One (class, dimension) cell.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentCell {
    pub class: usize,
    pub dim: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Mean / median / 90th percentile of a nonnegative sample.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl SummaryStats {
    fn of(values: &mut Vec<f64>) -> Self {
        if values.is_empty() {
            return SummaryStats {
                mean: f64::NAN,
                median: f64::NAN,
                p90: f64::NAN,
            };
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        SummaryStats {
            mean,
            median: percentile(values, 0.5),
            p90: percentile(values, 0.9),
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Skew/kurtosis per cell plus absolute-value summaries.
#[derive(Debug, Clone, Serialize)]
pub struct GaussianityReport {
    pub cells: Vec<MomentCell>,
    /// Cells skipped for low counts or floored variance.
    pub excluded_cells: usize,
    pub abs_skewness: SummaryStats,
    pub abs_excess_kurtosis: SummaryStats,
}

/// Compute the report from a bundle carrying `A, N, D, M3, M4`.
pub fn gaussianity(agg: &MomentBundle) -> Result<GaussianityReport> {
    let d = agg
        .class_sq_sums
        .as_ref()
        .ok_or_else(|| Error::MissingField("class_sq_sums D_c".into()))?;
    let m3 = agg
        .class_cube_sums
        .as_ref()
        .ok_or_else(|| Error::MissingField("class_cube_sums M3_c".into()))?;
    let m4 = agg
        .class_quart_sums
        .as_ref()
        .ok_or_else(|| Error::MissingField("class_quart_sums M4_c".into()))?;

    // Variance floor relative to the mean variance across cells.
    let mut var_sum = 0.0;
    let mut var_n = 0usize;
    for c in 0..agg.class_count {
        let n = agg.counts[c] as f64;
        if n < 1.0 {
            continue;
        }
        for j in 0..agg.dim {
            let mu = agg.first_moments[[c, j]] / n;
            let v = (d[[c, j]] / n - mu * mu).max(0.0);
            var_sum += v;
            var_n += 1;
        }
    }
    let floor = if var_n > 0 {
        (1e-12 * var_sum / var_n as f64).max(1e-300)
    } else {
        1e-300
    };

    let mut cells = Vec::new();
    let mut excluded = 0usize;
    for c in 0..agg.class_count {
        if agg.counts[c] < MIN_COUNT_FOR_DIAGNOSTICS {
            excluded += agg.dim;
            continue;
        }
        let n = agg.counts[c] as f64;
        for j in 0..agg.dim {
            let mu = agg.first_moments[[c, j]] / n;
            let r2 = d[[c, j]] / n;
            let r3 = m3[[c, j]] / n;
            let r4 = m4[[c, j]] / n;
            let m2c = r2 - mu * mu;
            if m2c <= floor {
                excluded += 1;
                continue;
            }
            let m3c = r3 - 3.0 * mu * r2 + 2.0 * mu * mu * mu;
            let m4c = r4 - 4.0 * mu * r3 + 6.0 * mu * mu * r2 - 3.0 * mu.powi(4);
            cells.push(MomentCell {
                class: c,
                dim: j,
                skewness: m3c / m2c.powf(1.5),
                excess_kurtosis: m4c / (m2c * m2c) - 3.0,
            });
        }
    }

    let mut abs_skew: Vec<f64> = cells.iter().map(|e| e.skewness.abs()).collect();
    let mut abs_kurt: Vec<f64> = cells.iter().map(|e| e.excess_kurtosis.abs()).collect();
    Ok(GaussianityReport {
        abs_skewness: SummaryStats::of(&mut abs_skew),
        abs_excess_kurtosis: SummaryStats::of(&mut abs_kurt),
        cells,
        excluded_cells: excluded,
    })
}

impl GaussianityReport {
    /// Flat per-cell table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dim,skewness,excess_kurtosis\n");
        for e in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.class, e.dim, e.skewness, e.excess_kurtosis
            ));
        }
        out
    }

    /// Summary object (means, medians, percentiles, exclusion count).
    pub fn to_json_summary(&self) -> String {
        serde_json::json!({
            "cells": self.cells.len(),
            "excluded_cells": self.excluded_cells,
            "abs_skewness": self.abs_skewness,
            "abs_excess_kurtosis": self.abs_excess_kurtosis,
        })
        .to_string()
    }
}
