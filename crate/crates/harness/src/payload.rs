//! Communication accounting: independent scalars per client upload and the
//! bytes they occupy on the wire.
//!
//! With counts, first moments and triangle-packed symmetric matrices the
//! closed forms are, at sketch dimension `k`:
//!
//! * counts + sums + square sums (the diagonal rule): `C (1 + 2k)`
//! * counts + sums + global second moment (linear rule):
//!   `C (1 + k) + k(k+1)/2`
//! * counts + sums + per-class second moments (quadratic rule):
//!   `C (1 + k + k(k+1)/2)`

use crate::error::{HarnessError, Result};
use ghofl_core::client_stats::StatsRequest;
use ghofl_core::wire::{bundle_frame_overhead, BundleHeader};
use ghofl_core::datamodel::SpaceTag;
use serde::Serialize;

/// Scalar and byte counts for one client upload.
#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct PayloadAccounting {
    pub scalars: u64,
    pub bytes: u64,
}

/// Independent scalars a request produces at `(C, k)`, and their size at
/// 8 bytes per scalar. `k = 0` is rejected.
pub fn report_payload_bytes(req: &StatsRequest, c: usize, k: usize) -> Result<PayloadAccounting> {
    if k == 0 {
        return Err(HarnessError::Config("payload accounting needs k >= 1".into()));
    }
    if c == 0 {
        return Err(HarnessError::Config("payload accounting needs C >= 1".into()));
    }
    let header = BundleHeader {
        dim: k,
        class_count: c,
        fields: req.fields(),
        space_tag: SpaceTag::Raw,
    };
    let scalars = header.scalar_count() as u64;
    Ok(PayloadAccounting {
        scalars,
        bytes: 8 * scalars,
    })
}

/// Frame bytes beyond the scalars themselves.
pub fn frame_overhead_bytes(req: &StatsRequest, c: usize, k: usize, tag: SpaceTag) -> usize {
    let header = BundleHeader {
        dim: k,
        class_count: c,
        fields: req.fields(),
        space_tag: tag,
    };
    bundle_frame_overhead(&header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(b: bool, s: bool, d: bool) -> StatsRequest {
        StatsRequest {
            want_b: b,
            want_s: s,
            want_d: d,
            want_m34: false,
            project_with: None,
        }
    }

    #[test]
    fn diagonal_rule_formula() {
        // C (1 + 2k): 10 * 33 = 330
        let acc = report_payload_bytes(&req(false, false, true), 10, 16).unwrap();
        assert_eq!(acc.scalars, 330);
        assert_eq!(acc.bytes, 2640);
    }

    #[test]
    fn linear_rule_formula() {
        // C (1 + k) + k(k+1)/2: 10*17 + 136 = 306
        let acc = report_payload_bytes(&req(true, false, false), 10, 16).unwrap();
        assert_eq!(acc.scalars, 306);
    }

    #[test]
    fn quadratic_rule_formula() {
        // C (1 + k + k(k+1)/2) = 10 * (1 + 16 + 136) = 1530
        let acc = report_payload_bytes(&req(false, true, false), 10, 16).unwrap();
        assert_eq!(acc.scalars, 1530);
    }

    #[test]
    fn k_zero_is_rejected() {
        assert!(report_payload_bytes(&req(true, false, false), 10, 0).is_err());
    }

    #[test]
    fn counts_match_real_frames() {
        use ghofl_core::client_stats::compute_bundle;
        use ghofl_core::datamodel::LabeledEmbeddingSet;
        use ghofl_core::wire::bundle_to_frame;
        let c = 4;
        let k = 5;
        let features = ndarray::Array2::from_shape_fn((40, k), |(i, j)| {
            ghofl_core::prng::normal(3, (i * k + j) as u64)
        });
        let labels: Vec<u32> = (0..40).map(|i| (i % c) as u32).collect();
        let set = LabeledEmbeddingSet::new(features, labels, c).unwrap();
        for r in [req(false, false, true), req(true, false, false), req(false, true, false)] {
            let bundle = compute_bundle(&set, &r).unwrap();
            let frame = bundle_to_frame(&bundle);
            let acc = report_payload_bytes(&r, c, k).unwrap();
            let overhead = frame_overhead_bytes(&r, c, k, ghofl_core::datamodel::SpaceTag::Raw);
            assert_eq!(frame.len(), overhead + acc.bytes as usize);
        }
    }
}
