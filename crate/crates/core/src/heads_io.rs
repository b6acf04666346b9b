//! `GHH1` head blobs: versioned binary serialization of fitted heads so CLI
//! invocations can hand them to each other.
//!
//! Only estimated parameters and learned weights are stored; solver caches
//! (Cholesky factors, eigendecompositions) are rebuilt on load, which keeps
//! the format small and forward-compatible with cache layout changes.

use crate::client_stats::ProjectionHeader;
use crate::datamodel::GaussianParams;
use crate::error::{Error, Result};
use crate::fisher::FisherBasis;
use crate::gaussian_heads::{fit_head, GaussianHead, HeadKind};
use crate::train_heads::{FisherMixHead, ProtoHyperConfig, ProtoHyperHead};
use crate::wire::{ByteReader, ByteWriter, HEAD_MAGIC};
use ndarray::{Array1, Array2};

const FORMAT_VERSION: u8 = 1;

/// Any head the pipeline can produce.
#[derive(Debug, Clone)]
pub enum AnyHead {
    Gaussian(GaussianHead),
    FisherMix(FisherMixHead),
    ProtoHyper(ProtoHyperHead),
}

impl AnyHead {
    pub fn kind_name(&self) -> String {
        match self {
            AnyHead::Gaussian(h) => h.kind().to_string(),
            AnyHead::FisherMix(_) => "fishermix".into(),
            AnyHead::ProtoHyper(h) => format!("protohyper(base={})", h.base.kind()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            AnyHead::Gaussian(h) => h.parameter_count(),
            AnyHead::FisherMix(h) => h.parameter_count(),
            AnyHead::ProtoHyper(h) => h.parameter_count(),
        }
    }
}

/// A head plus the transforms needed to evaluate it on raw embeddings.
#[derive(Debug, Clone)]
pub struct HeadBlob {
    pub head: AnyHead,
    /// Sketch applied before any statistics, if one was configured.
    pub projection: Option<ProjectionHeader>,
    /// Fisher basis for heads living in the subspace.
    pub basis: Option<FisherBasis>,
}

fn write_matrix(w: &mut ByteWriter, m: &Array2<f64>) {
    w.u32(m.nrows() as u32);
    w.u32(m.ncols() as u32);
    for v in m.iter() {
        w.f64(*v);
    }
}

fn read_matrix(r: &mut ByteReader) -> Result<Array2<f64>> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut flat = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        flat.push(r.f64()?);
    }
    Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::InvalidFrame(e.to_string()))
}

fn write_params(w: &mut ByteWriter, p: &GaussianParams) {
    w.u32(p.dim as u32);
    w.u32(p.class_labels.len() as u32);
    for &l in &p.class_labels {
        w.u32(l as u32);
    }
    w.u32(p.dropped_classes.len() as u32);
    for &l in &p.dropped_classes {
        w.u32(l as u32);
    }
    for &c in &p.counts {
        w.u64(c);
    }
    write_matrix(w, &p.class_means);
    for v in p.log_priors.iter() {
        w.f64(*v);
    }
    w.u8(p.pooled_cov.is_some() as u8);
    if let Some(m) = &p.pooled_cov {
        write_matrix(w, m);
    }
    w.u8(p.class_covs.is_some() as u8);
    if let Some(cs) = &p.class_covs {
        for m in cs {
            write_matrix(w, m);
        }
    }
    w.u8(p.class_vars.is_some() as u8);
    if let Some(m) = &p.class_vars {
        write_matrix(w, m);
    }
}

fn read_params(r: &mut ByteReader) -> Result<GaussianParams> {
    let dim = r.u32()? as usize;
    let c = r.u32()? as usize;
    let mut class_labels = Vec::with_capacity(c);
    for _ in 0..c {
        class_labels.push(r.u32()? as usize);
    }
    let n_dropped = r.u32()? as usize;
    let mut dropped_classes = Vec::with_capacity(n_dropped);
    for _ in 0..n_dropped {
        dropped_classes.push(r.u32()? as usize);
    }
    let mut counts = Vec::with_capacity(c);
    for _ in 0..c {
        counts.push(r.u64()?);
    }
    let class_means = read_matrix(r)?;
    let mut log_priors = Array1::<f64>::zeros(c);
    for v in log_priors.iter_mut() {
        *v = r.f64()?;
    }
    let pooled_cov = if r.u8()? != 0 { Some(read_matrix(r)?) } else { None };
    let class_covs = if r.u8()? != 0 {
        let mut cs = Vec::with_capacity(c);
        for _ in 0..c {
            cs.push(read_matrix(r)?);
        }
        Some(cs)
    } else {
        None
    };
    let class_vars = if r.u8()? != 0 { Some(read_matrix(r)?) } else { None };
    Ok(GaussianParams {
        dim,
        class_labels,
        dropped_classes,
        counts,
        class_means,
        log_priors,
        pooled_cov,
        class_covs,
        class_vars,
    })
}

fn write_kind(w: &mut ByteWriter, kind: HeadKind) {
    match kind {
        HeadKind::NbDiag => w.u8(0),
        HeadKind::Lda => w.u8(1),
        HeadKind::Qda => w.u8(2),
        HeadKind::DlrQda { rank } => {
            w.u8(3);
            w.u32(rank as u32);
        }
    }
}

fn read_kind(r: &mut ByteReader) -> Result<HeadKind> {
    Ok(match r.u8()? {
        0 => HeadKind::NbDiag,
        1 => HeadKind::Lda,
        2 => HeadKind::Qda,
        3 => HeadKind::DlrQda {
            rank: r.u32()? as usize,
        },
        other => return Err(Error::InvalidFrame(format!("unknown head kind {other}"))),
    })
}

/// Serialize a head blob to `GHH1` bytes.
pub fn write_head_blob(blob: &HeadBlob) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(HEAD_MAGIC);
    w.u8(FORMAT_VERSION);
    match blob.projection {
        Some(h) => {
            w.u8(1);
            w.u64(h.seed);
            w.u32(h.d as u32);
            w.u32(h.k as u32);
        }
        None => w.u8(0),
    }
    match &blob.basis {
        Some(b) => {
            w.u8(1);
            write_matrix(&mut w, &b.v);
            for v in b.eigenvalues.iter() {
                w.f64(*v);
            }
            for &e in &b.energy {
                w.f64(e);
            }
            w.u32(b.padded as u32);
        }
        None => w.u8(0),
    }
    match &blob.head {
        AnyHead::Gaussian(h) => {
            w.u8(0);
            write_kind(&mut w, h.kind());
            write_params(&mut w, h.params());
        }
        AnyHead::FisherMix(h) => {
            w.u8(1);
            w.f64(h.scale);
            w.f64(h.margin);
            w.u32(h.class_labels.len() as u32);
            for &l in &h.class_labels {
                w.u32(l as u32);
            }
            write_matrix(&mut w, &h.w);
        }
        AnyHead::ProtoHyper(h) => {
            w.u8(2);
            write_kind(&mut w, h.base.kind());
            write_params(&mut w, h.base.params());
            w.u8(h.teacher_qda.is_some() as u8);
            w.u32(h.cfg.residual_rank as u32);
            w.f64(h.cfg.teacher_blend);
            w.f64(h.cfg.temperature);
            w.f64(h.cfg.kd_weight);
            write_matrix(&mut w, &h.u1);
            write_matrix(&mut w, &h.v2);
        }
    }
    w.finish()
}

/// Parse `GHH1` bytes, refitting solver caches.
pub fn read_head_blob(bytes: &[u8]) -> Result<HeadBlob> {
    let mut r = ByteReader::new(bytes);
    r.magic(HEAD_MAGIC)?;
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidFrame(format!(
            "unsupported head blob version {version}"
        )));
    }
    let projection = if r.u8()? != 0 {
        Some(ProjectionHeader {
            seed: r.u64()?,
            d: r.u32()? as usize,
            k: r.u32()? as usize,
        })
    } else {
        None
    };
    let basis = if r.u8()? != 0 {
        let v = read_matrix(&mut r)?;
        let k_f = v.ncols();
        let mut eigenvalues = Array1::<f64>::zeros(k_f);
        for val in eigenvalues.iter_mut() {
            *val = r.f64()?;
        }
        let mut energy = Vec::with_capacity(k_f);
        for _ in 0..k_f {
            energy.push(r.f64()?);
        }
        let padded = r.u32()? as usize;
        Some(FisherBasis {
            v,
            eigenvalues,
            energy,
            k_f,
            padded,
        })
    } else {
        None
    };
    let head = match r.u8()? {
        0 => {
            let kind = read_kind(&mut r)?;
            let params = read_params(&mut r)?;
            AnyHead::Gaussian(fit_head(&params, kind)?)
        }
        1 => {
            let scale = r.f64()?;
            let margin = r.f64()?;
            let n = r.u32()? as usize;
            let mut class_labels = Vec::with_capacity(n);
            for _ in 0..n {
                class_labels.push(r.u32()? as usize);
            }
            let w = read_matrix(&mut r)?;
            AnyHead::FisherMix(FisherMixHead {
                w,
                scale,
                margin,
                class_labels,
            })
        }
        2 => {
            let base_kind = read_kind(&mut r)?;
            let params = read_params(&mut r)?;
            let has_qda = r.u8()? != 0;
            let cfg = ProtoHyperConfig {
                residual_rank: r.u32()? as usize,
                teacher_blend: r.f64()?,
                temperature: r.f64()?,
                kd_weight: r.f64()?,
            };
            let u1 = read_matrix(&mut r)?;
            let v2 = read_matrix(&mut r)?;
            let base = fit_head(&params, base_kind)?;
            let teacher_lda = fit_head(&params, HeadKind::Lda)?;
            let teacher_qda = if has_qda {
                Some(fit_head(&params, HeadKind::Qda)?)
            } else {
                None
            };
            let class_labels = params.class_labels.clone();
            AnyHead::ProtoHyper(ProtoHyperHead {
                base,
                u1,
                v2,
                teacher_lda,
                teacher_qda,
                cfg,
                class_labels,
            })
        }
        other => return Err(Error::InvalidFrame(format!("unknown blob head tag {other}"))),
    };
    r.done()?;
    Ok(HeadBlob {
        head,
        projection,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client_stats::{compute_bundle, StatsRequest};
    use crate::datamodel::LabeledEmbeddingSet;
    use crate::fisher::{fit_fisher, project_params, FisherSelect};
    use crate::gaussian_heads::{estimate_params, Shrinkage};
    use crate::synth::SynthConfig;
    use crate::train_heads::{train_fishermix, train_protohyper, TrainConfig};
    use ndarray::Array2;

    fn make_params() -> GaussianParams {
        let c = 3;
        let k = 5;
        let n_per = 80;
        let mut features = Array2::<f64>::zeros((c * n_per, k));
        let mut labels = Vec::new();
        let mut ctr = 0;
        for cl in 0..c {
            for i in 0..n_per {
                for j in 0..k {
                    features[[cl * n_per + i, j]] =
                        3.0 * f64::from(j == cl) + crate::prng::normal(77, ctr);
                    ctr += 1;
                }
                labels.push(cl as u32);
            }
        }
        let set = LabeledEmbeddingSet::new(features, labels, c).unwrap();
        let bundle = compute_bundle(
            &set,
            &StatsRequest {
                want_b: true,
                want_s: true,
                want_d: true,
                ..Default::default()
            },
        )
        .unwrap();
        estimate_params(&bundle, &Shrinkage::default(), 1).unwrap()
    }

    #[test]
    fn gaussian_head_round_trips_and_scores_identically() {
        let params = make_params();
        for kind in [
            HeadKind::NbDiag,
            HeadKind::Lda,
            HeadKind::Qda,
            HeadKind::DlrQda { rank: 2 },
        ] {
            let head = fit_head(&params, kind).unwrap();
            let blob = HeadBlob {
                head: AnyHead::Gaussian(head.clone()),
                projection: None,
                basis: None,
            };
            let back = read_head_blob(&write_head_blob(&blob)).unwrap();
            let AnyHead::Gaussian(restored) = back.head else {
                panic!("wrong head type");
            };
            let x = Array2::from_shape_fn((4, 5), |(i, j)| {
                crate::prng::normal(5, (i * 5 + j) as u64)
            });
            assert_eq!(
                head.score_batch(&x).unwrap(),
                restored.score_batch(&x).unwrap(),
                "{kind}"
            );
        }
    }

    #[test]
    fn trained_heads_round_trip() {
        let raw = make_params();
        let basis = fit_fisher(&raw, FisherSelect::Fixed(2)).unwrap();
        let params_f = project_params(&raw, &basis).unwrap();
        let synth_cfg = SynthConfig {
            per_class: 32,
            seed: 4,
            ..Default::default()
        };
        let tcfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::fishermix()
        };
        let (fm, _) = train_fishermix(&params_f, &basis, &synth_cfg, &tcfg).unwrap();
        let blob = HeadBlob {
            head: AnyHead::FisherMix(fm.clone()),
            projection: None,
            basis: Some(basis.clone()),
        };
        let back = read_head_blob(&write_head_blob(&blob)).unwrap();
        let AnyHead::FisherMix(restored) = back.head else {
            panic!("wrong head type");
        };
        assert_eq!(restored, fm);
        assert!(back.basis.is_some());

        let (ph, _) = train_protohyper(
            &params_f,
            &basis,
            HeadKind::Lda,
            &synth_cfg,
            &TrainConfig {
                epochs: 2,
                seed: 6,
                ..TrainConfig::protohyper()
            },
            &Default::default(),
        )
        .unwrap();
        let blob = HeadBlob {
            head: AnyHead::ProtoHyper(ph.clone()),
            projection: Some(crate::client_stats::ProjectionHeader { seed: 1, d: 5, k: 5 }),
            basis: Some(basis),
        };
        let back = read_head_blob(&write_head_blob(&blob)).unwrap();
        let AnyHead::ProtoHyper(restored) = back.head else {
            panic!("wrong head type");
        };
        assert_eq!(restored.u1, ph.u1);
        assert_eq!(restored.v2, ph.v2);
        let z = Array2::from_shape_fn((6, 2), |(i, j)| crate::prng::normal(8, (i * 2 + j) as u64));
        assert_eq!(
            restored.forward(&z.view()).unwrap(),
            ph.forward(&z.view()).unwrap()
        );
        assert_eq!(back.projection.unwrap().seed, 1);
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let params = make_params();
        let head = fit_head(&params, HeadKind::Lda).unwrap();
        let blob = HeadBlob {
            head: AnyHead::Gaussian(head),
            projection: None,
            basis: None,
        };
        let mut bytes = write_head_blob(&blob);
        bytes[0] = b'X';
        assert!(read_head_blob(&bytes).is_err());
        let blob2 = write_head_blob(&blob);
        assert!(read_head_blob(&blob2[..blob2.len() - 3]).is_err());
    }
}
