//! The end-to-end pipeline: ingest or generate data, partition it across
//! simulated clients, reduce each shard to statistics, aggregate (optionally
//! through the masking protocol), estimate parameters, fit every requested
//! head and evaluate on the held-out set.
//!
//! With several partition specs the same global data is re-split per spec
//! and the report carries cross-cell deltas — the executable form of the
//! partition-invariance claim.

use crate::config::{parse_head, parse_protohyper_base, ExperimentConfig, FileData, HeadChoice};
use crate::error::{HarnessError, Result, StageExt};
use crate::payload::{frame_overhead_bytes, report_payload_bytes};
use crate::report::{
    CellReport, HeadInvariance, HeadReport, InvarianceReport, PayloadReport, RunReport,
};
use crate::synthetic;
use ghofl_core::client_stats::{compute_bundle_rows, ProjectionHeader, StatsRequest};
use ghofl_core::datamodel::{
    ingest_embeddings_with_class_count, EmbeddingFormat, GaussianParams, LabeledEmbeddingSet,
    MomentBundle, SpaceTag,
};
use ghofl_core::fisher::{fit_fisher, project_bundle_fisher, FisherBasis};
use ghofl_core::gaussian_heads::{estimate_params, fit_head, GaussianHead};
use ghofl_core::heads_io::{write_head_blob, AnyHead, HeadBlob};
use ghofl_core::partition::{make_partition, partition_fingerprint};
use ghofl_core::secure_agg;
use ghofl_core::sketch::{project_set, ProjectionMatrix};
use ghofl_core::train_heads::{train_fishermix, train_protohyper, ProtoHyperConfig, TrainConfig};
use ghofl_core::wire::bundle_to_frame;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// Feature standardization fitted on the training split.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(set: &LabeledEmbeddingSet) -> Self {
        let d = set.dim();
        let n = set.len() as f64;
        let mut mean = vec![0.0; d];
        for row in set.features().rows() {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for row in set.features().rows() {
            for j in 0..d {
                let dlt = row[j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / (v / n).sqrt().max(1e-12)).collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, set: &LabeledEmbeddingSet) -> LabeledEmbeddingSet {
        let mut features = set.features().clone();
        for mut row in features.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) * self.inv_std[j];
            }
        }
        LabeledEmbeddingSet::new(features, set.labels().to_vec(), set.class_count())
            .expect("standardization preserves validity")
    }
}

fn load_files(files: &FileData) -> Result<(LabeledEmbeddingSet, LabeledEmbeddingSet)> {
    let format = match files.format.as_str() {
        "csv" => EmbeddingFormat::Csv,
        _ => EmbeddingFormat::PackedBinary,
    };
    let train = ingest_embeddings_with_class_count(&files.train, format, files.class_count)
        .stage("ingest")?;
    let test = ingest_embeddings_with_class_count(&files.test, format, Some(train.class_count()))
        .stage("ingest")?;
    if train.dim() != test.dim() {
        return Err(HarnessError::Config(format!(
            "train dim {} vs test dim {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok((train, test))
}

/// Everything the per-cell pipeline needs, prepared once per run.
struct Prepared {
    train: LabeledEmbeddingSet,
    /// Test set already standardized and sketched, i.e. in aggregation space.
    test_eval: LabeledEmbeddingSet,
    request: StatsRequest,
    projection: Option<ProjectionHeader>,
}

impl Prepared {
    fn agg_dim(&self) -> usize {
        self.request.project_with.map_or(self.train.dim(), |h| h.k)
    }

    fn agg_tag(&self) -> SpaceTag {
        match self.projection {
            Some(h) => SpaceTag::Projected { seed: h.seed, k: h.k },
            None => SpaceTag::Raw,
        }
    }
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = match (&config.data.files, &config.data.synthetic) {
        (Some(files), None) => load_files(files)?,
        (None, Some(recipe)) => synthetic::generate(recipe)?,
        _ => unreachable!("validated"),
    };
    let (train, test) = if config.sketch.standardize {
        let std = Standardizer::fit(&train);
        (std.apply(&train), std.apply(&test))
    } else {
        (train, test)
    };
    let mut request = config.stats.to_request();
    let (test_eval, projection) = if config.sketch.enabled {
        let header = ProjectionHeader {
            seed: config.sketch.seed,
            d: train.dim(),
            k: config.sketch.k,
        };
        request.project_with = Some(header);
        let r = ProjectionMatrix::generate(header.seed, header.d, header.k).stage("sketch")?;
        (project_set(&test, &r).stage("sketch")?, Some(header))
    } else {
        (test, None)
    };
    Ok(Prepared {
        train,
        test_eval,
        request,
        projection,
    })
}

/// Split, reduce, and aggregate one partition cell.
fn aggregate_cell(
    prep: &Prepared,
    spec: &ghofl_core::partition::PartitionSpec,
    secure: bool,
    round_seed: u64,
) -> Result<(MomentBundle, Vec<usize>, u64)> {
    let parts = make_partition(&prep.train, spec).stage("partition")?;
    let fingerprint = partition_fingerprint(&parts);
    let bundles: Vec<MomentBundle> = parts
        .par_iter()
        .map(|rows| compute_bundle_rows(&prep.train, rows, &prep.request))
        .collect::<ghofl_core::Result<_>>()
        .stage("client_stats")?;
    let payload_bytes: Vec<usize> = bundles.iter().map(|b| bundle_to_frame(b).len()).collect();
    let agg = if secure {
        let roster: Vec<u32> = (0..bundles.len() as u32).collect();
        secure_agg::aggregate_round(&bundles, &roster, round_seed).stage("secure_agg")?
    } else {
        ghofl_core::datamodel::sum_bundles(&bundles).stage("aggregate")?
    };
    Ok((agg, payload_bytes, fingerprint))
}

/// The Fisher-space artifacts shared by the subspace heads.
struct FisherStage {
    basis: FisherBasis,
    params_f: GaussianParams,
    test_fisher: LabeledEmbeddingSet,
}

struct FittedHead {
    name: String,
    head: AnyHead,
    fit_ms: f64,
    predictions: Vec<u32>,
    accuracy: f64,
    per_class: Vec<f64>,
}

fn evaluate_gaussian(
    head: &GaussianHead,
    set: &LabeledEmbeddingSet,
) -> ghofl_core::Result<(Vec<u32>, f64, Vec<f64>)> {
    let preds = head.predict(set.features())?;
    let hits = preds.iter().zip(set.labels()).filter(|(p, y)| **p == **y).count();
    let acc = hits as f64 / set.len() as f64;
    let per_class = head.per_class_accuracy(set)?;
    Ok((preds, acc, per_class))
}

fn per_class_from_preds(preds: &[u32], set: &LabeledEmbeddingSet) -> Vec<f64> {
    let mut hits = vec![0usize; set.class_count()];
    let mut totals = vec![0usize; set.class_count()];
    for (p, &y) in preds.iter().zip(set.labels()) {
        totals[y as usize] += 1;
        if *p == y {
            hits[y as usize] += 1;
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect()
}

fn accuracy_of(preds: &[u32], set: &LabeledEmbeddingSet) -> f64 {
    let hits = preds.iter().zip(set.labels()).filter(|(p, y)| **p == **y).count();
    hits as f64 / set.len() as f64
}

fn run_cell(
    config: &ExperimentConfig,
    prep: &Prepared,
    cell_index: usize,
) -> Result<(CellReport, Vec<FittedHead>, GaussianParams)> {
    let pc = &config.partitions[cell_index];
    let spec = pc.to_spec()?;
    let round_seed = ghofl_core::prng::split(config.seed, 0x5EC0 + cell_index as u64);
    let (agg, payload_bytes, fingerprint) =
        aggregate_cell(prep, &spec, config.secure_agg, round_seed)?;

    let shrink = config.shrinkage.to_shrinkage();
    let min_count = config.shrinkage.min_class_count;
    let params = estimate_params(&agg, &shrink, min_count).stage("estimate")?;

    let heads: Vec<HeadChoice> = config
        .heads
        .iter()
        .map(|h| parse_head(h))
        .collect::<Result<_>>()?;
    let needs_fisher = config.fisher.closed_form_in_fisher
        || heads
            .iter()
            .any(|h| matches!(h, HeadChoice::FisherMix | HeadChoice::ProtoHyper));
    let fisher_stage = if needs_fisher {
        let basis = fit_fisher(&params, config.fisher.to_select()?).stage("fisher")?;
        let fisher_bundle = project_bundle_fisher(&agg, &basis).stage("fisher")?;
        let params_f = estimate_params(&fisher_bundle, &shrink, min_count).stage("fisher")?;
        let test_fisher = prep.test_eval.project(&basis);
        Some(FisherStage {
            basis,
            params_f,
            test_fisher,
        })
    } else {
        None
    };

    let synth_cfg = config.synth.to_config(config.seed);
    let mut fitted = Vec::new();
    for (choice, name) in heads.iter().zip(&config.heads) {
        let start = Instant::now();
        let (head, preds, acc, per_class) = match choice {
            HeadChoice::Gaussian(kind) => {
                let (p, eval_set) = if config.fisher.closed_form_in_fisher {
                    let fs = fisher_stage.as_ref().expect("fisher stage prepared");
                    (&fs.params_f, &fs.test_fisher)
                } else {
                    (&params, &prep.test_eval)
                };
                let head = fit_head(p, *kind).stage("fit_head")?;
                let (preds, acc, per_class) = evaluate_gaussian(&head, eval_set).stage("evaluate")?;
                (AnyHead::Gaussian(head), preds, acc, per_class)
            }
            HeadChoice::FisherMix => {
                let fs = fisher_stage.as_ref().expect("fisher stage prepared");
                let fm = &config.train.fishermix;
                let tcfg = TrainConfig {
                    epochs: fm.epochs,
                    batch_size: fm.batch_size,
                    learning_rate: fm.learning_rate,
                    momentum: fm.momentum,
                    seed: fm
                        .seed
                        .unwrap_or_else(|| ghofl_core::prng::split(config.seed, 0xF1)),
                };
                let (head, _) =
                    train_fishermix(&fs.params_f, &fs.basis, &synth_cfg, &tcfg).stage("train")?;
                let preds = head
                    .predict(&fs.test_fisher.features().view())
                    .stage("evaluate")?;
                let acc = accuracy_of(&preds, &fs.test_fisher);
                let per_class = per_class_from_preds(&preds, &fs.test_fisher);
                (AnyHead::FisherMix(head), preds, acc, per_class)
            }
            HeadChoice::ProtoHyper => {
                let fs = fisher_stage.as_ref().expect("fisher stage prepared");
                let ph = &config.train.protohyper;
                let tcfg = TrainConfig {
                    epochs: ph.epochs,
                    batch_size: ph.batch_size,
                    learning_rate: ph.learning_rate,
                    momentum: ph.momentum,
                    seed: ph
                        .seed
                        .unwrap_or_else(|| ghofl_core::prng::split(config.seed, 0xFA)),
                };
                let ph_cfg = ProtoHyperConfig {
                    residual_rank: ph.residual_rank,
                    teacher_blend: ph.teacher_blend,
                    temperature: ph.temperature,
                    kd_weight: ph.kd_weight,
                };
                let (head, _) = train_protohyper(
                    &fs.params_f,
                    &fs.basis,
                    parse_protohyper_base(&ph.base),
                    &synth_cfg,
                    &tcfg,
                    &ph_cfg,
                )
                .stage("train")?;
                let preds = head
                    .predict(&fs.test_fisher.features().view())
                    .stage("evaluate")?;
                let acc = accuracy_of(&preds, &fs.test_fisher);
                let per_class = per_class_from_preds(&preds, &fs.test_fisher);
                (AnyHead::ProtoHyper(head), preds, acc, per_class)
            }
        };
        fitted.push(FittedHead {
            name: name.clone(),
            head,
            fit_ms: start.elapsed().as_secs_f64() * 1e3,
            predictions: preds,
            accuracy: acc,
            per_class,
        });
    }

    let formula = report_payload_bytes(&prep.request, prep.train.class_count(), prep.agg_dim())?;
    let overhead = frame_overhead_bytes(
        &prep.request,
        prep.train.class_count(),
        prep.agg_dim(),
        prep.agg_tag(),
    );
    let scalars_per_client = payload_bytes
        .first()
        .map(|&b| ((b - overhead) / 8) as u64)
        .unwrap_or(0);
    let report = CellReport {
        partition: pc.label(),
        clients: pc.clients,
        partition_fingerprint: format!("{fingerprint:016x}"),
        payload: PayloadReport {
            total_bytes: payload_bytes.iter().sum(),
            per_client_bytes: payload_bytes,
            scalars_per_client,
            formula,
        },
        heads: fitted
            .iter()
            .map(|f| HeadReport {
                name: f.name.clone(),
                accuracy: f.accuracy,
                per_class_accuracy: f.per_class.clone(),
                fit_ms: f.fit_ms,
                parameter_count: f.head.parameter_count(),
                artifact: None,
            })
            .collect(),
    };
    Ok((report, fitted, params))
}

fn params_rel_delta(a: &GaussianParams, b: &GaussianParams) -> f64 {
    let mut worst = 0.0f64;
    let mut cmp = |xs: &[f64], ys: &[f64]| {
        let scale = xs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in xs.iter().zip(ys) {
            worst = worst.max((x - y).abs() / scale);
        }
    };
    cmp(
        a.class_means.as_slice().unwrap(),
        b.class_means.as_slice().unwrap(),
    );
    if let (Some(pa), Some(pb)) = (&a.pooled_cov, &b.pooled_cov) {
        cmp(pa.as_slice().unwrap(), pb.as_slice().unwrap());
    }
    if let (Some(ca), Some(cb)) = (&a.class_covs, &b.class_covs) {
        for (ma, mb) in ca.iter().zip(cb) {
            cmp(ma.as_slice().unwrap(), mb.as_slice().unwrap());
        }
    }
    if let (Some(va), Some(vb)) = (&a.class_vars, &b.class_vars) {
        cmp(va.as_slice().unwrap(), vb.as_slice().unwrap());
    }
    worst
}

fn build_invariance(
    config: &ExperimentConfig,
    all_fitted: &[Vec<FittedHead>],
    all_params: &[GaussianParams],
) -> Option<InvarianceReport> {
    if all_fitted.len() < 2 {
        return None;
    }
    let mut max_param_rel_delta = 0.0f64;
    for p in &all_params[1..] {
        max_param_rel_delta = max_param_rel_delta.max(params_rel_delta(&all_params[0], p));
    }
    let heads = (0..config.heads.len())
        .map(|h| {
            let base = &all_fitted[0][h];
            let mut identical = true;
            let mut max_acc_delta = 0.0f64;
            for cell in &all_fitted[1..] {
                identical &= cell[h].predictions == base.predictions;
                max_acc_delta = max_acc_delta.max((cell[h].accuracy - base.accuracy).abs());
            }
            HeadInvariance {
                name: config.heads[h].clone(),
                predictions_identical: identical,
                max_accuracy_delta: max_acc_delta,
            }
        })
        .collect();
    Some(InvarianceReport {
        max_param_rel_delta,
        heads,
    })
}

fn execute(config: &ExperimentConfig, store: Option<&Path>) -> Result<RunReport> {
    config.validate()?;
    let prep = prepare(config)?;
    let mut cells = Vec::new();
    let mut all_fitted: Vec<Vec<FittedHead>> = Vec::new();
    let mut all_params: Vec<GaussianParams> = Vec::new();
    for cell_index in 0..config.partitions.len() {
        let (mut report, fitted, params) = run_cell(config, &prep, cell_index)?;
        if let Some(out) = store {
            for (h, f) in fitted.iter().enumerate() {
                let file = format!("cell{cell_index}_{}.ghh", sanitize(&f.name));
                let blob = HeadBlob {
                    head: f.head.clone(),
                    projection: prep.projection,
                    basis: None,
                };
                std::fs::write(out.join(&file), write_head_blob(&blob))?;
                report.heads[h].artifact = Some(file);
            }
        }
        cells.push(report);
        all_fitted.push(fitted);
        all_params.push(params);
    }
    let invariance = build_invariance(config, &all_fitted, &all_params);
    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        test_set_fingerprint: format!("{:016x}", prep.test_eval.fingerprint()),
        cells,
        invariance,
        config_echo: toml::to_string(config).unwrap_or_default(),
    })
}

/// Execute a config end to end; writes `report.json`, `report.csv` and one
/// head blob per (cell, head) into the output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let out = Path::new(&config.output_dir).to_path_buf();
    std::fs::create_dir_all(&out)?;
    let report = execute(config, Some(&out))?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    let mut csv = String::from(RunReport::CSV_HEADER);
    csv.push('\n');
    for row in report.csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(out.join("report.csv"), csv)?;
    Ok(report)
}

/// Execute a config without touching the filesystem (no artifacts).
pub fn run_in_memory(config: &ExperimentConfig) -> Result<RunReport> {
    execute(config, None)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Cartesian sweep over Dirichlet alpha and client count, overriding the
/// first partition spec. Writes `sweep.csv` and `sweep.json` to `out_dir`.
pub fn sweep(
    config: &ExperimentConfig,
    alphas: &[f64],
    client_counts: &[usize],
    out_dir: &Path,
) -> Result<Vec<RunReport>> {
    if alphas.is_empty() || client_counts.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one alpha and one client count".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut reports = Vec::new();
    let mut csv = String::from("alpha,clients,head,accuracy,fit_ms,total_payload_bytes\n");
    for &alpha in alphas {
        for &clients in client_counts {
            let mut combo = config.clone();
            let base = combo.partitions[0].clone();
            combo.partitions = vec![crate::config::PartitionConfig {
                clients,
                scheme: "dirichlet".into(),
                alpha: Some(alpha),
                m: None,
                seed: base.seed,
                min_per_class_per_client: base.min_per_class_per_client,
            }];
            let report = run_in_memory(&combo)?;
            for cell in &report.cells {
                for head in &cell.heads {
                    csv.push_str(&format!(
                        "{alpha},{clients},{},{:.6},{:.3},{}\n",
                        head.name, head.accuracy, head.fit_ms, cell.payload.total_bytes
                    ));
                }
            }
            reports.push(report);
        }
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    std::fs::write(out_dir.join("sweep.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(reports)
}
