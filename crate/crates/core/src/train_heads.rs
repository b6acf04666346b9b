//! Server-side trainable heads fit purely on synthetic batches.
//!
//! *FisherMix* is a cosine classifier with an additive angular margin: rows
//! of `W` and inputs are L2-normalized, the true class's cosine is reduced by
//! `m` during training and everything is scaled by `s` before the softmax.
//!
//! *Proto-Hyper* adds a low-rank residual `V2 U1 z` to the per-sample
//! standardized logits of a closed-form base head and trains it against a
//! blended LDA/QDA teacher with temperature-scaled distillation plus
//! cross-entropy. The teacher is a constant during training.
//!
//! Both losses have closed-form gradients, so training is plain momentum SGD
//! with no autodiff dependency; fixed seeds give bit-identical weights.

use crate::datamodel::{GaussianParams, LabeledEmbeddingSet};
use crate::error::{Error, Result};
use crate::fisher::FisherBasis;
use crate::gaussian_heads::{argmax, fit_head, GaussianHead, HeadKind};
use crate::prng;
use crate::synth::{sample, SynthConfig, SyntheticBatch};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

const NORM_FLOOR: f64 = 1e-12;
const STD_EPS: f64 = 1e-8;
const U1_INIT_CONTEXT: u64 = 0x5531; // "U1"

/// Optimizer settings shared by both heads.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for the cosine-margin head.
    pub fn fishermix() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }

    /// Defaults for the residual head.
    pub fn protohyper() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            ..Self::fishermix()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(
                "batch size and learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Mean loss per epoch, for monitoring and the no-regression checks.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
}

/// Cosine-margin classifier over Fisher-space inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMixHead {
    /// One weight row per retained class.
    pub w: Array2<f64>,
    pub scale: f64,
    pub margin: f64,
    /// Original label per retained row.
    pub class_labels: Vec<usize>,
}

impl FisherMixHead {
    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.w.nrows()
    }

    /// Prototype initialization: rows are the normalized class means.
    pub fn init_from_means(params: &GaussianParams, scale: f64, margin: f64) -> Self {
        let mut w = params.class_means.clone();
        for mut row in w.rows_mut() {
            let norm = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|v| v / norm);
        }
        FisherMixHead {
            w,
            scale,
            margin,
            class_labels: params.class_labels.clone(),
        }
    }

    /// Margin-free scores `s * cos(theta)` used at evaluation time.
    pub fn score_batch(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "input dim {} vs head dim {}",
                z.ncols(),
                self.dim()
            )));
        }
        let w_hat = normalized_rows(&self.w.view());
        let z_hat = normalized_rows(z);
        Ok(z_hat.dot(&w_hat.t()).mapv(|v| v * self.scale))
    }

    pub fn predict(&self, z: &ArrayView2<f64>) -> Result<Vec<u32>> {
        let scores = self.score_batch(z)?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|r| self.class_labels[argmax(&r)] as u32)
            .collect())
    }

    pub fn accuracy(&self, set: &LabeledEmbeddingSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let preds = self.predict(&set.features().view())?;
        let hits = preds.iter().zip(set.labels()).filter(|(p, y)| **p == **y).count();
        Ok(hits as f64 / set.len() as f64)
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len()
    }
}

fn normalized_rows(m: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(NORM_FLOOR);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Cross-entropy of the margin logits and its gradient in `W`.
///
/// Logits are `s * (cos theta_c - m * [c == y])`; the gradient flows through
/// both normalizations analytically. Rows with vanishing norm are floored
/// and flagged through the returned counter.
pub fn fishermix_loss_and_grad(
    head: &FisherMixHead,
    features: &ArrayView2<f64>,
    class_rows: &[u32],
) -> Result<(f64, Array2<f64>, usize)> {
    let b = features.nrows();
    if b == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if b != class_rows.len() {
        return Err(Error::DimMismatch("features vs labels length".into()));
    }
    let c = head.class_count();
    let k = head.dim();
    let mut zero_norm_rows = 0usize;

    // Per-class norms and unit rows.
    let mut w_norms = Array1::<f64>::zeros(c);
    for (i, row) in head.w.rows().into_iter().enumerate() {
        w_norms[i] = row.dot(&row).sqrt().max(NORM_FLOOR);
    }
    let mut w_hat = head.w.clone();
    for (i, mut row) in w_hat.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v / w_norms[i]);
    }

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((c, k));
    let inv_b = 1.0 / b as f64;
    for (i, z) in features.rows().into_iter().enumerate() {
        let y = class_rows[i] as usize;
        let norm = z.dot(&z).sqrt();
        if norm < NORM_FLOOR {
            zero_norm_rows += 1;
        }
        let u = z.mapv(|v| v / norm.max(NORM_FLOOR));
        let cos = w_hat.dot(&u);
        let mut logits = cos.mapv(|v| head.scale * v);
        logits[y] -= head.scale * head.margin;
        let p = softmax(&logits.view());
        loss -= p[y].max(f64::MIN_POSITIVE).ln() * inv_b;
        for cl in 0..c {
            let coef = (p[cl] - f64::from(cl == y)) * inv_b * head.scale / w_norms[cl];
            if coef == 0.0 {
                continue;
            }
            let w_row = w_hat.row(cl);
            let mut g_row = grad.row_mut(cl);
            for j in 0..k {
                g_row[j] += coef * (u[j] - cos[cl] * w_row[j]);
            }
        }
    }
    if zero_norm_rows > 0 {
        log::warn!("{zero_norm_rows} input row(s) had vanishing norm and were floored");
    }
    Ok((loss, grad, zero_norm_rows))
}

fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Train FisherMix on a synthetic batch drawn from `params_f`.
///
/// `W` starts at the normalized class means, so zero epochs leave a
/// prototype cosine classifier.
pub fn train_fishermix(
    params_f: &GaussianParams,
    basis: &FisherBasis,
    cfg: &SynthConfig,
    tcfg: &TrainConfig,
) -> Result<(FisherMixHead, TrainTrace)> {
    tcfg.validate()?;
    if params_f.dim != basis.k_f {
        return Err(Error::DimMismatch(format!(
            "params dim {} vs basis dimension {}",
            params_f.dim, basis.k_f
        )));
    }
    let batch = sample(params_f, cfg)?;
    let mut head = FisherMixHead::init_from_means(params_f, 16.0, 0.2);
    let trace = sgd(
        tcfg,
        &batch,
        &mut head,
        |head, features, rows| {
            let (loss, grad, _) = fishermix_loss_and_grad(head, features, rows)?;
            Ok((loss, vec![grad]))
        },
        |head, updates| {
            head.w += &updates[0];
        },
    )?;
    Ok((head, trace))
}

/// Hyperparameters of the residual head.
#[derive(Debug, Clone, Copy)]
pub struct ProtoHyperConfig {
    /// Rank of the residual `V2 U1`.
    pub residual_rank: usize,
    /// QDA weight in the blended teacher.
    pub teacher_blend: f64,
    /// Distillation temperature.
    pub temperature: f64,
    /// Weight of the KD term against cross-entropy.
    pub kd_weight: f64,
}

impl Default for ProtoHyperConfig {
    fn default() -> Self {
        ProtoHyperConfig {
            residual_rank: 8,
            teacher_blend: 0.5,
            temperature: 2.0,
            kd_weight: 0.7,
        }
    }
}

impl ProtoHyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.teacher_blend) || !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::InvalidParameter(
                "teacher blend and KD weight must lie in [0, 1]".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidParameter("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Low-rank residual over a standardized Gaussian base.
#[derive(Debug, Clone)]
pub struct ProtoHyperHead {
    pub base: GaussianHead,
    /// `r_h x k` input map.
    pub u1: Array2<f64>,
    /// `C x r_h` output map.
    pub v2: Array2<f64>,
    /// Blended teacher: `beta * std(QDA) + (1 - beta) * std(LDA)`, or plain
    /// LDA when class covariances are unavailable.
    pub teacher_lda: GaussianHead,
    pub teacher_qda: Option<GaussianHead>,
    pub cfg: ProtoHyperConfig,
    pub class_labels: Vec<usize>,
}

/// Per-row standardization across class logits: subtract the row mean,
/// divide by the (population) row std plus a small epsilon.
pub fn standardize_rows(logits: &Array2<f64>) -> Array2<f64> {
    let c = logits.ncols() as f64;
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let denom = var.sqrt() + STD_EPS;
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

impl ProtoHyperHead {
    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn class_count(&self) -> usize {
        self.base.class_count()
    }

    /// Student logits: `std(g_base(z)) + V2 U1 z` per row.
    pub fn forward(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let base_logits = standardize_rows(&self.base.score_batch(&z.to_owned())?);
        if self.u1.nrows() == 0 {
            return Ok(base_logits);
        }
        let h = z.dot(&self.u1.t());
        Ok(base_logits + h.dot(&self.v2.t()))
    }

    /// Blended teacher logits (constant with respect to the residual).
    pub fn teacher_logits(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let lda = standardize_rows(&self.teacher_lda.score_batch(&z.to_owned())?);
        match &self.teacher_qda {
            Some(qda) => {
                let q = standardize_rows(&qda.score_batch(&z.to_owned())?);
                let beta = self.cfg.teacher_blend;
                Ok(q.mapv(|v| beta * v) + lda.mapv(|v| (1.0 - beta) * v))
            }
            None => Ok(lda),
        }
    }

    pub fn predict(&self, z: &ArrayView2<f64>) -> Result<Vec<u32>> {
        let logits = self.forward(z)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| self.class_labels[argmax(&r)] as u32)
            .collect())
    }

    pub fn accuracy(&self, set: &LabeledEmbeddingSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let preds = self.predict(&set.features().view())?;
        let hits = preds.iter().zip(set.labels()).filter(|(p, y)| **p == **y).count();
        Ok(hits as f64 / set.len() as f64)
    }

    /// Residual parameters only (the base is closed-form).
    pub fn parameter_count(&self) -> usize {
        self.u1.len() + self.v2.len()
    }
}

/// KD + CE blend and its gradients in `U1` and `V2`.
///
/// `L = a T^2 KL(softmax(teach/T) || softmax(stud/T)) + (1-a) CE(stud, y)`
/// with the teacher treated as a constant.
pub fn protohyper_loss_and_grad(
    head: &ProtoHyperHead,
    features: &ArrayView2<f64>,
    class_rows: &[u32],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let b = features.nrows();
    if b == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if b != class_rows.len() {
        return Err(Error::DimMismatch("features vs labels length".into()));
    }
    let t = head.cfg.temperature;
    let a = head.cfg.kd_weight;
    let student = head.forward(features)?;
    let teacher = head.teacher_logits(features)?;

    let p_teach = softmax_rows(&teacher.mapv(|v| v / t));
    let q_stud = softmax_rows(&student.mapv(|v| v / t));
    let p_hard = softmax_rows(&student);

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    // dL/d(student logits)
    let mut g_logits = Array2::<f64>::zeros(student.raw_dim());
    for i in 0..b {
        let y = class_rows[i] as usize;
        let mut kl = 0.0;
        for c in 0..student.ncols() {
            let p = p_teach[[i, c]];
            if p > 0.0 {
                kl += p * (p.ln() - q_stud[[i, c]].max(f64::MIN_POSITIVE).ln());
            }
            g_logits[[i, c]] = inv_b
                * (a * t * (q_stud[[i, c]] - p) + (1.0 - a) * (p_hard[[i, c]] - f64::from(c == y)));
        }
        loss += inv_b
            * (a * t * t * kl - (1.0 - a) * p_hard[[i, y]].max(f64::MIN_POSITIVE).ln());
    }

    // Residual chain: student = std(base) + H V2^T with H = Z U1^T.
    let (grad_u1, grad_v2) = if head.u1.nrows() == 0 {
        (
            Array2::<f64>::zeros(head.u1.raw_dim()),
            Array2::<f64>::zeros(head.v2.raw_dim()),
        )
    } else {
        let h = features.dot(&head.u1.t());
        let grad_v2 = g_logits.t().dot(&h);
        let grad_h = g_logits.dot(&head.v2);
        let grad_u1 = grad_h.t().dot(features);
        (grad_u1, grad_v2)
    };
    Ok((loss, grad_u1, grad_v2))
}

/// Fit a Proto-Hyper head on synthetic data.
///
/// `U1` starts with small Gaussian entries and `V2` at zero, so the step-0
/// student is exactly the standardized base head.
pub fn train_protohyper(
    params_f: &GaussianParams,
    basis: &FisherBasis,
    base_kind: HeadKind,
    cfg: &SynthConfig,
    tcfg: &TrainConfig,
    ph_cfg: &ProtoHyperConfig,
) -> Result<(ProtoHyperHead, TrainTrace)> {
    tcfg.validate()?;
    ph_cfg.validate()?;
    if params_f.dim != basis.k_f {
        return Err(Error::DimMismatch(format!(
            "params dim {} vs basis dimension {}",
            params_f.dim, basis.k_f
        )));
    }
    let base = fit_head(params_f, base_kind)?;
    let teacher_lda = fit_head(params_f, HeadKind::Lda)?;
    let teacher_qda = if params_f.class_covs.is_some() {
        Some(fit_head(params_f, HeadKind::Qda)?)
    } else {
        None
    };
    if teacher_qda.is_none() {
        log::info!("class covariances unavailable: distilling from a plain linear teacher");
    }
    let k = params_f.dim;
    let r = ph_cfg.residual_rank;
    let init_stream = prng::split(tcfg.seed, U1_INIT_CONTEXT);
    let u1 = Array2::from_shape_fn((r, k), |(i, j)| {
        0.01 * prng::normal(init_stream, (i * k + j) as u64)
    });
    let v2 = Array2::<f64>::zeros((params_f.class_count(), r));
    let mut head = ProtoHyperHead {
        base,
        u1,
        v2,
        teacher_lda,
        teacher_qda,
        cfg: *ph_cfg,
        class_labels: params_f.class_labels.clone(),
    };
    if r == 0 {
        // Nothing to train: the head is the standardized base.
        return Ok((head, TrainTrace::default()));
    }
    let batch = sample(params_f, cfg)?;
    let trace = sgd(
        tcfg,
        &batch,
        &mut head,
        |head, features, rows| {
            let (loss, gu, gv) = protohyper_loss_and_grad(head, features, rows)?;
            Ok((loss, vec![gu, gv]))
        },
        |head, updates| {
            head.u1 += &updates[0];
            head.v2 += &updates[1];
        },
    )?;
    Ok((head, trace))
}

/// Minibatch momentum SGD over a fixed synthetic batch. The closure returns
/// the loss and one gradient per parameter block; `apply` adds the velocity
/// updates to the state in the same order.
fn sgd<S>(
    tcfg: &TrainConfig,
    batch: &SyntheticBatch,
    state: &mut S,
    loss_and_grad: impl Fn(&S, &ArrayView2<f64>, &[u32]) -> Result<(f64, Vec<Array2<f64>>)>,
    apply: impl Fn(&mut S, &[Array2<f64>]),
) -> Result<TrainTrace> {
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(tcfg.seed);
    let mut velocity: Vec<Array2<f64>> = Vec::new();
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    for _epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let mut features = Array2::<f64>::zeros((chunk.len(), batch.features.ncols()));
            let mut rows = Vec::with_capacity(chunk.len());
            for (dst, &src) in chunk.iter().enumerate() {
                features.row_mut(dst).assign(&batch.features.row(src));
                rows.push(batch.class_rows[src]);
            }
            let (loss, grads) = loss_and_grad(state, &features.view(), &rows)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            if velocity.is_empty() {
                velocity = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            }
            for (v, g) in velocity.iter_mut().zip(&grads) {
                v.mapv_inplace(|x| x * tcfg.momentum);
                v.scaled_add(-tcfg.learning_rate, g);
            }
            apply(state, &velocity);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        trace.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(trace)
}
