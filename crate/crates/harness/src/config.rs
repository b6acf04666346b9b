//! Experiment configuration: a TOML file, schema-validated before any
//! compute. Unknown keys are rejected everywhere.

use crate::error::{HarnessError, Result};
use ghofl_core::client_stats::StatsRequest;
use ghofl_core::gaussian_heads::{HeadKind, Shrinkage};
use ghofl_core::partition::{PartitionSpec, Scheme};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; per-stage seeds derive from it unless set explicitly.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Route client bundles through simulated secure aggregation.
    #[serde(default)]
    pub secure_agg: bool,
    /// Heads to fit and evaluate.
    pub heads: Vec<String>,
    pub data: DataConfig,
    /// One cell per partition spec; all reuse the same global data.
    pub partitions: Vec<PartitionConfig>,
    #[serde(default)]
    pub sketch: SketchConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub shrinkage: ShrinkageConfig,
    #[serde(default)]
    pub fisher: FisherConfig,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub files: Option<FileData>,
    #[serde(default)]
    pub synthetic: Option<SyntheticRecipe>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: String,
    pub test: String,
    /// "csv" or "packed"
    #[serde(default = "default_format")]
    pub format: String,
    /// Override for shards that may not contain every class.
    #[serde(default)]
    pub class_count: Option<usize>,
}

fn default_format() -> String {
    "packed".into()
}

/// Fully synthetic data so the whole pipeline runs with zero external files.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecipe {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    pub means: MeanLayout,
    pub covariance: CovarianceFamily,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MeanLayout {
    /// "simplex" (means at scaled simplex vertices) or "axis" (means spaced
    /// along the first coordinate).
    pub layout: String,
    /// Simplex scale, or axis spacing between adjacent class means.
    pub separation: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceFamily {
    /// "identity", "isotropic" (per-class variances) or "anisotropic"
    /// (per-class, per-dimension scales drawn from `scale_range`).
    pub family: String,
    #[serde(default)]
    pub variances: Option<Vec<f64>>,
    #[serde(default)]
    pub scale_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    /// "dirichlet", "classes_per_client" or "iid".
    pub scheme: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub min_per_class_per_client: usize,
}

impl PartitionConfig {
    pub fn to_spec(&self) -> Result<PartitionSpec> {
        let scheme = match self.scheme.as_str() {
            "iid" => Scheme::Iid,
            "dirichlet" => Scheme::Dirichlet {
                alpha: self.alpha.ok_or_else(|| {
                    HarnessError::Config("dirichlet partitions need `alpha`".into())
                })?,
            },
            "classes_per_client" => Scheme::ClassesPerClient {
                m: self.m.ok_or_else(|| {
                    HarnessError::Config("classes_per_client partitions need `m`".into())
                })?,
            },
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown partition scheme '{other}'"
                )))
            }
        };
        Ok(PartitionSpec {
            num_clients: self.clients,
            scheme,
            seed: self.seed,
            min_per_class_per_client: self.min_per_class_per_client,
        })
    }

    pub fn label(&self) -> String {
        match self.scheme.as_str() {
            "dirichlet" => format!(
                "dirichlet(alpha={}) x {} clients",
                self.alpha.unwrap_or(f64::NAN),
                self.clients
            ),
            "classes_per_client" => {
                format!("classes_per_client(m={}) x {} clients", self.m.unwrap_or(0), self.clients)
            }
            other => format!("{other} x {} clients", self.clients),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchConfig {
    pub enabled: bool,
    pub k: usize,
    pub seed: u64,
    /// Standardize features (train-set statistics) before projecting.
    pub standardize: bool,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig {
            enabled: false,
            k: 0,
            seed: 0,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub send_b: bool,
    pub send_s: bool,
    pub send_d: bool,
    pub send_m34: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            send_b: true,
            send_s: true,
            send_d: true,
            send_m34: false,
        }
    }
}

impl StatsConfig {
    pub fn to_request(&self) -> StatsRequest {
        StatsRequest {
            want_b: self.send_b,
            want_s: self.send_s,
            want_d: self.send_d,
            want_m34: self.send_m34,
            project_with: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShrinkageConfig {
    pub pooled_alpha: f64,
    pub class_alpha: f64,
    pub variance_floor: Option<f64>,
    /// Classes below this count are dropped server-side.
    pub min_class_count: u64,
}

impl Default for ShrinkageConfig {
    fn default() -> Self {
        ShrinkageConfig {
            pooled_alpha: 0.1,
            class_alpha: 0.3,
            variance_floor: None,
            min_class_count: 2,
        }
    }
}

impl ShrinkageConfig {
    pub fn to_shrinkage(&self) -> Shrinkage {
        Shrinkage {
            alpha: self.pooled_alpha,
            class_alpha: Some(self.class_alpha),
            variance_floor: self.variance_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    /// "energy" or "fixed".
    pub selection: FisherSelectionKind,
    pub threshold: f64,
    pub k: usize,
    /// Evaluate the closed-form heads in the Fisher subspace instead of the
    /// aggregation space.
    pub closed_form_in_fisher: bool,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FisherSelectionKind {
    Energy,
    Fixed,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            selection: FisherSelectionKind::Energy,
            threshold: 0.99,
            k: 0,
            closed_form_in_fisher: false,
        }
    }
}

impl FisherConfig {
    pub fn to_select(&self) -> Result<ghofl_core::fisher::FisherSelect> {
        Ok(match self.selection {
            FisherSelectionKind::Energy => ghofl_core::fisher::FisherSelect::Energy(self.threshold),
            FisherSelectionKind::Fixed => {
                if self.k == 0 {
                    return Err(HarnessError::Config(
                        "fisher.selection = \"fixed\" needs fisher.k >= 1".into(),
                    ));
                }
                ghofl_core::fisher::FisherSelect::Fixed(self.k)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub per_class: usize,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub delta_scale: f64,
    pub delta_dirs: usize,
    pub seed: Option<u64>,
    /// "auto", "class", "pooled" or "diagonal".
    pub covariance_source: CovSourceKind,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CovSourceKind {
    Auto,
    Class,
    Pooled,
    Diagonal,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            per_class: 512,
            tau_lo: 0.5,
            tau_hi: 2.0,
            delta_scale: 0.1,
            delta_dirs: 2,
            seed: None,
            covariance_source: CovSourceKind::Auto,
        }
    }
}

impl SynthSection {
    pub fn to_config(&self, global_seed: u64) -> ghofl_core::synth::SynthConfig {
        ghofl_core::synth::SynthConfig {
            per_class: self.per_class,
            tau_clip: (self.tau_lo, self.tau_hi),
            delta_scale: self.delta_scale,
            delta_dirs: self.delta_dirs,
            seed: self.seed.unwrap_or_else(|| ghofl_core::prng::split(global_seed, 0x53594E)),
            covariance_source: match self.covariance_source {
                CovSourceKind::Auto => ghofl_core::synth::CovarianceSource::Auto,
                CovSourceKind::Class => ghofl_core::synth::CovarianceSource::Class,
                CovSourceKind::Pooled => ghofl_core::synth::CovarianceSource::Pooled,
                CovSourceKind::Diagonal => ghofl_core::synth::CovarianceSource::Diagonal,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub fishermix: FisherMixTrain,
    pub protohyper: ProtoHyperTrain,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherMixTrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: Option<u64>,
}

impl Default for FisherMixTrain {
    fn default() -> Self {
        FisherMixTrain {
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoHyperTrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: Option<u64>,
    /// Base head: "nb_diag", "lda" or "qda".
    pub base: String,
    pub residual_rank: usize,
    pub teacher_blend: f64,
    pub temperature: f64,
    pub kd_weight: f64,
}

impl Default for ProtoHyperTrain {
    fn default() -> Self {
        ProtoHyperTrain {
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: None,
            base: "lda".into(),
            residual_rank: 8,
            teacher_blend: 0.5,
            temperature: 2.0,
            kd_weight: 0.7,
        }
    }
}

/// A head named in the config's `heads` list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadChoice {
    Gaussian(HeadKind),
    FisherMix,
    ProtoHyper,
}

pub fn parse_head(name: &str) -> Result<HeadChoice> {
    Ok(match name {
        "nb_diag" | "nb" => HeadChoice::Gaussian(HeadKind::NbDiag),
        "lda" => HeadChoice::Gaussian(HeadKind::Lda),
        "qda" => HeadChoice::Gaussian(HeadKind::Qda),
        "fishermix" => HeadChoice::FisherMix,
        "protohyper" => HeadChoice::ProtoHyper,
        other => {
            if let Some(rank) = other.strip_prefix("dlr_qda:") {
                let rank: usize = rank.parse().map_err(|_| {
                    HarnessError::Config(format!("bad dlr_qda rank in '{other}'"))
                })?;
                HeadChoice::Gaussian(HeadKind::DlrQda { rank })
            } else {
                return Err(HarnessError::Config(format!("unknown head '{other}'")));
            }
        }
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(HarnessError::Config("at least one head required".into()));
        }
        for h in &self.heads {
            parse_head(h)?;
        }
        if self.partitions.is_empty() {
            return Err(HarnessError::Config("at least one partition required".into()));
        }
        for p in &self.partitions {
            p.to_spec()?;
        }
        match (&self.data.files, &self.data.synthetic) {
            (None, None) => {
                return Err(HarnessError::Config(
                    "data needs either [data.files] or [data.synthetic]".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config(
                    "data.files and data.synthetic are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if let Some(f) = &self.data.files {
            if f.format != "csv" && f.format != "packed" {
                return Err(HarnessError::Config(format!(
                    "unknown embedding format '{}'",
                    f.format
                )));
            }
        }
        if let Some(s) = &self.data.synthetic {
            validate_recipe(s)?;
        }
        if self.sketch.enabled && self.sketch.k == 0 {
            return Err(HarnessError::Config("sketch.k must be >= 1 when enabled".into()));
        }
        self.fisher.to_select()?;
        match self.train.protohyper.base.as_str() {
            "nb_diag" | "nb" | "lda" | "qda" => {}
            other => {
                return Err(HarnessError::Config(format!(
                    "protohyper base must be nb_diag|lda|qda, got '{other}'"
                )))
            }
        }
        Ok(())
    }
}

pub fn validate_recipe(recipe: &SyntheticRecipe) -> Result<()> {
    if recipe.classes < 2 || recipe.dim == 0 {
        return Err(HarnessError::Config(
            "synthetic recipe needs classes >= 2 and dim >= 1".into(),
        ));
    }
    if recipe.train_per_class == 0 || recipe.test_per_class == 0 {
        return Err(HarnessError::Config("synthetic sample counts must be >= 1".into()));
    }
    match recipe.means.layout.as_str() {
        "simplex" => {
            if recipe.dim < recipe.classes {
                return Err(HarnessError::Config(format!(
                    "simplex layout needs dim >= classes ({} < {})",
                    recipe.dim, recipe.classes
                )));
            }
        }
        "axis" => {}
        other => {
            return Err(HarnessError::Config(format!("unknown mean layout '{other}'")));
        }
    }
    match recipe.covariance.family.as_str() {
        "identity" => {}
        "isotropic" => {
            let v = recipe.covariance.variances.as_ref().ok_or_else(|| {
                HarnessError::Config("isotropic covariance needs `variances`".into())
            })?;
            if v.len() != recipe.classes || v.iter().any(|&x| x <= 0.0) {
                return Err(HarnessError::Config(
                    "`variances` needs one positive entry per class".into(),
                ));
            }
        }
        "anisotropic" => {
            let (lo, hi) = recipe.covariance.scale_range.ok_or_else(|| {
                HarnessError::Config("anisotropic covariance needs `scale_range`".into())
            })?;
            if !(lo > 0.0 && lo <= hi) {
                return Err(HarnessError::Config(
                    "scale_range must satisfy 0 < lo <= hi".into(),
                ));
            }
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown covariance family '{other}'"
            )));
        }
    }
    Ok(())
}

pub fn parse_protohyper_base(name: &str) -> HeadKind {
    match name {
        "nb_diag" | "nb" => HeadKind::NbDiag,
        "qda" => HeadKind::Qda,
        _ => HeadKind::Lda,
    }
}
