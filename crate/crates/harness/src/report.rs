//! Run reports: structured JSON plus a flat CSV for sweeps. Every number
//! traces back to a stored artifact (head blobs next to the report, test-set
//! hash inside it).

use crate::payload::PayloadAccounting;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: String,
    /// Hash of the evaluation set the accuracies refer to.
    pub test_set_fingerprint: String,
    /// One entry per partition spec, same global data.
    pub cells: Vec<CellReport>,
    /// Cross-cell agreement; present when the run has several cells.
    pub invariance: Option<InvarianceReport>,
    /// The configuration the run executed, echoed verbatim.
    pub config_echo: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub partition: String,
    pub clients: usize,
    pub partition_fingerprint: String,
    pub payload: PayloadReport,
    pub heads: Vec<HeadReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PayloadReport {
    /// Serialized frame size per client, in bytes.
    pub per_client_bytes: Vec<usize>,
    pub total_bytes: usize,
    /// Independent scalars per client upload.
    pub scalars_per_client: u64,
    /// Closed-form accounting for the active statistics request.
    pub formula: PayloadAccounting,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadReport {
    pub name: String,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Closed-form fit or training wall time.
    pub fit_ms: f64,
    pub parameter_count: usize,
    /// File the fitted head was stored in, relative to the output dir.
    pub artifact: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    /// Largest relative difference of closed-form parameters across cells.
    pub max_param_rel_delta: f64,
    pub heads: Vec<HeadInvariance>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadInvariance {
    pub name: String,
    /// Whether test-set predictions coincide across every cell.
    pub predictions_identical: bool,
    pub max_accuracy_delta: f64,
}

impl RunReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Flat rows: one per (cell, head).
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for cell in &self.cells {
            for head in &cell.heads {
                rows.push(format!(
                    "{},{},{},{:.6},{:.3},{},{}",
                    cell.partition.replace(',', ";"),
                    cell.clients,
                    head.name,
                    head.accuracy,
                    head.fit_ms,
                    head.parameter_count,
                    cell.payload.total_bytes,
                ));
            }
        }
        rows
    }

    pub const CSV_HEADER: &'static str =
        "partition,clients,head,accuracy,fit_ms,parameters,total_payload_bytes";
}
