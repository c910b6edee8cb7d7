//! Brute-force ground truth for small spaces: exhaustive enumeration of
//! every (architecture, split) member with exact objective evaluation.
//!
//! Sample ids are the canonical mixed-radix index (layer dimensions first,
//! split last), fixing one ordering for reports and diffs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyModel;
use crate::objective::{self, EvalCtx, Evaluator, ObjectiveConfig};
use crate::space::{sample_from_id, sample_id, ArchSample, SearchSpaceSpec};

pub const DEFAULT_CAP: u64 = 100_000;

/// One enumerated member with its objective components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub id: u128,
    pub sample: ArchSample,
    pub loss: f64,
    pub latency_ms: f64,
    pub penalty_ms: f64,
    pub combined: f64,
}

/// Full ranking of a space under one objective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Every member in id order.
    pub entries: Vec<OracleEntry>,
    /// Index into `entries` of the best (minimum combined; ties go to the
    /// lowest id).
    pub best_index: usize,
    /// Members with latency at or under the threshold.
    pub feasible_count: u64,
    pub threshold_ms: f64,
}

impl OracleReport {
    pub fn best(&self) -> &OracleEntry {
        &self.entries[self.best_index]
    }

    /// Entries sorted best-first (combined ascending, id as tiebreak).
    pub fn ranking(&self) -> Vec<&OracleEntry> {
        let mut sorted: Vec<&OracleEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| {
            a.combined
                .partial_cmp(&b.combined)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.id.cmp(&b.id))
        });
        sorted
    }
}

/// Evaluate the full objective for every member of the space.
///
/// Refuses spaces larger than `cap` members. The evaluator must be
/// deterministic; the provided context is reused for every member.
pub fn enumerate_optimum(
    space: &SearchSpaceSpec,
    evaluator: &dyn Evaluator,
    latency_model: &LatencyModel,
    config: &ObjectiveConfig,
    ctx: &EvalCtx,
    cap: u64,
) -> Result<OracleReport> {
    let cardinality = space.cardinality();
    if cardinality > cap.into() {
        return Err(Error::SpaceTooLarge {
            cardinality: cardinality.to_string(),
            cap,
        });
    }
    let total: u64 = cardinality.to_string().parse().expect("fits after cap check");

    let mut entries = Vec::with_capacity(total as usize);
    let mut feasible_count = 0u64;
    for id in 0..total {
        let sample = sample_from_id(id as u128, space);
        debug_assert_eq!(sample_id(&sample, space), id as u128);
        let b = objective::objective(evaluator, &sample, latency_model, space, config, ctx)?;
        if b.latency.total_ms <= config.t_th_ms {
            feasible_count += 1;
        }
        entries.push(OracleEntry {
            id: id as u128,
            sample,
            loss: b.loss,
            latency_ms: b.latency.total_ms,
            penalty_ms: b.penalty_ms,
            combined: b.combined,
        });
    }
    // Ties resolve to the lowest id because the scan runs in id order.
    let mut best = 0usize;
    for (i, e) in entries.iter().enumerate() {
        if e.combined < entries[best].combined {
            best = i;
        }
    }
    Ok(OracleReport {
        entries,
        best_index: best,
        feasible_count,
        threshold_ms: config.t_th_ms,
    })
}

/// Delimited-text export: id, per-layer block ids, split position, loss,
/// latency, penalty, combined.
pub fn report_csv(report: &OracleReport, space: &SearchSpaceSpec) -> String {
    let mut out = String::from("id,blocks,split,loss,latency_ms,penalty_ms,combined\n");
    for e in &report.entries {
        let blocks: Vec<&str> = e
            .sample
            .layer_choices()
            .iter()
            .enumerate()
            .map(|(l, &c)| space.layers[l].candidates[c].as_str())
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.id,
            blocks.join("|"),
            space.split_candidates[e.sample.split_index()],
            e.loss,
            e.latency_ms,
            e.penalty_ms,
            e.combined
        ));
    }
    out
}
