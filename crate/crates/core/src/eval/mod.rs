//! Metrics, the cross-task smoothness diagnostic, and the inference timing
//! harness.

mod bench;
mod lipschitz;
mod metrics;

pub use bench::{bench_inputs, bench_inference, BenchConfig, BenchReport};
pub use lipschitz::{lipschitz_from_points, lipschitz_ratio, student_probes, LipschitzEstimate, MIN_INPUT_DISTANCE};
pub use metrics::{
    accuracy, argmax, average_ranks, binary_f1, compute_metrics, label_agreement, pearson, spearman, MetricReport,
};

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes one JSON object per line.
pub fn write_json_lines<W: Write, S: Serialize>(out: &mut W, items: &[S]) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Eval(format!("cannot serialize report: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::Eval(format!("cannot write report: {e}")))?;
    }
    Ok(())
}
