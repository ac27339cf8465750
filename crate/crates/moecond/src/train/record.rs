//! Per-step training records, streamed as newline-delimited JSON.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One cadence tick of training telemetry. Field order is the wire order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    /// Total objective (mse + aux); None on the divergence diagnostic record.
    pub loss: Option<f64>,
    pub mse: Option<f64>,
    pub aux: f64,
    pub diverged: bool,
    /// ℓ2 gradient norm over each routed expert's FFN params, [layer][expert].
    pub expert_grad_norms: Vec<Vec<f64>>,
    /// Whole-model aggregate per expert (summed in quadrature over layers).
    pub expert_grad_norms_model: Vec<f64>,
    /// Cumulative activation counts Nᵢ, [layer][expert].
    pub activation_counts: Vec<Vec<u64>>,
    /// Bias snapshot, [layer][expert].
    pub bias: Vec<Vec<f64>>,
    /// Condenser sets, [layer] (empty before warm-up selection).
    pub condensers: Vec<Vec<usize>>,
    /// Per-domain evaluation loss on the held-out sets.
    pub eval_per_domain: Vec<f64>,
}

pub trait RecordSink {
    fn emit(&mut self, rec: &RunRecord) -> Result<()>;
}

/// Collects records in memory (tests, analyses).
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<RunRecord>,
}

impl RecordSink for VecSink {
    fn emit(&mut self, rec: &RunRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Streams records to a writer as NDJSON.
pub struct NdjsonSink<W: Write> {
    writer: W,
}

impl<W: Write> NdjsonSink<W> {
    pub fn new(writer: W) -> Self {
        Self { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> RecordSink for NdjsonSink<W> {
    fn emit(&mut self, rec: &RunRecord) -> Result<()> {
        let line = serde_json::to_string(rec)
            .map_err(|e| crate::error::Error::Format(format!("record serialization: {e}")))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }
}

/// Fans a record out to two sinks.
pub struct TeeSink<'a, A: RecordSink, B: RecordSink> {
    pub first: &'a mut A,
    pub second: &'a mut B,
}

impl<A: RecordSink, B: RecordSink> RecordSink for TeeSink<'_, A, B> {
    fn emit(&mut self, rec: &RunRecord) -> Result<()> {
        self.first.emit(rec)?;
        self.second.emit(rec)
    }
}

pub fn parse_ndjson(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| crate::error::Error::Format(format!("bad record line: {e}")))
        })
        .collect()
}
