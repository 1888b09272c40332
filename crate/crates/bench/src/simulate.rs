//! Trace-driven KV-cache simulation.
//!
//! CSV columns, in order: `step,policy,resident_kv,attended_kv,evictions`.
//! `attended_kv` is the number of positions the query at that step attends
//! (the per-token compute proxy); `evictions` counts positions dropped at that
//! step.

use std::io::Write;

use anyhow::Result;
use convsink::cache::{policy_for, KvPolicy};
use convsink::mask::MaskKind;
use convsink::{Conversation, SegmentMap};
use serde::Serialize;

use crate::invalid;

pub const CSV_HEADER: &str = "step,policy,resident_kv,attended_kv,evictions";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimRow {
    pub step: usize,
    pub policy: String,
    pub resident_kv: usize,
    pub attended_kv: usize,
    pub evictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub policy: String,
    pub tokens: usize,
    pub peak: usize,
    #[serde(rename = "final")]
    pub final_resident: usize,
    /// Dense peak (= token count) divided by this policy's peak.
    pub dense_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
    pub summary: SimSummary,
}

impl SimResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.step, r.policy, r.resident_kv, r.attended_kv, r.evictions)?;
        }
        Ok(())
    }
}

/// Display name of a policy in CSV output; the sink policy is `convsink`.
pub fn policy_name(kind: MaskKind) -> String {
    match kind {
        MaskKind::Streaming => "convsink".to_owned(),
        other => other.to_string(),
    }
}

/// Parses a policy name: `convsink`, `dense`, `local:W` or `strllm:N:W`.
pub fn parse_policy(name: &str) -> Result<MaskKind> {
    let kind = if name == "convsink" { MaskKind::Streaming } else { name.parse()? };
    if matches!(kind, MaskKind::Smr | MaskKind::SmrNoSink | MaskKind::Lmr) {
        invalid!("{name} is a training mask, not a cache policy");
    }
    Ok(kind)
}

/// Utterance layout of a trace: one start token, then every utterance of every
/// conversation (payload plus EoU) in order, as one continuous session.
pub fn trace_layout(trace: &[Conversation]) -> Result<SegmentMap> {
    let lengths: Vec<usize> = trace.iter().flat_map(|c| c.utterances.iter().map(|u| u.tokens.len() + 1)).collect();
    if lengths.is_empty() {
        invalid!("trace has no utterances");
    }
    Ok(SegmentMap::from_lengths(&lengths)?)
}

/// Streams every position of `seg` through the cache model of `kind`.
pub fn simulate_layout(seg: &SegmentMap, kind: MaskKind) -> Result<SimResult> {
    let mut cache: Box<dyn KvPolicy> = policy_for(kind)?;
    let policy = policy_name(kind);
    let mut rows = Vec::with_capacity(seg.len());
    for pos in 0..seg.len() {
        let delta = cache.observe(pos, pos > 0 && seg.is_sink(pos))?;
        let resident = cache.resident_len();
        rows.push(SimRow {
            step: pos,
            policy: policy.clone(),
            resident_kv: resident,
            // a query attends everything resident after its own key is admitted
            attended_kv: resident,
            evictions: delta.evicted.len(),
        });
    }
    let peak = cache.peak_resident();
    let summary = SimSummary {
        policy,
        tokens: seg.len(),
        peak,
        final_resident: cache.resident_len(),
        dense_ratio: seg.len() as f64 / peak as f64,
    };
    Ok(SimResult { rows, summary })
}

pub fn simulate(trace: &[Conversation], kind: MaskKind) -> Result<SimResult> {
    simulate_layout(&trace_layout(trace)?, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub t: usize,
    pub l: usize,
    pub tokens: usize,
    pub convsink_peak: usize,
    pub dense_peak: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of peak resident against `T`.
    pub convsink_slope: f64,
    pub dense_slope: f64,
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Peak cache size of uniform streams with fixed utterance length `l`.
pub fn scaling(l: usize, ts: &[usize]) -> Result<ScalingReport> {
    if ts.len() < 2 {
        invalid!("scaling needs at least two values of T");
    }
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let seg = convsink::layout_uniform(t, l)?;
        rows.push(ScalingRow {
            t,
            l,
            tokens: seg.len(),
            convsink_peak: simulate_layout(&seg, MaskKind::Streaming)?.summary.peak,
            dense_peak: simulate_layout(&seg, MaskKind::Dense)?.summary.peak,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let conv: Vec<f64> = rows.iter().map(|r| r.convsink_peak as f64).collect();
    let dense: Vec<f64> = rows.iter().map(|r| r.dense_peak as f64).collect();
    Ok(ScalingReport { convsink_slope: least_squares_slope(&xs, &conv), dense_slope: least_squares_slope(&xs, &dense), rows })
}

impl ScalingReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,l,tokens,convsink_peak,dense_peak")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.t, r.l, r.tokens, r.convsink_peak, r.dense_peak)?;
        }
        Ok(())
    }
}
