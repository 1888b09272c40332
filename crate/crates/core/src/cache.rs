//! Streaming key/value retention.
//!
//! [`StreamingCache`] keeps the first token, every EoU sink ever seen, and the
//! non-sink tokens of the previous and current utterance. When the first token
//! of a new utterance arrives, the non-sink tokens of the utterance before the
//! previous one are evicted in one step. The cache tracks positions and tags
//! only; tensors keyed by position live with the model.
//!
//! The baseline policies (dense, local window, StreamingLLM) implement the same
//! [`KvPolicy`] trait so the simulator can drive them interchangeably.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::ops::Range;

use serde::Serialize;

use crate::dialogue::SegmentMap;
use crate::error::{Error, Result};
use crate::mask::MaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlotTag {
    First,
    Sink,
    Window,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheDelta {
    pub admitted: usize,
    pub evicted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionEvent {
    pub step: usize,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub resident_count: usize,
    pub sink_count: usize,
    pub window_count: usize,
    pub peak_resident: usize,
    pub evicted_total: usize,
}

/// Common interface of the retention policies driven by the simulator.
pub trait KvPolicy {
    fn observe(&mut self, position: usize, is_eou: bool) -> Result<CacheDelta>;
    fn resident_len(&self) -> usize;
    fn peak_resident(&self) -> usize;
}

/// Position must equal `step + 1`, starting at 0.
fn check_order(step: Option<usize>, position: usize) -> Result<()> {
    let expected = step.map_or(0, |s| s + 1);
    if position != expected {
        return Err(Error::OutOfOrder { expected, got: position });
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct StreamingCache {
    resident: BTreeMap<usize, SlotTag>,
    current_utt: Option<Range<usize>>,
    prev_utt: Option<Range<usize>>,
    step: Option<usize>,
    last_was_eou: bool,
    evictions: Vec<EvictionEvent>,
    sink_count: usize,
    peak: usize,
    evicted_total: usize,
    longest_utt: usize,
}

impl StreamingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Streams every position of `seg` through a fresh cache.
    pub fn from_layout(seg: &SegmentMap) -> Self {
        let mut cache = Self::new();
        for pos in 0..seg.len() {
            cache.observe(pos, pos > 0 && seg.is_sink(pos)).expect("positions are sequential");
        }
        cache
    }

    pub fn observe(&mut self, position: usize, is_eou: bool) -> Result<CacheDelta> {
        check_order(self.step, position)?;
        self.step = Some(position);
        let mut evicted = Vec::new();
        if position == 0 {
            self.resident.insert(0, SlotTag::First);
        } else {
            if self.current_utt.is_none() || self.last_was_eou {
                if let Some(old) = self.prev_utt.take() {
                    for pos in old {
                        if self.resident.get(&pos) == Some(&SlotTag::Window) {
                            self.resident.remove(&pos);
                            evicted.push(pos);
                        }
                    }
                }
                self.prev_utt = self.current_utt.take();
                self.current_utt = Some(position..position + 1);
            } else if let Some(cur) = self.current_utt.as_mut() {
                cur.end = position + 1;
            }
            let tag = if is_eou {
                self.sink_count += 1;
                SlotTag::Sink
            } else {
                SlotTag::Window
            };
            self.resident.insert(position, tag);
            self.last_was_eou = is_eou;
            let cur_len = self.current_utt.as_ref().map_or(0, |r| r.len());
            self.longest_utt = self.longest_utt.max(cur_len);
        }
        if !evicted.is_empty() {
            self.evicted_total += evicted.len();
            self.evictions.push(EvictionEvent { step: position, positions: evicted.clone() });
        }
        self.peak = self.peak.max(self.resident.len());
        Ok(CacheDelta { admitted: position, evicted })
    }

    /// Positions a query at the current step may attend, ascending.
    pub fn attended_positions(&self) -> Result<Vec<usize>> {
        if self.step.is_none() {
            return Err(Error::EmptyCache);
        }
        Ok(self.resident.keys().copied().collect())
    }

    pub fn tag(&self, position: usize) -> Option<SlotTag> {
        self.resident.get(&position).copied()
    }

    pub fn stats(&self) -> CacheStats {
        let resident_count = self.resident.len();
        let first = usize::from(self.resident.contains_key(&0));
        CacheStats {
            resident_count,
            sink_count: self.sink_count,
            window_count: resident_count - first - self.sink_count,
            peak_resident: self.peak,
            evicted_total: self.evicted_total,
        }
    }

    pub fn step(&self) -> Option<usize> {
        self.step
    }

    pub fn current_utterance(&self) -> Option<Range<usize>> {
        self.current_utt.clone()
    }

    pub fn previous_utterance(&self) -> Option<Range<usize>> {
        self.prev_utt.clone()
    }

    /// Number of sinks observed so far.
    pub fn sinks_seen(&self) -> usize {
        self.sink_count
    }

    /// Longest utterance observed so far, counting the one in progress.
    pub fn longest_utterance(&self) -> usize {
        self.longest_utt
    }

    /// Upper bound `1 + T_seen + 2 * L_max` on the resident set.
    pub fn retention_bound(&self) -> usize {
        1 + self.sink_count + 2 * self.longest_utt
    }

    pub fn evictions(&self) -> &[EvictionEvent] {
        &self.evictions
    }

    /// CSV with header `step,evicted_position`, one row per evicted position.
    pub fn write_eviction_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,evicted_position")?;
        for ev in &self.evictions {
            for pos in &ev.positions {
                writeln!(w, "{},{pos}", ev.step)?;
            }
        }
        Ok(())
    }

    fn trace_row(&self) -> TraceRow {
        let s = self.stats();
        let step = self.step.unwrap_or(0);
        TraceRow {
            step,
            resident: s.resident_count,
            sinks: s.sink_count,
            window: s.window_count,
            dense_equiv: step + 1,
        }
    }
}

impl KvPolicy for StreamingCache {
    fn observe(&mut self, position: usize, is_eou: bool) -> Result<CacheDelta> {
        StreamingCache::observe(self, position, is_eou)
    }

    fn resident_len(&self) -> usize {
        self.resident.len()
    }

    fn peak_resident(&self) -> usize {
        self.peak
    }
}

/// One row of the per-step simulation trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub resident: usize,
    pub sinks: usize,
    pub window: usize,
    pub dense_equiv: usize,
}

/// Streams `seg` and records a trace row after every step.
pub fn trace_layout(seg: &SegmentMap) -> Vec<TraceRow> {
    let mut cache = StreamingCache::new();
    (0..seg.len())
        .map(|pos| {
            cache.observe(pos, pos > 0 && seg.is_sink(pos)).expect("positions are sequential");
            cache.trace_row()
        })
        .collect()
}

/// CSV with header `step,resident,sinks,window,dense_equiv`.
pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,resident,sinks,window,dense_equiv")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.resident, r.sinks, r.window, r.dense_equiv)?;
    }
    Ok(())
}

/// Keeps every position.
#[derive(Debug, Clone, Default)]
pub struct DenseCache {
    step: Option<usize>,
    len: usize,
}

impl KvPolicy for DenseCache {
    fn observe(&mut self, position: usize, _is_eou: bool) -> Result<CacheDelta> {
        check_order(self.step, position)?;
        self.step = Some(position);
        self.len += 1;
        Ok(CacheDelta { admitted: position, evicted: Vec::new() })
    }

    fn resident_len(&self) -> usize {
        self.len
    }

    fn peak_resident(&self) -> usize {
        self.len
    }
}

/// Keeps the first `n_sink` positions plus the last `window` positions.
/// `n_sink = 0` gives a plain sliding window.
#[derive(Debug, Clone)]
pub struct SinkWindowCache {
    n_sink: usize,
    window: usize,
    step: Option<usize>,
    pinned: usize,
    recent: VecDeque<usize>,
    peak: usize,
}

impl SinkWindowCache {
    pub fn new(n_sink: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::validation("window must be >= 1"));
        }
        Ok(Self { n_sink, window, step: None, pinned: 0, recent: VecDeque::new(), peak: 0 })
    }
}

impl KvPolicy for SinkWindowCache {
    fn observe(&mut self, position: usize, _is_eou: bool) -> Result<CacheDelta> {
        check_order(self.step, position)?;
        self.step = Some(position);
        let mut evicted = Vec::new();
        if position < self.n_sink {
            self.pinned += 1;
        } else {
            self.recent.push_back(position);
            if self.recent.len() > self.window {
                evicted.extend(self.recent.pop_front());
            }
        }
        self.peak = self.peak.max(self.resident_len());
        Ok(CacheDelta { admitted: position, evicted })
    }

    fn resident_len(&self) -> usize {
        self.pinned + self.recent.len()
    }

    fn peak_resident(&self) -> usize {
        self.peak
    }
}

/// Cache model matching an inference-time mask kind.
pub fn policy_for(kind: MaskKind) -> Result<Box<dyn KvPolicy>> {
    kind.validate()?;
    Ok(match kind {
        MaskKind::Dense => Box::new(DenseCache::default()),
        MaskKind::Local { window } => Box::new(SinkWindowCache::new(0, window)?),
        MaskKind::StreamingLlm { n_sink, window } => Box::new(SinkWindowCache::new(n_sink, window)?),
        MaskKind::Streaming => Box::new(StreamingCache::new()),
        other => {
            return Err(Error::validation(format!("{other} is a training pattern, not a cache policy")))
        }
    })
}
