//! Boolean attention masks.
//!
//! Row `i` is the query position, column `j` the key position; `get(i, j)` is
//! true when the query may attend the key. Every builder here produces causal
//! masks whose rows are non-empty, with row 0 allowing only itself.
//!
//! The `*_semantic` builders work on any [`SegmentMap`]. The `*_formula`
//! builders evaluate the closed-form piecewise definitions for uniform
//! layouts and are kept as independent oracles for the semantic rules.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::dialogue::{layout_uniform, SegmentMap};
use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for MaskMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "MaskMatrix({})", self.n)?;
        for i in 0..self.n {
            let row: String = self.row(i).iter().map(|&b| if b { '1' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl MaskMatrix {
    pub fn from_fn(n: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(allowed(i, j));
            }
        }
        Self { n, bits }
    }

    /// Full lower-triangular mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    /// Allowed key positions of row `i`, ascending.
    pub fn allowed(&self, i: usize) -> Vec<usize> {
        self.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| !self.get(i, j)))
    }

    /// First row that allows no key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.n).find(|&i| !self.row(i).iter().any(|&b| b))
    }

    /// Copy of this mask with every entry where `drop(i, j)` holds cleared.
    pub fn without(&self, mut drop: impl FnMut(usize, usize) -> bool) -> Self {
        Self::from_fn(self.n, |i, j| self.get(i, j) && !drop(i, j))
    }

    /// Positions whose information can reach each row after `layers` rounds of
    /// attention, treating the residual stream as a self-edge.
    pub fn reachability(&self, layers: usize) -> Self {
        let step = Self::from_fn(self.n, |i, j| i == j || self.get(i, j));
        let mut acc = Self::from_fn(self.n, |i, j| i == j);
        for _ in 0..layers {
            acc = step.compose(&acc);
        }
        acc
    }

    /// Boolean product: `(self ∘ inner)(i, j) = ∃k. self(i, k) ∧ inner(k, j)`.
    fn compose(&self, inner: &Self) -> Self {
        let n = self.n;
        let mut bits = vec![false; n * n];
        for i in 0..n {
            let out = &mut bits[i * n..(i + 1) * n];
            for k in 0..n {
                if self.get(i, k) {
                    for (o, &b) in out.iter_mut().zip(inner.row(k)) {
                        *o |= b;
                    }
                }
            }
        }
        Self { n, bits }
    }

    /// CSV export with header `query,key,allowed`, one row per entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "query,key,allowed")?;
        for i in 0..self.n {
            for j in 0..self.n {
                writeln!(w, "{i},{j},{}", u8::from(self.get(i, j)))?;
            }
        }
        Ok(())
    }

    /// Plain-text PGM (P2): 0 = forbidden, 255 = allowed.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "P2\n{} {}\n255", self.n, self.n)?;
        for i in 0..self.n {
            let row: Vec<&str> = self.row(i).iter().map(|&b| if b { "255" } else { "0" }).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Attention pattern selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Dense,
    Local { window: usize },
    StreamingLlm { n_sink: usize, window: usize },
    /// Conversational-attention-sink pattern used for fine-tuning and inference.
    Streaming,
    Smr,
    /// SMR pattern with every copy-slot -> source-sink edge removed.
    SmrNoSink,
    Lmr,
}

impl MaskKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskKind::Local { window } if window == 0 => {
                Err(Error::validation("local window must be >= 1"))
            }
            MaskKind::StreamingLlm { n_sink, window } if n_sink == 0 || window == 0 => {
                Err(Error::validation("streamingllm needs n_sink >= 1 and window >= 1"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Dense => write!(f, "dense"),
            MaskKind::Local { window } => write!(f, "local:{window}"),
            MaskKind::StreamingLlm { n_sink, window } => write!(f, "strllm:{n_sink}:{window}"),
            MaskKind::Streaming => write!(f, "streaming"),
            MaskKind::Smr => write!(f, "smr"),
            MaskKind::SmrNoSink => write!(f, "smr-nosink"),
            MaskKind::Lmr => write!(f, "lmr"),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::validation(format!("bad number {p:?} in mask name {s:?}")))
        };
        let kind = match parts.as_slice() {
            ["dense"] => MaskKind::Dense,
            ["local", w] => MaskKind::Local { window: num(w)? },
            ["strllm", n, w] => MaskKind::StreamingLlm { n_sink: num(n)?, window: num(w)? },
            ["streaming"] => MaskKind::Streaming,
            ["smr"] => MaskKind::Smr,
            ["smr-nosink"] => MaskKind::SmrNoSink,
            ["lmr"] => MaskKind::Lmr,
            _ => return Err(Error::validation(format!("unknown mask name {s:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

// Serialized by name, e.g. "strllm:1:3".
impl serde::Serialize for MaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for MaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Builds the mask of `kind` over `seg`; SMR and LMR pair consecutive utterances.
pub fn build_mask(kind: MaskKind, seg: &SegmentMap) -> Result<MaskMatrix> {
    match kind {
        MaskKind::Streaming => Ok(streaming_mask_semantic(seg)),
        MaskKind::Smr => smr_mask_semantic(seg, &consecutive_pairs(seg.utterance_count())?),
        MaskKind::SmrNoSink => {
            let pairs = consecutive_pairs(seg.utterance_count())?;
            let full = smr_mask_semantic(seg, &pairs)?;
            let copy_of: Vec<Option<usize>> = partner_table(seg.utterance_count(), &pairs)?
                .into_iter()
                .map(|p| p.and_then(|(other, is_second)| is_second.then_some(other)))
                .collect();
            Ok(full.without(|i, j| {
                copy_of[seg.utterance_of(i)].is_some_and(|src| j == seg.sink_of(src))
            }))
        }
        MaskKind::Lmr => lmr_mask_semantic(seg, &consecutive_pairs(seg.utterance_count())?),
        _ => baseline_mask(kind, seg),
    }
}

/// Pairs `(1, 2), (3, 4), ...`; odd counts leave the last utterance unpaired.
pub fn consecutive_pairs(t: usize) -> Result<Vec<(usize, usize)>> {
    if t % 2 == 1 {
        return Err(Error::UnpairedUtterance(t));
    }
    Ok((1..=t).step_by(2).map(|k| (k, k + 1)).collect())
}

/// Index by utterance ordinal: `Some((partner, is_second_of_pair))`.
fn partner_table(t: usize, pairs: &[(usize, usize)]) -> Result<Vec<Option<(usize, bool)>>> {
    let mut table = vec![None; t + 1];
    for &(a, b) in pairs {
        if a == b {
            return Err(Error::UnpairedUtterance(a));
        }
        for k in [a, b] {
            if k == 0 || k > t || table[k].is_some() {
                return Err(Error::UnpairedUtterance(k));
            }
        }
        if a >= b {
            return Err(Error::validation(format!("pair ({a}, {b}) must be ordered")));
        }
        table[a] = Some((b, false));
        table[b] = Some((a, true));
    }
    if let Some(k) = (1..=t).find(|&k| table[k].is_none()) {
        return Err(Error::UnpairedUtterance(k));
    }
    Ok(table)
}

/// First token, every earlier sink, and the previous plus current utterance.
pub fn streaming_mask_semantic(seg: &SegmentMap) -> MaskMatrix {
    MaskMatrix::from_fn(seg.len(), |i, j| {
        if j > i {
            return false;
        }
        if i == 0 || j == 0 || seg.is_sink(j) {
            return true;
        }
        let (ui, uj) = (seg.utterance_of(i), seg.utterance_of(j));
        uj == ui || uj + 1 == ui
    })
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn check_uniform_args(t: usize, l: usize) -> Result<()> {
    if t == 0 || l == 0 {
        return Err(Error::validation(format!("formula masks need T >= 1 and l >= 1 (got {t}, {l})")));
    }
    Ok(())
}

/// Closed-form streaming mask over `N = 1 + t * l` positions.
pub fn streaming_mask_formula(t: usize, l: usize) -> Result<MaskMatrix> {
    check_uniform_args(t, l)?;
    let n = 1 + t * l;
    Ok(MaskMatrix::from_fn(n, |i, j| {
        let (i, j) = (i as i64, j as i64);
        let li = l as i64;
        let on_sink_grid = j % li == 0;
        let sink_case = on_sink_grid && j <= i;
        let first_utt_case = 1 <= j && j <= i && i <= li;
        let window_case = !on_sink_grid && (ceil_div(i as usize, l) as i64 - 2) * li < j && j <= i;
        sink_case || first_utt_case || window_case
    }))
}

/// SMR: `u` sees the start token and itself causally; `u'` additionally sees
/// the sink of its paired `u`.
pub fn smr_mask_semantic(seg: &SegmentMap, pairing: &[(usize, usize)]) -> Result<MaskMatrix> {
    let table = partner_table(seg.utterance_count(), pairing)?;
    Ok(MaskMatrix::from_fn(seg.len(), |i, j| {
        if j > i {
            return false;
        }
        if j == 0 {
            return true;
        }
        let ui = seg.utterance_of(i);
        if seg.utterance_of(j) == ui {
            return true;
        }
        match table[ui] {
            Some((src, true)) => j == seg.sink_of(src),
            _ => false,
        }
    }))
}

/// Closed-form SMR mask over `N = 1 + 2 * s * l` positions.
pub fn smr_mask_formula(s: usize, l: usize) -> Result<MaskMatrix> {
    check_uniform_args(s, l)?;
    let n = 1 + 2 * s * l;
    Ok(MaskMatrix::from_fn(n, |i, j| {
        if j > i {
            return false;
        }
        if j == 0 {
            return true;
        }
        let c = ceil_div(i, l);
        if c == 0 {
            return false;
        }
        let lower = (c - 1) * l;
        if c.is_multiple_of(2) {
            lower <= j
        } else {
            lower < j
        }
    }))
}

/// LMR: every utterance sees the start token, all earlier sinks and itself;
/// response tokens also see their whole query, and a response's sink sees
/// only its own utterance.
pub fn lmr_mask_semantic(seg: &SegmentMap, qr: &[(usize, usize)]) -> Result<MaskMatrix> {
    let table = partner_table(seg.utterance_count(), qr)?;
    Ok(MaskMatrix::from_fn(seg.len(), |i, j| {
        if j > i {
            return false;
        }
        if i == 0 {
            return true;
        }
        let (ui, uj) = (seg.utterance_of(i), seg.utterance_of(j));
        let response_of = match table[ui] {
            Some((q, true)) => Some(q),
            _ => None,
        };
        if response_of.is_some() && seg.is_sink(i) {
            return uj == ui;
        }
        j == 0 || seg.is_sink(j) || uj == ui || response_of == Some(uj)
    }))
}

/// Dense, local-window and StreamingLLM baselines.
pub fn baseline_mask(kind: MaskKind, seg: &SegmentMap) -> Result<MaskMatrix> {
    kind.validate()?;
    let n = seg.len();
    match kind {
        MaskKind::Dense => Ok(MaskMatrix::causal(n)),
        MaskKind::Local { window } => Ok(MaskMatrix::from_fn(n, |i, j| j <= i && i - j < window)),
        MaskKind::StreamingLlm { n_sink, window } => {
            Ok(MaskMatrix::from_fn(n, |i, j| j <= i && (j < n_sink || i - j < window)))
        }
        other => Err(Error::validation(format!("{other} is not a baseline pattern"))),
    }
}

/// Convenience: uniform layout plus its streaming mask.
pub fn uniform_streaming(t: usize, l: usize) -> Result<(SegmentMap, MaskMatrix)> {
    let seg = layout_uniform(t, l)?;
    let mask = streaming_mask_semantic(&seg);
    Ok((seg, mask))
}
