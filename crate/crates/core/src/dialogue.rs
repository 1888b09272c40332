//! Token-level representation of multi-turn conversations.
//!
//! A conversation is laid out as `<s> u_1 u_2 ... u_T` where every utterance
//! is its payload followed by one end-of-utterance (EoU) token. Positions are
//! 0-based with the start token at 0, so under a uniform layout of utterance
//! length `l` the EoU tokens sit at positions `k * l`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::{Deref, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Default start-of-conversation id used by the CLI and synthetic corpora.
pub const DEFAULT_BOS: TokenId = 1;
/// Default end-of-utterance id used by the CLI and synthetic corpora.
pub const DEFAULT_EOU: TokenId = 2;
/// First id available for payload tokens (0 is left unused).
pub const FIRST_PAYLOAD_ID: TokenId = 3;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Soft problems found while reading conversations or token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    /// An utterance that consists of its EoU only.
    EmptyPayload { utterance: usize },
    /// Two consecutive utterances carry the same role tag.
    RepeatedRole { utterance: usize },
}

/// Per-position annotation of an assembled sequence.
///
/// Utterance ordinals are 1-based; the start token belongs to "utterance 0".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentSpec", into = "SegmentSpec")]
pub struct SegmentMap {
    utt_index: Vec<usize>,
    is_sink: Vec<bool>,
    bounds: Vec<Range<usize>>,
}

/// Serialized form of a [`SegmentMap`]: the utterance lengths, EoU included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub utterance_lengths: Vec<usize>,
}

impl TryFrom<SegmentSpec> for SegmentMap {
    type Error = Error;

    fn try_from(spec: SegmentSpec) -> Result<Self> {
        SegmentMap::from_lengths(&spec.utterance_lengths)
    }
}

impl From<SegmentMap> for SegmentSpec {
    fn from(seg: SegmentMap) -> Self {
        SegmentSpec { utterance_lengths: seg.lengths() }
    }
}

impl SegmentMap {
    /// Builds a map from utterance lengths, each counting its EoU.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::EmptyConversation);
        }
        let n = 1 + lengths.iter().sum::<usize>();
        let mut utt_index = vec![0; n];
        let mut is_sink = vec![false; n];
        let mut bounds = Vec::with_capacity(lengths.len());
        let mut start = 1;
        for (k, &len) in lengths.iter().enumerate() {
            if len == 0 {
                return Err(Error::EmptyUtterance { index: k + 1 });
            }
            let end = start + len;
            utt_index[start..end].fill(k + 1);
            is_sink[end - 1] = true;
            bounds.push(start..end);
            start = end;
        }
        Ok(Self { utt_index, is_sink, bounds })
    }

    /// Total sequence length N, start token included.
    pub fn len(&self) -> usize {
        self.utt_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_index.is_empty()
    }

    /// Number of utterances T.
    pub fn utterance_count(&self) -> usize {
        self.bounds.len()
    }

    /// Mean utterance length L = (N - 1) / T, EoU included.
    pub fn avg_len(&self) -> f64 {
        (self.len() - 1) as f64 / self.utterance_count() as f64
    }

    pub fn max_len(&self) -> usize {
        self.bounds.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.bounds.iter().map(|r| r.len()).collect()
    }

    /// Returns `Some(l)` when every utterance has length `l`.
    pub fn uniform_len(&self) -> Option<usize> {
        let l = self.bounds[0].len();
        self.bounds.iter().all(|r| r.len() == l).then_some(l)
    }

    pub fn is_first(&self, pos: usize) -> bool {
        pos == 0
    }

    pub fn is_sink(&self, pos: usize) -> bool {
        self.is_sink[pos]
    }

    /// Utterance ordinal of `pos` (0 for the start token).
    pub fn utterance_of(&self, pos: usize) -> usize {
        self.utt_index[pos]
    }

    /// Half-open position range of utterance `k` (1-based).
    pub fn bounds(&self, k: usize) -> Range<usize> {
        self.bounds[k - 1].clone()
    }

    pub fn utt_bounds(&self) -> &[Range<usize>] {
        &self.bounds
    }

    /// EoU position of utterance `k` (1-based).
    pub fn sink_of(&self, k: usize) -> usize {
        self.bounds[k - 1].end - 1
    }

    pub fn sink_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bounds.iter().map(|r| r.end - 1)
    }

    pub fn sink_flags(&self) -> &[bool] {
        &self.is_sink
    }
}

/// Idealized layout of `t` utterances of exactly `l` tokens each.
pub fn layout_uniform(t: usize, l: usize) -> Result<SegmentMap> {
    if t == 0 || l == 0 {
        return Err(Error::validation(format!(
            "uniform layout needs T >= 1 and l >= 1 (got T={t}, l={l})"
        )));
    }
    SegmentMap::from_lengths(&vec![l; t])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    #[serde(default)]
    pub role: String,
    pub tokens: Vec<TokenId>,
}

impl Utterance {
    pub fn new(role: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        Self { role: role.into(), tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        Self { id: id.into(), utterances }
    }

    /// Checks structural invariants; role alternation problems come back as warnings.
    pub fn validate(&self) -> Result<Vec<Warning>> {
        if self.utterances.is_empty() {
            return Err(Error::EmptyConversation);
        }
        let mut warnings = Vec::new();
        for (k, utt) in self.utterances.iter().enumerate() {
            if utt.tokens.is_empty() {
                return Err(Error::EmptyUtterance { index: k + 1 });
            }
            if k > 0 {
                let prev = &self.utterances[k - 1].role;
                if !utt.role.is_empty() && *prev == utt.role {
                    warnings.push(Warning::RepeatedRole { utterance: k + 1 });
                }
            }
        }
        Ok(warnings)
    }
}

/// Lays a conversation out as `bos ++ (tokens_1 ++ eou) ++ ... ++ (tokens_T ++ eou)`.
pub fn assemble(conv: &Conversation, bos: TokenId, eou: TokenId) -> Result<(TokenSeq, SegmentMap)> {
    if bos == eou {
        return Err(Error::SameBosEou(bos));
    }
    conv.validate()?;
    let mut ids = Vec::with_capacity(1 + conv.utterances.iter().map(|u| u.tokens.len() + 1).sum::<usize>());
    let mut lengths = Vec::with_capacity(conv.utterances.len());
    ids.push(bos);
    for (k, utt) in conv.utterances.iter().enumerate() {
        for (offset, &tok) in utt.tokens.iter().enumerate() {
            if tok == eou {
                return Err(Error::EouInPayload { utterance: k + 1, offset });
            }
            if tok == bos {
                return Err(Error::BosInPayload { utterance: k + 1, offset });
            }
        }
        ids.extend_from_slice(&utt.tokens);
        ids.push(eou);
        lengths.push(utt.tokens.len() + 1);
    }
    let seg = SegmentMap::from_lengths(&lengths)?;
    Ok((TokenSeq(ids), seg))
}

/// Recovers utterance boundaries from an assembled sequence.
pub fn segment(ids: &[TokenId], bos: TokenId, eou: TokenId) -> Result<(SegmentMap, Vec<Warning>)> {
    if ids.first() != Some(&bos) {
        return Err(Error::MissingBos);
    }
    if ids.len() < 2 || ids.last() != Some(&eou) {
        return Err(Error::TrailingTokens);
    }
    let mut lengths = Vec::new();
    let mut warnings = Vec::new();
    let mut run = 0;
    for &tok in &ids[1..] {
        run += 1;
        if tok == eou {
            if run == 1 {
                warnings.push(Warning::EmptyPayload { utterance: lengths.len() + 1 });
            }
            lengths.push(run);
            run = 0;
        }
    }
    for w in &warnings {
        log::warn!("segment: {w:?}");
    }
    Ok((SegmentMap::from_lengths(&lengths)?, warnings))
}

/// Reads one conversation per line. Blank lines are skipped.
pub fn read_conversations<R: BufRead>(reader: R) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let conv: Conversation = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let warnings = conv
            .validate()
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        for w in warnings {
            log::warn!("line {lineno}: conversation {}: {w:?}", conv.id);
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn write_conversations<W: Write>(mut writer: W, convs: &[Conversation]) -> Result<()> {
    for conv in convs {
        serde_json::to_writer(&mut writer, conv)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Whitespace tokenizer for CLI demos: every new word gets the next free id.
#[derive(Debug, Clone)]
pub struct DemoTokenizer {
    vocab: HashMap<String, TokenId>,
    next_id: TokenId,
}

impl Default for DemoTokenizer {
    fn default() -> Self {
        Self { vocab: HashMap::new(), next_id: FIRST_PAYLOAD_ID }
    }
}

impl DemoTokenizer {
    pub fn encode(&mut self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|word| {
                *self.vocab.entry(word.to_owned()).or_insert_with(|| {
                    let id = self.next_id;
                    self.next_id += 1;
                    id
                })
            })
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.next_id as usize
    }
}
