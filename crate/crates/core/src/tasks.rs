//! Training-sample construction for reconstruction (SMR), recall (LMR) and
//! plain supervised dialogue learning, plus seeded synthetic corpora.
//!
//! Targets follow teacher forcing: the input id at a predict position is its
//! own target, and the model predicts it from the logits one position earlier.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{
    assemble, segment, Conversation, SegmentMap, TokenId, TokenSeq, Utterance, FIRST_PAYLOAD_ID,
};
use crate::error::{Error, Result};
use crate::mask::{build_mask, MaskKind, MaskMatrix};

/// Sample counts of the reference SMR / LMR co-training mix.
pub const REFERENCE_SMR_SAMPLES: usize = 6857;
pub const REFERENCE_LMR_SAMPLES: usize = 8000;
/// Utterances per SMR sample in the reference setup.
pub const REFERENCE_SMR_UTTERANCES: usize = 28;
/// Query-response pairs per LMR sample in the reference setup.
pub const REFERENCE_LMR_PAIRS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Smr,
    Lmr,
    Supervised,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Smr => "smr",
            Task::Lmr => "lmr",
            Task::Supervised => "supervised",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smr" => Ok(Task::Smr),
            "lmr" => Ok(Task::Lmr),
            "supervised" => Ok(Task::Supervised),
            _ => Err(Error::validation(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub ids: TokenSeq,
    pub seg: SegmentMap,
    pub mask: MaskMatrix,
    pub mask_kind: MaskKind,
    /// Target positions contributing to the loss, ascending, all in `1..N`.
    pub predict: Vec<usize>,
    pub task: Task,
    /// Source indices: SMR utterance indices, or `[x]` for LMR.
    pub meta: Vec<usize>,
}

impl TrainingSample {
    fn new(
        ids: Vec<TokenId>,
        seg: SegmentMap,
        mask_kind: MaskKind,
        predict: Vec<usize>,
        task: Task,
        meta: Vec<usize>,
    ) -> Result<Self> {
        let mask = build_mask(mask_kind, &seg)?;
        Ok(Self { ids: TokenSeq::new(ids), seg, mask, mask_kind, predict, task, meta })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn targets(&self) -> Vec<TokenId> {
        self.predict.iter().map(|&p| self.ids[p]).collect()
    }

    /// Same layout and predict set under a different attention pattern.
    pub fn with_mask(&self, kind: MaskKind) -> Result<Self> {
        let mask = build_mask(kind, &self.seg)?;
        Ok(Self { mask, mask_kind: kind, ..self.clone() })
    }

    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            ids: self.ids.to_vec(),
            predict: self.predict.clone(),
            task: self.task,
            mask: self.mask_kind.to_string(),
        }
    }

    /// Rebuilds segmentation and mask from a stored record.
    pub fn from_record(rec: SampleRecord, bos: TokenId, eou: TokenId) -> Result<Self> {
        let (seg, _) = segment(&rec.ids, bos, eou)?;
        let kind: MaskKind = rec.mask.parse()?;
        if let Some(&p) = rec.predict.iter().find(|&&p| p == 0 || p >= rec.ids.len()) {
            return Err(Error::validation(format!("predict position {p} outside 1..{}", rec.ids.len())));
        }
        TrainingSample::new(rec.ids, seg, kind, rec.predict, rec.task, Vec::new())
    }
}

/// On-disk form of a [`TrainingSample`]. The mask is stored by constructor name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub ids: Vec<TokenId>,
    pub predict: Vec<usize>,
    pub task: Task,
    pub mask: String,
}

pub fn write_samples<W: Write>(mut w: W, samples: &[TrainingSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R, bos: TokenId, eou: TokenId) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: Error| Error::Parse { line: idx + 1, message: e.to_string() };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| err(e.into()))?;
        out.push(TrainingSample::from_record(rec, bos, eou).map_err(err)?);
    }
    Ok(out)
}

fn check_payload(tokens: &[TokenId], index: usize, bos: TokenId, eou: TokenId) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyUtterance { index });
    }
    for (offset, &t) in tokens.iter().enumerate() {
        if t == eou {
            return Err(Error::EouInPayload { utterance: index, offset });
        }
        if t == bos {
            return Err(Error::BosInPayload { utterance: index, offset });
        }
    }
    Ok(())
}

/// `<s> u_1 u_1' ... u_s u_s'` where each `u'` is a same-length copy slot.
pub fn build_smr_sample(utts: &[Vec<TokenId>], bos: TokenId, eou: TokenId) -> Result<TrainingSample> {
    if utts.is_empty() {
        return Err(Error::validation("SMR sample needs at least one utterance"));
    }
    if bos == eou {
        return Err(Error::SameBosEou(bos));
    }
    let mut ids = vec![bos];
    let mut lengths = Vec::with_capacity(2 * utts.len());
    let mut predict = Vec::new();
    for (k, u) in utts.iter().enumerate() {
        check_payload(u, k + 1, bos, eou)?;
        for copy in [false, true] {
            let start = ids.len();
            ids.extend_from_slice(u);
            ids.push(eou);
            lengths.push(u.len() + 1);
            if copy {
                predict.extend(start..ids.len());
            }
        }
    }
    let seg = SegmentMap::from_lengths(&lengths)?;
    TrainingSample::new(ids, seg, MaskKind::Smr, predict, Task::Smr, (0..utts.len()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QrPair {
    pub q: Utterance,
    pub r: Utterance,
}

impl QrPair {
    pub fn new(q: Utterance, r: Utterance) -> Result<Self> {
        if q.tokens.is_empty() || r.tokens.is_empty() {
            return Err(Error::validation("query and response must be nonempty"));
        }
        if !q.role.is_empty() && q.role == r.role {
            return Err(Error::validation(format!("query and response share role {:?}", q.role)));
        }
        Ok(Self { q, r })
    }
}

/// Splits a conversation into consecutive (query, response) pairs.
pub fn qr_pairs(conv: &Conversation) -> Result<Vec<QrPair>> {
    if conv.utterances.len() % 2 == 1 {
        return Err(Error::UnpairedUtterance(conv.utterances.len()));
    }
    conv.utterances
        .chunks(2)
        .map(|c| QrPair::new(c[0].clone(), c[1].clone()))
        .collect()
}

/// `<s> q_1 r_1 ... q_l r_l q_x' r_x'` with `x` 1-based; only `r_x'` is predicted.
pub fn build_lmr_sample(pairs: &[QrPair], x: usize, bos: TokenId, eou: TokenId) -> Result<TrainingSample> {
    if x == 0 || x > pairs.len() {
        return Err(Error::IndexOutOfRange { index: x, max: pairs.len() });
    }
    if bos == eou {
        return Err(Error::SameBosEou(bos));
    }
    let mut ids = vec![bos];
    let mut lengths = Vec::with_capacity(2 * pairs.len() + 2);
    let recall = &pairs[x - 1];
    for (k, utt) in pairs.iter().flat_map(|p| [&p.q, &p.r]).chain([&recall.q, &recall.r]).enumerate() {
        check_payload(&utt.tokens, k + 1, bos, eou)?;
        ids.extend_from_slice(&utt.tokens);
        ids.push(eou);
        lengths.push(utt.tokens.len() + 1);
    }
    let predict = (ids.len() - recall.r.tokens.len() - 1..ids.len()).collect();
    let seg = SegmentMap::from_lengths(&lengths)?;
    TrainingSample::new(ids, seg, MaskKind::Lmr, predict, Task::Lmr, vec![x])
}

/// Whole conversation under the streaming mask, every position predicted.
pub fn build_supervised_sample(conv: &Conversation, bos: TokenId, eou: TokenId) -> Result<TrainingSample> {
    build_supervised_sample_with(conv, bos, eou, true)
}

/// As [`build_supervised_sample`]; `include_first = false` drops the
/// prediction of position 1 from the start token.
pub fn build_supervised_sample_with(
    conv: &Conversation,
    bos: TokenId,
    eou: TokenId,
    include_first: bool,
) -> Result<TrainingSample> {
    let (ids, seg) = assemble(conv, bos, eou)?;
    let first = if include_first { 1 } else { 2 };
    let predict = (first..ids.len()).collect();
    TrainingSample::new(ids.into_inner(), seg, MaskKind::Streaming, predict, Task::Supervised, Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_pairs: usize,
    pub key_len: usize,
    pub val_len: usize,
    /// Total vocabulary size; payload ids are drawn from `3..vocab`.
    pub vocab: usize,
    /// Draw keys from the lower half of the payload range and values from the
    /// upper half, so a token's role is visible from its id.
    #[serde(default)]
    pub split_vocab: bool,
    /// Each response restates its key before the value (`r = key ++ value`),
    /// so a response's own tokens identify the pair it answers.
    #[serde(default)]
    pub echo_key: bool,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { n_pairs: REFERENCE_LMR_PAIRS, key_len: 2, val_len: 2, vocab: 32, split_vocab: false, echo_key: false }
    }
}

impl SyntheticParams {
    pub fn payload_vocab(&self) -> usize {
        self.vocab.saturating_sub(FIRST_PAYLOAD_ID as usize)
    }

    /// Id ranges of key and value tokens.
    pub fn ranges(&self) -> (Range<TokenId>, Range<TokenId>) {
        let (lo, hi) = (FIRST_PAYLOAD_ID, self.vocab as TokenId);
        if self.split_vocab {
            let mid = lo + (self.payload_vocab() / 2) as TokenId;
            (lo..mid, mid..hi)
        } else {
            (lo..hi, lo..hi)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.key_len == 0 || self.val_len == 0 {
            return Err(Error::validation("n_pairs, key_len and val_len must be >= 1"));
        }
        let pv = self.ranges().0.len();
        let distinct = (pv as f64).powi(self.key_len as i32);
        if pv < 2 || distinct < self.n_pairs as f64 {
            return Err(Error::validation(format!(
                "vocab {} cannot give {} distinct keys of length {}",
                self.vocab, self.n_pairs, self.key_len
            )));
        }
        Ok(())
    }
}

/// Random payload of `len` tokens drawn uniformly from the payload range.
pub fn random_payload(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(FIRST_PAYLOAD_ID..vocab as TokenId)).collect()
}

/// Key-value dialogue: each query is a fresh random key (distinct within the
/// conversation) and each response is that key's value, drawn once per
/// conversation. Within a conversation the response is a function of the key,
/// so a repeated query has exactly one correct answer; across conversations
/// the mapping changes, so it cannot be memorized. With `echo_key` the
/// response is the key followed by the value.
pub fn gen_synthetic_dialogue(seed: u64, params: SyntheticParams) -> Result<Conversation> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = HashSet::new();
    let mut utterances = Vec::with_capacity(2 * params.n_pairs);
    let (key_ids, value_ids) = params.ranges();
    let draw = |rng: &mut ChaCha8Rng, len: usize, ids: &Range<TokenId>| -> Vec<TokenId> {
        (0..len).map(|_| rng.gen_range(ids.clone())).collect()
    };
    while keys.len() < params.n_pairs {
        let key = draw(&mut rng, params.key_len, &key_ids);
        if keys.insert(key.clone()) {
            let value = draw(&mut rng, params.val_len, &value_ids);
            let response = if params.echo_key { [key.as_slice(), &value].concat() } else { value };
            utterances.push(Utterance::new("user", key));
            utterances.push(Utterance::new("assistant", response));
        }
    }
    Ok(Conversation::new(format!("synthetic-{seed}"), utterances))
}

/// Configuration shared by the synthetic sample generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub bos: TokenId,
    pub eou: TokenId,
    pub vocab: usize,
    /// Utterances per SMR sample.
    pub s: usize,
    /// Inclusive payload-length range of SMR utterances.
    pub smr_min_len: usize,
    pub smr_max_len: usize,
    /// Query-response pairs per LMR sample, plus key/value lengths.
    pub dialogue: SyntheticParams,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            bos: crate::dialogue::DEFAULT_BOS,
            eou: crate::dialogue::DEFAULT_EOU,
            vocab: 32,
            s: REFERENCE_SMR_UTTERANCES,
            smr_min_len: 1,
            smr_max_len: 8,
            dialogue: SyntheticParams::default(),
        }
    }
}

pub fn random_smr_sample(rng: &mut impl Rng, cfg: &SampleConfig) -> Result<TrainingSample> {
    if cfg.smr_min_len == 0 || cfg.smr_min_len > cfg.smr_max_len {
        return Err(Error::validation("SMR length range must satisfy 1 <= min <= max"));
    }
    let utts: Vec<Vec<TokenId>> = (0..cfg.s)
        .map(|_| {
            let len = rng.gen_range(cfg.smr_min_len..=cfg.smr_max_len);
            random_payload(rng, len, cfg.vocab)
        })
        .collect();
    build_smr_sample(&utts, cfg.bos, cfg.eou)
}

pub fn random_lmr_sample(rng: &mut impl Rng, cfg: &SampleConfig) -> Result<TrainingSample> {
    let conv = gen_synthetic_dialogue(rng.gen(), cfg.dialogue)?;
    let pairs = qr_pairs(&conv)?;
    let x = rng.gen_range(1..=pairs.len());
    build_lmr_sample(&pairs, x, cfg.bos, cfg.eou)
}

/// Scales the reference 6857:8000 SMR:LMR mix.
pub fn scaled_counts(scale: f64) -> (usize, usize) {
    (
        (REFERENCE_SMR_SAMPLES as f64 * scale).round() as usize,
        (REFERENCE_LMR_SAMPLES as f64 * scale).round() as usize,
    )
}

/// Exactly `smr_count` SMR and `lmr_count` LMR samples in seed-determined order.
pub fn build_cotraining_stream(
    smr_count: usize,
    lmr_count: usize,
    seed: u64,
    cfg: &SampleConfig,
) -> Result<std::vec::IntoIter<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(smr_count + lmr_count);
    for _ in 0..smr_count {
        samples.push(random_smr_sample(&mut rng, cfg)?);
    }
    for _ in 0..lmr_count {
        samples.push(random_lmr_sample(&mut rng, cfg)?);
    }
    samples.shuffle(&mut rng);
    Ok(samples.into_iter())
}
