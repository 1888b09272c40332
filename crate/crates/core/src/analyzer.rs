//! Attention aggregation on EoU columns.
//!
//! A head counts as a conv-attn head when the mean attention received by sink
//! columns is at least `threshold` times the mean received by normal columns
//! (neither sink nor the first token). Column means average only over the
//! queries for which the column is a legal key, so late columns are not
//! penalized for having fewer queries.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialogue::SegmentMap;
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;

pub const DEFAULT_THRESHOLD: f64 = 3.0;

/// Row tolerance for stochastic rows.
const ROW_SUM_TOL: f64 = 1e-5;

/// `layers x heads x N x N` attention probabilities over a segmented sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    layers: usize,
    heads: usize,
    n: usize,
    weights: Vec<f64>,
    seg: SegmentMap,
}

impl AttnMap {
    pub fn new(layers: usize, heads: usize, weights: Vec<f64>, seg: SegmentMap) -> Result<Self> {
        let n = seg.len();
        if weights.len() != layers * heads * n * n {
            return Err(Error::validation(format!(
                "expected {} weights for {layers}x{heads}x{n}x{n}, got {}",
                layers * heads * n * n,
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::validation(format!("attention weight {w} is not a finite nonnegative value")));
        }
        for (r, row) in weights.chunks(n).enumerate() {
            let sum: f64 = row.iter().sum();
            if sum != 0.0 && (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!("row {} sums to {sum}", r % n)));
            }
        }
        Ok(Self { layers, heads, n, weights, seg })
    }

    pub fn from_fn(
        layers: usize,
        heads: usize,
        seg: SegmentMap,
        mut weight: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let n = seg.len();
        let mut w = Vec::with_capacity(layers * heads * n * n);
        for l in 0..layers {
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        w.push(weight(l, h, i, j));
                    }
                }
            }
        }
        Self::new(layers, heads, w, seg)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seg(&self) -> &SegmentMap {
        &self.seg
    }

    /// Row-major `N x N` slice of one head.
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let sz = self.n * self.n;
        let off = (layer * self.heads + head) * sz;
        &self.weights[off..off + sz]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,head,query,key,weight")?;
        for l in 0..self.layers {
            for h in 0..self.heads {
                for (idx, v) in self.head(l, h).iter().enumerate() {
                    writeln!(w, "{l},{h},{},{},{v}", idx / self.n, idx % self.n)?;
                }
            }
        }
        Ok(())
    }

    /// Reads the CSV written by [`AttnMap::write_csv`]; absent entries are 0.
    pub fn read_csv<R: BufRead>(r: R, seg: SegmentMap) -> Result<Self> {
        let n = seg.len();
        let mut entries = Vec::new();
        let (mut layers, mut heads) = (0, 0);
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if lineno == 1 {
                if line.trim() != "layer,head,query,key,weight" {
                    return Err(Error::Parse { line: 1, message: format!("unexpected header {line:?}") });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse { line: lineno, message: m };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let idx: Vec<usize> = fields[..4]
                .iter()
                .map(|f| f.trim().parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect::<Result<_>>()?;
            let v: f64 = fields[4].trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            if idx[2] >= n || idx[3] >= n {
                return Err(bad(format!("position outside segment map of length {n}")));
            }
            layers = layers.max(idx[0] + 1);
            heads = heads.max(idx[1] + 1);
            entries.push((idx[0], idx[1], idx[2], idx[3], v));
        }
        let mut weights = vec![0.0; layers * heads * n * n];
        for (l, h, i, j, v) in entries {
            weights[((l * heads + h) * n + i) * n + j] = v;
        }
        Self::new(layers, heads, weights, seg)
    }

    /// One PGM per head at `<prefix>.l<layer>h<head>.pgm`, gray level scaled to
    /// the head's maximum weight, plus `<prefix>.sinks.txt` listing sink columns.
    pub fn write_pgm(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for l in 0..self.layers {
            for h in 0..self.heads {
                let path = with_suffix(prefix, &format!("l{l}h{h}.pgm"));
                let mut w = BufWriter::new(File::create(&path)?);
                let head = self.head(l, h);
                let max = head.iter().cloned().fold(0.0, f64::max);
                writeln!(w, "P2\n{} {}\n255", self.n, self.n)?;
                for row in head.chunks(self.n) {
                    let px: Vec<String> = row
                        .iter()
                        .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 }.to_string())
                        .collect();
                    writeln!(w, "{}", px.join(" "))?;
                }
                w.flush()?;
                written.push(path);
            }
        }
        let sidecar = with_suffix(prefix, "sinks.txt");
        let sinks: Vec<String> = self.seg.sink_positions().map(|p| p.to_string()).collect();
        std::fs::write(&sidecar, sinks.join("\n") + "\n")?;
        written.push(sidecar);
        Ok(written)
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Pgm,
}

/// Writes `map` as CSV at `path`, or as per-head PGMs using `path` as prefix.
pub fn export_map(map: &AttnMap, path: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    match format {
        ExportFormat::Csv => {
            let mut w = BufWriter::new(File::create(path)?);
            map.write_csv(&mut w)?;
            w.flush()?;
            Ok(vec![path.to_path_buf()])
        }
        ExportFormat::Pgm => map.write_pgm(path),
    }
}

/// Sink-to-normal column-mean ratio of one head under causal legality.
pub fn aggregation_ratio(head: &[f64], seg: &SegmentMap) -> Result<f64> {
    ratio_impl(head, seg, |i, j| j <= i)
}

/// As [`aggregation_ratio`] with legality taken from `allowed`.
pub fn aggregation_ratio_masked(head: &[f64], seg: &SegmentMap, allowed: &MaskMatrix) -> Result<f64> {
    if allowed.n() != seg.len() {
        return Err(Error::validation("mask and segment map lengths differ"));
    }
    ratio_impl(head, seg, |i, j| allowed.get(i, j))
}

fn ratio_impl(head: &[f64], seg: &SegmentMap, legal: impl Fn(usize, usize) -> bool) -> Result<f64> {
    let n = seg.len();
    if head.len() != n * n {
        return Err(Error::validation(format!("head has {} entries, expected {}", head.len(), n * n)));
    }
    let column_mean = |j: usize| -> Option<f64> {
        let (sum, count) = (0..n)
            .filter(|&i| legal(i, j))
            .fold((0.0, 0usize), |(s, c), i| (s + head[i * n + j], c + 1));
        (count > 0).then(|| sum / count as f64)
    };
    let mean_of = |cols: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let (sum, count) = cols.filter_map(column_mean).fold((0.0, 0usize), |(s, c), m| (s + m, c + 1));
        (count > 0).then(|| sum / count as f64)
    };
    let sink = mean_of(&mut (1..n).filter(|&j| seg.is_sink(j))).ok_or(Error::NoSinkColumns)?;
    let normal = mean_of(&mut (1..n).filter(|&j| !seg.is_sink(j))).ok_or(Error::NoNormalColumns)?;
    Ok(if normal > 0.0 {
        sink / normal
    } else if sink > 0.0 {
        f64::INFINITY
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadRatio {
    pub layer: usize,
    pub head: usize,
    pub ratio: f64,
}

pub fn head_ratios(map: &AttnMap) -> Result<Vec<HeadRatio>> {
    let mut out = Vec::with_capacity(map.layers * map.heads);
    for layer in 0..map.layers {
        for head in 0..map.heads {
            let ratio = aggregation_ratio(map.head(layer, head), &map.seg)?;
            out.push(HeadRatio { layer, head, ratio });
        }
    }
    Ok(out)
}

/// Fraction of heads whose aggregation ratio reaches `threshold`.
pub fn conv_head_fraction(map: &AttnMap, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::validation("threshold must be > 0"));
    }
    let ratios = head_ratios(map)?;
    let hits = ratios.iter().filter(|r| r.ratio >= threshold).count();
    Ok(hits as f64 / ratios.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub threshold: f64,
    pub conv_head_fraction: f64,
    pub heads: Vec<HeadRatio>,
}

pub fn analyze(map: &AttnMap, threshold: f64) -> Result<AnalysisReport> {
    let conv_head_fraction = conv_head_fraction(map, threshold)?;
    Ok(AnalysisReport { threshold, conv_head_fraction, heads: head_ratios(map)? })
}
