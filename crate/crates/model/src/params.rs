//! Model configuration and parameter tensors.

use ndarray::{Array1, Array2};
use num_traits::{Float, FromPrimitive, NumCast};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Floating-point element type of a model.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Float
    + FromPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: ndarray::LinalgScalar
        + ndarray::ScalarOperand
        + Float
        + FromPrimitive
        + num_traits::NumAssign
        + std::iter::Sum
        + std::fmt::Debug
        + std::fmt::Display
        + Send
        + Sync
        + 'static
{
}

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    <T as NumCast>::from(x).expect("representable constant")
}

/// How token positions enter the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    /// A learned embedding per absolute position, added to the token embedding.
    #[default]
    Learned,
    /// No positional signal beyond what the causal mask implies.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub positions: Positions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 32,
            max_seq_len: 256,
            seed: 0,
            positions: Positions::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Validation(m.to_owned()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head, model and feed-forward sizes must be >= 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be >= 4");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let per_layer = 2 * d + 4 * d * d + d * f + f + f * d + d;
        v * d + self.pos_rows() * d + self.n_layers * per_layer + d + d * v + v
    }

    /// Rows of the position table: `max_seq_len`, or none without positions.
    pub fn pos_rows(&self) -> usize {
        match self.positions {
            Positions::Learned => self.max_seq_len,
            Positions::None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// All trainable tensors. Matrices are stored `in x out` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let layer = || LayerParams {
            ln1: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        };
        Self {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((cfg.pos_rows(), d)),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            ln_f: Array1::zeros(d),
            w_out: Array2::zeros((d, v)),
            b_out: Array1::zeros(v),
        }
    }

    /// Gaussian init with `1/sqrt(fan_in)` scaling; residual output
    /// projections are further divided by `sqrt(2 * n_layers)`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |a: &mut [T], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for x in a.iter_mut() {
                *x = lit(dist.sample(&mut rng));
            }
        };
        let d = cfg.d_model as f64;
        let resid = (2.0 * cfg.n_layers as f64).sqrt();
        fill(p.tok_emb.as_slice_mut().unwrap(), 1.0);
        fill(p.pos_emb.as_slice_mut().unwrap(), 1.0);
        for layer in &mut p.layers {
            layer.ln1.fill(T::one());
            layer.ln2.fill(T::one());
            fill(layer.wq.as_slice_mut().unwrap(), 1.0 / d.sqrt());
            fill(layer.wk.as_slice_mut().unwrap(), 1.0 / d.sqrt());
            fill(layer.wv.as_slice_mut().unwrap(), 1.0 / d.sqrt());
            fill(layer.wo.as_slice_mut().unwrap(), 1.0 / d.sqrt() / resid);
            fill(layer.w1.as_slice_mut().unwrap(), 1.0 / d.sqrt());
            fill(layer.w2.as_slice_mut().unwrap(), 1.0 / (cfg.d_ff as f64).sqrt() / resid);
        }
        p.ln_f.fill(T::one());
        fill(p.w_out.as_slice_mut().unwrap(), 1.0 / d.sqrt());
        p
    }

    /// Tensor names in storage order, matching [`Params::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_owned(), "pos_emb".to_owned()];
        for l in 0..self.layers.len() {
            for t in ["ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "b1", "w2", "b2"] {
                names.push(format!("layers.{l}.{t}"));
            }
        }
        names.extend(["ln_f", "w_out", "b_out"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![self.tok_emb.as_slice().unwrap(), self.pos_emb.as_slice().unwrap()];
        for l in &self.layers {
            out.extend([
                l.ln1.as_slice().unwrap(),
                l.wq.as_slice().unwrap(),
                l.wk.as_slice().unwrap(),
                l.wv.as_slice().unwrap(),
                l.wo.as_slice().unwrap(),
                l.ln2.as_slice().unwrap(),
                l.w1.as_slice().unwrap(),
                l.b1.as_slice().unwrap(),
                l.w2.as_slice().unwrap(),
                l.b2.as_slice().unwrap(),
            ]);
        }
        out.extend([self.ln_f.as_slice().unwrap(), self.w_out.as_slice().unwrap(), self.b_out.as_slice().unwrap()]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> =
            vec![self.tok_emb.as_slice_mut().unwrap(), self.pos_emb.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            out.extend([
                l.ln1.as_slice_mut().unwrap(),
                l.wq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.ln2.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.ln_f.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn sum_squares(&self) -> T {
        self.tensors().iter().flat_map(|t| t.iter()).map(|&x| x * x).sum()
    }

    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x.to_f64().unwrap()).collect()
    }

    pub fn load_flat_f64(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = lit(*it.next().unwrap());
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self, cfg: &ModelConfig) -> Params<U> {
        let mut out = Params::<U>::zeros(cfg);
        out.load_flat_f64(&self.to_flat_f64()).expect("same config");
        out
    }
}
