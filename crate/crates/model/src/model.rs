//! Pre-norm decoder-only transformer with explicit backpropagation.
//!
//! Each block is `x + Attn(RMS(x))` followed by `x + FFN(RMS(x))`, with
//! learned absolute position embeddings and a GELU feed-forward. Attention
//! accepts an arbitrary boolean mask: forbidden scores get `-1e9` added before
//! the softmax and are then forced to exactly zero.

use convsink::{MaskMatrix, TokenId};
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{ModelError, Result};
use crate::loss::loss_masked_grad;
use crate::params::{lit, LayerParams, ModelConfig, Params, Scalar};

pub const MASK_PENALTY: f64 = -1e9;
const RMS_EPS: f64 = 1e-6;

/// Next-token scores, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T>(pub Array2<T>);

impl<T: Scalar> Logits<T> {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn argmax(&self, row: usize) -> usize {
        let r = self.0.row(row);
        let mut best = 0;
        for (k, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

struct LayerTrace<T> {
    x_in: Array2<T>,
    r1: Array1<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
    x_mid: Array2<T>,
    r2: Array1<T>,
    h2: Array2<T>,
    z: Array2<T>,
    f: Array2<T>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    x_final: Array2<T>,
    r_f: Array1<T>,
    h_f: Array2<T>,
    logits: Array2<T>,
}

fn rms_forward<T: Scalar>(x: &Array2<T>, g: &Array1<T>) -> (Array2<T>, Array1<T>) {
    let d = lit::<T>(x.ncols() as f64);
    let eps = lit::<T>(RMS_EPS);
    let r: Array1<T> = x.map_axis(Axis(1), |row| {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
        T::one() / (ms + eps).sqrt()
    });
    let mut y = x.clone();
    Zip::from(y.rows_mut()).and(&r).for_each(|mut row, &ri| {
        Zip::from(&mut row).and(g).for_each(|v, &gk| *v = *v * ri * gk);
    });
    (y, r)
}

fn rms_backward<T: Scalar>(
    dy: &Array2<T>,
    x: &Array2<T>,
    r: &Array1<T>,
    g: &Array1<T>,
    dg: &mut Array1<T>,
) -> Array2<T> {
    let d = lit::<T>(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for ((mut dxr, (dyr, xr)), &ri) in
        dx.rows_mut().into_iter().zip(dy.rows().into_iter().zip(x.rows())).zip(r.iter())
    {
        let mut dot = T::zero();
        for k in 0..xr.len() {
            let gy = g[k] * dyr[k];
            dg[k] += dyr[k] * xr[k] * ri;
            dot += gy * xr[k];
        }
        let coef = ri * ri * ri * dot / d;
        for k in 0..xr.len() {
            dxr[k] = ri * g[k] * dyr[k] - coef * xr[k];
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(z: T) -> T {
    let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
    half * z * (T::one() + (c * (z + a * z * z * z)).tanh())
}

fn gelu_grad<T: Scalar>(z: T) -> T {
    let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
    let t = (c * (z + a * z * z * z)).tanh();
    half * (T::one() + t) + half * z * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * z * z)
}

/// Row-wise softmax over allowed keys; forbidden entries end up exactly 0.
fn masked_softmax<T: Scalar>(scores: &mut Array2<T>, mask: &MaskMatrix) {
    let penalty = lit::<T>(MASK_PENALTY);
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let allowed = mask.row(i);
        for (v, &ok) in row.iter_mut().zip(allowed) {
            if !ok {
                *v += penalty;
            }
        }
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for (v, &ok) in row.iter_mut().zip(allowed) {
            *v = if ok { *v / sum } else { T::zero() };
        }
    }
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params: Params::init(&config) })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        if params.count() != config.param_count() {
            return Err(ModelError::Validation("parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer { config: self.config, params: self.params.cast(&self.config) }
    }

    fn check_inputs(&self, ids: &[TokenId], mask: &MaskMatrix) -> Result<()> {
        if mask.n() != ids.len() {
            return Err(ModelError::LengthMismatch { mask: mask.n(), seq: ids.len() });
        }
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: ids.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        if let Some(row) = mask.first_empty_row() {
            return Err(ModelError::RowFullyMasked(row));
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[TokenId], mask: &MaskMatrix) -> Result<Logits<T>> {
        self.check_inputs(ids, mask)?;
        Ok(Logits(self.run(ids, mask).logits))
    }

    /// Logits plus attention probabilities indexed `[layer][head]`.
    pub fn forward_with_attention(
        &self,
        ids: &[TokenId],
        mask: &MaskMatrix,
    ) -> Result<(Logits<T>, Vec<Vec<Array2<T>>>)> {
        self.check_inputs(ids, mask)?;
        let trace = self.run(ids, mask);
        let attn = trace.layers.into_iter().map(|l| l.probs).collect();
        Ok((Logits(trace.logits), attn))
    }

    fn run(&self, ids: &[TokenId], mask: &MaskMatrix) -> Trace<T> {
        let cfg = &self.config;
        let p = &self.params;
        let n = ids.len();
        let mut x = Array2::zeros((n, cfg.d_model));
        for (pos, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(pos);
            row.assign(&p.tok_emb.row(id as usize));
            if pos < p.pos_emb.nrows() {
                row += &p.pos_emb.row(pos);
            }
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &p.layers {
            let (trace, out) = self.block_forward(lp, x, mask);
            layers.push(trace);
            x = out;
        }
        let (h_f, r_f) = rms_forward(&x, &p.ln_f);
        let mut logits = h_f.dot(&p.w_out);
        logits += &p.b_out;
        Trace { layers, x_final: x, r_f, h_f, logits }
    }

    fn block_forward(&self, lp: &LayerParams<T>, x_in: Array2<T>, mask: &MaskMatrix) -> (LayerTrace<T>, Array2<T>) {
        let dh = self.config.head_dim();
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let (h1, r1) = rms_forward(&x_in, &lp.ln1);
        let q = h1.dot(&lp.wq);
        let k = h1.dot(&lp.wk);
        let v = h1.dot(&lp.wv);
        let mut concat = Array2::zeros(x_in.raw_dim());
        let mut probs = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|v| v * scale);
            masked_softmax(&mut scores, mask);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let x_mid = &x_in + &concat.dot(&lp.wo);
        let (h2, r2) = rms_forward(&x_mid, &lp.ln2);
        let mut z = h2.dot(&lp.w1);
        z += &lp.b1;
        let f = z.mapv(gelu);
        let mut out = &x_mid + &f.dot(&lp.w2);
        out += &lp.b2;
        let trace = LayerTrace { x_in, r1, h1, q, k, v, probs, concat, x_mid, r2, h2, z, f };
        (trace, out)
    }

    /// Mean next-token NLL over `predict` and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, ids: &[TokenId], mask: &MaskMatrix, predict: &[usize]) -> Result<(T, Params<T>)> {
        self.check_inputs(ids, mask)?;
        let trace = self.run(ids, mask);
        let (loss, dlogits) = loss_masked_grad(&Logits(trace.logits.clone()), ids, predict)?;
        Ok((loss, self.backward(ids, &trace, dlogits)))
    }

    /// Mean next-token NLL over `predict`.
    pub fn loss(&self, ids: &[TokenId], mask: &MaskMatrix, predict: &[usize]) -> Result<T> {
        let logits = self.forward(ids, mask)?;
        crate::loss::loss_masked(&logits, ids, predict)
    }

    fn backward(&self, ids: &[TokenId], trace: &Trace<T>, dlogits: Array2<T>) -> Params<T> {
        let cfg = &self.config;
        let p = &self.params;
        let mut g = Params::zeros(cfg);

        g.w_out = trace.h_f.t().dot(&dlogits);
        g.b_out = dlogits.sum_axis(Axis(0));
        let dh_f = dlogits.dot(&p.w_out.t());
        let mut dx = rms_backward(&dh_f, &trace.x_final, &trace.r_f, &p.ln_f, &mut g.ln_f);

        for (l, lt) in trace.layers.iter().enumerate().rev() {
            dx = self.block_backward(&p.layers[l], &mut g.layers[l], lt, dx);
        }

        for (pos, &id) in ids.iter().enumerate() {
            let row = dx.row(pos);
            let mut te = g.tok_emb.row_mut(id as usize);
            te += &row;
            if pos < g.pos_emb.nrows() {
                let mut pe = g.pos_emb.row_mut(pos);
                pe += &row;
            }
        }
        g
    }

    fn block_backward(
        &self,
        lp: &LayerParams<T>,
        lg: &mut LayerParams<T>,
        lt: &LayerTrace<T>,
        dout: Array2<T>,
    ) -> Array2<T> {
        let dh = self.config.head_dim();
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());

        // feed-forward
        lg.w2 = lt.f.t().dot(&dout);
        lg.b2 = dout.sum_axis(Axis(0));
        let mut dz = dout.dot(&lp.w2.t());
        Zip::from(&mut dz).and(&lt.z).for_each(|d, &z| *d *= gelu_grad(z));
        lg.w1 = lt.h2.t().dot(&dz);
        lg.b1 = dz.sum_axis(Axis(0));
        let dh2 = dz.dot(&lp.w1.t());
        let mut dx_mid = rms_backward(&dh2, &lt.x_mid, &lt.r2, &lp.ln2, &mut lg.ln2);
        dx_mid += &dout;

        // attention
        lg.wo = lt.concat.t().dot(&dx_mid);
        let dconcat = dx_mid.dot(&lp.wo.t());
        let mut dq = Array2::zeros(lt.q.raw_dim());
        let mut dk = Array2::zeros(lt.k.raw_dim());
        let mut dv = Array2::zeros(lt.v.raw_dim());
        for (h, probs) in lt.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_o = dconcat.slice(cols);
            let v_h: ArrayView2<T> = lt.v.slice(cols);
            dv.slice_mut(cols).assign(&probs.t().dot(&d_o));
            let mut ds = d_o.dot(&v_h.t());
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(probs.rows()) {
                let inner: T = ds_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pv| *d = pv * (*d - inner) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
        }
        lg.wq = lt.h1.t().dot(&dq);
        lg.wk = lt.h1.t().dot(&dk);
        lg.wv = lt.h1.t().dot(&dv);
        let dh1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let mut dx_in = rms_backward(&dh1, &lt.x_in, &lt.r1, &lp.ln1, &mut lg.ln1);
        dx_in += &dx_mid;
        dx_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use convsink::mask::{streaming_mask_semantic, MaskMatrix};
    use convsink::layout_uniform;

    fn tiny(layers: usize) -> Transformer<f64> {
        Transformer::new(ModelConfig {
            n_layers: layers,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 8,
            max_seq_len: 16,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_position_attends_itself() {
        let m = tiny(1);
        let (logits, attn) = m.forward_with_attention(&[1], &MaskMatrix::causal(1)).unwrap();
        assert_eq!(logits.0.dim(), (1, 8));
        assert_eq!(attn[0][0][[0, 0]], 1.0);
    }

    #[test]
    fn attention_rows_are_normalized_and_masked() {
        let m = tiny(2);
        let seg = layout_uniform(3, 3).unwrap();
        let mask = streaming_mask_semantic(&seg);
        let ids = [1, 3, 4, 2, 5, 6, 2, 7, 3, 2];
        let (_, attn) = m.forward_with_attention(&ids, &mask).unwrap();
        for head in attn.iter().flatten() {
            for i in 0..ids.len() {
                let sum: f64 = head.row(i).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..ids.len() {
                    if !mask.get(i, j) {
                        assert_eq!(head[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn masking_a_masked_entry_again_is_a_no_op() {
        let m = tiny(2);
        let ids = [1, 3, 4, 2, 5, 2];
        let a = streaming_mask_semantic(&convsink::SegmentMap::from_lengths(&[3, 2]).unwrap());
        // (4, 5) is above the diagonal and already forbidden
        let b = MaskMatrix::from_fn(6, |i, j| a.get(i, j) && !(i == 4 && j == 5));
        assert_eq!(m.forward(&ids, &a).unwrap(), m.forward(&ids, &b).unwrap());
    }

    #[test]
    fn forbidden_keys_do_not_reach_a_one_layer_row() {
        let m = tiny(1);
        let seg = layout_uniform(3, 3).unwrap();
        let mask = streaming_mask_semantic(&seg);
        let ids = [1, 3, 4, 2, 5, 6, 2, 7, 3, 2];
        let base = m.forward(&ids, &mask).unwrap();
        let mut other = ids;
        other[1] = 6;
        let perturbed = m.forward(&other, &mask).unwrap();
        assert_eq!(base.0.row(8), perturbed.0.row(8));
        assert_ne!(base.0.row(1), perturbed.0.row(1));
    }

    #[test]
    fn input_validation() {
        let m = tiny(1);
        assert!(matches!(
            m.forward(&[1, 2], &MaskMatrix::causal(3)),
            Err(ModelError::LengthMismatch { mask: 3, seq: 2 })
        ));
        let empty_row = MaskMatrix::from_fn(2, |i, j| i == 0 && j == 0);
        assert!(matches!(m.forward(&[1, 2], &empty_row), Err(ModelError::RowFullyMasked(1))));
        assert!(matches!(m.forward(&[1, 9], &MaskMatrix::causal(2)), Err(ModelError::TokenOutOfRange { .. })));
        let long = vec![1; 17];
        assert!(matches!(m.forward(&long, &MaskMatrix::causal(17)), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let ids = [1, 3, 4, 2];
        let mask = MaskMatrix::causal(4);
        assert_eq!(tiny(2).forward(&ids, &mask).unwrap(), tiny(2).forward(&ids, &mask).unwrap());
    }
}
