use convsink::mask::{build_mask, MaskKind, MaskMatrix};
use convsink::tasks::{build_lmr_sample, build_smr_sample, QrPair};
use convsink::{layout_uniform, Utterance};
use convsink_model::gradcheck::{grad_check, rel_err};
use convsink_model::{ModelConfig, Transformer};

fn small(seed: u64) -> Transformer<f64> {
    Transformer::new(ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 8, max_seq_len: 16, seed, ..ModelConfig::default() })
        .unwrap()
}

#[test]
fn random_sample_gradients_match() {
    let m = small(1);
    let ids = [1, 4, 5, 2, 6, 2];
    let mask = MaskMatrix::causal(6);
    let r = grad_check(&m, &ids, &mask, &[1, 2, 3, 4, 5], 1e-5, 1, |_| true).unwrap();
    assert_eq!(r.checked, m.param_count());
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    assert!(!r.precision_warning);
}

#[test]
fn two_layer_streaming_gradients_match() {
    let m = Transformer::<f64>::new(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 8,
        vocab_size: 8,
        max_seq_len: 10,
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let seg = layout_uniform(3, 3).unwrap();
    let mask = build_mask(MaskKind::Streaming, &seg).unwrap();
    let ids = [1, 3, 4, 2, 5, 6, 2, 7, 3, 2];
    let r = grad_check(&m, &ids, &mask, &[4, 5, 6, 7, 8, 9], 1e-5, 1, |_| true).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn zero_head_bias_gradient_matches() {
    let mut m = small(2);
    m.params.w_out.fill(0.0);
    m.params.b_out.fill(0.0);
    let ids = [1, 3, 2, 3, 2];
    let r = grad_check(&m, &ids, &MaskMatrix::causal(5), &[1, 2, 3, 4], 1e-5, 1, |n| n == "b_out").unwrap();
    assert_eq!(r.checked, 8);
    assert!(r.max_abs_err < 1e-6, "{r:?}");
}

#[test]
fn tiny_eps_is_flagged() {
    let m = small(3);
    let r = grad_check(&m, &[1, 3, 2], &MaskMatrix::causal(3), &[1, 2], 1e-9, 7, |_| true).unwrap();
    assert!(r.precision_warning);
    assert!(r.max_rel_err.is_finite());
}

#[test]
fn smr_and_lmr_masks_gradients_match() {
    let m = small(5);
    let smr = build_smr_sample(&[vec![3, 4], vec![5]], 1, 2).unwrap();
    let r = grad_check(&m, &smr.ids, &smr.mask, &smr.predict, 1e-5, 1, |_| true).unwrap();
    assert!(r.max_rel_err < 1e-4, "smr {r:?}");

    let pair = |q: u32, a: u32| QrPair::new(Utterance::new("user", vec![q]), Utterance::new("assistant", vec![a])).unwrap();
    let lmr = build_lmr_sample(&[pair(3, 4), pair(5, 6)], 1, 1, 2).unwrap();
    let r = grad_check(&m, &lmr.ids, &lmr.mask, &lmr.predict, 1e-5, 1, |_| true).unwrap();
    assert!(r.max_rel_err < 1e-4, "lmr {r:?}");
}

#[test]
fn rel_err_definition() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert!((rel_err(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn position_free_model_gradients_match() {
    use convsink_model::Positions;
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 8, vocab_size: 8, max_seq_len: 12, seed: 5, positions: Positions::None };
    let m = Transformer::<f64>::new(cfg).unwrap();
    assert_eq!(m.param_count(), cfg.param_count());
    assert_eq!(cfg.param_count() + 12 * 8, ModelConfig { positions: Positions::Learned, ..cfg }.param_count());
    let seg = layout_uniform(3, 3).unwrap();
    let mask = build_mask(MaskKind::Streaming, &seg).unwrap();
    let ids = [1, 3, 4, 2, 5, 6, 2, 7, 3, 2];
    let r = grad_check(&m, &ids, &mask, &[4, 5, 6, 7, 8, 9], 1e-5, 1, |_| true).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}
