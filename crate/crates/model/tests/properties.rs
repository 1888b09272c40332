use convsink::mask::{build_mask, MaskKind};
use convsink::SegmentMap;
use convsink_model::checkpoint::{load, save};
use convsink_model::{ModelConfig, Transformer};
use proptest::prelude::*;

fn model(seed: u64) -> Transformer<f64> {
    Transformer::new(ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 10, max_seq_len: 32, seed, ..ModelConfig::default() })
        .unwrap()
}

fn kinds() -> impl Strategy<Value = MaskKind> {
    prop_oneof![
        Just(MaskKind::Dense),
        Just(MaskKind::Streaming),
        (1usize..5).prop_map(|window| MaskKind::Local { window }),
        (1usize..3, 1usize..4).prop_map(|(n_sink, window)| MaskKind::StreamingLlm { n_sink, window }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_respects_mask(
        lens in prop::collection::vec(1usize..5, 1..6),
        kind in kinds(),
        seed in 0u64..50,
        tokens in prop::collection::vec(3u32..10, 32),
    ) {
        let seg = SegmentMap::from_lengths(&lens).unwrap();
        let mask = build_mask(kind, &seg).unwrap();
        let ids: Vec<u32> = (0..seg.len()).map(|p| if p == 0 { 1 } else if seg.is_sink(p) { 2 } else { tokens[p] }).collect();
        let (logits, attn) = model(seed).forward_with_attention(&ids, &mask).unwrap();
        prop_assert!(logits.is_finite());
        for layer in &attn {
            for head in layer {
                for i in 0..seg.len() {
                    let row = head.row(i);
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    for j in 0..seg.len() {
                        if !mask.get(i, j) {
                            prop_assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, tokens in prop::collection::vec(0u32..10, 1..20)) {
        let mask = convsink::mask::MaskMatrix::causal(tokens.len());
        let a = model(seed).forward(&tokens, &mask).unwrap();
        let b = model(seed).forward(&tokens, &mask).unwrap();
        prop_assert_eq!(a.0, b.0);
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = model(3);
    save(&m, &path).unwrap();
    let back: Transformer<f64> = load(&path).unwrap();
    assert_eq!(back, m);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(load::<f64>(&path).is_err());
}
