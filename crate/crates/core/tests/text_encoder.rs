mod common;

use candle_core::DType;
use qagan_core::data::TextBatch;
use qagan_core::seed;
use qagan_core::text_encoder::{TextEncoder, TextEncoderConfig};

fn encoder() -> TextEncoder {
    let cfg = TextEncoderConfig {
        vocab_size: 10,
        embedding_dim: 5,
        hidden_dim: 4,
        dropout_rate: 0.0,
        ..TextEncoderConfig::desk()
    };
    TextEncoder::new(&cfg, DType::F64, &mut seed::rng(2, "text-test", &[])).unwrap()
}

#[test]
fn batch_order_does_not_change_outputs() {
    let enc = encoder();
    let seqs: [&[u32]; 3] = [&[3, 4, 5, 6], &[7, 8], &[9, 3, 4]];
    let fwd = enc.encode(&TextBatch::from_sequences(&seqs).unwrap()).unwrap();
    let rev: Vec<&[u32]> = seqs.iter().rev().copied().collect();
    let bwd = enc.encode(&TextBatch::from_sequences(&rev).unwrap()).unwrap();
    for i in 0..3 {
        let a = fwd.sentence.get(i).unwrap().to_vec1::<f64>().unwrap();
        let b = bwd.sentence.get(2 - i).unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn out_of_range_tokens_rejected() {
    let enc = encoder();
    assert!(enc.encode(&TextBatch::from_sequences(&[&[3, 10]]).unwrap()).is_err());
}

#[test]
fn probe_gradient_matches_central_differences() {
    let enc = encoder();
    assert_eq!(enc.config.feature_dim(), 8);
    let batch = TextBatch::from_sequences(&[&[3, 4, 5, 6], &[7, 8, 9]]).unwrap();
    let mut rng = seed::rng(2, "text-probe", &[]);
    let probe = (common::randn(&[2, 8, 4], &mut rng), common::randn(&[2, 8], &mut rng));
    let f = || {
        let t = enc.encode(&batch).unwrap();
        let w = (t.words * &probe.0).unwrap().sum_all().unwrap();
        let s = (t.sentence * &probe.1).unwrap().sum_all().unwrap();
        (w + s).unwrap()
    };
    let embed = enc.store.get("embed.table").unwrap().clone();
    let g = common::check_gradients(&[embed], &f, 40, 1e-5, 1e-4, "text-embed");
    assert!(g.max_rel_err < 1e-4, "{g:?}");
    let g = common::check_gradients(&common::vars_of(&enc.store), &f, 60, 1e-5, 1e-4, "text-all");
    assert!(g.max_rel_err < 1e-4 && g.kinks == 0, "{g:?}");
}
