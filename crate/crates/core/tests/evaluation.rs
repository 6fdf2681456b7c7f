mod common;

use candle_core::DType;
use qagan_core::evaluation::{evaluate_checkpoint, fid, generate_images, ActivationSet};
use qagan_core::generator::Generator;
use qagan_core::seed;
use qagan_core::trainer::{train, DamsmModels, VqaBundle};

use common::{prepared, tiny_config};

fn rows(t: &candle_core::Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

#[test]
fn checkpoint_evaluation_is_repeatable_and_leaves_scorers_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(8);
    cfg.train.variant = "adapted".parse().unwrap();
    cfg.train.epochs = 1;
    let (mut ds, paths) = prepared(dir.path(), &cfg);
    let out = train(&cfg, &ds, &paths, false).unwrap();
    let ckpt = &out.checkpoints.last().unwrap().path;
    let before = (std::fs::read(&paths.damsm).unwrap(), std::fs::read(&paths.vqa).unwrap());
    let a = evaluate_checkpoint(&cfg, &paths, &ds, ckpt, 8, 1).unwrap();
    let b = evaluate_checkpoint(&cfg, &paths, &ds, ckpt, 8, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, (std::fs::read(&paths.damsm).unwrap(), std::fs::read(&paths.vqa).unwrap()));
    assert!(!a.with_replacement);
    assert!((0.0..=1.0).contains(&a.r_precision) && a.fid >= 0.0 && a.is_mean >= 1.0 - 1e-9);

    let many = evaluate_checkpoint(&cfg, &paths, &ds, ckpt, 500, 1).unwrap();
    assert!(many.with_replacement && many.n_samples == 500);

    ds.meta.vocab_hash = "0000".into();
    assert!(evaluate_checkpoint(&cfg, &paths, &ds, ckpt, 8, 1).is_err());
}

#[test]
fn real_halves_are_closer_than_an_untrained_generator() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(9);
    cfg.synth.n_images = 48;
    let (ds, paths) = prepared(dir.path(), &cfg);
    let scorer = VqaBundle::load(&paths.vqa, &ds.meta.vocab_hash).unwrap();
    let damsm = DamsmModels::load(&paths.damsm, &ds.meta.vocab_hash).unwrap();
    let all: Vec<usize> = (0..ds.images.len()).collect();
    let (first, second) = all.split_at(all.len() / 2);
    let feats = |idx: &[usize]| rows(&scorer.model.pooled_features(&ds.image_batch(idx, DType::F32).unwrap()).unwrap());
    let real_a = ActivationSet::from_rows(&feats(first)).unwrap();
    let real_b = ActivationSet::from_rows(&feats(second)).unwrap();

    let generator = Generator::new(&cfg.generator, DType::F32, &mut seed::rng(9, "fresh-generator", &[])).unwrap();
    let seqs: Vec<&[u32]> = ds.captions.iter().take(second.len()).map(|c| c.token_ids.as_slice()).collect();
    let fakes = generate_images(&generator, &damsm.text, &seqs, 8, 9, "eval-test").unwrap();
    let fake_rows: Vec<Vec<f64>> = fakes.iter().flat_map(|img| rows(&scorer.model.pooled_features(img).unwrap())).collect();
    let fake = ActivationSet::from_rows(&fake_rows).unwrap();
    let real_real = fid(&real_a, &real_b).unwrap();
    let real_fake = fid(&real_a, &fake).unwrap();
    assert!(real_real < real_fake, "{real_real} vs {real_fake}");
}
