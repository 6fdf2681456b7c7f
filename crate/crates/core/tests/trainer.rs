mod common;

use qagan_core::data::{generate_synthetic_dataset, Dataset};
use qagan_core::trainer::{pretrain_damsm, pretrain_vqa, train, DamsmModels, RunPaths, StepRecord, METRICS_FILE};

use common::{prepared, tiny_config};

#[test]
fn zero_epoch_pretraining_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(3);
    cfg.pretrain.damsm_epochs = 0;
    let paths = RunPaths::new(dir.path(), &cfg);
    generate_synthetic_dataset(&cfg.synth.scene, cfg.synth.n_images, cfg.seed, &paths.data).unwrap();
    let ds = Dataset::load(&paths.data, cfg.generator.final_resolution()).unwrap();
    let report = pretrain_damsm(&cfg, &ds, &paths.damsm).unwrap();
    assert!(report.heldout.is_empty() && report.initial_heldout.is_finite());
    let fresh = DamsmModels::new(&cfg, ds.vocab.len()).unwrap();
    let saved = DamsmModels::load(&paths.damsm, &ds.meta.vocab_hash).unwrap();
    assert_eq!(fresh.text.store.digest().unwrap(), saved.text.store.digest().unwrap());
    assert_eq!(fresh.image.store.digest().unwrap(), saved.image.store.digest().unwrap());
    assert!(DamsmModels::load(&paths.damsm, "another-vocabulary").is_err());
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = tiny_config(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, pa) = prepared(a.path(), &cfg);
    let (_, pb) = prepared(b.path(), &cfg);
    assert_eq!(std::fs::read(&pa.damsm).unwrap(), std::fs::read(&pb.damsm).unwrap());
    assert_eq!(std::fs::read(&pa.vqa).unwrap(), std::fs::read(&pb.vqa).unwrap());
}

#[test]
fn training_updates_only_generator_and_discriminators() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(5);
    cfg.train.variant = "adapted".parse().unwrap();
    cfg.train.epochs = 1;
    let (ds, paths) = prepared(dir.path(), &cfg);
    let out = train(&cfg, &ds, &paths, false).unwrap();
    let (i, f) = (&out.initial_digests, &out.final_digests);
    assert_ne!(i["generator"], f["generator"]);
    assert_ne!(i["discriminators"], f["discriminators"]);
    assert_eq!(i["text_encoder"], f["text_encoder"]);
    assert_eq!(i["vqa"], f["vqa"]);

    // every logged step recomposes from its components
    let text = std::fs::read_to_string(out.run_dir.join(METRICS_FILE)).unwrap();
    let records: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), out.steps);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r.global_step, k + 1);
        assert!(r.losses.is_finite());
        assert!((r.losses.recompose_g(&cfg.train.loss) - r.losses.total_g).abs() < 1e-6 * r.losses.total_g.abs().max(1.0));
        assert!((r.losses.recompose_d() - r.losses.total_d).abs() < 1e-6 * r.losses.total_d.abs().max(1.0));
        assert!((0.0..=1.0).contains(&r.d_accuracy));
    }
}

#[test]
fn training_without_a_vqa_checkpoint_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(6);
    cfg.train.variant = "adapted".parse().unwrap();
    let paths = RunPaths::new(dir.path(), &cfg);
    generate_synthetic_dataset(&cfg.synth.scene, cfg.synth.n_images, cfg.seed, &paths.data).unwrap();
    let ds = Dataset::load(&paths.data, cfg.generator.final_resolution()).unwrap();
    pretrain_damsm(&cfg, &ds, &paths.damsm).unwrap();
    let err = train(&cfg, &ds, &paths, false).unwrap_err().to_string();
    assert!(err.contains("pretrain-vqa"), "{err}");
    pretrain_vqa(&cfg, &ds, &paths.vqa).unwrap();
    cfg.train.variant = "baseline".parse().unwrap();
    cfg.train.epochs = 1;
    assert!(train(&cfg, &ds, &paths, false).is_ok());
}
