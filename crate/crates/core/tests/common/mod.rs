#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use qagan_core::damsm::{DamsmConfig, ImageEncoder};
use qagan_core::data::TextBatch;
use qagan_core::discriminators::{DiscriminatorConfig, Discriminators};
use qagan_core::generator::{Generator, GeneratorConfig};
use qagan_core::seed;
use qagan_core::text_encoder::{TextEncoder, TextEncoderConfig};
use qagan_core::vqa::{VqaConfig, VqaModel};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree (a ReLU-type kink
    /// inside the stencil) and whose check failed; not counted.
    pub kinks: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn set_coord(v: &Var, k: usize, value: f64) -> f64 {
    let t = v.as_tensor();
    let mut flat = t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    let old = flat[k];
    flat[k] = value;
    let new = Tensor::from_vec(flat, t.shape(), &Device::Cpu).unwrap().to_dtype(t.dtype()).unwrap();
    v.set(&new).unwrap();
    old
}

/// Central differences at `samples` random coordinates of `vars` against
/// the analytic gradient of `f`. Each coordinate is tried with steps `h`,
/// `h/10` and `h/100` and the best agreement kept: large steps straddle
/// ReLU kinks, small ones drown tiny derivatives in rounding error.
pub fn check_gradients<F: Fn() -> Tensor>(vars: &[Var], f: F, samples: usize, h: f64, tol: f64, label: &str) -> GradCheck {
    let eval = |f: &F| f().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let grads = f().backward().unwrap();
    let f0 = eval(&f);
    let mut rng = seed::rng(17, label, &[]);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
    };
    let sizes: Vec<usize> = vars.iter().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let mut vi = 0;
        while k >= sizes[vi] {
            k -= sizes[vi];
            vi += 1;
        }
        let v = &vars[vi];
        let analytic = match grads.get(v) {
            Some(g) => g.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[k],
            None => 0.0,
        };
        let x0 = set_coord(v, k, 0.0);
        let mut best = (f64::INFINITY, false);
        for step in [h, h / 10.0, h / 100.0] {
            set_coord(v, k, x0 + step);
            let fp = eval(&f);
            set_coord(v, k, x0 - step);
            let fm = eval(&f);
            let e = rel_err(analytic, (fp - fm) / (2.0 * step));
            let kinked = rel_err((fp - f0) / step, (f0 - fm) / step) > 10.0 * tol;
            if e < best.0 {
                best = (e, kinked);
            }
        }
        set_coord(v, k, x0);
        if best.0 > tol && best.1 {
            out.kinks += 1;
            continue;
        }
        out.checked += 1;
        out.max_rel_err = out.max_rel_err.max(best.0);
    }
    out
}

/// Converts a parameter store's variables to a flat list.
pub fn vars_of(store: &qagan_core::nn::ParamStore) -> Vec<Var> {
    store.vars().into_iter().map(|(_, v)| v).collect()
}

/// A miniature adapted-variant pipeline in double precision.
pub struct TinyPipeline {
    pub text: TextEncoder,
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub image_encoder: ImageEncoder,
    pub vqa: VqaModel,
    pub captions: TextBatch,
    pub qa: TextBatch,
    pub questions: TextBatch,
    pub answer_ids: Vec<Vec<u32>>,
}

impl TinyPipeline {
    pub fn new(seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, "tiny-pipeline", &[]);
        let vocab = 12;
        let text = TextEncoder::new(
            &TextEncoderConfig {
                vocab_size: vocab,
                embedding_dim: 6,
                hidden_dim: 4,
                ..TextEncoderConfig::desk()
            },
            DType::F64,
            &mut rng,
        )
        .unwrap();
        let gcfg = GeneratorConfig {
            noise_dim: 4,
            condition_dim: 4,
            base_feature_channels: 8,
            stage_count: 2,
            base_resolution: 8,
            residual_blocks: 1,
            text_dim: 8,
        };
        let generator = Generator::new(&gcfg, DType::F64, &mut rng).unwrap();
        let discriminators = Discriminators::new(
            &DiscriminatorConfig {
                base_channels: 4,
                max_channels: 8,
                condition_dim: 4,
                zero_init_heads: false,
            },
            &gcfg.resolutions(),
            8,
            DType::F64,
            &mut rng,
        )
        .unwrap();
        let image_encoder = ImageEncoder::new(
            &DamsmConfig {
                channels: [4, 6],
                feature_dim: 8,
                resolution: 16,
                ..DamsmConfig::default()
            },
            DType::F64,
            &mut rng,
        )
        .unwrap();
        let vqa = VqaModel::new(
            &VqaConfig {
                image_channels: 4,
                feature_dim: 6,
                question_embedding_dim: 4,
                attention_dim: 4,
                glimpses: 2,
                resolution: 16,
                vocab_size: vocab,
                n_answers: 5,
                ..VqaConfig::desk()
            },
            DType::F64,
            &mut rng,
        )
        .unwrap();
        let seqs = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<u32>> {
            (0..n)
                .map(|_| {
                    let len = rng.random_range(2..5);
                    (0..len).map(|_| rng.random_range(3..vocab as u32)).collect()
                })
                .collect()
        };
        let batch = |v: &[Vec<u32>]| TextBatch::from_sequences(&v.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        let caps = seqs(3, &mut rng);
        let qa = seqs(2, &mut rng);
        let q: Vec<Vec<u32>> = qa.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
        Self {
            text,
            generator,
            discriminators,
            image_encoder,
            vqa,
            captions: batch(&caps),
            qa: batch(&qa),
            questions: batch(&q),
            answer_ids: vec![vec![1, 1, 3], vec![0, 4]],
        }
    }
}

/// A configuration small enough to pretrain and train in seconds (16px).
pub fn tiny_config(seed_value: u64) -> qagan_core::config::Config {
    let mut c = qagan_core::config::Config::default();
    for kv in [
        "synth.n_images=16",
        "text.embedding_dim=8",
        "text.hidden_dim=4",
        "generator.noise_dim=4",
        "generator.condition_dim=4",
        "generator.base_feature_channels=8",
        "generator.base_resolution=8",
        "generator.stage_count=2",
        "generator.residual_blocks=1",
        "discriminator.base_channels=4",
        "discriminator.max_channels=8",
        "discriminator.condition_dim=4",
        "damsm.channels=[4, 8]",
        "vqa.image_channels=4",
        "vqa.feature_dim=8",
        "vqa.question_embedding_dim=4",
        "vqa.attention_dim=4",
        "pretrain.damsm_epochs=1",
        "pretrain.vqa_epochs=1",
        "pretrain.batch_size=4",
        "train.batch_size=4",
        "train.epochs=2",
        "train.checkpoint_every=1",
        "train.warmup_epochs=0",
        "eval.n_samples=8",
        "eval.is_splits=2",
        "eval.r_precision_distractors=3",
        "eval.batch_size=8",
    ] {
        c.set(kv).unwrap();
    }
    c.seed = seed_value;
    c.sync_dims();
    c
}

/// Synthesizes the dataset and runs both pretrainings under `root`.
pub fn prepared(
    root: &std::path::Path,
    cfg: &qagan_core::config::Config,
) -> (qagan_core::data::Dataset, qagan_core::trainer::RunPaths) {
    use qagan_core::trainer::{pretrain_damsm, pretrain_vqa, RunPaths};
    let paths = RunPaths::new(root, cfg);
    qagan_core::data::generate_synthetic_dataset(&cfg.synth.scene, cfg.synth.n_images, cfg.seed, &paths.data).unwrap();
    let ds = qagan_core::data::Dataset::load(&paths.data, cfg.generator.final_resolution()).unwrap();
    pretrain_damsm(cfg, &ds, &paths.damsm).unwrap();
    pretrain_vqa(cfg, &ds, &paths.vqa).unwrap();
    (ds, paths)
}

/// Seeded standard-normal tensor in double precision.
pub fn randn(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}
