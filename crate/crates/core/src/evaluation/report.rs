use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{fid, inception_score, r_precision, ActivationSet};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, EvalConfig};
use crate::damsm::ImageEncoder;
use crate::data::{chw_to_rgb, Dataset, Split};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::seed;
use crate::text_encoder::TextEncoder;
use crate::trainer::{load_generator, DamsmModels, RunPaths, VqaBundle};
use crate::vqa::vqa_accuracy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub r_precision: f64,
    pub vqa_acc_consensus: f64,
    pub vqa_acc_top1_any: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Captions were drawn with replacement (more samples than captions).
    pub with_replacement: bool,
    pub n_qa: usize,
    /// Images generated per QA pair (fresh noise each time) so that the
    /// accuracy rests on at least `n_samples` images.
    #[serde(default = "one")]
    pub qa_repeats: usize,
    pub split: Split,
}

fn one() -> usize {
    1
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::data::manifest::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::data::manifest::read_json(path)
    }
}

/// Everything needed to score a generator.
pub struct EvalModels<'a> {
    pub generator: &'a Generator,
    pub text: &'a TextEncoder,
    pub image: &'a ImageEncoder,
    pub scorer: &'a VqaBundle,
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Indices drawn from `pool`: without replacement when it is large enough.
fn draw<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> (Vec<usize>, bool) {
    if n <= pool.len() {
        let mut v: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
        v.sort_unstable();
        (v, false)
    } else {
        ((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect(), true)
    }
}

/// Final-stage images generated from caption (or QA) token sequences.
pub fn generate_images(
    generator: &Generator,
    text: &TextEncoder,
    sequences: &[&[u32]],
    batch_size: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for (k, chunk) in sequences.chunks(batch_size.max(1)).enumerate() {
        let feats = text.encode(&crate::data::TextBatch::from_sequences(chunk)?)?;
        let mut rng = seed::rng(seed, label, &[k as u64]);
        let (z, eps) = generator.sample_inputs(chunk.len(), &mut rng)?;
        let pyramid = generator.generate(&z, &eps, &feats)?;
        out.push(pyramid.final_image().detach());
    }
    Ok(out)
}

/// Scores the generator on `n_samples` captions of `split` and on every QA
/// pair of the split.
pub fn evaluate_models(
    models: &EvalModels,
    ds: &Dataset,
    cfg: &EvalConfig,
    split: Split,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let pool = ds.caption_indices(split);
    if pool.is_empty() || n_samples == 0 {
        return Err(Error::InvalidInput(format!("no {split:?} captions to evaluate")));
    }
    let (picked, with_replacement) = draw(&pool, n_samples, &mut seed::rng(seed, "eval-captions", &[]));
    let seqs: Vec<&[u32]> = picked.iter().map(|&i| ds.captions[i].token_ids.as_slice()).collect();
    let fakes = generate_images(models.generator, models.text, &seqs, cfg.batch_size, seed, "eval-noise")?;

    let dt = models.generator.store.dtype();
    let true_images = ds.caption_images(&picked)?;
    let mut class_rows = Vec::new();
    let mut fake_act = Vec::new();
    let mut real_act = Vec::new();
    let mut globals = Vec::new();
    for (k, img) in fakes.iter().enumerate() {
        class_rows.extend(rows(&models.scorer.model.class_probs(img)?)?);
        fake_act.extend(rows(&models.scorer.model.pooled_features(img)?)?);
        globals.extend(rows(&models.image.encode(img)?.global)?);
        let lo = k * cfg.batch_size.max(1);
        let real = ds.image_batch(&true_images[lo..lo + img.dim(0)?], dt)?;
        real_act.extend(rows(&models.scorer.model.pooled_features(&real)?)?);
    }
    let (is_mean, is_std) = inception_score(&class_rows, cfg.is_splits.min(class_rows.len()))?;
    let fid_value = fid(&ActivationSet::from_rows(&real_act)?, &ActivationSet::from_rows(&fake_act)?)?;

    // retrieval against every caption of the dataset
    let all: Vec<&[u32]> = ds.captions.iter().map(|c| c.token_ids.as_slice()).collect();
    let mut sentences = Vec::with_capacity(all.len());
    for chunk in all.chunks(64) {
        sentences.extend(rows(&models.text.encode(&crate::data::TextBatch::from_sequences(chunk)?)?.sentence)?);
    }
    let r_prec = r_precision(
        &globals,
        &picked,
        &sentences,
        |i, c| {
            let t = &ds.captions[picked[i]];
            let d = &ds.captions[c];
            d.image_id != t.image_id && d.text != t.text
        },
        cfg.r_precision_distractors,
        &mut seed::rng(seed, "r-precision", &[]),
    )?;

    let qa_split = ds.qa_indices(split);
    let qa_repeats = if qa_split.is_empty() { 1 } else { n_samples.div_ceil(qa_split.len()).max(1) };
    let qa_idx: Vec<usize> = (0..qa_repeats).flat_map(|_| qa_split.iter().copied()).collect();
    let (vqa_acc_consensus, vqa_acc_top1_any) = if qa_idx.is_empty() {
        (0.0, 0.0)
    } else {
        let seqs: Vec<&[u32]> = qa_idx.iter().map(|&i| ds.qa[i].qa_token_ids.as_slice()).collect();
        let qa_fakes = generate_images(models.generator, models.text, &seqs, cfg.batch_size, seed, "eval-qa-noise")?;
        let mut preds = Vec::with_capacity(qa_idx.len());
        for (k, img) in qa_fakes.iter().enumerate() {
            let lo = k * cfg.batch_size.max(1);
            let q = ds.question_batch(&qa_idx[lo..lo + img.dim(0)?])?;
            for id in models.scorer.model.answer_probs(img, &q)?.argmax()? {
                preds.push(models.scorer.answers.answer(id).unwrap_or_default().to_string());
            }
        }
        let recs: Vec<_> = qa_idx.iter().map(|&i| &ds.qa[i]).collect();
        vqa_accuracy(&preds, &recs)?
    };

    Ok(EvalReport {
        is_mean,
        is_std,
        fid: fid_value,
        r_precision: r_prec,
        vqa_acc_consensus,
        vqa_acc_top1_any,
        n_samples,
        seed,
        with_replacement,
        n_qa: qa_split.len(),
        qa_repeats,
        split,
    })
}

/// Loads a GAN checkpoint plus the frozen scorers and evaluates it.
pub fn evaluate_checkpoint(
    cfg: &Config,
    paths: &RunPaths,
    ds: &Dataset,
    checkpoint: &Path,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_vocab(&ds.meta.vocab_hash)?;
    let generator = load_generator(&ckpt)?;
    let damsm = DamsmModels::load(&paths.damsm, &ds.meta.vocab_hash)?;
    let scorer = VqaBundle::load(&paths.vqa, &ds.meta.vocab_hash)?;
    let models = EvalModels {
        generator: &generator,
        text: &damsm.text,
        image: &damsm.image,
        scorer: &scorer,
    };
    evaluate_models(&models, ds, &cfg.eval, Split::Test, n_samples, seed)
}

/// Writes images (N, 3, R, R) in [-1, 1] as a grid with `cols` columns and
/// a sidecar text file (`<png>.txt`) listing each cell's caption.
pub fn write_sample_grid(images: &Tensor, captions: &[String], cols: usize, path: &Path) -> Result<PathBuf> {
    let (n, _, r, _) = images.dims4()?;
    if n != captions.len() || n == 0 {
        return Err(Error::InvalidInput("one caption per image required".into()));
    }
    let rows_n = n.div_ceil(cols);
    let pad = 2u32;
    let cell = r as u32 + pad;
    let mut grid = image::RgbImage::from_pixel(cols as u32 * cell + pad, rows_n as u32 * cell + pad, image::Rgb([255, 255, 255]));
    let data = images.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
    let mut sidecar = String::new();
    for (k, chw) in data.iter().enumerate() {
        let tile = chw_to_rgb(chw, r);
        let (row, col) = (k / cols, k % cols);
        image::imageops::overlay(&mut grid, &tile, (col as u32 * cell + pad) as i64, (row as u32 * cell + pad) as i64);
        sidecar.push_str(&format!("{row} {col}\t{}\n", captions[k]));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    grid.save(path)?;
    let side = path.with_extension("txt");
    std::fs::write(&side, sidecar).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}
