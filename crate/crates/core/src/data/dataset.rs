use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use super::manifest::{
    read_json, read_jsonl, DatasetMeta, ManifestRecord, RecordKind, Split, MANIFEST_FILE,
    META_FILE, SCENES_FILE, VOCAB_FILE,
};
use super::records::{CaptionRecord, QARecord};
use super::synthetic::Scene;
use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub image_id: String,
    pub split: Split,
    pub path: PathBuf,
}

/// Padded token sequences with their valid lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBatch {
    pub ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn from_sequences(seqs: &[&[u32]]) -> Result<Self> {
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidInput("text batch contains an empty sequence".into()));
        }
        let ids = seqs
            .iter()
            .map(|s| {
                let mut v = s.to_vec();
                v.resize(t, PAD_ID);
                v
            })
            .collect();
        Ok(Self {
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Token ids (B, T) as u32 and the validity mask (B, T) in `dtype`.
    pub fn tensors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let (b, t) = (self.len(), self.max_len());
        let flat: Vec<u32> = self.ids.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (b, t), &Device::Cpu)?;
        let mask: Vec<f64> = self
            .lengths
            .iter()
            .flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (b, t), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((ids, mask))
    }
}

/// One training step's worth of record indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepBatch {
    pub captions: Vec<usize>,
    pub qa: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// QA batch size relative to the caption batch.
    pub qa_ratio: f64,
}

/// Seeded batch plan for one epoch. Caption indices are a permutation of
/// `0..caption_lengths.len()` split into batches of `batch_size`; a trailing
/// single leftover joins the previous batch so every batch can feed a
/// contrastive loss. QA indices are drawn from cycling seeded permutations.
/// Within each batch indices are ordered by descending length (stable).
pub fn make_batches(
    caption_lengths: &[usize],
    qa_lengths: &[usize],
    config: BatchConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<StepBatch>> {
    let BatchConfig { batch_size, qa_ratio } = config;
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be >= 1".into()));
    }
    if batch_size > caption_lengths.len() {
        return Err(Error::InvalidInput(format!(
            "batch_size {batch_size} exceeds dataset size {}",
            caption_lengths.len()
        )));
    }
    if qa_ratio < 0.0 || (qa_ratio > 0.0 && qa_lengths.is_empty()) {
        return Err(Error::InvalidInput("qa_ratio > 0 needs QA records".into()));
    }
    let mut order: Vec<usize> = (0..caption_lengths.len()).collect();
    order.shuffle(&mut seed::rng(seed, "batches", &[epoch as u64]));
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let last = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(last);
    }

    let mut qa_stream: Vec<usize> = Vec::new();
    let mut round = 0u64;
    let mut next_qa = |n: usize| -> Vec<usize> {
        while qa_stream.len() < n {
            let mut p: Vec<usize> = (0..qa_lengths.len()).collect();
            p.shuffle(&mut seed::rng(seed, "qa-batches", &[epoch as u64, round]));
            round += 1;
            qa_stream.extend(p);
        }
        qa_stream.drain(..n).collect()
    };

    let by_len_desc = |lens: &[usize], v: &mut Vec<usize>| v.sort_by_key(|&i| std::cmp::Reverse(lens[i]));
    Ok(chunks
        .into_iter()
        .map(|mut caps| {
            let n_qa = (qa_ratio * caps.len() as f64).round() as usize;
            let mut qa = next_qa(n_qa);
            by_len_desc(caption_lengths, &mut caps);
            by_len_desc(qa_lengths, &mut qa);
            StepBatch { captions: caps, qa }
        })
        .collect())
}

/// In-memory dataset: records, vocabulary and images decoded to CHW floats
/// in [-1, 1] at a fixed resolution.
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub vocab: Vocabulary,
    pub resolution: usize,
    pub images: Vec<ImageEntry>,
    pub captions: Vec<CaptionRecord>,
    pub qa: Vec<QARecord>,
    pub scenes: HashMap<String, Scene>,
    image_index: HashMap<String, usize>,
    pixels: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn load(root: &Path, resolution: usize) -> Result<Self> {
        let meta: DatasetMeta = read_json(&root.join(META_FILE))?;
        let vocab: Vocabulary = read_json(&root.join(VOCAB_FILE))?;
        if vocab.hash() != meta.vocab_hash {
            return Err(Error::Data(format!(
                "{}: vocabulary does not match dataset.meta hash",
                root.display()
            )));
        }
        let records: Vec<ManifestRecord> = read_jsonl(&root.join(MANIFEST_FILE))?;
        let mut images = Vec::new();
        let mut image_index = HashMap::new();
        let mut captions = Vec::new();
        let mut qa = Vec::new();
        for r in &records {
            if !image_index.contains_key(&r.image_id) {
                image_index.insert(r.image_id.clone(), images.len());
                images.push(ImageEntry {
                    image_id: r.image_id.clone(),
                    split: r.split,
                    path: root.join(&r.image),
                });
            }
            match r.kind {
                RecordKind::Caption => captions.push(CaptionRecord::new(&r.image_id, &r.text, &vocab)?),
                RecordKind::Qa => {
                    let q = r.question.as_deref().ok_or_else(|| {
                        Error::Data(format!("QA record for {} has no question", r.image_id))
                    })?;
                    qa.push(QARecord::new(&r.image_id, q, &r.answers, &vocab)?);
                }
            }
        }
        let scenes_path = root.join(SCENES_FILE);
        let scenes = if scenes_path.exists() {
            read_jsonl::<Scene>(&scenes_path)?
                .into_iter()
                .map(|s| (s.image_id.clone(), s))
                .collect()
        } else {
            HashMap::new()
        };
        let pixels = images
            .iter()
            .map(|e| load_pixels(&e.path, resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            vocab,
            resolution,
            images,
            captions,
            qa,
            scenes,
            image_index,
            pixels,
        })
    }

    pub fn image_of(&self, image_id: &str) -> Result<usize> {
        self.image_index
            .get(image_id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown image {image_id}")))
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.image_index.get(image_id).map(|&i| self.images[i].split)
    }

    pub fn caption_indices(&self, split: Split) -> Vec<usize> {
        (0..self.captions.len())
            .filter(|&i| self.split_of(&self.captions[i].image_id) == Some(split))
            .collect()
    }

    pub fn qa_indices(&self, split: Split) -> Vec<usize> {
        (0..self.qa.len())
            .filter(|&i| self.split_of(&self.qa[i].image_id) == Some(split))
            .collect()
    }

    pub fn image_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].split == split)
            .collect()
    }

    pub fn caption_batch(&self, idx: &[usize]) -> Result<TextBatch> {
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| self.captions[i].token_ids.as_slice()).collect();
        TextBatch::from_sequences(&seqs)
    }

    pub fn qa_batch(&self, idx: &[usize]) -> Result<TextBatch> {
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| self.qa[i].qa_token_ids.as_slice()).collect();
        TextBatch::from_sequences(&seqs)
    }

    pub fn question_batch(&self, idx: &[usize]) -> Result<TextBatch> {
        let seqs: Vec<&[u32]> = idx
            .iter()
            .map(|&i| self.qa[i].question_token_ids.as_slice())
            .collect();
        TextBatch::from_sequences(&seqs)
    }

    /// Images (B, 3, R, R) for the given image indices.
    pub fn image_batch(&self, image_idx: &[usize], dtype: DType) -> Result<Tensor> {
        let r = self.resolution;
        let mut flat = Vec::with_capacity(image_idx.len() * 3 * r * r);
        for &i in image_idx {
            flat.extend_from_slice(&self.pixels[i]);
        }
        Ok(Tensor::from_vec(flat, (image_idx.len(), 3, r, r), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn caption_images(&self, caption_idx: &[usize]) -> Result<Vec<usize>> {
        caption_idx.iter().map(|&i| self.image_of(&self.captions[i].image_id)).collect()
    }

    pub fn qa_images(&self, qa_idx: &[usize]) -> Result<Vec<usize>> {
        qa_idx.iter().map(|&i| self.image_of(&self.qa[i].image_id)).collect()
    }
}

pub fn load_pixels(path: &Path, resolution: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != resolution || img.height() as usize != resolution {
        image::imageops::resize(
            &img,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    Ok(rgb_to_chw(&img))
}

pub fn rgb_to_chw(img: &image::RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// CHW values in [-1, 1] to an RGB image.
pub fn chw_to_rgb(chw: &[f32], size: usize) -> image::RgbImage {
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let px = |c: usize| {
                let v = (chw[c * size * size + y * size + x] + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(b: usize) -> BatchConfig {
        BatchConfig {
            batch_size: b,
            qa_ratio: 1.0,
        }
    }

    #[test]
    fn steps_per_epoch() {
        let lens = vec![3; 8];
        let plan = make_batches(&lens, &lens, cfg(4), 1, 0).unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.iter().all(|s| s.captions.len() == 4 && s.qa.len() == 4));
    }

    #[test]
    fn single_leftover_joins_previous_batch() {
        let lens = vec![3; 9];
        let plan = make_batches(&lens, &lens, cfg(4), 1, 0).unwrap();
        assert_eq!(plan.iter().map(|s| s.captions.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(plan[1].qa.len(), 5);
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        assert!(make_batches(&[1, 2], &[1], cfg(3), 0, 0).is_err());
        assert!(make_batches(&[1, 2], &[1], cfg(0), 0, 0).is_err());
    }

    #[test]
    fn deterministic_and_sorted() {
        let caps: Vec<usize> = (0..37).map(|i| 1 + (i * 7) % 11).collect();
        let qa: Vec<usize> = (0..13).map(|i| 2 + (i * 5) % 9).collect();
        let a = make_batches(&caps, &qa, cfg(8), 42, 3).unwrap();
        let b = make_batches(&caps, &qa, cfg(8), 42, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_batches(&caps, &qa, cfg(8), 42, 4).unwrap());
        for s in &a {
            assert!(s.captions.windows(2).all(|w| caps[w[0]] >= caps[w[1]]));
            assert!(s.qa.windows(2).all(|w| qa[w[0]] >= qa[w[1]]));
        }
    }

    #[test]
    fn epoch_covers_each_caption_once() {
        let caps = vec![5usize; 53];
        let plan = make_batches(&caps, &[4; 7], cfg(16), 9, 0).unwrap();
        let mut seen = vec![0usize; caps.len()];
        for s in &plan {
            for &i in &s.captions {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_ratio_gives_empty_qa_batches() {
        let plan = make_batches(&[3; 8], &[], BatchConfig { batch_size: 4, qa_ratio: 0.0 }, 1, 0).unwrap();
        assert!(plan.iter().all(|s| s.qa.is_empty()));
    }

    #[test]
    fn text_batch_pads_and_masks() {
        let b = TextBatch::from_sequences(&[&[5, 6, 7], &[8]]).unwrap();
        assert_eq!(b.ids, vec![vec![5, 6, 7], vec![8, 0, 0]]);
        let (_, mask) = b.tensors(DType::F32).unwrap();
        assert_eq!(mask.to_vec2::<f32>().unwrap(), vec![vec![1., 1., 1.], vec![1., 0., 0.]]);
    }
}
