//! Attentional image-text matching model: a region-level image encoder, the
//! word-region relevance score and the bidirectional contrastive matching
//! loss over a batch (word level and sentence level).

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cosine_last, leaky_relu, log_softmax_last, softmax_last, Conv2d, Linear, ParamStore};
use crate::text_encoder::TextFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gammas {
    /// Sharpness of the word-to-region attention.
    pub gamma1: f64,
    /// Log-sum-exp aggregation over words.
    pub gamma2: f64,
    /// Temperature of the batch softmax.
    pub gamma3: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Self {
            gamma1: 4.0,
            gamma2: 5.0,
            gamma3: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DamsmConfig {
    pub channels: [usize; 2],
    pub gammas: Gammas,
    /// Filled from the text encoder.
    pub feature_dim: usize,
    pub resolution: usize,
}

impl Default for DamsmConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64],
            gammas: Gammas::default(),
            feature_dim: 128,
            resolution: 64,
        }
    }
}

/// Region features (B, D, R) and global features (B, D).
#[derive(Debug, Clone)]
pub struct RegionFeatures {
    pub regions: Tensor,
    pub global: Tensor,
}

/// Convolutional encoder with non-overlapping (patchifying) kernels, so a
/// constant image maps to identical region columns.
pub struct ImageEncoder {
    pub config: DamsmConfig,
    pub store: ParamStore,
    patch: Conv2d,
    mid: Conv2d,
    top: Conv2d,
    region_proj: Conv2d,
    global_proj: Linear,
}

impl ImageEncoder {
    pub fn new(config: &DamsmConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.resolution < 16 || config.resolution % 16 != 0 {
            return Err(Error::Config("damsm.resolution must be a multiple of 16".into()));
        }
        let mut store = ParamStore::new(dtype);
        let s = &mut store;
        let [c1, c2] = config.channels;
        let k = config.resolution / 16;
        Ok(Self {
            patch: Conv2d::new(s, "patch", 3, c1, k, k, 0, rng)?,
            mid: Conv2d::new(s, "mid", c1, c2, 2, 2, 0, rng)?,
            top: Conv2d::new(s, "top", c2, c2, 2, 2, 0, rng)?,
            region_proj: Conv2d::new(s, "region_proj", c2, config.feature_dim, 1, 1, 0, rng)?,
            global_proj: Linear::new(s, "global_proj", c2, config.feature_dim, rng)?,
            config: config.clone(),
            store,
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<RegionFeatures> {
        let (b, _, h, w) = image.dims4()?;
        let r = self.config.resolution;
        if h != r || w != r {
            return Err(Error::Shape(format!(
                "image encoder expects {r}x{r} images, got {h}x{w}"
            )));
        }
        let x = leaky_relu(&self.patch.forward(image)?, 0.2)?;
        let x = leaky_relu(&self.mid.forward(&x)?, 0.2)?;
        let regions = self.region_proj.forward(&x)?;
        let (_, d, rh, rw) = regions.dims4()?;
        let regions = regions.reshape((b, d, rh * rw))?;
        let top = leaky_relu(&self.top.forward(&x)?, 0.2)?;
        let pooled = top.mean(D::Minus1)?.mean(D::Minus1)?;
        let global = self.global_proj.forward(&pooled)?;
        Ok(RegionFeatures { regions, global })
    }
}

/// Relevance of one text (words `(D, L)`, valid columns only) to every image
/// in `regions` `(N, D, R)`. Returns `(N,)`:
/// `(1/gamma2) * ln sum_i exp(gamma2 * cos(c_i, e_i))`, where `c_i` is the
/// region context of word `i` under attention normalized first over words
/// and then, sharpened by gamma1, over regions.
pub fn text_to_images_score(regions: &Tensor, words: &Tensor, gamma1: f64, gamma2: f64) -> Result<Tensor> {
    let (n, d, _) = regions.dims3()?;
    let (wd, l) = words.dims2()?;
    if wd != d {
        return Err(Error::Shape(format!("word dim {wd} != region dim {d}")));
    }
    let wt = words.t()?.contiguous()?; // (L, D)
    let sim = wt.broadcast_matmul(regions)?; // (N, L, R)
    let over_words = softmax_last(&sim.transpose(1, 2)?)?.transpose(1, 2)?; // normalize over L
    let attn = softmax_last(&(over_words * gamma1)?)?; // over R
    let context = regions.matmul(&attn.transpose(1, 2)?.contiguous()?)?; // (N, D, L)
    let e = words.unsqueeze(0)?.broadcast_as((n, d, l))?;
    let cos = cosine_last(&context.transpose(1, 2)?, &e.transpose(1, 2)?, 1e-8)?; // (N, L)
    let lse = (cos * gamma2)?.exp()?.sum(D::Minus1)?.log()?;
    Ok((lse / gamma2)?)
}

/// Score of a single (image, text) pair: `regions` (D, R), `words` (D, L).
pub fn matching_score(regions: &Tensor, words: &Tensor, gamma1: f64, gamma2: f64) -> Result<Tensor> {
    Ok(text_to_images_score(&regions.unsqueeze(0)?, words, gamma1, gamma2)?.squeeze(0)?)
}

/// Word-level score matrix `S[i][j]` = score(image i, text j), (N, N).
pub fn word_score_matrix(regions: &RegionFeatures, text: &TextFeatures, gammas: &Gammas) -> Result<Tensor> {
    let mut cols = Vec::with_capacity(text.len());
    for (j, &len) in text.lengths.iter().enumerate() {
        let w = text.words.get(j)?.narrow(1, 0, len)?;
        cols.push(text_to_images_score(&regions.regions, &w, gammas.gamma1, gammas.gamma2)?);
    }
    Ok(Tensor::stack(&cols, 1)?)
}

/// Sentence-level cosine matrix `S[i][j]` = cos(global_i, sentence_j), (N, N).
pub fn sentence_score_matrix(regions: &RegionFeatures, text: &TextFeatures) -> Result<Tensor> {
    let n = text.len();
    let d = text.sentence.dim(1)?;
    let g = regions.global.unsqueeze(1)?.broadcast_as((n, n, d))?;
    let s = text.sentence.unsqueeze(0)?.broadcast_as((n, n, d))?;
    cosine_last(&g, &s, 1e-8)
}

/// Components of the matching loss; each is a batch-mean cross entropy.
#[derive(Debug, Clone)]
pub struct DamsmLoss {
    pub total: Tensor,
    pub word_image_to_text: f64,
    pub word_text_to_image: f64,
    pub sentence_image_to_text: f64,
    pub sentence_text_to_image: f64,
}

/// Bidirectional matched-pair cross entropy over a (N, N) score matrix
/// (diagonal = matched pairs), scaled by `gamma3`.
pub fn contrastive_terms(scores: &Tensor, gamma3: f64) -> Result<(Tensor, Tensor)> {
    let n = scores.dim(0)?;
    if n < 2 {
        return Err(Error::InvalidInput("contrastive loss undefined".into()));
    }
    let eye = Tensor::eye(n, scores.dtype(), scores.device())?;
    let scaled = (scores * gamma3)?;
    let rows = log_softmax_last(&scaled)?;
    let cols = log_softmax_last(&scaled.t()?)?;
    let pick = |lp: Tensor| -> Result<Tensor> { Ok(((lp * &eye)?.sum_all()? / n as f64)?.neg()?) };
    Ok((pick(rows)?, pick(cols)?))
}

pub fn damsm_loss_from_scores(word_scores: &Tensor, sentence_scores: &Tensor, gamma3: f64) -> Result<DamsmLoss> {
    let (w0, w1) = contrastive_terms(word_scores, gamma3)?;
    let (s0, s1) = contrastive_terms(sentence_scores, gamma3)?;
    let total = (((&w0 + &w1)? + &s0)? + &s1)?;
    let v = |t: &Tensor| crate::nn::scalar(t);
    Ok(DamsmLoss {
        word_image_to_text: v(&w0)?,
        word_text_to_image: v(&w1)?,
        sentence_image_to_text: v(&s0)?,
        sentence_text_to_image: v(&s1)?,
        total,
    })
}

/// Matching loss of a batch of images against their paired texts.
pub fn damsm_loss(regions: &RegionFeatures, text: &TextFeatures, gammas: &Gammas) -> Result<DamsmLoss> {
    if text.len() < 2 {
        return Err(Error::InvalidInput("contrastive loss undefined".into()));
    }
    let w = word_score_matrix(regions, text, gammas)?;
    let s = sentence_score_matrix(regions, text)?;
    damsm_loss_from_scores(&w, &s, gammas.gamma3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use candle_core::Device;

    #[test]
    fn constant_image_gives_identical_regions() {
        let cfg = DamsmConfig {
            feature_dim: 8,
            ..DamsmConfig::default()
        };
        let enc = ImageEncoder::new(&cfg, DType::F64, &mut seed::rng(0, "img", &[])).unwrap();
        let img = Tensor::full(0.3f64, (3, 3, 64, 64), &Device::Cpu).unwrap();
        let f = enc.encode(&img).unwrap();
        assert_eq!(f.regions.dims(), &[3, 8, 64]);
        assert_eq!(f.global.dims(), &[3, 8]);
        for row in f.regions.get(0).unwrap().to_vec2::<f64>().unwrap() {
            assert!(row.iter().all(|v| *v == row[0]));
        }
    }

    #[test]
    fn uniform_scores_give_four_ln_n() {
        let n = 5;
        let s = Tensor::full(0.37f64, (n, n), &Device::Cpu).unwrap();
        let l = damsm_loss_from_scores(&s, &s, 10.0).unwrap();
        let total = crate::nn::scalar(&l.total).unwrap();
        assert!((total - 4.0 * (n as f64).ln()).abs() < 1e-12);
        assert!((l.word_image_to_text - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_matches_drive_loss_to_zero() {
        let s = (Tensor::eye(4, DType::F64, &Device::Cpu).unwrap() * 100.0).unwrap();
        let l = damsm_loss_from_scores(&s, &s, 10.0).unwrap();
        assert!(crate::nn::scalar(&l.total).unwrap() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let s = Tensor::ones((1, 1), DType::F64, &Device::Cpu).unwrap();
        match damsm_loss_from_scores(&s, &s, 10.0) {
            Err(Error::InvalidInput(m)) => assert_eq!(m, "contrastive loss undefined"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn identical_words_and_regions_reach_max_cosine() {
        let v = Tensor::new(&[0.3f64, -1.2, 0.5], &Device::Cpu).unwrap().reshape((3, 1)).unwrap();
        let regions = v.broadcast_as((3, 6)).unwrap().contiguous().unwrap();
        let words = v.broadcast_as((3, 4)).unwrap().contiguous().unwrap();
        let g2 = 5.0;
        let s = crate::nn::scalar(&matching_score(&regions, &words, 50.0, g2).unwrap()).unwrap();
        assert!((s - (1.0 + (4.0f64).ln() / g2)).abs() < 1e-9);
    }
}
