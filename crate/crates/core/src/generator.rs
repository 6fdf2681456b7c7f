//! Multi-stage attentional generator.
//!
//! Stage 0 maps noise and the conditioning-augmented sentence embedding to a
//! feature map at the base resolution. Each refinement stage attends over the
//! word features at every spatial location, fuses the word context with the
//! hidden features, and doubles the resolution. Every stage emits an image.

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{masked_softmax_last, upsample2, Conv2d, Linear, ParamStore};
use crate::text_encoder::TextFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub condition_dim: usize,
    /// Hidden channels of the base-resolution stage; later stages halve it
    /// (never below 8).
    pub base_feature_channels: usize,
    pub stage_count: usize,
    pub base_resolution: usize,
    pub residual_blocks: usize,
    /// Sentence/word feature dimension; filled from the text encoder.
    pub text_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            noise_dim: 100,
            condition_dim: 32,
            base_feature_channels: 16,
            stage_count: 3,
            base_resolution: 16,
            residual_blocks: 1,
            text_dim: 128,
        }
    }

    pub fn full() -> Self {
        Self {
            noise_dim: 100,
            condition_dim: 100,
            base_feature_channels: 64,
            stage_count: 3,
            base_resolution: 64,
            residual_blocks: 2,
            text_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage_count) {
            return Err(Error::Config("generator.stage_count must be 1, 2 or 3".into()));
        }
        if self.base_resolution < 8 || !self.base_resolution.is_power_of_two() {
            return Err(Error::Config(
                "generator.base_resolution must be a power of two >= 8".into(),
            ));
        }
        if self.noise_dim == 0 || self.condition_dim == 0 || self.base_feature_channels == 0 || self.text_dim == 0 {
            return Err(Error::Config("generator dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.stage_count).map(|i| self.base_resolution << i).collect()
    }

    pub fn final_resolution(&self) -> usize {
        self.base_resolution << (self.stage_count - 1)
    }

    fn stage_channels(&self, stage: usize) -> usize {
        (self.base_feature_channels >> stage).max(8)
    }
}

/// Conditioning-augmentation output.
#[derive(Debug, Clone)]
pub struct ConditioningLatent {
    pub mean: Tensor,
    pub log_variance: Tensor,
    pub sample: Tensor,
    /// Batch mean of `0.5 * sum(exp(logvar) + mean^2 - 1 - logvar)`.
    pub kl: Tensor,
}

/// KL divergence of N(mean, exp(logvar)) from N(0, I), averaged over the batch.
pub fn kl_to_standard_normal(mean: &Tensor, log_variance: &Tensor) -> Result<Tensor> {
    let per = ((log_variance.exp()? + mean.sqr()?)? - log_variance)?.affine(1.0, -1.0)?;
    Ok((per.sum(D::Minus1)? * 0.5)?.mean_all()?)
}

pub struct ConditioningAugmentation {
    fc: Linear,
    dim: usize,
}

impl ConditioningAugmentation {
    pub fn new(store: &mut ParamStore, text_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, "ca.fc", text_dim, 2 * dim, rng)?,
            dim,
        })
    }

    /// `sentence` (B, D) and standard-normal `eps` (B, cond).
    pub fn forward(&self, sentence: &Tensor, eps: &Tensor) -> Result<ConditioningLatent> {
        let values = sentence.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sentence embedding".into()));
        }
        let h = self.fc.forward(sentence)?;
        let mean = h.narrow(1, 0, self.dim)?;
        let log_variance = h.narrow(1, self.dim, self.dim)?;
        Self::from_moments(mean, log_variance, eps)
    }

    pub fn from_moments(mean: Tensor, log_variance: Tensor, eps: &Tensor) -> Result<ConditioningLatent> {
        let std = (&log_variance * 0.5)?.exp()?;
        let sample = (&mean + (std * eps)?)?;
        let kl = kl_to_standard_normal(&mean, &log_variance)?;
        Ok(ConditioningLatent {
            mean,
            log_variance,
            sample,
            kl,
        })
    }
}

/// Attention of every spatial location over the valid words.
///
/// `hidden` (B, C, H, W), `words` (B, C, T) already projected to C channels,
/// `mask` (B, T). Returns the context (B, C, H, W) and the weights (B, H*W, T),
/// each row of which sums to one over the valid words.
pub fn word_attention(hidden: &Tensor, words: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = hidden.dims4()?;
    let (wb, wc, t) = words.dims3()?;
    if wb != b || wc != c {
        return Err(Error::Shape(format!(
            "word features {:?} do not match hidden {:?}",
            words.dims(),
            hidden.dims()
        )));
    }
    let valid = mask.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if valid.iter().any(|&v| v < 0.5) {
        return Err(Error::InvalidInput("attention over an all-masked sequence".into()));
    }
    let flat = hidden.reshape((b, c, h * w))?;
    let scores = flat.transpose(1, 2)?.matmul(words)?; // (B, N, T)
    let attn = masked_softmax_last(&scores, &mask.reshape((b, 1, t))?)?;
    let context = words.matmul(&attn.transpose(1, 2)?)?; // (B, C, N)
    Ok((context.reshape((b, c, h, w))?, attn))
}

struct UpBlock {
    conv: Conv2d,
}

impl UpBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, name, cin, cout, 3, 1, 1, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(&upsample2(x)?)?.relu()?)
    }
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?.relu()?;
        Ok((x + self.b.forward(&h)?)?)
    }
}

struct RefineStage {
    word_proj: Linear,
    fuse: Conv2d,
    res: Vec<ResBlock>,
    up: UpBlock,
    to_image: Conv2d,
}

struct BaseStage {
    fc: Linear,
    channels: usize,
    ups: Vec<UpBlock>,
    to_image: Conv2d,
}

/// Generated images (one per stage, values in [-1, 1]) and the attention
/// weights of each refinement stage as (B, T, H*W).
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub images: Vec<Tensor>,
    pub attention: Vec<Tensor>,
    pub latent: ConditioningLatent,
}

impl ImagePyramid {
    pub fn final_image(&self) -> &Tensor {
        self.images.last().expect("at least one stage")
    }
}

pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    ca: ConditioningAugmentation,
    base: BaseStage,
    refine: Vec<RefineStage>,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let s = &mut store;
        let ca = ConditioningAugmentation::new(s, config.text_dim, config.condition_dim, rng)?;

        let c0 = config.stage_channels(0);
        let n_up = (config.base_resolution / 4).trailing_zeros() as usize;
        let top = c0 << n_up.min(2);
        let fc = Linear::new(s, "base.fc", config.noise_dim + config.condition_dim, top * 16, rng)?;
        let mut ups = Vec::new();
        let mut ch = top;
        for i in 0..n_up {
            let next = if i + 1 == n_up { c0 } else { (ch / 2).max(c0) };
            ups.push(UpBlock::new(s, &format!("base.up{i}"), ch, next, rng)?);
            ch = next;
        }
        let to_image = Conv2d::new(s, "base.to_image", c0, 3, 3, 1, 1, rng)?;
        let base = BaseStage {
            fc,
            channels: top,
            ups,
            to_image,
        };

        let mut refine = Vec::new();
        for stage in 1..config.stage_count {
            let cin = config.stage_channels(stage - 1);
            let cout = config.stage_channels(stage);
            let p = format!("refine{stage}");
            let word_proj = Linear::no_bias(s, &format!("{p}.word_proj"), config.text_dim, cin, rng)?;
            let fuse = Conv2d::new(s, &format!("{p}.fuse"), 2 * cin, cin, 3, 1, 1, rng)?;
            let res = (0..config.residual_blocks)
                .map(|r| {
                    Ok(ResBlock {
                        a: Conv2d::new(s, &format!("{p}.res{r}.a"), cin, cin, 3, 1, 1, rng)?,
                        b: Conv2d::new(s, &format!("{p}.res{r}.b"), cin, cin, 3, 1, 1, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let up = UpBlock::new(s, &format!("{p}.up"), cin, cout, rng)?;
            let to_image = Conv2d::new(s, &format!("{p}.to_image"), cout, 3, 3, 1, 1, rng)?;
            refine.push(RefineStage {
                word_proj,
                fuse,
                res,
                up,
                to_image,
            });
        }
        Ok(Self {
            config: config.clone(),
            store,
            ca,
            base,
            refine,
        })
    }

    pub fn condition_augment(&self, sentence: &Tensor, eps: &Tensor) -> Result<ConditioningLatent> {
        self.ca.forward(sentence, eps)
    }

    /// Standard-normal noise and conditioning draws for a batch.
    pub fn sample_inputs(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let dt = self.store.dtype();
        Ok((
            randn((batch, self.config.noise_dim), dt, rng)?,
            randn((batch, self.config.condition_dim), dt, rng)?,
        ))
    }

    pub fn generate(&self, noise: &Tensor, eps: &Tensor, text: &TextFeatures) -> Result<ImagePyramid> {
        let (b, nz) = noise.dims2()?;
        if nz != self.config.noise_dim || text.len() != b || text.sentence.dim(1)? != self.config.text_dim {
            return Err(Error::Shape(format!(
                "generator expects noise (B, {}) and text dim {}, got noise {:?}, sentence {:?}",
                self.config.noise_dim,
                self.config.text_dim,
                noise.dims(),
                text.sentence.dims()
            )));
        }
        let latent = self.ca.forward(&text.sentence, eps)?;
        let z = Tensor::cat(&[noise, &latent.sample], 1)?;
        let mut h = self
            .base
            .fc
            .forward(&z)?
            .relu()?
            .reshape((b, self.base.channels, 4, 4))?;
        for up in &self.base.ups {
            h = up.forward(&h)?;
        }
        let mut images = vec![self.base.to_image.forward(&h)?.tanh()?];
        let mut attention = Vec::new();
        for stage in &self.refine {
            let words = stage.word_proj.forward(&text.words.transpose(1, 2)?)?.transpose(1, 2)?;
            let (context, attn) = word_attention(&h, &words, &text.mask)?;
            let mut x = stage.fuse.forward(&Tensor::cat(&[&h, &context], 1)?)?.relu()?;
            for r in &stage.res {
                x = r.forward(&x)?;
            }
            h = stage.up.forward(&x)?;
            images.push(stage.to_image.forward(&h)?.tanh()?);
            attention.push(attn.transpose(1, 2)?);
        }
        Ok(ImagePyramid {
            images,
            attention,
            latent,
        })
    }
}

pub fn randn(shape: (usize, usize), dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
