//! One discriminator per pyramid stage, each with an unconditional
//! (real/fake) head and a conditional (image, text) matching head.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, Conv2d, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub max_channels: usize,
    /// Dimension the sentence embedding is compressed to before tiling.
    pub condition_dim: usize,
    /// Start the final layers of both heads at zero (outputs exactly 0.5).
    pub zero_init_heads: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            max_channels: 64,
            condition_dim: 32,
            zero_init_heads: false,
        }
    }

    pub fn full() -> Self {
        Self {
            base_channels: 64,
            max_channels: 512,
            condition_dim: 128,
            zero_init_heads: false,
        }
    }
}

/// Pre-sigmoid outputs of one stage discriminator for a batch, each (B,).
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub uncond_logit: Tensor,
    pub cond_logit: Option<Tensor>,
}

impl DiscriminatorOutput {
    pub fn uncond_prob(&self) -> Result<Tensor> {
        sigmoid(&self.uncond_logit)
    }

    pub fn cond_prob(&self) -> Result<Option<Tensor>> {
        self.cond_logit.as_ref().map(sigmoid).transpose()
    }
}

pub struct StageDiscriminator {
    pub resolution: usize,
    pub store: ParamStore,
    down: Vec<Conv2d>,
    uncond_head: Conv2d,
    text_proj: Linear,
    joint: Conv2d,
    cond_head: Conv2d,
    condition_dim: usize,
}

impl StageDiscriminator {
    pub fn new(
        config: &DiscriminatorConfig,
        resolution: usize,
        text_dim: usize,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!("unsupported discriminator resolution {resolution}")));
        }
        let mut store = ParamStore::new(dtype);
        let s = &mut store;
        let n_down = (resolution / 4).trailing_zeros() as usize;
        let mut down = Vec::new();
        let mut cin = 3;
        let mut cout = config.base_channels;
        for i in 0..n_down {
            down.push(Conv2d::new(s, &format!("down{i}"), cin, cout, 4, 2, 1, rng)?);
            cin = cout;
            cout = (cout * 2).min(config.max_channels);
        }
        let feat = cin;
        let head = |s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            if config.zero_init_heads {
                Conv2d::zeros(s, name, feat, 1, 4, 4, 0, rng)
            } else {
                Conv2d::new(s, name, feat, 1, 4, 4, 0, rng)
            }
        };
        let uncond_head = head(s, "uncond_head", rng)?;
        let text_proj = Linear::new(s, "text_proj", text_dim, config.condition_dim, rng)?;
        let joint = Conv2d::new(s, "joint", feat + config.condition_dim, feat, 3, 1, 1, rng)?;
        let cond_head = head(s, "cond_head", rng)?;
        Ok(Self {
            resolution,
            store,
            down,
            uncond_head,
            text_proj,
            joint,
            cond_head,
            condition_dim: config.condition_dim,
        })
    }

    /// Shared 4x4 feature map.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "discriminator for the {r}x{r} stage got an image of shape {:?}",
                image.dims(),
                r = self.resolution
            )));
        }
        let mut x = image.clone();
        for conv in &self.down {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        Ok(x)
    }

    pub fn uncond_logit(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.uncond_head.forward(features)?.flatten_all()?)
    }

    pub fn cond_logit(&self, features: &Tensor, sentence: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = features.dims4()?;
        let c = leaky_relu(&self.text_proj.forward(sentence)?, 0.2)?;
        let tiled = c
            .reshape((b, self.condition_dim, 1, 1))?
            .broadcast_as((b, self.condition_dim, h, w))?
            .contiguous()?;
        let x = leaky_relu(&self.joint.forward(&Tensor::cat(&[features, &tiled], 1)?)?, 0.2)?;
        Ok(self.cond_head.forward(&x)?.flatten_all()?)
    }

    pub fn discriminate(&self, image: &Tensor, sentence: Option<&Tensor>) -> Result<DiscriminatorOutput> {
        let f = self.features(image)?;
        Ok(DiscriminatorOutput {
            uncond_logit: self.uncond_logit(&f)?,
            cond_logit: sentence.map(|s| self.cond_logit(&f, s)).transpose()?,
        })
    }
}

/// The per-stage discriminators, each with its own parameter store.
pub struct Discriminators {
    pub stages: Vec<StageDiscriminator>,
}

impl Discriminators {
    pub fn new(
        config: &DiscriminatorConfig,
        resolutions: &[usize],
        text_dim: usize,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            stages: resolutions
                .iter()
                .map(|&r| StageDiscriminator::new(config, r, text_dim, dtype, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}
