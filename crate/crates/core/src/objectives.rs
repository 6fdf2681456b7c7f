//! Generator and discriminator objectives, assembled from discriminator
//! logits, matching losses and the VQA loss under a training variant.
//!
//! All adversarial terms use the stable forms `-ln D = softplus(-l)` and
//! `-ln(1 - D) = softplus(l)`. Per-stage terms are averaged over stages;
//! caption and QA batches contribute separate batch means that are summed.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::discriminators::DiscriminatorOutput;
use crate::error::{Error, Result};
use crate::nn::{scalar, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    NaiveEndToEnd,
    NaivePretrained,
    Adapted,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::NaiveEndToEnd,
        Variant::NaivePretrained,
        Variant::Adapted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NaiveEndToEnd => "naive_end_to_end",
            Variant::NaivePretrained => "naive_pretrained",
            Variant::Adapted => "adapted",
        }
    }

    pub fn spec(self) -> VariantSpec {
        VariantSpec::from(self)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected baseline, naive_end_to_end, naive_pretrained or adapted)"
                ))
            })
    }
}

/// What a variant routes where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: Variant,
    /// QA-generated images go through the discriminators (both losses).
    pub discriminator_sees_qa: bool,
    pub vqa_model_trainable: bool,
    pub vqa_loss_enabled: bool,
    /// Matching loss between QA-generated images and their QA texts.
    pub damsm_on_qa: bool,
}

impl From<Variant> for VariantSpec {
    fn from(v: Variant) -> Self {
        let (sees, trainable, vqa, damsm) = match v {
            Variant::Baseline => (false, false, false, false),
            Variant::NaiveEndToEnd => (false, true, true, false),
            Variant::NaivePretrained => (false, false, true, false),
            Variant::Adapted => (true, false, true, true),
        };
        Self {
            name: v,
            discriminator_sees_qa: sees,
            vqa_model_trainable: trainable,
            vqa_loss_enabled: vqa,
            damsm_on_qa: damsm,
        }
    }
}

impl VariantSpec {
    /// Whether the generator is run on QA texts at all.
    pub fn uses_qa(&self) -> bool {
        self.discriminator_sees_qa || self.vqa_loss_enabled || self.damsm_on_qa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_damsm: f64,
    pub lambda_vqa: f64,
    /// Conditioning-augmentation KL; 0 disables it.
    pub kl_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_damsm: 5.0,
            lambda_vqa: 1.0,
            kl_weight: 1.0,
        }
    }
}

impl LossWeights {
    /// Plain unweighted sum, no KL.
    pub fn strict() -> Self {
        Self {
            lambda_damsm: 1.0,
            lambda_vqa: 1.0,
            kl_weight: 0.0,
        }
    }
}

/// Unweighted loss components of one step; disabled terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_uncond_caption: f64,
    pub adv_uncond_qa: f64,
    pub adv_cond_caption: f64,
    pub adv_cond_qa: f64,
    pub damsm_caption: f64,
    pub damsm_qa: f64,
    pub vqa: f64,
    pub kl: f64,
    pub total_g: f64,
    pub d_real_uncond: f64,
    pub d_fake_uncond_caption: f64,
    pub d_fake_uncond_qa: f64,
    pub d_real_cond: f64,
    pub d_fake_cond_caption: f64,
    pub d_fake_cond_qa: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn adversarial_g(&self) -> f64 {
        self.adv_uncond_caption + self.adv_uncond_qa + self.adv_cond_caption + self.adv_cond_qa
    }

    /// `total_g` recomputed from the components.
    pub fn recompose_g(&self, w: &LossWeights) -> f64 {
        self.adversarial_g()
            + w.lambda_damsm * (self.damsm_caption + self.damsm_qa)
            + w.lambda_vqa * self.vqa
            + w.kl_weight * self.kl
    }

    pub fn recompose_d(&self) -> f64 {
        self.d_real_uncond
            + self.d_fake_uncond_caption
            + self.d_fake_uncond_qa
            + self.d_real_cond
            + self.d_fake_cond_caption
            + self.d_fake_cond_qa
    }

    /// Generator fields from `g`, discriminator fields from `self`.
    pub fn with_generator(mut self, g: &LossReport) -> Self {
        self.adv_uncond_caption = g.adv_uncond_caption;
        self.adv_uncond_qa = g.adv_uncond_qa;
        self.adv_cond_caption = g.adv_cond_caption;
        self.adv_cond_qa = g.adv_cond_qa;
        self.damsm_caption = g.damsm_caption;
        self.damsm_qa = g.damsm_qa;
        self.vqa = g.vqa;
        self.kl = g.kl;
        self.total_g = g.total_g;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total_g,
            self.total_d,
            self.damsm_caption,
            self.damsm_qa,
            self.vqa,
            self.kl,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Inputs to the generator objective. Stage outputs are for generated
/// images; `cond_logit` must be present wherever a conditional term applies.
pub struct GeneratorTerms<'a> {
    pub caption: &'a [DiscriminatorOutput],
    /// Outputs for QA-generated images (needed when the discriminator sees QA).
    pub qa: Option<&'a [DiscriminatorOutput]>,
    pub damsm_caption: Option<&'a Tensor>,
    pub damsm_qa: Option<&'a Tensor>,
    pub vqa: Option<&'a Tensor>,
    pub kl: Option<&'a Tensor>,
    /// Number of QA samples in this step; 0 drops every QA term.
    pub qa_batch: usize,
}

pub struct DiscriminatorTerms<'a> {
    /// Real images; `cond_logit` against their captions.
    pub real: &'a [DiscriminatorOutput],
    pub fake_caption: &'a [DiscriminatorOutput],
    pub fake_qa: Option<&'a [DiscriminatorOutput]>,
    pub qa_batch: usize,
}

fn missing(what: &str, variant: Variant) -> Error {
    Error::InvalidInput(format!("{what} required by variant {variant} is missing"))
}

/// Stage-averaged batch mean of `softplus(sign * logit)`.
fn stage_mean(outputs: &[DiscriminatorOutput], cond: bool, sign: f64) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::InvalidInput("no discriminator stages".into()));
    }
    let mut acc: Option<Tensor> = None;
    for o in outputs {
        let l = if cond {
            o.cond_logit
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("conditional logit missing".into()))?
        } else {
            &o.uncond_logit
        };
        let term = softplus(&(l * sign)?)?.mean_all()?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok((acc.unwrap() / outputs.len() as f64)?)
}

fn add(total: Tensor, term: &Tensor, w: f64) -> Result<Tensor> {
    Ok(if w == 1.0 { (total + term)? } else { (total + (term * w)?)? })
}

/// Generator objective: returns the differentiable total and the report
/// (generator fields only).
pub fn generator_loss(
    terms: &GeneratorTerms,
    variant: &VariantSpec,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let v = variant.name;
    let mut r = LossReport::default();
    let uc = stage_mean(terms.caption, false, -1.0)?;
    let cc = stage_mean(terms.caption, true, -1.0)?;
    r.adv_uncond_caption = scalar(&uc)?;
    r.adv_cond_caption = scalar(&cc)?;
    let mut total = (uc + cc)?;

    let dc = terms.damsm_caption.ok_or_else(|| missing("caption matching loss", v))?;
    r.damsm_caption = scalar(dc)?;
    total = add(total, dc, weights.lambda_damsm)?;

    if weights.kl_weight != 0.0 {
        let kl = terms.kl.ok_or_else(|| missing("conditioning KL", v))?;
        r.kl = scalar(kl)?;
        total = add(total, kl, weights.kl_weight)?;
    }

    if terms.qa_batch > 0 {
        if variant.discriminator_sees_qa {
            let qa = terms.qa.ok_or_else(|| missing("QA discriminator outputs", v))?;
            let uq = stage_mean(qa, false, -1.0)?;
            let cq = stage_mean(qa, true, -1.0)?;
            r.adv_uncond_qa = scalar(&uq)?;
            r.adv_cond_qa = scalar(&cq)?;
            total = ((total + uq)? + cq)?;
        }
        if variant.damsm_on_qa {
            let dq = terms.damsm_qa.ok_or_else(|| missing("QA matching loss", v))?;
            r.damsm_qa = scalar(dq)?;
            total = add(total, dq, weights.lambda_damsm)?;
        }
        if variant.vqa_loss_enabled {
            // an all-skipped VQA batch contributes nothing
            if let Some(q) = terms.vqa {
                r.vqa = scalar(q)?;
                total = add(total, q, weights.lambda_vqa)?;
            }
        }
    }
    r.total_g = scalar(&total)?;
    Ok((total, r))
}

/// Discriminator objective over all stages (discriminator fields only).
pub fn discriminator_loss(terms: &DiscriminatorTerms, variant: &VariantSpec) -> Result<(Tensor, LossReport)> {
    let mut r = LossReport::default();
    let ru = stage_mean(terms.real, false, -1.0)?;
    let rc = stage_mean(terms.real, true, -1.0)?;
    let fu = stage_mean(terms.fake_caption, false, 1.0)?;
    let fc = stage_mean(terms.fake_caption, true, 1.0)?;
    r.d_real_uncond = scalar(&ru)?;
    r.d_real_cond = scalar(&rc)?;
    r.d_fake_uncond_caption = scalar(&fu)?;
    r.d_fake_cond_caption = scalar(&fc)?;
    let mut total = (((ru + rc)? + fu)? + fc)?;
    if variant.discriminator_sees_qa && terms.qa_batch > 0 {
        let qa = terms
            .fake_qa
            .ok_or_else(|| missing("QA discriminator outputs", variant.name))?;
        let qu = stage_mean(qa, false, 1.0)?;
        let qc = stage_mean(qa, true, 1.0)?;
        r.d_fake_uncond_qa = scalar(&qu)?;
        r.d_fake_cond_qa = scalar(&qc)?;
        total = ((total + qu)? + qc)?;
    }
    r.total_d = scalar(&total)?;
    Ok((total, r))
}

/// Fraction of correct unconditional real/fake decisions at threshold 0.
pub fn discriminator_accuracy(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for o in real {
        let l = o.uncond_logit.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        correct += l.iter().filter(|x| **x > 0.0).count();
        total += l.len();
    }
    for o in fake {
        let l = o.uncond_logit.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        correct += l.iter().filter(|x| **x < 0.0).count();
        total += l.len();
    }
    if total == 0 {
        return Err(Error::InvalidInput("no discriminator outputs".into()));
    }
    Ok(correct as f64 / total as f64)
}
