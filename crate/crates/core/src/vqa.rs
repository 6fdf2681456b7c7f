//! Stacked-attention VQA model used as a critic for images generated from
//! QA texts: a convolutional image tower, a recurrent question encoder,
//! attention glimpses over image regions and an answer classifier.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{QARecord, TextBatch};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, log_softmax_last, softmax_last, CellKind, Conv2d, Embedding, Linear, ParamStore, RecurrentCell};

/// Fixed answer classes: the most frequent training answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for AnswerVocabulary {
    fn from(answers: Vec<String>) -> Self {
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i as u32))
            .collect();
        Self { answers, index }
    }
}

impl From<AnswerVocabulary> for Vec<String> {
    fn from(v: AnswerVocabulary) -> Self {
        v.answers
    }
}

impl AnswerVocabulary {
    /// Top-`limit` answers by annotation count (ties lexicographic); `None`
    /// keeps every distinct answer.
    pub fn build(records: &[&QARecord], limit: Option<usize>) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            for a in &r.answers {
                *counts.entry(a.as_str()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("no training answers".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(n) = limit {
            ranked.truncate(n);
        }
        Ok(ranked.into_iter().map(|(a, _)| a.to_string()).collect::<Vec<_>>().into())
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<u32> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, id: u32) -> Option<&str> {
        self.answers.get(id as usize).map(String::as_str)
    }

    /// In-vocabulary ids of the annotations (duplicates kept).
    pub fn ids(&self, answers: &[String]) -> Vec<u32> {
        answers.iter().filter_map(|a| self.id(a)).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.answers {
            h.update(a.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqaConfig {
    pub image_channels: usize,
    pub feature_dim: usize,
    pub question_embedding_dim: usize,
    pub attention_dim: usize,
    pub glimpses: usize,
    /// 0: every distinct training answer.
    pub max_answers: usize,
    pub resolution: usize,
    pub zero_init_classifier: bool,
    /// Filled from data.
    pub vocab_size: usize,
    pub n_answers: usize,
    /// Scene classes for the image-statistics head (0 disables it).
    pub n_classes: usize,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VqaConfig {
    pub fn desk() -> Self {
        Self {
            image_channels: 32,
            feature_dim: 64,
            question_embedding_dim: 32,
            attention_dim: 32,
            glimpses: 2,
            max_answers: 0,
            resolution: 64,
            zero_init_classifier: false,
            vocab_size: 0,
            n_answers: 0,
            n_classes: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            image_channels: 256,
            feature_dim: 1024,
            question_embedding_dim: 300,
            attention_dim: 512,
            glimpses: 2,
            max_answers: 3000,
            ..Self::desk()
        }
    }
}

#[derive(Debug, Clone)]
pub struct VqaOutput {
    /// (B, N)
    pub logits: Tensor,
    /// (B, N) answer distribution.
    pub probs: Tensor,
    pub log_probs: Tensor,
    /// Per glimpse, (B, R) spatial weights.
    pub attention: Vec<Tensor>,
}

impl VqaOutput {
    pub fn argmax(&self) -> Result<Vec<u32>> {
        Ok(self.logits.argmax(D::Minus1)?.to_vec1::<u32>()?)
    }
}

struct Glimpse {
    image: Linear,
    question: Linear,
    score: Linear,
}

pub struct VqaModel {
    pub config: VqaConfig,
    pub store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    embedding: Embedding,
    question_cell: RecurrentCell,
    glimpses: Vec<Glimpse>,
    classifier: Linear,
    class_head: Option<Linear>,
}

impl VqaModel {
    pub fn new(config: &VqaConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.vocab_size == 0 || config.n_answers == 0 {
            return Err(Error::Config("vqa model needs vocab_size and n_answers".into()));
        }
        if config.resolution < 16 || config.resolution % 16 != 0 {
            return Err(Error::Config("vqa.resolution must be a multiple of 16".into()));
        }
        let mut store = ParamStore::new(dtype);
        let s = &mut store;
        let k = config.resolution / 16;
        let d = config.feature_dim;
        let conv1 = Conv2d::new(s, "tower.conv1", 3, config.image_channels, k, k, 0, rng)?;
        let conv2 = Conv2d::new(s, "tower.conv2", config.image_channels, d, 2, 2, 0, rng)?;
        let embedding = Embedding::new(s, "q.embed", config.vocab_size, config.question_embedding_dim, rng)?;
        let question_cell = RecurrentCell::new(s, "q.lstm", CellKind::Lstm, config.question_embedding_dim, d, rng)?;
        let glimpses = (0..config.glimpses)
            .map(|g| {
                Ok(Glimpse {
                    image: Linear::no_bias(s, &format!("att{g}.image"), d, config.attention_dim, rng)?,
                    question: Linear::new(s, &format!("att{g}.question"), d, config.attention_dim, rng)?,
                    score: Linear::new(s, &format!("att{g}.score"), config.attention_dim, 1, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = if config.zero_init_classifier {
            Linear::zeros(s, "classifier", d, config.n_answers, rng)?
        } else {
            Linear::new(s, "classifier", d, config.n_answers, rng)?
        };
        let class_head = (config.n_classes > 0)
            .then(|| Linear::new(s, "class_head", d, config.n_classes, rng))
            .transpose()?;
        Ok(Self {
            config: config.clone(),
            store,
            conv1,
            conv2,
            embedding,
            question_cell,
            glimpses,
            classifier,
            class_head,
        })
    }

    /// Region features (B, d, R).
    pub fn image_regions(&self, image: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = image.dims4()?;
        let r = self.config.resolution;
        if h != r || w != r {
            return Err(Error::Shape(format!("vqa model expects {r}x{r} images, got {h}x{w}")));
        }
        let x = leaky_relu(&self.conv1.forward(image)?, 0.1)?;
        let x = leaky_relu(&self.conv2.forward(&x)?, 0.1)?;
        let (_, d, rh, rw) = x.dims4()?;
        Ok(x.reshape((b, d, rh * rw))?)
    }

    /// Mean-pooled image features (B, d), used as the statistics embedding.
    pub fn pooled_features(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.image_regions(image)?.mean(D::Minus1)?)
    }

    /// Scene-class distribution (B, C) from pooled features.
    pub fn class_probs(&self, image: &Tensor) -> Result<Tensor> {
        let head = self
            .class_head
            .as_ref()
            .ok_or_else(|| Error::Config("vqa model has no class head".into()))?;
        softmax_last(&head.forward(&self.pooled_features(image)?)?)
    }

    pub fn class_logits(&self, image: &Tensor) -> Result<Tensor> {
        let head = self
            .class_head
            .as_ref()
            .ok_or_else(|| Error::Config("vqa model has no class head".into()))?;
        head.forward(&self.pooled_features(image)?)
    }

    pub fn encode_question(&self, questions: &TextBatch) -> Result<Tensor> {
        if questions.is_empty() || questions.lengths.contains(&0) {
            return Err(Error::InvalidInput("empty question".into()));
        }
        let (ids, mask) = questions.tensors(self.store.dtype())?;
        if let Some(bad) = questions.ids.iter().flatten().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("question token id {bad} out of range")));
        }
        let x = self.embedding.forward(&ids)?;
        let (_, h) = self.question_cell.run(&x, &mask, false)?;
        Ok(h)
    }

    pub fn answer_probs(&self, image: &Tensor, questions: &TextBatch) -> Result<VqaOutput> {
        let v = self.image_regions(image)?; // (B, d, R)
        if v.dim(0)? != questions.len() {
            return Err(Error::Shape("image and question batch sizes differ".into()));
        }
        let vt = v.transpose(1, 2)?.contiguous()?; // (B, R, d)
        let mut u = self.encode_question(questions)?; // (B, d)
        let mut attention = Vec::with_capacity(self.glimpses.len());
        for g in &self.glimpses {
            let hi = g.image.forward(&vt)?; // (B, R, a)
            let hq = g.question.forward(&u)?.unsqueeze(1)?; // (B, 1, a)
            let h = hi.broadcast_add(&hq)?.tanh()?;
            let p = softmax_last(&g.score.forward(&h)?.squeeze(D::Minus1)?)?; // (B, R)
            let attended = v.matmul(&p.unsqueeze(D::Minus1)?)?.squeeze(D::Minus1)?; // (B, d)
            u = (u + attended)?;
            attention.push(p);
        }
        let logits = self.classifier.forward(&u)?;
        let log_probs = log_softmax_last(&logits)?;
        Ok(VqaOutput {
            probs: log_probs.exp()?,
            log_probs,
            logits,
            attention,
        })
    }
}

/// Negative log-likelihood averaged over the K in-vocabulary annotations of
/// one sample: `(1/K) * sum_k -ln P(a_k)`. `None` when no annotation is in
/// the answer vocabulary.
pub fn vqa_loss_single(probs: &[f64], answer_ids: &[u32]) -> Option<f64> {
    if answer_ids.is_empty() {
        return None;
    }
    let s: f64 = answer_ids.iter().map(|&a| -probs[a as usize].ln()).sum();
    Some(s / answer_ids.len() as f64)
}

/// Batched loss from log-probabilities (B, N). Samples with no in-vocabulary
/// annotation are skipped and counted; the loss is the mean over the rest
/// (`None` if every sample was skipped).
pub fn vqa_loss(log_probs: &Tensor, answer_ids: &[Vec<u32>]) -> Result<(Option<Tensor>, usize)> {
    let (b, n) = log_probs.dims2()?;
    if answer_ids.len() != b {
        return Err(Error::Shape("answer lists do not match batch".into()));
    }
    let mut weights = vec![0f64; b * n];
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for (i, ids) in answer_ids.iter().enumerate() {
        if ids.is_empty() {
            skipped += 1;
            continue;
        }
        kept += 1;
        for &a in ids {
            weights[i * n + a as usize] += 1.0 / ids.len() as f64;
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} VQA samples skipped: no annotation in the answer vocabulary");
    }
    if kept == 0 {
        return Ok((None, skipped));
    }
    let w = Tensor::from_vec(weights, (b, n), log_probs.device())?.to_dtype(log_probs.dtype())?;
    let loss = ((log_probs * w)?.sum_all()? / kept as f64)?.neg()?;
    Ok((Some(loss), skipped))
}

/// Consensus accuracy `min(#annotators agreeing / 3, 1)` and the looser
/// "prediction among the annotations" rate, both averaged over samples.
pub fn vqa_accuracy(predictions: &[String], records: &[&QARecord]) -> Result<(f64, f64)> {
    if predictions.len() != records.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut consensus = 0.0;
    let mut any = 0.0;
    for (p, r) in predictions.iter().zip(records) {
        let agree = r.answers.iter().filter(|a| *a == p).count();
        consensus += (agree as f64 / 3.0).min(1.0);
        if agree > 0 {
            any += 1.0;
        }
    }
    let n = records.len() as f64;
    Ok((consensus / n, any / n))
}
