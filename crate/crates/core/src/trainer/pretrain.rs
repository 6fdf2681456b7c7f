use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::damsm::{damsm_loss, DamsmConfig, ImageEncoder};
use crate::data::{make_batches, BatchConfig, Dataset, Scene, Split, TextBatch};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, scalar, Adam, AdamConfig};
use crate::seed;
use crate::text_encoder::{TextEncoder, TextEncoderConfig};
use crate::vqa::{vqa_accuracy, vqa_loss, AnswerVocabulary, VqaConfig, VqaModel};

const DT: DType = DType::F32;

fn adam(cfg: &Config, vars: Vec<(String, candle_core::Var)>) -> Result<Adam> {
    Adam::new(
        vars,
        AdamConfig {
            lr: cfg.pretrain.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    )
}

fn prefixed(prefix: &str, store: &crate::nn::ParamStore) -> Vec<(String, candle_core::Var)> {
    store
        .vars()
        .into_iter()
        .map(|(n, v)| (format!("{prefix}/{n}"), v))
        .collect()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

/// Pretrained text encoder and region image encoder.
pub struct DamsmModels {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl DamsmModels {
    pub fn new(cfg: &Config, vocab_size: usize) -> Result<Self> {
        let tcfg = TextEncoderConfig {
            vocab_size,
            ..cfg.text.clone()
        };
        Ok(Self {
            text: TextEncoder::new(&tcfg, DT, &mut seed::rng(cfg.seed, "init-text", &[]))?,
            image: ImageEncoder::new(&cfg.damsm, DT, &mut seed::rng(cfg.seed, "init-image-encoder", &[]))?,
        })
    }

    pub fn save(&self, path: &Path, vocab_hash: &str, extra: serde_json::Value) -> Result<()> {
        let mut c = Checkpoint::new(
            "damsm",
            Some(vocab_hash.to_string()),
            json!({ "text": self.text.config, "damsm": self.image.config, "run": extra }),
        );
        c.insert_section("text", self.text.store.tensors());
        c.insert_section("image", self.image.store.tensors());
        ensure_parent(path)?;
        c.save(path)
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                what: "DAMSM",
                path: path.to_path_buf(),
                command: "pretrain-damsm",
            });
        }
        let c = Checkpoint::load(path)?;
        c.expect_kind("damsm")?;
        c.check_vocab(vocab_hash)?;
        let tcfg: TextEncoderConfig = serde_json::from_value(c.meta["text"].clone())?;
        let dcfg: DamsmConfig = serde_json::from_value(c.meta["damsm"].clone())?;
        let mut rng = seed::rng(0, "load", &[]);
        let text = TextEncoder::new(&tcfg, DT, &mut rng)?;
        let image = ImageEncoder::new(&dcfg, DT, &mut rng)?;
        text.store.load(&c.section("text"))?;
        image.store.load(&c.section("image"))?;
        Ok(Self { text, image })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamsmPretrainReport {
    pub initial_heldout: f64,
    /// Held-out loss after each epoch.
    pub heldout: Vec<f64>,
    /// Mean training loss of each epoch.
    pub train: Vec<f64>,
}

/// Texts (captions, optionally QA texts) of every image.
fn texts_by_image(ds: &Dataset, with_qa: bool) -> Result<Vec<Vec<&[u32]>>> {
    let mut out = vec![Vec::new(); ds.images.len()];
    for c in &ds.captions {
        out[ds.image_of(&c.image_id)?].push(c.token_ids.as_slice());
    }
    if with_qa {
        for q in &ds.qa {
            out[ds.image_of(&q.image_id)?].push(q.qa_token_ids.as_slice());
        }
    }
    Ok(out)
}

/// Fixed chunks of at least two items.
fn chunks(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut c: Vec<Vec<usize>> = items.chunks(size).map(<[usize]>::to_vec).collect();
    if c.len() > 1 && c.last().is_some_and(|l| l.len() == 1) {
        let l = c.pop().expect("non-empty");
        c.last_mut().expect("non-empty").extend(l);
    }
    c.retain(|c| c.len() >= 2);
    c
}

fn damsm_batch_loss(m: &DamsmModels, ds: &Dataset, cfg: &Config, images: &[usize], texts: &[&[u32]], dropout: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Tensor> {
    let batch = TextBatch::from_sequences(texts)?;
    let feats = match dropout {
        Some(rng) => m.text.encode_train(&batch, rng)?,
        None => m.text.encode(&batch)?,
    };
    let regions = m.image.encode(&ds.image_batch(images, DT)?)?;
    Ok(damsm_loss(&regions, &feats, &cfg.damsm.gammas)?.total)
}

fn damsm_heldout(m: &DamsmModels, ds: &Dataset, cfg: &Config, texts: &[Vec<&[u32]>]) -> Result<f64> {
    let test = ds.image_indices(Split::Test);
    let batches = chunks(&test, cfg.pretrain.batch_size);
    if batches.is_empty() {
        return Err(Error::Data("held-out split needs at least two images".into()));
    }
    let rounds = test.iter().map(|&i| texts[i].len()).max().unwrap_or(1).min(5);
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..rounds {
        for b in &batches {
            let t: Vec<&[u32]> = b.iter().map(|&i| texts[i][k % texts[i].len()]).collect();
            sum += scalar(&damsm_batch_loss(m, ds, cfg, b, &t, None)?)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Trains the text and image encoders on the matching loss. One text per
/// image per epoch, so a batch never holds two texts of the same image.
/// A checkpoint is written after initialization and after every epoch.
pub fn pretrain_damsm(cfg: &Config, ds: &Dataset, out: &Path) -> Result<DamsmPretrainReport> {
    let m = DamsmModels::new(cfg, ds.vocab.len())?;
    let texts = texts_by_image(ds, cfg.pretrain.pretrain_with_qa)?;
    let train = ds.image_indices(Split::Train);
    let initial = damsm_heldout(&m, ds, cfg, &texts)?;
    log::info!("damsm: initial held-out loss {initial:.4}");
    m.save(out, &ds.meta.vocab_hash, json!({ "epoch": 0, "heldout": initial }))?;
    let mut opt = adam(cfg, [prefixed("text", &m.text.store), prefixed("image", &m.image.store)].concat())?;
    let bs = cfg.pretrain.batch_size.min(train.len());
    let batch_seed = seed::derive(cfg.seed, "pretrain-damsm", &[]);
    let mut report = DamsmPretrainReport {
        initial_heldout: initial,
        heldout: Vec::new(),
        train: Vec::new(),
    };
    for epoch in 1..=cfg.pretrain.damsm_epochs {
        let plan = make_batches(&vec![1; train.len()], &[], BatchConfig { batch_size: bs, qa_ratio: 0.0 }, batch_seed, epoch)?;
        let mut pick = seed::rng(cfg.seed, "damsm-text", &[epoch as u64]);
        let mut sum = 0.0;
        for (step, b) in plan.iter().enumerate() {
            let imgs: Vec<usize> = b.captions.iter().map(|&k| train[k]).collect();
            let t: Vec<&[u32]> = imgs
                .iter()
                .map(|&i| {
                    use rand::Rng;
                    texts[i][pick.random_range(0..texts[i].len())]
                })
                .collect();
            let mut drop = seed::rng(cfg.seed, "damsm-dropout", &[epoch as u64, step as u64]);
            let loss = damsm_batch_loss(&m, ds, cfg, &imgs, &t, Some(&mut drop))?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { name: "damsm".into(), epoch, step });
            }
            sum += v;
            opt.step(&loss.backward()?)?;
        }
        let held = damsm_heldout(&m, ds, cfg, &texts)?;
        log::info!("damsm: epoch {epoch} train {:.4} held-out {held:.4}", sum / plan.len() as f64);
        report.train.push(sum / plan.len() as f64);
        report.heldout.push(held);
        m.save(out, &ds.meta.vocab_hash, json!({ "epoch": epoch, "heldout": held }))?;
    }
    Ok(report)
}

/// Scene class used by the image-statistics head: color and kind of the
/// first shape.
pub fn scene_label(scene: &Scene) -> Option<String> {
    scene.shapes.first().map(|s| format!("{} {}", s.color, s.kind.name()))
}

/// Pretrained VQA critic with its answer classes.
pub struct VqaBundle {
    pub model: VqaModel,
    pub answers: AnswerVocabulary,
    pub class_labels: Vec<String>,
}

impl VqaBundle {
    pub fn save(&self, path: &Path, vocab_hash: &str, extra: serde_json::Value) -> Result<()> {
        let mut c = Checkpoint::new(
            "vqa",
            Some(vocab_hash.to_string()),
            json!({
                "vqa": self.model.config,
                "answers": self.answers,
                "answers_hash": self.answers.hash(),
                "class_labels": self.class_labels,
                "run": extra,
            }),
        );
        c.insert_section("vqa", self.model.store.tensors());
        ensure_parent(path)?;
        c.save(path)
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                what: "VQA",
                path: path.to_path_buf(),
                command: "pretrain-vqa",
            });
        }
        let c = Checkpoint::load(path)?;
        c.expect_kind("vqa")?;
        c.check_vocab(vocab_hash)?;
        let vcfg: VqaConfig = serde_json::from_value(c.meta["vqa"].clone())?;
        let answers: AnswerVocabulary = serde_json::from_value(c.meta["answers"].clone())?;
        let class_labels: Vec<String> = serde_json::from_value(c.meta["class_labels"].clone())?;
        let model = VqaModel::new(&vcfg, DT, &mut seed::rng(0, "load", &[]))?;
        model.store.load(&c.section("vqa"))?;
        Ok(Self {
            model,
            answers,
            class_labels,
        })
    }

    fn class_ids(&self, ds: &Dataset, images: &[usize]) -> Option<Vec<usize>> {
        images
            .iter()
            .map(|&i| {
                let label = scene_label(ds.scenes.get(&ds.images[i].image_id)?)?;
                self.class_labels.iter().position(|l| *l == label)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaPretrainReport {
    pub initial_val_loss: f64,
    pub val_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
    /// Top-1 prediction equals the majority answer.
    pub val_accuracy: f64,
    pub val_consensus: f64,
    pub val_top1_any: f64,
    pub chance: f64,
    pub n_answers: usize,
    pub class_accuracy: Option<f64>,
}

struct VqaEval {
    loss: f64,
    accuracy: f64,
    consensus: f64,
    top1_any: f64,
    class_accuracy: Option<f64>,
}

fn vqa_step_loss(b: &VqaBundle, ds: &Dataset, idx: &[usize]) -> Result<(Option<Tensor>, crate::vqa::VqaOutput, Option<(Tensor, Vec<usize>)>)> {
    let imgs = ds.qa_images(idx)?;
    let images = ds.image_batch(&imgs, DT)?;
    let out = b.model.answer_probs(&images, &ds.question_batch(idx)?)?;
    let ids: Vec<Vec<u32>> = idx.iter().map(|&i| b.answers.ids(&ds.qa[i].answers)).collect();
    let (loss, _) = vqa_loss(&out.log_probs, &ids)?;
    let class = match (b.class_labels.is_empty(), b.class_ids(ds, &imgs)) {
        (false, Some(labels)) => {
            let lp = log_softmax_last(&b.model.class_logits(&images)?)?;
            let n = labels.len();
            let c = b.class_labels.len();
            let mut onehot = vec![0f32; n * c];
            for (r, &l) in labels.iter().enumerate() {
                onehot[r * c + l] = 1.0;
            }
            let oh = Tensor::from_vec(onehot, (n, c), lp.device())?;
            let ce = ((lp * oh)?.sum_all()? / n as f64)?.neg()?;
            Some((ce, labels))
        }
        _ => None,
    };
    Ok((loss, out, class))
}

fn vqa_eval(b: &VqaBundle, ds: &Dataset, bs: usize) -> Result<VqaEval> {
    let test = ds.qa_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("no held-out QA records".into()));
    }
    let mut loss = 0.0;
    let mut n_loss = 0usize;
    let mut preds = Vec::new();
    let mut hits = 0usize;
    let mut class_hits = 0usize;
    let mut class_n = 0usize;
    for chunk in test.chunks(bs) {
        let (l, out, class) = vqa_step_loss(b, ds, chunk)?;
        if let Some(l) = l {
            loss += scalar(&l)? * chunk.len() as f64;
            n_loss += chunk.len();
        }
        for (k, id) in out.argmax()?.into_iter().enumerate() {
            let a = b.answers.answer(id).unwrap_or_default();
            if a == ds.qa[chunk[k]].majority_answer {
                hits += 1;
            }
            preds.push(a.to_string());
        }
        if let Some((_, labels)) = class {
            let imgs = ds.qa_images(chunk)?;
            let got = b.model.class_logits(&ds.image_batch(&imgs, DT)?)?.argmax(1)?.to_vec1::<u32>()?;
            class_hits += got.iter().zip(&labels).filter(|(g, l)| **g as usize == **l).count();
            class_n += labels.len();
        }
    }
    let recs: Vec<_> = test.iter().map(|&i| &ds.qa[i]).collect();
    let (consensus, top1_any) = vqa_accuracy(&preds, &recs)?;
    Ok(VqaEval {
        loss: loss / n_loss.max(1) as f64,
        accuracy: hits as f64 / test.len() as f64,
        consensus,
        top1_any,
        class_accuracy: (class_n > 0).then(|| class_hits as f64 / class_n as f64),
    })
}

/// Trains the VQA model (and, on synthetic data, the scene-class head) on
/// the training QA records; validation is the held-out split.
pub fn pretrain_vqa(cfg: &Config, ds: &Dataset, out: &Path) -> Result<VqaPretrainReport> {
    let train = ds.qa_indices(Split::Train);
    let train_recs: Vec<_> = train.iter().map(|&i| &ds.qa[i]).collect();
    let limit = (cfg.vqa.max_answers > 0).then_some(cfg.vqa.max_answers);
    let answers = AnswerVocabulary::build(&train_recs, limit)?;
    let class_labels: Vec<String> = if cfg.pretrain.class_head {
        ds.image_indices(Split::Train)
            .iter()
            .filter_map(|&i| ds.scenes.get(&ds.images[i].image_id).and_then(scene_label))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        Vec::new()
    };
    let vcfg = VqaConfig {
        vocab_size: ds.vocab.len(),
        n_answers: answers.len(),
        n_classes: class_labels.len(),
        ..cfg.vqa.clone()
    };
    let bundle = VqaBundle {
        model: VqaModel::new(&vcfg, DT, &mut seed::rng(cfg.seed, "init-vqa", &[]))?,
        answers,
        class_labels,
    };
    let bs = cfg.pretrain.batch_size.min(train.len());
    let initial = vqa_eval(&bundle, ds, bs)?;
    log::info!("vqa: initial val loss {:.4} accuracy {:.3}", initial.loss, initial.accuracy);
    bundle.save(out, &ds.meta.vocab_hash, json!({ "epoch": 0 }))?;
    let mut opt = adam(cfg, bundle.model.store.vars())?;
    let lengths: Vec<usize> = train.iter().map(|&i| ds.qa[i].question_token_ids.len()).collect();
    let batch_seed = seed::derive(cfg.seed, "pretrain-vqa", &[]);
    let mut report = VqaPretrainReport {
        initial_val_loss: initial.loss,
        val_loss: Vec::new(),
        train_loss: Vec::new(),
        val_accuracy: initial.accuracy,
        val_consensus: initial.consensus,
        val_top1_any: initial.top1_any,
        chance: 1.0 / bundle.answers.len() as f64,
        n_answers: bundle.answers.len(),
        class_accuracy: initial.class_accuracy,
    };
    for epoch in 1..=cfg.pretrain.vqa_epochs {
        let plan = make_batches(&lengths, &[], BatchConfig { batch_size: bs, qa_ratio: 0.0 }, batch_seed, epoch)?;
        let mut sum = 0.0;
        for (step, b) in plan.iter().enumerate() {
            let idx: Vec<usize> = b.captions.iter().map(|&k| train[k]).collect();
            let (loss, _, class) = vqa_step_loss(&bundle, ds, &idx)?;
            let Some(mut total) = loss else { continue };
            if let Some((ce, _)) = class {
                total = (total + ce)?;
            }
            let v = scalar(&total)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { name: "vqa".into(), epoch, step });
            }
            sum += v;
            opt.step(&total.backward()?)?;
        }
        let e = vqa_eval(&bundle, ds, bs)?;
        log::info!("vqa: epoch {epoch} train {:.4} val {:.4} accuracy {:.3}", sum / plan.len() as f64, e.loss, e.accuracy);
        report.train_loss.push(sum / plan.len() as f64);
        report.val_loss.push(e.loss);
        report.val_accuracy = e.accuracy;
        report.val_consensus = e.consensus;
        report.val_top1_any = e.top1_any;
        report.class_accuracy = e.class_accuracy;
        bundle.save(out, &ds.meta.vocab_hash, json!({ "epoch": epoch, "val_accuracy": e.accuracy }))?;
    }
    Ok(report)
}
