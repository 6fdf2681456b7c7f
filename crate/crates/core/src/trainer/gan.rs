use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::pretrain::{DamsmModels, VqaBundle};
use super::{read_checkpoint_series, CheckpointMeta, RunPaths, CHECKPOINTS_FILE, METRICS_FILE};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, StagesInLoss};
use crate::damsm::{damsm_loss, Gammas, ImageEncoder};
use crate::data::manifest::{read_jsonl, write_jsonl};
use crate::data::{make_batches, BatchConfig, Dataset, Split, TextBatch};
use crate::discriminators::{DiscriminatorConfig, DiscriminatorOutput, Discriminators};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_models, EvalModels, EvalReport};
use crate::generator::{Generator, GeneratorConfig, ImagePyramid};
use crate::nn::{downsample2, Adam, AdamConfig, ParamStore};
use crate::objectives::{
    discriminator_accuracy, discriminator_loss, generator_loss, DiscriminatorTerms, GeneratorTerms, LossReport,
    LossWeights, VariantSpec,
};
use crate::seed;
use crate::text_encoder::TextFeatures;
use crate::vqa::{vqa_loss, VqaModel};

const DT: DType = DType::F32;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    pub d_accuracy: f64,
    pub vqa_calls: u64,
    pub d_qa_calls: u64,
    pub vqa_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoints: Vec<CheckpointMeta>,
    /// Forward passes of the VQA model during training.
    pub vqa_calls: u64,
    /// Discriminator forward passes on QA-generated images.
    pub d_qa_calls: u64,
    pub initial_digests: BTreeMap<String, String>,
    pub final_digests: BTreeMap<String, String>,
    /// Mean discriminator accuracy over post-warmup steps of this invocation.
    pub d_accuracy_after_warmup: Option<f64>,
    pub steps: usize,
}

fn adam_cfg(cfg: &Config, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: 1e-8,
    }
}

fn digest_of(stores: &[&ParamStore]) -> Result<String> {
    if stores.len() == 1 {
        return stores[0].digest();
    }
    let mut h = Sha256::new();
    for s in stores {
        h.update(s.digest()?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

struct Models {
    generator: Generator,
    discriminators: Discriminators,
    damsm: DamsmModels,
    vqa: Option<VqaBundle>,
}

impl Models {
    fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut d = BTreeMap::new();
        d.insert("generator".to_string(), self.generator.store.digest()?);
        let ds: Vec<&ParamStore> = self.discriminators.stages.iter().map(|s| &s.store).collect();
        d.insert("discriminators".to_string(), digest_of(&ds)?);
        d.insert("text_encoder".to_string(), self.damsm.text.store.digest()?);
        if let Some(v) = &self.vqa {
            d.insert("vqa".to_string(), v.model.store.digest()?);
        }
        Ok(d)
    }

    fn disc_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.discriminators
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.store.vars().into_iter().map(move |(n, v)| (format!("disc{i}/{n}"), v)))
            .collect()
    }
}

struct Optims {
    g: Adam,
    d: Adam,
    vqa: Option<Adam>,
}

pub fn load_generator(ckpt: &Checkpoint) -> Result<Generator> {
    ckpt.expect_kind("gan")?;
    let gcfg: GeneratorConfig = serde_json::from_value(ckpt.meta["generator"].clone())?;
    let g = Generator::new(&gcfg, DT, &mut seed::rng(0, "load", &[]))?;
    g.store.load(&ckpt.section("generator"))?;
    Ok(g)
}

fn save_checkpoint(
    path: &Path,
    models: &Models,
    opt: &Optims,
    meta: &CheckpointMeta,
    cfg: &Config,
    vocab_hash: &str,
    counters: (u64, u64),
) -> Result<()> {
    let mut c = Checkpoint::new(
        "gan",
        Some(vocab_hash.to_string()),
        json!({
            "generator": models.generator.config,
            "discriminator": cfg.discriminator,
            "variant": cfg.train.variant,
            "epoch": meta.epoch,
            "step": meta.step,
            "config_hash": meta.config_hash,
            "vqa_calls": counters.0,
            "d_qa_calls": counters.1,
        }),
    );
    c.insert_section("generator", models.generator.store.tensors());
    for (i, s) in models.discriminators.stages.iter().enumerate() {
        c.insert_section(&format!("disc{i}"), s.store.tensors());
    }
    if let Some(v) = &models.vqa {
        c.insert_section("vqa", v.model.store.tensors());
    }
    c.insert_section("adam_g", opt.g.state()?);
    c.insert_section("adam_d", opt.d.state()?);
    if let Some(a) = &opt.vqa {
        c.insert_section("adam_vqa", a.state()?);
    }
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    c.save(path)
}

fn restore(path: &Path, models: &Models, opt: &mut Optims, vocab_hash: &str) -> Result<(u64, u64)> {
    let c = Checkpoint::load(path)?;
    c.expect_kind("gan")?;
    c.check_vocab(vocab_hash)?;
    models.generator.store.load(&c.section("generator"))?;
    for (i, s) in models.discriminators.stages.iter().enumerate() {
        s.store.load(&c.section(&format!("disc{i}")))?;
    }
    if let Some(v) = &models.vqa {
        v.model.store.load(&c.section("vqa"))?;
    }
    opt.g.load_state(&c.section("adam_g"))?;
    opt.d.load_state(&c.section("adam_d"))?;
    if let Some(a) = &mut opt.vqa {
        a.load_state(&c.section("adam_vqa"))?;
    }
    let n = |k: &str| c.meta[k].as_u64().unwrap_or(0);
    Ok((n("vqa_calls"), n("d_qa_calls")))
}

/// Real images at every pyramid resolution, lowest first.
fn real_pyramid(final_images: Tensor, stages: usize) -> Result<Vec<Tensor>> {
    let mut out = vec![final_images];
    for _ in 1..stages {
        let next = downsample2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

fn check_finite(r: &LossReport, epoch: usize, step: usize) -> Result<()> {
    for (name, v) in [("total_d", r.total_d), ("total_g", r.total_g)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { name: name.into(), epoch, step });
        }
    }
    Ok(())
}

fn append_line<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(item)?).map_err(|e| Error::io(path, e))
}

/// QA-side inputs of one generator step.
pub struct QaSide<'a> {
    pub text: &'a TextFeatures,
    pub fake: &'a ImagePyramid,
    pub questions: &'a TextBatch,
    /// In-vocabulary answer ids per sample (empty when no VQA loss).
    pub answer_ids: &'a [Vec<u32>],
}

/// Generated pyramids of one step with the text they were conditioned on.
pub struct GeneratorSide<'a> {
    pub caption: &'a TextFeatures,
    pub fake: &'a ImagePyramid,
    pub qa: Option<QaSide<'a>>,
}

/// The models that judge generated images.
pub struct Critics<'a> {
    pub discriminators: &'a Discriminators,
    /// Stage indices that enter the adversarial terms.
    pub stages: &'a [usize],
    pub image_encoder: &'a ImageEncoder,
    pub vqa: Option<&'a VqaModel>,
}

pub struct GeneratorObjective {
    pub total: Tensor,
    pub report: LossReport,
    pub vqa_calls: u64,
    pub d_qa_calls: u64,
    pub vqa_skipped: usize,
}

/// Full generator loss of one step under `spec`: adversarial terms through
/// the discriminators, matching terms, VQA term and the conditioning KL.
pub fn generator_objective(
    critics: &Critics,
    side: &GeneratorSide,
    spec: &VariantSpec,
    weights: &LossWeights,
    gammas: &Gammas,
) -> Result<GeneratorObjective> {
    let qa_to_d = spec.discriminator_sees_qa && side.qa.is_some();
    let mut d_qa_calls = 0;
    let mut g_out: Vec<DiscriminatorOutput> = Vec::new();
    let mut g_qa_out = Vec::new();
    for &s in critics.stages {
        let d = &critics.discriminators.stages[s];
        g_out.push(d.discriminate(&side.fake.images[s], Some(&side.caption.sentence))?);
        if qa_to_d {
            let q = side.qa.as_ref().expect("checked");
            g_qa_out.push(d.discriminate(&q.fake.images[s], Some(&q.text.sentence))?);
            d_qa_calls += 1;
        }
    }
    let damsm_caption = damsm_loss(&critics.image_encoder.encode(side.fake.final_image())?, side.caption, gammas)?.total;
    let mut kl = side.fake.latent.kl.clone();
    let mut damsm_qa = None;
    let mut vqa_term = None;
    let mut vqa_skipped = 0;
    let mut vqa_calls = 0;
    if let Some(q) = &side.qa {
        kl = (kl + &q.fake.latent.kl)?;
        if spec.damsm_on_qa {
            damsm_qa = Some(damsm_loss(&critics.image_encoder.encode(q.fake.final_image())?, q.text, gammas)?.total);
        }
        if spec.vqa_loss_enabled {
            let model = critics
                .vqa
                .ok_or_else(|| Error::InvalidInput("VQA loss enabled without a VQA model".into()))?;
            let out = model.answer_probs(q.fake.final_image(), q.questions)?;
            vqa_calls += 1;
            let (l, skipped) = vqa_loss(&out.log_probs, q.answer_ids)?;
            vqa_term = l;
            vqa_skipped = skipped;
        }
    }
    let qa_batch = side.qa.as_ref().map_or(0, |q| q.questions.len());
    let (total, report) = generator_loss(
        &GeneratorTerms {
            caption: &g_out,
            qa: qa_to_d.then_some(g_qa_out.as_slice()),
            damsm_caption: Some(&damsm_caption),
            damsm_qa: damsm_qa.as_ref(),
            vqa: vqa_term.as_ref(),
            kl: Some(&kl),
            qa_batch,
        },
        spec,
        weights,
    )?;
    Ok(GeneratorObjective {
        total,
        report,
        vqa_calls,
        d_qa_calls,
        vqa_skipped,
    })
}

/// Adversarial training under `cfg.train.variant`. With `resume`, continues
/// from the latest checkpoint of the run directory; otherwise starts fresh.
pub fn train(cfg: &Config, ds: &Dataset, paths: &RunPaths, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.train.variant.spec();
    let vocab_hash = ds.meta.vocab_hash.clone();
    let damsm = DamsmModels::load(&paths.damsm, &vocab_hash)?;
    let vqa = if spec.vqa_loss_enabled {
        Some(VqaBundle::load(&paths.vqa, &vocab_hash)?)
    } else {
        None
    };
    let scorer = if cfg.train.eval_every > 0 {
        Some(VqaBundle::load(&paths.vqa, &vocab_hash)?)
    } else {
        None
    };

    let gcfg = GeneratorConfig {
        text_dim: damsm.text.config.feature_dim(),
        ..cfg.generator.clone()
    };
    gcfg.validate()?;
    if ds.resolution != gcfg.final_resolution() {
        return Err(Error::Config(format!(
            "dataset loaded at {}px but the generator produces {}px",
            ds.resolution,
            gcfg.final_resolution()
        )));
    }
    let generator = Generator::new(&gcfg, DT, &mut seed::rng(cfg.seed, "init-generator", &[]))?;
    let dcfg: &DiscriminatorConfig = &cfg.discriminator;
    let discriminators = Discriminators::new(
        dcfg,
        &gcfg.resolutions(),
        gcfg.text_dim,
        DT,
        &mut seed::rng(cfg.seed, "init-discriminators", &[]),
    )?;
    let models = Models {
        generator,
        discriminators,
        damsm,
        vqa,
    };
    let mut opt = Optims {
        g: Adam::new(models.generator.store.vars(), adam_cfg(cfg, cfg.train.lr_g))?,
        d: Adam::new(models.disc_vars(), adam_cfg(cfg, cfg.train.lr_d))?,
        vqa: match (&models.vqa, spec.vqa_model_trainable) {
            (Some(v), true) => Some(Adam::new(v.model.store.vars(), adam_cfg(cfg, cfg.train.lr_g))?),
            _ => None,
        },
    };

    let run_dir = paths.run_dir(cfg);
    let ckpt_dir = run_dir.join("checkpoints");
    let metrics_path = run_dir.join(METRICS_FILE);
    let series_path = run_dir.join(CHECKPOINTS_FILE);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let config_hash = cfg.hash()?;
    let initial_digests = models.digests()?;

    let mut series: Vec<CheckpointMeta> = Vec::new();
    let mut start_epoch = 1;
    let mut global_step = 0usize;
    let (mut vqa_calls, mut d_qa_calls) = (0u64, 0u64);
    let previous = if resume { read_checkpoint_series(&run_dir)? } else { Vec::new() };
    if let Some(last) = previous.iter().filter(|m| m.epoch <= cfg.train.epochs).next_back() {
        (vqa_calls, d_qa_calls) = restore(&last.path, &models, &mut opt, &vocab_hash)?;
        start_epoch = last.epoch + 1;
        global_step = last.step;
        series = previous.iter().filter(|m| m.epoch <= last.epoch).cloned().collect();
        let kept: Vec<StepRecord> = if metrics_path.exists() {
            read_jsonl::<StepRecord>(&metrics_path)?
                .into_iter()
                .filter(|r| r.epoch <= last.epoch)
                .collect()
        } else {
            Vec::new()
        };
        write_jsonl(&metrics_path, &kept)?;
        write_jsonl(&series_path, &series)?;
        log::info!("resuming {} from epoch {}", run_dir.display(), last.epoch);
    } else {
        for p in [&metrics_path, &series_path] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        if ckpt_dir.exists() {
            std::fs::remove_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        }
        write_jsonl::<StepRecord>(&metrics_path, &[])?;
    }

    let n_stages = gcfg.stage_count;
    let stages: Vec<usize> = match cfg.train.stages_in_loss {
        StagesInLoss::All => (0..n_stages).collect(),
        StagesInLoss::Final => vec![n_stages - 1],
    };
    let train_caps = ds.caption_indices(Split::Train);
    let train_qa = if spec.uses_qa() { ds.qa_indices(Split::Train) } else { Vec::new() };
    let cap_len: Vec<usize> = train_caps.iter().map(|&i| ds.captions[i].length()).collect();
    let qa_len: Vec<usize> = train_qa.iter().map(|&i| ds.qa[i].length()).collect();
    let qa_ratio = if train_qa.is_empty() { 0.0 } else { cfg.data.qa_ratio };
    let batch_seed = seed::derive(cfg.seed, "gan", &[]);
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    let mut steps_run = 0usize;

    for epoch in start_epoch..=cfg.train.epochs {
        let plan = make_batches(
            &cap_len,
            &qa_len,
            BatchConfig {
                batch_size: cfg.train.batch_size.min(cap_len.len()),
                qa_ratio,
            },
            batch_seed,
            epoch,
        )?;
        for (step, b) in plan.iter().enumerate() {
            let caps: Vec<usize> = b.captions.iter().map(|&k| train_caps[k]).collect();
            let qa: Vec<usize> = b.qa.iter().map(|&k| train_qa[k]).collect();
            let mut noise = seed::rng(cfg.seed, "noise", &[epoch as u64, step as u64]);

            let cap_feat = models.damsm.text.encode(&ds.caption_batch(&caps)?)?.detach();
            let reals = real_pyramid(ds.image_batch(&ds.caption_images(&caps)?, DT)?, n_stages)?;
            let (z, eps) = models.generator.sample_inputs(caps.len(), &mut noise)?;
            let fake = models.generator.generate(&z, &eps, &cap_feat)?;
            let qa_side = if qa.is_empty() {
                None
            } else {
                let feat = models.damsm.text.encode(&ds.qa_batch(&qa)?)?.detach();
                let (zq, eq) = models.generator.sample_inputs(qa.len(), &mut noise)?;
                let pyr = models.generator.generate(&zq, &eq, &feat)?;
                Some((feat, pyr))
            };
            let qa_to_d = spec.discriminator_sees_qa && qa_side.is_some();

            // discriminator update on detached fakes
            let mut real_out = Vec::new();
            let mut fake_out = Vec::new();
            let mut qa_out = Vec::new();
            for &s in &stages {
                let d = &models.discriminators.stages[s];
                real_out.push(d.discriminate(&reals[s], Some(&cap_feat.sentence))?);
                fake_out.push(d.discriminate(&fake.images[s].detach(), Some(&cap_feat.sentence))?);
                if qa_to_d {
                    let (f, p) = qa_side.as_ref().expect("checked");
                    qa_out.push(d.discriminate(&p.images[s].detach(), Some(&f.sentence))?);
                    d_qa_calls += 1;
                }
            }
            let (d_total, d_rep) = discriminator_loss(
                &DiscriminatorTerms {
                    real: &real_out,
                    fake_caption: &fake_out,
                    fake_qa: qa_to_d.then_some(qa_out.as_slice()),
                    qa_batch: qa.len(),
                },
                &spec,
            )?;
            if !d_rep.total_d.is_finite() {
                return Err(Error::NonFinite { name: "total_d".into(), epoch, step });
            }
            let d_accuracy = discriminator_accuracy(&real_out, &fake_out)?;
            opt.d.step(&d_total.backward()?)?;

            // generator update through the refreshed discriminators
            let answer_ids: Vec<Vec<u32>> = match &models.vqa {
                Some(bundle) if spec.vqa_loss_enabled => qa.iter().map(|&i| bundle.answers.ids(&ds.qa[i].answers)).collect(),
                _ => Vec::new(),
            };
            let questions = if qa.is_empty() { None } else { Some(ds.question_batch(&qa)?) };
            let side = GeneratorSide {
                caption: &cap_feat,
                fake: &fake,
                qa: match (&qa_side, &questions) {
                    (Some((f, p)), Some(q)) => Some(QaSide {
                        text: f,
                        fake: p,
                        questions: q,
                        answer_ids: &answer_ids,
                    }),
                    _ => None,
                },
            };
            let critics = Critics {
                discriminators: &models.discriminators,
                stages: &stages,
                image_encoder: &models.damsm.image,
                vqa: models.vqa.as_ref().map(|b| &b.model),
            };
            let g = generator_objective(&critics, &side, &spec, &cfg.train.loss, &cfg.damsm.gammas)?;
            vqa_calls += g.vqa_calls;
            d_qa_calls += g.d_qa_calls;
            let vqa_skipped = g.vqa_skipped;
            let (g_total, g_rep) = (g.total, g.report);
            let report = d_rep.with_generator(&g_rep);
            check_finite(&report, epoch, step)?;
            let grads = g_total.backward()?;
            opt.g.step(&grads)?;
            if let Some(a) = &mut opt.vqa {
                a.step(&grads)?;
            }

            global_step += 1;
            steps_run += 1;
            if epoch > cfg.train.warmup_epochs {
                acc_sum += d_accuracy;
                acc_n += 1;
            }
            append_line(
                &metrics_path,
                &StepRecord {
                    epoch,
                    step,
                    global_step,
                    losses: report,
                    d_accuracy,
                    vqa_calls,
                    d_qa_calls,
                    vqa_skipped,
                },
            )?;
        }
        log::info!("{}: epoch {epoch}/{} done", cfg.train.variant, cfg.train.epochs);

        if epoch % cfg.train.checkpoint_every == 0 || epoch == cfg.train.epochs {
            let path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
            let eval: Option<EvalReport> = match &scorer {
                Some(sc) if epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs => Some(evaluate_models(
                    &EvalModels {
                        generator: &models.generator,
                        text: &models.damsm.text,
                        image: &models.damsm.image,
                        scorer: sc,
                    },
                    ds,
                    &cfg.eval,
                    Split::Test,
                    cfg.eval.n_samples,
                    cfg.seed,
                )?),
                _ => None,
            };
            let meta = CheckpointMeta {
                epoch,
                step: global_step,
                is_mean: eval.as_ref().map(|e| e.is_mean),
                config_hash: config_hash.clone(),
                digests: models.digests()?,
                path: path.clone(),
                eval,
            };
            save_checkpoint(&path, &models, &opt, &meta, cfg, &vocab_hash, (vqa_calls, d_qa_calls))?;
            append_line(&series_path, &meta)?;
            series.push(meta);
        }
    }

    Ok(TrainOutcome {
        run_dir,
        checkpoints: series,
        vqa_calls,
        d_qa_calls,
        initial_digests,
        final_digests: models.digests()?,
        d_accuracy_after_warmup: (acc_n > 0).then(|| acc_sum / acc_n as f64),
        steps: steps_run,
    })
}
