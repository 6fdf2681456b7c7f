//! Ingestion of COCO-style caption files and VQA-2.0-style question and
//! annotation files. Only the documented field subset is read:
//! `annotations[].{image_id, caption}`, `questions[].{question_id, image_id, question}`
//! and `annotations[].{question_id, answers[].answer}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::manifest::{
    write_json, write_jsonl, DatasetMeta, ManifestRecord, RecordKind, Split, MANIFEST_FILE,
    META_FILE, VOCAB_FILE,
};
use super::records::{concatenate_qa, index_complementary_pairs, majority_answer, QARecord, MAX_TEXT_LENGTH};
use super::synthetic::DatasetSummary;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct CocoCaptions {
    annotations: Vec<CocoCaption>,
}

#[derive(Deserialize)]
struct CocoCaption {
    image_id: u64,
    caption: String,
}

#[derive(Deserialize)]
struct VqaQuestions {
    questions: Vec<VqaQuestion>,
}

#[derive(Deserialize)]
struct VqaQuestion {
    question_id: u64,
    image_id: u64,
    question: String,
}

#[derive(Deserialize)]
struct VqaAnnotations {
    annotations: Vec<VqaAnnotation>,
}

#[derive(Deserialize)]
struct VqaAnnotation {
    question_id: u64,
    answers: Vec<VqaAnswer>,
}

#[derive(Deserialize)]
struct VqaAnswer {
    answer: String,
}

#[derive(Debug, Clone)]
pub struct SplitSources {
    pub captions: PathBuf,
    pub questions: PathBuf,
    pub annotations: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RealSources {
    pub train: SplitSources,
    pub test: Option<SplitSources>,
    pub image_dir: PathBuf,
    pub min_frequency: usize,
}

struct RawSplit {
    captions: Vec<(String, String)>,
    qa: Vec<(String, String, Vec<String>)>,
}

fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_split(src: &SplitSources) -> Result<RawSplit> {
    let caps: CocoCaptions = read(&src.captions)?;
    let qs: VqaQuestions = read(&src.questions)?;
    let anns: VqaAnnotations = read(&src.annotations)?;
    let answers: HashMap<u64, Vec<String>> = anns
        .annotations
        .into_iter()
        .map(|a| (a.question_id, a.answers.into_iter().map(|x| x.answer).collect()))
        .collect();
    let mut qa = Vec::new();
    for q in qs.questions {
        let Some(a) = answers.get(&q.question_id) else {
            log::warn!("question {} has no annotation; skipped", q.question_id);
            continue;
        };
        if a.is_empty() || q.question.trim().is_empty() {
            continue;
        }
        qa.push((q.image_id.to_string(), q.question, a.clone()));
    }
    Ok(RawSplit {
        captions: caps
            .annotations
            .into_iter()
            .map(|c| (c.image_id.to_string(), c.caption))
            .collect(),
        qa,
    })
}

/// Map image ids to files: `<id>.png|jpg|jpeg` or COCO-style names ending
/// in `_<12-digit id>.jpg`.
fn index_images(dir: &Path) -> Result<HashMap<String, PathBuf>> {
    let mut out = HashMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let digits: String = stem
            .rsplit('_')
            .next()
            .unwrap_or(stem)
            .chars()
            .filter(|c| c.is_ascii_digit())
            .collect();
        if let Ok(id) = digits.parse::<u64>() {
            out.insert(id.to_string(), path);
        }
    }
    Ok(out)
}

pub fn prepare_real_dataset(src: &RealSources, out_dir: &Path) -> Result<DatasetSummary> {
    let train = read_split(&src.train)?;
    let test = src.test.as_ref().map(read_split).transpose()?;
    let files = index_images(&src.image_dir)?;

    let mut texts: Vec<String> = train.captions.iter().map(|(_, c)| c.clone()).collect();
    for (_, q, a) in &train.qa {
        texts.push(concatenate_qa(q, &majority_answer(a)?)?);
    }
    let vocab = Vocabulary::build(&texts, src.min_frequency)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Vec::new();
    let mut qa_records = Vec::new();
    let mut seen_images: HashMap<String, Split> = HashMap::new();
    let mut missing = 0usize;
    let splits = std::iter::once((Split::Train, &train)).chain(test.iter().map(|t| (Split::Test, t)));
    for (split, raw) in splits {
        for (image_id, caption) in &raw.captions {
            let Some(path) = files.get(image_id) else {
                missing += 1;
                continue;
            };
            if vocab.encode(caption, MAX_TEXT_LENGTH).is_empty() {
                continue;
            }
            seen_images.insert(image_id.clone(), split);
            manifest.push(ManifestRecord {
                image_id: image_id.clone(),
                kind: RecordKind::Caption,
                text: caption.clone(),
                question: None,
                answers: vec![],
                split,
                image: path.display().to_string(),
            });
        }
        for (image_id, question, answers) in &raw.qa {
            let Some(path) = files.get(image_id) else {
                missing += 1;
                continue;
            };
            let rec = QARecord::new(image_id, question, answers, &vocab)?;
            seen_images.insert(image_id.clone(), split);
            manifest.push(ManifestRecord {
                image_id: image_id.clone(),
                kind: RecordKind::Qa,
                text: rec.qa_text.clone(),
                question: Some(question.clone()),
                answers: answers.clone(),
                split,
                image: path.display().to_string(),
            });
            qa_records.push(rec);
        }
    }
    if missing > 0 {
        log::warn!("{missing} records reference images not found in {}", src.image_dir.display());
    }
    if manifest.is_empty() {
        return Err(Error::Data("no records with resolvable images".into()));
    }
    let complementary = index_complementary_pairs(&qa_records);
    write_jsonl(&out_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&out_dir.join(VOCAB_FILE), &vocab)?;
    let n_test = seen_images.values().filter(|s| **s == Split::Test).count();
    let meta = DatasetMeta {
        source: "coco-vqa".into(),
        seed: None,
        n_images: seen_images.len(),
        n_train_images: seen_images.len() - n_test,
        n_test_images: n_test,
        n_captions: manifest.iter().filter(|r| r.kind == RecordKind::Caption).count(),
        n_qa: qa_records.len(),
        n_complementary_pairs: complementary.len(),
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        min_frequency: src.min_frequency,
        max_text_length: MAX_TEXT_LENGTH,
    };
    write_json(&out_dir.join(META_FILE), &meta)?;
    Ok(DatasetSummary {
        n_images: meta.n_images,
        n_captions: meta.n_captions,
        n_qa: meta.n_qa,
        n_complementary_pairs: meta.n_complementary_pairs,
        vocab_hash: meta.vocab_hash,
    })
}
