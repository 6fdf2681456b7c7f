use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Longest token sequence fed to the text encoder; longer texts keep their prefix.
pub const MAX_TEXT_LENGTH: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub token_ids: Vec<u32>,
}

impl CaptionRecord {
    pub fn new(image_id: &str, text: &str, vocab: &Vocabulary) -> Result<Self> {
        let token_ids = vocab.encode(text, MAX_TEXT_LENGTH);
        if token_ids.is_empty() {
            return Err(Error::Data(format!("empty caption for image {image_id}")));
        }
        Ok(Self {
            image_id: image_id.to_string(),
            text: text.to_string(),
            token_ids,
        })
    }

    pub fn length(&self) -> usize {
        self.token_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub image_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub majority_answer: String,
    pub qa_text: String,
    pub qa_token_ids: Vec<u32>,
    pub question_token_ids: Vec<u32>,
}

impl QARecord {
    pub fn new(image_id: &str, question: &str, answers: &[String], vocab: &Vocabulary) -> Result<Self> {
        let majority = majority_answer(answers)?;
        let qa_text = concatenate_qa(question, &majority)?;
        let answers: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
        Ok(Self {
            image_id: image_id.to_string(),
            question: question.to_string(),
            qa_token_ids: vocab.encode(&qa_text, MAX_TEXT_LENGTH),
            question_token_ids: vocab.encode(question, MAX_TEXT_LENGTH),
            answers,
            majority_answer: majority,
            qa_text,
        })
    }

    pub fn length(&self) -> usize {
        self.qa_token_ids.len()
    }
}

pub fn normalize_answer(a: &str) -> String {
    a.trim().to_lowercase()
}

/// `lowercase(question) + " " + lowercase(answer)` with punctuation kept.
pub fn concatenate_qa(question: &str, majority_answer: &str) -> Result<String> {
    let q = question.trim();
    let a = majority_answer.trim();
    if q.is_empty() || a.is_empty() {
        return Err(Error::InvalidInput("degenerate QA pair".to_string()));
    }
    Ok(format!("{} {}", q.to_lowercase(), a.to_lowercase()))
}

/// Most frequent answer after lowercasing and trimming; ties go to the
/// lexicographically smallest.
pub fn majority_answer(answers: &[String]) -> Result<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        let a = normalize_answer(a);
        if !a.is_empty() {
            *counts.entry(a).or_default() += 1;
        }
    }
    // BTreeMap iterates lexicographically, so keeping the first maximum
    // implements the tie-break.
    let mut best: Option<(&String, usize)> = None;
    for (a, &c) in &counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.clone())
        .ok_or_else(|| Error::InvalidInput("no answers".to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplementaryPair {
    pub question: String,
    pub image_id_a: String,
    pub answer_a: String,
    pub image_id_b: String,
    pub answer_b: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplementaryPairIndex {
    pub entries: Vec<ComplementaryPair>,
}

impl ComplementaryPairIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every unordered pair of records with identical question text, different
/// images and different majority answers, listed once in input order
/// (`a` precedes `b` in `records`).
pub fn index_complementary_pairs(records: &[QARecord]) -> ComplementaryPairIndex {
    let mut by_question: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let slot = by_question.entry(r.question.as_str()).or_default();
        if slot.is_empty() {
            order.push(r.question.as_str());
        }
        slot.push(i);
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for q in order {
        let idx = &by_question[q];
        for (x, &i) in idx.iter().enumerate() {
            for &j in &idx[x + 1..] {
                let (a, b) = (&records[i], &records[j]);
                if a.image_id != b.image_id && a.majority_answer != b.majority_answer {
                    pairs.push((i, j));
                }
            }
        }
    }
    pairs.sort_unstable();
    ComplementaryPairIndex {
        entries: pairs
            .into_iter()
            .map(|(i, j)| ComplementaryPair {
                question: records[i].question.clone(),
                image_id_a: records[i].image_id.clone(),
                answer_a: records[i].majority_answer.clone(),
                image_id_b: records[j].image_id.clone(),
                answer_b: records[j].majority_answer.clone(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::tokenize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn concatenation_examples() {
        assert_eq!(concatenate_qa("Is the bus blue?", "yes").unwrap(), "is the bus blue? yes");
        assert_eq!(
            concatenate_qa("What color is the ball?", "red").unwrap(),
            "what color is the ball? red"
        );
        assert_eq!(concatenate_qa("HOW MANY DOGS?", "2").unwrap(), "how many dogs? 2");
    }

    #[test]
    fn degenerate_pairs_rejected() {
        for (q, a) in [("", "yes"), ("is it?", "  "), ("  ", "")] {
            match concatenate_qa(q, a) {
                Err(Error::InvalidInput(m)) => assert_eq!(m, "degenerate QA pair"),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_answer(&s(&["yes", "yes", "no"])).unwrap(), "yes");
        assert_eq!(majority_answer(&s(&["a", "b"])).unwrap(), "a");
        assert_eq!(majority_answer(&s(&[" Yes", "yes ", "no"])).unwrap(), "yes");
        assert!(majority_answer(&[]).is_err());
    }

    #[test]
    fn majority_matches_counting_oracle_on_vqa_style_lists() {
        let pool = ["yes", "no", "2", "red", "blue"];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let answers: Vec<String> = (0..10)
                .map(|_| pool[rng.random_range(0..pool.len())].to_string())
                .collect();
            // oracle: count by linear scan, pick max count then smallest string
            let mut best = String::new();
            let mut best_c = 0;
            for cand in &answers {
                let c = answers.iter().filter(|a| *a == cand).count();
                if c > best_c || (c == best_c && *cand < best) {
                    best = cand.clone();
                    best_c = c;
                }
            }
            assert_eq!(majority_answer(&answers).unwrap(), best);
        }
    }

    fn rec(image: &str, q: &str, a: &str) -> QARecord {
        QARecord {
            image_id: image.into(),
            question: q.into(),
            answers: vec![a.into()],
            majority_answer: a.into(),
            qa_text: format!("{q} {a}"),
            qa_token_ids: vec![],
            question_token_ids: vec![],
        }
    }

    #[test]
    fn complementary_definition_cases() {
        let idx = index_complementary_pairs(&[rec("1", "is it red?", "yes"), rec("2", "is it red?", "no")]);
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.entries[0].image_id_a, "1");
        assert_eq!(idx.entries[0].answer_b, "no");
        let idx = index_complementary_pairs(&[rec("1", "is it red?", "yes"), rec("2", "is it red?", "yes")]);
        assert!(idx.is_empty());
        let idx = index_complementary_pairs(&[rec("1", "is it red?", "yes"), rec("1", "is it red?", "no")]);
        assert!(idx.is_empty());
    }

    #[test]
    fn complementary_matches_quadratic_scan() {
        let qs = ["what color?", "is it big?", "how many?"];
        let ans = ["yes", "no", "red", "2"];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // each image asks a given question at most once, as in real annotations
        let mut records: Vec<QARecord> = Vec::new();
        while records.len() < 50 {
            let img = format!("img{}", rng.random_range(0..30));
            let q = qs[rng.random_range(0..qs.len())];
            if records.iter().any(|r| r.image_id == img && r.question == q) {
                continue;
            }
            records.push(rec(&img, q, ans[rng.random_range(0..ans.len())]));
        }
        let mut oracle = Vec::new();
        for i in 0..records.len() {
            for j in i + 1..records.len() {
                let (a, b) = (&records[i], &records[j]);
                if a.question == b.question && a.image_id != b.image_id && a.majority_answer != b.majority_answer {
                    oracle.push((a.question.clone(), a.image_id.clone(), a.majority_answer.clone(), b.image_id.clone(), b.majority_answer.clone()));
                }
            }
        }
        let got: Vec<_> = index_complementary_pairs(&records)
            .entries
            .into_iter()
            .map(|e| (e.question, e.image_id_a, e.answer_a, e.image_id_b, e.answer_b))
            .collect();
        assert_eq!(got, oracle);
        // no entry appears mirrored
        for e in &got {
            assert!(!got.contains(&(e.0.clone(), e.3.clone(), e.4.clone(), e.1.clone(), e.2.clone())));
        }
    }

    proptest! {
        #[test]
        fn concatenated_length_is_sum_of_parts(q in "[a-zA-Z]{1,5}( [a-zA-Z?]{1,5}){0,6}", a in "[a-z0-9]{1,5}( [a-z]{1,4}){0,1}") {
            let joined = concatenate_qa(&q, &a).unwrap();
            prop_assert_eq!(tokenize(&joined).len(), tokenize(&q).len() + tokenize(&a).len());
            prop_assert_eq!(tokenize(&joined), tokenize(&joined.clone()));
        }
    }
}
