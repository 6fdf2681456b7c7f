//! Procedural shapes dataset: solid shapes on a gray canvas, each image with
//! template captions and rule-answerable QA pairs.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{
    write_json, write_jsonl, DatasetMeta, ManifestRecord, RecordKind, Split, IMAGE_DIR,
    MANIFEST_FILE, META_FILE, SCENES_FILE, VOCAB_FILE,
};
use super::records::{concatenate_qa, index_complementary_pairs, QARecord, MAX_TEXT_LENGTH};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::seed;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub name: String,
    pub rgb: [u8; 3],
}

pub fn default_palette() -> Vec<PaletteColor> {
    [
        ("red", [220, 30, 30]),
        ("green", [30, 170, 40]),
        ("blue", [30, 60, 220]),
        ("yellow", [240, 220, 30]),
        ("purple", [140, 40, 180]),
        ("orange", [250, 140, 20]),
        ("white", [250, 250, 250]),
        ("black", [15, 15, 15]),
    ]
    .into_iter()
    .map(|(n, rgb)| PaletteColor {
        name: n.to_string(),
        rgb,
    })
    .collect()
}

const POSITIONS_2X2: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
const POSITIONS_3X3: [&str; 9] = [
    "top left",
    "top",
    "top right",
    "left",
    "center",
    "right",
    "bottom left",
    "bottom",
    "bottom right",
];

/// Generation parameters. Templates use `{color}`, `{kind}` and `{position}`
/// placeholders; QA templates are fixed question families (see [`QaFamily`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub canvas_size: u32,
    /// Cells per side of the placement grid (2 or 3).
    pub grid: u32,
    pub palette: Vec<PaletteColor>,
    pub kinds: Vec<ShapeKind>,
    pub max_shapes: usize,
    pub captions_per_image: usize,
    pub answers_per_question: usize,
    /// Probability that a single annotation is replaced by a wrong answer.
    pub answer_noise: f64,
    pub test_fraction: f64,
    pub min_frequency: usize,
    pub caption_templates: Vec<String>,
    pub qa_templates: Vec<QaFamily>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            grid: 2,
            palette: default_palette(),
            kinds: ShapeKind::ALL.to_vec(),
            max_shapes: 1,
            captions_per_image: 5,
            answers_per_question: 10,
            answer_noise: 0.1,
            test_fraction: 0.2,
            min_frequency: 1,
            caption_templates: vec![
                "a {color} {kind} in the {position}".into(),
                "there is a {color} {kind}".into(),
                "a {kind} colored {color}".into(),
                "the {position} has a {color} {kind}".into(),
                "a {color} {kind} on a gray background".into(),
            ],
            qa_templates: vec![
                QaFamily::ColorOf,
                QaFamily::ShapeAt,
                QaFamily::WhereIs,
                QaFamily::IsColor,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaFamily {
    /// "what color is the {kind}?" -> color
    ColorOf,
    /// "what shape is in the {position}?" -> kind
    ShapeAt,
    /// "where is the {kind}?" -> position
    WhereIs,
    /// "is the {kind} {color}?" -> yes / no
    IsColor,
    /// "is there a {kind}?" -> yes / no
    IsThere,
    /// "how many shapes are there?" -> count
    HowMany,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: String,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub shapes: Vec<PlacedShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub scene: Scene,
    pub split: Split,
    pub captions: Vec<String>,
    pub qa: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_images: usize,
    pub n_captions: usize,
    pub n_qa: usize,
    pub n_complementary_pairs: usize,
    pub vocab_hash: String,
}

impl SyntheticSceneSpec {
    pub fn positions(&self) -> Result<&'static [&'static str]> {
        match self.grid {
            2 => Ok(&POSITIONS_2X2),
            3 => Ok(&POSITIONS_3X3),
            g => Err(Error::InvalidInput(format!("grid must be 2 or 3, got {g}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.positions()?.len();
        if self.palette.is_empty() || self.kinds.is_empty() {
            return Err(Error::InvalidInput("palette and kinds must be non-empty".into()));
        }
        if self.max_shapes == 0 || self.max_shapes > cells.min(self.kinds.len()) {
            return Err(Error::InvalidInput(format!(
                "max_shapes must be in 1..={}",
                cells.min(self.kinds.len())
            )));
        }
        if self.canvas_size < 8 * self.grid {
            return Err(Error::InvalidInput("canvas too small for grid".into()));
        }
        if self.captions_per_image == 0 || self.caption_templates.is_empty() {
            return Err(Error::InvalidInput("need at least one caption template".into()));
        }
        let first = &self.caption_templates[0];
        if !["{color}", "{kind}", "{position}"].iter().all(|p| first.contains(p)) {
            return Err(Error::InvalidInput(
                "the first caption template must mention {color}, {kind} and {position}".into(),
            ));
        }
        for fam in [QaFamily::ColorOf, QaFamily::ShapeAt, QaFamily::WhereIs] {
            if !self.qa_templates.contains(&fam) {
                return Err(Error::InvalidInput(format!(
                    "qa_templates must include {fam:?} so every attribute is queried"
                )));
            }
        }
        if self.answers_per_question == 0 || !(0.0..0.5).contains(&self.answer_noise) {
            return Err(Error::InvalidInput("invalid answer annotation settings".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidInput("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Repeating sequence of seeded shuffles of `0..n`, so attribute values are
/// balanced across any window of `n` consecutive images.
fn balanced_draws(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count + n);
    while out.len() < count {
        let mut block: Vec<usize> = (0..n).collect();
        block.shuffle(rng);
        out.extend(block);
    }
    out.truncate(count);
    out
}

fn is_test(index: usize, fraction: f64) -> bool {
    ((index + 1) as f64 * fraction).floor() > (index as f64 * fraction).floor()
}

fn fill(template: &str, shape: &PlacedShape, positions: &[&str]) -> String {
    template
        .replace("{color}", &shape.color)
        .replace("{kind}", shape.kind.name())
        .replace("{position}", positions[shape.cell])
}

pub fn generate_samples(spec: &SyntheticSceneSpec, n_images: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidInput("n_images must be >= 1".into()));
    }
    let positions = spec.positions()?;
    let mut rng = seed::rng(seed, "synthetic-scenes", &[]);
    let colors = balanced_draws(spec.palette.len(), n_images, &mut rng);
    let kinds = balanced_draws(spec.kinds.len(), n_images, &mut rng);
    let cells = balanced_draws(positions.len(), n_images, &mut rng);

    let mut samples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut shapes = vec![PlacedShape {
            kind: spec.kinds[kinds[i]],
            color: spec.palette[colors[i]].name.clone(),
            cell: cells[i],
        }];
        let extra = if spec.max_shapes > 1 {
            rng.random_range(0..spec.max_shapes)
        } else {
            0
        };
        for _ in 0..extra {
            let free_kinds: Vec<ShapeKind> = spec
                .kinds
                .iter()
                .copied()
                .filter(|k| shapes.iter().all(|s| s.kind != *k))
                .collect();
            let free_cells: Vec<usize> = (0..positions.len())
                .filter(|c| shapes.iter().all(|s| s.cell != *c))
                .collect();
            shapes.push(PlacedShape {
                kind: free_kinds[rng.random_range(0..free_kinds.len())],
                color: spec.palette[rng.random_range(0..spec.palette.len())].name.clone(),
                cell: free_cells[rng.random_range(0..free_cells.len())],
            });
        }
        let scene = Scene {
            image_id: format!("synth_{i:06}"),
            shapes,
        };
        let captions = make_captions(spec, &scene, positions, &mut rng);
        let qa = make_qa(spec, &scene, positions, &mut rng);
        samples.push(SyntheticSample {
            scene,
            split: if is_test(i, spec.test_fraction) { Split::Test } else { Split::Train },
            captions,
            qa,
        });
    }
    Ok(samples)
}

fn make_captions(spec: &SyntheticSceneSpec, scene: &Scene, positions: &[&str], rng: &mut ChaCha8Rng) -> Vec<String> {
    let n_t = spec.caption_templates.len();
    let offset = rng.random_range(0..n_t);
    (0..spec.captions_per_image)
        .map(|c| {
            // caption 0 always uses the full-description template
            let t = if c == 0 { 0 } else { (offset + c) % n_t };
            scene
                .shapes
                .iter()
                .map(|s| fill(&spec.caption_templates[t], s, positions))
                .collect::<Vec<_>>()
                .join(" and ")
        })
        .collect()
}

fn annotate(correct: &str, alternatives: &[String], spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
    let wrong: Vec<&String> = alternatives.iter().filter(|a| *a != correct).collect();
    // keep the correct answer a strict majority
    let max_noisy = (spec.answers_per_question - 1) / 2;
    let mut noisy = 0;
    (0..spec.answers_per_question)
        .map(|_| {
            if !wrong.is_empty() && noisy < max_noisy && rng.random::<f64>() < spec.answer_noise {
                noisy += 1;
                wrong[rng.random_range(0..wrong.len())].clone()
            } else {
                correct.to_string()
            }
        })
        .collect()
}

fn make_qa(
    spec: &SyntheticSceneSpec,
    scene: &Scene,
    positions: &[&str],
    rng: &mut ChaCha8Rng,
) -> Vec<(String, Vec<String>)> {
    let colors: Vec<String> = spec.palette.iter().map(|c| c.name.clone()).collect();
    let kinds: Vec<String> = spec.kinds.iter().map(|k| k.name().to_string()).collect();
    let cells: Vec<String> = positions.iter().map(|p| p.to_string()).collect();
    let yes_no = vec!["yes".to_string(), "no".to_string()];
    let mut out = Vec::new();
    for fam in &spec.qa_templates {
        match fam {
            QaFamily::ColorOf => {
                for s in &scene.shapes {
                    let q = format!("what color is the {}?", s.kind.name());
                    out.push((q, annotate(&s.color, &colors, spec, rng)));
                }
            }
            QaFamily::ShapeAt => {
                for s in &scene.shapes {
                    let q = format!("what shape is in the {}?", positions[s.cell]);
                    out.push((q, annotate(s.kind.name(), &kinds, spec, rng)));
                }
            }
            QaFamily::WhereIs => {
                for s in &scene.shapes {
                    let q = format!("where is the {}?", s.kind.name());
                    out.push((q, annotate(positions[s.cell], &cells, spec, rng)));
                }
            }
            QaFamily::IsColor => {
                let s = &scene.shapes[rng.random_range(0..scene.shapes.len())];
                let asked = if rng.random::<bool>() {
                    s.color.clone()
                } else {
                    colors[rng.random_range(0..colors.len())].clone()
                };
                let ans = if asked == s.color { "yes" } else { "no" };
                let q = format!("is the {} {}?", s.kind.name(), asked);
                out.push((q, annotate(ans, &yes_no, spec, rng)));
            }
            QaFamily::IsThere => {
                let k = spec.kinds[rng.random_range(0..spec.kinds.len())];
                let ans = if scene.shapes.iter().any(|s| s.kind == k) { "yes" } else { "no" };
                let q = format!("is there a {}?", k.name());
                out.push((q, annotate(ans, &yes_no, spec, rng)));
            }
            QaFamily::HowMany => {
                let counts: Vec<String> = (1..=spec.max_shapes).map(|c| c.to_string()).collect();
                let q = "how many shapes are there?".to_string();
                out.push((q, annotate(&scene.shapes.len().to_string(), &counts, spec, rng)));
            }
        }
    }
    out
}

fn shape_covers(kind: ShapeKind, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    match kind {
        ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        ShapeKind::Square => {
            let h = r * 0.85;
            (x - cx).abs() <= h && (y - cy).abs() <= h
        }
        ShapeKind::Triangle => {
            // apex up, base at cy + 0.8 r
            let (top, base) = (cy - r, cy + 0.8 * r);
            if y < top || y > base {
                return false;
            }
            let half = r * (y - top) / (base - top);
            (x - cx).abs() <= half
        }
    }
}

pub fn render(spec: &SyntheticSceneSpec, scene: &Scene) -> Result<RgbImage> {
    let size = spec.canvas_size;
    let grid = spec.grid;
    let cell = size as f64 / grid as f64;
    let mut img = RgbImage::from_pixel(size, size, Rgb(BACKGROUND));
    for s in &scene.shapes {
        let rgb = spec
            .palette
            .iter()
            .find(|c| c.name == s.color)
            .ok_or_else(|| Error::InvalidInput(format!("unknown color {}", s.color)))?
            .rgb;
        let (row, col) = (s.cell as u32 / grid, s.cell as u32 % grid);
        let cx = (col as f64 + 0.5) * cell;
        let cy = (row as f64 + 0.5) * cell;
        let r = 0.38 * cell;
        for y in 0..size {
            for x in 0..size {
                if shape_covers(s.kind, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                    img.put_pixel(x, y, Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

/// Write a complete synthetic dataset under `out_dir`. Re-running with the
/// same spec, size and seed produces byte-identical files.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSceneSpec,
    n_images: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    let samples = generate_samples(spec, n_images, seed)?;
    let img_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut texts: Vec<String> = Vec::new();
    for s in &samples {
        texts.extend(s.captions.iter().cloned());
        for (q, answers) in &s.qa {
            let maj = super::records::majority_answer(answers)?;
            texts.push(concatenate_qa(q, &maj)?);
        }
    }
    let vocab = Vocabulary::build(&texts, spec.min_frequency)?;

    let mut manifest = Vec::new();
    let mut qa_records = Vec::new();
    for s in &samples {
        let rel = format!("{IMAGE_DIR}/{}.png", s.scene.image_id);
        let path = out_dir.join(&rel);
        render(spec, &s.scene)?
            .save(&path)
            .map_err(Error::from)?;
        for c in &s.captions {
            manifest.push(ManifestRecord {
                image_id: s.scene.image_id.clone(),
                kind: RecordKind::Caption,
                text: c.clone(),
                question: None,
                answers: vec![],
                split: s.split,
                image: rel.clone(),
            });
        }
        for (q, answers) in &s.qa {
            let rec = QARecord::new(&s.scene.image_id, q, answers, &vocab)?;
            manifest.push(ManifestRecord {
                image_id: s.scene.image_id.clone(),
                kind: RecordKind::Qa,
                text: rec.qa_text.clone(),
                question: Some(q.clone()),
                answers: answers.clone(),
                split: s.split,
                image: rel.clone(),
            });
            qa_records.push(rec);
        }
    }
    let complementary = index_complementary_pairs(&qa_records);
    let scenes: Vec<&Scene> = samples.iter().map(|s| &s.scene).collect();
    write_jsonl(&out_dir.join(MANIFEST_FILE), &manifest)?;
    write_jsonl(&out_dir.join(SCENES_FILE), &scenes)?;
    write_json(&out_dir.join(VOCAB_FILE), &vocab)?;
    let n_test = samples.iter().filter(|s| s.split == Split::Test).count();
    let meta = DatasetMeta {
        source: "synthetic".into(),
        seed: Some(seed),
        n_images,
        n_train_images: n_images - n_test,
        n_test_images: n_test,
        n_captions: manifest.iter().filter(|r| r.kind == RecordKind::Caption).count(),
        n_qa: qa_records.len(),
        n_complementary_pairs: complementary.len(),
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        min_frequency: spec.min_frequency,
        max_text_length: MAX_TEXT_LENGTH,
    };
    write_json(&out_dir.join(META_FILE), &meta)?;
    write_json(&out_dir.join("synthetic_spec.json"), spec)?;
    Ok(DatasetSummary {
        n_images,
        n_captions: meta.n_captions,
        n_qa: meta.n_qa,
        n_complementary_pairs: meta.n_complementary_pairs,
        vocab_hash: meta.vocab_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_attribute_is_captioned_and_queried() {
        let spec = SyntheticSceneSpec::default();
        let positions = spec.positions().unwrap();
        for s in generate_samples(&spec, 40, 3).unwrap() {
            assert_eq!(s.captions.len(), 5);
            assert!(s.qa.len() >= 2);
            for sh in &s.scene.shapes {
                for attr in [sh.color.as_str(), sh.kind.name(), positions[sh.cell]] {
                    assert!(s.captions.iter().any(|c| c.contains(attr)), "{attr} not captioned");
                    assert!(
                        s.qa.iter().any(|(q, a)| q.contains(attr) || a.iter().any(|x| x == attr)),
                        "{attr} not queried"
                    );
                }
            }
        }
    }

    #[test]
    fn rendering_places_shape_color_in_its_cell() {
        let spec = SyntheticSceneSpec::default();
        let scene = Scene {
            image_id: "x".into(),
            shapes: vec![PlacedShape {
                kind: ShapeKind::Square,
                color: "red".into(),
                cell: 3,
            }],
        };
        let img = render(&spec, &scene).unwrap();
        assert_eq!(img.get_pixel(48, 48).0, [220, 30, 30]);
        assert_eq!(img.get_pixel(16, 16).0, BACKGROUND);
    }

    #[test]
    fn split_fraction_is_respected() {
        let n_test = (0..100).filter(|&i| is_test(i, 0.2)).count();
        assert_eq!(n_test, 20);
        assert!(!(0..10).any(|i| is_test(i, 0.0)));
    }

    #[test]
    fn rejects_zero_images_and_bad_specs() {
        let spec = SyntheticSceneSpec::default();
        assert!(generate_samples(&spec, 0, 1).is_err());
        let bad = SyntheticSceneSpec {
            grid: 4,
            ..SyntheticSceneSpec::default()
        };
        assert!(generate_samples(&bad, 3, 1).is_err());
    }
}
