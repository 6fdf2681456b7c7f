//! Dataset ingestion, vocabularies, QA concatenation, complementary-pair
//! indexing, the synthetic shapes dataset and seeded batching.

pub mod dataset;
pub mod ingest;
pub mod manifest;
pub mod records;
pub mod synthetic;
pub mod vocab;

pub use dataset::{chw_to_rgb, make_batches, rgb_to_chw, BatchConfig, Dataset, StepBatch, TextBatch};
pub use manifest::{DatasetMeta, ManifestRecord, RecordKind, Split};
pub use records::{
    concatenate_qa, index_complementary_pairs, majority_answer, CaptionRecord,
    ComplementaryPair, ComplementaryPairIndex, QARecord, MAX_TEXT_LENGTH,
};
pub use synthetic::{generate_synthetic_dataset, Scene, ShapeKind, SyntheticSceneSpec};
pub use vocab::{tokenize, detokenize, Vocabulary, END_ID, PAD_ID, UNK_ID};
