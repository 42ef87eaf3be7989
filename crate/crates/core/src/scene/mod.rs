//! Scene inventories, the procedural episode generator and fold splitting.

mod gen;
mod split;
mod vocab;

use thiserror::Error;

pub use gen::{generate_corpus, generate_corpus_with, stratified_counts, GenConfig};
pub use split::{round_half_away, split_corpus};
pub use vocab::{
    default_vocabularies, load_vocabularies, write_vocabularies, Capability, ObjectSpec,
    SceneVocabulary,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SceneError {
    #[error("bad vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("{scene}: cannot fill a robot vocabulary of {wanted} actions ({available} available)")]
    VocabTooSmall { scene: String, wanted: usize, available: usize },
    #[error("{scene}: template `{template}` cannot be instantiated")]
    InfeasibleTemplate { scene: String, template: String },
    #[error("stratum {stratum} would leave the {fold} fold empty")]
    EmptyStratum { stratum: String, fold: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}
