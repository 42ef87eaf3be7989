//! Non-intrusive assistance benchmark: episode corpus, procedural generator,
//! text-level simulator, retrieve-then-rank model, training and metrics.

pub mod embedding;
pub mod episode;
pub mod eval;
pub mod ranker;
pub mod scene;
pub mod sim;
pub mod trainer;
