//! Episode records and the line-delimited corpus format.
//!
//! One episode per line, UTF-8 JSON, keys in the fixed order
//! `episode_id`, `scene`, `human_task_seq`, `robot_vocab`, `oracle_labels`,
//! no insignificant whitespace, every record terminated by `\n`.
//! Step indices are 0-based.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The distinguished "offer no assistance" action.
pub const NO_OP: &str = "no_op";

/// Upper bound on oracle labels per episode.
pub const MAX_ORACLE_LABELS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EpisodeError {
    #[error("malformed record on line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("unknown scene `{0}`")]
    UnknownScene(String),
    #[error("duplicate episode id `{0}`")]
    DuplicateEpisodeId(String),
    #[error("episode `{episode_id}`: label step {index} out of range for {len} human steps")]
    LabelOutOfRange { episode_id: String, index: usize, len: usize },
    #[error("episode `{episode_id}`: action `{action}` is not in robot_vocab")]
    ActionNotInVocab { episode_id: String, action: String },
    #[error("invalid action token `{0}`")]
    InvalidToken(String),
    #[error("episode `{episode_id}`: duplicate robot_vocab token `{token}`")]
    DuplicateVocabToken { episode_id: String, token: String },
    #[error("episode `{0}`: robot_vocab must contain no_op")]
    MissingNoOp(String),
    #[error("episode `{episode_id}`: {count} oracle labels (at most 2 allowed)")]
    TooManyLabels { episode_id: String, count: usize },
    #[error("episode `{episode_id}`: two oracle labels share step {index}")]
    OverlappingLabels { episode_id: String, index: usize },
    #[error("episode `{0}`: empty human_task_seq")]
    EmptySequence(String),
    #[error("episode `{episode_id}`: token `{token}` is not in the {scene} vocabulary")]
    TokenNotInScene { episode_id: String, scene: Scene, token: String },
}

/// A lowercase snake-case action token such as `bring_knife_to_countertop`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ActionToken(String);

impl ActionToken {
    pub fn new(text: impl Into<String>) -> Result<Self, EpisodeError> {
        let text = text.into();
        if is_valid_token(&text) {
            Ok(ActionToken(text))
        } else {
            Err(EpisodeError::InvalidToken(text))
        }
    }

    pub fn no_op() -> Self {
        ActionToken(NO_OP.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_no_op(&self) -> bool {
        self.0 == NO_OP
    }
}

impl fmt::Display for ActionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ActionToken {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ActionToken::new(s).map_err(serde::de::Error::custom)
    }
}

/// `[a-z0-9]+(_[a-z0-9]+)*`
pub fn is_valid_token(text: &str) -> bool {
    !text.is_empty()
        && text.split('_').all(|part| {
            !part.is_empty()
                && part
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scene {
    Kitchen,
    Bedroom,
    LivingRoom,
    Bathroom,
}

impl Scene {
    pub const ALL: [Scene; 4] = [Scene::Kitchen, Scene::Bedroom, Scene::LivingRoom, Scene::Bathroom];

    pub fn as_str(self) -> &'static str {
        match self {
            Scene::Kitchen => "kitchen",
            Scene::Bedroom => "bedroom",
            Scene::LivingRoom => "livingroom",
            Scene::Bathroom => "bathroom",
        }
    }

    pub fn parse(text: &str) -> Result<Self, EpisodeError> {
        Scene::ALL
            .into_iter()
            .find(|s| s.as_str() == text)
            .ok_or_else(|| EpisodeError::UnknownScene(text.to_string()))
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Scene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Scene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Scene::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleLabel {
    pub human_step_idx: usize,
    pub best_robot_action: ActionToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub episode_id: String,
    pub scene: Scene,
    pub human_task_seq: Vec<ActionToken>,
    pub robot_vocab: Vec<ActionToken>,
    pub oracle_labels: Vec<OracleLabel>,
}

impl Episode {
    /// Number of human steps `S`.
    pub fn num_steps(&self) -> usize {
        self.human_task_seq.len()
    }

    pub fn vocab_index(&self, token: &ActionToken) -> Option<usize> {
        self.robot_vocab.iter().position(|t| t == token)
    }

    /// Checks every structural invariant that does not need scene data.
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let id = || self.episode_id.clone();
        if self.human_task_seq.is_empty() {
            return Err(EpisodeError::EmptySequence(id()));
        }
        let mut seen = HashSet::new();
        for token in &self.robot_vocab {
            if !seen.insert(token) {
                return Err(EpisodeError::DuplicateVocabToken {
                    episode_id: id(),
                    token: token.to_string(),
                });
            }
        }
        if !self.robot_vocab.iter().any(ActionToken::is_no_op) {
            return Err(EpisodeError::MissingNoOp(id()));
        }
        if self.oracle_labels.len() > MAX_ORACLE_LABELS {
            return Err(EpisodeError::TooManyLabels {
                episode_id: id(),
                count: self.oracle_labels.len(),
            });
        }
        let mut steps = HashSet::new();
        for label in &self.oracle_labels {
            if label.human_step_idx >= self.num_steps() {
                return Err(EpisodeError::LabelOutOfRange {
                    episode_id: id(),
                    index: label.human_step_idx,
                    len: self.num_steps(),
                });
            }
            if !self.robot_vocab.contains(&label.best_robot_action) {
                return Err(EpisodeError::ActionNotInVocab {
                    episode_id: id(),
                    action: label.best_robot_action.to_string(),
                });
            }
            if !steps.insert(label.human_step_idx) {
                return Err(EpisodeError::OverlappingLabels {
                    episode_id: id(),
                    index: label.human_step_idx,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub episodes: Vec<Episode>,
    /// Which fold this corpus represents, when known. Not part of the file format.
    pub split: Option<Split>,
}

impl Corpus {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Corpus { episodes, split: None }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, episode_id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.episode_id == episode_id)
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let mut ids = HashSet::new();
        for episode in &self.episodes {
            episode.validate()?;
            if !ids.insert(episode.episode_id.as_str()) {
                return Err(EpisodeError::DuplicateEpisodeId(episode.episode_id.clone()));
            }
        }
        Ok(())
    }
}

/// Field-level view used to report unknown scenes distinctly from other JSON errors.
#[derive(Deserialize)]
struct RawRecord {
    scene: serde_json::Value,
}

/// Parses and validates a line-delimited corpus.
pub fn parse_corpus(bytes: &[u8]) -> Result<Corpus, EpisodeError> {
    let text = std::str::from_utf8(bytes).map_err(|e| EpisodeError::MalformedRecord {
        line_no: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        reason: "invalid UTF-8".to_string(),
    })?;
    let mut episodes = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let episode: Episode = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(err) => {
                if let Ok(RawRecord { scene: serde_json::Value::String(s) }) =
                    serde_json::from_str::<RawRecord>(line)
                {
                    Scene::parse(&s)?;
                }
                return Err(EpisodeError::MalformedRecord {
                    line_no,
                    reason: err.to_string(),
                });
            }
        };
        episode.validate()?;
        if !ids.insert(episode.episode_id.clone()) {
            return Err(EpisodeError::DuplicateEpisodeId(episode.episode_id));
        }
        episodes.push(episode);
    }
    Ok(Corpus::new(episodes))
}

/// Canonical serialization; `parse_corpus(serialize_corpus(c)) == c` for valid `c`.
pub fn serialize_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for episode in &corpus.episodes {
        serde_json::to_writer(&mut out, episode).expect("episode serialization is infallible");
        out.push(b'\n');
    }
    out
}
