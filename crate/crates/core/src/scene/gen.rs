//! Seeded procedural episode generator.
//!
//! Each labeled episode plants a fetch chain `find_T, bring_T_to_Y` whose bring
//! step the robot can pre-satisfy. The label is `(index of find_T,
//! bring_T_to_Y)`: running the bring before the human starts looking for `T`
//! turns the search into a walk to `Y` and makes the bring step free. Filler
//! blocks use the same templates but their helpers never enter the robot
//! vocabulary, and every distractor is checked by simulation to save no
//! human steps at any step.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Capability, SceneError, SceneVocabulary};
use crate::episode::{ActionToken, Corpus, Episode, OracleLabel, Scene};
use crate::sim::{default_layouts, ExpansionTable, SceneModel, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_episodes: usize,
    /// Fractions of one-label, two-label and zero-label episodes.
    pub label_mix: [f64; 3],
    pub min_len: usize,
    pub max_len: usize,
    /// Inclusive size range of `robot_vocab`, `no_op` included.
    pub vocab_size_range: [usize; 2],
    pub id_prefix: String,
    /// Generation attempts per episode before giving up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 42,
            n_episodes: 2000,
            label_mix: [0.75, 0.20, 0.05],
            min_len: 4,
            max_len: 12,
            vocab_size_range: [24, 40],
            id_prefix: "ep".into(),
            max_attempts: 500,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::BadConfig(m.into()));
        let sum: f64 = self.label_mix.iter().sum();
        if self.label_mix.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return bad("label_mix must be three fractions summing to 1");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.label_mix[1] > 0.0 && self.max_len < 4 {
            return bad("two-label episodes need max_len >= 4");
        }
        let [lo, hi] = self.vocab_size_range;
        if lo < 3 || lo > hi {
            return bad("need 3 <= vocab_size_range[0] <= vocab_size_range[1]");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

/// Splits `n` into integer counts proportional to `fractions` (largest remainder,
/// ties to the earlier class).
pub fn stratified_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Generates a corpus with the shipped layouts and expansion table.
pub fn generate_corpus(config: &GenConfig, vocabs: &[SceneVocabulary]) -> Result<Corpus, SceneError> {
    let sim = Simulator::new(vocabs, &default_layouts(), ExpansionTable::shipped())
        .map_err(|e| SceneError::BadVocabFile(e.to_string()))?;
    generate_corpus_with(config, &sim)
}

pub fn generate_corpus_with(config: &GenConfig, sim: &Simulator) -> Result<Corpus, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let counts = stratified_counts(config.n_episodes, &config.label_mix);
    // Label counts per class in (one, two, zero) order.
    let mut plan: Vec<usize> = Vec::with_capacity(config.n_episodes);
    for (class, &count) in [1usize, 2, 0].iter().zip(&counts) {
        plan.extend(std::iter::repeat_n(*class, count));
    }
    plan.shuffle(&mut rng);

    let mut seen_per_class = [0usize; 3];
    let width = config.n_episodes.saturating_sub(1).to_string().len().max(5);
    let mut episodes = Vec::with_capacity(config.n_episodes);
    for (i, &labels) in plan.iter().enumerate() {
        let slot = &mut seen_per_class[labels];
        let scene = Scene::ALL[*slot % Scene::ALL.len()];
        *slot += 1;
        let id = format!("{}{:0width$}", config.id_prefix, i);
        episodes.push(generate_episode(config, sim, scene, labels, id, &mut rng)?);
    }
    Ok(Corpus::new(episodes))
}

fn generate_episode(
    config: &GenConfig,
    sim: &Simulator,
    scene: Scene,
    labels: usize,
    episode_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, SceneError> {
    let model = sim.scene(scene);
    let mut last_err = None;
    for _ in 0..config.max_attempts {
        let mut builder = Builder::new(sim, model, rng);
        let Some((seq, helpers)) = builder.sequence(config, labels)? else {
            continue;
        };
        let [lo, hi] = config.vocab_size_range;
        let size = rng.random_range(lo..=hi);
        match fill_episode(sim, model, &episode_id, seq, helpers, size, rng) {
            Ok(Some(ep)) => return Ok(ep),
            Ok(None) => {}
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| SceneError::InfeasibleTemplate {
        scene: scene.to_string(),
        template: "bring".into(),
    }))
}

/// A planted helper: the robot action and the index of the step it serves.
struct Helper {
    step: usize,
    action: ActionToken,
}

enum Block {
    Planted(Vec<ActionToken>, ActionToken),
    Filler(Vec<ActionToken>),
}

struct Builder<'a, 'r> {
    sim: &'a Simulator,
    model: &'a SceneModel,
    rng: &'r mut ChaCha8Rng,
    used: HashSet<usize>,
    cleaned: HashSet<usize>,
    cut_present: bool,
    slice_tool_moved: bool,
}

impl<'a, 'r> Builder<'a, 'r> {
    fn new(sim: &'a Simulator, model: &'a SceneModel, rng: &'r mut ChaCha8Rng) -> Self {
        Builder {
            sim,
            model,
            rng,
            used: HashSet::new(),
            cleaned: HashSet::new(),
            cut_present: false,
            slice_tool_moved: false,
        }
    }

    fn token(&self, verb: &str, args: &[usize]) -> Option<ActionToken> {
        let template = self.sim.table().templates.iter().find(|t| t.verb == verb)?;
        let mut text = template.token.clone();
        for (i, &a) in args.iter().enumerate() {
            text = text.replace(&format!("{{{i}}}"), self.model.name(a));
        }
        self.model.action(&text).map(|a| a.token.clone())
    }

    fn objects(&self, cap: Capability) -> Vec<usize> {
        (0..self.model.objects.len()).filter(|&i| self.model.objects[i].has(cap)).collect()
    }

    fn free(&self, cap: Capability) -> Vec<usize> {
        self.objects(cap)
            .into_iter()
            .filter(|i| !self.used.contains(i))
            .filter(|&i| !(self.cut_present && Some(i) == self.model.slice_tool))
            .collect()
    }

    fn initial_receptacle(&self, x: usize) -> Option<usize> {
        match self.model.initial.location(x) {
            crate::sim::Location::On(r) => Some(r),
            _ => None,
        }
    }

    /// `find_X, bring_X_to_Y` for a free pickupable `X` and a receptacle away from it.
    fn fetch_chain(&mut self) -> Option<(usize, Vec<ActionToken>, ActionToken)> {
        let x = *self.free(Capability::Pickupable).choose(self.rng)?;
        let start = self.initial_receptacle(x)?;
        let targets: Vec<usize> =
            self.objects(Capability::Receptacle).into_iter().filter(|&r| r != start).collect();
        let y = *targets.choose(self.rng)?;
        let find = self.token("find", &[x])?;
        let bring = self.token("bring", &[x, y])?;
        self.used.insert(x);
        if Some(x) == self.model.slice_tool {
            self.slice_tool_moved = true;
        }
        let mut steps = vec![find, bring.clone()];
        if Some(y) == self.model.wash_station && self.model.objects[x].has(Capability::Washable) {
            if let Some(wash) = self.token("wash", &[x]) {
                if self.rng.random_bool(0.5) {
                    steps.push(wash);
                }
            }
        }
        Some((y, steps, bring))
    }

    fn filler(&mut self) -> Option<Vec<ActionToken>> {
        let kind = self.rng.random_range(0..8);
        match kind {
            0..=2 => self.fetch_chain().map(|(_, steps, _)| steps),
            3 => {
                let x = *self.free(Capability::Washable).choose(self.rng)?;
                let wash = self.token("wash", &[x])?;
                self.used.insert(x);
                Some(vec![wash])
            }
            4 => {
                if self.slice_tool_moved {
                    return None;
                }
                let x = *self.free(Capability::Sliceable).choose(self.rng)?;
                let cut = self.token("cut", &[x])?;
                self.used.insert(x);
                self.cut_present = true;
                Some(vec![cut])
            }
            5 => {
                let x = *self.free(Capability::Toggleable).choose(self.rng)?;
                let toggle = self.token("toggle", &[x])?;
                self.used.insert(x);
                Some(vec![toggle])
            }
            6 => {
                let options: Vec<usize> = self
                    .objects(Capability::Receptacle)
                    .into_iter()
                    .filter(|r| !self.cleaned.contains(r))
                    .collect();
                let y = *options.choose(self.rng)?;
                let clean = self.token("clean", &[y])?;
                self.cleaned.insert(y);
                Some(vec![clean])
            }
            _ => {
                let x = *self.free(Capability::Pickupable).choose(self.rng)?;
                let start = self.initial_receptacle(x)?;
                let targets: Vec<usize> =
                    self.objects(Capability::Receptacle).into_iter().filter(|&r| r != start).collect();
                let y = *targets.choose(self.rng)?;
                let bring = self.token("bring", &[x, y])?;
                self.used.insert(x);
                if Some(x) == self.model.slice_tool {
                    self.slice_tool_moved = true;
                }
                Some(vec![bring])
            }
        }
    }

    /// Draws a human sequence and its planted helpers; `None` asks for a retry.
    fn sequence(
        &mut self,
        config: &GenConfig,
        labels: usize,
    ) -> Result<Option<(Vec<ActionToken>, Vec<Helper>)>, SceneError> {
        for verb in ["find", "bring"] {
            if !self.sim.table().templates.iter().any(|t| t.verb == verb)
                || !self.model.actions.iter().any(|a| self.sim.table().template(a).verb == verb)
            {
                return Err(SceneError::InfeasibleTemplate {
                    scene: self.model.scene.to_string(),
                    template: verb.into(),
                });
            }
        }
        let target_len = self.rng.random_range(config.min_len..=config.max_len);
        let mut blocks = Vec::new();
        let mut len = 0;
        for _ in 0..labels {
            let Some((_, steps, bring)) = self.fetch_chain() else {
                return Ok(None);
            };
            len += steps.len();
            blocks.push(Block::Planted(steps, bring));
        }
        let mut stalls = 0;
        while len < target_len && stalls < 20 {
            match self.filler() {
                Some(steps) if len + steps.len() <= config.max_len => {
                    len += steps.len();
                    blocks.push(Block::Filler(steps));
                }
                _ => stalls += 1,
            }
        }
        if len < config.min_len || len > config.max_len {
            return Ok(None);
        }
        blocks.shuffle(self.rng);
        let mut seq = Vec::new();
        let mut helpers = Vec::new();
        for block in blocks {
            match block {
                Block::Planted(steps, bring) => {
                    helpers.push(Helper { step: seq.len(), action: bring });
                    seq.extend(steps);
                }
                Block::Filler(steps) => seq.extend(steps),
            }
        }
        Ok(Some((seq, helpers)))
    }
}

/// Builds the robot vocabulary around the planted helpers and verifies every
/// label and distractor by simulation. `None` means the draw was unusable.
fn fill_episode(
    sim: &Simulator,
    model: &SceneModel,
    episode_id: &str,
    seq: Vec<ActionToken>,
    helpers: Vec<Helper>,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Episode>, SceneError> {
    let mut episode = Episode {
        episode_id: episode_id.to_string(),
        scene: model.scene,
        human_task_seq: seq,
        robot_vocab: vec![ActionToken::no_op()],
        oracle_labels: helpers
            .iter()
            .map(|h| OracleLabel { human_step_idx: h.step, best_robot_action: h.action.clone() })
            .collect(),
    };
    let Ok(base) = sim.human_cost(&episode, None) else {
        return Ok(None);
    };
    for label in &episode.oracle_labels {
        let report = match sim.run_assisted(&episode, label.human_step_idx, &label.best_robot_action) {
            Ok(r) => r,
            Err(_) => return Ok(None),
        };
        if report.hss < 1 || !report.success {
            return Ok(None);
        }
    }

    let in_seq: HashSet<&ActionToken> = episode.human_task_seq.iter().collect();
    let seq_objects: HashSet<usize> = episode
        .human_task_seq
        .iter()
        .filter_map(|t| model.action(t.as_str()))
        .flat_map(|a| a.args.iter().copied())
        .collect();
    let mut related = Vec::new();
    let mut other = Vec::new();
    for action in model.actions.iter().filter(|a| !in_seq.contains(&a.token)) {
        if action.args.iter().any(|x| seq_objects.contains(x)) {
            related.push(&action.token);
        } else {
            other.push(&action.token);
        }
    }
    related.shuffle(rng);
    other.shuffle(rng);

    let wanted = size - 1 - helpers.len();
    if related.len() + other.len() < wanted {
        return Err(SceneError::VocabTooSmall {
            scene: model.scene.to_string(),
            wanted: size,
            available: related.len() + other.len() + 1 + helpers.len(),
        });
    }
    let mut distractors = Vec::with_capacity(wanted);
    let (mut ri, mut oi) = (0, 0);
    while distractors.len() < wanted {
        let pick_related = ri < related.len() && (oi >= other.len() || rng.random_bool(0.5));
        let token = if pick_related {
            ri += 1;
            related[ri - 1]
        } else if oi < other.len() {
            oi += 1;
            other[oi - 1]
        } else {
            return Ok(None);
        };
        if is_harmless(sim, &episode, base, token) {
            distractors.push(token.clone());
        }
    }

    let mut rest: Vec<ActionToken> = helpers.into_iter().map(|h| h.action).collect();
    rest.extend(distractors);
    rest.shuffle(rng);
    episode.robot_vocab.extend(rest);
    Ok(Some(episode))
}

/// True when running `token` before any human step saves no human effort.
fn is_harmless(sim: &Simulator, episode: &Episode, base: usize, token: &ActionToken) -> bool {
    (0..episode.num_steps()).all(|s| match sim.human_cost(episode, Some((s, token))) {
        Ok(cost) => cost >= base,
        Err(_) => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::serialize_corpus;
    use crate::scene::default_vocabularies;

    fn small(seed: u64, n: usize) -> Corpus {
        let config = GenConfig { seed, n_episodes: n, ..GenConfig::default() };
        generate_corpus(&config, &default_vocabularies()).unwrap()
    }

    #[test]
    fn label_counts_follow_the_mix_exactly() {
        assert_eq!(stratified_counts(2000, &[0.75, 0.20, 0.05]), vec![1500, 400, 100]);
        assert_eq!(stratified_counts(10, &[0.75, 0.20, 0.05]), vec![8, 2, 0]);
        assert_eq!(stratified_counts(0, &[0.75, 0.20, 0.05]), vec![0, 0, 0]);
        let corpus = small(7, 40);
        let mut hist = [0; 3];
        for ep in &corpus.episodes {
            hist[ep.oracle_labels.len()] += 1;
        }
        assert_eq!(hist, [2, 30, 8]);
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(serialize_corpus(&small(3, 24)), serialize_corpus(&small(3, 24)));
        assert_ne!(serialize_corpus(&small(3, 24)), serialize_corpus(&small(4, 24)));
    }

    #[test]
    fn episodes_are_valid_and_in_scene() {
        let sim = Simulator::shipped();
        let corpus = small(11, 60);
        corpus.validate().unwrap();
        for ep in &corpus.episodes {
            sim.validate_episode(ep).unwrap();
            assert!((4..=12).contains(&ep.num_steps()), "{}", ep.num_steps());
            assert!((24..=40).contains(&ep.robot_vocab.len()));
            assert!(ep.robot_vocab[0].is_no_op());
            if let [a, b] = ep.oracle_labels.as_slice() {
                assert!(a.human_step_idx.abs_diff(b.human_step_idx) > 1);
            }
        }
    }

    #[test]
    fn planted_labels_save_steps() {
        let sim = Simulator::shipped();
        for ep in &small(5, 30).episodes {
            assert!(sim.run_unassisted(ep).unwrap().success);
            for label in &ep.oracle_labels {
                let r = sim.run_assisted(ep, label.human_step_idx, &label.best_robot_action).unwrap();
                assert!(r.hss >= 1 && r.success, "{} {label:?}", ep.episode_id);
            }
        }
    }

    #[test]
    fn rejects_bad_mix() {
        let config = GenConfig { label_mix: [0.5, 0.2, 0.2], ..GenConfig::default() };
        assert!(matches!(
            generate_corpus(&config, &default_vocabularies()),
            Err(SceneError::BadConfig(_))
        ));
    }

    #[test]
    fn oversized_vocab_is_too_small() {
        let config = GenConfig {
            n_episodes: 1,
            vocab_size_range: [400, 400],
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_corpus(&config, &default_vocabularies()),
            Err(SceneError::VocabTooSmall { .. })
        ));
    }
}
