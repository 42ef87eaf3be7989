//! Deterministic text-level household simulator.
//!
//! Human atomic steps expand into primitives through the expansion table and
//! are executed under skip semantics: a step whose postcondition already holds
//! costs nothing. A robot assistance action runs to completion in the window
//! before its chosen human step and is abandoned if it would pick up an object
//! the human holds or put onto a place the human's current step occupies.
//! Every primitive costs one step.

mod expansion;
mod world;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expansion::{
    ActionTemplate, AtomicAction, ExpansionTable, ObjRef, PlaceExpr, Predicate, StepMacro,
};
pub use world::{
    default_layouts, Agent, Layout, Location, Primitive, SceneModel, StateFlag, Verb, WorldState,
};

use crate::episode::{ActionToken, Episode, EpisodeError, Scene};
use crate::scene::{default_vocabularies, SceneVocabulary};
use expansion::Interp;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("no expansion for `{0}`")]
    NoExpansion(String),
    #[error("`{token}`: precondition unsatisfiable ({predicate})")]
    PreconditionUnsatisfiable { token: String, predicate: String },
    #[error("`{token}`: primitive {primitive} failed: {reason}")]
    PrimitiveFailed { token: String, primitive: String, reason: String },
    #[error("execution fault at human step {step}: {source}")]
    ExecutionFault { step: usize, source: Box<SimError> },
    #[error("prediction step {step} outside a {len}-step sequence")]
    InvalidPrediction { step: usize, len: usize },
    #[error("bad simulator data: {0}")]
    BadData(String),
}

/// One conjunct of an episode's success predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalTerm {
    Located(usize, Location),
    Flag(usize, StateFlag),
    AgentAt(Agent, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Goal {
    pub terms: Vec<GoalTerm>,
}

impl Goal {
    pub fn holds(&self, world: &WorldState) -> bool {
        self.terms.iter().all(|t| match *t {
            GoalTerm::Located(x, loc) => world.location(x) == loc,
            GoalTerm::Flag(x, f) => world.has_flag(x, f),
            GoalTerm::AgentAt(a, p) => world.position(a) == p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Index of the human step during (human trace) or before (robot trace) which
    /// the primitive ran.
    pub step: usize,
    pub primitive: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobotOutcome {
    /// No assistance requested (unassisted run or `no_op`).
    Idle,
    Executed,
    /// The action's postcondition already held; nothing to do.
    AlreadySatisfied,
    /// Abandoned because it would contend for the human's object or place.
    Conflict { reason: String },
    /// Abandoned because the robot could not carry it out.
    Infeasible { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub step: usize,
    pub action: ActionToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub episode_id: String,
    pub h_human: usize,
    pub h_assist: usize,
    pub hss: i64,
    pub success: bool,
    pub human_trace: Vec<TraceEntry>,
    pub robot_trace: Vec<TraceEntry>,
    pub skipped_steps: Vec<usize>,
    pub robot_outcome: RobotOutcome,
    pub prediction: Option<PredictionRecord>,
}

struct Execution {
    world: WorldState,
    human: Vec<(usize, Primitive)>,
    robot: Vec<(usize, Primitive)>,
    skipped: Vec<usize>,
    outcome: RobotOutcome,
}

/// Scene models for all four scenes sharing one expansion table.
#[derive(Debug, Clone)]
pub struct Simulator {
    table: ExpansionTable,
    scenes: Vec<SceneModel>,
}

impl Simulator {
    pub fn new(
        vocabs: &[SceneVocabulary],
        layouts: &[Layout],
        table: ExpansionTable,
    ) -> Result<Self, SimError> {
        let mut scenes = Vec::new();
        for scene in Scene::ALL {
            let vocab = vocabs
                .iter()
                .find(|v| v.scene == scene)
                .ok_or_else(|| SimError::BadData(format!("no vocabulary for {scene}")))?;
            let layout = layouts
                .iter()
                .find(|l| l.scene == scene.as_str())
                .ok_or_else(|| SimError::BadData(format!("no layout for {scene}")))?;
            scenes.push(SceneModel::build(vocab, layout, &table)?);
        }
        Ok(Simulator { table, scenes })
    }

    /// Shipped vocabularies, layouts and expansion table.
    pub fn shipped() -> Self {
        Simulator::new(&default_vocabularies(), &default_layouts(), ExpansionTable::shipped())
            .expect("shipped simulator data is consistent")
    }

    /// Loads `sim/expansions.toml` and `sim/layouts/<scene>.toml` under `dir`.
    pub fn load(dir: &Path, vocabs: &[SceneVocabulary]) -> Result<Self, SimError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| SimError::BadData(format!("{}: {e}", p.display())))
        };
        let table = ExpansionTable::from_toml(&read(&dir.join("expansions.toml"))?)?;
        let layouts = Scene::ALL
            .iter()
            .map(|s| Layout::from_toml(&read(&dir.join("layouts").join(format!("{s}.toml")))?))
            .collect::<Result<Vec<_>, _>>()?;
        Simulator::new(vocabs, &layouts, table)
    }

    pub fn table(&self) -> &ExpansionTable {
        &self.table
    }

    pub fn scene(&self, scene: Scene) -> &SceneModel {
        &self.scenes[Scene::ALL.iter().position(|s| *s == scene).expect("scene listed")]
    }

    fn interp<'a>(&'a self, model: &'a SceneModel, token: &str, agent: Agent) -> Result<Interp<'a>, SimError> {
        let action = model.action(token).ok_or_else(|| SimError::NoExpansion(token.to_string()))?;
        Ok(Interp { model, table: &self.table, action, agent })
    }

    /// Primitive list for `token` executed by `agent` from `world` (which is not modified).
    pub fn expand(
        &self,
        scene: Scene,
        token: &ActionToken,
        world: &WorldState,
        agent: Agent,
    ) -> Result<Vec<Primitive>, SimError> {
        let model = self.scene(scene);
        let interp = self.interp(model, token.as_str(), agent)?;
        let mut scratch = world.clone();
        interp.execute(&mut scratch)
    }

    /// Whether `token`'s postcondition holds for `agent` in `world`.
    pub fn postcondition_holds(
        &self,
        scene: Scene,
        token: &ActionToken,
        world: &WorldState,
        agent: Agent,
    ) -> Result<bool, SimError> {
        let model = self.scene(scene);
        Ok(self.interp(model, token.as_str(), agent)?.postcondition_holds(world))
    }

    fn execute(
        &self,
        episode: &Episode,
        world0: &WorldState,
        assist: Option<(usize, &ActionToken)>,
    ) -> Result<Execution, SimError> {
        let model = self.scene(episode.scene);
        let mut world = world0.clone();
        let mut human = Vec::new();
        let mut robot = Vec::new();
        let mut skipped = Vec::new();
        let mut outcome = RobotOutcome::Idle;

        for (step, token) in episode.human_task_seq.iter().enumerate() {
            let fault = |e: SimError| SimError::ExecutionFault { step, source: Box::new(e) };
            let human_step = self.interp(model, token.as_str(), Agent::Human).map_err(fault)?;

            if let Some((s, action)) = assist {
                if s == step && !action.is_no_op() {
                    let robot_step = self.interp(model, action.as_str(), Agent::Robot)?;
                    let (result, prims) = self.robot_window(&world, &human_step, &robot_step);
                    outcome = result;
                    if let Some((next, prims)) = prims {
                        world = next;
                        robot.extend(prims.into_iter().map(|p| (step, p)));
                    }
                }
            }

            if human_step.postcondition_holds(&world) {
                skipped.push(step);
                continue;
            }
            let prims = human_step.execute(&mut world).map_err(fault)?;
            human.extend(prims.into_iter().map(|p| (step, p)));
        }
        Ok(Execution { world, human, robot, skipped, outcome })
    }

    /// Runs the robot action on a scratch copy; returns the new world only if it
    /// completed without contending for the human's resources.
    #[allow(clippy::type_complexity)]
    fn robot_window(
        &self,
        world: &WorldState,
        human_step: &Interp<'_>,
        robot_step: &Interp<'_>,
    ) -> (RobotOutcome, Option<(WorldState, Vec<Primitive>)>) {
        if robot_step.postcondition_holds(world) {
            return (RobotOutcome::AlreadySatisfied, None);
        }
        let model = robot_step.model;
        if let Some(&held) = robot_step
            .action
            .args
            .iter()
            .find(|&&x| world.location(x) == Location::Held(Agent::Human))
        {
            let reason = format!("`{}` is in the human's hand", model.name(held));
            return (RobotOutcome::Conflict { reason }, None);
        }
        let occupied = human_step.targets(world);
        let mut scratch = world.clone();
        let prims = match robot_step.execute(&mut scratch) {
            Ok(p) => p,
            Err(e) => return (RobotOutcome::Infeasible { reason: e.to_string() }, None),
        };
        // Replay to inspect the world as it was when each primitive ran.
        let mut probe = world.clone();
        for prim in &prims {
            let conflict = match *prim {
                Primitive::Pickup(x) => probe.location(x) == Location::Held(Agent::Human),
                Primitive::Put(_, p) => occupied.contains(&p),
                _ => false,
            };
            if conflict {
                let reason = format!(
                    "{} contends with human step `{}`",
                    model.display(prim),
                    human_step.action.token
                );
                return (RobotOutcome::Conflict { reason }, None);
            }
            model
                .apply(&mut probe, Agent::Robot, *prim)
                .expect("replay of a successful expansion");
        }
        (RobotOutcome::Executed, Some((scratch, prims)))
    }

    fn goal_from(&self, episode: &Episode, unassisted: &Execution) -> Result<Goal, SimError> {
        let Some(last) = episode.human_task_seq.last() else {
            return Ok(Goal::default());
        };
        let model = self.scene(episode.scene);
        let interp = self.interp(model, last.as_str(), Agent::Human)?;
        Ok(Goal { terms: interp.resolved_post(&unassisted.world) })
    }

    /// Success predicate: the final step's postcondition plus the final location of
    /// its object arguments, both as established by the unassisted run.
    pub fn goal(&self, episode: &Episode) -> Result<Goal, SimError> {
        let base = self.execute(episode, &self.scene(episode.scene).initial, None)?;
        self.goal_from(episode, &base)
    }

    pub fn check_success(&self, episode: &Episode, world: &WorldState) -> Result<bool, SimError> {
        Ok(self.goal(episode)?.holds(world))
    }

    fn report(
        &self,
        episode: &Episode,
        base: &Execution,
        run: &Execution,
        goal: &Goal,
        prediction: Option<PredictionRecord>,
    ) -> RunReport {
        let model = self.scene(episode.scene);
        let trace = |prims: &[(usize, Primitive)]| {
            prims
                .iter()
                .map(|(step, p)| TraceEntry { step: *step, primitive: model.display(p).to_string() })
                .collect::<Vec<_>>()
        };
        let h_human = base.human.len();
        let h_assist = run.human.len();
        RunReport {
            episode_id: episode.episode_id.clone(),
            h_human,
            h_assist,
            hss: h_human as i64 - h_assist as i64,
            success: goal.holds(&run.world),
            human_trace: trace(&run.human),
            robot_trace: trace(&run.robot),
            skipped_steps: run.skipped.clone(),
            robot_outcome: run.outcome.clone(),
            prediction,
        }
    }

    pub fn run_unassisted(&self, episode: &Episode) -> Result<RunReport, SimError> {
        self.run_unassisted_from(episode, &self.scene(episode.scene).initial)
    }

    pub fn run_unassisted_from(&self, episode: &Episode, world0: &WorldState) -> Result<RunReport, SimError> {
        let base = self.execute(episode, world0, None)?;
        let goal = self.goal_from(episode, &base)?;
        Ok(self.report(episode, &base, &base, &goal, None))
    }

    pub fn run_assisted(
        &self,
        episode: &Episode,
        step: usize,
        action: &ActionToken,
    ) -> Result<RunReport, SimError> {
        self.run_assisted_from(episode, &self.scene(episode.scene).initial, step, action)
    }

    pub fn run_assisted_from(
        &self,
        episode: &Episode,
        world0: &WorldState,
        step: usize,
        action: &ActionToken,
    ) -> Result<RunReport, SimError> {
        if step >= episode.num_steps() {
            return Err(SimError::InvalidPrediction { step, len: episode.num_steps() });
        }
        let base = self.execute(episode, world0, None)?;
        let goal = self.goal_from(episode, &base)?;
        let run = self.execute(episode, world0, Some((step, action)))?;
        let record = PredictionRecord { step, action: action.clone() };
        Ok(self.report(episode, &base, &run, &goal, Some(record)))
    }

    /// Human primitive count of a run, without building traces.
    pub fn human_cost(
        &self,
        episode: &Episode,
        assist: Option<(usize, &ActionToken)>,
    ) -> Result<usize, SimError> {
        Ok(self.execute(episode, &self.scene(episode.scene).initial, assist)?.human.len())
    }

    /// Checks that every token of `episode` belongs to its scene's action inventory.
    pub fn validate_episode(&self, episode: &Episode) -> Result<(), EpisodeError> {
        let model = self.scene(episode.scene);
        for token in episode.human_task_seq.iter().chain(&episode.robot_vocab) {
            if !token.is_no_op() && model.action(token.as_str()).is_none() {
                return Err(EpisodeError::TokenNotInScene {
                    episode_id: episode.episode_id.clone(),
                    scene: episode.scene,
                    token: token.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Final world of an assisted (or, with `None`, unassisted) run.
    pub fn final_world(
        &self,
        episode: &Episode,
        assist: Option<(usize, &ActionToken)>,
    ) -> Result<WorldState, SimError> {
        Ok(self.execute(episode, &self.scene(episode.scene).initial, assist)?.world)
    }
}
