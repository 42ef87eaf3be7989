//! The atomic-action expansion table (`sim/expansions.toml`) and its interpreter.
//!
//! Templates are instantiated per scene from the object capability flags; each
//! resulting [`AtomicAction`] expands against the live world into primitives.

use serde::Deserialize;

use super::world::{Agent, Location, Primitive, SceneModel, StateFlag, Verb, WorldState};
use super::SimError;
use crate::episode::ActionToken;
use crate::scene::{Capability, SceneVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjRef {
    Slot(usize),
    WashStation,
    SliceTool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceExpr {
    Obj(ObjRef),
    Loc(ObjRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    On(ObjRef, PlaceExpr),
    Flag(ObjRef, StateFlag),
    AgentAt(PlaceExpr),
    Placed(ObjRef),
    OnReceptacle(ObjRef),
    Reachable(ObjRef),
    Exists(ObjRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMacro {
    Goto(PlaceExpr),
    Fetch(ObjRef),
    Put(ObjRef, PlaceExpr),
    EnsureAt(ObjRef, PlaceExpr),
    Stage(ObjRef, PlaceExpr),
    Toggle(ObjRef),
    Apply(Verb, ObjRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionTemplate {
    pub verb: String,
    pub token: String,
    pub slots: Vec<Capability>,
    pub pre: Vec<Predicate>,
    pub post: Vec<Predicate>,
    pub targets: Vec<PlaceExpr>,
    pub steps: Vec<StepMacro>,
}

/// One instantiated atomic action of a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomicAction {
    pub token: ActionToken,
    pub template: usize,
    pub args: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTable {
    pub templates: Vec<ActionTemplate>,
    pub source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    action: Vec<RawTemplate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    verb: String,
    token: String,
    slots: Vec<Capability>,
    pre: Vec<String>,
    post: Vec<String>,
    targets: Vec<String>,
    steps: Vec<String>,
}

pub(crate) const DEFAULT_TABLE: &str = include_str!("../../data/sim/expansions.toml");

fn parse_obj(text: &str) -> Result<ObjRef, String> {
    match text {
        "@wash_station" => Ok(ObjRef::WashStation),
        "@slice_tool" => Ok(ObjRef::SliceTool),
        _ => text
            .strip_prefix('$')
            .and_then(|n| n.parse().ok())
            .map(ObjRef::Slot)
            .ok_or_else(|| format!("bad object reference `{text}`")),
    }
}

fn parse_place(text: &str) -> Result<PlaceExpr, String> {
    match text.strip_prefix("loc(").and_then(|t| t.strip_suffix(')')) {
        Some(inner) => parse_obj(inner).map(PlaceExpr::Loc),
        None => parse_obj(text).map(PlaceExpr::Obj),
    }
}

fn parse_predicate(text: &str) -> Result<Predicate, String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    match words.as_slice() {
        ["on", x, p] => Ok(Predicate::On(parse_obj(x)?, parse_place(p)?)),
        ["flag", x, f] => Ok(Predicate::Flag(
            parse_obj(x)?,
            StateFlag::parse(f).ok_or_else(|| format!("unknown flag `{f}`"))?,
        )),
        ["agent_at", p] => Ok(Predicate::AgentAt(parse_place(p)?)),
        ["placed", x] => Ok(Predicate::Placed(parse_obj(x)?)),
        ["on_receptacle", x] => Ok(Predicate::OnReceptacle(parse_obj(x)?)),
        ["reachable", x] => Ok(Predicate::Reachable(parse_obj(x)?)),
        ["exists", x] => Ok(Predicate::Exists(parse_obj(x)?)),
        _ => Err(format!("bad predicate `{text}`")),
    }
}

fn parse_step(text: &str) -> Result<StepMacro, String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    match words.as_slice() {
        ["goto", p] => Ok(StepMacro::Goto(parse_place(p)?)),
        ["fetch", x] => Ok(StepMacro::Fetch(parse_obj(x)?)),
        ["put", x, p] => Ok(StepMacro::Put(parse_obj(x)?, parse_place(p)?)),
        ["ensure_at", x, p] => Ok(StepMacro::EnsureAt(parse_obj(x)?, parse_place(p)?)),
        ["stage", x, p] => Ok(StepMacro::Stage(parse_obj(x)?, parse_place(p)?)),
        ["toggle", x] => Ok(StepMacro::Toggle(parse_obj(x)?)),
        ["apply", v, x] => Ok(StepMacro::Apply(
            Verb::parse(v).ok_or_else(|| format!("unknown verb `{v}`"))?,
            parse_obj(x)?,
        )),
        _ => Err(format!("bad step `{text}`")),
    }
}

impl ExpansionTable {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let file: TableFile =
            toml::from_str(text).map_err(|e| SimError::BadData(format!("expansion table: {e}")))?;
        let mut templates = Vec::new();
        for raw in file.action {
            let ctx = |e: String| SimError::BadData(format!("expansion `{}`: {e}", raw.verb));
            let collect_pred = |v: &[String]| -> Result<Vec<Predicate>, SimError> {
                v.iter().map(|p| parse_predicate(p).map_err(ctx)).collect()
            };
            let template = ActionTemplate {
                pre: collect_pred(&raw.pre)?,
                post: collect_pred(&raw.post)?,
                targets: raw
                    .targets
                    .iter()
                    .map(|p| parse_place(p).map_err(ctx))
                    .collect::<Result<_, _>>()?,
                steps: raw
                    .steps
                    .iter()
                    .map(|s| parse_step(s).map_err(ctx))
                    .collect::<Result<_, _>>()?,
                verb: raw.verb.clone(),
                token: raw.token.clone(),
                slots: raw.slots.clone(),
            };
            for i in 0..template.slots.len() {
                if !template.token.contains(&format!("{{{i}}}")) {
                    return Err(ctx(format!("token pattern lacks slot {{{i}}}")));
                }
            }
            if template.post.is_empty() {
                return Err(ctx("empty postcondition".into()));
            }
            templates.push(template);
        }
        Ok(ExpansionTable { templates, source: text.to_string() })
    }

    pub fn shipped() -> Self {
        ExpansionTable::from_toml(DEFAULT_TABLE).expect("shipped expansion table is valid")
    }

    pub fn template(&self, action: &AtomicAction) -> &ActionTemplate {
        &self.templates[action.template]
    }

    /// All atomic actions the vocabulary's enabled templates produce, in
    /// template order then object order.
    pub fn instantiate(
        &self,
        vocab: &SceneVocabulary,
        model: &SceneModel,
    ) -> Result<Vec<AtomicAction>, SimError> {
        let mut out = Vec::new();
        for name in &vocab.templates {
            let (t_idx, template) = self
                .templates
                .iter()
                .enumerate()
                .find(|(_, t)| &t.verb == name)
                .ok_or_else(|| SimError::BadData(format!("{}: no expansion for template `{name}`", vocab.scene)))?;
            let candidates: Vec<Vec<usize>> = template
                .slots
                .iter()
                .map(|cap| {
                    model
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|(_, o)| o.has(*cap))
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect();
            let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
            for slot in &candidates {
                let mut next = Vec::new();
                for prefix in &combos {
                    for &o in slot.iter().filter(|o| !prefix.contains(o)) {
                        let mut args = prefix.clone();
                        args.push(o);
                        next.push(args);
                    }
                }
                combos = next;
            }
            for args in combos {
                let mut token = template.token.clone();
                for (i, &arg) in args.iter().enumerate() {
                    token = token.replace(&format!("{{{i}}}"), model.name(arg));
                }
                let token = ActionToken::new(token)
                    .map_err(|e| SimError::BadData(format!("{}: {e}", vocab.scene)))?;
                out.push(AtomicAction { token, template: t_idx, args });
            }
        }
        Ok(out)
    }
}

/// Interprets templates against a concrete world for one agent.
pub(crate) struct Interp<'a> {
    pub model: &'a SceneModel,
    pub table: &'a ExpansionTable,
    pub action: &'a AtomicAction,
    pub agent: Agent,
}

impl Interp<'_> {
    fn obj(&self, r: ObjRef) -> Option<usize> {
        match r {
            ObjRef::Slot(i) => self.action.args.get(i).copied(),
            ObjRef::WashStation => self.model.wash_station,
            ObjRef::SliceTool => self.model.slice_tool,
        }
    }

    fn place(&self, world: &WorldState, p: PlaceExpr) -> Option<usize> {
        match p {
            PlaceExpr::Obj(r) => self.obj(r),
            PlaceExpr::Loc(r) => self.obj(r).map(|o| world.place_of(o)),
        }
    }

    pub fn holds(&self, world: &WorldState, pred: &Predicate) -> bool {
        let agent = self.agent;
        match *pred {
            Predicate::On(x, p) => match (self.obj(x), self.place(world, p)) {
                (Some(x), Some(p)) => world.location(x) == Location::On(p),
                _ => false,
            },
            Predicate::Flag(x, f) => self.obj(x).is_some_and(|x| world.has_flag(x, f)),
            Predicate::AgentAt(p) => self.place(world, p) == Some(world.position(agent)),
            Predicate::Placed(x) => self.obj(x).is_some_and(|x| {
                matches!(world.location(x), Location::On(_) | Location::Fixed)
                    || world.location(x) == Location::Held(agent)
            }),
            Predicate::OnReceptacle(x) => {
                self.obj(x).is_some_and(|x| matches!(world.location(x), Location::On(_)))
            }
            Predicate::Reachable(x) => self.obj(x).is_some_and(|x| {
                matches!(world.location(x), Location::On(_) | Location::Fixed)
                    || world.location(x) == Location::Held(agent)
            }),
            Predicate::Exists(x) => self.obj(x).is_some(),
        }
    }

    fn template(&self) -> &ActionTemplate {
        self.table.template(self.action)
    }

    pub fn postcondition_holds(&self, world: &WorldState) -> bool {
        self.template().post.iter().all(|p| self.holds(world, p))
    }

    /// Places this step occupies in `world` (used by the conflict rule).
    pub fn targets(&self, world: &WorldState) -> Vec<usize> {
        self.template().targets.iter().filter_map(|&p| self.place(world, p)).collect()
    }

    /// Checks preconditions, then expands and applies the step to `world`.
    pub fn execute(&self, world: &mut WorldState) -> Result<Vec<Primitive>, SimError> {
        let token = || self.action.token.to_string();
        for pred in &self.template().pre {
            if !self.holds(world, pred) {
                return Err(SimError::PreconditionUnsatisfiable {
                    token: token(),
                    predicate: format!("{pred:?}"),
                });
            }
        }
        let mut out = Vec::new();
        for step in &self.template().steps {
            self.run_macro(world, *step, &mut out)?;
        }
        Ok(out)
    }

    fn emit(&self, world: &mut WorldState, prim: Primitive, out: &mut Vec<Primitive>) -> Result<(), SimError> {
        self.model.apply(world, self.agent, prim).map_err(|reason| SimError::PrimitiveFailed {
            token: self.action.token.to_string(),
            primitive: self.model.display(&prim).to_string(),
            reason,
        })?;
        out.push(prim);
        Ok(())
    }

    fn goto(&self, world: &mut WorldState, place: usize, out: &mut Vec<Primitive>) -> Result<(), SimError> {
        if world.position(self.agent) != place {
            self.emit(world, Primitive::MoveTo(place), out)?;
        }
        Ok(())
    }

    fn fetch(&self, world: &mut WorldState, x: usize, out: &mut Vec<Primitive>) -> Result<(), SimError> {
        if world.location(x) != Location::Held(self.agent) {
            self.goto(world, world.place_of(x), out)?;
            self.emit(world, Primitive::Pickup(x), out)?;
        }
        Ok(())
    }

    fn run_macro(&self, world: &mut WorldState, step: StepMacro, out: &mut Vec<Primitive>) -> Result<(), SimError> {
        let unresolved = || SimError::PreconditionUnsatisfiable {
            token: self.action.token.to_string(),
            predicate: format!("{step:?} refers to a missing object"),
        };
        let obj = |r| self.obj(r).ok_or_else(unresolved);
        match step {
            StepMacro::Goto(p) => {
                let place = self.place(world, p).ok_or_else(unresolved)?;
                self.goto(world, place, out)
            }
            StepMacro::Fetch(x) => self.fetch(world, obj(x)?, out),
            StepMacro::Put(x, p) => {
                let place = self.place(world, p).ok_or_else(unresolved)?;
                self.emit(world, Primitive::Put(obj(x)?, place), out)
            }
            StepMacro::EnsureAt(x, p) => {
                let x = obj(x)?;
                let place = self.place(world, p).ok_or_else(unresolved)?;
                let loc = world.location(x);
                if loc == Location::On(place) || loc == Location::Held(self.agent) {
                    self.goto(world, place, out)
                } else {
                    self.fetch(world, x, out)?;
                    self.goto(world, place, out)?;
                    self.emit(world, Primitive::Put(x, place), out)
                }
            }
            StepMacro::Stage(x, p) => {
                let x = obj(x)?;
                let place = self.place(world, p).ok_or_else(unresolved)?;
                if world.location(x) == Location::On(place) {
                    return Ok(());
                }
                self.fetch(world, x, out)?;
                self.goto(world, place, out)?;
                self.emit(world, Primitive::Put(x, place), out)
            }
            StepMacro::Toggle(x) => self.emit(world, Primitive::Toggle(obj(x)?), out),
            StepMacro::Apply(v, x) => self.emit(world, Primitive::Apply(v, obj(x)?), out),
        }
    }

    /// Goal terms from this step's postcondition, resolved against `world`.
    pub fn resolved_post(&self, world: &WorldState) -> Vec<super::GoalTerm> {
        use super::GoalTerm;
        let mut terms = Vec::new();
        for pred in &self.template().post {
            match *pred {
                Predicate::On(x, p) => {
                    if let (Some(x), Some(p)) = (self.obj(x), self.place(world, p)) {
                        terms.push(GoalTerm::Located(x, Location::On(p)));
                    }
                }
                Predicate::Flag(x, f) => {
                    if let Some(x) = self.obj(x) {
                        terms.push(GoalTerm::Flag(x, f));
                    }
                }
                Predicate::AgentAt(p) => {
                    if let Some(p) = self.place(world, p) {
                        terms.push(GoalTerm::AgentAt(self.agent, p));
                    }
                }
                _ => {}
            }
        }
        for &arg in &self.action.args {
            if self.model.objects[arg].has(Capability::Pickupable) {
                terms.push(GoalTerm::Located(arg, world.location(arg)));
            }
        }
        terms.dedup();
        terms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_place_expressions() {
        assert_eq!(parse_place("$1"), Ok(PlaceExpr::Obj(ObjRef::Slot(1))));
        assert_eq!(parse_place("loc($0)"), Ok(PlaceExpr::Loc(ObjRef::Slot(0))));
        assert_eq!(parse_place("@wash_station"), Ok(PlaceExpr::Obj(ObjRef::WashStation)));
        assert!(parse_place("loc(x)").is_err());
    }

    #[test]
    fn rejects_unknown_step_macro() {
        assert!(parse_step("teleport $0").is_err());
        assert!(parse_predicate("flag $0 shiny").is_err());
    }

    #[test]
    fn shipped_table_parses() {
        let table = ExpansionTable::shipped();
        let verbs: Vec<&str> = table.templates.iter().map(|t| t.verb.as_str()).collect();
        assert_eq!(verbs, ["find", "bring", "wash", "cut", "toggle", "clean"]);
    }
}
