//! World state, primitive steps and per-scene models.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::expansion::{AtomicAction, ExpansionTable};
use super::SimError;
use crate::episode::Scene;
use crate::scene::{Capability, ObjectSpec, SceneVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Human,
    Robot,
}

impl Agent {
    fn slot(self) -> usize {
        match self {
            Agent::Human => 0,
            Agent::Robot => 1,
        }
    }

    pub fn holder_name(self) -> &'static str {
        match self {
            Agent::Human => "agent_human",
            Agent::Robot => "agent_robot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    /// Sitting on a receptacle (object index).
    On(usize),
    Held(Agent),
    /// Receptacles and appliances do not move.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateFlag {
    Washed,
    Sliced,
    Toasted,
    On,
    Clean,
    Open,
}

impl StateFlag {
    pub const ALL: [StateFlag; 6] = [
        StateFlag::Washed,
        StateFlag::Sliced,
        StateFlag::Toasted,
        StateFlag::On,
        StateFlag::Clean,
        StateFlag::Open,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StateFlag::Washed => "washed",
            StateFlag::Sliced => "sliced",
            StateFlag::Toasted => "toasted",
            StateFlag::On => "on",
            StateFlag::Clean => "clean",
            StateFlag::Open => "open",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        StateFlag::ALL.into_iter().find(|f| f.as_str() == text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Wash,
    Slice,
    Toast,
    Clean,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Wash => "wash",
            Verb::Slice => "slice",
            Verb::Toast => "toast",
            Verb::Clean => "clean",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        [Verb::Wash, Verb::Slice, Verb::Toast, Verb::Clean]
            .into_iter()
            .find(|v| v.as_str() == text)
    }
}

/// One simulator-executed micro-action. Object arguments are scene indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    MoveTo(usize),
    Pickup(usize),
    Put(usize, usize),
    Toggle(usize),
    Apply(Verb, usize),
}

/// Objects' locations, state flags and agent positions for one scene.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    locations: Vec<Location>,
    flags: Vec<u8>,
    agent_pos: [usize; 2],
}

impl WorldState {
    pub fn location(&self, obj: usize) -> Location {
        self.locations[obj]
    }

    pub fn set_location(&mut self, obj: usize, loc: Location) {
        self.locations[obj] = loc;
    }

    pub fn has_flag(&self, obj: usize, flag: StateFlag) -> bool {
        self.flags[obj] & flag.bit() != 0
    }

    pub fn set_flag(&mut self, obj: usize, flag: StateFlag, value: bool) {
        if value {
            self.flags[obj] |= flag.bit();
        } else {
            self.flags[obj] &= !flag.bit();
        }
    }

    pub fn position(&self, agent: Agent) -> usize {
        self.agent_pos[agent.slot()]
    }

    pub fn set_position(&mut self, agent: Agent, place: usize) {
        self.agent_pos[agent.slot()] = place;
    }

    pub fn held_by(&self, agent: Agent) -> Option<usize> {
        self.locations.iter().position(|l| *l == Location::Held(agent))
    }

    /// The place where `obj` currently is: its receptacle, its holder's position,
    /// or itself for fixed objects.
    pub fn place_of(&self, obj: usize) -> usize {
        match self.locations[obj] {
            Location::On(r) => r,
            Location::Held(agent) => self.position(agent),
            Location::Fixed => obj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub scene: String,
    pub human_start: String,
    pub robot_start: String,
    #[serde(default)]
    pub wash_station: Option<String>,
    #[serde(default)]
    pub slice_tool: Option<String>,
    pub placement: BTreeMap<String, String>,
}

impl Layout {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::BadData(format!("layout: {e}")))
    }
}

pub(crate) const DEFAULT_LAYOUT_FILES: [&str; 4] = [
    include_str!("../../data/sim/layouts/kitchen.toml"),
    include_str!("../../data/sim/layouts/bedroom.toml"),
    include_str!("../../data/sim/layouts/livingroom.toml"),
    include_str!("../../data/sim/layouts/bathroom.toml"),
];

pub fn default_layouts() -> Vec<Layout> {
    DEFAULT_LAYOUT_FILES
        .iter()
        .map(|t| Layout::from_toml(t).expect("shipped layout is valid"))
        .collect()
}

/// A scene's objects, canonical initial world and instantiated atomic actions.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub scene: Scene,
    pub objects: Vec<ObjectSpec>,
    index: HashMap<String, usize>,
    pub wash_station: Option<usize>,
    pub slice_tool: Option<usize>,
    pub initial: WorldState,
    pub actions: Vec<AtomicAction>,
    token_index: HashMap<String, usize>,
}

impl SceneModel {
    pub fn build(
        vocab: &SceneVocabulary,
        layout: &Layout,
        table: &ExpansionTable,
    ) -> Result<Self, SimError> {
        let bad = |msg: String| SimError::BadData(format!("{}: {msg}", vocab.scene));
        if layout.scene != vocab.scene.as_str() {
            return Err(bad(format!("layout is for `{}`", layout.scene)));
        }
        let objects = vocab.objects.clone();
        let index: HashMap<String, usize> =
            objects.iter().enumerate().map(|(i, o)| (o.name.clone(), i)).collect();
        let lookup = |name: &str| index.get(name).copied().ok_or_else(|| bad(format!("unknown object `{name}`")));
        let place = |name: &str| -> Result<usize, SimError> {
            let i = lookup(name)?;
            if objects[i].is_place() {
                Ok(i)
            } else {
                Err(bad(format!("`{name}` is not a place")))
            }
        };

        let mut locations = vec![Location::Fixed; objects.len()];
        for (i, obj) in objects.iter().enumerate() {
            if obj.has(Capability::Pickupable) {
                let target = layout
                    .placement
                    .get(&obj.name)
                    .ok_or_else(|| bad(format!("no placement for `{}`", obj.name)))?;
                let r = lookup(target)?;
                if !objects[r].has(Capability::Receptacle) {
                    return Err(bad(format!("`{target}` is not a receptacle")));
                }
                locations[i] = Location::On(r);
            }
        }
        for name in layout.placement.keys() {
            let i = lookup(name)?;
            if !objects[i].has(Capability::Pickupable) {
                return Err(bad(format!("placement for fixed object `{name}`")));
            }
        }
        let wash_station = layout.wash_station.as_deref().map(place).transpose()?;
        let slice_tool = layout.slice_tool.as_deref().map(lookup).transpose()?;
        if let Some(tool) = slice_tool {
            if !objects[tool].has(Capability::Pickupable) {
                return Err(bad("slice tool must be pickupable".into()));
            }
        }
        let initial = WorldState {
            locations,
            flags: vec![0; objects.len()],
            agent_pos: [place(&layout.human_start)?, place(&layout.robot_start)?],
        };

        let mut model = SceneModel {
            scene: vocab.scene,
            objects,
            index,
            wash_station,
            slice_tool,
            initial,
            actions: Vec::new(),
            token_index: HashMap::new(),
        };
        model.actions = table.instantiate(vocab, &model)?;
        for (i, action) in model.actions.iter().enumerate() {
            if model.token_index.insert(action.token.as_str().to_string(), i).is_some() {
                return Err(bad(format!("token `{}` has more than one expansion", action.token)));
            }
        }
        Ok(model)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, obj: usize) -> &str {
        &self.objects[obj].name
    }

    pub fn action(&self, token: &str) -> Option<&AtomicAction> {
        self.token_index.get(token).map(|&i| &self.actions[i])
    }

    pub fn action_index(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    pub fn location_name(&self, world: &WorldState, obj: usize) -> String {
        match world.location(obj) {
            Location::On(r) => self.name(r).to_string(),
            Location::Held(agent) => agent.holder_name().to_string(),
            Location::Fixed => self.name(obj).to_string(),
        }
    }

    pub fn display<'a>(&'a self, prim: &'a Primitive) -> PrimitiveDisplay<'a> {
        PrimitiveDisplay { model: self, prim }
    }

    /// Applies one primitive for `agent`, enforcing its local preconditions.
    pub fn apply(&self, world: &mut WorldState, agent: Agent, prim: Primitive) -> Result<(), String> {
        let pos = world.position(agent);
        let obj = |i: usize| &self.objects[i];
        match prim {
            Primitive::MoveTo(p) => {
                if !obj(p).is_place() {
                    return Err(format!("`{}` is not a place", self.name(p)));
                }
                world.set_position(agent, p);
            }
            Primitive::Pickup(x) => {
                if !obj(x).has(Capability::Pickupable) {
                    return Err(format!("`{}` is not pickupable", self.name(x)));
                }
                if let Some(h) = world.held_by(agent) {
                    return Err(format!("hands full with `{}`", self.name(h)));
                }
                match world.location(x) {
                    Location::On(r) if r == pos => world.set_location(x, Location::Held(agent)),
                    Location::On(_) => return Err(format!("`{}` is not here", self.name(x))),
                    _ => return Err(format!("`{}` is not on a receptacle", self.name(x))),
                }
            }
            Primitive::Put(x, p) => {
                if world.location(x) != Location::Held(agent) {
                    return Err(format!("not holding `{}`", self.name(x)));
                }
                if !obj(p).has(Capability::Receptacle) {
                    return Err(format!("`{}` is not a receptacle", self.name(p)));
                }
                if pos != p {
                    return Err(format!("not at `{}`", self.name(p)));
                }
                world.set_location(x, Location::On(p));
            }
            Primitive::Toggle(x) => {
                if !obj(x).has(Capability::Toggleable) {
                    return Err(format!("`{}` is not toggleable", self.name(x)));
                }
                if world.place_of(x) != pos {
                    return Err(format!("`{}` is out of reach", self.name(x)));
                }
                world.set_flag(x, StateFlag::On, true);
            }
            Primitive::Apply(verb, x) => {
                let in_hand_or_here = |w: &WorldState| {
                    w.location(x) == Location::Held(agent) || w.location(x) == Location::On(pos)
                };
                match verb {
                    Verb::Wash => {
                        if !obj(x).has(Capability::Washable) {
                            return Err(format!("`{}` is not washable", self.name(x)));
                        }
                        if Some(pos) != self.wash_station || !in_hand_or_here(world) {
                            return Err(format!("`{}` is not at the wash station", self.name(x)));
                        }
                        world.set_flag(x, StateFlag::Washed, true);
                    }
                    Verb::Slice => {
                        if !obj(x).has(Capability::Sliceable) {
                            return Err(format!("`{}` is not sliceable", self.name(x)));
                        }
                        if world.location(x) != Location::On(pos) {
                            return Err(format!("`{}` must lie on a surface here", self.name(x)));
                        }
                        let tool_ok = self.slice_tool.is_some_and(|t| {
                            world.location(t) == Location::On(pos)
                                || world.location(t) == Location::Held(agent)
                        });
                        if !tool_ok {
                            return Err("no cutting tool at hand".into());
                        }
                        world.set_flag(x, StateFlag::Sliced, true);
                    }
                    Verb::Toast => {
                        if !in_hand_or_here(world) {
                            return Err(format!("`{}` is out of reach", self.name(x)));
                        }
                        world.set_flag(x, StateFlag::Toasted, true);
                    }
                    Verb::Clean => {
                        if !obj(x).has(Capability::Receptacle) || pos != x {
                            return Err(format!("cannot clean `{}` from here", self.name(x)));
                        }
                        world.set_flag(x, StateFlag::Clean, true);
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses the textual form produced by [`PrimitiveDisplay`].
    pub fn parse_primitive(&self, text: &str) -> Option<Primitive> {
        let (head, rest) = text.split_once('(')?;
        let args: Vec<&str> = rest.strip_suffix(')')?.split(", ").collect();
        let o = |i: usize| args.get(i).and_then(|n| self.object_index(n));
        match (head, args.len()) {
            ("move_to", 1) => Some(Primitive::MoveTo(o(0)?)),
            ("pickup", 1) => Some(Primitive::Pickup(o(0)?)),
            ("put", 2) => Some(Primitive::Put(o(0)?, o(1)?)),
            ("toggle", 1) => Some(Primitive::Toggle(o(0)?)),
            ("apply", 2) => Some(Primitive::Apply(Verb::parse(args[0])?, o(1)?)),
            _ => None,
        }
    }
}

pub struct PrimitiveDisplay<'a> {
    model: &'a SceneModel,
    prim: &'a Primitive,
}

impl fmt::Display for PrimitiveDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = |i: usize| self.model.name(i);
        match *self.prim {
            Primitive::MoveTo(p) => write!(f, "move_to({})", n(p)),
            Primitive::Pickup(x) => write!(f, "pickup({})", n(x)),
            Primitive::Put(x, p) => write!(f, "put({}, {})", n(x), n(p)),
            Primitive::Toggle(x) => write!(f, "toggle({})", n(x)),
            Primitive::Apply(v, x) => write!(f, "apply({}, {})", v.as_str(), n(x)),
        }
    }
}
