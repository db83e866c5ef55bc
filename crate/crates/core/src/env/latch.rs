//! LatchWorld: household tasks whose outcome hinges on one state change the
//! observations never show.
//!
//! The agent starts in the hall, fetches an object from its source location,
//! performs the template's latent-state action and places the object at the
//! target. Observations report only the current location and task word, so
//! whether the object was heated (or the drawer opened, or the second unit
//! taken) is visible only in the action history.
//!
//! Grammar of a turn: `<action> VERB ARG </action>` where `go`/`open` take a
//! location and every other verb takes the generic object token `obj`.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::{EnvKind, Environment, StepOutcome, NOTHING_HAPPENS};
use crate::trajectory::{Role, SUCCESS_REWARD};
use crate::vocab::{TokenId, Vocab};

pub const DEFAULT_MAX_TURNS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    Pick,
    Look,
    Clean,
    Heat,
    Cool,
    PickTwo,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Pick,
        Template::Look,
        Template::Clean,
        Template::Heat,
        Template::Cool,
        Template::PickTwo,
    ];

    pub fn from_seed(seed: u64) -> Self {
        Self::ALL[(seed % 6) as usize]
    }

    pub fn word(self) -> &'static str {
        match self {
            Template::Pick => "pick",
            Template::Look => "look",
            Template::Clean => "clean",
            Template::Heat => "heat",
            Template::Cool => "cool",
            Template::PickTwo => "picktwo",
        }
    }

    pub fn target(self) -> Location {
        match self {
            Template::Pick => Location::Drawer,
            Template::Look => Location::Desk,
            Template::Clean | Template::Heat | Template::Cool => Location::Table,
            Template::PickTwo => Location::Shelf,
        }
    }

    fn units(self) -> u8 {
        if self == Template::PickTwo {
            2
        } else {
            1
        }
    }

    /// The verb whose effect is invisible but required for success.
    pub fn latent_verb(self) -> Verb {
        match self {
            Template::Pick => Verb::Open,
            Template::Look => Verb::Examine,
            Template::Clean => Verb::Clean,
            Template::Heat => Verb::Heat,
            Template::Cool => Verb::Cool,
            Template::PickTwo => Verb::Take,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Hall,
    Counter,
    Cabinet,
    Microwave,
    Fridge,
    Sink,
    Desk,
    Table,
    Drawer,
    Shelf,
}

impl Location {
    pub const ALL: [Location; 10] = [
        Location::Hall,
        Location::Counter,
        Location::Cabinet,
        Location::Microwave,
        Location::Fridge,
        Location::Sink,
        Location::Desk,
        Location::Table,
        Location::Drawer,
        Location::Shelf,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Location::Hall => "hall",
            Location::Counter => "counter",
            Location::Cabinet => "cabinet",
            Location::Microwave => "microwave",
            Location::Fridge => "fridge",
            Location::Sink => "sink",
            Location::Desk => "desk",
            Location::Table => "table",
            Location::Drawer => "drawer",
            Location::Shelf => "shelf",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Go,
    Take,
    Place,
    Heat,
    Cool,
    Clean,
    Examine,
    Open,
}

impl Verb {
    pub const ALL: [Verb; 8] = [
        Verb::Go,
        Verb::Take,
        Verb::Place,
        Verb::Heat,
        Verb::Cool,
        Verb::Clean,
        Verb::Examine,
        Verb::Open,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Verb::Go => "go",
            Verb::Take => "take",
            Verb::Place => "place",
            Verb::Heat => "heat",
            Verb::Cool => "cool",
            Verb::Clean => "clean",
            Verb::Examine => "examine",
            Verb::Open => "open",
        }
    }

    fn takes_location(self) -> bool {
        matches!(self, Verb::Go | Verb::Open)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Latent {
    Raw,
    Heated,
    Cooled,
    Cleaned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Go(Location),
    Open(Location),
    Obj(Verb),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatchState {
    pub template: Template,
    pub source: Location,
    pub at: Location,
    /// Units of the object held.
    pub held: u8,
    /// Units of the object lying at each location.
    pub units_at: [u8; 10],
    pub latent: Latent,
    pub examined: bool,
    pub drawer_open: bool,
    pub turn: u32,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct LatchWorld {
    vocab: Vocab,
    max_turns: u32,
    action_open: TokenId,
    action_close: TokenId,
    obj: TokenId,
    verbs: Vec<TokenId>,
    locations: Vec<TokenId>,
    start: Vec<TokenId>,
    obj_only: Vec<TokenId>,
    close_only: Vec<TokenId>,
}

impl Default for LatchWorld {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_TURNS)
    }
}

impl LatchWorld {
    pub fn new(max_turns: u32) -> Self {
        let mut words: Vec<&str> = vec!["<action>", "</action>", "<obs>", "</obs>", "obj"];
        words.extend(Verb::ALL.iter().map(|v| v.word()));
        words.extend(Location::ALL.iter().map(|l| l.word()));
        words.extend(Template::ALL.iter().map(|t| t.word()));
        words.extend(["task", "from", "done"]);
        words.extend(NOTHING_HAPPENS);
        let vocab = Vocab::new(words);
        let verbs: Vec<TokenId> = Verb::ALL.iter().map(|v| vocab.id(v.word())).collect();
        let locations: Vec<TokenId> = Location::ALL.iter().map(|l| vocab.id(l.word())).collect();
        Self {
            action_open: vocab.id("<action>"),
            action_close: vocab.id("</action>"),
            obj: vocab.id("obj"),
            start: vec![vocab.id("<action>")],
            obj_only: vec![vocab.id("obj")],
            close_only: vec![vocab.id("</action>")],
            verbs,
            locations,
            vocab,
            max_turns,
        }
    }

    pub fn source_for_seed(seed: u64) -> Location {
        if (seed / 6) % 2 == 0 {
            Location::Counter
        } else {
            Location::Cabinet
        }
    }

    fn verb_of(&self, id: TokenId) -> Option<Verb> {
        self.verbs.iter().position(|&v| v == id).map(|i| Verb::ALL[i])
    }

    fn location_of(&self, id: TokenId) -> Option<Location> {
        self.locations.iter().position(|&l| l == id).map(|i| Location::ALL[i])
    }

    pub fn parse(&self, action: &[TokenId]) -> Option<Command> {
        let [open, verb, arg, close] = action else {
            return None;
        };
        if *open != self.action_open || *close != self.action_close {
            return None;
        }
        let verb = self.verb_of(*verb)?;
        match verb {
            Verb::Go => Some(Command::Go(self.location_of(*arg)?)),
            Verb::Open => Some(Command::Open(self.location_of(*arg)?)),
            v if *arg == self.obj => Some(Command::Obj(v)),
            _ => None,
        }
    }

    pub fn command_tokens(&self, cmd: Command) -> Vec<TokenId> {
        let (verb, arg) = match cmd {
            Command::Go(l) => (Verb::Go, self.vocab.id(l.word())),
            Command::Open(l) => (Verb::Open, self.vocab.id(l.word())),
            Command::Obj(v) => (v, self.obj),
        };
        vec![self.action_open, self.vocab.id(verb.word()), arg, self.action_close]
    }

    /// Applies a parsed command; `None` means inapplicable.
    fn apply(&self, s: &LatchState, cmd: Command) -> Option<LatchState> {
        let mut n = s.clone();
        match cmd {
            Command::Go(l) => {
                if l == s.at {
                    return None;
                }
                n.at = l;
            }
            Command::Open(l) => {
                if l != Location::Drawer || s.at != Location::Drawer {
                    return None;
                }
                n.drawer_open = true;
            }
            Command::Obj(Verb::Take) => {
                let cap = if s.template == Template::PickTwo { 2 } else { 1 };
                if s.units_at[s.at.index()] == 0 || s.held >= cap {
                    return None;
                }
                n.units_at[s.at.index()] -= 1;
                n.held += 1;
            }
            Command::Obj(Verb::Place) => {
                if s.held == 0 || (s.at == Location::Drawer && !s.drawer_open) {
                    return None;
                }
                n.units_at[s.at.index()] += s.held;
                n.held = 0;
                if s.at == s.template.target() && self.goal_met(&n) {
                    n.done = true;
                    n.success = true;
                }
            }
            Command::Obj(v @ (Verb::Heat | Verb::Cool | Verb::Clean)) => {
                let (site, latent) = match v {
                    Verb::Heat => (Location::Microwave, Latent::Heated),
                    Verb::Cool => (Location::Fridge, Latent::Cooled),
                    _ => (Location::Sink, Latent::Cleaned),
                };
                if s.held == 0 || s.at != site {
                    return None;
                }
                n.latent = latent;
            }
            Command::Obj(Verb::Examine) => {
                if s.held == 0 || s.at != Location::Desk {
                    return None;
                }
                n.examined = true;
            }
            Command::Obj(_) => return None,
        }
        Some(n)
    }

    fn goal_met(&self, s: &LatchState) -> bool {
        match s.template {
            Template::Pick => true,
            Template::Look => s.examined,
            Template::Clean => s.latent == Latent::Cleaned,
            Template::Heat => s.latent == Latent::Heated,
            Template::Cool => s.latent == Latent::Cooled,
            Template::PickTwo => s.units_at[Location::Shelf.index()] == 2,
        }
    }

    fn obs(&self, words: &[&str]) -> Vec<TokenId> {
        let mut out = vec![self.vocab.id("<obs>")];
        out.extend(words.iter().map(|w| self.vocab.id(w)));
        out.push(self.vocab.id("</obs>"));
        out
    }

    /// Next command of the reference plan.
    pub fn expert_command(&self, s: &LatchState) -> Option<Command> {
        if s.done {
            return None;
        }
        let t = s.template;
        let total_out = s.held + s.units_at.iter().sum::<u8>();
        if total_out == 0 {
            return None;
        }
        let target = t.target();
        if s.held < t.units() && s.units_at[target.index()] < t.units() {
            let lying = Location::ALL
                .iter()
                .copied()
                .filter(|l| *l != target)
                .find(|l| s.units_at[l.index()] > 0);
            if let Some(l) = lying {
                if s.at != l {
                    return Some(Command::Go(l));
                }
                return Some(Command::Obj(Verb::Take));
            }
        }
        let latent_site = match t {
            Template::Heat if s.latent != Latent::Heated => Some((Location::Microwave, Verb::Heat)),
            Template::Cool if s.latent != Latent::Cooled => Some((Location::Fridge, Verb::Cool)),
            Template::Clean if s.latent != Latent::Cleaned => Some((Location::Sink, Verb::Clean)),
            Template::Look if !s.examined => Some((Location::Desk, Verb::Examine)),
            _ => None,
        };
        if let Some((site, verb)) = latent_site {
            if s.held == 0 {
                return None;
            }
            if s.at != site {
                return Some(Command::Go(site));
            }
            return Some(Command::Obj(verb));
        }
        if s.at != target {
            return Some(Command::Go(target));
        }
        if t == Template::Pick && !s.drawer_open {
            return Some(Command::Open(Location::Drawer));
        }
        Some(Command::Obj(Verb::Place))
    }

    /// Full reference plan from the initial state of `seed`.
    pub fn expert_plan(&self, seed: u64) -> Vec<Command> {
        let (mut s, _) = self.reset(seed);
        let mut plan = Vec::new();
        while let Some(c) = self.expert_command(&s) {
            plan.push(c);
            s = match self.apply(&s, c) {
                Some(n) => n,
                None => break,
            };
            if s.done {
                break;
            }
        }
        plan
    }
}

impl Environment for LatchWorld {
    type State = LatchState;

    fn kind(&self) -> EnvKind {
        EnvKind::LatchWorld
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_turns(&self) -> u32 {
        self.max_turns
    }

    fn reset(&self, task_seed: u64) -> (LatchState, Vec<TokenId>) {
        let template = Template::from_seed(task_seed);
        let source = Self::source_for_seed(task_seed);
        let mut units_at = [0u8; 10];
        units_at[source.index()] = template.units();
        let state = LatchState {
            template,
            source,
            at: Location::Hall,
            held: 0,
            units_at,
            latent: Latent::Raw,
            examined: false,
            drawer_open: false,
            turn: 0,
            done: false,
            success: false,
        };
        let obs = self.obs(&["task", template.word(), "from", source.word()]);
        (state, obs)
    }

    fn step(&self, state: &LatchState, action: &[TokenId]) -> StepOutcome<LatchState> {
        if state.done {
            return StepOutcome {
                observation: Vec::new(),
                state: state.clone(),
                done: true,
                reward: if state.success { SUCCESS_REWARD } else { 0.0 },
                invalid: false,
            };
        }
        let next = self.parse(action).and_then(|c| self.apply(state, c));
        let invalid = next.is_none();
        let mut next = next.unwrap_or_else(|| state.clone());
        next.turn = state.turn + 1;
        if !next.done && next.turn >= self.max_turns {
            next.done = true;
        }
        let observation = if next.success {
            self.obs(&["done"])
        } else if invalid {
            self.obs(&NOTHING_HAPPENS)
        } else {
            self.obs(&[next.at.word(), next.template.word()])
        };
        let reward = if next.success { SUCCESS_REWARD } else { 0.0 };
        StepOutcome {
            observation,
            done: next.done,
            state: next,
            reward,
            invalid,
        }
    }

    fn allowed_next(&self, prefix: &[TokenId]) -> &[TokenId] {
        match prefix.len() {
            0 => &self.start,
            1 => &self.verbs,
            2 => match self.verb_of(prefix[1]) {
                Some(v) if v.takes_location() => &self.locations,
                _ => &self.obj_only,
            },
            3 => &self.close_only,
            _ => &[],
        }
    }

    fn role_of(&self, prefix: &[TokenId], _token: TokenId) -> Role {
        match prefix.len() {
            1 | 2 => Role::Action,
            _ => Role::Structural,
        }
    }

    fn expert_turn(&self, state: &LatchState) -> Option<Vec<TokenId>> {
        self.expert_command(state).map(|c| self.command_tokens(c))
    }

    fn is_done(&self, state: &LatchState) -> bool {
        state.done
    }

    fn is_success(&self, state: &LatchState) -> bool {
        state.success
    }

    fn turn(&self, state: &LatchState) -> u32 {
        state.turn
    }
}
