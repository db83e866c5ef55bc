//! FactChain: two-hop retrieval questions where a bad first query poisons the
//! rest of the episode.
//!
//! Chain `c` of the knowledge base links `org_c --founder--> per_x
//! --hometown--> city_y`. The question asks for the hometown of the founder
//! of `org_c`. The first valid search anchors the session: a `founder` query
//! on `org_d` anchors it to chain `d`, anything else kills it. Later searches
//! only return facts of the anchored chain whose subject has already been
//! retrieved, and an answer only scores when it was retrieved.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::env::{EnvKind, Environment, StepOutcome, NOTHING_HAPPENS};
use crate::rng::stream;
use crate::trajectory::{Role, SUCCESS_REWARD};
use crate::vocab::{TokenId, Vocab};

pub const DEFAULT_MAX_TURNS: u32 = 5;
pub const DEFAULT_KB_SIZE: usize = 8;
pub const MAX_KB_SIZE: usize = 8;
pub const DEFAULT_KB_SEED: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topic {
    Unset,
    Chain(usize),
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Founder,
    Hometown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entity {
    Org(usize),
    Person(usize),
    City(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Query {
    Search(Relation, Entity),
    Answer(Entity),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactState {
    pub chain: usize,
    pub topic: Topic,
    /// Entities that appeared in retrieved facts.
    pub retrieved: Vec<Entity>,
    pub turn: u32,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct FactChain {
    vocab: Vocab,
    kb_size: usize,
    max_turns: u32,
    /// `founder[c]` = person index, `hometown[p]` = city index.
    founder: Vec<usize>,
    hometown: Vec<usize>,
    search_open: TokenId,
    search_close: TokenId,
    answer_open: TokenId,
    answer_close: TokenId,
    openers: Vec<TokenId>,
    relations: Vec<TokenId>,
    entities: Vec<TokenId>,
    search_close_only: Vec<TokenId>,
    answer_close_only: Vec<TokenId>,
}

impl Default for FactChain {
    fn default() -> Self {
        Self::new(DEFAULT_KB_SIZE, DEFAULT_MAX_TURNS, DEFAULT_KB_SEED)
    }
}

fn entity_words(kb: usize) -> Vec<String> {
    let mut out = Vec::new();
    for prefix in ["org", "per", "city"] {
        for i in 0..kb {
            out.push(format!("{prefix}{i}"));
        }
    }
    out
}

impl FactChain {
    /// Generates a knowledge base of `kb_size` chains (1..=8).
    pub fn new(kb_size: usize, max_turns: u32, kb_seed: u64) -> Self {
        assert!((1..=MAX_KB_SIZE).contains(&kb_size), "kb_size must be in 1..=8");
        let ents = entity_words(kb_size);
        let mut words: Vec<&str> = vec![
            "<question>",
            "</question>",
            "<search>",
            "</search>",
            "<information>",
            "</information>",
            "<answer>",
            "</answer>",
            "founder",
            "hometown",
            "no",
            "results",
        ];
        words.extend(NOTHING_HAPPENS);
        words.extend(ents.iter().map(|s| s.as_str()));
        let vocab = Vocab::new(words);
        let mut rng = stream(&[kb_seed, kb_size as u64]);
        let mut founder: Vec<usize> = (0..kb_size).collect();
        let mut hometown: Vec<usize> = (0..kb_size).collect();
        founder.shuffle(&mut rng);
        hometown.shuffle(&mut rng);
        let entities: Vec<TokenId> = ents.iter().map(|w| vocab.id(w)).collect();
        Self {
            search_open: vocab.id("<search>"),
            search_close: vocab.id("</search>"),
            answer_open: vocab.id("<answer>"),
            answer_close: vocab.id("</answer>"),
            openers: vec![vocab.id("<search>"), vocab.id("<answer>")],
            relations: vec![vocab.id("founder"), vocab.id("hometown")],
            search_close_only: vec![vocab.id("</search>")],
            answer_close_only: vec![vocab.id("</answer>")],
            entities,
            vocab,
            kb_size,
            max_turns,
            founder,
            hometown,
        }
    }

    pub fn kb_size(&self) -> usize {
        self.kb_size
    }

    pub fn chain_for_seed(&self, seed: u64) -> usize {
        (seed % self.kb_size as u64) as usize
    }

    pub fn entity_token(&self, e: Entity) -> TokenId {
        let k = self.kb_size;
        let idx = match e {
            Entity::Org(i) => i,
            Entity::Person(i) => k + i,
            Entity::City(i) => 2 * k + i,
        };
        self.entities[idx]
    }

    fn entity_of(&self, id: TokenId) -> Option<Entity> {
        let k = self.kb_size;
        let i = self.entities.iter().position(|&t| t == id)?;
        Some(match i / k {
            0 => Entity::Org(i % k),
            1 => Entity::Person(i % k),
            _ => Entity::City(i % k),
        })
    }

    fn relation_token(&self, r: Relation) -> TokenId {
        match r {
            Relation::Founder => self.relations[0],
            Relation::Hometown => self.relations[1],
        }
    }

    /// Every query the grammar can express.
    pub fn all_queries(&self) -> Vec<Query> {
        let k = self.kb_size;
        let ents: Vec<Entity> = (0..k)
            .map(Entity::Org)
            .chain((0..k).map(Entity::Person))
            .chain((0..k).map(Entity::City))
            .collect();
        let mut out = Vec::new();
        for r in [Relation::Founder, Relation::Hometown] {
            out.extend(ents.iter().map(|&e| Query::Search(r, e)));
        }
        out.extend(ents.iter().map(|&e| Query::Answer(e)));
        out
    }

    pub fn query_tokens(&self, q: Query) -> Vec<TokenId> {
        match q {
            Query::Search(r, e) => vec![
                self.search_open,
                self.relation_token(r),
                self.entity_token(e),
                self.search_close,
            ],
            Query::Answer(e) => vec![self.answer_open, self.entity_token(e), self.answer_close],
        }
    }

    pub fn parse(&self, action: &[TokenId]) -> Option<Query> {
        match action {
            [o, r, e, c] if *o == self.search_open && *c == self.search_close => {
                let rel = match self.relations.iter().position(|t| t == r)? {
                    0 => Relation::Founder,
                    _ => Relation::Hometown,
                };
                Some(Query::Search(rel, self.entity_of(*e)?))
            }
            [o, e, c] if *o == self.answer_open && *c == self.answer_close => {
                Some(Query::Answer(self.entity_of(*e)?))
            }
            _ => None,
        }
    }

    /// The chain whose founder is person `p`.
    fn chain_of_person(&self, p: usize) -> Option<usize> {
        self.founder.iter().position(|&x| x == p)
    }

    pub fn first_hop(&self, chain: usize) -> Query {
        Query::Search(Relation::Founder, Entity::Org(chain))
    }

    pub fn answer_of(&self, chain: usize) -> Entity {
        Entity::City(self.hometown[self.founder[chain]])
    }

    /// `(observation words, next state)`; `None` for inapplicable queries.
    fn apply(&self, s: &FactState, q: Query) -> Option<(Vec<TokenId>, FactState)> {
        let mut n = s.clone();
        let info_open = self.vocab.id("<information>");
        let info_close = self.vocab.id("</information>");
        match q {
            Query::Answer(e) => {
                n.done = true;
                n.success = e == self.answer_of(s.chain) && s.retrieved.contains(&e);
                Some((Vec::new(), n))
            }
            Query::Search(rel, subject) => {
                let fact = match (rel, subject) {
                    (Relation::Founder, Entity::Org(c)) => Some((c, Entity::Person(self.founder[c]))),
                    (Relation::Hometown, Entity::Person(p)) => {
                        self.chain_of_person(p).map(|c| (c, Entity::City(self.hometown[p])))
                    }
                    _ => return None,
                };
                let anchored = match s.topic {
                    Topic::Unset => {
                        n.topic = match (rel, fact) {
                            (Relation::Founder, Some((c, _))) => Topic::Chain(c),
                            _ => Topic::Dead,
                        };
                        n.topic
                    }
                    t => t,
                };
                let visible = match (anchored, fact) {
                    (Topic::Chain(t), Some((c, _))) if t == c => {
                        rel == Relation::Founder || s.retrieved.contains(&subject)
                    }
                    _ => false,
                };
                let mut obs = vec![info_open];
                if let (true, Some((_, value))) = (visible, fact) {
                    obs.extend([self.relation_token(rel), self.entity_token(subject), self.entity_token(value)]);
                    for e in [subject, value] {
                        if !n.retrieved.contains(&e) {
                            n.retrieved.push(e);
                        }
                    }
                } else {
                    obs.extend([self.vocab.id("no"), self.vocab.id("results")]);
                }
                obs.push(info_close);
                Some((obs, n))
            }
        }
    }

    pub fn expert_query(&self, s: &FactState) -> Option<Query> {
        if s.done || s.topic == Topic::Dead {
            return None;
        }
        if let Topic::Chain(t) = s.topic {
            if t != s.chain {
                return None;
            }
        }
        let answer = self.answer_of(s.chain);
        let person = Entity::Person(self.founder[s.chain]);
        Some(if s.retrieved.contains(&answer) {
            Query::Answer(answer)
        } else if s.retrieved.contains(&person) {
            Query::Search(Relation::Hometown, person)
        } else {
            self.first_hop(s.chain)
        })
    }
}

impl Environment for FactChain {
    type State = FactState;

    fn kind(&self) -> EnvKind {
        EnvKind::FactChain
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_turns(&self) -> u32 {
        self.max_turns
    }

    fn reset(&self, task_seed: u64) -> (FactState, Vec<TokenId>) {
        let chain = self.chain_for_seed(task_seed);
        let state = FactState {
            chain,
            topic: Topic::Unset,
            retrieved: Vec::new(),
            turn: 0,
            done: false,
            success: false,
        };
        let v = &self.vocab;
        let obs = vec![
            v.id("<question>"),
            v.id("hometown"),
            v.id("founder"),
            self.entity_token(Entity::Org(chain)),
            v.id("</question>"),
        ];
        (state, obs)
    }

    fn step(&self, state: &FactState, action: &[TokenId]) -> StepOutcome<FactState> {
        if state.done {
            return StepOutcome {
                observation: Vec::new(),
                state: state.clone(),
                done: true,
                reward: if state.success { SUCCESS_REWARD } else { 0.0 },
                invalid: false,
            };
        }
        let applied = self.parse(action).and_then(|q| self.apply(state, q));
        let invalid = applied.is_none();
        let (observation, mut next) = applied.unwrap_or_else(|| {
            let v = &self.vocab;
            let obs = vec![
                v.id("<information>"),
                v.id(NOTHING_HAPPENS[0]),
                v.id(NOTHING_HAPPENS[1]),
                v.id("</information>"),
            ];
            (obs, state.clone())
        });
        next.turn = state.turn + 1;
        if next.turn >= self.max_turns {
            next.done = true;
        }
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
        match prefix {
            [] => &self.openers,
            [o] if *o == self.search_open => &self.relations,
            [o, _] if *o == self.search_open => &self.entities,
            [o, _, _] if *o == self.search_open => &self.search_close_only,
            [o] if *o == self.answer_open => &self.entities,
            [o, _] if *o == self.answer_open => &self.answer_close_only,
            _ => &[],
        }
    }

    fn role_of(&self, prefix: &[TokenId], _token: TokenId) -> Role {
        match prefix {
            [o, ..] if *o == self.search_open && matches!(prefix.len(), 1 | 2) => Role::Action,
            [o] if *o == self.answer_open => Role::Answer,
            _ => Role::Structural,
        }
    }

    fn expert_turn(&self, state: &FactState) -> Option<Vec<TokenId>> {
        self.expert_query(state).map(|q| self.query_tokens(q))
    }

    fn is_done(&self, state: &FactState) -> bool {
        state.done
    }

    fn is_success(&self, state: &FactState) -> bool {
        state.success
    }

    fn turn(&self, state: &FactState) -> u32 {
        state.turn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_is_seed_mod_kb() {
        let env = FactChain::default();
        for s in 0..20 {
            assert_eq!(env.reset(s).0.chain, (s % 8) as usize);
        }
    }

    #[test]
    fn expert_solves_every_chain() {
        let env = FactChain::default();
        for seed in 0..8 {
            let (mut s, _) = env.reset(seed);
            let mut turns = 0;
            while let Some(t) = env.expert_turn(&s) {
                let out = env.step(&s, &t);
                assert!(!out.invalid);
                s = out.state;
                turns += 1;
            }
            assert!(s.success, "seed {seed}");
            assert_eq!(turns, 3);
        }
    }

    #[test]
    fn wrong_first_hop_then_correct_second_hop() {
        let env = FactChain::default();
        let (s, _) = env.reset(2);
        let wrong = Query::Search(Relation::Founder, Entity::Org(5));
        let out = env.step(&s, &env.query_tokens(wrong));
        assert!(!out.invalid);
        let right = env.first_hop(2);
        let out = env.step(&out.state, &env.query_tokens(right));
        assert_eq!(env.render(&out.observation), "<information> no results </information>");
        let person = Entity::Person(env.founder[2]);
        let out = env.step(&out.state, &env.query_tokens(Query::Search(Relation::Hometown, person)));
        assert_eq!(env.render(&out.observation), "<information> no results </information>");
        let out = env.step(&out.state, &env.query_tokens(Query::Answer(env.answer_of(2))));
        assert!(out.done);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn type_mismatch_is_invalid_and_does_not_anchor() {
        let env = FactChain::default();
        let (s, _) = env.reset(1);
        let out = env.step(&s, &env.query_tokens(Query::Search(Relation::Founder, Entity::City(0))));
        assert!(out.invalid);
        assert_eq!(out.state.topic, Topic::Unset);
        assert_eq!(out.state.turn, 1);
    }

    #[test]
    fn malformed_turn_is_invalid() {
        let env = FactChain::default();
        let (s, _) = env.reset(1);
        let out = env.step(&s, &[env.search_open]);
        assert!(out.invalid);
    }
}
