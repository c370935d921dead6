//! Deterministic, fully observed MDP over the knowledge graph.
//!
//! A state is the six-tuple (task background, utterance, dialog history,
//! current entity, path history, step). Actions are out-edges of the current
//! entity; `Equal` stops in place. Episodes end after `max_steps` hops or on
//! `Equal`, and only the terminal step is rewarded.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::graph::{EntityId, KnowledgeGraph, RelationId};

pub const DEFAULT_TASK_BACKGROUND: &str = "Performing 2-hop reasoning on the knowledge graph.";

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode is already done")]
    EpisodeDone,
    #[error("action ({relation}, {destination}) is not legal from {current}")]
    IllegalAction { current: EntityId, relation: RelationId, destination: EntityId },
    #[error("unknown start entity {0}")]
    UnknownStart(EntityId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub positive_reward: f64,
    pub negative_reward: f64,
    /// Alternative reading of the reward rule: charge `negative_reward` on every
    /// non-terminal step as well. Off by default.
    pub per_step_penalty: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { positive_reward: 1.0, negative_reward: -1.0, per_step_penalty: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub max_steps: usize,
    pub max_out: usize,
    /// Seed of the per-entity exit-path shuffle.
    pub shuffle_seed: u64,
    /// Offer `Equal` at the first hop too; when false it is only legal from hop 2 on.
    pub equal_at_first_hop: bool,
    pub task_background: String,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 2,
            max_out: 50,
            shuffle_seed: 0,
            equal_at_first_hop: true,
            task_background: DEFAULT_TASK_BACKGROUND.to_owned(),
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub task_background: String,
    pub utterance: String,
    pub history: Vec<String>,
    pub current: EntityId,
    pub path: Vec<PathStep>,
    pub step: usize,
}

impl EnvState {
    pub fn is_stopped(&self) -> bool {
        self.path.last().is_some_and(|s| s.relation.is_equal())
    }

    /// Path-chain integrity: `path.len() == step`, consecutive edges chain and
    /// the last tail is the current entity.
    pub fn check_invariants(&self, start: EntityId) -> bool {
        let chained = self.path.windows(2).all(|w| w[0].tail == w[1].head);
        let starts = self.path.first().is_none_or(|s| s.head == start);
        let current = self.path.last().map_or(self.current == start, |s| s.tail == self.current);
        self.path.len() == self.step && chained && starts && current
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub relation: RelationId,
    pub destination: EntityId,
    /// Row of the action table this action occupies.
    pub table_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Environment<'g> {
    graph: &'g KnowledgeGraph,
    config: EnvConfig,
}

impl<'g> Environment<'g> {
    pub fn new(graph: &'g KnowledgeGraph, config: EnvConfig) -> Self {
        assert!(config.max_steps >= 1 && config.max_out >= 1, "max_steps and max_out must be positive");
        Self { graph, config }
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reset(&self, sample: &Sample) -> Result<EnvState, EnvError> {
        if !self.graph.contains_entity(sample.start) {
            return Err(EnvError::UnknownStart(sample.start));
        }
        Ok(EnvState {
            task_background: self.config.task_background.clone(),
            utterance: sample.utterance.clone(),
            history: sample.history.clone(),
            current: sample.start,
            path: Vec::new(),
            step: 0,
        })
    }

    pub fn is_done(&self, state: &EnvState) -> bool {
        state.step >= self.config.max_steps || state.is_stopped()
    }

    /// Legal actions of the state with table indices `0..k`.
    pub fn legal_actions(&self, state: &EnvState) -> Vec<Action> {
        self.actions_at(state.current, state.step)
    }

    /// Action set of entity `v` at hop `step`; a pure function of the graph and config.
    pub fn actions_at(&self, v: EntityId, step: usize) -> Vec<Action> {
        let mut edges = self.graph.out_edges_of(v, self.config.max_out, self.config.shuffle_seed);
        if step == 0 && !self.config.equal_at_first_hop && edges.len() > 1 {
            edges.retain(|(r, _)| !r.is_equal());
        }
        edges
            .into_iter()
            .enumerate()
            .map(|(i, (relation, destination))| Action { relation, destination, table_index: i })
            .collect()
    }

    pub fn step(&self, state: &EnvState, action: &Action, goal: EntityId) -> Result<StepResult, EnvError> {
        if self.is_done(state) {
            return Err(EnvError::EpisodeDone);
        }
        let legal = self
            .legal_actions(state)
            .iter()
            .any(|a| a.relation == action.relation && a.destination == action.destination);
        if !legal {
            return Err(EnvError::IllegalAction {
                current: state.current,
                relation: action.relation,
                destination: action.destination,
            });
        }
        let mut next = state.clone();
        next.path.push(PathStep { head: state.current, relation: action.relation, tail: action.destination });
        next.current = action.destination;
        next.step += 1;
        let done = self.is_done(&next);
        let reward = self.reward(&next, done, goal);
        Ok(StepResult { state: next, reward, done })
    }

    fn reward(&self, state: &EnvState, done: bool, goal: EntityId) -> f64 {
        let r = &self.config.reward;
        match (done, state.current == goal) {
            (true, true) => r.positive_reward,
            (true, false) => r.negative_reward,
            (false, _) if r.per_step_penalty => r.negative_reward,
            (false, _) => 0.0,
        }
    }
}

/// A complete (or in-progress) rollout of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub sample_id: String,
    pub start: EntityId,
    pub goal: EntityId,
    pub gold_path: Vec<(RelationId, EntityId)>,
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub done: bool,
}

impl Episode {
    pub fn begin(env: &Environment<'_>, sample: &Sample) -> Result<Self, EnvError> {
        Ok(Self {
            sample_id: sample.sample_id.clone(),
            start: sample.start,
            goal: sample.goal,
            gold_path: sample.gold_path.clone(),
            states: vec![env.reset(sample)?],
            actions: Vec::new(),
            rewards: Vec::new(),
            done: false,
        })
    }

    pub fn state(&self) -> &EnvState {
        self.states.last().expect("episode has an initial state")
    }

    /// Applies `action` and records it; returns `(reward, done)`.
    pub fn advance(&mut self, env: &Environment<'_>, action: Action) -> Result<(f64, bool), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let StepResult { state, reward, done } = env.step(self.state(), &action, self.goal)?;
        self.done = done;
        self.actions.push(action);
        self.rewards.push(reward);
        self.states.push(state);
        Ok((reward, done))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub sample_id: String,
    pub step: usize,
    pub current: String,
    pub relation: String,
    pub destination: String,
    pub reward: f64,
    pub done: bool,
}

impl Episode {
    pub fn trace(&self, graph: &KnowledgeGraph) -> Vec<TraceRecord> {
        self.actions
            .iter()
            .enumerate()
            .map(|(t, a)| TraceRecord {
                sample_id: self.sample_id.clone(),
                step: t,
                current: graph.entity_name(self.states[t].current).to_owned(),
                relation: graph.relation_name(a.relation).to_owned(),
                destination: graph.entity_name(a.destination).to_owned(),
                reward: self.rewards[t],
                done: self.done && t + 1 == self.actions.len(),
            })
            .collect()
    }

    pub fn write_trace<W: Write>(&self, graph: &KnowledgeGraph, mut w: W) -> std::io::Result<()> {
        for rec in self.trace(graph) {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Multi-turn wrapper: each new turn resets from the entity the previous turn ended on,
/// with the previous utterance and response folded into the dialog history.
#[derive(Clone, Debug)]
pub struct Session {
    task_background: String,
    history: Vec<String>,
    current: EntityId,
}

impl Session {
    pub fn new(env: &Environment<'_>, start: EntityId, history: Vec<String>) -> Self {
        Self { task_background: env.config.task_background.clone(), history, current: start }
    }

    pub fn begin_turn(&self, utterance: &str) -> EnvState {
        EnvState {
            task_background: self.task_background.clone(),
            utterance: utterance.to_owned(),
            history: self.history.clone(),
            current: self.current,
            path: Vec::new(),
            step: 0,
        }
    }

    pub fn finish_turn(&mut self, final_state: &EnvState, user_text: &str, assistant_text: &str) {
        self.history.push(format!("user: {user_text}"));
        self.history.push(format!("assistant: {assistant_text}"));
        self.current = final_state.current;
    }

    pub fn history(&self) -> &[String] {
        &self.history
    }

    pub fn current(&self) -> EntityId {
        self.current
    }
}
