//! Beam-search decoding of walks and path@k / target@k recall.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{actor_forward, ActionTable, PolicyParams};
use crate::dataset::Sample;
use crate::encoder::StateEncoder;
use crate::env::{Action, EnvState, Environment, PathStep};
use crate::error::{Error, Result};
use crate::fte::render_fte;
use crate::graph::{EntityId, KnowledgeGraph, RelationId};
use crate::transe::EmbeddingTable;

pub const DEFAULT_KS: [usize; 5] = [1, 3, 5, 10, 25];

/// Anything that assigns log-probabilities to a state's legal actions.
pub trait PathPolicy: Sync {
    fn log_probs(&self, state: &EnvState, actions: &[Action]) -> Result<Vec<f64>>;
}

/// The trained actor behind a frozen encoder.
pub struct AgentPolicy<'a> {
    pub params: &'a PolicyParams,
    pub encoder: &'a dyn StateEncoder,
    pub embeddings: &'a EmbeddingTable,
    pub graph: &'a KnowledgeGraph,
}

impl PathPolicy for AgentPolicy<'_> {
    fn log_probs(&self, state: &EnvState, actions: &[Action]) -> Result<Vec<f64>> {
        let s = self.encoder.encode(&render_fte(state, self.graph))?;
        let table = ActionTable::build(actions, self.embeddings, None)?;
        Ok(actor_forward(self.params, &s, &table)?.log_probs)
    }
}

/// Uniform over the legal actions.
pub struct UniformPolicy;

impl PathPolicy for UniformPolicy {
    fn log_probs(&self, _state: &EnvState, actions: &[Action]) -> Result<Vec<f64>> {
        Ok(vec![-(actions.len() as f64).ln(); actions.len()])
    }
}

/// Policy defined by a closure over `(state, actions)`; handy for fixtures.
pub struct FnPolicy<F>(pub F);

impl<F> PathPolicy for FnPolicy<F>
where
    F: Fn(&EnvState, &[Action]) -> Vec<f64> + Sync,
{
    fn log_probs(&self, state: &EnvState, actions: &[Action]) -> Result<Vec<f64>> {
        Ok((self.0)(state, actions))
    }
}

impl<P: PathPolicy + Send> PathPolicy for Arc<P> {
    fn log_probs(&self, state: &EnvState, actions: &[Action]) -> Result<Vec<f64>> {
        (**self).log_probs(state, actions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub edges: Vec<PathStep>,
    /// Sum of step log-probabilities.
    pub score: f64,
    pub terminal: EntityId,
}

impl ScoredPath {
    fn key(&self) -> Vec<(u32, u32, u32)> {
        self.edges.iter().map(|e| (e.head.0, e.relation.0, e.tail.0)).collect()
    }
}

/// Descending score, then ascending lexicographic `(head, relation, tail)` ids.
pub fn path_order(a: &ScoredPath, b: &ScoredPath) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.key().cmp(&b.key()))
}

struct Partial {
    state: EnvState,
    path: ScoredPath,
    done: bool,
}

/// Level-wise beam search over at most `max_steps` hops.
///
/// At each level, finished paths compete with the expansions of unfinished
/// ones and the best `width` survive under [`path_order`].
pub fn beam_decode(policy: &dyn PathPolicy, env: &Environment<'_>, sample: &Sample, width: usize) -> Result<Vec<ScoredPath>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let start = env.reset(sample)?;
    let mut beams = vec![Partial {
        path: ScoredPath { edges: Vec::new(), score: 0.0, terminal: start.current },
        state: start,
        done: false,
    }];
    while beams.iter().any(|b| !b.done) {
        let mut next = Vec::new();
        for beam in beams {
            if beam.done {
                next.push(beam);
                continue;
            }
            let actions = env.legal_actions(&beam.state);
            let lps = policy.log_probs(&beam.state, &actions)?;
            for (a, lp) in actions.iter().zip(lps) {
                let step = env.step(&beam.state, a, sample.goal)?;
                let mut path = beam.path.clone();
                path.edges.push(*step.state.path.last().expect("step appends an edge"));
                path.score += lp;
                path.terminal = step.state.current;
                next.push(Partial { state: step.state, path, done: step.done });
            }
        }
        next.sort_by(|a, b| path_order(&a.path, &b.path));
        next.truncate(width);
        beams = next;
    }
    Ok(beams.into_iter().map(|b| b.path).collect())
}

/// All complete walks with their scores, sorted by [`path_order`]. Exponential; for tests and oracles.
pub fn enumerate_paths(policy: &dyn PathPolicy, env: &Environment<'_>, sample: &Sample) -> Result<Vec<ScoredPath>> {
    fn rec(
        policy: &dyn PathPolicy,
        env: &Environment<'_>,
        sample: &Sample,
        state: &EnvState,
        path: ScoredPath,
        out: &mut Vec<ScoredPath>,
    ) -> Result<()> {
        let actions = env.legal_actions(state);
        let lps = policy.log_probs(state, &actions)?;
        for (a, lp) in actions.iter().zip(lps) {
            let step = env.step(state, a, sample.goal)?;
            let mut p = path.clone();
            p.edges.push(*step.state.path.last().expect("edge"));
            p.score += lp;
            p.terminal = step.state.current;
            if step.done {
                out.push(p);
            } else {
                rec(policy, env, sample, &step.state, p, out)?;
            }
        }
        Ok(())
    }
    let start = env.reset(sample)?;
    let mut out = Vec::new();
    let root = ScoredPath { edges: Vec::new(), score: 0.0, terminal: start.current };
    rec(policy, env, sample, &start, root, &mut out)?;
    out.sort_by(path_order);
    Ok(out)
}

/// Probability that a sampled walk ends on the goal.
pub fn target_probability(policy: &dyn PathPolicy, env: &Environment<'_>, sample: &Sample) -> Result<f64> {
    Ok(enumerate_paths(policy, env, sample)?
        .iter()
        .filter(|p| p.terminal == sample.goal)
        .map(|p| p.score.exp())
        .sum())
}

fn strip_equal<T, F: Fn(&T) -> RelationId>(xs: &[T], rel: F) -> &[T] {
    let mut end = xs.len();
    while end > 0 && rel(&xs[end - 1]).is_equal() {
        end -= 1;
    }
    &xs[..end]
}

/// True iff the predicted edges, minus trailing `Equal`s, spell out the gold `(relation, entity)` sequence.
pub fn match_path(predicted: &ScoredPath, gold: &[(RelationId, EntityId)]) -> bool {
    let pred = strip_equal(&predicted.edges, |e| e.relation);
    let gold = strip_equal(gold, |g| g.0);
    pred.len() == gold.len() && pred.iter().zip(gold).all(|(p, g)| p.relation == g.0 && p.tail == g.1)
}

/// Whether the gold walk survives the environment's out-degree truncation.
pub fn gold_reachable(env: &Environment<'_>, sample: &Sample) -> bool {
    let mut v = sample.start;
    for (hop, &(r, t)) in sample.gold_path.iter().enumerate() {
        if !env.actions_at(v, hop).iter().any(|a| a.relation == r && a.destination == t) {
            return false;
        }
        v = t;
    }
    true
}

/// Per-sample outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    /// 1-based rank of the first gold-matching path.
    pub path_rank: Option<usize>,
    /// 1-based rank of the goal among deduplicated terminals.
    pub target_rank: Option<usize>,
    pub gold_truncated: bool,
    pub top: Vec<ScoredPath>,
}

pub fn score_sample(policy: &dyn PathPolicy, env: &Environment<'_>, sample: &Sample, width: usize) -> Result<SampleResult> {
    let top = beam_decode(policy, env, sample, width)?;
    let path_rank = top.iter().position(|p| match_path(p, &sample.gold_path)).map(|i| i + 1);
    let mut terminals: Vec<EntityId> = Vec::new();
    for p in &top {
        if !terminals.contains(&p.terminal) {
            terminals.push(p.terminal);
        }
    }
    let target_rank = terminals.iter().position(|&t| t == sample.goal).map(|i| i + 1);
    Ok(SampleResult {
        sample_id: sample.sample_id.clone(),
        path_rank,
        target_rank,
        gold_truncated: !gold_reachable(env, sample),
        top,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub path_at_k: BTreeMap<usize, f64>,
    pub target_at_k: BTreeMap<usize, f64>,
    pub n_samples: usize,
    pub beam_width: usize,
    /// Samples whose gold walk was cut by out-degree truncation (always misses on path@k).
    pub truncated_gold: usize,
}

impl EvalReport {
    pub fn from_results(results: &[SampleResult], ks: &[usize], width: usize) -> Self {
        let n = results.len();
        let frac = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        let mut path_at_k = BTreeMap::new();
        let mut target_at_k = BTreeMap::new();
        for &k in ks {
            path_at_k.insert(k, frac(results.iter().filter(|r| r.path_rank.is_some_and(|x| x <= k)).count()));
            target_at_k.insert(k, frac(results.iter().filter(|r| r.target_rank.is_some_and(|x| x <= k)).count()));
        }
        let report = Self {
            path_at_k,
            target_at_k,
            n_samples: n,
            beam_width: width,
            truncated_gold: results.iter().filter(|r| r.gold_truncated).count(),
        };
        assert!(report.is_k_monotone(), "recall must be non-decreasing in k");
        report
    }

    pub fn is_k_monotone(&self) -> bool {
        let mono = |m: &BTreeMap<usize, f64>| m.values().zip(m.values().skip(1)).all(|(a, b)| a <= b);
        mono(&self.path_at_k) && mono(&self.target_at_k)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ks: Vec<usize> = self.path_at_k.keys().copied().collect();
        write!(f, "{:<8}", "metric")?;
        for k in &ks {
            write!(f, " {:>8}", format!("@{k}"))?;
        }
        writeln!(f)?;
        for (name, m) in [("path", &self.path_at_k), ("target", &self.target_at_k)] {
            write!(f, "{name:<8}")?;
            for k in &ks {
                write!(f, " {:>8.2}", 100.0 * m[k])?;
            }
            writeln!(f)?;
        }
        write!(f, "samples {} | beam width {} | gold cut by truncation {}", self.n_samples, self.beam_width, self.truncated_gold)
    }
}

/// Scores every sample with beam width `width` and reports recall at each `k`.
pub fn evaluate(
    policy: &dyn PathPolicy,
    env: &Environment<'_>,
    samples: &[Sample],
    width: usize,
    ks: &[usize],
    workers: usize,
) -> Result<(EvalReport, Vec<SampleResult>)> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if width < max_k {
        return Err(Error::Config(format!("beam width {width} is smaller than the largest k {max_k}")));
    }
    let results: Vec<SampleResult> = if workers <= 1 || samples.len() < 2 {
        samples.iter().map(|s| score_sample(policy, env, s, width)).collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|c| scope.spawn(move || c.iter().map(|s| score_sample(policy, env, s, width)).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().flatten().collect())
        })?
    };
    Ok((EvalReport::from_results(&results, ks, width), results))
}

fn triple_json(g: &KnowledgeGraph, e: &PathStep) -> String {
    serde_json::to_string(&[g.entity_name(e.head), g.relation_name(e.relation), g.entity_name(e.tail)])
        .expect("strings serialize")
}

/// Case-study block: FTE, gold path and the top predicted walk.
pub fn render_case(g: &KnowledgeGraph, env: &Environment<'_>, sample: &Sample, result: &SampleResult) -> Result<String> {
    let state = env.reset(sample)?;
    let mut v = sample.start;
    let gold: Vec<String> = sample
        .gold_path
        .iter()
        .map(|&(r, t)| {
            let s = triple_json(g, &PathStep { head: v, relation: r, tail: t });
            v = t;
            s
        })
        .collect();
    let gold_text = if gold.len() == 1 { gold[0].clone() } else { format!("[{}]", gold.join(",")) };
    let predicted = result
        .top
        .first()
        .map(|p| format!("[{}]", p.edges.iter().map(|e| triple_json(g, e)).collect::<Vec<_>>().join(", ")))
        .unwrap_or_else(|| "[]".into());
    let verdict = if result.path_rank == Some(1) { "Success" } else { "Failed" };
    Ok(format!(
        "{verdict}\nFTE\n{}\nGround Truth Path\n{gold_text}\nReasoning Path\n{predicted}",
        render_fte(&state, g)
    ))
}
