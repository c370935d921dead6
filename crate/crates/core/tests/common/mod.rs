//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use kgwalk::agent::{init_params, AgentDims, Mlp, PolicyParams};
use kgwalk::dataset::Sample;
use kgwalk::env::{Action, EnvConfig, EnvState, Environment};
use kgwalk::eval::{enumerate_paths, FnPolicy, UniformPolicy};
use kgwalk::graph::{EntityId, GraphConfig, KnowledgeGraph, RelationId};
use kgwalk::transe::{score_vectors, EmbeddingTable, Norm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `A_t = sum_l (gamma lamda)^l delta_{t+l}`, summed term by term inside each episode.
pub fn naive_gae(rewards: &[f64], values: &[f64], next_values: &[f64], dones: &[bool], gamma: f64, lamda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next_values[t] } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut l = 0;
            loop {
                sum += (gamma * lamda).powi(l as i32) * delta[t + l];
                if dones[t + l] || t + l + 1 == n {
                    break;
                }
                l += 1;
            }
            sum
        })
        .collect()
}

/// Dense layers with tanh between them, one multiply-add at a time.
pub fn scalar_mlp(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let last = mlp.layers.len() - 1;
    let mut cur = x.to_vec();
    for (i, layer) in mlp.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.output_dim()];
        for (j, out) in next.iter_mut().enumerate() {
            let mut acc = layer.b[j];
            for (k, &v) in cur.iter().enumerate() {
                acc += layer.w[(j, k)] * v;
            }
            *out = if i == last { acc } else { acc.tanh() };
        }
        cur = next;
    }
    cur
}

/// Softmax over the valid rows of `rows · z`; masked rows get exactly 0.
pub fn scalar_probs(p: &PolicyParams, s: &[f64], rows: &[Vec<f64>], mask: &[bool]) -> Vec<f64> {
    let z = scalar_mlp(&p.actor, s);
    let logits: Vec<f64> = rows.iter().map(|r| r.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
    let max = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| (l - max).exp()).sum();
    logits.iter().zip(mask).map(|(l, &m)| if m { (l - max).exp() / denom } else { 0.0 }).collect()
}

/// Orthogonal init plus noise on every weight and bias, so all terms matter.
pub fn perturbed_params(dims: &AgentDims, seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut p = init_params(dims, seed);
    for layer in p.actor.layers.iter_mut().chain(p.critic.layers.iter_mut()) {
        layer.w.mapv_inplace(|w| w + rng.random_range(-0.5..0.5));
        layer.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    p
}

pub fn graph_of(triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
    KnowledgeGraph::from_named_triples(triples.iter().copied(), &GraphConfig::default()).unwrap()
}

pub fn sample(g: &KnowledgeGraph, id: &str, start: &str, gold: &[(&str, &str)]) -> Sample {
    let gold_path: Vec<(RelationId, EntityId)> =
        gold.iter().map(|(r, e)| (g.relation(r).unwrap(), g.entity(e).unwrap())).collect();
    Sample {
        sample_id: id.into(),
        history: vec![],
        utterance: format!("question {id}"),
        start: g.entity(start).unwrap(),
        goal: gold_path.last().unwrap().1,
        gold_path,
    }
}

/// Random small graph and start sample whose complete walks number between 2 and 50.
pub fn toy_graph(seed: u64) -> (KnowledgeGraph, Sample, EnvConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n_ent = rng.random_range(3..=6);
        let n_rel = rng.random_range(1..=3);
        let n_tri = rng.random_range(2..=6);
        let names: Vec<String> = (0..n_ent).map(|i| format!("e{i}")).collect();
        let rels: Vec<String> = (0..n_rel).map(|i| format!("r{i}")).collect();
        let triples: Vec<(String, String, String)> = (0..n_tri)
            .map(|_| {
                let h = rng.random_range(0..n_ent);
                let t = rng.random_range(0..n_ent);
                (names[h].clone(), rels[rng.random_range(0..n_rel)].clone(), names[t].clone())
            })
            .collect();
        let g = KnowledgeGraph::from_named_triples(
            triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
            &GraphConfig::default(),
        );
        let Ok(g) = g else { continue };
        let start = EntityId(rng.random_range(0..g.entity_count() as u32));
        let Some(&(r, t)) = g.out_edges(start).iter().find(|(r, _)| !r.is_equal()) else { continue };
        let cfg = EnvConfig { equal_at_first_hop: rng.random_bool(0.5), shuffle_seed: seed, ..Default::default() };
        let s = Sample {
            sample_id: format!("toy-{seed}"),
            history: vec![],
            utterance: "walk".into(),
            start,
            goal: t,
            gold_path: vec![(r, t)],
        };
        let env = Environment::new(&g, cfg.clone());
        let count = enumerate_paths(&UniformPolicy, &env, &s).unwrap().len();
        if (2..=50).contains(&count) {
            return (g, s, cfg);
        }
    }
}

/// Pseudo-random normalized log-probabilities keyed on the state and action.
pub fn keyed_policy(salt: u64) -> FnPolicy<impl Fn(&EnvState, &[Action]) -> Vec<f64> + Sync> {
    FnPolicy(move |state: &EnvState, actions: &[Action]| {
        let raw: Vec<f64> = actions
            .iter()
            .map(|a| {
                let key = salt
                    ^ (state.current.0 as u64).wrapping_mul(0x9E37_79B9)
                    ^ (state.step as u64).wrapping_mul(0x85EB_CA6B)
                    ^ (a.relation.0 as u64).wrapping_mul(0xC2B2_AE35)
                    ^ (a.destination.0 as u64).wrapping_mul(0x27D4_EB2F);
                ChaCha8Rng::seed_from_u64(key).random_range(-3.0..3.0)
            })
            .collect();
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + raw.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        raw.iter().map(|x| x - log_z).collect()
    })
}

/// The 20-triple chain `c0 -next-> c1 -> ... -> c20`.
pub fn chain_fixture() -> KnowledgeGraph {
    let names: Vec<String> = (0..=20).map(|i| format!("c{i}")).collect();
    let triples: Vec<(&str, &str, &str)> = (0..20).map(|i| (names[i].as_str(), "next", names[i + 1].as_str())).collect();
    graph_of(&triples)
}

/// Mean over base triples of the tail's rank among all entities, ignoring other true tails.
pub fn filtered_mean_rank(table: &EmbeddingTable, g: &KnowledgeGraph) -> f64 {
    let ranks: Vec<usize> = g
        .triples()
        .iter()
        .map(|tr| {
            let score = |t: EntityId| score_vectors(table.entity(tr.head), table.relation(tr.relation), table.entity(t), Norm::L2);
            let s_true = score(tr.tail);
            1 + g
                .entities()
                .filter(|&e| e != tr.tail && !g.has_edge(tr.head, tr.relation, e))
                .filter(|&e| score(e) < s_true)
                .count()
        })
        .collect();
    ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
}
