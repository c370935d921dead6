//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any gating criterion fails.
//!
//! Run a subset with `cargo test -p kgwalk --test acceptance -- A3 A5`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kgwalk::agent::{actor_forward, ActionTable, AgentDims, Mlp, PolicyParams};
use kgwalk::config::RunConfig;
use kgwalk::dataset::{ResolveOptions, Sample};
use kgwalk::encoder::StateEmbedding;
use kgwalk::env::{EnvConfig, EnvState, Environment};
use kgwalk::eval::{
    beam_decode, enumerate_paths, evaluate, target_probability, AgentPolicy, EvalReport, FnPolicy, PathPolicy,
    UniformPolicy,
};
use kgwalk::fte::{render_fte, render_prompt, PromptScheme, SchemeKind};
use kgwalk::graph::{EntityId, GraphConfig, KnowledgeGraph};
use kgwalk::pipeline::{self, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use kgwalk::ppo::{compute_gae, AdvNormalization, PpoConfig, RolloutBuffer, Transition};
use kgwalk::transe::{self, score_gradient, score_vectors, Norm, TransEConfig};
use kgwalk::synth;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::*;

type Check = Result<String, String>;
/// Id, description and check of one acceptance criterion.
type Criterion = (&'static str, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- A1 / A10

const A1_TARGET: f64 = 0.90;
const A1_MAX_STEPS: u64 = 200_000;
const A1_MAX_SECS: f64 = 15.0 * 60.0;
const A1_HIDDEN: usize = 128;

struct SynthRun {
    best_target_at_1: f64,
    first_evals: Vec<f64>,
    env_steps: u64,
    iterations: u64,
    secs: f64,
    uniform_expected: f64,
    digests: BTreeMap<&'static str, String>,
}

fn a1_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.agent.hidden = [A1_HIDDEN, A1_HIDDEN];
    cfg.ppo.max_env_steps = Some(A1_MAX_STEPS);
    // The decay horizon matches the step budget.
    cfg.ppo.iterations = (A1_MAX_STEPS / cfg.ppo.replay_buffer_size as u64) as usize;
    // The step budget, not early stopping, ends the run.
    cfg.ppo.max_patience = cfg.ppo.iterations;
    cfg.ppo.workers = 1;
    cfg
}

fn resolve_all(items: &[kgwalk::dataset::DialogSample], g: &KnowledgeGraph) -> Result<Vec<Sample>, String> {
    items.iter().map(|d| d.resolve(g, &ResolveOptions::default())).collect()
}

fn sha256_file(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn synth_run(dir: &Path) -> Result<SynthRun, String> {
    let cfg = a1_config();
    cfg.validate().map_err(|e| e.to_string())?;
    let corpus = synth::generate(&cfg.synth).map_err(|e| e.to_string())?;
    let g = corpus.graph().map_err(|e| e.to_string())?;
    let train = resolve_all(&corpus.train, &g)?;
    let valid = resolve_all(&corpus.valid, &g)?;
    let t0 = Instant::now();
    let (emb, _) = transe::train(&g, &cfg.transe).map_err(|e| e.to_string())?;
    let encoder = cfg.encoder.build().map_err(|e| e.to_string())?;
    let (outcome, summary) =
        pipeline::train_agent(&cfg, &g, &emb, encoder.as_ref(), &train, &valid, Some(dir)).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();

    let env = Environment::new(&g, cfg.env.clone());
    let mut uniform = 0.0;
    for s in &valid {
        uniform += target_probability(&UniformPolicy, &env, s).map_err(|e| e.to_string())?;
    }
    let mut digests = BTreeMap::new();
    for name in [TRAIN_LOG, BEST_CHECKPOINT, LAST_CHECKPOINT] {
        digests.insert(name, sha256_file(&dir.join(name))?);
    }
    Ok(SynthRun {
        best_target_at_1: summary.best_target_at_1,
        first_evals: outcome.records.iter().take(3).map(|r| r.valid.target_at_1).collect(),
        env_steps: summary.env_steps,
        iterations: summary.iterations,
        secs,
        uniform_expected: uniform / valid.len() as f64,
        digests,
    })
}

fn a1(run: &Result<SynthRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "greedy valid target@1 {:.3} (need >= {A1_TARGET}) after {} iterations, {} env steps, {:.0}s; \
         uniform expected target {:.4}; first evaluations {:?}; hidden {A1_HIDDEN}",
        run.best_target_at_1, run.iterations, run.env_steps, run.secs, run.uniform_expected, run.first_evals
    );
    ensure(run.env_steps <= A1_MAX_STEPS, || format!("step budget exceeded: {detail}"))?;
    ensure(run.secs <= A1_MAX_SECS, || format!("time budget exceeded: {detail}"))?;
    ensure(run.uniform_expected <= run.best_target_at_1 / 5.0, || format!("uniform baseline gap below 5x: {detail}"))?;
    ensure(run.best_target_at_1 >= A1_TARGET, || detail.clone())?;
    Ok(detail)
}

fn a10(first: &Result<SynthRun, String>, dir: &Path) -> Check {
    let first = first.as_ref().map_err(|e| format!("first run failed: {e}"))?;
    let second = synth_run(dir)?;
    for (name, digest) in &first.digests {
        ensure(second.digests[name] == *digest, || format!("{name} differs: {digest} vs {}", second.digests[name]))?;
    }
    Ok(format!("train log and both checkpoints hash-equal across two runs ({} iterations)", second.iterations))
}

// ---------------------------------------------------------------- A2

fn a2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut episodes = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gamma = rng.random_range(0.01..=1.0);
        let lamda = rng.random_range(0.0..=1.0);
        let mut transitions = Vec::new();
        for _ in 0..10 {
            let len = rng.random_range(1..=4);
            let values: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            for t in 0..len {
                let done = t + 1 == len;
                transitions.push(Transition {
                    v_c: EntityId(0),
                    hop: t,
                    s: StateEmbedding::new(vec![]),
                    fte: String::new(),
                    log_prob: 0.0,
                    action_index: 0,
                    mask: vec![true],
                    reward: rng.random_range(-1.0..1.0),
                    value: values[t],
                    next_value: if done { rng.random_range(-2.0..2.0) } else { values[t + 1] },
                    s_next: StateEmbedding::new(vec![]),
                    done,
                });
            }
            episodes += 1;
        }
        let cfg = PpoConfig { gamma, lamda, advantage_normalization: AdvNormalization::Off, ..Default::default() };
        let r: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
        let v: Vec<f64> = transitions.iter().map(|t| t.value).collect();
        let nv: Vec<f64> = transitions.iter().map(|t| t.next_value).collect();
        let d: Vec<bool> = transitions.iter().map(|t| t.done).collect();
        let expected = naive_gae(&r, &v, &nv, &d, gamma, lamda);
        let mut buf = RolloutBuffer { transitions, ..Default::default() };
        compute_gae(&mut buf, &cfg);
        for (i, (a, e)) in buf.advantages.iter().zip(&expected).enumerate() {
            worst = worst.max((a - e).abs());
            ensure((a - e).abs() <= 1e-6, || format!("transition {i}: {a} vs naive {e}"))?;
            ensure((buf.returns[i] - (e + v[i])).abs() <= 1e-6, || format!("return {i} is not advantage + value"))?;
        }
    }
    Ok(format!("{episodes} episodes match the naive sum, max |diff| {worst:.1e}"))
}

// ---------------------------------------------------------------- A3

fn a3() -> Check {
    let dims = AgentDims { state_dim: 8, hidden: [6, 5], edge_dim: 6 };
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = perturbed_params(&dims, seed);
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut mask: Vec<bool> = (0..4).map(|_| rng.random_bool(0.7)).collect();
        if !mask.iter().any(|&m| m) {
            mask[rng.random_range(0..4)] = true;
        }
        let flat = Array2::from_shape_vec((4, 6), rows.concat()).unwrap();
        let table = ActionTable::from_rows(flat, mask.clone()).unwrap();
        let got = actor_forward(&p, &s, &table).map_err(|e| e.to_string())?.probs;
        let want = scalar_probs(&p, &s, &rows, &mask);
        for i in 0..4 {
            worst = worst.max((got[i] - want[i]).abs());
            ensure((got[i] - want[i]).abs() <= 1e-6, || format!("fixture {seed} row {i}: {} vs {}", got[i], want[i]))?;
            ensure(mask[i] || got[i] == 0.0, || format!("fixture {seed}: masked row {i} has {}", got[i]))?;
        }
        let total: f64 = got.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
        ensure((total - 1.0).abs() <= 1e-6, || format!("fixture {seed}: valid mass {total}"))?;
    }
    Ok(format!("100 fixtures (d_s 8, k 4) match the scalar loop, max |diff| {worst:.1e}; masked rows exactly 0"))
}

// ---------------------------------------------------------------- A4

type ParamPick = fn(&mut PolicyParams) -> &mut Mlp;
/// Analytic gradient, the network it belongs to, and the scalar it differentiates.
type GradCase<'a> = (Mlp, ParamPick, &'a dyn Fn(&PolicyParams) -> f64);

fn a4() -> Check {
    // The finite-difference comparison lives in tests/gradients.rs; rerun its core here.
    use kgwalk::agent::{critic_forward, log_prob_gradient, value_gradient};
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let dims = AgentDims { state_dim: 5, hidden: [4, 3], edge_dim: 4 };
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let p = perturbed_params(&dims, seed);
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(2..=5);
        let table =
            ActionTable::from_rows(Array2::from_shape_fn((k, 4), |_| rng.random_range(-1.0..1.0)), vec![true; k]).unwrap();
        let a = rng.random_range(0..k);
        let lp = |q: &PolicyParams| actor_forward(q, &s, &table).unwrap().log_probs[a];
        let v = |q: &PolicyParams| critic_forward(q, &s).unwrap();
        let cases: [GradCase; 2] = [
            (log_prob_gradient(&p, &s, &table, a).unwrap(), |q| &mut q.actor, &lp),
            (value_gradient(&p, &s).unwrap(), |q| &mut q.critic, &v),
        ];
        for (grad, pick, f) in cases {
            for (i, &g) in grad.params().enumerate() {
                let mut plus = p.clone();
                *pick(&mut plus).params_mut().nth(i).unwrap() += STEP;
                let mut minus = p.clone();
                *pick(&mut minus).params_mut().nth(i).unwrap() -= STEP;
                let fd = (f(&plus) - f(&minus)) / (2.0 * STEP);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                worst_abs = worst_abs.max((g - fd).abs());
                if (g - fd).abs() >= 1e-9 {
                    worst = worst.max(rel);
                }
                ensure(rel < TOL || (g - fd).abs() < 1e-9, || format!("fixture {seed} param {i}: {g} vs {fd}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} partial derivatives over 20 fixtures, max relative error {worst:.1e} (max absolute {worst_abs:.1e})"))
}

// ---------------------------------------------------------------- A5

fn a5() -> Check {
    let mut compared = 0usize;
    for seed in 0..50u64 {
        let (g, s, cfg) = toy_graph(seed);
        let env = Environment::new(&g, cfg);
        let keyed = keyed_policy(seed);
        let policies: [(&str, &dyn PathPolicy); 2] = [("keyed", &keyed), ("uniform", &UniformPolicy)];
        for (name, policy) in policies {
            let beam = beam_decode(policy, &env, &s, 50).map_err(|e| e.to_string())?;
            let brute = enumerate_paths(policy, &env, &s).map_err(|e| e.to_string())?;
            ensure(beam.len() == brute.len(), || format!("graph {seed} {name}: {} vs {} paths", beam.len(), brute.len()))?;
            for (i, (b, e)) in beam.iter().zip(&brute).enumerate() {
                ensure(b.edges == e.edges, || format!("graph {seed} {name}: rank {i} differs"))?;
                ensure((b.score - e.score).abs() <= 1e-9, || format!("graph {seed} {name}: rank {i} score"))?;
            }
            compared += brute.len();
        }
    }
    Ok(format!("50 graphs, {compared} ranked paths identical under a keyed and a tie-heavy uniform policy"))
}

// ---------------------------------------------------------------- A6

/// Graph `A -r1-> B -r3-> D`, `A -r2-> C -r3-> D`, `C -r4-> E`; the policy scores a
/// step by its destination only, so every walk's score is hand-computable.
fn metrics_fixture() -> (KnowledgeGraph, Vec<Sample>) {
    let g = graph_of(&[("A", "r1", "B"), ("A", "r2", "C"), ("B", "r3", "D"), ("C", "r3", "D"), ("C", "r4", "E")]);
    let samples = vec![
        sample(&g, "s1", "A", &[("r1", "B"), ("r3", "D")]),
        sample(&g, "s2", "A", &[("r2", "C"), ("r3", "D")]),
        sample(&g, "s3", "A", &[("r2", "C")]),
        sample(&g, "s4", "A", &[("r2", "C"), ("r4", "E")]),
        sample(&g, "s5", "A", &[("r1", "B"), ("~r1", "A")]),
    ];
    (g, samples)
}

fn a6() -> Check {
    let (g, samples) = metrics_fixture();
    let cost = |name: &str| match name {
        "A" => 5.0,
        "B" => 1.0,
        "C" => 2.0,
        "D" => 0.5,
        "E" => 3.0,
        _ => unreachable!(),
    };
    let policy = FnPolicy(|_: &EnvState, actions: &[kgwalk::env::Action]| {
        actions.iter().map(|a| -cost(g.entity_name(a.destination))).collect()
    });
    let env = Environment::new(&g, EnvConfig { equal_at_first_hop: false, ..Default::default() });
    // Walk scores: ABD -1.5, AB(stop) -2, ACD -2.5, AC(stop) -4, ACE -5, ABA -6, ACA -7.
    // Path ranks 1, 3, 4, 5, 6; terminal order D B C E A gives target ranks 1, 1, 3, 4, 5.
    let (report, results) = evaluate(&policy, &env, &samples, 7, &[1, 3, 5], 1).map_err(|e| e.to_string())?;
    let ranks: Vec<(Option<usize>, Option<usize>)> = results.iter().map(|r| (r.path_rank, r.target_rank)).collect();
    let want_ranks = vec![
        (Some(1), Some(1)),
        (Some(3), Some(1)),
        (Some(4), Some(3)),
        (Some(5), Some(4)),
        (Some(6), Some(5)),
    ];
    ensure(ranks == want_ranks, || format!("ranks {ranks:?}"))?;
    let want = |xs: [f64; 3]| BTreeMap::from([(1, xs[0]), (3, xs[1]), (5, xs[2])]);
    ensure(report.path_at_k == want([0.2, 0.4, 0.8]), || format!("path@k {:?}", report.path_at_k))?;
    ensure(report.target_at_k == want([0.4, 0.6, 1.0]), || format!("target@k {:?}", report.target_at_k))?;
    ensure(report.is_k_monotone(), || "not monotone in k".into())?;
    let again = EvalReport::from_results(&results, &[1, 3, 5], 7);
    ensure(again == report, || "report is not a pure function of the results".into())?;
    Ok("path@{1,3,5} = 0.2/0.4/0.8, target@{1,3,5} = 0.4/0.6/1.0 exactly; monotone in k".into())
}

// ---------------------------------------------------------------- A7

fn a7() -> Check {
    let g = chain_fixture();
    ensure(g.triples().len() == 20, || "fixture must have 20 triples".into())?;
    let cfg = TransEConfig { epochs: 200, ..Default::default() };
    let before = filtered_mean_rank(&transe::init_table(&g, &cfg).map_err(|e| e.to_string())?, &g);
    let (trained, _) = transe::train(&g, &cfg).map_err(|e| e.to_string())?;
    let after = filtered_mean_rank(&trained, &g);
    ensure(after * 2.0 <= before, || format!("filtered mean rank {before:.2} -> {after:.2}, less than 2x"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for norm in [Norm::L1, Norm::L2] {
        for _ in 0..20 {
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (h, r, t) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let f32s = |x: &[f64]| x.iter().map(|&y| y as f32).collect::<Vec<f32>>();
            let (hf, rf, tf) = (f32s(&h), f32s(&r), f32s(&t));
            let diff: Vec<f64> = (0..6).map(|i| hf[i] as f64 + rf[i] as f64 - tf[i] as f64).collect();
            let hand = match norm {
                Norm::L1 => diff.iter().map(|x| x.abs()).sum::<f64>(),
                Norm::L2 => diff.iter().map(|x| x * x).sum::<f64>().sqrt(),
            };
            let got = score_vectors(&hf, &rf, &tf, norm);
            worst = worst.max((got - hand).abs() / hand.max(1e-12));
            ensure((got - hand).abs() <= 1e-4 * hand.max(1e-12), || format!("score {got} vs {hand}"))?;

            let grad = score_gradient(&h, &r, &t, norm);
            let f = |x: &[f64]| {
                let d = x.iter().zip(&r).zip(&t).map(|((a, b), c)| a + b - c);
                match norm {
                    Norm::L1 => d.map(f64::abs).sum::<f64>(),
                    Norm::L2 => d.map(|x| x * x).sum::<f64>().sqrt(),
                }
            };
            for i in 0..6 {
                let (mut hp, mut hm) = (h.clone(), h.clone());
                hp[i] += 1e-6;
                hm[i] -= 1e-6;
                let fd = (f(&hp) - f(&hm)) / 2e-6;
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-9);
                worst = worst.max(rel);
                ensure(rel <= 1e-4, || format!("{norm:?} gradient {i}: {} vs {fd}", grad[i]))?;
            }
        }
    }
    Ok(format!("filtered mean rank {before:.2} -> {after:.2}; score and gradient max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- A8

fn a8() -> Check {
    let dims = AgentDims { state_dim: 8, hidden: [7, 5], edge_dim: 6 };
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 800);
        let p = perturbed_params(&dims, seed);
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(2..=12);
        let rows = Array2::from_shape_fn((k, 6), |_| rng.random_range(-2.0..2.0));
        let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
        mask[0] = true;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let shuffled = Array2::from_shape_fn((k, 6), |(i, j)| rows[(perm[i], j)]);
        let shuffled_mask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let a = actor_forward(&p, &s, &ActionTable::from_rows(rows, mask).unwrap()).map_err(|e| e.to_string())?;
        let b = actor_forward(&p, &s, &ActionTable::from_rows(shuffled, shuffled_mask).unwrap()).map_err(|e| e.to_string())?;
        for (i, &src) in perm.iter().enumerate() {
            ensure(b.probs[i].to_bits() == a.probs[src].to_bits(), || format!("fixture {seed}: row {i} not exact"))?;
        }
    }

    // Two exit-shuffle seeds on a real graph induce the same edge distribution.
    let corpus = synth::generate(&synth::SynthConfig { train: 20, valid: 5, ..Default::default() }).map_err(|e| e.to_string())?;
    let g = corpus.graph().map_err(|e| e.to_string())?;
    let emb = transe::EmbeddingTable::random_normal(&g, 16, 16, 3);
    let encoder = kgwalk::encoder::HashEncoder::new(32, true);
    let params = perturbed_params(&AgentDims { state_dim: 32, hidden: [8, 8], edge_dim: 32 }, 9);
    let policy = AgentPolicy { params: &params, encoder: &encoder, embeddings: &emb, graph: &g };
    let samples = resolve_all(&corpus.train, &g)?;
    let by_edge = |seed: u64, s: &Sample| -> Result<BTreeMap<(u32, u32), u64>, String> {
        let env = Environment::new(&g, EnvConfig { shuffle_seed: seed, ..Default::default() });
        let state = env.reset(s).map_err(|e| e.to_string())?;
        let actions = env.legal_actions(&state);
        let lps = policy.log_probs(&state, &actions).map_err(|e| e.to_string())?;
        Ok(actions.iter().zip(lps).map(|(a, lp)| ((a.relation.0, a.destination.0), lp.to_bits())).collect())
    };
    for s in &samples {
        ensure(by_edge(0, s)? == by_edge(12345, s)?, || format!("{}: shuffle order changed probabilities", s.sample_id))?;
    }
    Ok(format!("100 row permutations exact; {} graph states invariant to the exit shuffle seed", samples.len()))
}

// ---------------------------------------------------------------- A9

fn golden(name: &str) -> Result<String, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn a9() -> Check {
    let results = golden_renders()?;
    for (name, got) in &results {
        let want = golden(name)?;
        ensure(*got == want, || format!("{name} differs:\n--- golden\n{want}\n--- rendered\n{got}"))?;
    }
    Ok(format!("{} rendered outputs byte-match their golden files", results.len()))
}

/// `(golden file, rendered text)` pairs.
fn golden_renders() -> Result<Vec<(&'static str, String)>, String> {
    use kgwalk::env::PathStep;
    use kgwalk::eval::{render_case, ScoredPath, SampleResult};

    let mut out = Vec::new();
    let books = graph_of(&[("The Two Princesses of Bamarre", "written_by", "Gail Carson Levine")]);
    let env = Environment::new(&books, EnvConfig::default());
    let mut s = sample(&books, "books", "Gail Carson Levine", &[("~written_by", "The Two Princesses of Bamarre")]);
    s.utterance = "Could you recommend popular books by Gail Carson Levine?".into();
    let state = env.reset(&s).map_err(|e| e.to_string())?;
    out.push(("fte_empty_history.txt", render_fte(&state, &books)));

    let gail = books.entity("Gail Carson Levine").unwrap();
    let book = books.entity("The Two Princesses of Bamarre").unwrap();
    let step = |h, r: &str, t| PathStep { head: h, relation: books.relation(r).unwrap(), tail: t };
    let top = ScoredPath { edges: vec![step(gail, "~written_by", book), step(book, "Equal", book)], score: 0.0, terminal: book };
    let result = SampleResult {
        sample_id: s.sample_id.clone(),
        path_rank: Some(1),
        target_rank: Some(1),
        gold_truncated: false,
        top: vec![top],
    };
    out.push(("case_success.txt", render_case(&books, &env, &s, &result).map_err(|e| e.to_string())?));

    let movies = graph_of(&[
        ("Shooter", "has_genre", "Thriller"),
        ("Nothing to Lose", "has_genre", "Thriller"),
        ("Nothing to Lose", "starred_actors", "Michael McKean"),
    ]);
    let id = |n: &str| movies.entity(n).unwrap();
    let rel = |n: &str| movies.relation(n).unwrap();
    let path = vec![
        PathStep { head: id("Shooter"), relation: rel("has_genre"), tail: id("Thriller") },
        PathStep { head: id("Thriller"), relation: rel("~has_genre"), tail: id("Nothing to Lose") },
        PathStep { head: id("Nothing to Lose"), relation: rel("starred_actors"), tail: id("Michael McKean") },
    ];
    let state = EnvState {
        task_background: kgwalk::env::DEFAULT_TASK_BACKGROUND.into(),
        utterance: "Ok who is in that one?".into(),
        history: vec![
            "user: Can you recommend a movie like the Shooter?".into(),
            "assistant: A movie similar to Shooter is Nothing to Lose.".into(),
        ],
        current: id("Michael McKean"),
        step: path.len(),
        path,
    };
    out.push(("fte_with_history.txt", render_fte(&state, &movies)));

    let teams = graph_of(&[
        ("Mike Sellers", "Game", "Washington Redskins"),
        ("Super Bowl VII", "Runner-up", "Washington Redskins"),
        ("Ladell Betts", "Team", "Washington Redskins"),
        ("Ladell Betts", "Ethnicity", "African American"),
    ]);
    let env = Environment::new(&teams, EnvConfig::default());
    let mut s = sample(&teams, "redskins", "Washington Redskins", &[("~Team", "Ladell Betts")]);
    s.utterance = "What do you think about the Washinton Redskins? Are you a fan?".into();
    let state = env.reset(&s).map_err(|e| e.to_string())?;
    for (kind, file) in [
        (SchemeKind::Standard, "prompt_standard.txt"),
        (SchemeKind::Normal, "prompt_normal.txt"),
        (SchemeKind::OutPathAware, "prompt_opa.txt"),
    ] {
        let mut scheme = PromptScheme::new(kind);
        scheme.examples = vec!["·".into(), "·".into(), "·".into()];
        out.push((file, render_prompt(&scheme, &state, &teams, 50, 0)));
    }
    Ok(out)
}

// ---------------------------------------------------------------- A11

fn a11() -> Check {
    let (Ok(data), Ok(endpoint)) = (std::env::var("KGWALK_ODKG_DIR"), std::env::var("KGWALK_ENDPOINT")) else {
        return Err("skipped: set KGWALK_ODKG_DIR (graph.tsv, train/valid/test.jsonl) and KGWALK_ENDPOINT".into());
    };
    let data = PathBuf::from(data);
    let mut cfg = RunConfig::default();
    cfg.encoder.kind = kgwalk::encoder::EncoderKind::Remote;
    cfg.encoder.endpoint = Some(endpoint);
    let g = pipeline::open_graph(&data.join("graph.tsv"), &GraphConfig::default()).map_err(|e| e.to_string())?;
    let run = tempfile::tempdir().map_err(|e| e.to_string())?;
    let load = |name: &str| pipeline::load_split(&data.join(name), &g, &cfg, None).map(|(s, _)| s).map_err(|e| e.to_string());
    let (train, valid, test) = (load("train.jsonl")?, load("valid.jsonl")?, load("test.jsonl")?);
    let (emb, _) = transe::train(&g, &cfg.transe).map_err(|e| e.to_string())?;
    let encoder = cfg.encoder.build().map_err(|e| e.to_string())?;
    let (outcome, _) =
        pipeline::train_agent(&cfg, &g, &emb, encoder.as_ref(), &train, &valid, Some(run.path())).map_err(|e| e.to_string())?;
    let (report, _) =
        pipeline::evaluate_checkpoint(&cfg, &g, &emb, encoder.as_ref(), &outcome.best, &test).map_err(|e| e.to_string())?;
    Ok(format!("\n{report}"))
}

// ---------------------------------------------------------------- driver

fn catching<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn run_check(f: impl FnOnce() -> Check) -> Check {
    catching(f)
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut failed = Vec::new();
    let mut report = |id: &'static str, what: &str, gating: bool, result: Check| {
        let verdict = match (&result, gating) {
            (Ok(_), _) => "PASS",
            (Err(_), true) => "FAIL",
            (Err(_), false) => "INFO",
        };
        let detail = result.as_ref().unwrap_or_else(|e| e);
        println!("{id:<4}{verdict}  {what}: {detail}");
        if verdict == "FAIL" {
            failed.push(id);
        }
    };

    let quick: [Criterion; 7] = [
        ("A2", "GAE oracle", a2),
        ("A3", "actor forward oracle", a3),
        ("A4", "gradient check", a4),
        ("A5", "beam equals brute force", a5),
        ("A6", "metrics oracle", a6),
        ("A7", "TransE sanity", a7),
        ("A8", "permutation equivariance", a8),
    ];
    for (id, what, f) in quick {
        if wanted(id) {
            report(id, what, true, run_check(f));
        }
    }
    if wanted("A9") {
        report("A9", "prompt goldens", true, run_check(a9));
    }
    if wanted("A1") || wanted("A10") {
        let first = catching(|| synth_run(&scratch.path().join("run1")));
        if wanted("A1") {
            report("A1", "synthetic learnability", true, run_check(|| a1(&first)));
        }
        if wanted("A10") {
            report("A10", "determinism", true, run_check(|| a10(&first, &scratch.path().join("run2"))));
        }
    }
    if wanted("A11") {
        report("A11", "full-scale stretch (not gating)", false, run_check(a11));
    }

    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
