//! Synthetic knowledge graphs and dialog samples with known answers.
//!
//! Every entity gets `branching` out-edges with distinct relation labels, so
//! a relation name picks out exactly one edge at each hop. Utterances spell
//! out the relation sequence, and gold walks are chosen so that each named
//! relation is available at only one of the two hops. Each sample ships with
//! the exhaustive set of walks of length at most two that reach its goal.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_jsonl, DialogSample};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, KnowledgeGraph};

const RELATION_NAMES: &[&str] = &[
    "directed_by",
    "written_by",
    "has_genre",
    "starred_actors",
    "release_year",
    "produced_by",
    "music_by",
    "based_on",
    "set_in",
    "language",
    "award_won",
    "sequel_of",
    "edited_by",
    "filmed_in",
    "publisher",
    "influenced_by",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vo", "ne", "pi", "dar", "el", "quo", "ri", "ban", "ze", "hu", "ta", "mor",
    "fi", "lin",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub entities: usize,
    pub branching: usize,
    /// Number of relation labels drawn from the built-in list.
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Fraction of samples whose gold walk is a single hop.
    pub one_hop_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { entities: 100, branching: 4, relations: 16, train: 400, valid: 100, test: 0, one_hop_fraction: 0.3, seed: 0 }
    }
}

/// Every walk (as `(relation, entity)` pairs) of length one or two from the start to the goal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionSet {
    pub sample_id: String,
    pub paths: Vec<Vec<(String, String)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub triples: Vec<(String, String, String)>,
    pub train: Vec<DialogSample>,
    pub valid: Vec<DialogSample>,
    pub test: Vec<DialogSample>,
    pub solutions: Vec<SolutionSet>,
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let len = rng.random_range(2..=3);
        let mut name: String = (0..len).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if seen.contains(&name) {
            name.push_str(&names.len().to_string());
        }
        if seen.insert(name.clone()) {
            let mut c = name.chars();
            let first = c.next().expect("non-empty").to_ascii_uppercase();
            names.push(std::iter::once(first).chain(c).collect());
        }
    }
    names
}

fn utterance(rels: &[&str]) -> String {
    match rels {
        [r1] => format!("Follow {r1}, then stop."),
        [r1, r2] => format!("Follow {r1}, then {r2}."),
        _ => unreachable!("gold walks have one or two hops"),
    }
}

/// Edges `(relation, tail)` out of each entity, by index.
fn build_edges(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let n = cfg.entities;
    if cfg.branching == 1 {
        return (0..n).map(|i| if i + 1 < n { vec![(i % cfg.relations, i + 1)] } else { Vec::new() }).collect();
    }
    (0..n)
        .map(|i| {
            let mut rels: Vec<usize> = (0..cfg.relations).collect();
            rels.shuffle(rng);
            let mut tails: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            tails.shuffle(rng);
            let mut out: Vec<(usize, usize)> = rels.into_iter().zip(tails).take(cfg.branching).collect();
            out.sort_unstable();
            out
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.branching == 0 {
        return Err(Error::Config("branching must be at least 1".into()));
    }
    if cfg.relations > RELATION_NAMES.len() || cfg.branching > cfg.relations || cfg.branching >= cfg.entities {
        return Err(Error::Config(format!(
            "branching {} needs between {} and {} relation labels (got {}) and fewer than {} entities",
            cfg.branching,
            cfg.branching,
            RELATION_NAMES.len(),
            cfg.relations,
            cfg.entities
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = entity_names(cfg.entities, &mut rng);
    let edges = build_edges(cfg, &mut rng);
    let triples: Vec<(String, String, String)> = edges
        .iter()
        .enumerate()
        .flat_map(|(h, out)| out.iter().map(move |&(r, t)| (h, r, t)))
        .map(|(h, r, t)| (names[h].clone(), RELATION_NAMES[r].to_owned(), names[t].clone()))
        .collect();
    let graph = KnowledgeGraph::from_named_triples(
        triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
        &GraphConfig::default(),
    )?;

    // Candidate walks: (start, [(rel, tail)]) without revisits, where each
    // named relation is available at exactly one hop.
    let has = |v: usize, r: usize| edges[v].iter().any(|&(x, _)| x == r);
    let mut candidates: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for (s, out) in edges.iter().enumerate() {
        for &(r1, t1) in out {
            if has(t1, r1) {
                continue;
            }
            candidates.push((s, vec![(r1, t1)]));
            for &(r2, t2) in &edges[t1] {
                if t2 != s && t2 != t1 && !has(s, r2) {
                    candidates.push((s, vec![(r1, t1), (r2, t2)]));
                }
            }
        }
    }
    let (mut one, mut two): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.1.len() == 1);
    one.shuffle(&mut rng);
    two.shuffle(&mut rng);
    let total = cfg.train + cfg.valid + cfg.test;
    let want_one = ((total as f64 * cfg.one_hop_fraction).round() as usize).min(one.len());
    let want_two = total - want_one;
    if want_two > two.len() || total > one.len() + two.len() {
        return Err(Error::Config(format!(
            "graph admits {} one-hop and {} two-hop walks; {total} samples requested",
            one.len(),
            two.len()
        )));
    }
    let mut picked: Vec<_> = one.into_iter().take(want_one).chain(two.into_iter().take(want_two)).collect();
    picked.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(total);
    let mut solutions = Vec::with_capacity(total);
    for (i, (s, walk)) in picked.into_iter().enumerate() {
        let sample_id = format!("synth-{i:05}");
        let rels: Vec<&str> = walk.iter().map(|&(r, _)| RELATION_NAMES[r]).collect();
        let gold_path: Vec<(String, String)> =
            walk.iter().map(|&(r, t)| (RELATION_NAMES[r].to_owned(), names[t].clone())).collect();
        let goal = names[walk.last().expect("non-empty walk").1].clone();
        let paths = bfs_solutions(&graph, &names[s], &goal);
        if !paths.contains(&gold_path) {
            return Err(Error::Config(format!("{sample_id}: gold walk not found by exhaustive search")));
        }
        solutions.push(SolutionSet { sample_id: sample_id.clone(), paths });
        samples.push(DialogSample {
            sample_id,
            dialog_history: Vec::new(),
            utterance: utterance(&rels),
            start_entity: names[s].clone(),
            gold_path,
            goal_entity: Some(goal),
        });
    }
    let test = samples.split_off(cfg.train + cfg.valid);
    let valid = samples.split_off(cfg.train);
    Ok(SynthCorpus { triples, train: samples, valid, test, solutions })
}

/// All walks of one or two non-`Equal` edges from `start` ending at `goal`, in adjacency order.
pub fn bfs_solutions(graph: &KnowledgeGraph, start: &str, goal: &str) -> Vec<Vec<(String, String)>> {
    let (Some(s), Some(g)) = (graph.entity(start), graph.entity(goal)) else {
        return Vec::new();
    };
    let name = |r, e| (graph.relation_name(r).to_owned(), graph.entity_name(e).to_owned());
    let mut out = Vec::new();
    for &(r1, t1) in graph.out_edges(s).iter().filter(|(r, _)| !r.is_equal()) {
        if t1 == g {
            out.push(vec![name(r1, t1)]);
        }
        for &(r2, t2) in graph.out_edges(t1).iter().filter(|(r, _)| !r.is_equal()) {
            if t2 == g {
                out.push(vec![name(r1, t1), name(r2, t2)]);
            }
        }
    }
    out
}

impl SynthCorpus {
    /// Writes `graph.tsv`, `train.jsonl`, `valid.jsonl`, `test.jsonl` and `solutions.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("graph.tsv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for (h, r, t) in &self.triples {
            writeln!(f, "{h}\t{r}\t{t}").map_err(|e| Error::io(&path, e))?;
        }
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("valid.jsonl"), &self.valid)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        write_jsonl(&dir.join("solutions.jsonl"), &self.solutions)?;
        Ok(())
    }

    pub fn graph(&self) -> Result<KnowledgeGraph> {
        Ok(KnowledgeGraph::from_named_triples(
            self.triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
            &GraphConfig::default(),
        )?)
    }
}
