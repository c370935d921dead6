//! TransE pretraining of entity and relation embeddings.
//!
//! A triple `(h, r, t)` is scored by `||v_h + v_r - v_t||`; lower is more
//! plausible. Training minimizes the margin ranking loss
//! `max(0, margin + score(pos) - score(neg))` against filtered corruptions.
//! Every selectable relation (base, inverse and `Equal`) is trained, so each
//! action-table row `[r ; v_dest]` has a learned vector behind it.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};

const MAGIC: &[u8; 8] = b"KGWEMBED";
const VERSION: u32 = 1;
/// Attempts at drawing a corruption that is not a known-true triple.
const MAX_CORRUPTION_TRIES: usize = 32;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("invalid TransE config: {0}")]
    Config(String),
    #[error("cannot train on an empty graph")]
    EmptyGraph,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error("embedding file was built for a different graph vocabulary")]
    VocabMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransEConfig {
    pub entity_embedding_size: usize,
    pub relation_embedding_size: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub norm: Norm,
    pub seed: u64,
    /// Skip training and emit Gaussian(0, 0.02) tables.
    pub random_only: bool,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            entity_embedding_size: 200,
            relation_embedding_size: 200,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 100,
            negatives_per_positive: 1,
            norm: Norm::L2,
            seed: 0,
            random_only: false,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.entity_embedding_size == 0 || self.relation_embedding_size == 0 {
            return Err(EmbeddingError::Config("embedding sizes must be positive".into()));
        }
        if !self.random_only && self.entity_embedding_size != self.relation_embedding_size {
            return Err(EmbeddingError::Config("TransE needs entity and relation vectors of equal size".into()));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(EmbeddingError::Config("margin must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(EmbeddingError::Config("learning rate must be positive".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(EmbeddingError::Config("need at least one negative per positive".into()));
        }
        Ok(())
    }
}

/// Row-major entity and relation tables, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub entity_dim: usize,
    pub relation_dim: usize,
    entities: Vec<f32>,
    relations: Vec<f32>,
    vocab_hash: [u8; 32],
}

impl EmbeddingTable {
    pub fn zeros(graph: &KnowledgeGraph, entity_dim: usize, relation_dim: usize) -> Self {
        Self {
            entity_dim,
            relation_dim,
            entities: vec![0.0; graph.entity_count() * entity_dim],
            relations: vec![0.0; graph.relation_count() * relation_dim],
            vocab_hash: graph.fingerprint(),
        }
    }

    /// Seeded Gaussian(0, 0.02) tables: the no-pretraining ablation.
    pub fn random_normal(graph: &KnowledgeGraph, entity_dim: usize, relation_dim: usize, seed: u64) -> Self {
        let mut table = Self::zeros(graph, entity_dim, relation_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        table.entities.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        table.relations.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        table
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len() / self.entity_dim
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len() / self.relation_dim
    }

    pub fn vocab_hash(&self) -> &[u8; 32] {
        &self.vocab_hash
    }

    pub fn entity(&self, e: EntityId) -> &[f32] {
        let d = self.entity_dim;
        &self.entities[e.index() * d..(e.index() + 1) * d]
    }

    pub fn relation(&self, r: RelationId) -> &[f32] {
        let d = self.relation_dim;
        &self.relations[r.index() * d..(r.index() + 1) * d]
    }

    pub fn entity_mut(&mut self, e: EntityId) -> &mut [f32] {
        let d = self.entity_dim;
        &mut self.entities[e.index() * d..(e.index() + 1) * d]
    }

    pub fn relation_mut(&mut self, r: RelationId) -> &mut [f32] {
        let d = self.relation_dim;
        &mut self.relations[r.index() * d..(r.index() + 1) * d]
    }

    /// Width of an action-table row `[relation ; entity]`.
    pub fn edge_dim(&self) -> usize {
        self.relation_dim + self.entity_dim
    }

    /// Writes `[v_r ; v_e]` into `out` (length [`Self::edge_dim`]).
    pub fn write_edge_row(&self, relation: RelationId, entity: EntityId, out: &mut [f64]) {
        let (rel_part, ent_part) = out.split_at_mut(self.relation_dim);
        for (o, &x) in rel_part.iter_mut().zip(self.relation(relation)) {
            *o = x as f64;
        }
        for (o, &x) in ent_part.iter_mut().zip(self.entity(entity)) {
            *o = x as f64;
        }
    }

    /// `||v_h + v_r - v_t||` under `norm`, accumulated in f64.
    pub fn score(&self, triple: &Triple, norm: Norm) -> f64 {
        score_vectors(self.entity(triple.head), self.relation(triple.relation), self.entity(triple.tail), norm)
    }

    pub fn check_graph(&self, graph: &KnowledgeGraph) -> Result<(), EmbeddingError> {
        if self.vocab_hash != graph.fingerprint()
            || self.entity_count() != graph.entity_count()
            || self.relation_count() != graph.relation_count()
        {
            return Err(EmbeddingError::VocabMismatch);
        }
        Ok(())
    }

    fn renormalize_entities(&mut self) {
        let d = self.entity_dim;
        for row in self.entities.chunks_mut(d) {
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm > 1.0 {
                let scale = (1.0 / norm) as f32;
                row.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.entity_dim as u32)?;
        w.write_u32::<LittleEndian>(self.relation_dim as u32)?;
        w.write_u64::<LittleEndian>(self.entity_count() as u64)?;
        w.write_u64::<LittleEndian>(self.relation_count() as u64)?;
        w.write_all(&self.vocab_hash)?;
        for &x in self.entities.iter().chain(&self.relations) {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, EmbeddingError> {
        let truncated = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => EmbeddingError::Format("truncated file".into()),
            _ => EmbeddingError::Io(e),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let entity_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let relation_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let n_entities = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let n_relations = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if entity_dim == 0 || relation_dim == 0 {
            return Err(EmbeddingError::Format("zero embedding dimension".into()));
        }
        let mut vocab_hash = [0u8; 32];
        r.read_exact(&mut vocab_hash).map_err(truncated)?;
        let read_block = |r: &mut R, n: usize| -> Result<Vec<f32>, EmbeddingError> {
            let mut v = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v).map_err(truncated)?;
            Ok(v)
        };
        let entities = read_block(&mut r, n_entities * entity_dim)?;
        let relations = read_block(&mut r, n_relations * relation_dim)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(EmbeddingError::Format("trailing bytes".into()));
        }
        Ok(Self { entity_dim, relation_dim, entities, relations, vocab_hash })
    }
}

pub fn score_vectors(h: &[f32], r: &[f32], t: &[f32], norm: Norm) -> f64 {
    let diffs = h.iter().zip(r).zip(t).map(|((&h, &r), &t)| h as f64 + r as f64 - t as f64);
    match norm {
        Norm::L1 => diffs.map(f64::abs).sum(),
        Norm::L2 => diffs.map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Gradient of the score with respect to `v_h` (equal to that for `v_r`, negated for `v_t`).
pub fn score_gradient(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> Vec<f64> {
    let x: Vec<f64> = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t).collect();
    match norm {
        Norm::L1 => x.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
        Norm::L2 => {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                vec![0.0; x.len()]
            } else {
                x.iter().map(|v| v / n).collect()
            }
        }
    }
}

pub fn margin_loss(margin: f64, positive_score: f64, negative_score: f64) -> f64 {
    (margin + positive_score - negative_score).max(0.0)
}

/// Positive training triples: base edges, their inverses and the `Equal` self-loops.
pub fn training_triples(graph: &KnowledgeGraph) -> Vec<Triple> {
    graph
        .entities()
        .flat_map(|h| graph.out_edges(h).iter().map(move |&(r, t)| Triple::new(h, r, t)))
        .collect()
}

/// Uniform(-6/sqrt(d), 6/sqrt(d)) initialization with unit relations and entities
/// projected into the unit ball. `train` with zero epochs returns exactly this.
pub fn init_table(graph: &KnowledgeGraph, cfg: &TransEConfig) -> Result<EmbeddingTable, EmbeddingError> {
    cfg.validate()?;
    if cfg.random_only {
        return Ok(EmbeddingTable::random_normal(graph, cfg.entity_embedding_size, cfg.relation_embedding_size, cfg.seed));
    }
    let d = cfg.entity_embedding_size;
    let bound = 6.0 / (d as f32).sqrt();
    let mut table = EmbeddingTable::zeros(graph, d, cfg.relation_embedding_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    table.entities.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
    table.relations.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
    for row in table.relations.chunks_mut(cfg.relation_embedding_size) {
        let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
    table.renormalize_entities();
    Ok(table)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean margin loss per (positive, negative) pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped_negatives: usize,
}

/// Single-threaded SGD; deterministic for a fixed graph and seed.
pub fn train(graph: &KnowledgeGraph, cfg: &TransEConfig) -> Result<(EmbeddingTable, TrainReport), EmbeddingError> {
    cfg.validate()?;
    if graph.entity_count() == 0 {
        return Err(EmbeddingError::EmptyGraph);
    }
    let mut table = init_table(graph, cfg)?;
    let mut report = TrainReport::default();
    if cfg.random_only {
        return Ok((table, report));
    }
    let positives = training_triples(graph);
    let known: HashSet<Triple> = positives.iter().copied().collect();
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A45);
    let n_entities = graph.entity_count() as u32;
    let lr = cfg.learning_rate;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for &i in &order {
            let pos = positives[i];
            for _ in 0..cfg.negatives_per_positive {
                let Some(neg) = corrupt(pos, &known, n_entities, &mut rng) else {
                    report.skipped_negatives += 1;
                    continue;
                };
                let loss = margin_loss(cfg.margin, table.score(&pos, cfg.norm), table.score(&neg, cfg.norm));
                total += loss;
                pairs += 1;
                if loss > 0.0 {
                    sgd_step(&mut table, &pos, lr, cfg.norm);
                    sgd_step(&mut table, &neg, -lr, cfg.norm);
                }
            }
        }
        table.renormalize_entities();
        report.epoch_losses.push(if pairs == 0 { 0.0 } else { total / pairs as f64 });
    }
    Ok((table, report))
}

/// Replaces head or tail (probability 1/2 each) with a random entity, rejecting known triples.
fn corrupt(pos: Triple, known: &HashSet<Triple>, n_entities: u32, rng: &mut ChaCha8Rng) -> Option<Triple> {
    if n_entities < 2 {
        return None;
    }
    for _ in 0..MAX_CORRUPTION_TRIES {
        let e = EntityId(rng.random_range(0..n_entities));
        let cand = if rng.random_bool(0.5) {
            Triple::new(e, pos.relation, pos.tail)
        } else {
            Triple::new(pos.head, pos.relation, e)
        };
        if !known.contains(&cand) {
            return Some(cand);
        }
    }
    None
}

/// Moves the triple's vectors by `-step * d score / d v`; a negative step pushes a corruption apart.
fn sgd_step(table: &mut EmbeddingTable, t: &Triple, step: f64, norm: Norm) {
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let h = to64(table.entity(t.head));
    let r = to64(table.relation(t.relation));
    let tl = to64(table.entity(t.tail));
    let grad = score_gradient(&h, &r, &tl, norm);
    for (x, g) in table.entity_mut(t.head).iter_mut().zip(&grad) {
        *x -= (step * g) as f32;
    }
    for (x, g) in table.relation_mut(t.relation).iter_mut().zip(&grad) {
        *x -= (step * g) as f32;
    }
    for (x, g) in table.entity_mut(t.tail).iter_mut().zip(&grad) {
        *x += (step * g) as f32;
    }
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), EmbeddingError> {
    let mut w = BufWriter::new(File::create(path)?);
    table.write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads an embedding file and refuses it unless it was built for `graph`.
pub fn load_embeddings(path: &Path, graph: &KnowledgeGraph) -> Result<EmbeddingTable, EmbeddingError> {
    let table = EmbeddingTable::read(BufReader::new(File::open(path)?))?;
    table.check_graph(graph)?;
    Ok(table)
}
