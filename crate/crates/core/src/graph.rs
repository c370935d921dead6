//! Knowledge-graph store.
//!
//! Triples are loaded from a tab-separated file and indexed into per-entity
//! out-edge lists. Every base relation `r` gets a materialized inverse `~r`
//! so that the walker can traverse edges against their direction, and every
//! entity carries one `Equal` self-loop that serves as the stop action.
//!
//! Relation ids are laid out so that inversion is arithmetic: `Equal` is 0,
//! base relation `i` is `2i + 1` and its inverse is `2i + 2`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Name of the reserved stop relation.
pub const EQUAL: &str = "Equal";
/// Prefix marking a synthesized inverse relation.
pub const INVERSE_PREFIX: &str = "~";
/// Name of the reserved unknown entity (only present when enabled in [`GraphConfig`]).
pub const UNK: &str = "<UNK>";

const SERIAL_MAGIC: &str = "kgwalk-graph";
const SERIAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("relation name collision: {0:?} is reserved or clashes with a synthesized inverse")]
    RelationCollision(String),
    #[error("the Equal relation has no inverse")]
    EqualHasNoInverse,
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
    #[error("malformed serialized graph: {0}")]
    Format(String),
}

/// Dense index into the entity vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense index into the relation vocabulary (base, inverse and `Equal`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub const EQUAL: RelationId = RelationId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_equal(self) -> bool {
        self == Self::EQUAL
    }

    /// True for relations read from the triple file (as opposed to `~r` and `Equal`).
    pub fn is_base(self) -> bool {
        self.0 % 2 == 1
    }

    fn base(i: usize) -> Self {
        RelationId(2 * i as u32 + 1)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// `inverse(inverse(r)) == r` for every relation except `Equal`, which is rejected.
pub fn inverse(r: RelationId) -> Result<RelationId, GraphError> {
    match r.0 {
        0 => Err(GraphError::EqualHasNoInverse),
        n if n % 2 == 1 => Ok(RelationId(n + 1)),
        n => Ok(RelationId(n - 1)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// Name <-> dense id bimap.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    fn intern(&mut self, name: &str) -> u32 {
        if let Some(id) = self.index.get(name) {
            return *id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    fn len(&self) -> usize {
        self.names.len()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Add a reserved `<UNK>` entity that only carries its `Equal` edge.
    pub add_unk: bool,
}


/// Counts reported after a load, in the layout of the dataset statistics table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub base_relations: usize,
    pub relations: usize,
    pub base_triples: usize,
    pub duplicate_triples: usize,
    pub lines: usize,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entities={} base_relations={} relations={} triples={} duplicates={}",
            self.entities, self.base_relations, self.relations, self.base_triples, self.duplicate_triples
        )
    }
}

/// Immutable, vocabulary-indexed triple store.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    /// Base triples in first-appearance order, deduplicated.
    triples: Vec<Triple>,
    out_edges: Vec<Vec<(RelationId, EntityId)>>,
    unk: Option<EntityId>,
    stats: GraphStats,
}

impl KnowledgeGraph {
    /// Builds a graph from `(head, relation, tail)` name triples.
    pub fn from_named_triples<'a, I>(triples: I, config: &GraphConfig) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut builder = Builder::new(config);
        for (i, (h, r, t)) in triples.into_iter().enumerate() {
            builder.add(h, r, t, i + 1)?;
        }
        Ok(builder.finish())
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn base_relation_count(&self) -> usize {
        (self.relations.len() - 1) / 2
    }

    /// Base triples after deduplication.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn stats(&self) -> &GraphStats {
        &self.stats
    }

    pub fn unk(&self) -> Option<EntityId> {
        self.unk
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities.names[id.index()]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations.names[id.index()]
    }

    pub fn contains_entity(&self, id: EntityId) -> bool {
        id.index() < self.entities.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entities.len() as u32).map(EntityId)
    }

    /// Full, sorted adjacency of `v` including inverse edges and the `Equal` self-loop.
    pub fn out_edges(&self, v: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_edges[v.index()]
    }

    pub fn has_edge(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.out_edges(head).binary_search(&(relation, tail)).is_ok()
    }

    /// Seeded shuffle of `out_edges(v)` truncated to `max_out` entries.
    ///
    /// The `Equal` self-loop always survives truncation: if the shuffle pushes
    /// it past the cut, it replaces the last kept entry.
    pub fn out_edges_of(&self, v: EntityId, max_out: usize, seed: u64) -> Vec<(RelationId, EntityId)> {
        assert!(max_out >= 1, "max_out must be at least 1");
        let mut edges = self.out_edges(v).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, v.0 as u64));
        edges.shuffle(&mut rng);
        if edges.len() > max_out {
            let stop = (RelationId::EQUAL, v);
            let kept_stop = edges[..max_out].contains(&stop);
            edges.truncate(max_out);
            if !kept_stop {
                edges[max_out - 1] = stop;
            }
        }
        edges
    }

    /// SHA-256 over both vocabularies; ties embedding and checkpoint files to a graph.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"entities\n");
        for name in &self.entities.names {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(b"relations\n");
        for name in &self.relations.names {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }

    /// Writes the graph in the line-delimited serialized form (see `docs/formats.md`).
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let io_err = |source| GraphError::Io { path: path.display().to_string(), source };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{SERIAL_MAGIC} {SERIAL_VERSION}")?;
        writeln!(w, "unk {}", self.unk.is_some() as u8)?;
        writeln!(w, "entities {}", self.entities.len())?;
        for name in &self.entities.names {
            writeln!(w, "{name}")?;
        }
        writeln!(w, "base_relations {}", self.base_relation_count())?;
        for i in 0..self.base_relation_count() {
            writeln!(w, "{}", self.relation_name(RelationId::base(i)))?;
        }
        writeln!(w, "triples {} duplicates {} lines {}", self.triples.len(), self.stats.duplicate_triples, self.stats.lines)?;
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.head.0, t.relation.0, t.tail.0)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a graph written by [`KnowledgeGraph::save`].
    pub fn load_serialized(path: &Path) -> Result<Self, GraphError> {
        let file = File::open(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
        let mut lines = BufReader::new(file).lines();
        let mut next = |what: &str| -> Result<String, GraphError> {
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(GraphError::Io { path: path.display().to_string(), source: e }),
                None => Err(GraphError::Format(format!("unexpected end of file, expected {what}"))),
            }
        };
        let header = next("header")?;
        if header != format!("{SERIAL_MAGIC} {SERIAL_VERSION}") {
            return Err(GraphError::Format(format!("bad header {header:?}")));
        }
        let unk = parse_count(&next("unk flag")?, "unk")? == 1;
        let n_entities = parse_count(&next("entity count")?, "entities")?;
        let entity_names: Vec<String> = (0..n_entities).map(|_| next("entity name")).collect::<Result<_, _>>()?;
        let n_rel = parse_count(&next("relation count")?, "base_relations")?;
        let rel_names: Vec<String> = (0..n_rel).map(|_| next("relation name")).collect::<Result<_, _>>()?;
        let counts = next("triple count")?;
        let fields: Vec<&str> = counts.split(' ').collect();
        if fields.len() != 6 || fields[0] != "triples" || fields[2] != "duplicates" || fields[4] != "lines" {
            return Err(GraphError::Format(format!("bad triple header {counts:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| GraphError::Format(format!("bad count {s:?}")));
        let (n_triples, duplicates, n_lines) = (num(fields[1])?, num(fields[3])?, num(fields[5])?);

        let mut builder = Builder::new(&GraphConfig { add_unk: unk });
        for name in &entity_names {
            builder.entities.intern(name);
        }
        for name in &rel_names {
            builder.intern_relation(name)?;
        }
        if builder.entities.len() != n_entities || builder.base_relations != n_rel {
            return Err(GraphError::Format("duplicate vocabulary entries".into()));
        }
        for _ in 0..n_triples {
            let line = next("triple")?;
            let ids: Vec<u32> = line
                .split('\t')
                .map(|s| s.parse::<u32>().map_err(|_| GraphError::Format(format!("bad triple {line:?}"))))
                .collect::<Result<_, _>>()?;
            if ids.len() != 3 || ids[0] as usize >= n_entities || ids[2] as usize >= n_entities || ids[1] % 2 != 1 || (ids[1] as usize) > 2 * n_rel {
                return Err(GraphError::Format(format!("bad triple {line:?}")));
            }
            builder.push(Triple::new(EntityId(ids[0]), RelationId(ids[1]), EntityId(ids[2])));
        }
        builder.duplicates = duplicates;
        builder.lines = n_lines;
        Ok(builder.finish())
    }
}

fn parse_count(line: &str, key: &str) -> Result<usize, GraphError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| GraphError::Format(format!("expected `{key} <n>`, got {line:?}")))
}

/// SplitMix64 finalizer over the pair; decorrelates per-entity shuffle streams.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Builder {
    entities: Vocab,
    relations: Vocab,
    base_relations: usize,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    duplicates: usize,
    lines: usize,
    unk: Option<EntityId>,
}

impl Builder {
    fn new(config: &GraphConfig) -> Self {
        let mut entities = Vocab::default();
        let unk = config.add_unk.then(|| EntityId(entities.intern(UNK)));
        let mut relations = Vocab::default();
        relations.intern(EQUAL);
        Self {
            entities,
            relations,
            base_relations: 0,
            triples: Vec::new(),
            seen: HashSet::new(),
            duplicates: 0,
            lines: 0,
            unk,
        }
    }

    fn intern_relation(&mut self, name: &str) -> Result<RelationId, GraphError> {
        if let Some(id) = self.relations.get(name) {
            let id = RelationId(id);
            return if id.is_base() { Ok(id) } else { Err(GraphError::RelationCollision(name.to_owned())) };
        }
        let inverse_name = format!("{INVERSE_PREFIX}{name}");
        if self.relations.get(&inverse_name).is_some() {
            return Err(GraphError::RelationCollision(inverse_name));
        }
        let id = RelationId(self.relations.intern(name));
        self.relations.intern(&inverse_name);
        self.base_relations += 1;
        debug_assert_eq!(id, RelationId::base(self.base_relations - 1));
        Ok(id)
    }

    fn add(&mut self, h: &str, r: &str, t: &str, line: usize) -> Result<(), GraphError> {
        self.lines += 1;
        for (what, value) in [("head", h), ("relation", r), ("tail", t)] {
            if value.is_empty() {
                return Err(GraphError::Parse { line, message: format!("empty {what}") });
            }
        }
        if r == EQUAL {
            return Err(GraphError::Parse { line, message: format!("relation name {EQUAL:?} is reserved") });
        }
        let relation = self
            .intern_relation(r)
            .map_err(|e| GraphError::Parse { line, message: e.to_string() })?;
        let head = EntityId(self.entities.intern(h));
        let tail = EntityId(self.entities.intern(t));
        self.push(Triple::new(head, relation, tail));
        Ok(())
    }

    fn push(&mut self, triple: Triple) {
        if self.seen.insert(triple) {
            self.triples.push(triple);
        } else {
            self.duplicates += 1;
        }
    }

    fn finish(self) -> KnowledgeGraph {
        let n = self.entities.len();
        let mut out_edges: Vec<Vec<(RelationId, EntityId)>> = (0..n as u32).map(|v| vec![(RelationId::EQUAL, EntityId(v))]).collect();
        for t in &self.triples {
            out_edges[t.head.index()].push((t.relation, t.tail));
            let inv = inverse(t.relation).expect("base relations have inverses");
            out_edges[t.tail.index()].push((inv, t.head));
        }
        for edges in &mut out_edges {
            edges.sort_unstable();
            edges.dedup();
        }
        let stats = GraphStats {
            entities: n,
            base_relations: self.base_relations,
            relations: self.relations.len(),
            base_triples: self.triples.len(),
            duplicate_triples: self.duplicates,
            lines: self.lines,
        };
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            out_edges,
            unk: self.unk,
            stats,
        }
    }
}

/// Loads a UTF-8 `head<TAB>relation<TAB>tail` file.
///
/// Blank lines are ignored; duplicate triples are dropped and counted in
/// [`GraphStats::duplicate_triples`].
pub fn load_graph(path: &Path, config: &GraphConfig) -> Result<KnowledgeGraph, GraphError> {
    let file = File::open(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
    let reader = BufReader::new(file);
    let mut builder = Builder::new(config);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => GraphError::Parse { line: line_no, message: "invalid UTF-8".into() },
            _ => GraphError::Io { path: path.display().to_string(), source: e },
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        builder.add(fields[0], fields[1], fields[2], line_no)?;
    }
    Ok(builder.finish())
}
