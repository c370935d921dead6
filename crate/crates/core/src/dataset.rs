//! Dialog-grounded path samples: parsing, resolution against the graph and splitting.
//!
//! The canonical record format is one JSON object per line (schema version 1):
//!
//! ```text
//! {"sample_id": "...", "dialog_history": [{"speaker": "user", "text": "..."}],
//!  "utterance": "...", "start_entity": "...",
//!  "gold_path": [["relation", "entity"], ...], "goal_entity": "..."}
//! ```
//!
//! `goal_entity` may be omitted, in which case it is the tail of the last gold edge.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, RelationId};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const MAX_GOLD_HOPS: usize = 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid split fractions: {0}")]
    Split(String),
    #[error("conversion error: {0}")]
    Convert(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

/// A record as it appears on disk, names unresolved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogSample {
    pub sample_id: String,
    #[serde(default)]
    pub dialog_history: Vec<Turn>,
    pub utterance: String,
    pub start_entity: String,
    pub gold_path: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_entity: Option<String>,
}

/// A sample whose names all resolved in the graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    /// Turns rendered as `"speaker: text"`.
    pub history: Vec<String>,
    pub utterance: String,
    pub start: EntityId,
    pub goal: EntityId,
    pub gold_path: Vec<(RelationId, EntityId)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub sample_id: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<SkipRecord>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }

    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    /// One JSON record `{sample_id, line, reason}` per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        write_jsonl(path, &self.skipped)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolveOptions {
    /// Map unknown start/goal/path entities onto the graph's `<UNK>` entity instead of skipping.
    pub map_unknown_to_unk: bool,
}

impl DialogSample {
    pub fn goal_name(&self) -> Option<&str> {
        self.goal_entity.as_deref().or_else(|| self.gold_path.last().map(|(_, e)| e.as_str()))
    }

    /// Resolves every name against the graph, or explains why the sample is unusable.
    pub fn resolve(&self, graph: &KnowledgeGraph, opts: &ResolveOptions) -> Result<Sample, String> {
        if self.gold_path.is_empty() || self.gold_path.len() > MAX_GOLD_HOPS {
            return Err(format!("gold path length {} not in 1..={MAX_GOLD_HOPS}", self.gold_path.len()));
        }
        let last = &self.gold_path.last().expect("non-empty").1;
        if let Some(goal) = &self.goal_entity {
            if goal != last {
                return Err("goal entity differs from tail of last gold edge".into());
            }
        }
        let entity = |name: &str, what: &str| -> Result<EntityId, String> {
            match graph.entity(name) {
                Some(e) => Ok(e),
                None => match (opts.map_unknown_to_unk, graph.unk()) {
                    (true, Some(unk)) => Ok(unk),
                    _ => Err(format!("unknown {what} entity")),
                },
            }
        };
        let start = entity(&self.start_entity, "start")?;
        let goal = entity(last, "goal")?;
        let mut gold_path = Vec::with_capacity(self.gold_path.len());
        let mut head = start;
        for (rel_name, ent_name) in &self.gold_path {
            let rel = graph.relation(rel_name).ok_or_else(|| "unknown relation".to_string())?;
            let tail = entity(ent_name, "path")?;
            if !graph.has_edge(head, rel, tail) {
                return Err("gold edge not in graph".into());
            }
            gold_path.push((rel, tail));
            head = tail;
        }
        Ok(Sample {
            sample_id: self.sample_id.clone(),
            history: self.dialog_history.iter().map(|t| format!("{}: {}", t.speaker, t.text)).collect(),
            utterance: self.utterance.clone(),
            start,
            goal,
            gold_path,
        })
    }
}

/// Parses a line-delimited record file. Bad records are skipped and itemized, never fatal.
pub fn parse_dataset(path: &Path, graph: &KnowledgeGraph, opts: &ResolveOptions) -> Result<(Vec<Sample>, SkipReport), DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    let mut samples = Vec::new();
    let mut report = SkipReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.skipped.push(SkipRecord { sample_id: String::new(), line: line_no, reason: format!("unreadable line: {e}") });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogSample = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.skipped.push(SkipRecord { sample_id: String::new(), line: line_no, reason: format!("malformed record: {e}") });
                continue;
            }
        };
        match record.resolve(graph, opts) {
            Ok(s) => samples.push(s),
            Err(reason) => report.skipped.push(SkipRecord { sample_id: record.sample_id.clone(), line: line_no, reason }),
        }
    }
    Ok((samples, report))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.70, valid_frac: 0.15, test_frac: 0.15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fracs = [self.train_frac, self.valid_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DatasetError::Split(format!("fractions must lie in [0, 1]: {fracs:?}")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Split(format!("fractions must sum to 1: {fracs:?}")));
        }
        Ok(())
    }

    /// Train and valid sizes are floored, the remainder goes to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train_frac).min(n);
        let valid = floor(self.valid_frac).min(n - train);
        (train, valid, n - train - valid)
    }
}

/// Seeded shuffle, then contiguous cuts at the fraction boundaries.
pub fn split<T>(mut samples: Vec<T>, spec: &SplitSpec) -> Result<Splits<T>, DatasetError> {
    spec.validate()?;
    let (n_train, n_valid, _) = spec.sizes(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    samples.shuffle(&mut rng);
    let test = samples.split_off(n_train + n_valid);
    let valid = samples.split_off(n_train);
    Ok(Splits { train: samples, valid, test })
}

/// Best-effort conversion of the public OpenDialKG release (`data.csv`) into records.
///
/// Every message carrying a KG path annotation becomes one sample: the start
/// entity is the head of the first path edge, the utterance is the preceding
/// message and the dialog history is everything before that. Paths longer
/// than two hops are dropped. Sample counts are reported, not guaranteed.
pub mod opendialkg {
    use super::*;

    #[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
    pub struct ConvertStats {
        pub dialogs: usize,
        pub annotated_turns: usize,
        pub emitted: usize,
        pub dropped_long_paths: usize,
        pub dropped_malformed: usize,
    }

    #[derive(Deserialize)]
    struct Message {
        #[serde(default)]
        sender: String,
        #[serde(default)]
        message: Option<String>,
        #[serde(default)]
        metadata: Option<serde_json::Value>,
    }

    pub fn convert(csv_path: &Path) -> Result<(Vec<DialogSample>, ConvertStats), DatasetError> {
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| DatasetError::Convert(e.to_string()))?;
        let mut stats = ConvertStats::default();
        let mut out = Vec::new();
        for (row_idx, row) in reader.records().enumerate() {
            let row = row.map_err(|e| DatasetError::Convert(e.to_string()))?;
            stats.dialogs += 1;
            let Some(messages) = row.get(0).and_then(|m| serde_json::from_str::<Vec<Message>>(m).ok()) else {
                stats.dropped_malformed += 1;
                continue;
            };
            let mut texts: Vec<Turn> = Vec::new();
            for (turn_idx, msg) in messages.iter().enumerate() {
                if let Some(path) = msg.metadata.as_ref().and_then(|m| m.get("path")).and_then(|p| p.get(1)) {
                    stats.annotated_turns += 1;
                    match annotated_path(path) {
                        Some(edges) if edges.len() > MAX_GOLD_HOPS => stats.dropped_long_paths += 1,
                        Some(edges) if !edges.is_empty() && !texts.is_empty() => {
                            let utterance = texts.last().expect("non-empty").text.clone();
                            let history = texts[..texts.len() - 1].to_vec();
                            let start = edges[0].0.clone();
                            let gold_path: Vec<(String, String)> = edges.iter().map(|(_, r, t)| (r.clone(), t.clone())).collect();
                            out.push(DialogSample {
                                sample_id: format!("odkg-{row_idx}-{turn_idx}"),
                                dialog_history: history,
                                utterance,
                                start_entity: start,
                                goal_entity: gold_path.last().map(|(_, t)| t.clone()),
                                gold_path,
                            });
                            stats.emitted += 1;
                        }
                        _ => stats.dropped_malformed += 1,
                    }
                }
                if let Some(text) = &msg.message {
                    texts.push(Turn { speaker: msg.sender.clone(), text: text.clone() });
                }
            }
        }
        Ok((out, stats))
    }

    fn annotated_path(value: &serde_json::Value) -> Option<Vec<(String, String, String)>> {
        let edges = value.as_array()?;
        let mut out = Vec::with_capacity(edges.len());
        for e in edges {
            let e = e.as_array()?;
            if e.len() != 3 {
                return None;
            }
            out.push((e[0].as_str()?.to_owned(), e[1].as_str()?.to_owned(), e[2].as_str()?.to_owned()));
        }
        // consecutive edges must chain
        if out.windows(2).any(|w| w[0].2 != w[1].0) {
            return None;
        }
        Some(out)
    }
}
