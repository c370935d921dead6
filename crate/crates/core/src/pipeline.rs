//! Stage wiring shared by the command-line tool and the acceptance suite.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agent::{init_params, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{parse_dataset, Sample, SkipReport};
use crate::encoder::StateEncoder;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::eval::{evaluate, AgentPolicy, EvalReport, SampleResult};
use crate::graph::{load_graph, GraphConfig, KnowledgeGraph};
use crate::ppo::{train_loop, IterationRecord, PpoContext, TrainOutcome, ValidScores};
use crate::transe::EmbeddingTable;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SUMMARY: &str = "summary.json";

/// Loads either a serialized graph or a raw triple file, sniffing the first line.
pub fn open_graph(path: &Path, cfg: &GraphConfig) -> Result<KnowledgeGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(|e| Error::io(path, e))?;
    if first.starts_with("kgwalk-graph ") {
        Ok(KnowledgeGraph::load_serialized(path)?)
    } else {
        Ok(load_graph(path, cfg)?)
    }
}

/// Parses one split, writing its skip report next to the run outputs when given.
pub fn load_split(
    path: &Path,
    graph: &KnowledgeGraph,
    cfg: &RunConfig,
    report_dir: Option<&Path>,
) -> Result<(Vec<Sample>, SkipReport)> {
    let (samples, report) = parse_dataset(path, graph, &cfg.dataset)?;
    if let Some(dir) = report_dir {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
        report.write_jsonl(&dir.join(format!("skipped_{stem}.jsonl")))?;
    }
    Ok((samples, report))
}

/// Greedy (or narrow-beam) validation scores for the policy in `params`.
pub fn validation_scores(
    policy: &AgentPolicy<'_>,
    env: &Environment<'_>,
    valid: &[Sample],
    width: usize,
    workers: usize,
) -> Result<ValidScores> {
    let (report, _) = evaluate(policy, env, valid, width, &[1], workers)?;
    Ok(ValidScores { path_at_1: report.path_at_k[&1], target_at_1: report.target_at_k[&1] })
}

/// What a training run leaves behind besides the checkpoints.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub env_steps: u64,
    pub best_path_at_1: f64,
    pub best_target_at_1: f64,
    pub best_iteration: u64,
    pub cache_hit_ratio: Option<f64>,
}

/// PPO training with per-iteration validation.
///
/// With a run directory, every iteration appends one JSON line to
/// `train_log.jsonl`, and the best and last checkpoints plus a summary are
/// written at the end. Nothing written depends on wall-clock time.
pub fn train_agent(
    cfg: &RunConfig,
    graph: &KnowledgeGraph,
    embeddings: &EmbeddingTable,
    encoder: &dyn StateEncoder,
    train: &[Sample],
    valid: &[Sample],
    run_dir: Option<&Path>,
) -> Result<(TrainOutcome, TrainSummary)> {
    embeddings.check_graph(graph)?;
    if valid.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let env = Environment::new(graph, cfg.env.clone());
    let ctx = PpoContext { env: &env, embeddings, encoder };
    let dims = cfg.agent.dims(encoder.dim(), embeddings.edge_dim());
    let init = init_params(&dims, cfg.agent.init_seed);

    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut validate = |p: &crate::agent::PolicyParams| {
        let policy = AgentPolicy { params: p, encoder, embeddings, graph };
        validation_scores(&policy, &env, valid, cfg.eval.valid_beam_width, cfg.ppo.workers)
    };
    let mut on_iteration = |record: &IterationRecord, _: &Checkpoint| -> Result<()> {
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    };
    let outcome = train_loop(&ctx, init, train, &cfg.ppo, &mut validate, &mut on_iteration)?;
    let summary = TrainSummary {
        iterations: outcome.iterations,
        env_steps: outcome.env_steps,
        best_path_at_1: outcome.best_valid.path_at_1,
        best_target_at_1: outcome.best_valid.target_at_1,
        best_iteration: outcome.best.iteration,
        cache_hit_ratio: encoder.cache_stats().map(|s| s.hit_ratio()),
    };
    if let Some(dir) = run_dir {
        write_checkpoint(&outcome.best, &dir.join(BEST_CHECKPOINT))?;
        write_checkpoint(&outcome.last, &dir.join(LAST_CHECKPOINT))?;
        write_json(&dir.join(SUMMARY), &summary)?;
    }
    Ok((outcome, summary))
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    ckpt.write(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::read(BufReader::new(file), None)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Beam evaluation of a trained checkpoint over one split.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    graph: &KnowledgeGraph,
    embeddings: &EmbeddingTable,
    encoder: &dyn StateEncoder,
    ckpt: &Checkpoint,
    samples: &[Sample],
) -> Result<(EvalReport, Vec<SampleResult>)> {
    embeddings.check_graph(graph)?;
    let expected = cfg.agent.dims(encoder.dim(), embeddings.edge_dim());
    if ckpt.params.dims.state_dim != expected.state_dim || ckpt.params.dims.edge_dim != expected.edge_dim {
        return Err(Error::Config(format!(
            "checkpoint expects state dim {} and edge dim {}, but the encoder gives {} and the embeddings {}",
            ckpt.params.dims.state_dim, ckpt.params.dims.edge_dim, expected.state_dim, expected.edge_dim
        )));
    }
    let env = Environment::new(graph, cfg.env.clone());
    let policy = AgentPolicy { params: &ckpt.params, encoder, embeddings, graph };
    evaluate(&policy, &env, samples, cfg.eval.beam_width, &cfg.eval.ks, cfg.ppo.workers)
}

/// Resolves the run directory: explicit override, then config, then `runs/default`.
pub fn run_dir(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.or_else(|| cfg.paths.run_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/default"))
}
