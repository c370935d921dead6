//! `kgwalk`: build graphs, pretrain TransE, train and evaluate the walk agent, render prompts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kgwalk::config::RunConfig;
use kgwalk::dataset::Sample;
use kgwalk::encoder::EncoderKind;
use kgwalk::env::Environment;
use kgwalk::eval::render_case;
use kgwalk::fte::{render_prompt, PromptScheme, SchemeKind};
use kgwalk::graph::KnowledgeGraph;
use kgwalk::pipeline::{self, open_graph};
use kgwalk::transe::{self, EmbeddingTable};
use kgwalk::{synth, Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(name = "kgwalk", version, about = "Multi-hop knowledge graph walks learned with PPO")]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for the config echo, logs and artifacts.
    #[arg(long, global = true, env = "KGWALK_RUN_DIR")]
    run_dir: Option<PathBuf>,

    /// Overrides every stage's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Rollout and evaluation worker threads (1 keeps runs bit-reproducible).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a triple file, add inverse and `Equal` edges, and serialize the graph.
    GraphBuild(GraphBuildArgs),
    /// Pretrain TransE entity and relation embeddings.
    Transe(TranseArgs),
    /// Generate a synthetic graph with solvable dialog samples.
    Synth(SynthArgs),
    /// Train the actor and critic with PPO.
    Train(TrainArgs),
    /// Beam-search evaluation with path@k and target@k.
    Eval(EvalArgs),
    /// Render prompts for every sample of a split as line-delimited JSON.
    Promptgen(PromptgenArgs),
}

#[derive(Args, Debug)]
struct GraphBuildArgs {
    /// Tab-separated `head relation tail` file.
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Serialized graph output [default: <run-dir>/graph.kg].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add the reserved UNK entity.
    #[arg(long)]
    add_unk: bool,
}

#[derive(Args, Debug)]
struct TranseArgs {
    /// Triple file or serialized graph.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Embedding output [default: <run-dir>/embeddings.bin].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory [default: run directory].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    valid: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    one_hop_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderArg {
    Hash,
    Remote,
}

/// Inputs shared by `train` and `eval`.
#[derive(Args, Debug)]
struct ModelInputs {
    /// Triple file or serialized graph.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// TransE embeddings; `train` pretrains and saves them when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// State encoder.
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Embedding service base URL for the remote encoder.
    #[arg(long, env = "KGWALK_ENDPOINT")]
    endpoint: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Training split (line-delimited JSON records).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation split used for model selection and early stopping.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Number of collect, update and validate rounds.
    #[arg(long)]
    iterations: Option<usize>,
    /// Stop before collecting past this many environment steps.
    #[arg(long)]
    max_env_steps: Option<u64>,
    /// Width of both actor and critic hidden layers.
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Checkpoint to evaluate [default: <run-dir>/best.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split to score [default: paths.test].
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Comma-separated cutoffs, e.g. 1,3,5,10,25.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Render this many best- and worst-ranked cases to cases.txt.
    #[arg(long)]
    cases: Option<usize>,
}

#[derive(Args, Debug)]
struct PromptgenArgs {
    /// Triple file or serialized graph.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Split to render [default: paths.test].
    #[arg(long)]
    split: Option<PathBuf>,
    /// standard, normal or opa.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<SchemeKind>,
    /// Output file [default: <run-dir>/prompts_<scheme>.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> std::result::Result<SchemeKind, String> {
    SchemeKind::parse(s).ok_or_else(|| format!("unknown scheme {s:?}; expected standard, normal or opa"))
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what} given (flag or [paths] entry)")))
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Run {
    /// Validates the materialized config and echoes it before any work starts.
    fn start(cfg: RunConfig, dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let echo = cfg.echo(&dir)?;
        log::info!("config written to {}", echo.display());
        Ok(Self { cfg, dir })
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.ppo.workers = w;
    }
    let dir = pipeline::run_dir(&cfg, cli.run_dir);
    match cli.command {
        Command::GraphBuild(a) => graph_build(cfg, dir, a),
        Command::Transe(a) => cmd_transe(cfg, dir, a),
        Command::Synth(a) => cmd_synth(cfg, dir, a),
        Command::Train(a) => cmd_train(cfg, dir, a),
        Command::Eval(a) => cmd_eval(cfg, dir, a),
        Command::Promptgen(a) => cmd_promptgen(cfg, dir, a),
    }
}

fn graph_build(mut cfg: RunConfig, dir: PathBuf, a: GraphBuildArgs) -> Result<()> {
    cfg.graph.add_unk |= a.add_unk;
    let triples = require(a.triples.or(cfg.paths.graph.clone()), "triple file")?;
    let run = Run::start(cfg, dir)?;
    let g = open_graph(&triples, &run.cfg.graph)?;
    let out = a.out.unwrap_or_else(|| run.dir.join("graph.kg"));
    g.save(&out)?;
    println!("{}", g.stats());
    println!("fingerprint {}", hex::encode(g.fingerprint()));
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_transe(mut cfg: RunConfig, dir: PathBuf, a: TranseArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.transe.epochs = e;
    }
    let graph_path = require(a.graph.or(cfg.paths.graph.clone()), "graph")?;
    let run = Run::start(cfg, dir)?;
    let g = open_graph(&graph_path, &run.cfg.graph)?;
    let (table, report) = transe::train(&g, &run.cfg.transe)?;
    let out = a.out.unwrap_or_else(|| run.dir.join("embeddings.bin"));
    transe::save_embeddings(&table, &out)?;
    pipeline::write_json(&run.dir.join("transe_report.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_synth(mut cfg: RunConfig, dir: PathBuf, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    let overrides = [
        (&mut s.entities, a.entities),
        (&mut s.branching, a.branching),
        (&mut s.relations, a.relations),
        (&mut s.train, a.train),
        (&mut s.valid, a.valid),
        (&mut s.test, a.test),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(f) = a.one_hop_fraction {
        s.one_hop_fraction = f;
    }
    let run = Run::start(cfg, dir)?;
    let out = a.out.unwrap_or_else(|| run.dir.clone());
    let corpus = synth::generate(&run.cfg.synth)?;
    corpus.write_to(&out)?;
    let g = corpus.graph()?;
    println!("{}", g.stats());
    println!(
        "samples train={} valid={} test={} (every gold walk verified by exhaustive search)",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn apply_model_inputs(cfg: &mut RunConfig, inputs: &ModelInputs) {
    if let Some(kind) = inputs.encoder {
        cfg.encoder.kind = match kind {
            EncoderArg::Hash => EncoderKind::Hash,
            EncoderArg::Remote => EncoderKind::Remote,
        };
    }
    if let Some(url) = &inputs.endpoint {
        cfg.encoder.endpoint = Some(url.clone());
    }
}

fn load_split(path: &Path, g: &KnowledgeGraph, run: &Run) -> Result<Vec<Sample>> {
    let (samples, report) = pipeline::load_split(path, g, &run.cfg, Some(&run.dir))?;
    if !report.is_empty() {
        eprintln!("{}: skipped {} records (see skip report in {})", path.display(), report.len(), run.dir.display());
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("{}: no usable samples", path.display())));
    }
    Ok(samples)
}

fn load_embeddings(path: &Path, g: &KnowledgeGraph) -> Result<EmbeddingTable> {
    Ok(transe::load_embeddings(path, g)?)
}

fn cmd_train(mut cfg: RunConfig, dir: PathBuf, a: TrainArgs) -> Result<()> {
    apply_model_inputs(&mut cfg, &a.inputs);
    if let Some(n) = a.iterations {
        cfg.ppo.iterations = n;
    }
    if let Some(n) = a.max_env_steps {
        cfg.ppo.max_env_steps = Some(n);
    }
    if let Some(h) = a.hidden {
        cfg.agent.hidden = [h, h];
    }
    let graph_path = require(a.inputs.graph.clone().or(cfg.paths.graph.clone()), "graph")?;
    let train_path = require(a.train.or(cfg.paths.train.clone()), "training split")?;
    let valid_path = require(a.valid.or(cfg.paths.valid.clone()), "validation split")?;
    let emb_path = a.inputs.embeddings.clone().or(cfg.paths.embeddings.clone());
    let run = Run::start(cfg, dir)?;

    let g = open_graph(&graph_path, &run.cfg.graph)?;
    let embeddings = match emb_path {
        Some(p) => load_embeddings(&p, &g)?,
        None => {
            let (table, _) = transe::train(&g, &run.cfg.transe)?;
            let out = run.dir.join("embeddings.bin");
            transe::save_embeddings(&table, &out)?;
            log::info!("pretrained embeddings written to {}", out.display());
            table
        }
    };
    let train = load_split(&train_path, &g, &run)?;
    let valid = load_split(&valid_path, &g, &run)?;
    let encoder = run.cfg.encoder.build()?;
    let (_, summary) = pipeline::train_agent(&run.cfg, &g, &embeddings, encoder.as_ref(), &train, &valid, Some(&run.dir))?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    println!("wrote {}", run.dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ResultLine<'a> {
    sample_id: &'a str,
    path_rank: Option<usize>,
    target_rank: Option<usize>,
    gold_truncated: bool,
}

fn cmd_eval(mut cfg: RunConfig, dir: PathBuf, a: EvalArgs) -> Result<()> {
    apply_model_inputs(&mut cfg, &a.inputs);
    if let Some(w) = a.beam_width {
        cfg.eval.beam_width = w;
    }
    if let Some(ks) = a.ks {
        cfg.eval.ks = ks;
    }
    if let Some(n) = a.cases {
        cfg.eval.case_studies = n;
    }
    let graph_path = require(a.inputs.graph.clone().or(cfg.paths.graph.clone()), "graph")?;
    let emb_path = require(a.inputs.embeddings.clone().or(cfg.paths.embeddings.clone()), "embeddings")?;
    let split_path = require(a.split.or(cfg.paths.test.clone()), "split")?;
    let ckpt_path = a.checkpoint.or(cfg.paths.checkpoint.clone()).unwrap_or_else(|| dir.join(pipeline::BEST_CHECKPOINT));
    let run = Run::start(cfg, dir)?;

    let g = open_graph(&graph_path, &run.cfg.graph)?;
    let embeddings = load_embeddings(&emb_path, &g)?;
    let samples = load_split(&split_path, &g, &run)?;
    let ckpt = pipeline::read_checkpoint(&ckpt_path)?;
    let encoder = run.cfg.encoder.build()?;
    let (report, results) = pipeline::evaluate_checkpoint(&run.cfg, &g, &embeddings, encoder.as_ref(), &ckpt, &samples)?;
    println!("{report}");
    pipeline::write_json(&run.dir.join("eval_report.json"), &report)?;

    let path = run.dir.join("eval_results.jsonl");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for r in &results {
        let line = ResultLine {
            sample_id: &r.sample_id,
            path_rank: r.path_rank,
            target_rank: r.target_rank,
            gold_truncated: r.gold_truncated,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("line serializes")).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let n = run.cfg.eval.case_studies;
    if n > 0 {
        let env = Environment::new(&g, run.cfg.env.clone());
        let mut order: Vec<usize> = (0..results.len()).collect();
        order.sort_by_key(|&i| (results[i].target_rank.unwrap_or(usize::MAX), i));
        let picks = order.iter().take(n).chain(order.iter().rev().take(n));
        let mut text = String::new();
        for &i in picks {
            text.push_str(&render_case(&g, &env, &samples[i], &results[i])?);
            text.push_str("\n\n");
        }
        let path = run.dir.join("cases.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    sample_id: &'a str,
    scheme: &'static str,
    prompt: String,
}

fn cmd_promptgen(mut cfg: RunConfig, dir: PathBuf, a: PromptgenArgs) -> Result<()> {
    if let Some(s) = a.scheme {
        cfg.prompt.scheme = s;
    }
    let graph_path = require(a.graph.or(cfg.paths.graph.clone()), "graph")?;
    let split_path = require(a.split.or(cfg.paths.test.clone()), "split")?;
    let run = Run::start(cfg, dir)?;
    let g = open_graph(&graph_path, &run.cfg.graph)?;
    let samples = load_split(&split_path, &g, &run)?;
    let env = Environment::new(&g, run.cfg.env.clone());
    let mut scheme = PromptScheme::new(run.cfg.prompt.scheme);
    scheme.task_background = run.cfg.env.task_background.clone();
    scheme.examples = run.cfg.prompt.examples.clone();

    let out = a.out.unwrap_or_else(|| run.dir.join(format!("prompts_{}.jsonl", scheme.kind.name())));
    let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
    for s in &samples {
        let state = env.reset(s)?;
        let prompt = render_prompt(&scheme, &state, &g, run.cfg.env.max_out, run.cfg.env.shuffle_seed);
        let record = PromptRecord { sample_id: &s.sample_id, scheme: scheme.kind.name(), prompt };
        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(|e| Error::io(&out, e))?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    println!("wrote {} prompts to {}", samples.len(), out.display());
    Ok(())
}
