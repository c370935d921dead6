//! One declarative run configuration covering every stage.
//!
//! Section and key names follow the hyperparameter table the defaults come
//! from. Unknown keys are rejected so typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentDims;
use crate::dataset::{ResolveOptions, SplitSpec};
use crate::encoder::EncoderSpec;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::fte::SchemeKind;
use crate::graph::GraphConfig;
use crate::ppo::PpoConfig;
use crate::synth::SynthConfig;
use crate::transe::TransEConfig;

/// File name of the materialized config written into every run directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: [usize; 2],
    /// Seed for orthogonal initialization.
    pub init_seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { hidden: [512, 512], init_seed: 0 }
    }
}

impl AgentConfig {
    pub fn dims(&self, state_dim: usize, edge_dim: usize) -> AgentDims {
        AgentDims { state_dim, hidden: self.hidden, edge_dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub ks: Vec<usize>,
    /// Beam width used for per-iteration validation during training.
    pub valid_beam_width: usize,
    /// Number of best and worst cases rendered after evaluation.
    pub case_studies: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beam_width: 25, ks: DEFAULT_KS.to_vec(), valid_beam_width: 1, case_studies: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub scheme: SchemeKind,
    /// Few-shot example blocks appended under the examples header.
    pub examples: Vec<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { scheme: SchemeKind::OutPathAware, examples: Vec::new() }
    }
}

/// Input and output locations. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Triple file (TSV or CSV) or a serialized graph.
    pub graph: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub graph: GraphConfig,
    pub dataset: ResolveOptions,
    pub split: SplitSpec,
    pub transe: TransEConfig,
    pub encoder: EncoderSpec,
    pub agent: AgentConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub prompt: PromptConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and rebases its relative paths onto the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every stage's seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.transe.seed = seed;
        self.agent.init_seed = seed;
        self.env.shuffle_seed = seed;
        self.ppo.seed = seed;
        self.split.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.transe.validate()?;
        self.encoder.validate()?;
        self.ppo.validate()?;
        self.split.validate()?;
        if self.agent.hidden.contains(&0) {
            return Err(Error::Config("agent hidden widths must be positive".into()));
        }
        if self.env.max_steps == 0 || self.env.max_out == 0 {
            return Err(Error::Config("env max_steps and max_out must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval ks must be a non-empty list of positive integers".into()));
        }
        let max_k = *self.eval.ks.iter().max().expect("non-empty");
        if self.eval.beam_width < max_k {
            return Err(Error::Config(format!("eval beam_width {} is below the largest k {max_k}", self.eval.beam_width)));
        }
        if self.eval.valid_beam_width == 0 {
            return Err(Error::Config("eval valid_beam_width must be positive".into()));
        }
        Ok(())
    }

    /// Writes the fully materialized config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl PathsConfig {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.graph,
            &mut self.embeddings,
            &mut self.train,
            &mut self.valid,
            &mut self.test,
            &mut self.checkpoint,
            &mut self.run_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
