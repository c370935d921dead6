//! Text rendering of environment states.
//!
//! [`render_fte`] produces the observation block fed to state encoders.
//! [`render_prompt`] wraps it into one of three chat-prompt layouts for
//! evaluating an external model on the same task.

use serde::{Deserialize, Serialize};

use crate::env::{EnvState, DEFAULT_TASK_BACKGROUND};
use crate::graph::{EntityId, KnowledgeGraph, RelationId};

pub const ENVIRONMENT_HEADER: &str = "### Environment:";

const STANDARD_INSTRUCTION: &str = "If you don't think it's necessary to perform the second hop in reasoning, stop the reasoning with the 'Equal' relation.\n\
Given the Task Background and the Environment, directly output this path in triplet format without any other content.";

const OUT_PATH_INSTRUCTION: &str = "Given the Task Background and the Environment, please choose select two consecutive paths KG path from a set of Out Paths.\n\
If you don't think it's necessary to perform the second hop in reasoning, just select the 'Equal' relation at the second hop.\n\
Directly output these path in triplet format without any other content.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// Utterance and current entity only.
    Standard,
    /// Adds dialog and path history.
    Normal,
    /// Adds the two-hop out-path list.
    #[serde(rename = "opa", alias = "out_path_aware")]
    OutPathAware,
}

impl SchemeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Some(Self::Standard),
            "normal" => Some(Self::Normal),
            "opa" | "out_path_aware" | "outpathaware" => Some(Self::OutPathAware),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Normal => "normal",
            Self::OutPathAware => "opa",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptScheme {
    pub kind: SchemeKind,
    pub task_background: String,
    pub instruction: String,
    /// Few-shot examples, one line each. Empty by default.
    pub examples: Vec<String>,
}

impl PromptScheme {
    pub fn new(kind: SchemeKind) -> Self {
        let instruction = match kind {
            SchemeKind::Standard | SchemeKind::Normal => STANDARD_INSTRUCTION,
            SchemeKind::OutPathAware => OUT_PATH_INSTRUCTION,
        };
        Self {
            kind,
            task_background: DEFAULT_TASK_BACKGROUND.to_owned(),
            instruction: instruction.to_owned(),
            examples: Vec::new(),
        }
    }
}

/// JSON string literal of `s`.
fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

fn history_list(history: &[String]) -> String {
    let items: Vec<String> = history.iter().map(|h| quoted(h)).collect();
    format!("[{}]", items.join(","))
}

fn path_list(state: &EnvState, g: &KnowledgeGraph) -> String {
    let items: Vec<String> = state
        .path
        .iter()
        .map(|s| {
            format!(
                "[{},{},{}]",
                quoted(g.entity_name(s.head)),
                quoted(g.relation_name(s.relation)),
                quoted(g.entity_name(s.tail))
            )
        })
        .collect();
    format!("[{}]", items.join(","))
}

/// The observation block. No trailing newline.
pub fn render_fte(state: &EnvState, g: &KnowledgeGraph) -> String {
    format!(
        "{ENVIRONMENT_HEADER}\nDialog History: {}\nUtterance: {}\nPath History: {}\nCurrent Entity: {}",
        history_list(&state.history),
        state.utterance,
        path_list(state, g),
        g.entity_name(state.current)
    )
}

/// Python-repr style single-quoted literal, switching to double quotes when
/// the text contains a single quote and no double quote.
fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn sorted_exits(g: &KnowledgeGraph, v: EntityId, max_out: usize, seed: u64) -> Vec<(RelationId, EntityId)> {
    let mut exits = g.out_edges_of(v, max_out, seed);
    exits.sort_unstable();
    exits
}

/// First-hop exits of `v` followed by the second-hop exits of each non-`Equal`
/// destination, as `head,relation,tail` strings.
pub fn out_paths(g: &KnowledgeGraph, v: EntityId, max_out: usize, seed: u64) -> Vec<String> {
    let edge = |h: EntityId, r: RelationId, t: EntityId| {
        format!("{},{},{}", g.entity_name(h), g.relation_name(r), g.entity_name(t))
    };
    let first = sorted_exits(g, v, max_out, seed);
    let mut paths: Vec<String> = first.iter().map(|&(r, t)| edge(v, r, t)).collect();
    for &(r, mid) in &first {
        if r.is_equal() {
            continue;
        }
        paths.extend(sorted_exits(g, mid, max_out, seed).into_iter().map(|(r2, t)| edge(mid, r2, t)));
    }
    paths
}

/// Full chat prompt for `scheme`. Sections are separated by one blank line.
pub fn render_prompt(scheme: &PromptScheme, state: &EnvState, g: &KnowledgeGraph, max_out: usize, seed: u64) -> String {
    let mut env_block = match scheme.kind {
        SchemeKind::Standard => format!(
            "{ENVIRONMENT_HEADER}\nUtterance: {}\nCurrent Entity: {}",
            state.utterance,
            g.entity_name(state.current)
        ),
        SchemeKind::Normal | SchemeKind::OutPathAware => render_fte(state, g),
    };
    if scheme.kind == SchemeKind::OutPathAware {
        let items: Vec<String> = out_paths(g, state.current, max_out, seed).iter().map(|p| py_repr(p)).collect();
        env_block.push_str(&format!("\nOut Path: [{}]", items.join(", ")));
    }
    let mut examples = String::from("### Examples");
    for ex in &scheme.examples {
        examples.push('\n');
        examples.push_str(ex);
    }
    format!(
        "### Task Background\n{}\n\n### Instruction\n{}\n\n{}\n\n{}\n\n### Response",
        scheme.task_background, scheme.instruction, env_block, examples
    )
}
