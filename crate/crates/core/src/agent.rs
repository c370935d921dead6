//! Path-aware actor and value critic.
//!
//! The actor maps a state vector through a three-layer tanh MLP to a query
//! vector `z` of the same width as an action-table row, and scores every
//! candidate edge by `row · z`. The critic is a separate three-layer tanh MLP
//! with a scalar output. All arithmetic is `f64` with hand-written backprop.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;
use crate::graph::mix_seed;
use crate::transe::EmbeddingTable;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("action table has no valid rows")]
    EmptyTable,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate edges of one state: row `i` is `[v_r ; v_e]` of action `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTable {
    pub rows: Array2<f64>,
    /// `true` marks a real action; `false` a pad row.
    pub mask: Vec<bool>,
    /// Actions of the valid rows, in row order.
    pub actions: Vec<Action>,
}

impl ActionTable {
    /// Builds the table for `actions`, padded with zero rows up to `pad_to`.
    pub fn build(actions: &[Action], embeddings: &EmbeddingTable, pad_to: Option<usize>) -> Result<Self, AgentError> {
        if actions.is_empty() {
            return Err(AgentError::EmptyTable);
        }
        let k = pad_to.unwrap_or(actions.len()).max(actions.len());
        let mut rows = Array2::zeros((k, embeddings.edge_dim()));
        for (i, a) in actions.iter().enumerate() {
            let row = rows.row_mut(i).into_slice().expect("standard layout");
            embeddings.write_edge_row(a.relation, a.destination, row);
        }
        let mut mask = vec![false; k];
        mask[..actions.len()].iter_mut().for_each(|m| *m = true);
        Ok(Self { rows, mask, actions: actions.to_vec() })
    }

    /// Table from raw rows; `actions` are synthesized placeholders. Used by tests and fixtures.
    pub fn from_rows(rows: Array2<f64>, mask: Vec<bool>) -> Result<Self, AgentError> {
        if rows.nrows() != mask.len() {
            return Err(AgentError::Shape(format!("{} rows vs mask of {}", rows.nrows(), mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AgentError::EmptyTable);
        }
        Ok(Self { rows, mask, actions: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn row_dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub chosen: Option<(usize, f64)>,
}

impl ActionDistribution {
    /// Masked softmax. The normalizer sums the exponentials in sorted order so
    /// that permuting rows permutes the result exactly.
    pub fn from_logits(mut logits: Vec<f64>, mask: &[bool]) -> Result<Self, AgentError> {
        if logits.len() != mask.len() {
            return Err(AgentError::Shape(format!("{} logits vs mask of {}", logits.len(), mask.len())));
        }
        for (l, &m) in logits.iter_mut().zip(mask) {
            if !m {
                *l = f64::NEG_INFINITY;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(AgentError::EmptyTable);
        }
        let mut exps: Vec<f64> = logits.iter().filter(|l| l.is_finite()).map(|l| (l - max).exp()).collect();
        exps.sort_by(f64::total_cmp);
        let log_z = max + exps.iter().sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { l - log_z } else { f64::NEG_INFINITY }).collect();
        let probs = log_probs.iter().map(|&lp| if lp.is_finite() { lp.exp() } else { 0.0 }).collect();
        Ok(Self { logits, probs, log_probs, chosen: None })
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().zip(&self.log_probs).filter(|(p, _)| **p > 0.0).map(|(p, lp)| p * lp).sum::<f64>()
    }

    /// Lowest index among the most probable valid rows.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Sample,
    Greedy,
}

/// Picks a row and records it in `dist.chosen`; returns `(index, log_prob)`.
pub fn sample_action<R: Rng + ?Sized>(dist: &mut ActionDistribution, rng: &mut R, mode: SampleMode) -> (usize, f64) {
    let idx = match mode {
        SampleMode::Greedy => dist.argmax(),
        SampleMode::Sample => WeightedIndex::new(&dist.probs).expect("valid distribution has positive mass").sample(rng),
    };
    let chosen = (idx, dist.log_probs[idx]);
    dist.chosen = Some(chosen);
    chosen
}

/// Fully connected layer `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

/// Three dense layers with tanh between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept for backprop.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub input: Array2<f64>,
    /// Post-tanh activations of each hidden layer.
    pub hidden: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<MlpCache, AgentError> {
        if x.ncols() != self.input_dim() {
            return Err(AgentError::Shape(format!("input width {} vs {}", x.ncols(), self.input_dim())));
        }
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut cur = x.to_owned();
        for layer in &self.layers[..last] {
            let mut h = layer.forward(cur.view());
            h.mapv_inplace(f64::tanh);
            hidden.push(h.clone());
            cur = h;
        }
        let output = self.layers[last].forward(cur.view());
        Ok(MlpCache { input: x.to_owned(), hidden, output })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, AgentError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(view)?.output.into_raw_vec_and_offset().0)
    }

    /// Gradients given `d_out = dL/d(output)`; rows of `d_out` match the cached batch.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> Mlp {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut delta = d_out.to_owned();
        for i in (0..n).rev() {
            let input = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            if i > 0 {
                let mut d_in = delta.dot(&self.layers[i].w);
                d_in.zip_mut_with(&cache.hidden[i - 1], |d, &h| *d *= 1.0 - h * h);
                delta = d_in;
            }
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn norm(&self) -> f64 {
        self.params().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.params_mut().for_each(|x| *x *= s);
    }

    pub fn add_scaled(&mut self, other: &Mlp, s: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += s * b;
        }
    }

    fn shape_matches(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.w.dim() == b.w.dim())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDims {
    pub state_dim: usize,
    pub hidden: [usize; 2],
    /// Action-table row width, `d_r + d_e`.
    pub edge_dim: usize,
}

impl AgentDims {
    pub fn actor_dims(&self) -> [usize; 4] {
        [self.state_dim, self.hidden[0], self.hidden[1], self.edge_dim]
    }

    pub fn critic_dims(&self) -> [usize; 4] {
        [self.state_dim, self.hidden[0], self.hidden[1], 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub dims: AgentDims,
    pub actor: Mlp,
    pub critic: Mlp,
}

/// `out × in` matrix with orthonormal rows or columns, scaled by `gain`.
pub fn orthogonal(out: usize, input: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (tall, wide) = (out.max(input), out.min(input));
    let g = DMatrix::<f64>::from_fn(tall, wide, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix makes the draw uniform over the orthogonal group.
    for j in 0..wide {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((out, input), |(i, j)| gain * if out >= input { q[(i, j)] } else { q[(j, i)] })
}

fn init_mlp(dims: &[usize; 4], output_gain: f64, rng: &mut ChaCha8Rng) -> Mlp {
    let mut mlp = Mlp::zeros(dims);
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter_mut().enumerate() {
        let gain = if i == last { output_gain } else { std::f64::consts::SQRT_2 };
        layer.w = orthogonal(layer.output_dim(), layer.input_dim(), gain, rng);
    }
    mlp
}

/// Orthogonal weights (gain sqrt 2 hidden, 0.01 actor output, 1 critic output), zero biases.
pub fn init_params(dims: &AgentDims, seed: u64) -> PolicyParams {
    assert!(dims.state_dim > 0 && dims.hidden.iter().all(|&h| h > 0) && dims.edge_dim > 0, "dims must be positive");
    let actor = init_mlp(&dims.actor_dims(), 0.01, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 1)));
    let critic = init_mlp(&dims.critic_dims(), 1.0, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)));
    PolicyParams { dims: dims.clone(), actor, critic }
}

/// Logits `rows · z`, one independent dot product per row.
pub fn table_logits(table: &ActionTable, z: &[f64]) -> Result<Vec<f64>, AgentError> {
    if table.row_dim() != z.len() {
        return Err(AgentError::Shape(format!("row width {} vs actor output {}", table.row_dim(), z.len())));
    }
    Ok(table.rows.rows().into_iter().map(|r| dot(r.as_slice().expect("standard layout"), z)).collect())
}

pub fn actor_forward(p: &PolicyParams, s: &[f64], table: &ActionTable) -> Result<ActionDistribution, AgentError> {
    let z = p.actor.forward(s)?;
    ActionDistribution::from_logits(table_logits(table, &z)?, &table.mask)
}

pub fn critic_forward(p: &PolicyParams, s: &[f64]) -> Result<f64, AgentError> {
    Ok(p.critic.forward(s)?[0])
}

pub fn critic_forward_batch(p: &PolicyParams, states: ArrayView2<f64>) -> Result<Vec<f64>, AgentError> {
    Ok(p.critic.forward_batch(states)?.output.column(0).to_vec())
}

/// `dL/dz` from per-row logit gradients: `sum_j g_j row_j`.
pub fn logit_grad_to_z(table: &ActionTable, d_logits: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (row, &g) in table.rows.rows().into_iter().zip(d_logits) {
        if g != 0.0 {
            for (o, &r) in out.iter_mut().zip(row.iter()) {
                *o += g * r;
            }
        }
    }
}

/// `d log pi(a) / d logits`: one-hot minus probabilities (zero on pad rows).
pub fn log_prob_logit_grad(dist: &ActionDistribution, action: usize) -> Vec<f64> {
    dist.probs.iter().enumerate().map(|(j, &p)| if j == action { 1.0 - p } else { -p }).collect()
}

/// `d H / d logits` where `H = -sum p log p`.
pub fn entropy_logit_grad(dist: &ActionDistribution) -> Vec<f64> {
    let h = dist.entropy();
    dist.probs
        .iter()
        .zip(&dist.log_probs)
        .map(|(&p, &lp)| if p > 0.0 { -p * (lp + h) } else { 0.0 })
        .collect()
}

/// Gradient of `log pi(a|s)` wrt every actor parameter.
pub fn log_prob_gradient(p: &PolicyParams, s: &[f64], table: &ActionTable, action: usize) -> Result<Mlp, AgentError> {
    let view = ArrayView2::from_shape((1, s.len()), s).map_err(|e| AgentError::Shape(e.to_string()))?;
    let cache = p.actor.forward_batch(view)?;
    let z = cache.output.row(0).to_vec();
    let dist = ActionDistribution::from_logits(table_logits(table, &z)?, &table.mask)?;
    let mut dz = vec![0.0; z.len()];
    logit_grad_to_z(table, &log_prob_logit_grad(&dist, action), &mut dz);
    let d_out = Array2::from_shape_vec((1, dz.len()), dz).expect("row");
    Ok(p.actor.backward(&cache, d_out.view()))
}

/// Gradient of `V(s)` wrt every critic parameter.
pub fn value_gradient(p: &PolicyParams, s: &[f64]) -> Result<Mlp, AgentError> {
    let view = ArrayView2::from_shape((1, s.len()), s).map_err(|e| AgentError::Shape(e.to_string()))?;
    let cache = p.critic.forward_batch(view)?;
    Ok(p.critic.backward(&cache, Array2::ones((1, 1)).view()))
}

/// Adam moments for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Mlp,
    pub v: Mlp,
    pub step: u64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Adam {
    pub fn new(shape: &Mlp, eps: f64) -> Self {
        let mut m = shape.clone();
        m.scale(0.0);
        Self { v: m.clone(), m, step: 0, eps, beta1: 0.9, beta2: 0.999 }
    }

    /// Descends `params` along `grad` with learning rate `lr`.
    pub fn apply(&mut self, params: &mut Mlp, grad: &Mlp, lr: f64) {
        debug_assert!(params.shape_matches(grad));
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let it = params.params_mut().zip(grad.params()).zip(self.m.params_mut().zip(self.v.params_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"KGWCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializable training snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub seed: u64,
    pub iteration: u64,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> std::io::Result<()> {
    for x in mlp.params() {
        w.write_f32::<LittleEndian>(*x as f32)?;
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R, dims: &[usize; 4]) -> std::io::Result<Mlp> {
    let mut mlp = Mlp::zeros(dims);
    for x in mlp.params_mut() {
        *x = r.read_f32::<LittleEndian>()? as f64;
    }
    Ok(mlp)
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), AgentError> {
        let d = &self.params.dims;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        for x in [d.state_dim, d.hidden[0], d.hidden[1], d.edge_dim] {
            w.write_u32::<LittleEndian>(x as u32)?;
        }
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.iteration)?;
        write_mlp(&mut w, &self.params.actor)?;
        write_mlp(&mut w, &self.params.critic)?;
        for opt in [&self.actor_opt, &self.critic_opt] {
            w.write_u64::<LittleEndian>(opt.step)?;
            w.write_f64::<LittleEndian>(opt.eps)?;
            write_mlp(&mut w, &opt.m)?;
            write_mlp(&mut w, &opt.v)?;
        }
        Ok(())
    }

    /// Reads a checkpoint; when `expect` is given the stored dims must match it.
    pub fn read<R: Read>(mut r: R, expect: Option<&AgentDims>) -> Result<Self, AgentError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AgentError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(AgentError::Format(format!("unsupported version {version}")));
        }
        let mut d = [0usize; 4];
        for x in &mut d {
            *x = r.read_u32::<LittleEndian>()? as usize;
        }
        let dims = AgentDims { state_dim: d[0], hidden: [d[1], d[2]], edge_dim: d[3] };
        if let Some(e) = expect {
            if e != &dims {
                return Err(AgentError::Shape(format!("checkpoint dims {dims:?} vs config {e:?}")));
            }
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let iteration = r.read_u64::<LittleEndian>()?;
        let actor = read_mlp(&mut r, &dims.actor_dims())?;
        let critic = read_mlp(&mut r, &dims.critic_dims())?;
        let mut opts = Vec::with_capacity(2);
        for shape in [dims.actor_dims(), dims.critic_dims()] {
            let step = r.read_u64::<LittleEndian>()?;
            let eps = r.read_f64::<LittleEndian>()?;
            let m = read_mlp(&mut r, &shape)?;
            let v = read_mlp(&mut r, &shape)?;
            opts.push(Adam { m, v, step, eps, beta1: 0.9, beta2: 0.999 });
        }
        let critic_opt = opts.pop().expect("two optimizers");
        let actor_opt = opts.pop().expect("two optimizers");
        Ok(Self { params: PolicyParams { dims, actor, critic }, seed, iteration, actor_opt, critic_opt })
    }
}
