//! Rollout collection and clipped-surrogate PPO with GAE.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    actor_forward, critic_forward, entropy_logit_grad, log_prob_logit_grad, logit_grad_to_z, sample_action,
    table_logits, ActionDistribution, ActionTable, Adam, Checkpoint, Mlp, PolicyParams, SampleMode,
};
use crate::dataset::Sample;
use crate::encoder::{StateEmbedding, StateEncoder};
use crate::env::{Environment, Episode};
use crate::error::{Error, Result};
use crate::fte::render_fte;
use crate::graph::{mix_seed, EntityId};
use crate::transe::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvNormalization {
    Off,
    Buffer,
    Minibatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lamda: f64,
    pub epsilon: f64,
    pub k_epochs: usize,
    pub mini_batch_size: usize,
    pub replay_buffer_size: usize,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub entropy_coef: f64,
    /// Global-norm clip applied to each network's gradient; 0 disables.
    pub grad_clip_norm: f64,
    pub advantage_normalization: AdvNormalization,
    pub learning_rate_decay: bool,
    pub adam_eps: f64,
    pub number_of_explorations: usize,
    pub max_patience: usize,
    pub iterations: usize,
    /// Stop once this many environment steps have been collected.
    pub max_env_steps: Option<u64>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lamda: 0.95,
            epsilon: 0.2,
            k_epochs: 10,
            mini_batch_size: 1024,
            replay_buffer_size: 4096,
            actor_learning_rate: 5e-5,
            critic_learning_rate: 5e-5,
            entropy_coef: 0.01,
            grad_clip_norm: 0.5,
            advantage_normalization: AdvNormalization::Buffer,
            learning_rate_decay: true,
            adam_eps: 1e-5,
            number_of_explorations: 8,
            max_patience: 5,
            iterations: 100,
            max_env_steps: None,
            workers: 1,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lamda) {
            return bad("lamda must be in [0, 1]");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.k_epochs == 0 || self.mini_batch_size == 0 || self.replay_buffer_size == 0 {
            return bad("k_epochs, mini_batch_size and replay_buffer_size must be positive");
        }
        if self.number_of_explorations == 0 || self.workers == 0 {
            return bad("number_of_explorations and workers must be positive");
        }
        Ok(())
    }

    /// Minibatches per epoch for a buffer of `len` transitions.
    pub fn minibatches(&self, len: usize) -> usize {
        (len / self.mini_batch_size).max(1)
    }

    /// Optimizer steps the learning-rate schedule spans.
    pub fn planned_steps(&self) -> u64 {
        (self.iterations * self.k_epochs * self.minibatches(self.replay_buffer_size)) as u64
    }
}

/// Linear decay from `lr0` to 0 over `total` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub lr0: f64,
    pub total: u64,
    pub enabled: bool,
}

impl LinearDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if !self.enabled || self.total == 0 {
            return self.lr0;
        }
        self.lr0 * (1.0 - step as f64 / self.total as f64).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub v_c: EntityId,
    /// Hop index of the state, needed with `v_c` to rebuild the action set.
    pub hop: usize,
    pub s: StateEmbedding,
    pub fte: String,
    pub log_prob: f64,
    pub action_index: usize,
    pub mask: Vec<bool>,
    pub reward: f64,
    pub value: f64,
    /// `V(s')`, meaningful only when not done.
    pub next_value: f64,
    pub s_next: StateEmbedding,
    pub done: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub capacity: usize,
    pub episodes: usize,
    /// Episodes that ended on the goal.
    pub successes: usize,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Everything rollouts and updates read but never write.
pub struct PpoContext<'a> {
    pub env: &'a Environment<'a>,
    pub embeddings: &'a EmbeddingTable,
    pub encoder: &'a dyn StateEncoder,
}

impl PpoContext<'_> {
    fn table(&self, v: EntityId, hop: usize) -> Result<ActionTable> {
        Ok(ActionTable::build(&self.env.actions_at(v, hop), self.embeddings, None)?)
    }
}

/// An episode's transitions and whether it reached the goal.
type Rollout = (Vec<Transition>, bool);

/// One sampled episode as transitions.
fn run_episode(ctx: &PpoContext<'_>, policy: &PolicyParams, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Rollout> {
    let graph = ctx.env.graph();
    let mut ep = Episode::begin(ctx.env, sample)?;
    let mut out: Vec<Transition> = Vec::with_capacity(ctx.env.config().max_steps);
    let mut fte = render_fte(ep.state(), graph);
    let mut s = ctx.encoder.encode(&fte)?;
    while !ep.done {
        let state = ep.state().clone();
        let table = ctx.table(state.current, state.step)?;
        let mut dist = actor_forward(policy, &s, &table)?;
        let (idx, log_prob) = sample_action(&mut dist, rng, SampleMode::Sample);
        let value = critic_forward(policy, &s)?;
        if let Some(prev) = out.last_mut() {
            prev.next_value = value;
        }
        let (reward, done) = ep.advance(ctx.env, table.actions[idx])?;
        let next_fte = render_fte(ep.state(), graph);
        let s_next = ctx.encoder.encode(&next_fte)?;
        out.push(Transition {
            v_c: state.current,
            hop: state.step,
            s,
            fte,
            log_prob,
            action_index: idx,
            mask: table.mask.clone(),
            reward,
            value,
            next_value: 0.0,
            s_next: s_next.clone(),
            done,
        });
        fte = next_fte;
        s = s_next;
    }
    Ok((out, ep.state().current == sample.goal))
}

/// `number_of_explorations` episodes from one start sample, with their own RNG stream.
fn run_group(ctx: &PpoContext<'_>, policy: &PolicyParams, sample: &Sample, cfg: &PpoConfig, seed: u64) -> Result<Vec<Rollout>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.number_of_explorations).map(|_| run_episode(ctx, policy, sample, &mut rng)).collect()
}

/// Fills a buffer with whole episodes until it holds at least `replay_buffer_size` transitions.
///
/// Start samples are visited in a per-iteration shuffled order, cycling if
/// needed. Each start sample is one group of episodes with an RNG stream
/// derived from `(seed, iteration, group)`, so the result does not depend on
/// the worker count.
pub fn collect_rollouts(
    ctx: &PpoContext<'_>,
    policy: &PolicyParams,
    samples: &[Sample],
    cfg: &PpoConfig,
    iteration: u64,
) -> Result<RolloutBuffer> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let iter_seed = mix_seed(cfg.seed, iteration);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(iter_seed));
    let mut buf = RolloutBuffer { capacity: cfg.replay_buffer_size, ..Default::default() };
    let mut group = 0usize;
    while buf.len() < cfg.replay_buffer_size {
        let wave: Vec<(usize, u64)> =
            (group..group + cfg.workers).map(|g| (order[g % order.len()], mix_seed(iter_seed, g as u64 + 1))).collect();
        group += cfg.workers;
        let results: Vec<Result<Vec<Rollout>>> = if cfg.workers == 1 {
            wave.iter().map(|&(i, seed)| run_group(ctx, policy, &samples[i], cfg, seed)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&(i, seed)| scope.spawn(move || run_group(ctx, policy, &samples[i], cfg, seed)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
            })
        };
        'assemble: for r in results {
            for (episode, success) in r? {
                buf.transitions.extend(episode);
                buf.episodes += 1;
                buf.successes += success as usize;
                if buf.len() >= cfg.replay_buffer_size {
                    break 'assemble;
                }
            }
        }
    }
    Ok(buf)
}

/// GAE over a flat sequence of whole episodes.
///
/// `delta_t = r_t + gamma * V'_t * (1 - done_t) - V_t` and
/// `A_t = delta_t + gamma * lamda * (1 - done_t) * A_{t+1}`.
pub fn gae(rewards: &[f64], values: &[f64], next_values: &[f64], dones: &[bool], gamma: f64, lamda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_values[t] * live - values[t];
        running = delta + gamma * lamda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Population standardization with `eps = 1e-8`; left untouched for fewer than two entries.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter_mut().for_each(|x| *x = (*x - mean) / (std + 1e-8));
}

/// Fills `buf.advantages` and `buf.returns`; returns are computed before normalization.
pub fn compute_gae(buf: &mut RolloutBuffer, cfg: &PpoConfig) {
    let t = &buf.transitions;
    let rewards: Vec<f64> = t.iter().map(|x| x.reward).collect();
    let values: Vec<f64> = t.iter().map(|x| x.value).collect();
    let next: Vec<f64> = t.iter().map(|x| x.next_value).collect();
    let dones: Vec<bool> = t.iter().map(|x| x.done).collect();
    let (mut adv, ret) = gae(&rewards, &values, &next, &dones, cfg.gamma, cfg.lamda);
    if cfg.advantage_normalization == AdvNormalization::Buffer {
        normalize(&mut adv);
    }
    buf.advantages = adv;
    buf.returns = ret;
}

/// Optimizer state for both networks plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub actor: Adam,
    pub critic: Adam,
    pub actor_lr: LinearDecay,
    pub critic_lr: LinearDecay,
}

impl OptimState {
    pub fn new(policy: &PolicyParams, cfg: &PpoConfig) -> Self {
        let total = cfg.planned_steps();
        Self {
            actor: Adam::new(&policy.actor, cfg.adam_eps),
            critic: Adam::new(&policy.critic, cfg.adam_eps),
            actor_lr: LinearDecay { lr0: cfg.actor_learning_rate, total, enabled: cfg.learning_rate_decay },
            critic_lr: LinearDecay { lr0: cfg.critic_learning_rate, total, enabled: cfg.learning_rate_decay },
        }
    }

    pub fn steps(&self) -> u64 {
        self.actor.step
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub lr: f64,
    pub minibatches: usize,
}

/// Scales `g` so its global norm is at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(g: &mut Mlp, max: f64) -> f64 {
    let norm = g.norm();
    if max > 0.0 && norm > max {
        g.scale(max / (norm + 1e-6));
    }
    norm
}

/// Per-sample actor loss terms and their gradient wrt the logits.
pub struct SurrogateTerm {
    pub loss: f64,
    pub ratio: f64,
    pub clipped: bool,
    pub log_prob: f64,
    pub entropy: f64,
    pub d_logits: Vec<f64>,
}

/// `-min(rho A, clip(rho) A) - c H` for one transition.
pub fn surrogate(dist: &ActionDistribution, action: usize, old_log_prob: f64, adv: f64, epsilon: f64, entropy_coef: f64) -> SurrogateTerm {
    let log_prob = dist.log_probs[action];
    let ratio = (log_prob - old_log_prob).exp();
    let unclipped = ratio * adv;
    let clipped_obj = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
    let clipped = clipped_obj < unclipped;
    let entropy = dist.entropy();
    let loss = -unclipped.min(clipped_obj) - entropy_coef * entropy;
    let d_lp = if clipped { 0.0 } else { -ratio * adv };
    let g_lp = log_prob_logit_grad(dist, action);
    let g_h = entropy_logit_grad(dist);
    let d_logits = g_lp.iter().zip(&g_h).map(|(a, b)| d_lp * a - entropy_coef * b).collect();
    SurrogateTerm { loss, ratio, clipped, log_prob, entropy, d_logits }
}

/// `k_epochs` passes of minibatch PPO over a buffer whose advantages are already computed.
pub fn update(
    ctx: &PpoContext<'_>,
    policy: &mut PolicyParams,
    opt: &mut OptimState,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    iteration: u64,
) -> Result<UpdateStats> {
    let n = buf.len();
    if n == 0 || buf.advantages.len() != n {
        return Err(Error::Config("buffer is empty or advantages were not computed".into()));
    }
    let mut tables: BTreeMap<(EntityId, usize), ActionTable> = BTreeMap::new();
    for t in &buf.transitions {
        if let std::collections::btree_map::Entry::Vacant(e) = tables.entry((t.v_c, t.hop)) {
            e.insert(ctx.table(t.v_c, t.hop)?);
        }
        if tables[&(t.v_c, t.hop)].mask != t.mask {
            return Err(Error::Config(format!("recorded mask disagrees with rebuilt action set at {}", t.v_c)));
        }
    }
    let d_s = policy.dims.state_dim;
    let n_mb = cfg.minibatches(n);
    let chunk = n.div_ceil(n_mb);
    let mut stats = UpdateStats::default();
    let mut seen = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, iteration), u64::MAX));
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.k_epochs {
        idx.shuffle(&mut rng);
        for mb in idx.chunks(chunk) {
            let m = mb.len();
            let mut x = Array2::zeros((m, d_s));
            for (r, &i) in mb.iter().enumerate() {
                x.row_mut(r).as_slice_mut().expect("row").copy_from_slice(&buf.transitions[i].s);
            }
            let mut adv: Vec<f64> = mb.iter().map(|&i| buf.advantages[i]).collect();
            if cfg.advantage_normalization == AdvNormalization::Minibatch {
                normalize(&mut adv);
            }

            let actor_cache = policy.actor.forward_batch(x.view())?;
            let mut dz = Array2::zeros(actor_cache.output.dim());
            let (mut a_loss, mut ent, mut ratio_sum, mut kl, mut clip_n) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for (r, &i) in mb.iter().enumerate() {
                let t = &buf.transitions[i];
                let table = &tables[&(t.v_c, t.hop)];
                let z = actor_cache.output.row(r);
                let dist = ActionDistribution::from_logits(table_logits(table, z.as_slice().expect("row"))?, &table.mask)?;
                let term = surrogate(&dist, t.action_index, t.log_prob, adv[r], cfg.epsilon, cfg.entropy_coef);
                a_loss += term.loss;
                ent += term.entropy;
                ratio_sum += term.ratio;
                kl += t.log_prob - term.log_prob;
                clip_n += term.clipped as usize;
                let scaled: Vec<f64> = term.d_logits.iter().map(|g| g / m as f64).collect();
                logit_grad_to_z(table, &scaled, dz.row_mut(r).as_slice_mut().expect("row"));
            }
            let critic_cache = policy.critic.forward_batch(x.view())?;
            let mut dv = Array2::zeros((m, 1));
            let mut c_loss = 0.0;
            for (r, &i) in mb.iter().enumerate() {
                let err = critic_cache.output[(r, 0)] - buf.returns[i];
                c_loss += err * err;
                dv[(r, 0)] = 2.0 * err / m as f64;
            }
            a_loss /= m as f64;
            c_loss /= m as f64;
            if !a_loss.is_finite() || !c_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "iteration {iteration}, optimizer step {}: actor loss {a_loss}, critic loss {c_loss}, minibatch size {m}",
                    opt.steps()
                )));
            }
            let mut ga = policy.actor.backward(&actor_cache, dz.view());
            let mut gc = policy.critic.backward(&critic_cache, dv.view());
            let na = clip_grad_norm(&mut ga, cfg.grad_clip_norm);
            let nc = clip_grad_norm(&mut gc, cfg.grad_clip_norm);
            let step = opt.steps();
            let (lr_a, lr_c) = (opt.actor_lr.lr(step), opt.critic_lr.lr(step));
            opt.actor.apply(&mut policy.actor, &ga, lr_a);
            opt.critic.apply(&mut policy.critic, &gc, lr_c);

            stats.actor_loss += a_loss;
            stats.critic_loss += c_loss;
            stats.entropy += ent / m as f64;
            stats.mean_ratio += ratio_sum / m as f64;
            stats.approx_kl += kl / m as f64;
            stats.clip_fraction += clip_n as f64 / m as f64;
            stats.actor_grad_norm += na;
            stats.critic_grad_norm += nc;
            stats.lr = lr_a;
            stats.minibatches += 1;
            seen += m;
        }
    }
    debug_assert_eq!(seen, n * cfg.k_epochs);
    let k = stats.minibatches as f64;
    for x in [
        &mut stats.actor_loss,
        &mut stats.critic_loss,
        &mut stats.entropy,
        &mut stats.mean_ratio,
        &mut stats.approx_kl,
        &mut stats.clip_fraction,
        &mut stats.actor_grad_norm,
        &mut stats.critic_grad_norm,
    ] {
        *x /= k;
    }
    Ok(stats)
}

/// Validation scores reported after each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidScores {
    pub path_at_1: f64,
    pub target_at_1: f64,
}

/// One line of the training log. Deterministic in single-worker mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub train_success: f64,
    pub stats: UpdateStats,
    pub valid: ValidScores,
    pub best_target_at_1: f64,
    pub patience: usize,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_valid: ValidScores,
    pub iterations: u64,
    pub env_steps: u64,
    pub records: Vec<IterationRecord>,
}

/// Collect, estimate advantages, update, validate; repeat until the iteration
/// or environment-step budget runs out or validation target@1 has not
/// improved for `max_patience` consecutive iterations.
pub fn train_loop(
    ctx: &PpoContext<'_>,
    init: PolicyParams,
    train: &[Sample],
    cfg: &PpoConfig,
    validate: &mut dyn FnMut(&PolicyParams) -> Result<ValidScores>,
    on_iteration: &mut dyn FnMut(&IterationRecord, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut policy = init;
    let mut opt = OptimState::new(&policy, cfg);
    let snapshot = |p: &PolicyParams, o: &OptimState, iteration: u64| Checkpoint {
        params: p.clone(),
        seed: cfg.seed,
        iteration,
        actor_opt: o.actor.clone(),
        critic_opt: o.critic.clone(),
    };
    let mut best = snapshot(&policy, &opt, 0);
    let mut best_valid = ValidScores { path_at_1: 0.0, target_at_1: f64::NEG_INFINITY };
    let mut patience = 0usize;
    let mut env_steps = 0u64;
    let mut records = Vec::new();
    let mut iteration = 0u64;
    let started = std::time::Instant::now();
    while (iteration as usize) < cfg.iterations {
        // A buffer overshoots its capacity by at most one episode minus a step.
        let worst = (cfg.replay_buffer_size + ctx.env.config().max_steps - 1) as u64;
        if cfg.max_env_steps.is_some_and(|max| env_steps + worst > max) {
            break;
        }
        let mut buf = collect_rollouts(ctx, &policy, train, cfg, iteration)?;
        env_steps += buf.len() as u64;
        compute_gae(&mut buf, cfg);
        let stats = update(ctx, &mut policy, &mut opt, &buf, cfg, iteration)?;
        iteration += 1;
        let valid = validate(&policy)?;
        if valid.target_at_1 > best_valid.target_at_1 {
            best_valid = valid;
            best = snapshot(&policy, &opt, iteration);
            patience = 0;
        } else {
            patience += 1;
        }
        let record = IterationRecord {
            iteration,
            env_steps,
            episodes: buf.episodes,
            train_success: buf.successes as f64 / buf.episodes.max(1) as f64,
            stats,
            valid,
            best_target_at_1: best_valid.target_at_1,
            patience,
        };
        log::info!(
            "iter {iteration} steps {env_steps} success {:.3} valid t@1 {:.3} p@1 {:.3} entropy {:.3} {:.1}s",
            record.train_success,
            valid.target_at_1,
            valid.path_at_1,
            record.stats.entropy,
            started.elapsed().as_secs_f64()
        );
        on_iteration(&record, &best)?;
        records.push(record);
        if patience >= cfg.max_patience {
            break;
        }
    }
    if best_valid.target_at_1 == f64::NEG_INFINITY {
        best_valid.target_at_1 = 0.0;
    }
    let last = snapshot(&policy, &opt, iteration);
    Ok(TrainOutcome { best, last, best_valid, iterations: iteration, env_steps, records })
}
