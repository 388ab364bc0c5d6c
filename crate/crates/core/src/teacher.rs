//! State-based teachers: independent PPO per hand, or one centralized
//! actor-critic over both observations.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_group, BatchPolicy, EvalConfig};
use crate::math::RngStream;
use crate::nn::checkpoint::{Checkpoint, CheckpointHeader};
use crate::nn::policy::{LOG_STD_MAX, LOG_STD_MIN};
use crate::nn::{
    gaussian_entropy, gaussian_log_prob, ActorCritic, ActorCriticCache, ActorCriticSpec,
    AdamWConfig, AdamWState, MlpCache,
};
use crate::nn::params::clip_grad_norm;
use crate::sim::{BimanualEnv, EnvState, Side, Stage, ACTION_DIM};

/// Samples per gradient chunk. Chunks are summed in a fixed order, so the
/// result does not depend on the worker count.
const GRAD_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherVariant {
    Ippo,
    CentralizedPpo,
}

impl TeacherVariant {
    pub fn name(self) -> &'static str {
        match self {
            TeacherVariant::Ippo => "ippo",
            TeacherVariant::CentralizedPpo => "centralized-ppo",
        }
    }

    pub fn agent_count(self) -> usize {
        match self {
            TeacherVariant::Ippo => 2,
            TeacherVariant::CentralizedPpo => 1,
        }
    }

    fn agent_names(self) -> &'static [&'static str] {
        match self {
            TeacherVariant::Ippo => &["left", "right"],
            TeacherVariant::CentralizedPpo => &["joint"],
        }
    }
}

impl fmt::Display for TeacherVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeacherVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ippo" => Ok(TeacherVariant::Ippo),
            "centralized-ppo" => Ok(TeacherVariant::CentralizedPpo),
            _ => Err(Error::InvalidArgument(format!(
                "unknown teacher variant `{s}` (expected ippo or centralized-ppo)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub num_envs: usize,
    pub total_iterations: u64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    /// Target approximate KL per update; the learning rate is divided by
    /// 1.5 above twice the target and multiplied by 1.5 below half of it,
    /// within `[lr_min, learning_rate]`. 0 keeps the rate fixed.
    pub kl_target: f64,
    pub lr_min: f64,
    /// Iterations between checkpoint writes (0 = only at the end).
    pub checkpoint_interval: u64,
    /// Iterations between deterministic evaluation snapshots (0 = none).
    pub eval_interval: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.96,
            gae_lambda: 0.95,
            clip: 0.2,
            rollout_steps: 8,
            epochs: 5,
            minibatches: 4,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            num_envs: 64,
            total_iterations: 1000,
            value_coef: 0.5,
            entropy_coef: 0.001,
            max_grad_norm: 1.0,
            hidden: vec![128, 128, 64, 64],
            log_std_init: -0.5,
            kl_target: 0.016,
            lr_min: 1e-6,
            checkpoint_interval: 100,
            eval_interval: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if self.rollout_steps == 0 || self.epochs == 0 || self.minibatches == 0 || self.num_envs == 0 {
            return Err(Error::Config(
                "rollout_steps, epochs, minibatches and num_envs must be >= 1".into(),
            ));
        }
        if self.minibatches > self.num_envs * self.rollout_steps {
            return Err(Error::Config("more minibatches than samples per iteration".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be nonempty and >= 1".into()));
        }
        for (name, v) in [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("kl_target", self.kl_target),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.learning_rate) {
            return Err(Error::Config("lr_min must be in (0, learning_rate]".into()));
        }
        self.adamw().validate()
    }

    /// Learning rate for the next update given the KL of the last one.
    pub fn adapt_learning_rate(&self, lr: f64, kl: f64) -> f64 {
        if self.kl_target <= 0.0 {
            return lr;
        }
        if kl > 2.0 * self.kl_target {
            (lr / 1.5).max(self.lr_min)
        } else if kl < 0.5 * self.kl_target {
            (lr * 1.5).min(self.learning_rate)
        } else {
            lr
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One agent's transitions, env-major: index `e * steps + s`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub steps: usize,
    pub obs_width: usize,
    pub act_width: usize,
    /// Normalized observations as seen by the policy.
    pub obs: Vec<f64>,
    /// Sampled actions before clamping.
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub tracking: Vec<bool>,
    /// Critic value of the state after the last step of each env.
    pub bootstrap: Vec<f64>,
}

impl RolloutBatch {
    fn new(num_envs: usize, steps: usize, obs_width: usize, act_width: usize) -> Self {
        let n = num_envs * steps;
        RolloutBatch {
            num_envs,
            steps,
            obs_width,
            act_width,
            obs: vec![0.0; n * obs_width],
            actions: vec![0.0; n * act_width],
            log_probs: vec![0.0; n],
            values: vec![0.0; n],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            tracking: vec![false; n],
            bootstrap: vec![0.0; num_envs],
        }
    }

    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reverse-scan GAE over one env's sequence. A done at step `s` cuts both
/// the bootstrap and the advantage carry from `s + 1`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for s in (0..n).rev() {
        let next_value = if s + 1 < n { values[s + 1] } else { bootstrap };
        let live = if dones[s] { 0.0 } else { 1.0 };
        let delta = rewards[s] + gamma * next_value * live - values[s];
        carry = delta + gamma * lam * live * carry;
        adv[s] = carry;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// GAE for every env of a batch, in the batch's env-major order.
pub fn batch_gae(batch: &RolloutBatch, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(batch.len());
    let mut ret = Vec::with_capacity(batch.len());
    for e in 0..batch.num_envs {
        let r = e * batch.steps..(e + 1) * batch.steps;
        let (a, b) = compute_gae(
            &batch.rewards[r.clone()],
            &batch.values[r.clone()],
            &batch.dones[r],
            batch.bootstrap[e],
            gamma,
            lam,
        );
        adv.extend(a);
        ret.extend(b);
    }
    (adv, ret)
}

/// Shifts and scales to mean 0 and std 1 (population std, guarded by 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Clipped surrogate for one sample, with the gradient factor with respect
/// to the ratio. Ties between the branches resolve to the clipped one.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let clipped_ratio = ratio.clamp(1.0 - clip, 1.0 + clip);
    let unclipped = ratio * adv;
    let clipped = clipped_ratio * adv;
    if unclipped < clipped {
        (unclipped, adv)
    } else {
        let inside = ratio > 1.0 - clip && ratio < 1.0 + clip;
        (clipped, if inside { adv } else { 0.0 })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Default)]
struct ChunkResult {
    grads: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    kl: f64,
    clipped: usize,
}

struct MinibatchView<'a> {
    batch: &'a RolloutBatch,
    adv: &'a [f64],
    ret: &'a [f64],
}

fn chunk_gradient(
    policy: &ActorCritic,
    view: &MinibatchView<'_>,
    idx: &[usize],
    scale: f64,
    config: &PpoConfig,
) -> Result<ChunkResult> {
    let b = view.batch;
    let (ow, aw) = (b.obs_width, b.act_width);
    let n = idx.len();
    let mut obs = Vec::with_capacity(n * ow);
    for &i in idx {
        obs.extend_from_slice(&b.obs[i * ow..(i + 1) * ow]);
    }
    let params = &policy.params.data;
    let mut actor_cache = MlpCache::default();
    let mut critic_cache = MlpCache::default();
    let mean = policy.actor.forward(params, &obs, n, &mut actor_cache)?.to_vec();
    let value = policy.critic.forward(params, &obs, n, &mut critic_cache)?.to_vec();
    let raw_ls = &params[policy.log_std..policy.log_std + aw];
    let log_std: Vec<f64> = raw_ls.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
    let inv_std: Vec<f64> = log_std.iter().map(|l| (-l).exp()).collect();

    let mut out = ChunkResult {
        grads: vec![0.0; params.len()],
        ..Default::default()
    };
    let mut d_mean = vec![0.0; n * aw];
    let mut d_value = vec![0.0; n];
    let mut d_ls = vec![0.0; aw];
    for (r, &i) in idx.iter().enumerate() {
        let act = &b.actions[i * aw..(i + 1) * aw];
        let mu = &mean[r * aw..(r + 1) * aw];
        let logp = gaussian_log_prob(mu, &log_std, act);
        let log_ratio = logp - b.log_probs[i];
        let ratio = log_ratio.exp();
        let a = view.adv[i];
        let (surr, dsurr_dratio) = clipped_surrogate(ratio, a, config.clip);
        out.policy_loss -= surr;
        out.kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > config.clip {
            out.clipped += 1;
        }
        // d(-surr)/dlogp
        let g = -dsurr_dratio * ratio * scale;
        if g != 0.0 {
            for j in 0..aw {
                let z = (act[j] - mu[j]) * inv_std[j];
                d_mean[r * aw + j] = g * z * inv_std[j];
                d_ls[j] += g * (z * z - 1.0);
            }
        }
        let err = value[r] - view.ret[i];
        out.value_loss += err * err;
        d_value[r] = config.value_coef * 2.0 * err * scale;
    }
    policy
        .actor
        .backward(params, &actor_cache, &d_mean, &mut out.grads, false);
    policy
        .critic
        .backward(params, &critic_cache, &d_value, &mut out.grads, false);
    for j in 0..aw {
        if raw_ls[j] > LOG_STD_MIN && raw_ls[j] < LOG_STD_MAX {
            out.grads[policy.log_std + j] += d_ls[j];
        }
    }
    Ok(out)
}

/// Epochs of shuffled-minibatch clipped-surrogate updates. `adv` must
/// already be normalized.
pub fn ppo_update(
    policy: &mut ActorCritic,
    opt: &mut AdamWState,
    batch: &RolloutBatch,
    adv: &[f64],
    ret: &[f64],
    config: &PpoConfig,
    rng: &mut RngStream,
) -> Result<UpdateStats> {
    let total = batch.len();
    if adv.len() != total || ret.len() != total || batch.obs.len() != total * batch.obs_width {
        return Err(Error::Contract("rollout batch arrays disagree in length".into()));
    }
    if batch.obs_width != policy.obs_width() || batch.act_width != policy.act_width() {
        return Err(Error::Config("rollout widths do not match the policy".into()));
    }
    let mut stats = UpdateStats::default();
    let mut samples = 0usize;
    let mut updates = 0usize;
    let aw = batch.act_width;
    let mut order: Vec<usize> = (0..total).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mb_size = total / config.minibatches;
        for mb in 0..config.minibatches {
            let end = if mb + 1 == config.minibatches { total } else { (mb + 1) * mb_size };
            let idx = &order[mb * mb_size..end];
            let scale = 1.0 / idx.len() as f64;
            let view = MinibatchView { batch, adv, ret };
            let pol = &*policy;
            let parts: Vec<Result<ChunkResult>> = idx
                .par_chunks(GRAD_CHUNK)
                .map(|c| chunk_gradient(pol, &view, c, scale, config))
                .collect();
            let mut grads = vec![0.0; policy.params.len()];
            for part in parts {
                let part = part?;
                for (g, p) in grads.iter_mut().zip(&part.grads) {
                    *g += p;
                }
                stats.policy_loss += part.policy_loss;
                stats.value_loss += part.value_loss;
                stats.approx_kl += part.kl;
                stats.clip_fraction += part.clipped as f64;
            }
            let raw_ls = &policy.params.data[policy.log_std..policy.log_std + aw];
            for j in 0..aw {
                if raw_ls[j] > LOG_STD_MIN && raw_ls[j] < LOG_STD_MAX {
                    grads[policy.log_std + j] -= config.entropy_coef;
                }
            }
            stats.entropy += gaussian_entropy(&policy.log_std());
            if !(stats.policy_loss.is_finite() && stats.value_loss.is_finite()) {
                return Err(Error::Training("non-finite PPO loss".into()));
            }
            stats.grad_norm += clip_grad_norm(&mut grads, config.max_grad_norm);
            opt.step(&mut policy.params, &grads)?;
            samples += idx.len();
            updates += 1;
        }
    }
    let s = samples.max(1) as f64;
    let u = updates.max(1) as f64;
    stats.policy_loss /= s;
    stats.value_loss /= s;
    stats.approx_kl /= s;
    stats.clip_fraction /= s;
    stats.entropy /= u;
    stats.grad_norm /= u;
    Ok(stats)
}

/// Per-env bookkeeping of the running episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTracker {
    pub reward: [f64; 2],
    pub hits: usize,
}

impl EpisodeTracker {
    /// Counts the tracking-index checkpoint reached at this step, if any.
    pub fn observe(&mut self, env: &BimanualEnv, state: &EnvState) {
        let Some(ts) = state.t_since_tracking else { return };
        let f = env.weights.f;
        let i = if ts == 0 {
            0
        } else if (ts - 1) % f == 0 {
            (ts - 1) / f + 1
        } else {
            return;
        };
        let task = env.task(state);
        if i >= task.l_track() {
            return;
        }
        let eps = env.weights.eps_succ;
        let ok = Side::BOTH.iter().all(|&s| {
            state.objects[s.index()]
                .pose
                .position
                .distance(task.tracked_pose(s, i).position)
                <= eps
        });
        if ok {
            self.hits += 1;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct EpisodeWindow {
    episodes: usize,
    reward: [f64; 2],
    r1: f64,
    r2: f64,
}

/// Deterministic mean-action teacher for one task group.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherPolicy {
    pub variant: TeacherVariant,
    pub agents: Vec<ActorCritic>,
}

impl TeacherPolicy {
    /// Observation width of one side's view.
    pub fn side_obs_width(&self) -> usize {
        match self.variant {
            TeacherVariant::Ippo => self.agents[0].obs_width(),
            TeacherVariant::CentralizedPpo => self.agents[0].obs_width() / 2,
        }
    }

    pub fn check_env(&self, env: &BimanualEnv) -> Result<()> {
        if self.side_obs_width() != env.teacher_obs_width() {
            return Err(Error::Config(format!(
                "teacher expects {} observation values per side, environment provides {}",
                self.side_obs_width(),
                env.teacher_obs_width()
            )));
        }
        Ok(())
    }

    /// Mean actions for a batch of states.
    pub fn label(&self, env: &BimanualEnv, states: &[&EnvState]) -> Result<Vec<[[f64; ACTION_DIM]; 2]>> {
        self.check_env(env)?;
        let n = states.len();
        let mut out = vec![[[0.0; ACTION_DIM]; 2]; n];
        let mut cache = ActorCriticCache::default();
        match self.variant {
            TeacherVariant::Ippo => {
                for side in Side::BOTH {
                    let mut obs = Vec::with_capacity(n * env.teacher_obs_width());
                    for s in states {
                        env.teacher_obs(s, side, &mut obs);
                    }
                    let mean = self.agents[side.index()].act_mean(&obs, n, &mut cache)?;
                    for (k, row) in mean.chunks_exact(ACTION_DIM).enumerate() {
                        out[k][side.index()].copy_from_slice(row);
                    }
                }
            }
            TeacherVariant::CentralizedPpo => {
                let mut obs = Vec::with_capacity(n * 2 * env.teacher_obs_width());
                for s in states {
                    env.teacher_obs(s, Side::Left, &mut obs);
                    env.teacher_obs(s, Side::Right, &mut obs);
                }
                let mean = self.agents[0].act_mean(&obs, n, &mut cache)?;
                for (k, row) in mean.chunks_exact(2 * ACTION_DIM).enumerate() {
                    out[k][0].copy_from_slice(&row[..ACTION_DIM]);
                    out[k][1].copy_from_slice(&row[ACTION_DIM..]);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, iteration: u64, config_hash: &str, group_id: &str) -> Result<()> {
        self.save_kind(dir, &format!("teacher-{}", self.variant), iteration, config_hash, group_id)
    }

    /// Saves under an explicit checkpoint kind (`teacher-*` or `bc`).
    pub fn save_kind(&self, dir: &Path, kind: &str, iteration: u64, config_hash: &str, group_id: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (agent, name) in self.agents.iter().zip(self.variant.agent_names()) {
            let ck = agent.to_checkpoint(
                kind,
                iteration,
                None,
                config_hash,
                Vec::new(),
                serde_json::json!({ "group_id": group_id, "agent": name }),
            )?;
            ck.save(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    /// Loads whichever variant the directory holds. Returns the policy and
    /// the config hash recorded in its checkpoints.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let (policy, hash, _) = Self::load_kind(dir)?;
        Ok((policy, hash))
    }

    /// Like [`TeacherPolicy::load`], also returning the checkpoint kind.
    pub fn load_kind(dir: &Path) -> Result<(Self, String, String)> {
        let variant = if dir.join("joint.ckpt").exists() {
            TeacherVariant::CentralizedPpo
        } else {
            TeacherVariant::Ippo
        };
        let mut agents = Vec::new();
        let mut hash: Option<String> = None;
        let mut kind = String::new();
        for name in variant.agent_names() {
            let ck = Checkpoint::load(&dir.join(format!("{name}.ckpt")))?;
            if !(ck.header.kind.starts_with("teacher-") || ck.header.kind == "bc") {
                return Err(Error::Integrity(format!(
                    "{} holds a `{}` checkpoint, not a teacher",
                    dir.display(),
                    ck.header.kind
                )));
            }
            if let Some(h) = &hash {
                if *h != ck.header.config_hash {
                    return Err(Error::Integrity("teacher checkpoints disagree on config hash".into()));
                }
            }
            hash = Some(ck.header.config_hash.clone());
            kind = ck.header.kind.clone();
            agents.push(ActorCritic::from_checkpoint(&ck)?);
        }
        Ok((TeacherPolicy { variant, agents }, hash.unwrap_or_default(), kind))
    }
}

impl BatchPolicy for TeacherPolicy {
    fn actions(
        &mut self,
        env: &BimanualEnv,
        states: &[&EnvState],
        _rng: &mut RngStream,
    ) -> Result<Vec<[[f64; ACTION_DIM]; 2]>> {
        self.label(env, states)
    }
}

/// One line of the teacher training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLogLine {
    pub iteration: u64,
    pub mean_reward: Vec<f64>,
    pub episodes: usize,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub eval_r1: Option<f64>,
    pub eval_r2: Option<f64>,
    pub losses: Vec<UpdateStats>,
    pub kl: f64,
    pub clip_fraction: f64,
    pub learning_rate: Vec<f64>,
    pub wall_time: f64,
}

/// Serializable runner state beyond network and optimizer arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunnerState {
    envs: Vec<EnvState>,
    trackers: Vec<EpisodeTracker>,
    window: EpisodeWindow,
    adam_steps: Vec<u64>,
    learning_rates: Vec<f64>,
}

pub struct TeacherTrainer {
    pub config: PpoConfig,
    pub variant: TeacherVariant,
    pub env: BimanualEnv,
    pub agents: Vec<ActorCritic>,
    pub optims: Vec<AdamWState>,
    pub iteration: u64,
    envs: Vec<EnvState>,
    trackers: Vec<EpisodeTracker>,
    window: EpisodeWindow,
    rng: RngStream,
    group_id: String,
    config_hash: String,
}

impl TeacherTrainer {
    pub fn new(
        env: BimanualEnv,
        variant: TeacherVariant,
        config: PpoConfig,
        seed: u64,
        group_id: &str,
        config_hash: &str,
    ) -> Result<Self> {
        config.validate()?;
        let mut init = RngStream::new(seed, 1);
        let w = env.teacher_obs_width();
        let specs = match variant {
            TeacherVariant::Ippo => vec![(w, ACTION_DIM); 2],
            TeacherVariant::CentralizedPpo => vec![(2 * w, 2 * ACTION_DIM)],
        };
        let mut agents = Vec::new();
        for (obs_width, act_width) in specs {
            agents.push(ActorCritic::new(
                ActorCriticSpec {
                    obs_width,
                    act_width,
                    hidden: config.hidden.clone(),
                    log_std_init: config.log_std_init,
                },
                &mut init,
            )?);
        }
        let optims = agents
            .iter()
            .map(|a| AdamWState::new(config.adamw(), a.params.len()))
            .collect();
        let mut rng = RngStream::new(seed, 2);
        let envs = (0..config.num_envs)
            .map(|_| env.reset(rng.below(env.tasks.len())))
            .collect();
        Ok(TeacherTrainer {
            trackers: vec![EpisodeTracker::default(); config.num_envs],
            window: EpisodeWindow::default(),
            config,
            variant,
            env,
            agents,
            optims,
            iteration: 0,
            envs,
            rng,
            group_id: group_id.into(),
            config_hash: config_hash.into(),
        })
    }

    pub fn policy(&self) -> TeacherPolicy {
        TeacherPolicy {
            variant: self.variant,
            agents: self.agents.clone(),
        }
    }

    fn agent_obs(&self, agent: usize, state: &EnvState, out: &mut Vec<f64>) {
        match self.variant {
            TeacherVariant::Ippo => self.env.teacher_obs(state, Side::BOTH[agent], out),
            TeacherVariant::CentralizedPpo => {
                self.env.teacher_obs(state, Side::Left, out);
                self.env.teacher_obs(state, Side::Right, out);
            }
        }
    }

    fn gather_obs(&self, agent: usize) -> Result<Vec<f64>> {
        let width = self.agents[agent].obs_width();
        let mut obs = Vec::with_capacity(self.envs.len() * width);
        for (e, s) in self.envs.iter().enumerate() {
            let mark = obs.len();
            self.agent_obs(agent, s, &mut obs);
            if obs[mark..].iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite observation in env {e}")));
            }
        }
        Ok(obs)
    }

    /// Steps every env `rollout_steps` times with sampled actions.
    pub fn collect_rollouts(&mut self) -> Result<Vec<RolloutBatch>> {
        let n_env = self.envs.len();
        let steps = self.config.rollout_steps;
        let mut batches: Vec<RolloutBatch> = self
            .agents
            .iter()
            .map(|a| RolloutBatch::new(n_env, steps, a.obs_width(), a.act_width()))
            .collect();
        let mut cache = ActorCriticCache::default();
        for s in 0..steps {
            let mut joint = vec![[[0.0; ACTION_DIM]; 2]; n_env];
            for k in 0..self.agents.len() {
                let raw = self.gather_obs(k)?;
                let agent = &mut self.agents[k];
                agent.norm.update(&raw, n_env);
                let (mean, value) = agent.forward(&raw, n_env, &mut cache)?;
                let log_std = agent.log_std();
                let (ow, aw) = (agent.obs_width(), agent.act_width());
                let b = &mut batches[k];
                let mut act = vec![0.0; aw];
                for e in 0..n_env {
                    let row = e * steps + s;
                    b.obs[row * ow..(row + 1) * ow].copy_from_slice(&cache.obs[e * ow..(e + 1) * ow]);
                    let mu = &mean[e * aw..(e + 1) * aw];
                    for j in 0..aw {
                        act[j] = mu[j] + log_std[j].exp() * self.rng.normal();
                    }
                    b.log_probs[row] = gaussian_log_prob(mu, &log_std, &act);
                    b.values[row] = value[e];
                    b.actions[row * aw..(row + 1) * aw].copy_from_slice(&act);
                    match self.variant {
                        TeacherVariant::Ippo => joint[e][k].copy_from_slice(&act),
                        TeacherVariant::CentralizedPpo => {
                            joint[e][0].copy_from_slice(&act[..ACTION_DIM]);
                            joint[e][1].copy_from_slice(&act[ACTION_DIM..]);
                        }
                    }
                }
            }
            let env = &self.env;
            let infos: Vec<Result<_>> = self
                .envs
                .par_iter_mut()
                .zip(self.trackers.par_iter_mut())
                .zip(joint.par_iter())
                .map(|((state, tr), a)| {
                    let info = env.step(state, &a[0], &a[1])?;
                    tr.observe(env, state);
                    for i in 0..2 {
                        tr.reward[i] += info.rewards[i].total;
                    }
                    Ok(info)
                })
                .collect();
            for e in 0..n_env {
                let info = infos[e].as_ref().map_err(|err| Error::Training(err.to_string()))?;
                let row = e * steps + s;
                let state = &self.envs[e];
                for (k, b) in batches.iter_mut().enumerate() {
                    b.rewards[row] = match self.variant {
                        TeacherVariant::Ippo => info.rewards[k].total,
                        TeacherVariant::CentralizedPpo => info.rewards[0].total + info.rewards[1].total,
                    };
                    b.dones[row] = info.done;
                    b.tracking[row] = info.stage == Stage::Tracking;
                }
                if !b_finite(&batches, row) {
                    return Err(Error::Training(format!("non-finite reward in env {e}")));
                }
                if state.done {
                    let tr = std::mem::take(&mut self.trackers[e]);
                    let w = &mut self.window;
                    w.episodes += 1;
                    w.reward[0] += tr.reward[0];
                    w.reward[1] += tr.reward[1];
                    if state.stage == Stage::Tracking {
                        w.r1 += 1.0;
                    }
                    w.r2 += tr.hits as f64 / self.env.task(state).l_track() as f64;
                    let task = self.rng.below(self.env.tasks.len());
                    self.envs[e] = self.env.reset(task);
                }
            }
        }
        for k in 0..self.agents.len() {
            let raw = self.gather_obs(k)?;
            let (_, value) = self.agents[k].forward(&raw, n_env, &mut cache)?;
            batches[k].bootstrap = value;
        }
        Ok(batches)
    }

    /// One collect-and-update iteration.
    pub fn iterate(&mut self) -> Result<(Vec<UpdateStats>, Vec<f64>)> {
        let batches = self.collect_rollouts()?;
        let mut stats = Vec::new();
        let mut mean_reward = Vec::new();
        for (k, b) in batches.iter().enumerate() {
            let (mut adv, ret) = batch_gae(b, self.config.gamma, self.config.gae_lambda);
            normalize_advantages(&mut adv);
            let s = ppo_update(
                &mut self.agents[k],
                &mut self.optims[k],
                b,
                &adv,
                &ret,
                &self.config,
                &mut self.rng,
            )?;
            let o = &mut self.optims[k];
            o.config.learning_rate = self.config.adapt_learning_rate(o.config.learning_rate, s.approx_kl);
            stats.push(s);
            mean_reward.push(b.rewards.iter().sum::<f64>() / b.len() as f64);
        }
        self.iteration += 1;
        Ok((stats, mean_reward))
    }

    /// Runs until `total_iterations`, writing checkpoints and the log into
    /// `out`. A previous state in `out` is resumed when present.
    pub fn train(&mut self, out: &Path, eval: Option<&EvalConfig>) -> Result<()> {
        fs::create_dir_all(out)?;
        let log_path = out.join("train_log.jsonl");
        let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
        let start = Instant::now();
        while self.iteration < self.config.total_iterations {
            let (losses, mean_reward) = self.iterate()?;
            let w = std::mem::take(&mut self.window);
            let per = |v: f64| (w.episodes > 0).then(|| v / w.episodes as f64);
            let (mut eval_r1, mut eval_r2) = (None, None);
            let interval = self.config.eval_interval;
            if let Some(cfg) = eval {
                if interval > 0 && self.iteration % interval == 0 {
                    let mut p = self.policy();
                    let (r1, r2) = evaluate_group(&self.env, &mut p, cfg, self.iteration)?;
                    eval_r1 = Some(r1);
                    eval_r2 = Some(r2);
                }
            }
            let line = TeacherLogLine {
                iteration: self.iteration,
                mean_reward,
                episodes: w.episodes,
                r1: per(w.r1),
                r2: per(w.r2),
                eval_r1,
                eval_r2,
                kl: losses.iter().map(|s| s.approx_kl).sum::<f64>() / losses.len() as f64,
                clip_fraction: losses.iter().map(|s| s.clip_fraction).sum::<f64>() / losses.len() as f64,
                losses,
                learning_rate: self.optims.iter().map(|o| o.config.learning_rate).collect(),
                wall_time: start.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut log, &line)?;
            log.write_all(b"\n")?;
            let ci = self.config.checkpoint_interval;
            if ci > 0 && self.iteration % ci == 0 && self.iteration < self.config.total_iterations {
                self.save(out)?;
            }
        }
        self.save(out)
    }

    /// Writes the policy checkpoints plus `trainer.ckpt` with everything
    /// needed to resume bit-identically.
    pub fn save(&self, out: &Path) -> Result<()> {
        self.policy().save(out, self.iteration, &self.config_hash, &self.group_id)?;
        let runner = RunnerState {
            envs: self.envs.clone(),
            trackers: self.trackers.clone(),
            window: self.window.clone(),
            adam_steps: self.optims.iter().map(|o| o.step).collect(),
            learning_rates: self.optims.iter().map(|o| o.config.learning_rate).collect(),
        };
        let mut arrays = Vec::new();
        for (k, o) in self.optims.iter().enumerate() {
            arrays.push((format!("adam_m_{k}"), o.m.clone()));
            arrays.push((format!("adam_v_{k}"), o.v.clone()));
        }
        let ck = Checkpoint {
            header: CheckpointHeader {
                kind: format!("trainer-{}", self.variant),
                layout: Vec::new(),
                spec: serde_json::to_value(&self.config)?,
                precision: self.agents[0].params.precision,
                rng_state: Some(self.rng.state()),
                iteration: self.iteration,
                config_hash: self.config_hash.clone(),
                extra: serde_json::json!({
                    "group_id": self.group_id,
                    "runner": serde_json::to_value(&runner)?,
                }),
                arrays: arrays
                    .iter()
                    .map(|(n, a)| crate::nn::checkpoint::ArrayEntry { name: n.clone(), len: a.len() })
                    .collect(),
            },
            arrays: arrays.into_iter().map(|(_, a)| a).collect(),
        };
        ck.save(&out.join("trainer.ckpt"))
    }

    /// Restores a trainer saved by [`save`](Self::save) over a freshly
    /// built one with the same environment and config.
    pub fn resume(&mut self, out: &Path) -> Result<()> {
        let ck = Checkpoint::load(&out.join("trainer.ckpt"))?;
        if ck.header.config_hash != self.config_hash {
            return Err(Error::Integrity(format!(
                "trainer state in {} was written under config {}, current config is {}",
                out.display(),
                ck.header.config_hash,
                self.config_hash
            )));
        }
        if ck.header.kind != format!("trainer-{}", self.variant) {
            return Err(Error::Integrity(format!("trainer state is `{}`", ck.header.kind)));
        }
        let (policy, _) = TeacherPolicy::load(out)?;
        let runner: RunnerState = serde_json::from_value(
            ck.header
                .extra
                .get("runner")
                .cloned()
                .ok_or_else(|| Error::Integrity("trainer state lacks runner section".into()))?,
        )?;
        if runner.envs.len() != self.envs.len()
            || policy.agents.len() != self.agents.len()
            || runner.learning_rates.len() != self.optims.len()
            || runner.adam_steps.len() != self.optims.len()
        {
            return Err(Error::Integrity("trainer state does not match the configuration".into()));
        }
        for (k, o) in self.optims.iter_mut().enumerate() {
            o.m = ck.require(&format!("adam_m_{k}"))?.to_vec();
            o.v = ck.require(&format!("adam_v_{k}"))?.to_vec();
            o.step = runner.adam_steps[k];
            o.config.learning_rate = runner.learning_rates[k];
            if o.m.len() != policy.agents[k].params.len() {
                return Err(Error::Integrity("optimizer moments do not match the network".into()));
            }
        }
        self.agents = policy.agents;
        self.envs = runner.envs;
        self.trackers = runner.trackers;
        self.window = runner.window;
        self.iteration = ck.header.iteration;
        self.rng = RngStream::from_state(
            ck.header
                .rng_state
                .as_ref()
                .ok_or_else(|| Error::Integrity("trainer state lacks RNG state".into()))?,
        )?;
        Ok(())
    }
}

fn b_finite(batches: &[RolloutBatch], row: usize) -> bool {
    batches.iter().all(|b| b.rewards[row].is_finite())
}
