//! DAgger distillation of state-based teachers into point-cloud students,
//! and the behavior-cloning baseline trained on replayed demos.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::{infer_closure, DemoTrajectory, FINGERTIPS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_group, BatchPolicy, EvalConfig};
use crate::math::{Pose, RngStream, UnitQuat};
use crate::nn::checkpoint::{ArrayEntry, Checkpoint, CheckpointHeader};
use crate::nn::params::clip_grad_norm;
use crate::nn::{
    ActorCritic, ActorCriticSpec, AdamWConfig, AdamWState, PointEncoderSpec,
    StudentCache, StudentPolicy, StudentSpec,
};
use crate::sim::{BimanualEnv, EnvState, Side, ACTION_DIM, PROPRIO_WIDTH, TEACHER_BASE_WIDTH};
use crate::teacher::{TeacherPolicy, TeacherVariant};

const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaggerConfig {
    pub points: usize,
    pub future_k: usize,
    pub expert_mix_p: f64,
    pub noise_std: f64,
    pub rollout_steps: usize,
    pub epochs: usize,
    /// Minibatches drawn from the buffer per epoch.
    pub minibatches: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub num_envs: usize,
    pub buffer_capacity: usize,
    /// Every n-th collected sample goes to the held-out set instead.
    pub holdout_every: usize,
    pub holdout_capacity: usize,
    pub total_iterations: u64,
    pub hidden: Vec<usize>,
    pub encoder: PointEncoderSpec,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            points: 512,
            future_k: 5,
            expert_mix_p: 0.05,
            noise_std: 0.003,
            rollout_steps: 8,
            epochs: 5,
            minibatches: 2,
            minibatch_size: 128,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            num_envs: 32,
            buffer_capacity: 200_000,
            holdout_every: 10,
            holdout_capacity: 512,
            total_iterations: 300,
            hidden: vec![128, 128, 64, 64],
            encoder: PointEncoderSpec::default(),
            checkpoint_interval: 100,
            eval_interval: 0,
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.expert_mix_p) {
            return Err(Error::Config(format!(
                "expert_mix_p must be in [0, 1], got {}",
                self.expert_mix_p
            )));
        }
        if self.points == 0 || self.points > 4096 {
            return Err(Error::Config(format!("points must be in 1..=4096, got {}", self.points)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        let counts = [
            self.rollout_steps,
            self.epochs,
            self.minibatches,
            self.minibatch_size,
            self.num_envs,
            self.buffer_capacity,
            self.holdout_every,
            self.holdout_capacity,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("DAgger counts and capacities must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be nonempty and >= 1".into()));
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn student_spec(&self) -> StudentSpec {
        StudentSpec {
            proprio_width: PROPRIO_WIDTH,
            future_k: self.future_k,
            points: self.points,
            act_width: ACTION_DIM,
            hidden: self.hidden.clone(),
            encoder: self.encoder.clone(),
        }
    }
}

/// Bounded queue that evicts its oldest entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FifoBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> FifoBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        FifoBuffer {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

/// One student observation and its expert label. The cloud is stored as the
/// object pose plus the seed that drew it, and is redrawn on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaggerSample {
    pub task: usize,
    pub pose: Pose,
    pub cloud_seed: u64,
    /// Proprioception followed by the future block.
    pub state: Vec<f64>,
    pub label: [f64; ACTION_DIM],
}

fn cloud_rng(seed: u64, side: Side) -> RngStream {
    RngStream::new(seed, 0x636c6f7564 + side.index() as u64)
}

/// Teacher mean action for one state and side.
pub fn label_with_expert(
    teacher: &TeacherPolicy,
    env: &BimanualEnv,
    state: &EnvState,
    side: Side,
) -> Result<[f64; ACTION_DIM]> {
    Ok(teacher.label(env, &[state])?[0][side.index()])
}

/// Left and right point-cloud students.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentPair {
    pub students: Vec<StudentPolicy>,
    pub noise_std: f64,
}

/// Per-side student inputs for a batch of states.
#[derive(Clone, Debug, Default)]
pub struct StudentInputs {
    pub state: Vec<f64>,
    pub cloud: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl StudentPair {
    pub fn new(config: &DaggerConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 3);
        let students = Side::BOTH
            .iter()
            .map(|_| StudentPolicy::new(config.student_spec(), &mut rng))
            .collect::<Result<_>>()?;
        Ok(StudentPair {
            students,
            noise_std: config.noise_std,
        })
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.students[0].spec
    }

    /// Assembles student inputs for each state; cloud draws use
    /// `seeds[k]`.
    pub fn observe(
        &self,
        env: &BimanualEnv,
        states: &[&EnvState],
        seeds: &[u64],
        side: Side,
    ) -> StudentInputs {
        let spec = self.spec();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = states
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(s, &seed)| {
                let mut proprio = Vec::with_capacity(spec.state_width());
                let mut cloud = Vec::with_capacity(spec.points * 3);
                let mut future = Vec::with_capacity(spec.future_width());
                env.student_obs(
                    s,
                    side,
                    spec.points,
                    spec.future_k,
                    self.noise_std,
                    &mut cloud_rng(seed, side),
                    &mut proprio,
                    &mut cloud,
                    &mut future,
                );
                proprio.extend(future);
                (proprio, cloud)
            })
            .collect();
        let mut out = StudentInputs::default();
        for ((state, cloud), s) in rows.into_iter().zip(states) {
            out.state.extend(state);
            out.cloud.extend(cloud);
            out.poses.push(s.objects[side.index()].pose);
        }
        out
    }

    pub fn act(&self, side: Side, inputs: &StudentInputs, batch: usize) -> Result<Vec<f64>> {
        let mut cache = StudentCache::default();
        Ok(self.students[side.index()]
            .forward(&inputs.state, &inputs.cloud, batch, &mut cache)?
            .to_vec())
    }

    pub fn save(&self, dir: &Path, iteration: u64, config_hash: &str, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (s, side) in self.students.iter().zip(Side::BOTH) {
            let mut extra = extra.clone();
            extra["noise_std"] = serde_json::json!(self.noise_std);
            let ck = s.to_checkpoint("student", iteration, None, config_hash, Vec::new(), extra)?;
            ck.save(&dir.join(format!("student_{}.ckpt", side.name())))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let mut students = Vec::new();
        let mut hash = String::new();
        let mut noise_std = 0.0;
        for side in Side::BOTH {
            let ck = Checkpoint::load(&dir.join(format!("student_{}.ckpt", side.name())))?;
            if ck.header.kind != "student" {
                return Err(Error::Integrity(format!("`{}` is not a student checkpoint", ck.header.kind)));
            }
            hash = ck.header.config_hash.clone();
            noise_std = ck.header.extra.get("noise_std").and_then(|v| v.as_f64()).unwrap_or(0.0);
            students.push(StudentPolicy::from_checkpoint(&ck)?);
        }
        Ok((StudentPair { students, noise_std }, hash))
    }
}

impl BatchPolicy for StudentPair {
    fn actions(
        &mut self,
        env: &BimanualEnv,
        states: &[&EnvState],
        rng: &mut RngStream,
    ) -> Result<Vec<[[f64; ACTION_DIM]; 2]>> {
        let n = states.len();
        let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64() >> 11).collect();
        let mut out = vec![[[0.0; ACTION_DIM]; 2]; n];
        for side in Side::BOTH {
            let inputs = self.observe(env, states, &seeds, side);
            let a = self.act(side, &inputs, n)?;
            for (k, row) in a.chunks_exact(ACTION_DIM).enumerate() {
                out[k][side.index()].copy_from_slice(row);
            }
        }
        Ok(out)
    }
}

/// Mean squared error of the student's actions on `samples`, with clouds
/// redrawn from their seeds.
pub fn student_mse(
    env: &BimanualEnv,
    student: &StudentPolicy,
    side: Side,
    noise_std: f64,
    samples: &[&DaggerSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let parts: Vec<Result<f64>> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let (state, cloud) = redraw(env, student, side, noise_std, chunk);
            let mut cache = StudentCache::default();
            let a = student.forward(&state, &cloud, chunk.len(), &mut cache)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    (0..ACTION_DIM)
                        .map(|j| (a[r * ACTION_DIM + j] - s.label[j]).powi(2))
                        .sum::<f64>()
                })
                .sum())
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / (samples.len() * ACTION_DIM) as f64)
}

fn redraw(
    env: &BimanualEnv,
    student: &StudentPolicy,
    side: Side,
    noise_std: f64,
    chunk: &[&DaggerSample],
) -> (Vec<f64>, Vec<f64>) {
    let p = student.spec.points;
    let mut state = Vec::with_capacity(chunk.len() * student.spec.state_width());
    let mut cloud = Vec::with_capacity(chunk.len() * p * 3);
    for s in chunk {
        state.extend_from_slice(&s.state);
        env.sample_cloud(s.task, side, &s.pose, p, noise_std, &mut cloud_rng(s.cloud_seed, side), &mut cloud);
    }
    (state, cloud)
}

/// One regression step on `samples`; returns the minibatch MSE.
fn regression_step(
    env: &BimanualEnv,
    student: &mut StudentPolicy,
    opt: &mut AdamWState,
    side: Side,
    noise_std: f64,
    samples: &[&DaggerSample],
    max_grad_norm: f64,
) -> Result<f64> {
    let scale = 1.0 / (samples.len() * ACTION_DIM) as f64;
    let pol = &*student;
    let parts: Vec<Result<(Vec<f64>, f64)>> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let (state, cloud) = redraw(env, pol, side, noise_std, chunk);
            let mut cache = StudentCache::default();
            let a = pol.forward(&state, &cloud, chunk.len(), &mut cache)?.to_vec();
            let mut dy = vec![0.0; a.len()];
            let mut loss = 0.0;
            for (r, s) in chunk.iter().enumerate() {
                for j in 0..ACTION_DIM {
                    let e = a[r * ACTION_DIM + j] - s.label[j];
                    loss += e * e;
                    dy[r * ACTION_DIM + j] = 2.0 * e * scale;
                }
            }
            let mut grads = vec![0.0; pol.params.len()];
            pol.backward(&cache, &dy, &mut grads);
            Ok((grads, loss))
        })
        .collect();
    let mut grads = vec![0.0; student.params.len()];
    let mut loss = 0.0;
    for p in parts {
        let (g, l) = p?;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
        loss += l;
    }
    if !loss.is_finite() {
        return Err(Error::Training("non-finite distillation loss".into()));
    }
    clip_grad_norm(&mut grads, max_grad_norm);
    opt.step(&mut student.params, &grads)?;
    Ok(loss * scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaggerLogLine {
    pub iteration: u64,
    pub mse: Vec<f64>,
    pub holdout_mse: Vec<f64>,
    pub expert_fraction: f64,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DaggerRunner {
    envs: Vec<EnvState>,
    collected: u64,
    expert_steps: u64,
    total_steps: u64,
    adam_steps: Vec<u64>,
}

pub struct DaggerTrainer {
    pub config: DaggerConfig,
    pub env: BimanualEnv,
    pub teachers: Vec<TeacherPolicy>,
    /// The environment as each teacher sees it (its own group's one-hot width).
    label_envs: Vec<BimanualEnv>,
    /// Teacher index for each task of the environment.
    pub teacher_of: Vec<usize>,
    pub students: StudentPair,
    pub optims: Vec<AdamWState>,
    pub iteration: u64,
    pub buffers: Vec<FifoBuffer<DaggerSample>>,
    pub holdout: Vec<FifoBuffer<DaggerSample>>,
    /// Extra fields recorded in the student checkpoints.
    pub meta: serde_json::Map<String, serde_json::Value>,
    envs: Vec<EnvState>,
    rng: RngStream,
    collected: u64,
    expert_steps: u64,
    total_steps: u64,
    config_hash: String,
}

impl DaggerTrainer {
    pub fn new(
        env: BimanualEnv,
        teachers: Vec<TeacherPolicy>,
        teacher_of: Vec<usize>,
        config: DaggerConfig,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        config.validate()?;
        if teacher_of.len() != env.tasks.len() {
            return Err(Error::Config(format!(
                "{} tasks but {} teacher assignments",
                env.tasks.len(),
                teacher_of.len()
            )));
        }
        let mut label_envs = Vec::new();
        for teacher in &teachers {
            let mut e = env.clone();
            e.group_size = teacher
                .side_obs_width()
                .checked_sub(TEACHER_BASE_WIDTH)
                .ok_or_else(|| Error::Config("teacher observation width is too small".into()))?;
            label_envs.push(e);
        }
        for (t, &k) in env.tasks.iter().zip(&teacher_of) {
            let e = label_envs
                .get(k)
                .ok_or_else(|| Error::Config(format!("no teacher for task `{}`", t.task_id)))?;
            if t.one_hot_id >= e.group_size {
                return Err(Error::Config(format!(
                    "task `{}` has one-hot id {} but its teacher knows {} tasks",
                    t.task_id, t.one_hot_id, e.group_size
                )));
            }
        }
        let students = StudentPair::new(&config, seed)?;
        let optims = students
            .students
            .iter()
            .map(|s| AdamWState::new(config.adamw(), s.params.len()))
            .collect();
        let mut rng = RngStream::new(seed, 4);
        let envs = (0..config.num_envs)
            .map(|_| env.reset(rng.below(env.tasks.len())))
            .collect();
        Ok(DaggerTrainer {
            buffers: (0..2).map(|_| FifoBuffer::new(config.buffer_capacity)).collect(),
            holdout: (0..2).map(|_| FifoBuffer::new(config.holdout_capacity)).collect(),
            config,
            env,
            teachers,
            label_envs,
            teacher_of,
            students,
            optims,
            iteration: 0,
            meta: serde_json::Map::new(),
            envs,
            rng,
            collected: 0,
            expert_steps: 0,
            total_steps: 0,
            config_hash: config_hash.into(),
        })
    }

    fn labels(&self) -> Result<Vec<[[f64; ACTION_DIM]; 2]>> {
        let mut out = vec![[[0.0; ACTION_DIM]; 2]; self.envs.len()];
        for (k, teacher) in self.teachers.iter().enumerate() {
            let idx: Vec<usize> = (0..self.envs.len())
                .filter(|&e| self.teacher_of[self.envs[e].task] == k)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let states: Vec<&EnvState> = idx.iter().map(|&e| &self.envs[e]).collect();
            for (e, l) in idx.iter().zip(teacher.label(&self.label_envs[k], &states)?) {
                out[*e] = l;
            }
        }
        Ok(out)
    }

    /// Steps every env `rollout_steps` times, recording labelled samples.
    /// Returns the fraction of steps that executed the expert action.
    pub fn collect(&mut self) -> Result<f64> {
        let n = self.envs.len();
        let (mut expert, mut total) = (0u64, 0u64);
        for _ in 0..self.config.rollout_steps {
            let seeds: Vec<u64> = (0..n).map(|_| self.rng.next_u64() >> 11).collect();
            let labels = self.labels()?;
            let mut executed = labels.clone();
            let mut inputs = Vec::new();
            {
                let states: Vec<&EnvState> = self.envs.iter().collect();
                for side in Side::BOTH {
                    let inp = self.students.observe(&self.env, &states, &seeds, side);
                    let a = self.students.act(side, &inp, n)?;
                    for e in 0..n {
                        executed[e][side.index()].copy_from_slice(&a[e * ACTION_DIM..(e + 1) * ACTION_DIM]);
                    }
                    inputs.push(inp);
                }
            }
            for e in 0..n {
                if self.rng.bernoulli(self.config.expert_mix_p) {
                    executed[e] = labels[e];
                    expert += 1;
                }
                total += 1;
            }
            for side in Side::BOTH {
                let inp = &inputs[side.index()];
                let sw = self.students.spec().state_width();
                self.students.students[side.index()].norm.update(&inp.state, n);
                for e in 0..n {
                    let sample = DaggerSample {
                        task: self.envs[e].task,
                        pose: inp.poses[e],
                        cloud_seed: seeds[e],
                        state: inp.state[e * sw..(e + 1) * sw].to_vec(),
                        label: labels[e][side.index()],
                    };
                    let slot = self.collected + e as u64;
                    if slot % self.config.holdout_every as u64 == self.config.holdout_every as u64 - 1 {
                        self.holdout[side.index()].push(sample);
                    } else {
                        self.buffers[side.index()].push(sample);
                    }
                }
            }
            self.collected += n as u64;
            let env = &self.env;
            let results: Vec<Result<_>> = self
                .envs
                .par_iter_mut()
                .zip(executed.par_iter())
                .map(|(s, a)| env.step(s, &a[0], &a[1]))
                .collect();
            for r in results {
                r?;
            }
            for e in 0..n {
                if self.envs[e].done {
                    let task = self.rng.below(self.env.tasks.len());
                    self.envs[e] = self.env.reset(task);
                }
            }
        }
        self.expert_steps += expert;
        self.total_steps += total;
        Ok(expert as f64 / total.max(1) as f64)
    }

    /// Regression epochs on both buffers; returns the mean minibatch MSE
    /// per side.
    pub fn fit(&mut self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for side in Side::BOTH {
            let i = side.index();
            let mut sum = 0.0;
            let mut count = 0;
            for _ in 0..self.config.epochs {
                for _ in 0..self.config.minibatches {
                    let len = self.buffers[i].len();
                    if len == 0 {
                        continue;
                    }
                    let take = self.config.minibatch_size.min(len);
                    let idx = self.rng.sample_indices(len, take);
                    let buf = &self.buffers[i];
                    let batch: Vec<&DaggerSample> = idx.iter().map(|&k| buf.get(k)).collect();
                    sum += regression_step(
                        &self.env,
                        &mut self.students.students[i],
                        &mut self.optims[i],
                        side,
                        self.students.noise_std,
                        &batch,
                        self.config.max_grad_norm,
                    )?;
                    count += 1;
                }
            }
            out.push(if count > 0 { sum / count as f64 } else { 0.0 });
        }
        Ok(out)
    }

    pub fn holdout_mse(&self) -> Result<Vec<f64>> {
        Side::BOTH
            .iter()
            .map(|&side| {
                let i = side.index();
                let samples: Vec<&DaggerSample> = self.holdout[i].iter().collect();
                student_mse(&self.env, &self.students.students[i], side, self.students.noise_std, &samples)
            })
            .collect()
    }

    /// Fraction of all collected steps that executed the expert action.
    pub fn expert_fraction(&self) -> f64 {
        self.expert_steps as f64 / self.total_steps.max(1) as f64
    }

    pub fn train(&mut self, out: &Path, eval: Option<&EvalConfig>) -> Result<()> {
        fs::create_dir_all(out)?;
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("distill_log.jsonl"))?;
        let start = Instant::now();
        while self.iteration < self.config.total_iterations {
            let frac = self.collect()?;
            let mse = self.fit()?;
            self.iteration += 1;
            let (mut r1, mut r2) = (None, None);
            let ei = self.config.eval_interval;
            if let Some(cfg) = eval {
                if ei > 0 && self.iteration % ei == 0 {
                    let mut s = self.students.clone();
                    let (a, b) = evaluate_group(&self.env, &mut s, cfg, self.iteration)?;
                    r1 = Some(a);
                    r2 = Some(b);
                }
            }
            let line = DaggerLogLine {
                iteration: self.iteration,
                mse,
                holdout_mse: self.holdout_mse()?,
                expert_fraction: frac,
                r1,
                r2,
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

    fn buffer_arrays(name: &str, buf: &FifoBuffer<DaggerSample>) -> Vec<(String, Vec<f64>)> {
        let mut state = Vec::new();
        let mut label = Vec::new();
        let mut meta = Vec::new();
        for s in buf.iter() {
            state.extend_from_slice(&s.state);
            label.extend_from_slice(&s.label);
            meta.push(s.task as f64);
            meta.push(s.cloud_seed as f64);
            meta.extend(s.pose.to_array());
        }
        vec![
            (format!("{name}_state"), state),
            (format!("{name}_label"), label),
            (format!("{name}_meta"), meta),
        ]
    }

    fn restore_buffer(
        ck: &Checkpoint,
        name: &str,
        capacity: usize,
        state_width: usize,
    ) -> Result<FifoBuffer<DaggerSample>> {
        let state = ck.require(&format!("{name}_state"))?;
        let label = ck.require(&format!("{name}_label"))?;
        let meta = ck.require(&format!("{name}_meta"))?;
        let n = meta.len() / 9;
        if meta.len() != n * 9 || label.len() != n * ACTION_DIM || state.len() != n * state_width {
            return Err(Error::Integrity(format!("buffer `{name}` arrays disagree in length")));
        }
        let mut buf = FifoBuffer::new(capacity);
        for k in 0..n {
            let m = &meta[k * 9..(k + 1) * 9];
            let mut l = [0.0; ACTION_DIM];
            l.copy_from_slice(&label[k * ACTION_DIM..(k + 1) * ACTION_DIM]);
            buf.push(DaggerSample {
                task: m[0] as usize,
                cloud_seed: m[1] as u64,
                pose: Pose::from_array(&m[2..9])?,
                state: state[k * state_width..(k + 1) * state_width].to_vec(),
                label: l,
            });
        }
        Ok(buf)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let mut extra = self.meta.clone();
        extra.insert("future_k".into(), self.config.future_k.into());
        self.students.save(out, self.iteration, &self.config_hash, extra.into())?;
        let runner = DaggerRunner {
            envs: self.envs.clone(),
            collected: self.collected,
            expert_steps: self.expert_steps,
            total_steps: self.total_steps,
            adam_steps: self.optims.iter().map(|o| o.step).collect(),
        };
        let mut arrays = Vec::new();
        for side in Side::BOTH {
            let i = side.index();
            arrays.push((format!("adam_m_{i}"), self.optims[i].m.clone()));
            arrays.push((format!("adam_v_{i}"), self.optims[i].v.clone()));
            arrays.extend(Self::buffer_arrays(&format!("buffer_{i}"), &self.buffers[i]));
            arrays.extend(Self::buffer_arrays(&format!("holdout_{i}"), &self.holdout[i]));
        }
        let ck = Checkpoint {
            header: CheckpointHeader {
                kind: "distill-state".into(),
                layout: Vec::new(),
                spec: serde_json::to_value(&self.config)?,
                precision: self.students.students[0].params.precision,
                rng_state: Some(self.rng.state()),
                iteration: self.iteration,
                config_hash: self.config_hash.clone(),
                extra: serde_json::json!({ "runner": serde_json::to_value(&runner)? }),
                arrays: arrays
                    .iter()
                    .map(|(n, a)| ArrayEntry { name: n.clone(), len: a.len() })
                    .collect(),
            },
            arrays: arrays.into_iter().map(|(_, a)| a).collect(),
        };
        ck.save(&out.join("distill_state.ckpt"))
    }

    pub fn resume(&mut self, out: &Path) -> Result<()> {
        let ck = Checkpoint::load(&out.join("distill_state.ckpt"))?;
        if ck.header.config_hash != self.config_hash || ck.header.kind != "distill-state" {
            return Err(Error::Integrity(format!(
                "distillation state in {} does not match the current config",
                out.display()
            )));
        }
        let (students, _) = StudentPair::load(out)?;
        let runner: DaggerRunner = serde_json::from_value(
            ck.header
                .extra
                .get("runner")
                .cloned()
                .ok_or_else(|| Error::Integrity("distillation state lacks runner section".into()))?,
        )?;
        if runner.envs.len() != self.envs.len() {
            return Err(Error::Integrity("distillation state env count differs".into()));
        }
        let sw = self.students.spec().state_width();
        for i in 0..2 {
            self.optims[i].m = ck.require(&format!("adam_m_{i}"))?.to_vec();
            self.optims[i].v = ck.require(&format!("adam_v_{i}"))?.to_vec();
            self.optims[i].step = runner.adam_steps[i];
            self.buffers[i] = Self::restore_buffer(&ck, &format!("buffer_{i}"), self.config.buffer_capacity, sw)?;
            self.holdout[i] = Self::restore_buffer(&ck, &format!("holdout_{i}"), self.config.holdout_capacity, sw)?;
        }
        self.students = students;
        self.envs = runner.envs;
        self.collected = runner.collected;
        self.expert_steps = runner.expert_steps;
        self.total_steps = runner.total_steps;
        self.iteration = ck.header.iteration;
        self.rng = RngStream::from_state(
            ck.header
                .rng_state
                .as_ref()
                .ok_or_else(|| Error::Integrity("distillation state lacks RNG state".into()))?,
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    /// Steps recorded after the demo ends, holding the final pose.
    pub hold_steps: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 200,
            minibatch_size: 128,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            hidden: vec![128, 128, 64, 64],
            hold_steps: 20,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::Config("BC epochs and minibatch_size must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be nonempty and >= 1".into()));
        }
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
        .validate()
    }
}

/// Static (teacher-format observation, action) pairs per side.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BcDataset {
    pub obs_width: usize,
    pub obs: [Vec<f64>; 2],
    pub actions: [Vec<f64>; 2],
}

impl BcDataset {
    pub fn len(&self) -> usize {
        self.actions[0].len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn servo(env: &BimanualEnv, state: &EnvState, side: Side, target: &Pose, closure: f64) -> [f64; ACTION_DIM] {
    let hand = &state.hands[side.index()];
    let mut a = crate::sim::ScriptedController::pose_action(env, &hand.wrist, target, true);
    for k in 0..FINGERTIPS {
        a[6 + k] = ((closure - hand.closure[k]) / env.sim.max_closure).clamp(-1.0, 1.0);
    }
    a
}

fn interpolate(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    let dq = b.orientation.mul(a.orientation.conjugate()).to_rotation_vector();
    Pose::new(
        a.position + (b.position - a.position) * alpha,
        UnitQuat::from_rotation_vector(dq * alpha).mul(a.orientation),
    )
}

/// Replays each demo in the simulator: demo wrists are moved into the
/// task's placement (per paired object), the hands servo from home to the
/// first demo pose, then follow the demo at `f` sim steps per demo step
/// with closure inferred from the fingertips. Records the teacher-format
/// observation and the executed action at every step.
pub fn build_bc_dataset(env: &BimanualEnv, demos: &[DemoTrajectory], hold_steps: usize) -> Result<BcDataset> {
    if demos.len() != env.tasks.len() {
        return Err(Error::Config(format!(
            "{} demos for {} tasks",
            demos.len(),
            env.tasks.len()
        )));
    }
    let f = env.weights.f;
    let mut data = BcDataset {
        obs_width: env.teacher_obs_width(),
        ..Default::default()
    };
    for (task, demo) in demos.iter().enumerate() {
        if demo.steps.is_empty() {
            continue;
        }
        let spec = &env.tasks[task];
        let retarget = [
            spec.initial_object_pose.compose(&demo.steps[0].object_pose.inverse()),
            spec.initial_tool_pose.compose(&demo.steps[0].tool_pose.inverse()),
        ];
        let targets: Vec<[(Pose, f64); 2]> = demo
            .steps
            .iter()
            .map(|s| {
                [
                    (retarget[0].compose(&s.left_wrist), infer_closure(&s.left_wrist, &s.left_fingertips)),
                    (retarget[1].compose(&s.right_wrist), infer_closure(&s.right_wrist, &s.right_fingertips)),
                ]
            })
            .collect();
        let mut plan: Vec<[(Pose, f64); 2]> = Vec::new();
        // approach with open hands
        let home = env.reset(task);
        let mut cur = [home.hands[0].wrist, home.hands[1].wrist];
        loop {
            let mut done = true;
            let mut step = [(Pose::IDENTITY, 0.0); 2];
            for i in 0..2 {
                let goal = targets[0][i].0;
                let d = goal.position - cur[i].position;
                let dist = d.norm();
                let lim = env.sim.max_translation;
                let next = if dist > lim {
                    done = false;
                    interpolate(&cur[i], &goal, lim / dist)
                } else {
                    goal
                };
                cur[i] = next;
                step[i] = (next, 0.0);
            }
            plan.push(step);
            if done || plan.len() > env.sim.episode_length {
                break;
            }
        }
        for d in 0..targets.len() - 1 {
            for k in 1..=f {
                let alpha = k as f64 / f as f64;
                plan.push([0, 1].map(|i| {
                    let (a, ca) = targets[d][i];
                    let (b, cb) = targets[d + 1][i];
                    (interpolate(&a, &b, alpha), ca + (cb - ca) * alpha)
                }));
            }
        }
        let last = *targets.last().expect("nonempty demo");
        plan.extend(std::iter::repeat_n(last, hold_steps));

        let mut state = env.reset(task);
        for target in plan {
            if state.done {
                break;
            }
            let acts = Side::BOTH.map(|s| servo(env, &state, s, &target[s.index()].0, target[s.index()].1));
            for side in Side::BOTH {
                env.teacher_obs(&state, side, &mut data.obs[side.index()]);
                data.actions[side.index()].extend(acts[side.index()]);
            }
            env.step(&mut state, &acts[0], &acts[1])?;
        }
    }
    Ok(data)
}

/// Supervised MSE regression of a tanh MLP per side on the dataset. Returns
/// the policy and the mean training MSE of each epoch.
pub fn bc_train(data: &BcDataset, config: &BcConfig, seed: u64) -> Result<(TeacherPolicy, Vec<f64>)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Config("BC dataset is empty".into()));
    }
    let mut rng = RngStream::new(seed, 5);
    let mut agents = Vec::new();
    let mut curve = vec![0.0; config.epochs];
    for side in Side::BOTH {
        let i = side.index();
        let mut net = ActorCritic::new(
            ActorCriticSpec {
                obs_width: data.obs_width,
                act_width: ACTION_DIM,
                hidden: config.hidden.clone(),
                log_std_init: -0.5,
            },
            &mut rng,
        )?;
        net.norm.update(&data.obs[i], n);
        let mut normed = Vec::new();
        net.norm.apply(&data.obs[i], &mut normed);
        let mut opt = AdamWState::new(
            AdamWConfig {
                learning_rate: config.learning_rate,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            net.params.len(),
        );
        let mut order: Vec<usize> = (0..n).collect();
        let w = data.obs_width;
        for epoch_loss in curve.iter_mut() {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for mb in order.chunks(config.minibatch_size) {
                let scale = 1.0 / (mb.len() * ACTION_DIM) as f64;
                let netr = &net;
                let parts: Vec<Result<(Vec<f64>, f64)>> = mb
                    .par_chunks(GRAD_CHUNK * 2)
                    .map(|chunk| {
                        let mut x = Vec::with_capacity(chunk.len() * w);
                        for &k in chunk {
                            x.extend_from_slice(&normed[k * w..(k + 1) * w]);
                        }
                        let mut cache = crate::nn::MlpCache::default();
                        let y = netr.actor.forward(&netr.params.data, &x, chunk.len(), &mut cache)?.to_vec();
                        let mut dy = vec![0.0; y.len()];
                        let mut loss = 0.0;
                        for (r, &k) in chunk.iter().enumerate() {
                            for j in 0..ACTION_DIM {
                                let e = y[r * ACTION_DIM + j] - data.actions[i][k * ACTION_DIM + j];
                                loss += e * e;
                                dy[r * ACTION_DIM + j] = 2.0 * e * scale;
                            }
                        }
                        let mut g = vec![0.0; netr.params.len()];
                        netr.actor.backward(&netr.params.data, &cache, &dy, &mut g, false);
                        Ok((g, loss))
                    })
                    .collect();
                let mut grads = vec![0.0; net.params.len()];
                for p in parts {
                    let (g, l) = p?;
                    for (a, b) in grads.iter_mut().zip(&g) {
                        *a += b;
                    }
                    total += l;
                }
                clip_grad_norm(&mut grads, config.max_grad_norm);
                opt.step(&mut net.params, &grads)?;
            }
            *epoch_loss += total / (n * ACTION_DIM) as f64 / 2.0;
        }
        agents.push(net);
    }
    Ok((
        TeacherPolicy {
            variant: TeacherVariant::Ippo,
            agents,
        },
        curve,
    ))
}

/// Mean actions of a BC or teacher policy for a single state, as used by
/// interactive tools.
pub fn mean_action(policy: &TeacherPolicy, env: &BimanualEnv, state: &EnvState) -> Result<[[f64; ACTION_DIM]; 2]> {
    Ok(policy.label(env, &[state])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{apply_z_offset, generate_synthetic_demo, SyntheticDemoSpec, Template};
    use crate::reward::RewardWeights;
    use crate::sim::SimConfig;
    use crate::task::{build_task, SceneConfig};
    use crate::teacher::{PpoConfig, TeacherTrainer};

    fn setup(len: usize) -> (BimanualEnv, Vec<DemoTrajectory>) {
        let scene = SceneConfig::default();
        let spec = SyntheticDemoSpec::new("d", Template::Pour, "kettle1", "bowl1");
        let d = generate_synthetic_demo(&spec, &mut RngStream::new(4, 0)).unwrap();
        let d = apply_z_offset(&d, scene.table_height, scene.clearance);
        let task = build_task(&d, &scene).unwrap();
        let sim = SimConfig { episode_length: len, ..SimConfig::default() };
        let env = BimanualEnv::new(vec![task], 1, scene, sim, RewardWeights::default()).unwrap();
        (env, vec![d])
    }

    fn small_config() -> DaggerConfig {
        DaggerConfig {
            points: 32,
            num_envs: 4,
            rollout_steps: 3,
            epochs: 2,
            minibatches: 1,
            minibatch_size: 8,
            hidden: vec![16],
            encoder: PointEncoderSpec { point_layers: [8, 8], post_layers: [16, 16] },
            total_iterations: 4,
            checkpoint_interval: 2,
            ..DaggerConfig::default()
        }
    }

    fn teacher(env: &BimanualEnv) -> TeacherPolicy {
        let cfg = PpoConfig { num_envs: 2, hidden: vec![8], ..PpoConfig::default() };
        TeacherTrainer::new(env.clone(), TeacherVariant::Ippo, cfg, 1, "g", "h")
            .unwrap()
            .policy()
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut b = FifoBuffer::new(3);
        for i in 0..5 {
            b.push(i);
            assert!(b.len() <= 3);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn labels_are_repeatable_and_bounded() {
        let (env, _) = setup(20);
        let t = teacher(&env);
        let s = env.reset(0);
        let a = label_with_expert(&t, &env, &s, Side::Right).unwrap();
        assert_eq!(a, label_with_expert(&t, &env, &s, Side::Right).unwrap());
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn full_expert_mix_executes_labels() {
        let (env, _) = setup(20);
        let cfg = DaggerConfig { expert_mix_p: 1.0, ..small_config() };
        let t = teacher(&env);
        let mut tr = DaggerTrainer::new(env.clone(), vec![t.clone()], vec![0], cfg, 1, "h").unwrap();
        // executing the expert is equivalent to a teacher rollout
        let mut solo = env.reset(0);
        let before: Vec<EnvState> = tr.envs.clone();
        tr.collect().unwrap();
        for _ in 0..3 {
            let a = t.label(&env, &[&solo]).unwrap()[0];
            env.step(&mut solo, &a[0], &a[1]).unwrap();
        }
        assert_eq!(before[0].task, 0);
        assert_eq!(tr.envs[0], solo);
        assert_eq!(tr.expert_fraction(), 1.0);
    }

    #[test]
    fn samples_redraw_the_same_cloud() {
        let (env, _) = setup(20);
        let mut tr = DaggerTrainer::new(env.clone(), vec![teacher(&env)], vec![0], small_config(), 2, "h").unwrap();
        let seeds = vec![77u64; tr.envs.len()];
        let states: Vec<&EnvState> = tr.envs.iter().collect();
        let inp = tr.students.observe(&env, &states, &seeds, Side::Left);
        let sample = DaggerSample {
            task: 0,
            pose: inp.poses[0],
            cloud_seed: 77,
            state: Vec::new(),
            label: [0.0; ACTION_DIM],
        };
        let mut cloud = Vec::new();
        env.sample_cloud(0, Side::Left, &sample.pose, 32, tr.students.noise_std, &mut cloud_rng(77, Side::Left), &mut cloud);
        assert_eq!(cloud, inp.cloud[..32 * 3].to_vec());
        tr.collect().unwrap();
        assert!(tr.fit().unwrap().iter().all(|m| m.is_finite()));
    }

    #[test]
    fn zero_future_student_trains() {
        let (env, _) = setup(20);
        let cfg = DaggerConfig { future_k: 0, ..small_config() };
        let mut tr = DaggerTrainer::new(env.clone(), vec![teacher(&env)], vec![0], cfg, 3, "h").unwrap();
        assert_eq!(tr.students.spec().state_width(), PROPRIO_WIDTH);
        tr.collect().unwrap();
        tr.fit().unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_distillation() {
        let (env, _) = setup(10);
        let t = teacher(&env);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut full = DaggerTrainer::new(env.clone(), vec![t.clone()], vec![0], small_config(), 5, "h").unwrap();
        full.train(a.path(), None).unwrap();
        let mut part = DaggerTrainer::new(env.clone(), vec![t.clone()], vec![0], small_config(), 5, "h").unwrap();
        part.config.total_iterations = 2;
        part.train(b.path(), None).unwrap();
        let mut resumed = DaggerTrainer::new(env, vec![t], vec![0], small_config(), 5, "h").unwrap();
        resumed.resume(b.path()).unwrap();
        resumed.train(b.path(), None).unwrap();
        for f in ["student_left.ckpt", "student_right.ckpt", "distill_state.ckpt"] {
            assert!(fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn bc_dataset_and_training() {
        let (env, demos) = setup(400);
        let data = build_bc_dataset(&env, &demos, 10).unwrap();
        assert!(data.len() > 100);
        assert!(data.actions[0].iter().all(|v| v.abs() <= 1.0));
        let cfg = BcConfig { epochs: 5, hidden: vec![32, 32], ..BcConfig::default() };
        let (policy, curve) = bc_train(&data, &cfg, 1).unwrap();
        assert!(curve[4] < curve[0], "{curve:?}");
        let a = mean_action(&policy, &env, &env.reset(0)).unwrap();
        assert!(a.iter().flatten().all(|v| v.abs() <= 1.0));
        assert!(bc_train(&BcDataset::default(), &cfg, 1).is_err());
    }
}
