//! Actor-critic teacher and point-cloud student networks.

use serde::{Deserialize, Serialize};

use super::checkpoint::{ArrayEntry, Checkpoint, CheckpointHeader};
use super::mlp::{Mlp, MlpCache, MlpSpec};
use super::params::{ParamBuilder, PolicyParams};
use super::pointnet::{PointEncoder, PointEncoderCache, PointEncoderSpec};
use crate::error::{Error, Result};
use crate::math::{RngState, RngStream};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 + 0.5 * LN_2PI + ls).sum()
}

/// Running per-feature mean and variance, merged batch by batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub clip: f64,
}

impl RunningNorm {
    pub fn new(width: usize) -> Self {
        RunningNorm {
            count: 0.0,
            mean: vec![0.0; width],
            var: vec![1.0; width],
            clip: 5.0,
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64], batch: usize) {
        let w = self.width();
        if batch == 0 || w == 0 {
            return;
        }
        let n = batch as f64;
        let mut bmean = vec![0.0; w];
        for row in x.chunks_exact(w) {
            for (m, v) in bmean.iter_mut().zip(row) {
                *m += v;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n);
        let mut bvar = vec![0.0; w];
        for row in x.chunks_exact(w) {
            for ((s, v), m) in bvar.iter_mut().zip(row).zip(&bmean) {
                *s += (v - m) * (v - m);
            }
        }
        bvar.iter_mut().for_each(|s| *s /= n);
        if self.count == 0.0 {
            self.mean = bmean;
            self.var = bvar;
            self.count = n;
            return;
        }
        let total = self.count + n;
        for i in 0..w {
            let delta = bmean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + bvar[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(x.len());
        let w = self.width();
        for row in x.chunks_exact(w) {
            for ((v, m), s) in row.iter().zip(&self.mean).zip(&self.var) {
                out.push(((v - m) / (s + 1e-8).sqrt()).clamp(-self.clip, self.clip));
            }
        }
    }

    fn to_array(&self) -> Vec<f64> {
        let mut a = vec![self.count, self.clip];
        a.extend(&self.mean);
        a.extend(&self.var);
        a
    }

    fn from_array(a: &[f64], width: usize) -> Result<Self> {
        if a.len() != 2 + 2 * width {
            return Err(Error::Integrity(format!(
                "normalizer has {} values, expected {}",
                a.len(),
                2 + 2 * width
            )));
        }
        Ok(RunningNorm {
            count: a[0],
            clip: a[1],
            mean: a[2..2 + width].to_vec(),
            var: a[2 + width..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorCriticSpec {
    pub obs_width: usize,
    pub act_width: usize,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
}

/// Tanh-mean Gaussian actor with a state-independent log-std, plus a
/// separate critic. Both read the normalized observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub spec: ActorCriticSpec,
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: usize,
    pub params: PolicyParams,
    pub norm: RunningNorm,
}

#[derive(Clone, Debug, Default)]
pub struct ActorCriticCache {
    pub obs: Vec<f64>,
    pub actor: MlpCache,
    pub critic: MlpCache,
}

impl ActorCritic {
    pub fn new(spec: ActorCriticSpec, rng: &mut RngStream) -> Result<Self> {
        let mut ac = Self::alloc(spec)?;
        ac.actor.init(&mut ac.params.data, 0.01, rng);
        ac.critic.init(&mut ac.params.data, 1.0, rng);
        let init = ac.spec.log_std_init;
        let ls = ac.log_std;
        ac.params.data[ls..ls + ac.spec.act_width].fill(init);
        Ok(ac)
    }

    fn alloc(spec: ActorCriticSpec) -> Result<Self> {
        let mut b = ParamBuilder::new();
        let actor = Mlp::alloc(
            MlpSpec::new(spec.obs_width, &spec.hidden, spec.act_width).with_tanh(),
            &mut b,
            "actor",
        )?;
        let critic = Mlp::alloc(MlpSpec::new(spec.obs_width, &spec.hidden, 1), &mut b, "critic")?;
        let log_std = b.alloc("log_std", &[spec.act_width]);
        Ok(ActorCritic {
            norm: RunningNorm::new(spec.obs_width),
            spec,
            actor,
            critic,
            log_std,
            params: b.finish(),
        })
    }

    pub fn obs_width(&self) -> usize {
        self.spec.obs_width
    }

    pub fn act_width(&self) -> usize {
        self.spec.act_width
    }

    /// Raw log-std parameters and the clamped values used by the policy.
    pub fn log_std(&self) -> Vec<f64> {
        self.params.data[self.log_std..self.log_std + self.spec.act_width]
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    fn check_width(&self, obs: &[f64], batch: usize) -> Result<()> {
        if obs.len() != batch * self.spec.obs_width {
            return Err(Error::Config(format!(
                "observation has {} values, policy expects {batch} x {}",
                obs.len(),
                self.spec.obs_width
            )));
        }
        Ok(())
    }

    /// Action means for a batch of raw observations.
    pub fn act_mean<'c>(
        &self,
        obs: &[f64],
        batch: usize,
        cache: &'c mut ActorCriticCache,
    ) -> Result<&'c [f64]> {
        self.check_width(obs, batch)?;
        self.norm.apply(obs, &mut cache.obs);
        self.actor.forward(&self.params.data, &cache.obs, batch, &mut cache.actor)
    }

    /// Action means and state values for a batch of raw observations.
    pub fn forward(
        &self,
        obs: &[f64],
        batch: usize,
        cache: &mut ActorCriticCache,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_width(obs, batch)?;
        self.norm.apply(obs, &mut cache.obs);
        let mean = self
            .actor
            .forward(&self.params.data, &cache.obs, batch, &mut cache.actor)?
            .to_vec();
        let value = self
            .critic
            .forward(&self.params.data, &cache.obs, batch, &mut cache.critic)?
            .to_vec();
        Ok((mean, value))
    }

    pub fn to_checkpoint(
        &self,
        kind: &str,
        iteration: u64,
        rng_state: Option<RngState>,
        config_hash: &str,
        mut extra_arrays: Vec<(String, Vec<f64>)>,
        extra: serde_json::Value,
    ) -> Result<Checkpoint> {
        let mut arrays = vec![
            ("params".to_string(), self.params.data.clone()),
            ("obs_norm".to_string(), self.norm.to_array()),
        ];
        arrays.append(&mut extra_arrays);
        Ok(Checkpoint {
            header: CheckpointHeader {
                kind: kind.into(),
                layout: self.params.layout.clone(),
                spec: serde_json::to_value(&self.spec)?,
                precision: self.params.precision,
                rng_state,
                iteration,
                config_hash: config_hash.into(),
                extra,
                arrays: arrays
                    .iter()
                    .map(|(n, a)| ArrayEntry { name: n.clone(), len: a.len() })
                    .collect(),
            },
            arrays: arrays.into_iter().map(|(_, a)| a).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ActorCriticSpec = serde_json::from_value(ck.header.spec.clone())?;
        let mut ac = Self::alloc(spec)?;
        if ac.params.layout != ck.header.layout {
            return Err(Error::Integrity("checkpoint layout does not match its spec".into()));
        }
        let data = ck.require("params")?;
        if data.len() != ac.params.len() {
            return Err(Error::Integrity("checkpoint parameter count mismatch".into()));
        }
        ac.params.data.copy_from_slice(data);
        ac.params.check_finite()?;
        ac.norm = RunningNorm::from_array(ck.require("obs_norm")?, ac.spec.obs_width)?;
        Ok(ac)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub proprio_width: usize,
    pub future_k: usize,
    pub points: usize,
    pub act_width: usize,
    pub hidden: Vec<usize>,
    pub encoder: PointEncoderSpec,
}

impl StudentSpec {
    pub fn future_width(&self) -> usize {
        3 * self.future_k
    }

    /// Width of the normalized low-dimensional input (proprioception and
    /// future positions).
    pub fn state_width(&self) -> usize {
        self.proprio_width + self.future_width()
    }
}

/// Point-cloud policy: encoder features concatenated with proprioception and
/// future object positions, then a tanh MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentPolicy {
    pub spec: StudentSpec,
    pub encoder: PointEncoder,
    pub actor: Mlp,
    pub params: PolicyParams,
    pub norm: RunningNorm,
}

#[derive(Clone, Debug, Default)]
pub struct StudentCache {
    pub state: Vec<f64>,
    pub encoder: PointEncoderCache,
    pub input: Vec<f64>,
    pub actor: MlpCache,
}

impl StudentPolicy {
    pub fn new(spec: StudentSpec, rng: &mut RngStream) -> Result<Self> {
        let s = Self::alloc(spec)?;
        let mut s = s;
        s.encoder.init(&mut s.params.data, rng);
        s.actor.init(&mut s.params.data, 0.01, rng);
        Ok(s)
    }

    fn alloc(spec: StudentSpec) -> Result<Self> {
        if spec.points == 0 {
            return Err(Error::Config("student point count must be >= 1".into()));
        }
        let mut b = ParamBuilder::new();
        let encoder = PointEncoder::alloc(spec.encoder.clone(), &mut b, "encoder")?;
        let input = spec.state_width() + encoder.output_width();
        let actor = Mlp::alloc(
            MlpSpec::new(input, &spec.hidden, spec.act_width).with_tanh(),
            &mut b,
            "actor",
        )?;
        Ok(StudentPolicy {
            norm: RunningNorm::new(spec.state_width()),
            spec,
            encoder,
            actor,
            params: b.finish(),
        })
    }

    /// Concatenates proprioception and future blocks row by row.
    pub fn join_state(&self, proprio: &[f64], future: &[f64], batch: usize) -> Result<Vec<f64>> {
        let (pw, fw) = (self.spec.proprio_width, self.spec.future_width());
        if proprio.len() != batch * pw || future.len() != batch * fw {
            return Err(Error::Config(format!(
                "student input widths {}+{} do not match {batch} x ({pw}+{fw})",
                proprio.len(),
                future.len()
            )));
        }
        let mut out = Vec::with_capacity(batch * (pw + fw));
        for b in 0..batch {
            out.extend_from_slice(&proprio[b * pw..(b + 1) * pw]);
            out.extend_from_slice(&future[b * fw..(b + 1) * fw]);
        }
        Ok(out)
    }

    /// Deterministic actions for a batch; `state` rows are proprioception
    /// followed by future positions, `clouds` holds `points` xyz per row.
    pub fn forward<'c>(
        &self,
        state: &[f64],
        clouds: &[f64],
        batch: usize,
        cache: &'c mut StudentCache,
    ) -> Result<&'c [f64]> {
        let sw = self.spec.state_width();
        if state.len() != batch * sw {
            return Err(Error::Config(format!(
                "student state has {} values, expected {batch} x {sw}",
                state.len()
            )));
        }
        let p = self.spec.points;
        if clouds.len() != batch * p * 3 {
            return Err(Error::Config(format!(
                "student cloud has {} values, expected {batch} x {p} x 3",
                clouds.len()
            )));
        }
        self.norm.apply(state, &mut cache.state);
        let feat = self
            .encoder
            .forward(&self.params.data, clouds, batch, p, &mut cache.encoder)?;
        let fw = feat.len() / batch.max(1);
        cache.input.clear();
        for b in 0..batch {
            cache.input.extend_from_slice(&cache.state[b * sw..(b + 1) * sw]);
            cache.input.extend_from_slice(&feat[b * fw..(b + 1) * fw]);
        }
        self.actor
            .forward(&self.params.data, &cache.input, batch, &mut cache.actor)
    }

    /// Adds the parameter gradient of `Σ dy·action` into `grads`.
    pub fn backward(&self, cache: &StudentCache, dy: &[f64], grads: &mut [f64]) {
        let sw = self.spec.state_width();
        let fw = self.encoder.output_width();
        let batch = cache.actor.batch;
        let dx = self
            .actor
            .backward(&self.params.data, &cache.actor, dy, grads, true)
            .expect("input gradient requested");
        let mut dfeat = Vec::with_capacity(batch * fw);
        for b in 0..batch {
            let row = &dx[b * (sw + fw)..(b + 1) * (sw + fw)];
            dfeat.extend_from_slice(&row[sw..]);
        }
        self.encoder
            .backward(&self.params.data, &cache.encoder, &dfeat, grads);
    }

    pub fn to_checkpoint(
        &self,
        kind: &str,
        iteration: u64,
        rng_state: Option<RngState>,
        config_hash: &str,
        mut extra_arrays: Vec<(String, Vec<f64>)>,
        extra: serde_json::Value,
    ) -> Result<Checkpoint> {
        let mut arrays = vec![
            ("params".to_string(), self.params.data.clone()),
            ("obs_norm".to_string(), self.norm.to_array()),
        ];
        arrays.append(&mut extra_arrays);
        Ok(Checkpoint {
            header: CheckpointHeader {
                kind: kind.into(),
                layout: self.params.layout.clone(),
                spec: serde_json::to_value(&self.spec)?,
                precision: self.params.precision,
                rng_state,
                iteration,
                config_hash: config_hash.into(),
                extra,
                arrays: arrays
                    .iter()
                    .map(|(n, a)| ArrayEntry { name: n.clone(), len: a.len() })
                    .collect(),
            },
            arrays: arrays.into_iter().map(|(_, a)| a).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: StudentSpec = serde_json::from_value(ck.header.spec.clone())?;
        let mut s = Self::alloc(spec)?;
        if s.params.layout != ck.header.layout {
            return Err(Error::Integrity("checkpoint layout does not match its spec".into()));
        }
        let data = ck.require("params")?;
        if data.len() != s.params.len() {
            return Err(Error::Integrity("checkpoint parameter count mismatch".into()));
        }
        s.params.data.copy_from_slice(data);
        s.params.check_finite()?;
        s.norm = RunningNorm::from_array(ck.require("obs_norm")?, s.spec.state_width())?;
        Ok(s)
    }
}
