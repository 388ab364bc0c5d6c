//! Stage-one success rate r1, stage-two tracking rate r2, threshold sweeps
//! and report tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{RngStream, Vec3};
use crate::sim::{BimanualEnv, EnvState, EpisodeLog, StepRecord, ACTION_DIM};

pub const REPORT_COLUMNS: [&str; 6] = ["split", "task_id", "threshold", "r1", "r2", "n"];
/// Task id of the per-split aggregate rows.
pub const AGGREGATE_ID: &str = "*";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub eps_succ: f64,
    pub eps_track: f64,
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: 32,
            eps_succ: 0.1,
            eps_track: 0.1,
            thresholds: vec![0.05, 0.075, 0.1],
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(Error::Config("n_episodes must be >= 1".into()));
        }
        if !(self.eps_succ > 0.0 && self.eps_track > 0.0) {
            return Err(Error::Config("evaluation thresholds must be positive".into()));
        }
        validate_thresholds(&self.thresholds)
    }
}

pub fn validate_thresholds(t: &[f64]) -> Result<()> {
    if t.iter().any(|v| !(v.is_finite() && *v > 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "thresholds must be positive and strictly ascending, got {t:?}"
        )));
    }
    Ok(())
}

fn both_within(s: &StepRecord, object: Vec3, tool: Vec3, eps: f64) -> bool {
    s.object_position().distance(object) <= eps && s.tool_position().distance(tool) <= eps
}

/// Whether the episode holds both objects within `eps` of their reference
/// positions for `u` consecutive steps.
pub fn episode_r1(log: &EpisodeLog, eps: f64, u: usize) -> bool {
    let h = &log.header;
    let mut run = 0;
    for s in &log.steps {
        if both_within(s, h.object_reference, h.tool_reference, eps) {
            run += 1;
            if run >= u {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

/// Sim-step offset from the tracking origin at which demo index `i` is
/// checked: the first step whose tracking index is `i`.
pub fn index_step_offset(i: usize, f: usize) -> usize {
    if i == 0 {
        0
    } else {
        (i - 1) * f + 1
    }
}

/// Number of demo indices tracked within `eps`, and the demo length.
pub fn episode_r2_hits(log: &EpisodeLog, eps: f64, f: usize) -> (usize, usize) {
    let h = &log.header;
    let len = h.tracking_tool.len();
    let Some(origin) = log.tracking_origin() else {
        return (0, len);
    };
    let hits = (0..len)
        .filter(|&i| {
            log.steps
                .get(origin + index_step_offset(i, f))
                .is_some_and(|s| both_within(s, h.tracking_object[i], h.tracking_tool[i], eps))
        })
        .count();
    (hits, len)
}

pub fn eval_r1(logs: &[EpisodeLog], eps_succ: f64, u: usize) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    logs.iter().filter(|l| episode_r1(l, eps_succ, u)).count() as f64 / logs.len() as f64
}

pub fn eval_r2(logs: &[EpisodeLog], eps_track: f64, f: usize) -> f64 {
    let (hits, total) = logs.iter().fold((0, 0), |(h, t), l| {
        let (a, b) = episode_r2_hits(l, eps_track, f);
        (h + a, t + b)
    });
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub r1: f64,
    pub r2: f64,
}

/// r1 and r2 recomputed from the same logs at each threshold.
pub fn sweep_thresholds(logs: &[EpisodeLog], thresholds: &[f64], u: usize, f: usize) -> Result<Vec<SweepRow>> {
    validate_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&eps| SweepRow {
            threshold: eps,
            r1: eval_r1(logs, eps, u),
            r2: eval_r2(logs, eps, f),
        })
        .collect())
}

/// A policy that acts for many environments at once.
pub trait BatchPolicy {
    fn actions(
        &mut self,
        env: &BimanualEnv,
        states: &[&EnvState],
        rng: &mut RngStream,
    ) -> Result<Vec<[[f64; ACTION_DIM]; 2]>>;
}

/// Runs `n` episodes of task `task` in lockstep.
pub fn rollout_episodes(
    env: &BimanualEnv,
    task: usize,
    n: usize,
    policy: &mut dyn BatchPolicy,
    rng: &mut RngStream,
) -> Result<Vec<EpisodeLog>> {
    let mut states: Vec<EnvState> = (0..n).map(|_| env.reset(task)).collect();
    let mut logs: Vec<EpisodeLog> = (0..n).map(|_| EpisodeLog::new(env, task)).collect();
    while !states[0].done {
        let refs: Vec<&EnvState> = states.iter().collect();
        let acts = policy.actions(env, &refs, rng)?;
        for ((s, a), log) in states.iter_mut().zip(&acts).zip(logs.iter_mut()) {
            let info = env.step(s, &a[0], &a[1])?;
            log.record(s, &info);
        }
    }
    Ok(logs)
}

/// Mean r1 and r2 over every task of the environment at the configured
/// thresholds.
pub fn evaluate_group(
    env: &BimanualEnv,
    policy: &mut dyn BatchPolicy,
    config: &EvalConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = RngStream::new(config.seed ^ seed, 0x6576616c);
    let mut logs = Vec::new();
    for task in 0..env.tasks.len() {
        logs.extend(rollout_episodes(env, task, config.n_episodes, policy, &mut rng)?);
    }
    Ok((
        eval_r1(&logs, config.eps_succ, env.sim.u),
        eval_r2(&logs, config.eps_track, env.weights.f),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub task_id: String,
    pub threshold: f64,
    pub r1: f64,
    pub r2: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Adds per-task rows for `logs_by_task` and the split aggregate.
    pub fn add_split(
        &mut self,
        split: &str,
        logs_by_task: &[(String, Vec<EpisodeLog>)],
        thresholds: &[f64],
        u: usize,
        f: usize,
    ) -> Result<()> {
        let mut all = Vec::new();
        for (task_id, logs) in logs_by_task {
            for row in sweep_thresholds(logs, thresholds, u, f)? {
                self.rows.push(EvalRow {
                    split: split.into(),
                    task_id: task_id.clone(),
                    threshold: row.threshold,
                    r1: row.r1,
                    r2: row.r2,
                    n: logs.len(),
                });
            }
            all.extend(logs.iter().cloned());
        }
        if !logs_by_task.is_empty() {
            for row in sweep_thresholds(&all, thresholds, u, f)? {
                self.rows.push(EvalRow {
                    split: split.into(),
                    task_id: AGGREGATE_ID.into(),
                    threshold: row.threshold,
                    r1: row.r1,
                    r2: row.r2,
                    n: all.len(),
                });
            }
        }
        Ok(())
    }

    /// The aggregate row of `split` at `threshold`.
    pub fn aggregate(&self, split: &str, threshold: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.task_id == AGGREGATE_ID && r.threshold == threshold)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.split.clone(),
                r.task_id.clone(),
                r.threshold.to_string(),
                r.r1.to_string(),
                r.r2.to_string(),
                r.n.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        crate::nn::checkpoint::write_atomic(&dir.join("report.csv"), &self.to_csv()?)?;
        crate::nn::checkpoint::write_atomic(&dir.join("report.json"), &self.to_json()?)?;
        Ok(())
    }
}

/// Prints the rows as an aligned text table.
pub fn render_table(report: &EvalReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{:<10} {:<24} {:>9} {:>7} {:>7} {:>5}", "split", "task_id", "threshold", "r1", "r2", "n")?;
    for r in &report.rows {
        writeln!(
            out,
            "{:<10} {:<24} {:>9.3} {:>7.3} {:>7.3} {:>5}",
            r.split, r.task_id, r.threshold, r.r1, r.r2, r.n
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardBreakdown;
    use crate::sim::{EpisodeHeader, Stage};

    fn header(len: usize) -> EpisodeHeader {
        EpisodeHeader {
            task_id: "t".into(),
            episode_length: 0,
            u: 3,
            f: 2,
            tool_reference: Vec3::new(0.0, 0.0, 1.0),
            object_reference: Vec3::new(1.0, 0.0, 1.0),
            tracking_tool: (0..len).map(|i| Vec3::new(0.0, i as f64, 1.0)).collect(),
            tracking_object: (0..len).map(|i| Vec3::new(1.0, i as f64, 1.0)).collect(),
        }
    }

    fn step(t: usize, ts: Option<usize>, tool: Vec3, object: Vec3) -> StepRecord {
        let pose = |p: Vec3| [p.x, p.y, p.z, 1.0, 0.0, 0.0, 0.0];
        StepRecord {
            t,
            stage: if ts.is_some() { Stage::Tracking } else { Stage::Aligning },
            t_since_tracking: ts,
            tool_pose: pose(tool),
            object_pose: pose(object),
            left_wrist: pose(Vec3::ZERO),
            right_wrist: pose(Vec3::ZERO),
            rewards_left: RewardBreakdown::default(),
            rewards_right: RewardBreakdown::default(),
            object_attached: false,
            tool_attached: false,
        }
    }

    #[test]
    fn r1_window_rule() {
        let h = header(2);
        let at = |n: usize| EpisodeLog {
            steps: (0..6)
                .map(|t| {
                    let off = if t < n { 0.0 } else { 1.0 };
                    step(t, None, h.tool_reference + Vec3::new(off, 0.0, 0.0), h.object_reference)
                })
                .collect(),
            header: h.clone(),
        };
        assert!(episode_r1(&at(3), 0.1, 3));
        assert!(!episode_r1(&at(2), 0.1, 3));
    }

    #[test]
    fn r2_half_indices() {
        let h = header(4);
        // origin at step 1, f = 2: indices 0..4 checked at steps 1, 2, 4, 6
        let mut steps = vec![step(0, None, Vec3::ZERO, Vec3::ZERO)];
        for ts in 0..6usize {
            let i = ts.div_ceil(2).min(3);
            let good = i < 2;
            let off = if good { 0.0 } else { 0.5 };
            steps.push(step(
                ts + 1,
                Some(ts),
                h.tracking_tool[i] + Vec3::new(off, 0.0, 0.0),
                h.tracking_object[i],
            ));
        }
        let log = EpisodeLog { header: h, steps };
        assert_eq!(episode_r2_hits(&log, 0.1, 2), (2, 4));
        assert_eq!(eval_r2(&[log], 0.1, 2), 0.5);
    }

    #[test]
    fn never_tracking_scores_zero() {
        let h = header(3);
        let log = EpisodeLog {
            steps: vec![step(0, None, h.tool_reference, h.object_reference)],
            header: h,
        };
        assert_eq!(eval_r2(&[log], 0.1, 2), 0.0);
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = EvalReport::default().to_csv().unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "split,task_id,threshold,r1,r2,n\n");
    }

    #[test]
    fn report_json_round_trip() {
        let mut r = EvalReport { policy: "p".into(), config_hash: "h".into(), rows: Vec::new() };
        let h = header(2);
        let log = EpisodeLog { steps: vec![step(0, Some(0), h.tracking_tool[0], h.tracking_object[0])], header: h };
        r.add_split("train", &[("t".into(), vec![log])], &[0.05, 0.1], 1, 2).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn thresholds_must_ascend() {
        assert!(sweep_thresholds(&[], &[0.1, 0.05], 1, 1).is_err());
    }
}
