//! Run configuration and the end-to-end commands: demo generation, task
//! construction, teacher training, distillation, evaluation and replay.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demo::{apply_z_offset, generate_synthetic_demo, parse_demo, DemoTrajectory, SyntheticDemoSpec, Template};
use crate::distill::{bc_train, build_bc_dataset, BcConfig, DaggerConfig, DaggerTrainer, StudentPair};
use crate::error::{Error, Result};
use crate::eval::{rollout_episodes, BatchPolicy, EvalConfig, EvalReport};
use crate::math::RngStream;
use crate::nn::checkpoint::{write_atomic, Checkpoint};
use crate::reward::RewardWeights;
use crate::sim::{BimanualEnv, EpisodeLog, SimConfig};
use crate::task::{
    build_task_set, load_task_set, DatasetEntry, DatasetManifest, SceneConfig, TaskManifest, TaskSet, TaskSpec,
    DATASET_MANIFEST,
};
use crate::teacher::{PpoConfig, TeacherPolicy, TeacherTrainer, TeacherVariant};

pub const THREADS_ENV: &str = "BIDEX_THREADS";
pub const TASK_MANIFEST: &str = "tasks.json";
pub const EFFECTIVE_CONFIG: &str = "config.json";
pub const SPLITS: [&str; 3] = ["train", "test_comb", "test_new"];

/// Which policy family `train-teacher` produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyVariant {
    #[default]
    Ippo,
    CentralizedPpo,
    Bc,
}

impl std::str::FromStr for PolicyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ippo" => Ok(PolicyVariant::Ippo),
            "centralized-ppo" => Ok(PolicyVariant::CentralizedPpo),
            "bc" => Ok(PolicyVariant::Bc),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected ippo, centralized-ppo or bc)"
            ))),
        }
    }
}

impl PolicyVariant {
    fn teacher(self) -> Option<TeacherVariant> {
        match self {
            PolicyVariant::Ippo => Some(TeacherVariant::Ippo),
            PolicyVariant::CentralizedPpo => Some(TeacherVariant::CentralizedPpo),
            PolicyVariant::Bc => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub split: u64,
    pub teacher: u64,
    pub distill: u64,
    pub bc: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub sim: SimConfig,
    pub reward: RewardWeights,
    pub ppo: PpoConfig,
    pub dagger: DaggerConfig,
    pub bc: BcConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub train_fraction: f64,
    pub variant: PolicyVariant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            sim: SimConfig::default(),
            reward: RewardWeights::default(),
            ppo: PpoConfig::default(),
            dagger: DaggerConfig::default(),
            bc: BcConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            train_fraction: 0.75,
            variant: PolicyVariant::Ippo,
        }
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serializes")))
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: RunConfig = serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("config serializes");
        v.push(b'\n');
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.sim.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.dagger.validate()?;
        self.bc.validate()?;
        self.eval.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Hash of everything task construction depends on.
    pub fn tasks_hash(&self) -> String {
        let mut weights = self.reward;
        weights.toggles = Default::default();
        hash_json(&serde_json::json!({
            "scene": self.scene,
            "sim": self.sim,
            "reward": weights,
            "train_fraction": self.train_fraction,
            "seed": self.seeds.split,
        }))
    }

    /// Training sections without their schedule fields, so that a run can
    /// be extended or resumed under the same hash.
    fn hashed_sections(&self) -> (PpoConfig, DaggerConfig) {
        let mut ppo = self.ppo.clone();
        ppo.total_iterations = 0;
        ppo.checkpoint_interval = 0;
        ppo.eval_interval = 0;
        let mut dagger = self.dagger.clone();
        dagger.total_iterations = 0;
        dagger.checkpoint_interval = 0;
        dagger.eval_interval = 0;
        (ppo, dagger)
    }

    /// Hash recorded in teacher (or BC) checkpoints.
    pub fn policy_hash(&self) -> String {
        let body = match self.variant {
            PolicyVariant::Bc => serde_json::json!({
                "tasks": self.tasks_hash(),
                "bc": self.bc,
                "seed": self.seeds.bc,
            }),
            v => serde_json::json!({
                "tasks": self.tasks_hash(),
                "toggles": self.reward.toggles,
                "ppo": self.hashed_sections().0,
                "variant": v,
                "seed": self.seeds.teacher,
            }),
        };
        hash_json(&body)
    }

    /// Hash recorded in student checkpoints; chained to the teachers'.
    pub fn student_hash(&self) -> String {
        let mut teacher = self.clone();
        if teacher.variant == PolicyVariant::Bc {
            teacher.variant = PolicyVariant::Ippo;
        }
        hash_json(&serde_json::json!({
            "teacher": teacher.policy_hash(),
            "dagger": self.hashed_sections().1,
            "seed": self.seeds.distill,
        }))
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(EFFECTIVE_CONFIG), &self.to_json())
    }
}

/// Sizes the global worker pool from `BIDEX_THREADS` if set. Returns the
/// resulting thread count.
pub fn init_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Directory name for a group id (`pour/kettle/bowl` → `pour__kettle__bowl`).
pub fn group_dir(group_id: &str) -> String {
    group_id.replace('/', "__")
}

/// Writes `count` synthetic demos cycling through `templates`, plus the
/// dataset manifest. Instance numbers vary so that held-out splits contain
/// both seen combinations and novel instances.
pub fn gen_demos(out: &Path, count: usize, templates: &[Template], seed: u64) -> Result<DatasetManifest> {
    if count == 0 || templates.is_empty() {
        return Err(Error::Config("gen-demos needs count >= 1 and at least one template".into()));
    }
    fs::create_dir_all(out)?;
    let mut demos = Vec::with_capacity(count);
    for i in 0..count {
        let template = templates[i % templates.len()];
        let k = i / templates.len();
        let (tool, object) = template.catalog();
        let id = format!("{}-{i:04}", template.name());
        let spec = SyntheticDemoSpec::new(
            &id,
            template,
            &format!("{tool}{}", 1 + k % 3),
            &format!("{object}{}", 1 + (k / 3) % 2),
        );
        let demo = generate_synthetic_demo(&spec, &mut RngStream::new(seed, i as u64))?;
        let file = format!("{id}.json");
        write_atomic(&out.join(&file), &demo.to_bytes())?;
        demos.push(DatasetEntry { id, file });
    }
    let manifest = DatasetManifest { demos };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out.join(DATASET_MANIFEST), &bytes)?;
    Ok(manifest)
}

/// Builds and writes the task manifest for a dataset directory.
pub fn build_tasks(dataset: &Path, config: &RunConfig, out: &Path) -> Result<TaskManifest> {
    let set = build_task_set(
        dataset,
        &config.scene,
        &config.sim,
        &config.reward,
        config.train_fraction,
        config.seeds.split,
        &config.tasks_hash(),
    )?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    config.echo(dir)?;
    write_atomic(out, &set.manifest.to_bytes())?;
    Ok(set.manifest)
}

/// Loads a task manifest and checks it was built under `config`.
pub fn load_tasks(manifest: &Path, config: &RunConfig) -> Result<TaskSet> {
    let m = TaskManifest::load(manifest)
        .map_err(|e| Error::Config(format!("cannot load task manifest {}: {e}", manifest.display())))?;
    if m.config_hash != config.tasks_hash() {
        return Err(Error::Integrity(format!(
            "{} was built with a different task configuration",
            manifest.display()
        )));
    }
    load_task_set(&m, &config.scene)
}

fn group_tasks(set: &TaskSet, group_id: &str, split: &str) -> Result<(Vec<TaskSpec>, usize)> {
    let group = set
        .group(group_id)
        .ok_or_else(|| Error::Config(format!("no task group `{group_id}` in the manifest")))?;
    let tasks = group
        .tasks
        .iter()
        .filter(|t| set.split.label_of(&t.task_id) == Some(split))
        .cloned()
        .collect();
    Ok((tasks, group.tasks.len()))
}

fn make_env(tasks: Vec<TaskSpec>, group_size: usize, config: &RunConfig) -> Result<BimanualEnv> {
    BimanualEnv::new(tasks, group_size, config.scene.clone(), config.sim.clone(), config.reward)
}

fn load_demo(set: &TaskSet, task_id: &str, scene: &SceneConfig) -> Result<DemoTrajectory> {
    let entry = set
        .manifest
        .tasks
        .get(task_id)
        .ok_or_else(|| Error::Integrity(format!("manifest lacks task `{task_id}`")))?;
    let path = PathBuf::from(&set.manifest.dataset_dir).join(&entry.demo_file);
    let demo = parse_demo(&fs::read(path)?)?;
    Ok(apply_z_offset(&demo, scene.table_height, scene.clearance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub group_id: String,
    pub tasks: usize,
    pub iterations: u64,
    pub config_hash: String,
}

/// Trains a teacher (or the BC baseline) on the training tasks of one group.
pub fn train_teacher(
    manifest: &Path,
    group_id: &str,
    config: &RunConfig,
    out: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    let set = load_tasks(manifest, config)?;
    let (tasks, group_size) = group_tasks(&set, group_id, "train")?;
    if tasks.is_empty() {
        return Err(Error::Config(format!("group `{group_id}` has no training tasks")));
    }
    let hash = config.policy_hash();
    let n_tasks = tasks.len();
    config.echo(out)?;
    let iterations = match config.variant.teacher() {
        Some(variant) => {
            let env = make_env(tasks, group_size, config)?;
            let mut trainer = TeacherTrainer::new(env, variant, config.ppo.clone(), config.seeds.teacher, group_id, &hash)?;
            if resume {
                trainer.resume(out)?;
            }
            trainer.train(out, Some(&config.eval))?;
            trainer.iteration
        }
        None => {
            let demos = tasks
                .iter()
                .map(|t| load_demo(&set, &t.task_id, &config.scene))
                .collect::<Result<Vec<_>>>()?;
            let env = make_env(tasks, group_size, config)?;
            let data = build_bc_dataset(&env, &demos, config.bc.hold_steps)?;
            let (policy, curve) = bc_train(&data, &config.bc, config.seeds.bc)?;
            policy.save_kind(out, "bc", config.bc.epochs as u64, &hash, group_id)?;
            let mut log = Vec::new();
            for (epoch, mse) in curve.iter().enumerate() {
                serde_json::to_writer(&mut log, &serde_json::json!({ "epoch": epoch + 1, "mse": mse }))?;
                log.push(b'\n');
            }
            write_atomic(&out.join("bc_log.jsonl"), &log)?;
            config.bc.epochs as u64
        }
    };
    Ok(TrainSummary {
        group_id: group_id.into(),
        tasks: n_tasks,
        iterations,
        config_hash: hash,
    })
}

fn teacher_dir(root: &Path, group_id: &str, single: bool) -> PathBuf {
    let nested = root.join(group_dir(group_id));
    if single && !nested.exists() {
        root.to_path_buf()
    } else {
        nested
    }
}

/// Distills the teachers of `groups` (all groups when empty) into one
/// point-cloud student pair. Teachers live in `teachers/<group dir>/`, or
/// directly in `teachers/` when a single group is distilled.
pub fn distill(
    manifest: &Path,
    teachers: &Path,
    groups: &[String],
    config: &RunConfig,
    out: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    let set = load_tasks(manifest, config)?;
    let groups: Vec<String> = if groups.is_empty() {
        set.groups.iter().map(|g| g.group_id.clone()).collect()
    } else {
        groups.to_vec()
    };
    let mut teacher_config = config.clone();
    if teacher_config.variant == PolicyVariant::Bc {
        teacher_config.variant = PolicyVariant::Ippo;
    }
    let expected = teacher_config.policy_hash();
    let mut tasks = Vec::new();
    let mut policies = Vec::new();
    let mut teacher_of = Vec::new();
    let mut group_size = 1;
    for gid in &groups {
        let (t, size) = group_tasks(&set, gid, "train")?;
        let dir = teacher_dir(teachers, gid, groups.len() == 1);
        let (policy, hash, kind) = TeacherPolicy::load_kind(&dir)
            .map_err(|e| Error::Config(format!("no usable teacher for group `{gid}` in {}: {e}", dir.display())))?;
        if !kind.starts_with("teacher-") {
            return Err(Error::Config(format!("{} holds a `{kind}` policy, not a teacher", dir.display())));
        }
        if hash != expected {
            return Err(Error::Integrity(format!(
                "teacher in {} was trained with a different configuration",
                dir.display()
            )));
        }
        group_size = group_size.max(size);
        teacher_of.extend(std::iter::repeat_n(policies.len(), t.len()));
        tasks.extend(t);
        policies.push(policy);
    }
    if tasks.is_empty() {
        return Err(Error::Config("no training tasks to distill".into()));
    }
    let n_tasks = tasks.len();
    let env = make_env(tasks, group_size, config)?;
    let hash = config.student_hash();
    config.echo(out)?;
    let mut trainer = DaggerTrainer::new(env, policies, teacher_of, config.dagger.clone(), config.seeds.distill, &hash)?;
    trainer.meta.insert("groups".into(), serde_json::json!(groups));
    if resume {
        trainer.resume(out)?;
    }
    trainer.train(out, Some(&config.eval))?;
    Ok(TrainSummary {
        group_id: groups.join(","),
        tasks: n_tasks,
        iterations: trainer.iteration,
        config_hash: hash,
    })
}

/// A loaded policy of any kind, with the groups it covers.
pub enum LoadedPolicy {
    Teacher(TeacherPolicy),
    Bc(TeacherPolicy),
    Student(StudentPair),
}

impl LoadedPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            LoadedPolicy::Teacher(_) => "teacher",
            LoadedPolicy::Bc(_) => "bc",
            LoadedPolicy::Student(_) => "student",
        }
    }

    pub fn as_batch(&mut self) -> &mut dyn BatchPolicy {
        match self {
            LoadedPolicy::Teacher(p) | LoadedPolicy::Bc(p) => p,
            LoadedPolicy::Student(p) => p,
        }
    }
}

/// Loads the policy in `dir`, verifying its config hash against `config`.
/// Returns the policy and its group ids.
pub fn load_policy(dir: &Path, config: &RunConfig) -> Result<(LoadedPolicy, Vec<String>)> {
    let mismatch = || {
        Error::Integrity(format!(
            "checkpoint in {} does not match the current configuration",
            dir.display()
        ))
    };
    if dir.join("student_left.ckpt").exists() {
        let (pair, hash) = StudentPair::load(dir)?;
        if hash != config.student_hash() {
            return Err(mismatch());
        }
        let ck = Checkpoint::load(&dir.join("student_left.ckpt"))?;
        let groups = ck
            .header
            .extra
            .get("groups")
            .and_then(|g| serde_json::from_value(g.clone()).ok())
            .unwrap_or_default();
        return Ok((LoadedPolicy::Student(pair), groups));
    }
    let first = if dir.join("joint.ckpt").exists() { "joint.ckpt" } else { "left.ckpt" };
    if !dir.join(first).exists() {
        return Err(Error::Config(format!("no checkpoint found in {}", dir.display())));
    }
    let (policy, hash, kind) = TeacherPolicy::load_kind(dir)?;
    let group = Checkpoint::load(&dir.join(first))?
        .header
        .extra
        .get("group_id")
        .and_then(|g| g.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Integrity("checkpoint lacks its group id".into()))?;
    let mut c = config.clone();
    if kind == "bc" {
        c.variant = PolicyVariant::Bc;
        if hash != c.policy_hash() {
            return Err(mismatch());
        }
        return Ok((LoadedPolicy::Bc(policy), vec![group]));
    }
    if c.variant == PolicyVariant::Bc {
        c.variant = PolicyVariant::Ippo;
    }
    if kind == "teacher-centralized-ppo" {
        c.variant = PolicyVariant::CentralizedPpo;
    }
    if hash != c.policy_hash() {
        return Err(mismatch());
    }
    Ok((LoadedPolicy::Teacher(policy), vec![group]))
}

/// Evaluates a checkpoint on every split of its groups and writes
/// `report.csv`, `report.json` and per-task episode logs into `out`.
pub fn evaluate(manifest: &Path, checkpoint: &Path, config: &RunConfig, out: &Path, sweep: bool) -> Result<EvalReport> {
    let set = load_tasks(manifest, config)?;
    let (mut policy, groups) = load_policy(checkpoint, config)?;
    let thresholds = if sweep {
        config.eval.thresholds.clone()
    } else {
        if config.eval.eps_succ != config.eval.eps_track {
            return Err(Error::Config(
                "report rows use one threshold for both metrics; set eps_succ = eps_track or use --sweep".into(),
            ));
        }
        vec![config.eval.eps_succ]
    };
    let hash = match policy {
        LoadedPolicy::Student(_) => config.student_hash(),
        LoadedPolicy::Bc(_) => RunConfig { variant: PolicyVariant::Bc, ..config.clone() }.policy_hash(),
        LoadedPolicy::Teacher(_) => {
            let mut c = config.clone();
            if c.variant == PolicyVariant::Bc {
                c.variant = PolicyVariant::Ippo;
            }
            c.policy_hash()
        }
    };
    let mut report = EvalReport {
        policy: format!("{}:{}", policy.name(), checkpoint.display()),
        config_hash: hash,
        rows: Vec::new(),
    };
    config.echo(out)?;
    let episodes = out.join("episodes");
    fs::create_dir_all(&episodes)?;
    let mut task_counter = 0u64;
    for split in SPLITS {
        let mut per_task = Vec::new();
        for gid in &groups {
            let (tasks, size) = group_tasks(&set, gid, split)?;
            if tasks.is_empty() {
                continue;
            }
            let env = make_env(tasks, size, config)?;
            for (k, task) in env.tasks.iter().enumerate() {
                let mut rng = RngStream::new(config.eval.seed, task_counter);
                task_counter += 1;
                let logs = rollout_episodes(&env, k, config.eval.n_episodes, policy.as_batch(), &mut rng)?;
                let mut bytes = Vec::new();
                for log in &logs {
                    log.write_jsonl(&mut bytes)?;
                }
                write_atomic(&episodes.join(format!("{split}_{}.jsonl", task.task_id)), &bytes)?;
                per_task.push((task.task_id.clone(), logs));
            }
        }
        report.add_split(split, &per_task, &thresholds, config.sim.u, config.reward.f)?;
    }
    report.write(out)?;
    Ok(report)
}

pub const REPLAY_COLUMNS: [&str; 20] = [
    "episode",
    "t",
    "stage",
    "t_since_tracking",
    "object_x",
    "object_y",
    "object_z",
    "tool_x",
    "tool_y",
    "tool_z",
    "left_wrist_x",
    "left_wrist_y",
    "left_wrist_z",
    "right_wrist_x",
    "right_wrist_y",
    "right_wrist_z",
    "reward_left",
    "reward_right",
    "object_attached",
    "tool_attached",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayFormat {
    Csv,
    Text,
}

impl std::str::FromStr for ReplayFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReplayFormat::Csv),
            "text" => Ok(ReplayFormat::Text),
            _ => Err(Error::Config(format!("unknown replay format `{s}` (expected csv or text)"))),
        }
    }
}

fn replay_rows(logs: &[EpisodeLog]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (e, log) in logs.iter().enumerate() {
        for s in &log.steps {
            let mut row = vec![
                e.to_string(),
                s.t.to_string(),
                format!("{:?}", s.stage).to_lowercase(),
                s.t_since_tracking.map(|t| t.to_string()).unwrap_or_default(),
            ];
            for p in [&s.object_pose, &s.tool_pose, &s.left_wrist, &s.right_wrist] {
                row.extend(p[..3].iter().map(|v| format!("{v:.5}")));
            }
            row.push(format!("{:.5}", s.rewards_left.total));
            row.push(format!("{:.5}", s.rewards_right.total));
            row.push(s.object_attached.to_string());
            row.push(s.tool_attached.to_string());
            rows.push(row);
        }
    }
    rows
}

/// Dumps an episode log as one row per step. Returns the row count.
pub fn replay(log: &Path, format: ReplayFormat, out: &mut impl Write) -> Result<usize> {
    let file = fs::File::open(log)
        .map_err(|e| Error::Config(format!("cannot open episode log {}: {e}", log.display())))?;
    let logs = EpisodeLog::read_jsonl(BufReader::new(file))?;
    let rows = replay_rows(&logs);
    match format {
        ReplayFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(REPLAY_COLUMNS)?;
            for r in &rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        ReplayFormat::Text => {
            let widths: Vec<usize> = (0..REPLAY_COLUMNS.len())
                .map(|c| {
                    rows.iter()
                        .map(|r| r[c].len())
                        .chain([REPLAY_COLUMNS[c].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: Vec<&str>, out: &mut dyn Write| -> Result<()> {
                let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
                writeln!(out, "{}", padded.join(" "))?;
                Ok(())
            };
            line(REPLAY_COLUMNS.to_vec(), out)?;
            for r in &rows {
                line(r.iter().map(String::as_str).collect(), out)?;
            }
        }
    }
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(br#"{"ppo": {"gama": 0.9}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(br#"{"seeds": {}, "extra": 1}"#), Err(Error::Config(_))));
        let c = RunConfig::from_json(br#"{"ppo": {"gamma": 0.9}}"#).unwrap();
        assert_eq!(c.ppo.gamma, 0.9);
        assert_eq!(c.dagger, DaggerConfig::default());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json(br#"{"train_fraction": 1.0}"#).is_err());
        assert!(RunConfig::from_json(br#"{"dagger": {"expert_mix_p": 1.5}}"#).is_err());
    }

    #[test]
    fn hashes_follow_their_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.dagger.future_k = 0;
        assert_eq!(a.tasks_hash(), b.tasks_hash());
        assert_eq!(a.policy_hash(), b.policy_hash());
        assert_ne!(a.student_hash(), b.student_hash());
        b.reward.toggles.disable_bonus = true;
        assert_eq!(a.tasks_hash(), b.tasks_hash());
        assert_ne!(a.policy_hash(), b.policy_hash());
        b.sim.u = 11;
        assert_ne!(a.tasks_hash(), b.tasks_hash());
        let mut c = a.clone();
        c.ppo.total_iterations += 5;
        c.dagger.total_iterations += 5;
        assert_eq!(a.policy_hash(), c.policy_hash());
        assert_eq!(a.student_hash(), c.student_hash());
    }

    #[test]
    fn demo_generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = gen_demos(a.path(), 5, &Template::ALL, 3).unwrap();
        gen_demos(b.path(), 5, &Template::ALL, 3).unwrap();
        assert_eq!(m.demos.len(), 5);
        for e in &m.demos {
            assert_eq!(fs::read(a.path().join(&e.file)).unwrap(), fs::read(b.path().join(&e.file)).unwrap());
        }
        assert!(gen_demos(a.path(), 0, &Template::ALL, 3).is_err());
    }

    #[test]
    fn tasks_build_and_reload() {
        let d = tempfile::tempdir().unwrap();
        gen_demos(&d.path().join("demos"), 8, &[Template::Pour], 1).unwrap();
        let c = RunConfig::default();
        let m = build_tasks(&d.path().join("demos"), &c, &d.path().join(TASK_MANIFEST)).unwrap();
        assert_eq!(m.tasks.len(), 8);
        assert!(m.tasks.values().all(|t| t.valid && t.split.is_some()));
        let set = load_tasks(&d.path().join(TASK_MANIFEST), &c).unwrap();
        assert_eq!(set.all_tasks().count(), 8);
        let mut other = c.clone();
        other.seeds.split = 9;
        assert!(matches!(load_tasks(&d.path().join(TASK_MANIFEST), &other), Err(Error::Integrity(_))));
    }

    #[test]
    fn replay_dumps_one_row_per_step() {
        let d = tempfile::tempdir().unwrap();
        let spec = SyntheticDemoSpec::new("r", Template::LiftHold, "cup1", "bowl1");
        let task = crate::task::synthetic_task(&spec, 1, &SceneConfig::default()).unwrap();
        let sim = SimConfig { episode_length: 12, ..SimConfig::default() };
        let env = BimanualEnv::new(vec![task], 1, SceneConfig::default(), sim, RewardWeights::default()).unwrap();
        let mut z = crate::sim::ZeroController;
        let mut z2 = crate::sim::ZeroController;
        let log = crate::sim::run_episode(&env, 0, &mut z, &mut z2).unwrap();
        let path = d.path().join("ep.jsonl");
        let mut bytes = Vec::new();
        log.write_jsonl(&mut bytes).unwrap();
        fs::write(&path, bytes).unwrap();
        for format in [ReplayFormat::Csv, ReplayFormat::Text] {
            let mut out = Vec::new();
            assert_eq!(replay(&path, format, &mut out).unwrap(), 12);
            assert_eq!(String::from_utf8(out).unwrap().lines().count(), 13);
        }
        assert!(replay(&d.path().join("missing.jsonl"), ReplayFormat::Csv, &mut Vec::new()).is_err());
    }
}
