//! Task construction from preprocessed demos, replay validation and the
//! task-set manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demo::{
    apply_z_offset, compute_grasp_center, find_reference_timestep, group_key, parse_demo,
    generate_synthetic_demo, split_tasks, DemoTrajectory, SyntheticDemoSpec, TaskSplit,
};
use crate::error::{Error, Result};
use crate::math::{sample_surface_points, Pose, PrimitiveShape, RngStream, Vec3};
use crate::reward::RewardWeights;
use crate::sim::{BimanualEnv, SimConfig, Side};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub table_height: f64,
    pub clearance: f64,
    pub delta_ref: f64,
    /// Start positions of the object (left hand) and tool (right hand) in
    /// the table plane; 0.4 m apart, 0.5 m in front of the robot base line.
    pub object_xy: [f64; 2],
    pub tool_xy: [f64; 2],
    /// Distance between the two wrist home positions.
    pub hand_spacing: f64,
    pub hand_y: f64,
    /// Wrist home height above the table.
    pub hand_height: f64,
    pub grasp_neighbors: usize,
    pub cloud_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            table_height: 0.7,
            clearance: 0.0,
            delta_ref: 0.005,
            object_xy: [-0.2, 0.5],
            tool_xy: [0.2, 0.5],
            hand_spacing: 0.68,
            hand_y: 0.3,
            hand_height: 0.2,
            grasp_neighbors: 50,
            cloud_points: 4096,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.table_height,
            self.clearance,
            self.delta_ref,
            self.hand_spacing,
            self.hand_y,
            self.hand_height,
        ]
        .iter()
        .chain(&self.object_xy)
        .chain(&self.tool_xy)
        .all(|v| v.is_finite());
        if !finite || self.delta_ref <= 0.0 || self.hand_spacing <= 0.0 {
            return Err(Error::Config(format!("invalid scene settings: {self:?}")));
        }
        if self.grasp_neighbors == 0 || self.grasp_neighbors > crate::demo::POINTS_PER_OBJECT {
            return Err(Error::Config("grasp_neighbors must lie in 1..=1024".into()));
        }
        if self.cloud_points == 0 {
            return Err(Error::Config("cloud_points must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hand_home(&self, side: Side) -> Vec3 {
        let x = 0.5 * self.hand_spacing;
        let x = match side {
            Side::Left => -x,
            Side::Right => x,
        };
        Vec3::new(x, self.hand_y, self.table_height + self.hand_height)
    }
}

/// Demo poses at one tracked step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingEntry {
    pub tool_pose: Pose,
    pub object_pose: Pose,
    pub left_wrist: Pose,
    pub right_wrist: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub demo_id: String,
    pub action_label: String,
    pub tool_name: String,
    pub object_name: String,
    pub group_id: String,
    pub one_hot_id: usize,
    pub reference_index: usize,
    pub tool_reference_pose: Pose,
    pub object_reference_pose: Pose,
    pub tracking: Vec<TrackingEntry>,
    pub grasp_center_tool: Vec3,
    pub grasp_center_object: Vec3,
    pub initial_tool_pose: Pose,
    pub initial_object_pose: Pose,
    pub tool_shape: PrimitiveShape,
    pub object_shape: PrimitiveShape,
    pub tool_points: Vec<Vec3>,
    pub object_points: Vec<Vec3>,
    /// Pre-sampled canonical clouds for the student's observations.
    pub tool_cloud: Vec<Vec3>,
    pub object_cloud: Vec<Vec3>,
}

impl TaskSpec {
    pub fn l_track(&self) -> usize {
        self.tracking.len()
    }

    pub fn reference_pose(&self, side: Side) -> Pose {
        match side {
            Side::Left => self.object_reference_pose,
            Side::Right => self.tool_reference_pose,
        }
    }

    pub fn initial_pose(&self, side: Side) -> Pose {
        match side {
            Side::Left => self.initial_object_pose,
            Side::Right => self.initial_tool_pose,
        }
    }

    pub fn grasp_center(&self, side: Side) -> Vec3 {
        match side {
            Side::Left => self.grasp_center_object,
            Side::Right => self.grasp_center_tool,
        }
    }

    pub fn shape(&self, side: Side) -> &PrimitiveShape {
        match side {
            Side::Left => &self.object_shape,
            Side::Right => &self.tool_shape,
        }
    }

    pub fn points(&self, side: Side) -> &[Vec3] {
        match side {
            Side::Left => &self.object_points,
            Side::Right => &self.tool_points,
        }
    }

    pub fn cloud(&self, side: Side) -> &[Vec3] {
        match side {
            Side::Left => &self.object_cloud,
            Side::Right => &self.tool_cloud,
        }
    }

    pub fn tracked_pose(&self, side: Side, i: usize) -> Pose {
        let e = &self.tracking[i.min(self.tracking.len() - 1)];
        match side {
            Side::Left => e.object_pose,
            Side::Right => e.tool_pose,
        }
    }

    pub fn tracked_wrist(&self, side: Side, i: usize) -> Pose {
        let e = &self.tracking[i.min(self.tracking.len() - 1)];
        match side {
            Side::Left => e.left_wrist,
            Side::Right => e.right_wrist,
        }
    }

    pub fn tracked_positions(&self, side: Side) -> Vec<Vec3> {
        (0..self.tracking.len())
            .map(|i| self.tracked_pose(side, i).position)
            .collect()
    }
}

fn shape_seed(shape: &PrimitiveShape) -> u64 {
    let bytes = serde_json::to_vec(shape).expect("shape serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Canonical student cloud for a shape. Seeded by the shape descriptor, so
/// equal shapes get equal clouds.
pub fn presampled_cloud(shape: &PrimitiveShape, n: usize) -> Result<Vec<Vec3>> {
    sample_surface_points(shape, n, &mut RngStream::new(shape_seed(shape), 0x636c6f7564))
}

fn resting_pose(shape: &PrimitiveShape, first: &Pose, xy: [f64; 2], table: f64, clearance: f64) -> Pose {
    let q = first.orientation.yaw_only();
    Pose::new(
        Vec3::new(xy[0], xy[1], table + clearance + shape.depth_below_origin(q)),
        q,
    )
}

/// Builds the task for a demo that already had its z-offset applied.
pub fn build_task(demo: &DemoTrajectory, scene: &SceneConfig) -> Result<TaskSpec> {
    let l = demo.steps.len();
    if l < 2 {
        return Err(Error::TooShort { len: l });
    }
    let r = find_reference_timestep(demo, scene.delta_ref);
    if r + 1 >= l {
        return Err(Error::DegenerateTask(demo.demo_id.clone()));
    }
    let s = &demo.steps[r];
    let world = |pose: &Pose, pts: &[Vec3]| -> Vec<Vec3> {
        pts.iter().map(|p| pose.transform_point(*p)).collect()
    };
    let grasp_center_tool = compute_grasp_center(
        &world(&s.tool_pose, &demo.tool_points),
        s.right_wrist.position,
        &s.right_fingertips,
        scene.grasp_neighbors,
    )?;
    let grasp_center_object = compute_grasp_center(
        &world(&s.object_pose, &demo.object_points),
        s.left_wrist.position,
        &s.left_fingertips,
        scene.grasp_neighbors,
    )?;
    let first = &demo.steps[0];
    Ok(TaskSpec {
        task_id: demo.demo_id.clone(),
        demo_id: demo.demo_id.clone(),
        action_label: demo.action_label.clone(),
        tool_name: demo.tool_name.clone(),
        object_name: demo.object_name.clone(),
        group_id: group_key(&demo.action_label, &demo.tool_name, &demo.object_name),
        one_hot_id: 0,
        reference_index: r,
        tool_reference_pose: s.tool_pose,
        object_reference_pose: s.object_pose,
        tracking: demo.steps[r..]
            .iter()
            .map(|d| TrackingEntry {
                tool_pose: d.tool_pose,
                object_pose: d.object_pose,
                left_wrist: d.left_wrist,
                right_wrist: d.right_wrist,
            })
            .collect(),
        grasp_center_tool,
        grasp_center_object,
        initial_tool_pose: resting_pose(
            &demo.tool_shape,
            &first.tool_pose,
            scene.tool_xy,
            scene.table_height,
            scene.clearance,
        ),
        initial_object_pose: resting_pose(
            &demo.object_shape,
            &first.object_pose,
            scene.object_xy,
            scene.table_height,
            scene.clearance,
        ),
        tool_shape: demo.tool_shape,
        object_shape: demo.object_shape,
        tool_points: demo.tool_points.clone(),
        object_points: demo.object_points.clone(),
        tool_cloud: presampled_cloud(&demo.tool_shape, scene.cloud_points)?,
        object_cloud: presampled_cloud(&demo.object_shape, scene.cloud_points)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub valid: bool,
    /// Demo step index of the first failure.
    pub first_failing_step: Option<usize>,
    /// Offending distance in meters at that step.
    pub distance: Option<f64>,
    pub reason: Option<String>,
}

/// Scripted teleport replay: both objects start at their reference poses,
/// the hands are placed on the demo wrist poses with closed fingers and held
/// for `u` steps, then follow the tracked wrist poses at `f` simulation
/// steps per demo step.
pub fn replay_validate(
    task: &TaskSpec,
    scene: &SceneConfig,
    sim: &SimConfig,
    weights: &RewardWeights,
) -> Result<ReplayReport> {
    let mut sim = sim.clone();
    let hold = sim.u;
    let f = weights.f;
    let track_steps = (task.l_track() - 1) * f + 1;
    sim.episode_length = hold + track_steps + 1;
    let env = BimanualEnv::new(vec![task.clone()], 1, scene.clone(), sim, *weights)?;
    let mut state = env.reset(0);
    for side in Side::BOTH {
        let o = &mut state.objects[side.index()];
        o.pose = task.reference_pose(side);
    }
    let closed = [1.0; crate::demo::FINGERTIPS];
    let wrists = |i: usize| [task.tracked_wrist(Side::Left, i), task.tracked_wrist(Side::Right, i)];
    let fail = |step: usize, d: f64, why: String| ReplayReport {
        valid: false,
        first_failing_step: Some(step),
        distance: Some(d),
        reason: Some(why),
    };

    env.teleport(&mut state, wrists(0), [closed, closed])?;
    for side in Side::BOTH {
        if state.objects[side.index()].attachment.is_none() {
            let gc = env.grasp_center_world(&state, side);
            let d = state.hands[side.index()].wrist.position.distance(gc);
            return Ok(fail(
                task.reference_index,
                d,
                format!("{} hand cannot grasp at the reference step", side.name()),
            ));
        }
    }
    loop {
        let i = match state.t_since_tracking {
            Some(t) => crate::reward::tracking_index(t, f, task.l_track()),
            None => 0,
        };
        for side in Side::BOTH {
            let target = task.tracked_pose(side, i).position;
            let d = state.objects[side.index()].pose.position.distance(target);
            if d > weights.eps_succ {
                return Ok(fail(
                    task.reference_index + i,
                    d,
                    format!("{} left the demo path", side.object_name()),
                ));
            }
        }
        if let Some(t) = state.t_since_tracking {
            if t + 1 >= track_steps {
                break;
            }
        }
        if state.done {
            return Ok(fail(
                task.reference_index,
                0.0,
                "alignment window never completed".into(),
            ));
        }
        let next = match state.t_since_tracking {
            Some(t) => crate::reward::tracking_index(t + 1, f, task.l_track()),
            None => 0,
        };
        env.teleport(&mut state, wrists(next), [closed, closed])?;
    }
    Ok(ReplayReport {
        valid: true,
        first_failing_step: None,
        distance: None,
        reason: None,
    })
}

/// Generates a synthetic demo and turns it into a task in one go.
pub fn synthetic_task(spec: &SyntheticDemoSpec, seed: u64, scene: &SceneConfig) -> Result<TaskSpec> {
    let d = generate_synthetic_demo(spec, &mut RngStream::new(seed, 0))?;
    build_task(&apply_z_offset(&d, scene.table_height, scene.clearance), scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub group_id: String,
    pub tasks: Vec<TaskSpec>,
}

/// Entry of the dataset manifest written next to the demo files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub demos: Vec<DatasetEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifestEntry {
    pub demo_file: String,
    pub group_id: String,
    pub split: Option<String>,
    pub valid: bool,
    pub one_hot_id: Option<usize>,
    pub content_hash: String,
    pub report: ReplayReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub dataset_dir: String,
    pub config_hash: String,
    pub seed: u64,
    pub tasks: BTreeMap<String, TaskManifestEntry>,
    pub groups: BTreeMap<String, Vec<String>>,
    pub split: TaskSplit,
    pub discarded: Vec<String>,
}

impl TaskManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[derive(Clone, Debug)]
pub struct TaskSet {
    pub groups: Vec<TaskGroup>,
    pub split: TaskSplit,
    pub manifest: TaskManifest,
}

impl TaskSet {
    pub fn group(&self, id: &str) -> Option<&TaskGroup> {
        self.groups.iter().find(|g| g.group_id == id)
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.groups.iter().flat_map(|g| g.tasks.iter())
    }
}

fn load_dataset(dir: &Path) -> Result<Vec<(DatasetEntry, Vec<u8>)>> {
    let path = dir.join(DATASET_MANIFEST);
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path).map_err(|e| {
        Error::Config(format!("cannot read dataset manifest {}: {e}", path.display()))
    })?)?;
    manifest
        .demos
        .into_iter()
        .map(|e| {
            let bytes = fs::read(dir.join(&e.file))?;
            Ok((e, bytes))
        })
        .collect()
}

/// Parses, preprocesses, builds and replay-validates every demo in a
/// dataset directory, then groups and splits the valid tasks.
pub fn build_task_set(
    dir: &Path,
    scene: &SceneConfig,
    sim: &SimConfig,
    weights: &RewardWeights,
    train_fraction: f64,
    seed: u64,
    config_hash: &str,
) -> Result<TaskSet> {
    let files = load_dataset(dir)?;
    let mut entries: BTreeMap<String, TaskManifestEntry> = BTreeMap::new();
    let mut valid: Vec<(DemoTrajectory, TaskSpec)> = Vec::new();
    let mut discarded = Vec::new();
    for (entry, bytes) in files {
        let content_hash = hex::encode(Sha256::digest(&bytes));
        let outcome = parse_demo(&bytes).and_then(|d| {
            let d = apply_z_offset(&d, scene.table_height, scene.clearance);
            let task = build_task(&d, scene)?;
            let report = replay_validate(&task, scene, sim, weights)?;
            Ok((d, task, report))
        });
        let (group_id, report) = match outcome {
            Ok((d, task, report)) => {
                let g = task.group_id.clone();
                if entries.contains_key(&task.task_id) {
                    return Err(Error::Config(format!("duplicate demo id `{}`", task.task_id)));
                }
                if report.valid {
                    valid.push((d, task));
                }
                (g, report)
            }
            Err(e) if e.is_validation() => (
                String::new(),
                ReplayReport {
                    valid: false,
                    first_failing_step: None,
                    distance: None,
                    reason: Some(e.to_string()),
                },
            ),
            Err(e) => return Err(e),
        };
        if !report.valid {
            discarded.push(entry.id.clone());
        }
        entries.insert(
            entry.id.clone(),
            TaskManifestEntry {
                demo_file: entry.file.clone(),
                group_id,
                split: None,
                valid: report.valid,
                one_hot_id: None,
                content_hash,
                report,
            },
        );
    }
    if valid.is_empty() {
        return Err(Error::Config(format!(
            "no valid tasks in {} ({} discarded)",
            dir.display(),
            discarded.len()
        )));
    }
    let split = if valid.len() >= 2 {
        let demos: Vec<DemoTrajectory> = valid.iter().map(|(d, _)| d.clone()).collect();
        split_tasks(&demos, train_fraction, &mut RngStream::new(seed, 0x73706c6974))?
    } else {
        TaskSplit {
            train: vec![valid[0].1.task_id.clone()],
            ..Default::default()
        }
    };
    let mut by_group: BTreeMap<String, Vec<TaskSpec>> = BTreeMap::new();
    for (_, t) in valid {
        by_group.entry(t.group_id.clone()).or_default().push(t);
    }
    let mut groups = Vec::new();
    let mut group_index = BTreeMap::new();
    for (gid, mut tasks) in by_group {
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        for (i, t) in tasks.iter_mut().enumerate() {
            t.one_hot_id = i;
            let e = entries.get_mut(&t.task_id).expect("entry recorded");
            e.one_hot_id = Some(i);
            e.split = split.label_of(&t.task_id).map(str::to_string);
        }
        group_index.insert(gid.clone(), tasks.iter().map(|t| t.task_id.clone()).collect());
        groups.push(TaskGroup { group_id: gid, tasks });
    }
    discarded.sort();
    let manifest = TaskManifest {
        dataset_dir: dir.display().to_string(),
        config_hash: config_hash.to_string(),
        seed,
        tasks: entries,
        groups: group_index,
        split: split.clone(),
        discarded,
    };
    Ok(TaskSet {
        groups,
        split,
        manifest,
    })
}

/// Rebuilds the task set a manifest describes, checking demo content hashes.
pub fn load_task_set(manifest: &TaskManifest, scene: &SceneConfig) -> Result<TaskSet> {
    let dir = PathBuf::from(&manifest.dataset_dir);
    let mut groups = Vec::new();
    for (gid, ids) in &manifest.groups {
        let mut tasks = Vec::new();
        for id in ids {
            let entry = manifest
                .tasks
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("manifest lacks task `{id}`")))?;
            let bytes = fs::read(dir.join(&entry.demo_file))?;
            if hex::encode(Sha256::digest(&bytes)) != entry.content_hash {
                return Err(Error::Integrity(format!(
                    "demo file for `{id}` changed since the manifest was built"
                )));
            }
            let demo = apply_z_offset(&parse_demo(&bytes)?, scene.table_height, scene.clearance);
            let mut task = build_task(&demo, scene)?;
            task.one_hot_id = entry.one_hot_id.unwrap_or(0);
            tasks.push(task);
        }
        groups.push(TaskGroup {
            group_id: gid.clone(),
            tasks,
        });
    }
    Ok(TaskSet {
        groups,
        split: manifest.split.clone(),
        manifest: manifest.clone(),
    })
}
