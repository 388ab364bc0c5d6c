//! Quasi-static two-hand environment. Hands are free-floating wrists with
//! four closing fingertips; an object rigidly follows its paired hand once
//! the hand is close to the grasp center with the fingers closed.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::demo::{fingertip_positions, FINGERTIPS};
use crate::error::{Error, Result};
use crate::math::{Pose, RngStream, UnitQuat, Vec3};
use crate::reward::{total_reward, tracking_index, RewardBreakdown, RewardWeights, SideObservation};
use crate::task::{SceneConfig, TaskSpec};

pub const ACTION_DIM: usize = 10;
/// Teacher observation width without the one-hot task id.
pub const TEACHER_BASE_WIDTH: usize = 56;
pub const PROPRIO_WIDTH: usize = 43;

/// Left hand holds the object, right hand wields the tool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn object_name(self) -> &'static str {
        match self {
            Side::Left => "object",
            Side::Right => "tool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    /// Episode length T in steps.
    pub episode_length: usize,
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_closure: f64,
    pub c_grasp: f64,
    pub c_release: f64,
    pub fall_speed: f64,
    /// Consecutive in-threshold steps that complete alignment.
    pub u: usize,
    /// Wrist workspace: |x| bound, y range, height range above the table.
    pub workspace_x: f64,
    pub workspace_y: [f64; 2],
    pub workspace_height: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0 / 60.0,
            episode_length: 1000,
            max_translation: 0.02,
            max_rotation: 0.05,
            max_closure: 0.05,
            c_grasp: 0.5,
            c_release: 0.3,
            fall_speed: 0.5,
            u: 10,
            workspace_x: 0.7,
            workspace_y: [-0.1, 1.0],
            workspace_height: 0.8,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.dt,
            self.max_translation,
            self.max_rotation,
            self.max_closure,
            self.fall_speed,
            self.workspace_x,
            self.workspace_height,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("sim settings must be positive: {self:?}")));
        }
        if self.episode_length == 0 || self.u == 0 {
            return Err(Error::Config("episode_length and u must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.c_release)
            || !(0.0..=1.0).contains(&self.c_grasp)
            || self.c_release > self.c_grasp
        {
            return Err(Error::Config("need 0 <= c_release <= c_grasp <= 1".into()));
        }
        if self.workspace_y[0] >= self.workspace_y[1] {
            return Err(Error::Config("workspace_y must be ascending".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub wrist: Pose,
    pub lin_vel: Vec3,
    pub ang_vel: Vec3,
    pub closure: [f64; FINGERTIPS],
    pub closure_vel: [f64; FINGERTIPS],
}

impl HandState {
    pub fn at(wrist: Pose) -> Self {
        HandState {
            wrist,
            lin_vel: Vec3::ZERO,
            ang_vel: Vec3::ZERO,
            closure: [0.0; FINGERTIPS],
            closure_vel: [0.0; FINGERTIPS],
        }
    }

    pub fn fingertips(&self) -> Vec<Vec3> {
        fingertip_positions(&self.wrist, &self.closure)
    }

    pub fn mean_closure(&self) -> f64 {
        self.closure.iter().sum::<f64>() / FINGERTIPS as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attachment {
    #[default]
    None,
    Left,
    Right,
}

impl Attachment {
    pub fn is_none(self) -> bool {
        self == Attachment::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub pose: Pose,
    pub lin_vel: Vec3,
    pub ang_vel: Vec3,
    pub attachment: Attachment,
    /// Object pose in the holding wrist's frame, fixed at attach time.
    pub attach_offset: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Aligning,
    Tracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Index of the task inside the environment's task list.
    pub task: usize,
    pub t: usize,
    pub stage: Stage,
    pub consec_success: usize,
    pub t_since_tracking: Option<usize>,
    pub hands: [HandState; 2],
    /// Indexed by side: the object (left) then the tool (right).
    pub objects: [ObjectState; 2],
    pub prev_action: [[f64; ACTION_DIM]; 2],
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub rewards: [RewardBreakdown; 2],
    pub stage: Stage,
    pub done: bool,
}

/// `true` iff the hand can take hold of the unattached object: wrist and
/// fingertips near the grasp center and mean closure at least `c_grasp`.
pub fn attach_check(
    hand: &HandState,
    obj: &ObjectState,
    grasp_center: Vec3,
    weights: &RewardWeights,
    sim: &SimConfig,
) -> bool {
    if !obj.attachment.is_none() {
        return false;
    }
    crate::reward::within_grasp_reach(
        hand.wrist.position,
        &hand.fingertips(),
        grasp_center,
        weights.lambda_w,
        weights.lambda_ft,
    ) && hand.mean_closure() >= sim.c_grasp
}

/// Per-task constants derived once.
#[derive(Clone, Debug)]
struct SideConst {
    gc_local: Vec3,
    geo_local: Vec3,
    reference: Pose,
    initial: Pose,
    demo_positions: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct BimanualEnv {
    pub tasks: Vec<TaskSpec>,
    pub group_size: usize,
    pub scene: SceneConfig,
    pub sim: SimConfig,
    pub weights: RewardWeights,
    consts: Vec<[SideConst; 2]>,
}

impl BimanualEnv {
    pub fn new(
        tasks: Vec<TaskSpec>,
        group_size: usize,
        scene: SceneConfig,
        sim: SimConfig,
        weights: RewardWeights,
    ) -> Result<Self> {
        scene.validate()?;
        sim.validate()?;
        weights.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("environment needs at least one task".into()));
        }
        for t in &tasks {
            if t.one_hot_id >= group_size {
                return Err(Error::Config(format!(
                    "task `{}` has one-hot id {} outside a group of {group_size}",
                    t.task_id, t.one_hot_id
                )));
            }
            if t.tracking.is_empty() {
                return Err(Error::DegenerateTask(t.task_id.clone()));
            }
        }
        let consts = tasks
            .iter()
            .map(|t| {
                Side::BOTH.map(|s| {
                    let reference = t.reference_pose(s);
                    SideConst {
                        gc_local: reference.inverse().transform_point(t.grasp_center(s)),
                        geo_local: Vec3::mean(t.points(s)),
                        reference,
                        initial: t.initial_pose(s),
                        demo_positions: t.tracked_positions(s),
                    }
                })
            })
            .collect();
        Ok(BimanualEnv {
            tasks,
            group_size,
            scene,
            sim,
            weights,
            consts,
        })
    }

    pub fn teacher_obs_width(&self) -> usize {
        TEACHER_BASE_WIDTH + self.group_size
    }

    pub fn task(&self, state: &EnvState) -> &TaskSpec {
        &self.tasks[state.task]
    }

    pub fn reset(&self, task: usize) -> EnvState {
        let c = &self.consts[task];
        let hand = |s: Side| HandState::at(Pose::from_translation(self.scene.hand_home(s)));
        let obj = |s: Side| ObjectState {
            pose: c[s.index()].initial,
            lin_vel: Vec3::ZERO,
            ang_vel: Vec3::ZERO,
            attachment: Attachment::None,
            attach_offset: Pose::IDENTITY,
        };
        EnvState {
            task,
            t: 0,
            stage: Stage::Aligning,
            consec_success: 0,
            t_since_tracking: None,
            hands: [hand(Side::Left), hand(Side::Right)],
            objects: [obj(Side::Left), obj(Side::Right)],
            prev_action: [[0.0; ACTION_DIM]; 2],
            done: false,
        }
    }

    pub fn grasp_center_world(&self, state: &EnvState, side: Side) -> Vec3 {
        let c = &self.consts[state.task][side.index()];
        state.objects[side.index()].pose.transform_point(c.gc_local)
    }

    pub fn geometric_center_world(&self, state: &EnvState, side: Side) -> Vec3 {
        let c = &self.consts[state.task][side.index()];
        state.objects[side.index()].pose.transform_point(c.geo_local)
    }

    pub fn reference_pose(&self, state: &EnvState, side: Side) -> Pose {
        self.consts[state.task][side.index()].reference
    }

    /// Demo index the tracking clock currently points at (0 while aligning).
    pub fn tracking_index(&self, state: &EnvState) -> usize {
        let len = self.tasks[state.task].l_track();
        state
            .t_since_tracking
            .map(|t| tracking_index(t, self.weights.f, len))
            .unwrap_or(0)
    }

    fn clamp_wrist(&self, p: Vec3) -> Vec3 {
        let s = &self.sim;
        let table = self.scene.table_height;
        Vec3::new(
            p.x.clamp(-s.workspace_x, s.workspace_x),
            p.y.clamp(s.workspace_y[0], s.workspace_y[1]),
            p.z.clamp(table, table + s.workspace_height),
        )
    }

    /// Advances one step under normalized actions; components are clamped
    /// to `[−1, 1]`.
    pub fn step(&self, state: &mut EnvState, left: &[f64], right: &[f64]) -> Result<StepInfo> {
        if state.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if left.len() != ACTION_DIM || right.len() != ACTION_DIM {
            return Err(Error::Contract(format!(
                "actions must have {ACTION_DIM} components, got {} and {}",
                left.len(),
                right.len()
            )));
        }
        let before = state.hands.clone();
        for (i, raw) in [left, right].into_iter().enumerate() {
            let mut a = [0.0; ACTION_DIM];
            for (dst, v) in a.iter_mut().zip(raw) {
                *dst = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            }
            let hand = &mut state.hands[i];
            let dp = Vec3::new(a[0], a[1], a[2]) * self.sim.max_translation;
            let dr = Vec3::new(a[3], a[4], a[5]) * self.sim.max_rotation;
            hand.wrist.position = self.clamp_wrist(hand.wrist.position + dp);
            hand.wrist.orientation = UnitQuat::from_rotation_vector(dr).mul(hand.wrist.orientation);
            for k in 0..FINGERTIPS {
                hand.closure[k] = (hand.closure[k] + a[6 + k] * self.sim.max_closure).clamp(0.0, 1.0);
            }
            state.prev_action[i] = a;
        }
        Ok(self.advance(state, &before))
    }

    /// Places both wrists and closures directly, then advances one step as
    /// [`step`](Self::step) would. Used by scripted replays.
    pub fn teleport(
        &self,
        state: &mut EnvState,
        wrists: [Pose; 2],
        closures: [[f64; FINGERTIPS]; 2],
    ) -> Result<StepInfo> {
        if state.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let before = state.hands.clone();
        for i in 0..2 {
            state.hands[i].wrist = wrists[i];
            state.hands[i].closure = closures[i].map(|c| c.clamp(0.0, 1.0));
            state.prev_action[i] = [0.0; ACTION_DIM];
        }
        Ok(self.advance(state, &before))
    }

    fn advance(&self, state: &mut EnvState, before: &[HandState; 2]) -> StepInfo {
        let dt = self.sim.dt;
        for i in 0..2 {
            let (old, hand) = (&before[i], &mut state.hands[i]);
            hand.lin_vel = (hand.wrist.position - old.wrist.position) / dt;
            hand.ang_vel = hand
                .wrist
                .orientation
                .mul(old.wrist.orientation.conjugate())
                .to_rotation_vector()
                / dt;
            for k in 0..FINGERTIPS {
                hand.closure_vel[k] = (hand.closure[k] - old.closure[k]) / dt;
            }
        }

        let old_poses = [state.objects[0].pose, state.objects[1].pose];
        for side in Side::BOTH {
            let i = side.index();
            let holder = match side {
                Side::Left => Attachment::Left,
                Side::Right => Attachment::Right,
            };
            let hand = &state.hands[i];
            let obj = &state.objects[i];
            if obj.attachment == holder && hand.mean_closure() < self.sim.c_release {
                state.objects[i].attachment = Attachment::None;
            } else if obj.attachment.is_none() {
                let gc = self.grasp_center_world(state, side);
                if attach_check(hand, obj, gc, &self.weights, &self.sim) {
                    let offset = hand.wrist.inverse().compose(&obj.pose);
                    let obj = &mut state.objects[i];
                    obj.attachment = holder;
                    obj.attach_offset = offset;
                }
            }
            let wrist = state.hands[i].wrist;
            let table = self.scene.table_height;
            let shape = *self.tasks[state.task].shape(side);
            let obj = &mut state.objects[i];
            if obj.attachment.is_none() {
                let rest = table + shape.depth_below_origin(obj.pose.orientation);
                let z = obj.pose.position.z;
                obj.pose.position.z = if z > rest {
                    (z - self.sim.fall_speed * dt).max(rest)
                } else {
                    rest
                };
            } else {
                obj.pose = wrist.compose(&obj.attach_offset);
            }
            obj.lin_vel = (obj.pose.position - old_poses[i].position) / dt;
            obj.ang_vel = obj
                .pose
                .orientation
                .mul(old_poses[i].orientation.conjugate())
                .to_rotation_vector()
                / dt;
        }

        match state.stage {
            Stage::Tracking => {
                state.t_since_tracking = state.t_since_tracking.map(|t| t + 1);
            }
            Stage::Aligning => {
                let eps = self.weights.eps_succ;
                let c = &self.consts[state.task];
                let aligned = Side::BOTH.iter().all(|s| {
                    let i = s.index();
                    state.objects[i].pose.position.distance(c[i].reference.position) <= eps
                });
                state.consec_success = if aligned { state.consec_success + 1 } else { 0 };
                if state.consec_success >= self.sim.u {
                    state.stage = Stage::Tracking;
                    state.t_since_tracking = Some(0);
                }
            }
        }

        let rewards = Side::BOTH.map(|s| self.side_reward(state, s));
        state.t += 1;
        state.done = state.t >= self.sim.episode_length;
        StepInfo {
            rewards,
            stage: state.stage,
            done: state.done,
        }
    }

    pub fn side_reward(&self, state: &EnvState, side: Side) -> RewardBreakdown {
        let i = side.index();
        let c = &self.consts[state.task][i];
        let hand = &state.hands[i];
        let tips = hand.fingertips();
        let obs = SideObservation {
            wrist: hand.wrist.position,
            fingertips: &tips,
            grasp_center: self.grasp_center_world(state, side),
            geometric_center: self.geometric_center_world(state, side),
            object: state.objects[i].pose,
            reference: c.reference,
            initial_position: c.initial.position,
            t_since_tracking: state.t_since_tracking,
            demo_positions: &c.demo_positions,
        };
        total_reward(&obs, &self.weights)
    }

    fn push_proprio(&self, state: &EnvState, side: Side, out: &mut Vec<f64>) {
        let hand = &state.hands[side.index()];
        push_pose(out, &hand.wrist);
        out.extend(hand.lin_vel.to_array());
        out.extend(hand.ang_vel.to_array());
        out.extend(hand.closure);
        out.extend(hand.closure_vel);
        for p in hand.fingertips() {
            out.extend(p.to_array());
        }
    }

    /// Appends the teacher observation: wrist pose, wrist velocities,
    /// closure and closure velocity, fingertips, paired object pose and
    /// velocities, one-hot task id, previous own action.
    pub fn teacher_obs(&self, state: &EnvState, side: Side, out: &mut Vec<f64>) {
        self.push_proprio(state, side, out);
        let obj = &state.objects[side.index()];
        push_pose(out, &obj.pose);
        out.extend(obj.lin_vel.to_array());
        out.extend(obj.ang_vel.to_array());
        let id = self.tasks[state.task].one_hot_id;
        out.extend((0..self.group_size).map(|k| if k == id { 1.0 } else { 0.0 }));
        out.extend(state.prev_action[side.index()]);
    }

    /// Appends the student observation: proprioception (the teacher layout
    /// without object state and task id), `points` noisy cloud points of the
    /// paired object in the world frame, and `k` future demo positions.
    #[allow(clippy::too_many_arguments)]
    pub fn student_obs(
        &self,
        state: &EnvState,
        side: Side,
        points: usize,
        k: usize,
        noise_std: f64,
        rng: &mut RngStream,
        proprio: &mut Vec<f64>,
        cloud: &mut Vec<f64>,
        future: &mut Vec<f64>,
    ) {
        let mark = proprio.len();
        self.push_proprio(state, side, proprio);
        proprio.extend(state.prev_action[side.index()]);
        debug_assert_eq!(proprio.len() - mark, PROPRIO_WIDTH);

        let task = &self.tasks[state.task];
        let pose = state.objects[side.index()].pose;
        self.sample_cloud(state.task, side, &pose, points, noise_std, rng, cloud);
        let base = match state.t_since_tracking {
            Some(_) => self.tracking_index(state) + 1,
            None => 0,
        };
        for j in 0..k {
            future.extend(task.tracked_pose(side, base + j).position.to_array());
        }
    }
}

impl BimanualEnv {
    /// Appends `points` of the task's pre-sampled cloud for `side`, drawn
    /// without replacement, posed at `pose`, with isotropic noise.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_cloud(
        &self,
        task: usize,
        side: Side,
        pose: &Pose,
        points: usize,
        noise_std: f64,
        rng: &mut RngStream,
        cloud: &mut Vec<f64>,
    ) {
        let src = self.tasks[task].cloud(side);
        for idx in rng.sample_indices(src.len(), points.min(src.len())) {
            let p = pose.transform_point(src[idx]);
            if noise_std > 0.0 {
                cloud.extend([
                    p.x + noise_std * rng.normal(),
                    p.y + noise_std * rng.normal(),
                    p.z + noise_std * rng.normal(),
                ]);
            } else {
                cloud.extend(p.to_array());
            }
        }
    }
}

fn push_pose(out: &mut Vec<f64>, pose: &Pose) {
    let q = pose.orientation.canonical();
    out.extend([pose.position.x, pose.position.y, pose.position.z, q.w, q.x, q.y, q.z]);
}

/// Produces one hand's action from the environment state.
pub trait Controller {
    /// Observation width the controller expects, if it reads observations.
    fn obs_width(&self) -> Option<usize> {
        None
    }

    fn act(&mut self, env: &BimanualEnv, state: &EnvState, side: Side) -> Result<[f64; ACTION_DIM]>;
}

/// Always outputs zeros.
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, _: &BimanualEnv, _: &EnvState, _: Side) -> Result<[f64; ACTION_DIM]> {
        Ok([0.0; ACTION_DIM])
    }
}

/// Hand-written replay of the demo: reach the demonstrated grasp relative to
/// the current object pose, close, carry to the reference wrist pose, then
/// follow the demo wrists along the tracking clock.
pub struct ScriptedController;

impl ScriptedController {
    pub fn pose_action(env: &BimanualEnv, wrist: &Pose, target: &Pose, close: bool) -> [f64; ACTION_DIM] {
        let s = &env.sim;
        let dp = (target.position - wrist.position) / s.max_translation;
        let dr = target
            .orientation
            .mul(wrist.orientation.conjugate())
            .to_rotation_vector()
            / s.max_rotation;
        let c = if close { 1.0 } else { -1.0 };
        let mut a = [c; ACTION_DIM];
        for (k, v) in dp.to_array().into_iter().chain(dr.to_array()).enumerate() {
            a[k] = v.clamp(-1.0, 1.0);
        }
        a
    }
}

impl Controller for ScriptedController {
    fn act(&mut self, env: &BimanualEnv, state: &EnvState, side: Side) -> Result<[f64; ACTION_DIM]> {
        let task = env.task(state);
        let i = side.index();
        let hand = &state.hands[i];
        let obj = &state.objects[i];
        let ref_wrist = task.tracked_wrist(side, 0);
        if obj.attachment.is_none() {
            let rel = task.reference_pose(side).inverse().compose(&ref_wrist);
            let target = obj.pose.compose(&rel);
            let near = hand.wrist.position.distance(target.position) < 0.01;
            return Ok(Self::pose_action(env, &hand.wrist, &target, near));
        }
        let target = match state.t_since_tracking {
            None => ref_wrist,
            Some(t) => task.tracked_wrist(side, tracking_index(t + 1, env.weights.f, task.l_track())),
        };
        Ok(Self::pose_action(env, &hand.wrist, &target, true))
    }
}

/// Episode metadata written as the first JSON line of a log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub task_id: String,
    pub episode_length: usize,
    pub u: usize,
    pub f: usize,
    pub tool_reference: Vec3,
    pub object_reference: Vec3,
    pub tracking_tool: Vec<Vec3>,
    pub tracking_object: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub stage: Stage,
    pub t_since_tracking: Option<usize>,
    pub tool_pose: [f64; 7],
    pub object_pose: [f64; 7],
    pub left_wrist: [f64; 7],
    pub right_wrist: [f64; 7],
    pub rewards_left: RewardBreakdown,
    pub rewards_right: RewardBreakdown,
    pub object_attached: bool,
    pub tool_attached: bool,
}

impl StepRecord {
    pub fn tool_position(&self) -> Vec3 {
        Vec3::from_slice(&self.tool_pose[..3])
    }

    pub fn object_position(&self) -> Vec3 {
        Vec3::from_slice(&self.object_pose[..3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LogLine {
    Episode(EpisodeHeader),
    Step(StepRecord),
}

impl EpisodeLog {
    pub fn new(env: &BimanualEnv, task: usize) -> Self {
        let t = &env.tasks[task];
        EpisodeLog {
            header: EpisodeHeader {
                task_id: t.task_id.clone(),
                episode_length: env.sim.episode_length,
                u: env.sim.u,
                f: env.weights.f,
                tool_reference: t.tool_reference_pose.position,
                object_reference: t.object_reference_pose.position,
                tracking_tool: t.tracked_positions(Side::Right),
                tracking_object: t.tracked_positions(Side::Left),
            },
            steps: Vec::new(),
        }
    }

    pub fn record(&mut self, state: &EnvState, info: &StepInfo) {
        self.steps.push(StepRecord {
            t: state.t,
            stage: state.stage,
            t_since_tracking: state.t_since_tracking,
            tool_pose: state.objects[1].pose.to_array(),
            object_pose: state.objects[0].pose.to_array(),
            left_wrist: state.hands[0].wrist.to_array(),
            right_wrist: state.hands[1].wrist.to_array(),
            rewards_left: info.rewards[0],
            rewards_right: info.rewards[1],
            object_attached: !state.objects[0].attachment.is_none(),
            tool_attached: !state.objects[1].attachment.is_none(),
        });
    }

    /// Sim-step index at which the tracking clock started, if it did.
    pub fn tracking_origin(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.t_since_tracking == Some(0))
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *w, &LogLine::Episode(self.header.clone()))?;
        w.write_all(b"\n")?;
        for s in &self.steps {
            serde_json::to_writer(&mut *w, &LogLine::Step(s.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads every episode in a JSON-lines stream.
    pub fn read_jsonl(r: impl BufRead) -> Result<Vec<EpisodeLog>> {
        let mut out: Vec<EpisodeLog> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("line {}", n + 1), e.to_string()))?;
            match parsed {
                LogLine::Episode(h) => out.push(EpisodeLog {
                    header: h,
                    steps: Vec::new(),
                }),
                LogLine::Step(s) => out
                    .last_mut()
                    .ok_or_else(|| Error::parse(format!("line {}", n + 1), "step before episode header"))?
                    .steps
                    .push(s),
            }
        }
        Ok(out)
    }
}

/// Runs one full episode of `task` with a controller per hand.
pub fn run_episode(
    env: &BimanualEnv,
    task: usize,
    left: &mut dyn Controller,
    right: &mut dyn Controller,
) -> Result<EpisodeLog> {
    let width = env.teacher_obs_width();
    for (c, side) in [(&*left, Side::Left), (&*right, Side::Right)] {
        if let Some(w) = c.obs_width() {
            if w != width {
                return Err(Error::Config(format!(
                    "{} controller expects {w} observation values, environment provides {width}",
                    side.name()
                )));
            }
        }
    }
    let mut state = env.reset(task);
    let mut log = EpisodeLog::new(env, task);
    while !state.done {
        let a = left.act(env, &state, Side::Left)?;
        let b = right.act(env, &state, Side::Right)?;
        let info = env.step(&mut state, &a, &b)?;
        log.record(&state, &info);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{SyntheticDemoSpec, Template};
    use crate::task::synthetic_task;

    fn env(template: Template) -> BimanualEnv {
        let scene = SceneConfig::default();
        let spec = SyntheticDemoSpec::new("d", template, "cup1", "bowl1");
        let task = synthetic_task(&spec, 5, &scene).unwrap();
        let sim = SimConfig {
            episode_length: 300,
            ..SimConfig::default()
        };
        BimanualEnv::new(vec![task], 1, scene, sim, RewardWeights::default()).unwrap()
    }

    #[test]
    fn zero_actions_leave_objects_in_place() {
        let env = env(Template::LiftHold);
        let mut s = env.reset(0);
        let start = s.objects.clone();
        let zero = [0.0; ACTION_DIM];
        while !s.done {
            env.step(&mut s, &zero, &zero).unwrap();
        }
        assert_eq!(s.stage, Stage::Aligning);
        for i in 0..2 {
            assert!(s.objects[i].pose.position.distance(start[i].pose.position) < 1e-12);
        }
        assert!(env.step(&mut s, &zero, &zero).is_err());
    }

    #[test]
    fn actions_are_clamped_per_step() {
        let env = env(Template::LiftHold);
        let mut s = env.reset(0);
        let before = s.hands[0].wrist.position;
        let mut a = [0.0; ACTION_DIM];
        a[0] = 50.0;
        a[6] = f64::NAN;
        env.step(&mut s, &a, &[0.0; ACTION_DIM]).unwrap();
        let moved = s.hands[0].wrist.position.distance(before);
        assert!((moved - 0.02).abs() < 1e-12);
        assert_eq!(s.hands[0].closure[0], 0.0);
    }

    #[test]
    fn observation_widths() {
        let env = env(Template::Pour);
        let s = env.reset(0);
        let mut o = Vec::new();
        env.teacher_obs(&s, Side::Left, &mut o);
        assert_eq!(o.len(), env.teacher_obs_width());
        let (mut p, mut c, mut f) = (Vec::new(), Vec::new(), Vec::new());
        let mut rng = RngStream::new(1, 0);
        env.student_obs(&s, Side::Right, 64, 5, 0.003, &mut rng, &mut p, &mut c, &mut f);
        assert_eq!((p.len(), c.len(), f.len()), (PROPRIO_WIDTH, 64 * 3, 15));
    }

    #[test]
    fn scripted_controller_completes_every_template() {
        for t in Template::ALL {
            let env = env(t);
            let log = run_episode(&env, 0, &mut ScriptedController, &mut ScriptedController).unwrap();
            let origin = log.tracking_origin().unwrap_or_else(|| panic!("{t}: never aligned"));
            let state_steps = &log.steps[origin..];
            let last = env.tasks[0].l_track() - 1;
            let end = state_steps
                .iter()
                .find(|s| tracking_index(s.t_since_tracking.unwrap(), 5, last + 1) == last)
                .expect("tracking reached the final index");
            let goal = env.tasks[0].tracked_pose(Side::Right, last).position;
            assert!(end.tool_position().distance(goal) < 0.1, "{t}");
        }
    }

    #[test]
    fn attached_objects_follow_the_wrist_exactly() {
        let env = env(Template::Pour);
        let mut s = env.reset(0);
        let mut c = ScriptedController;
        while !s.done {
            let a = c.act(&env, &s, Side::Left).unwrap();
            let b = c.act(&env, &s, Side::Right).unwrap();
            env.step(&mut s, &a, &b).unwrap();
            for i in 0..2 {
                let o = &s.objects[i];
                if !o.attachment.is_none() {
                    assert_eq!(o.pose, s.hands[i].wrist.compose(&o.attach_offset));
                }
            }
        }
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let env = env(Template::DustSweep);
        let log = run_episode(&env, 0, &mut ScriptedController, &mut ZeroController).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        log.write_jsonl(&mut buf).unwrap();
        let back = EpisodeLog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], log);
    }
}
