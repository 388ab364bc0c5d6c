//! Demonstration trajectories: JSON ingestion, preprocessing, grasp centers,
//! a synthetic generator standing in for captured human demos, and the
//! train/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::math::{
    nearest_neighbors, sample_surface_points, Pose, PrimitiveShape, RngStream, UnitQuat, Vec3,
};

pub const POINTS_PER_OBJECT: usize = 1024;
pub const FINGERTIPS: usize = 4;

/// Fingertip offsets in the wrist frame with the hand fully open: a
/// four-finger claw below the wrist, opposing pairs along x and y.
pub const FINGERTIP_OFFSETS: [[f64; 3]; FINGERTIPS] = [
    [-0.045, 0.0, -0.06],
    [0.045, 0.0, -0.06],
    [0.0, -0.045, -0.06],
    [0.0, 0.045, -0.06],
];

/// Fingertip positions for a wrist pose and per-finger closure in `[0, 1]`;
/// each offset shrinks by `1 − 0.5·closure`.
pub fn fingertip_positions(wrist: &Pose, closure: &[f64]) -> Vec<Vec3> {
    FINGERTIP_OFFSETS
        .iter()
        .zip(closure)
        .map(|(o, c)| {
            let s = 1.0 - 0.5 * c.clamp(0.0, 1.0);
            wrist.transform_point(Vec3::new(o[0] * s, o[1] * s, o[2] * s))
        })
        .collect()
}

/// Inverse of [`fingertip_positions`]: mean closure implied by how far the
/// fingertips sit from the wrist.
pub fn infer_closure(wrist: &Pose, fingertips: &[Vec3]) -> f64 {
    let inv = wrist.inverse();
    let mut total = 0.0;
    for (ft, o) in fingertips.iter().zip(FINGERTIP_OFFSETS) {
        let local = inv.transform_point(*ft).norm();
        let open = Vec3::new(o[0], o[1], o[2]).norm();
        total += (2.0 * (1.0 - local / open)).clamp(0.0, 1.0);
    }
    total / fingertips.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub tool_pose: Pose,
    pub object_pose: Pose,
    pub left_wrist: Pose,
    pub right_wrist: Pose,
    pub left_fingertips: Vec<Vec3>,
    pub right_fingertips: Vec<Vec3>,
}

impl DemoStep {
    fn shift(&mut self, d: Vec3) {
        self.tool_pose.position += d;
        self.object_pose.position += d;
        self.left_wrist.position += d;
        self.right_wrist.position += d;
        self.left_fingertips.iter_mut().for_each(|p| *p += d);
        self.right_fingertips.iter_mut().for_each(|p| *p += d);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoTrajectory {
    pub demo_id: String,
    pub action_label: String,
    pub tool_name: String,
    pub object_name: String,
    pub tool_shape: PrimitiveShape,
    pub object_shape: PrimitiveShape,
    pub tool_points: Vec<Vec3>,
    pub object_points: Vec<Vec3>,
    pub steps: Vec<DemoStep>,
}

impl DemoTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Renders the documented demo file layout.
    pub fn to_json(&self) -> Value {
        let pts = |v: &[Vec3]| Value::Array(v.iter().map(|p| json!(p.to_array())).collect());
        let steps: Vec<Value> = self
            .steps
            .iter()
            .map(|s| {
                json!({
                    "tool_pose": s.tool_pose.to_array(),
                    "object_pose": s.object_pose.to_array(),
                    "left_wrist": s.left_wrist.to_array(),
                    "right_wrist": s.right_wrist.to_array(),
                    "left_fingertips": pts(&s.left_fingertips),
                    "right_fingertips": pts(&s.right_fingertips),
                })
            })
            .collect();
        json!({
            "demo_id": self.demo_id,
            "action": self.action_label,
            "tool": self.tool_name,
            "object": self.object_name,
            "tool_shape": self.tool_shape,
            "object_shape": self.object_shape,
            "tool_points": pts(&self.tool_points),
            "object_points": pts(&self.object_points),
            "steps": steps,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_json()).expect("demo serializes")
    }

    pub fn tool_positions(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.tool_pose.position).collect()
    }

    pub fn object_positions(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.object_pose.position).collect()
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(join(path, key), "missing field"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn parse_string(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String> {
    let v = field(obj, key, "")?;
    let s = v
        .as_str()
        .ok_or_else(|| Error::parse(key, "expected a string"))?;
    if s.is_empty() {
        return Err(Error::parse(key, "must not be empty"));
    }
    Ok(s.to_string())
}

fn parse_vec3(v: &Value, path: &str) -> Result<Vec3> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| Error::parse(path, "expected [x, y, z]"))?;
    let mut out = [0.0; 3];
    for (i, x) in arr.iter().enumerate() {
        out[i] = x
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::parse(path, "expected finite numbers"))?;
    }
    Ok(Vec3::new(out[0], out[1], out[2]))
}

fn parse_points(v: &Value, path: &str, expected: usize) -> Result<Vec<Vec3>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(path, "expected an array of points"))?;
    if arr.len() != expected {
        return Err(Error::Cardinality {
            field: path.to_string(),
            expected,
            actual: arr.len(),
        });
    }
    arr.iter()
        .enumerate()
        .map(|(i, p)| parse_vec3(p, &format!("{path}[{i}]")))
        .collect()
}

fn parse_pose(obj: &serde_json::Map<String, Value>, key: &str, path: &str) -> Result<Pose> {
    let p = join(path, key);
    let arr = field(obj, key, path)?
        .as_array()
        .ok_or_else(|| Error::parse(&p, "expected [px, py, pz, qw, qx, qy, qz]"))?;
    let vals: Option<Vec<f64>> = arr.iter().map(|x| x.as_f64()).collect();
    let vals = vals.ok_or_else(|| Error::parse(&p, "expected numbers"))?;
    Pose::from_array(&vals).map_err(|e| Error::parse(&p, e.to_string()))
}

fn parse_shape(obj: &serde_json::Map<String, Value>, key: &str) -> Result<PrimitiveShape> {
    PrimitiveShape::from_json(field(obj, key, "")?).map_err(|e| Error::parse(key, e.to_string()))
}

/// Parses and validates a demo file.
pub fn parse_demo(bytes: &[u8]) -> Result<DemoTrajectory> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::parse("<root>", e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::parse("<root>", "expected a JSON object"))?;
    let demo_id = parse_string(obj, "demo_id")?;
    let action_label = parse_string(obj, "action")?;
    let tool_name = parse_string(obj, "tool")?;
    let object_name = parse_string(obj, "object")?;
    let tool_shape = parse_shape(obj, "tool_shape")?;
    let object_shape = parse_shape(obj, "object_shape")?;
    let tool_points = parse_points(field(obj, "tool_points", "")?, "tool_points", POINTS_PER_OBJECT)?;
    let object_points =
        parse_points(field(obj, "object_points", "")?, "object_points", POINTS_PER_OBJECT)?;
    let raw_steps = field(obj, "steps", "")?
        .as_array()
        .ok_or_else(|| Error::parse("steps", "expected an array"))?;
    if raw_steps.len() < 2 {
        return Err(Error::TooShort { len: raw_steps.len() });
    }
    let mut steps = Vec::with_capacity(raw_steps.len());
    for (i, s) in raw_steps.iter().enumerate() {
        let path = format!("steps[{i}]");
        let so = s
            .as_object()
            .ok_or_else(|| Error::parse(&path, "expected an object"))?;
        steps.push(DemoStep {
            tool_pose: parse_pose(so, "tool_pose", &path)?,
            object_pose: parse_pose(so, "object_pose", &path)?,
            left_wrist: parse_pose(so, "left_wrist", &path)?,
            right_wrist: parse_pose(so, "right_wrist", &path)?,
            left_fingertips: parse_points(
                field(so, "left_fingertips", &path)?,
                &join(&path, "left_fingertips"),
                FINGERTIPS,
            )?,
            right_fingertips: parse_points(
                field(so, "right_fingertips", &path)?,
                &join(&path, "right_fingertips"),
                FINGERTIPS,
            )?,
        });
    }
    Ok(DemoTrajectory {
        demo_id,
        action_label,
        tool_name,
        object_name,
        tool_shape,
        object_shape,
        tool_points,
        object_points,
        steps,
    })
}

/// First step whose tool-object distance jumps by more than `delta_ref` on
/// the next step; 0 when the distance never jumps.
pub fn find_reference_timestep(traj: &DemoTrajectory, delta_ref: f64) -> usize {
    let d: Vec<f64> = traj
        .steps
        .iter()
        .map(|s| s.tool_pose.position.distance(s.object_pose.position))
        .collect();
    d.windows(2)
        .position(|w| (w[1] - w[0]).abs() > delta_ref)
        .unwrap_or(0)
}

/// Lowest point of either object over the whole trajectory.
fn lowest_point(traj: &DemoTrajectory) -> f64 {
    traj.steps
        .iter()
        .flat_map(|s| {
            [
                s.tool_pose.position.z - traj.tool_shape.depth_below_origin(s.tool_pose.orientation),
                s.object_pose.position.z
                    - traj.object_shape.depth_below_origin(s.object_pose.orientation),
            ]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Shifts every position by one constant z so the lowest object point over
/// the trajectory rests at `table_height + clearance`.
pub fn apply_z_offset(traj: &DemoTrajectory, table_height: f64, clearance: f64) -> DemoTrajectory {
    let dz = table_height + clearance - lowest_point(traj);
    let mut out = traj.clone();
    if dz != 0.0 {
        let d = Vec3::new(0.0, 0.0, dz);
        out.steps.iter_mut().for_each(|s| s.shift(d));
    }
    out
}

/// Mean of the `count` points nearest the average of the wrist and
/// fingertip anchors.
pub fn compute_grasp_center(
    points: &[Vec3],
    wrist_anchor: Vec3,
    fingertip_anchors: &[Vec3],
    count: usize,
) -> Result<Vec3> {
    let mut anchor = wrist_anchor;
    for f in fingertip_anchors {
        anchor += *f;
    }
    let anchor = anchor / (fingertip_anchors.len() + 1) as f64;
    let idx = nearest_neighbors(points, anchor, count)?;
    let sel: Vec<Vec3> = idx.iter().map(|&i| points[i]).collect();
    Ok(Vec3::mean(&sel))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    #[serde(rename = "lift-hold")]
    LiftHold,
    #[serde(rename = "pour")]
    Pour,
    #[serde(rename = "dust-sweep")]
    DustSweep,
    #[serde(rename = "empty-tilt")]
    EmptyTilt,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::LiftHold,
        Template::Pour,
        Template::DustSweep,
        Template::EmptyTilt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::LiftHold => "lift-hold",
            Template::Pour => "pour",
            Template::DustSweep => "dust-sweep",
            Template::EmptyTilt => "empty-tilt",
        }
    }

    /// Default amplitude: meters for lift-hold and dust-sweep, radians for
    /// pour and empty-tilt.
    pub fn default_amplitude(self) -> f64 {
        match self {
            Template::LiftHold => 0.1,
            Template::Pour => 0.5 * PI,
            Template::DustSweep => 0.04,
            Template::EmptyTilt => PI / 3.0,
        }
    }

    /// Tool and object base names used by the dataset generator.
    pub fn catalog(self) -> (&'static str, &'static str) {
        match self {
            Template::LiftHold => ("cup", "bowl"),
            Template::Pour => ("kettle", "bowl"),
            Template::DustSweep => ("brush", "plate"),
            Template::EmptyTilt => ("spatula", "bowl"),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown template `{s}` (expected one of lift-hold, pour, dust-sweep, empty-tilt)"
                ))
            })
    }
}

/// Shape of a named instance such as `cup2`: the base name picks the
/// primitive and the instance number picks its dimensions.
pub fn instance_shape(name: &str) -> PrimitiveShape {
    let base = category(name);
    let k = name[base.len()..]
        .trim_start_matches(['-', '_', ' '])
        .parse::<usize>()
        .unwrap_or(1)
        .saturating_sub(1);
    let v = |steps: &[f64]| steps[k % steps.len()];
    match base.as_str() {
        "cup" => PrimitiveShape::Cylinder {
            radius: v(&[0.035, 0.03, 0.04]),
            height: v(&[0.1, 0.12, 0.09]),
        },
        "kettle" => PrimitiveShape::Cylinder {
            radius: v(&[0.05, 0.045, 0.055]),
            height: v(&[0.14, 0.12, 0.16]),
        },
        "brush" | "spatula" => PrimitiveShape::Box {
            size: [v(&[0.04, 0.035, 0.05]), v(&[0.16, 0.14, 0.18]), v(&[0.03, 0.025, 0.035])],
        },
        "plate" => PrimitiveShape::FlatDisc {
            radius: v(&[0.09, 0.1, 0.08]),
        },
        "bowl" => PrimitiveShape::HemisphereShell {
            radius: v(&[0.07, 0.06, 0.08]),
        },
        _ => PrimitiveShape::Box {
            size: [0.06, 0.06, v(&[0.1, 0.12, 0.08])],
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDemoSpec {
    pub demo_id: String,
    pub template: Template,
    pub tool_name: String,
    pub object_name: String,
    pub tool_shape: PrimitiveShape,
    pub object_shape: PrimitiveShape,
    pub length: usize,
    pub amplitude: f64,
    /// Height both objects are lifted before the template motion.
    pub lift_height: f64,
    /// Table height of the capture frame; preprocessing moves it.
    pub capture_table_z: f64,
    /// Object and tool start positions in the horizontal plane.
    pub object_xy: [f64; 2],
    pub tool_xy: [f64; 2],
    /// Uniform jitter applied to the start positions.
    pub position_jitter: f64,
}

impl SyntheticDemoSpec {
    pub fn new(demo_id: &str, template: Template, tool_name: &str, object_name: &str) -> Self {
        SyntheticDemoSpec {
            demo_id: demo_id.into(),
            template,
            tool_name: tool_name.into(),
            object_name: object_name.into(),
            tool_shape: instance_shape(tool_name),
            object_shape: instance_shape(object_name),
            length: 40,
            amplitude: template.default_amplitude(),
            lift_height: 0.15,
            capture_table_z: 0.0,
            object_xy: [-0.2, 0.5],
            tool_xy: [0.2, 0.5],
            position_jitter: 0.01,
        }
    }
}

/// Surface point facing the robot (−y) in the object's start frame, where
/// the demonstrating hand closes.
fn grip_point(shape: &PrimitiveShape) -> Vec3 {
    match *shape {
        PrimitiveShape::Box { size } => Vec3::new(0.0, -0.5 * size[1], 0.0),
        PrimitiveShape::Cylinder { radius, .. } => Vec3::new(0.0, -radius, 0.0),
        PrimitiveShape::HemisphereShell { radius } => Vec3::new(0.0, -radius, -0.01),
        PrimitiveShape::FlatDisc { radius } => Vec3::new(0.0, -radius, 0.0),
    }
}

/// Wrist pose whose closed-hand anchor (mean of wrist and fingertips) lands
/// on `target`.
pub fn wrist_for_anchor(target: Vec3, orientation: UnitQuat) -> Pose {
    let probe = Pose::new(Vec3::ZERO, orientation);
    let tips = fingertip_positions(&probe, &[1.0; FINGERTIPS]);
    let mut sum = Vec3::ZERO;
    for t in &tips {
        sum += *t;
    }
    let anchor_offset = sum / (FINGERTIPS + 1) as f64;
    Pose::new(target - anchor_offset, orientation)
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Pose of one object relative to its lifted pose, plus its displacement
/// speed scale, for template progress `s ∈ [0, 1]`.
struct TemplateMotion {
    tool_shift: Vec3,
    tool_rot: UnitQuat,
    object_rot: UnitQuat,
}

fn template_motion(t: Template, amplitude: f64, s: f64) -> TemplateMotion {
    let none = UnitQuat::IDENTITY;
    match t {
        Template::LiftHold => TemplateMotion {
            tool_shift: Vec3::new(-0.8, 0.0, 0.6) * (amplitude * s),
            tool_rot: none,
            object_rot: none,
        },
        Template::Pour => TemplateMotion {
            tool_shift: Vec3::new(-0.08, 0.0, 0.04) * s,
            tool_rot: UnitQuat::from_axis_angle(Vec3::Y, -amplitude * s),
            object_rot: none,
        },
        Template::DustSweep => {
            let sweep = amplitude * (2.0 * PI * 2.0 * s).sin();
            TemplateMotion {
                tool_shift: Vec3::new(-0.06 * s - sweep, 0.0, -0.02 * s),
                tool_rot: none,
                object_rot: none,
            }
        }
        Template::EmptyTilt => TemplateMotion {
            tool_shift: Vec3::new(0.04, 0.0, 0.05) * s,
            tool_rot: none,
            object_rot: UnitQuat::from_axis_angle(Vec3::Y, amplitude * s),
        },
    }
}

/// Generates a smooth two-hand demonstration: a reach towards both objects,
/// a synchronized lift, then the template's relative motion. Hands hold the
/// objects rigidly from the end of the reach onwards.
pub fn generate_synthetic_demo(spec: &SyntheticDemoSpec, rng: &mut RngStream) -> Result<DemoTrajectory> {
    spec.tool_shape.validate()?;
    spec.object_shape.validate()?;
    if spec.length < 10 {
        return Err(Error::InvalidArgument(format!(
            "synthetic demos need at least 10 steps, got {}",
            spec.length
        )));
    }
    if !(spec.amplitude.is_finite() && spec.amplitude > 0.0) {
        return Err(Error::InvalidArgument("template amplitude must be positive".into()));
    }
    let n_reach = spec.length / 5;
    let n_lift = spec.length / 5;
    let n_tmpl = spec.length - n_reach - n_lift;

    let tool_points = sample_surface_points(&spec.tool_shape, POINTS_PER_OBJECT, rng)?;
    let object_points = sample_surface_points(&spec.object_shape, POINTS_PER_OBJECT, rng)?;

    let mut jitter = || rng.uniform_range(-spec.position_jitter, spec.position_jitter);
    let tool_yaw = match spec.tool_shape {
        PrimitiveShape::Box { .. } => 0.3 * jitter() / spec.position_jitter.max(1e-9),
        _ => 0.0,
    };
    let tool_q = UnitQuat::from_axis_angle(Vec3::Z, tool_yaw);
    let object_q = UnitQuat::IDENTITY;
    let z0 = spec.capture_table_z;
    let tool_start = Pose::new(
        Vec3::new(
            spec.tool_xy[0] + jitter(),
            spec.tool_xy[1] + jitter(),
            z0 + spec.tool_shape.depth_below_origin(tool_q),
        ),
        tool_q,
    );
    let object_start = Pose::new(
        Vec3::new(
            spec.object_xy[0] + jitter(),
            spec.object_xy[1] + jitter(),
            z0 + spec.object_shape.depth_below_origin(object_q),
        ),
        object_q,
    );

    // Hand-in-object transforms fixed at the grasp.
    let grasp_wrist = |obj: &Pose, shape: &PrimitiveShape| {
        let g = obj.position + grip_point(shape);
        wrist_for_anchor(g, UnitQuat::IDENTITY)
    };
    let right_grasp = grasp_wrist(&tool_start, &spec.tool_shape);
    let left_grasp = grasp_wrist(&object_start, &spec.object_shape);
    let right_in_tool = tool_start.inverse().compose(&right_grasp);
    let left_in_object = object_start.inverse().compose(&left_grasp);
    let reach_from = Vec3::new(0.0, -0.12, 0.08);

    let mut steps = Vec::with_capacity(spec.length);
    let push = |steps: &mut Vec<DemoStep>, tool: Pose, object: Pose, lw: Pose, rw: Pose, c: f64| {
        steps.push(DemoStep {
            tool_pose: tool,
            object_pose: object,
            left_wrist: lw,
            right_wrist: rw,
            left_fingertips: fingertip_positions(&lw, &[c; FINGERTIPS]),
            right_fingertips: fingertip_positions(&rw, &[c; FINGERTIPS]),
        });
    };

    for k in 0..n_reach {
        let s = smoothstep(k as f64 / (n_reach - 1) as f64);
        let lw = left_grasp.translated(reach_from * (1.0 - s));
        let rw = right_grasp.translated(reach_from * (1.0 - s));
        push(&mut steps, tool_start, object_start, lw, rw, s);
    }
    let lift = |s: f64| Vec3::new(0.0, 0.0, spec.lift_height * smoothstep(s));
    for k in 1..=n_lift {
        let d = lift(k as f64 / n_lift as f64);
        let tool = tool_start.translated(d);
        let object = object_start.translated(d);
        push(
            &mut steps,
            tool,
            object,
            object.compose(&left_in_object),
            tool.compose(&right_in_tool),
            1.0,
        );
    }
    let tool_lifted = tool_start.translated(lift(1.0));
    let object_lifted = object_start.translated(lift(1.0));

    // Ease-out progress, steep enough at the start that the first template
    // step is a detectable jump in the tool-object distance.
    let first_rate = {
        let m0 = template_motion(spec.template, spec.amplitude, 0.0);
        let m1 = template_motion(spec.template, spec.amplitude, 1e-4);
        let d0 = (tool_lifted.position + m0.tool_shift).distance(object_lifted.position);
        let d1 = (tool_lifted.position + m1.tool_shift).distance(object_lifted.position);
        ((d1 - d0) / 1e-4).abs().max(1e-6)
    };
    let exponent = (3.0f64).max((0.012 * n_tmpl as f64 / first_rate).ceil());
    for k in 1..=n_tmpl {
        let u = k as f64 / n_tmpl as f64;
        let s = 1.0 - (1.0 - u).powf(exponent);
        let m = template_motion(spec.template, spec.amplitude, s);
        let tool = Pose::new(
            tool_lifted.position + m.tool_shift,
            m.tool_rot.mul(tool_lifted.orientation),
        );
        let object = Pose::new(object_lifted.position, m.object_rot.mul(object_lifted.orientation));
        push(
            &mut steps,
            tool,
            object,
            object.compose(&left_in_object),
            tool.compose(&right_in_tool),
            1.0,
        );
    }

    Ok(DemoTrajectory {
        demo_id: spec.demo_id.clone(),
        action_label: spec.template.name().into(),
        tool_name: spec.tool_name.clone(),
        object_name: spec.object_name.clone(),
        tool_shape: spec.tool_shape,
        object_shape: spec.object_shape,
        tool_points,
        object_points,
        steps,
    })
}

/// Instance name with trailing digits and separators removed: `cup2` → `cup`.
pub fn category(name: &str) -> String {
    name.trim_end_matches(|c: char| c.is_ascii_digit() || matches!(c, '-' | '_' | ' '))
        .to_string()
}

/// `action/tool-category/object-category`
pub fn group_key(action: &str, tool: &str, object: &str) -> String {
    format!("{action}/{}/{}", category(tool), category(object))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<String>,
    pub test_comb: Vec<String>,
    pub test_new: Vec<String>,
}

impl TaskSplit {
    pub fn label_of(&self, id: &str) -> Option<&'static str> {
        if self.train.iter().any(|t| t == id) {
            Some("train")
        } else if self.test_comb.iter().any(|t| t == id) {
            Some("test_comb")
        } else if self.test_new.iter().any(|t| t == id) {
            Some("test_new")
        } else {
            None
        }
    }
}

/// Per-group shuffle and split; `floor(fraction·n)` training tasks per
/// group with at least one. Held-out tasks whose tool and object names both
/// occur in training are `test_comb`, the rest `test_new`.
pub fn split_tasks(demos: &[DemoTrajectory], train_fraction: f64, rng: &mut RngStream) -> Result<TaskSplit> {
    if demos.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 demos to split, got {}",
            demos.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut groups: BTreeMap<String, Vec<&DemoTrajectory>> = BTreeMap::new();
    for d in demos {
        groups
            .entry(group_key(&d.action_label, &d.tool_name, &d.object_name))
            .or_default()
            .push(d);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.demo_id.cmp(&b.demo_id));
        rng.shuffle(members);
        let n = members.len();
        let n_train = ((train_fraction * n as f64).floor() as usize).max(1).min(n);
        train.extend(members[..n_train].iter().copied());
        held.extend(members[n_train..].iter().copied());
    }
    let tools: BTreeSet<&str> = train.iter().map(|d| d.tool_name.as_str()).collect();
    let objects: BTreeSet<&str> = train.iter().map(|d| d.object_name.as_str()).collect();
    let mut split = TaskSplit {
        train: train.iter().map(|d| d.demo_id.clone()).collect(),
        ..Default::default()
    };
    for d in held {
        if tools.contains(d.tool_name.as_str()) && objects.contains(d.object_name.as_str()) {
            split.test_comb.push(d.demo_id.clone());
        } else {
            split.test_new.push(d.demo_id.clone());
        }
    }
    split.train.sort();
    split.test_comb.sort();
    split.test_new.sort();
    let mut seen = BTreeSet::new();
    for id in split.train.iter().chain(&split.test_comb).chain(&split.test_new) {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate demo id `{id}`")));
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(template: Template) -> DemoTrajectory {
        let spec = SyntheticDemoSpec::new("d0", template, "cup1", "bowl1");
        generate_synthetic_demo(&spec, &mut RngStream::new(11, 0)).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let d = demo(Template::Pour);
        let back = parse_demo(&d.to_bytes()).unwrap();
        assert_eq!(back.steps.len(), d.steps.len());
        assert_eq!(back.to_bytes(), d.to_bytes());
    }

    #[test]
    fn closure_inference_inverts_the_finger_model() {
        let w = Pose::new(Vec3::new(0.1, 0.2, 0.3), UnitQuat::from_axis_angle(Vec3::Z, 0.4));
        for c in [0.0, 0.3, 1.0] {
            let tips = fingertip_positions(&w, &[c; FINGERTIPS]);
            assert!((infer_closure(&w, &tips) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_is_the_last_lift_step() {
        for t in Template::ALL {
            let d = demo(t);
            assert_eq!(find_reference_timestep(&d, 0.005), 15, "{t}");
        }
    }

    #[test]
    fn category_strips_instance_suffix() {
        assert_eq!(category("cup2"), "cup");
        assert_eq!(category("bowl_12"), "bowl");
        assert_eq!(category("plate"), "plate");
    }

    #[test]
    fn unknown_template_is_rejected() {
        assert!(matches!("stir".parse::<Template>(), Err(Error::InvalidArgument(_))));
    }
}
