//! Geometric primitives shared by every other module: vectors, unit
//! quaternions, rigid poses, nearest-neighbor queries, primitive surface
//! sampling and seeded random streams.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Vec3::new(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn mean(points: &[Vec3]) -> Vec3 {
        let n = points.len().max(1) as f64;
        points.iter().fold(Vec3::ZERO, |acc, &p| acc + p) / n
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation quaternion, scalar first. Constructors and products renormalize,
/// so the norm stays within 1e-9 of one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        UnitQuat::IDENTITY
    }
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`. Fails on non-finite or zero-norm input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = UnitQuat { w, x, y, z };
        if !q.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        let n = q.raw_norm();
        if n < 1e-12 {
            return Err(Error::InvalidArgument("zero-norm quaternion".into()));
        }
        Ok(q.scaled(1.0 / n))
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-15 {
            return UnitQuat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        UnitQuat {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
        .normalized()
    }

    /// Exponential map of a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(v: Vec3) -> Self {
        UnitQuat::from_axis_angle(v, v.norm())
    }

    /// Inverse of [`from_rotation_vector`](Self::from_rotation_vector), with
    /// the angle in `[0, π]`.
    pub fn to_rotation_vector(self) -> Vec3 {
        let q = self.canonical();
        let s = Vec3::new(q.x, q.y, q.z);
        let sn = s.norm();
        if sn < 1e-15 {
            return s * 2.0;
        }
        let angle = 2.0 * sn.atan2(q.w);
        s * (angle / sn)
    }

    pub fn conjugate(self) -> Self {
        UnitQuat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn negated(self) -> Self {
        self.scaled(-1.0)
    }

    /// Representative with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            self.negated()
        } else {
            self
        }
    }

    pub fn dot(self, o: UnitQuat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Hamilton product `self ⊗ o`, renormalized.
    pub fn mul(self, o: UnitQuat) -> UnitQuat {
        let (a, b) = (self, o);
        UnitQuat {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .normalized()
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation about world z that best matches this orientation's heading.
    pub fn yaw_only(self) -> UnitQuat {
        let fwd = self.rotate(Vec3::X);
        let yaw = if fwd.x.abs() < 1e-12 && fwd.y.abs() < 1e-12 {
            // x axis points straight up or down; fall back to the y axis heading
            let side = self.rotate(Vec3::Y);
            side.y.atan2(side.x) - 0.5 * PI
        } else {
            fwd.y.atan2(fwd.x)
        };
        UnitQuat::from_axis_angle(Vec3::Z, yaw)
    }

    fn raw_norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    fn scaled(self, s: f64) -> Self {
        UnitQuat {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    fn normalized(self) -> Self {
        let n = self.raw_norm();
        self.scaled(1.0 / n)
    }

    fn check_unit(self, name: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} is not finite")));
        }
        if (self.raw_norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("{name} is not unit-norm")));
        }
        Ok(())
    }
}

/// Checked Hamilton product.
pub fn quat_mul(a: UnitQuat, b: UnitQuat) -> Result<UnitQuat> {
    a.check_unit("left operand")?;
    b.check_unit("right operand")?;
    Ok(a.mul(b))
}

/// Geodesic angle between two orientations, `2·acos(|⟨a,b⟩|)` in `[0, π]`.
pub fn quat_dist(a: UnitQuat, b: UnitQuat) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument("non-finite quaternion".into()));
    }
    Ok(quat_angle(a, b))
}

/// Unchecked [`quat_dist`] for hot paths that only ever see valid poses.
pub fn quat_angle(a: UnitQuat, b: UnitQuat) -> f64 {
    2.0 * a.dot(b).abs().min(1.0).acos()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: Vec3::ZERO,
        orientation: UnitQuat::IDENTITY,
    };

    pub fn new(position: Vec3, orientation: UnitQuat) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(t, UnitQuat::IDENTITY)
    }

    /// `[px, py, pz, qw, qx, qy, qz]`
    pub fn to_array(self) -> [f64; 7] {
        let (p, q) = (self.position, self.orientation);
        [p.x, p.y, p.z, q.w, q.x, q.y, q.z]
    }

    pub fn from_array(a: &[f64]) -> Result<Self> {
        if a.len() != 7 {
            return Err(Error::InvalidArgument(format!(
                "pose needs 7 values, got {}",
                a.len()
            )));
        }
        let position = Vec3::new(a[0], a[1], a[2]);
        if !position.is_finite() {
            return Err(Error::InvalidArgument("non-finite position".into()));
        }
        Ok(Pose::new(position, UnitQuat::new(a[3], a[4], a[5], a[6])?))
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.orientation.rotate(p) + self.position
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.transform_point(other.position),
            self.orientation.mul(other.orientation),
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.conjugate();
        Pose::new(inv.rotate(-self.position), inv)
    }

    pub fn translated(&self, d: Vec3) -> Pose {
        Pose::new(self.position + d, self.orientation)
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.orientation.is_finite()
    }
}

pub fn transform_point(pose: &Pose, p: Vec3) -> Result<Vec3> {
    if !pose.is_finite() || !p.is_finite() {
        return Err(Error::InvalidArgument("non-finite transform input".into()));
    }
    Ok(pose.transform_point(p))
}

/// Indices of the `count` points closest to `anchor`, nearest first; equal
/// distances resolve to the lower index.
pub fn nearest_neighbors(points: &[Vec3], anchor: Vec3, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::InvalidArgument("neighbor count must be >= 1".into()));
    }
    if count > points.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {count} neighbors from {} points",
            points.len()
        )));
    }
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((*p - anchor).norm_squared(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count - 1, cmp);
        keyed.truncate(count);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Parametric object geometry, expressed in the object's canonical frame
/// (origin at the shape center; bowls have their origin at the rim center
/// and open towards +z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimitiveShape {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    HemisphereShell { radius: f64 },
    FlatDisc { radius: f64 },
}

impl PrimitiveShape {
    /// Parses a shape descriptor such as `{"kind": "box", "size": [..]}`.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::InvalidArgument("shape descriptor without `kind`".into()))?;
        if !matches!(kind, "box" | "cylinder" | "hemisphere_shell" | "flat_disc") {
            return Err(Error::InvalidArgument(format!("unknown shape `{kind}`")));
        }
        let shape: PrimitiveShape = serde_json::from_value(value.clone())
            .map_err(|e| Error::InvalidArgument(format!("bad `{kind}` descriptor: {e}")))?;
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let dims: Vec<f64> = match *self {
            PrimitiveShape::Box { size } => size.to_vec(),
            PrimitiveShape::Cylinder { radius, height } => vec![radius, height],
            PrimitiveShape::HemisphereShell { radius } | PrimitiveShape::FlatDisc { radius } => {
                vec![radius]
            }
        };
        if dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "shape dimensions must be positive: {self:?}"
            )))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveShape::Box { .. } => "box",
            PrimitiveShape::Cylinder { .. } => "cylinder",
            PrimitiveShape::HemisphereShell { .. } => "hemisphere_shell",
            PrimitiveShape::FlatDisc { .. } => "flat_disc",
        }
    }

    /// Height of the shape origin above its lowest point for the given
    /// world orientation.
    pub fn depth_below_origin(&self, orientation: UnitQuat) -> f64 {
        let r = orientation.to_matrix();
        // world z expressed in the shape frame is the third row
        let wz = Vec3::new(r[2][0], r[2][1], r[2][2]);
        let lateral = (1.0 - wz.z * wz.z).max(0.0).sqrt();
        match *self {
            PrimitiveShape::Box { size } => {
                0.5 * (size[0] * wz.x.abs() + size[1] * wz.y.abs() + size[2] * wz.z.abs())
            }
            PrimitiveShape::Cylinder { radius, height } => {
                0.5 * height * wz.z.abs() + radius * lateral
            }
            PrimitiveShape::HemisphereShell { radius } => {
                if wz.z >= 0.0 {
                    radius
                } else {
                    radius * lateral
                }
            }
            PrimitiveShape::FlatDisc { radius } => radius * lateral,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            PrimitiveShape::Box { size: [a, b, c] } => 2.0 * (a * b + b * c + a * c),
            PrimitiveShape::Cylinder { radius, height } => {
                2.0 * PI * radius * height + 2.0 * PI * radius * radius
            }
            PrimitiveShape::HemisphereShell { radius } => 2.0 * PI * radius * radius,
            PrimitiveShape::FlatDisc { radius } => PI * radius * radius,
        }
    }
}

/// Draws `n` area-uniform points from the shape's surface.
pub fn sample_surface_points(
    shape: &PrimitiveShape,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    shape.validate()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(sample_one(shape, rng));
    }
    Ok(out)
}

fn sample_disc(radius: f64, rng: &mut RngStream) -> (f64, f64) {
    let r = radius * rng.uniform().sqrt();
    let th = 2.0 * PI * rng.uniform();
    (r * th.cos(), r * th.sin())
}

fn sample_one(shape: &PrimitiveShape, rng: &mut RngStream) -> Vec3 {
    match *shape {
        PrimitiveShape::Box { size: [a, b, c] } => {
            let (ha, hb, hc) = (0.5 * a, 0.5 * b, 0.5 * c);
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.uniform() * total;
            let mut face = 5;
            for (i, ar) in areas.iter().enumerate() {
                if pick < *ar {
                    face = i;
                    break;
                }
                pick -= ar;
            }
            let (u, v) = (rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0);
            match face {
                0 => Vec3::new(ha, u * hb, v * hc),
                1 => Vec3::new(-ha, u * hb, v * hc),
                2 => Vec3::new(u * ha, hb, v * hc),
                3 => Vec3::new(u * ha, -hb, v * hc),
                4 => Vec3::new(u * ha, v * hb, hc),
                _ => Vec3::new(u * ha, v * hb, -hc),
            }
        }
        PrimitiveShape::Cylinder { radius, height } => {
            let side = 2.0 * PI * radius * height;
            let cap = PI * radius * radius;
            let pick = rng.uniform() * (side + 2.0 * cap);
            if pick < side {
                let th = 2.0 * PI * rng.uniform();
                let z = (rng.uniform() - 0.5) * height;
                Vec3::new(radius * th.cos(), radius * th.sin(), z)
            } else {
                let (x, y) = sample_disc(radius, rng);
                let z = if pick < side + cap { 0.5 } else { -0.5 } * height;
                Vec3::new(x, y, z)
            }
        }
        PrimitiveShape::HemisphereShell { radius } => {
            let d = Vec3::new(rng.normal(), rng.normal(), rng.normal());
            let n = d.norm().max(1e-300);
            let u = d / n;
            Vec3::new(u.x, u.y, -u.z.abs()) * radius
        }
        PrimitiveShape::FlatDisc { radius } => {
            let (x, y) = sample_disc(radius, rng);
            Vec3::new(x, y, 0.0)
        }
    }
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    /// ChaCha word position, stored as a decimal string (u128 does not
    /// survive JSON).
    pub word_pos: String,
}

/// Deterministic ChaCha8 stream keyed by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream; does not advance `self`.
    pub fn derive(&self, stream_id: u64) -> RngStream {
        RngStream::new(
            self.seed ^ self.stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            stream_id,
        )
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad rng word position `{}`", state.word_pos)))?;
        let mut s = RngStream::new(state.seed, state.stream_id);
        s.rng.set_word_pos(pos);
        Ok(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// `amount` distinct indices from `0..len`, in sampling order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, len, amount).into_vec()
    }
}
