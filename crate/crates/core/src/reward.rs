//! Two-stage shaped reward: approach, lift and bonus terms while aligning the
//! scene with the demonstration's reference poses, and an exponential
//! tracking term once alignment has held long enough.

use serde::{Deserialize, Serialize};

use crate::math::{quat_angle, Pose, Vec3};

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardToggles {
    /// Keep only the tracking term.
    pub disable_stage1: bool,
    /// Use the point-set centroid instead of the demonstrated grasp center.
    pub use_geometric_center: bool,
    pub disable_bonus: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_r: f64,
    pub w_t: f64,
    pub w_q: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub lambda_w: f64,
    pub lambda_ft: f64,
    pub eps_succ: f64,
    /// Simulation steps per demonstration step.
    pub f: usize,
    pub toggles: RewardToggles,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_r: 2.0,
            w_t: 15.0,
            w_q: 0.5,
            w1: 0.5,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            lambda_w: 0.12,
            lambda_ft: 0.48,
            eps_succ: 0.1,
            f: 5,
            toggles: RewardToggles::default(),
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.w_r,
            self.w_t,
            self.w_q,
            self.w1,
            self.w2,
            self.w3,
            self.w4,
            self.lambda_w,
            self.lambda_ft,
            self.eps_succ,
        ];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(crate::Error::Config("reward weights must be finite".into()));
        }
        if self.f < 1 {
            return Err(crate::Error::Config("tracking frequency f must be >= 1".into()));
        }
        if self.eps_succ <= 0.0 {
            return Err(crate::Error::Config("eps_succ must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub appro: f64,
    pub lift: f64,
    pub bonus: f64,
    pub align: f64,
    pub track: f64,
    pub total: f64,
}

/// `−‖wrist − gc‖ − w_r·Σ‖fingertip − gc‖`
pub fn approach_reward(wrist: Vec3, fingertips: &[Vec3], gc: Vec3, w_r: f64) -> f64 {
    let ft: f64 = fingertips.iter().map(|p| p.distance(gc)).sum();
    -wrist.distance(gc) - w_r * ft
}

/// Whether the hand is close enough to the grasp center for the lift term
/// (and for attachment).
pub fn within_grasp_reach(
    wrist: Vec3,
    fingertips: &[Vec3],
    gc: Vec3,
    lambda_w: f64,
    lambda_ft: f64,
) -> bool {
    let ft: f64 = fingertips.iter().map(|p| p.distance(gc)).sum();
    wrist.distance(gc) <= lambda_w && ft <= lambda_ft
}

/// Object state and targets for the lift term.
#[derive(Clone, Copy, Debug)]
pub struct LiftTarget {
    pub object: Pose,
    pub reference: Pose,
    pub initial_position: Vec3,
}

pub fn lift_reward(
    wrist: Vec3,
    fingertips: &[Vec3],
    gc: Vec3,
    target: &LiftTarget,
    weights: &RewardWeights,
) -> f64 {
    if !within_grasp_reach(wrist, fingertips, gc, weights.lambda_w, weights.lambda_ft) {
        return 0.0;
    }
    let to_ref = target.object.position.distance(target.reference.position);
    let span = target.initial_position.distance(target.reference.position);
    let r_pos = if span <= 1e-9 {
        if to_ref <= weights.eps_succ {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - to_ref / span).max(0.0)
    };
    let r_quat = -quat_angle(target.object.orientation, target.reference.orientation);
    r_pos + weights.w_q * r_quat
}

/// `1 / (1 + d)` once the object is within `eps_succ` of its reference.
pub fn bonus_reward(obj_pos: Vec3, ref_pos: Vec3, eps_succ: f64) -> f64 {
    let d = obj_pos.distance(ref_pos);
    if d <= eps_succ {
        1.0 / (1.0 + d)
    } else {
        0.0
    }
}

/// Demo index reached `t_since_tracking` simulation steps into tracking:
/// `ceil(t / f)`, clamped to the last index.
pub fn tracking_index(t_since_tracking: usize, f: usize, len: usize) -> usize {
    t_since_tracking.div_ceil(f.max(1)).min(len.saturating_sub(1))
}

/// `exp(−w_t·‖x − x̂_i‖)` while tracking; zero before the tracking clock
/// starts (`t_since_tracking == None`).
pub fn track_reward(
    obj_pos: Vec3,
    demo_positions: &[Vec3],
    t_since_tracking: Option<usize>,
    f: usize,
    w_t: f64,
) -> f64 {
    match t_since_tracking {
        Some(t) if !demo_positions.is_empty() => {
            let i = tracking_index(t, f, demo_positions.len());
            (-w_t * obj_pos.distance(demo_positions[i])).exp()
        }
        _ => 0.0,
    }
}

/// Everything one side's reward needs from the simulator.
#[derive(Clone, Copy, Debug)]
pub struct SideObservation<'a> {
    pub wrist: Vec3,
    pub fingertips: &'a [Vec3],
    pub grasp_center: Vec3,
    pub geometric_center: Vec3,
    pub object: Pose,
    pub reference: Pose,
    pub initial_position: Vec3,
    pub t_since_tracking: Option<usize>,
    pub demo_positions: &'a [Vec3],
}

pub fn compose_reward(
    appro: f64,
    lift: f64,
    bonus: f64,
    track: f64,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let align = weights.w1 * appro + weights.w2 * lift + weights.w3 * bonus;
    RewardBreakdown {
        appro,
        lift,
        bonus,
        align,
        track,
        total: align + weights.w4 * track,
    }
}

pub fn total_reward(side: &SideObservation<'_>, weights: &RewardWeights) -> RewardBreakdown {
    let toggles = weights.toggles;
    let track = track_reward(
        side.object.position,
        side.demo_positions,
        side.t_since_tracking,
        weights.f,
        weights.w_t,
    );
    if toggles.disable_stage1 {
        return compose_reward(0.0, 0.0, 0.0, track, weights);
    }
    let gc = if toggles.use_geometric_center {
        side.geometric_center
    } else {
        side.grasp_center
    };
    let appro = approach_reward(side.wrist, side.fingertips, gc, weights.w_r);
    let target = LiftTarget {
        object: side.object,
        reference: side.reference,
        initial_position: side.initial_position,
    };
    let lift = lift_reward(side.wrist, side.fingertips, gc, &target, weights);
    let bonus = if toggles.disable_bonus {
        0.0
    } else {
        bonus_reward(side.object.position, side.reference.position, weights.eps_succ)
    };
    compose_reward(appro, lift, bonus, track, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::UnitQuat;
    use std::f64::consts::PI;

    fn four_at(p: Vec3) -> Vec<Vec3> {
        vec![p; 4]
    }

    #[test]
    fn approach_zero_at_grasp_center() {
        let gc = Vec3::new(0.1, 0.5, 0.8);
        assert_eq!(approach_reward(gc, &four_at(gc), gc, 2.0), 0.0);
    }

    #[test]
    fn approach_is_linear_in_distance() {
        let gc = Vec3::ZERO;
        let w = Vec3::new(0.1, 0.0, 0.0);
        let ft = four_at(Vec3::new(0.0, 0.05, 0.0));
        let r1 = approach_reward(w, &ft, gc, 2.0);
        let r2 = approach_reward(w * 2.0, &four_at(Vec3::new(0.0, 0.1, 0.0)), gc, 2.0);
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn lift_is_zero_out_of_reach() {
        let gc = Vec3::ZERO;
        let target = LiftTarget {
            object: Pose::IDENTITY,
            reference: Pose::IDENTITY,
            initial_position: Vec3::X,
        };
        let w = RewardWeights::default();
        let far = Vec3::new(0.13, 0.0, 0.0);
        assert_eq!(lift_reward(far, &four_at(gc), gc, &target, &w), 0.0);
        // fingertip sum 4·0.13 = 0.52 > 0.48
        assert_eq!(lift_reward(gc, &four_at(far), gc, &target, &w), 0.0);
    }

    #[test]
    fn lift_guard_for_coincident_start_and_reference() {
        let gc = Vec3::ZERO;
        let w = RewardWeights::default();
        let reference = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let near = LiftTarget {
            object: reference.translated(Vec3::new(0.05, 0.0, 0.0)),
            reference,
            initial_position: reference.position,
        };
        assert_eq!(lift_reward(gc, &four_at(gc), gc, &near, &w), 1.0);
        let far = LiftTarget {
            object: reference.translated(Vec3::new(0.5, 0.0, 0.0)),
            ..near
        };
        assert_eq!(lift_reward(gc, &four_at(gc), gc, &far, &w), 0.0);
    }

    #[test]
    fn tracking_index_rounds_up_and_clamps() {
        assert_eq!(tracking_index(0, 5, 10), 0);
        assert_eq!(tracking_index(1, 5, 10), 1);
        assert_eq!(tracking_index(5, 5, 10), 1);
        assert_eq!(tracking_index(6, 5, 10), 2);
        assert_eq!(tracking_index(500, 5, 10), 9);
    }

    #[test]
    fn toggles_shape_the_breakdown() {
        let gc = Vec3::new(0.0, 0.0, 0.1);
        let demo = [Vec3::ZERO];
        let ft = four_at(gc);
        let side = SideObservation {
            wrist: gc,
            fingertips: &ft,
            grasp_center: gc,
            geometric_center: Vec3::new(0.3, 0.0, 0.0),
            object: Pose::IDENTITY,
            reference: Pose::IDENTITY,
            initial_position: Vec3::new(0.0, 0.0, -0.2),
            t_since_tracking: Some(0),
            demo_positions: &demo,
        };
        let mut w = RewardWeights::default();
        let full = total_reward(&side, &w);
        assert!(full.bonus > 0.0 && full.lift > 0.0 && full.track == 1.0);

        w.toggles.disable_bonus = true;
        assert_eq!(total_reward(&side, &w).bonus, 0.0);

        w.toggles = RewardToggles { use_geometric_center: true, ..Default::default() };
        let geo = total_reward(&side, &w);
        assert!(geo.appro < full.appro);
        assert_eq!(geo.lift, 0.0);

        w.toggles = RewardToggles { disable_stage1: true, ..Default::default() };
        let only_track = total_reward(&side, &w);
        assert_eq!(only_track.total, w.w4 * only_track.track);
        assert_eq!(only_track.align, 0.0);
    }

    #[test]
    fn orientation_error_lowers_lift() {
        let w = RewardWeights::default();
        let gc = Vec3::ZERO;
        let reference = Pose::IDENTITY;
        let tilted = Pose::new(Vec3::ZERO, UnitQuat::from_axis_angle(Vec3::X, PI / 4.0));
        let target = LiftTarget { object: tilted, reference, initial_position: Vec3::Z };
        let r = lift_reward(gc, &four_at(gc), gc, &target, &w);
        assert!((r - (1.0 - 0.5 * PI / 4.0)).abs() < 1e-12);
    }
}
