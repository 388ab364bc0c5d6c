//! Browser demo: scripted episodes with action noise, reward slices around
//! the grasp center, and threshold sweeps over the resulting log.

use bidex_core::demo::{fingertip_positions, SyntheticDemoSpec, Template, FINGERTIPS};
use bidex_core::eval::{sweep_thresholds, validate_thresholds};
use bidex_core::math::{Pose, RngStream, Vec3};
use bidex_core::reward::{total_reward, RewardToggles, RewardWeights, SideObservation};
use bidex_core::sim::{run_episode, BimanualEnv, Controller, EnvState, EpisodeLog, ScriptedController, Side, SimConfig, ACTION_DIM};
use bidex_core::task::{synthetic_task, SceneConfig};
use bidex_core::Result;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn env_for(template: &str, seed: u64, episode_length: usize, toggles: RewardToggles) -> Result<BimanualEnv> {
    let template: Template = template.parse()?;
    let (tool, object) = template.catalog();
    let spec = SyntheticDemoSpec::new("web", template, &format!("{tool}1"), &format!("{object}1"));
    let scene = SceneConfig::default();
    let task = synthetic_task(&spec, seed, &scene)?;
    let sim = SimConfig { episode_length, ..SimConfig::default() };
    let weights = RewardWeights { toggles, ..RewardWeights::default() };
    BimanualEnv::new(vec![task], 1, scene, sim, weights)
}

/// Scripted controller with Gaussian action noise.
struct Noisy {
    rng: RngStream,
    std: f64,
}

impl Controller for Noisy {
    fn act(&mut self, env: &BimanualEnv, state: &EnvState, side: Side) -> Result<[f64; ACTION_DIM]> {
        let mut a = ScriptedController.act(env, state, side)?;
        for v in a.iter_mut() {
            *v += self.std * self.rng.normal();
        }
        Ok(a)
    }
}

fn xyz(p: &[f64]) -> [f64; 3] {
    [p[0], p[1], p[2]]
}

fn log_json(log: &EpisodeLog, thresholds: &[f64], u: usize, f: usize) -> Result<Value> {
    let steps: Vec<Value> = log
        .steps
        .iter()
        .map(|s| {
            json!({
                "t": s.t,
                "tracking": s.t_since_tracking.is_some(),
                "object": xyz(&s.object_pose),
                "tool": xyz(&s.tool_pose),
                "left": xyz(&s.left_wrist),
                "right": xyz(&s.right_wrist),
                "reward": [s.rewards_left.total, s.rewards_right.total],
            })
        })
        .collect();
    let sweep = sweep_thresholds(std::slice::from_ref(log), thresholds, u, f)?;
    Ok(json!({
        "steps": steps,
        "demo_object": log.header.tracking_object.iter().map(|p| p.to_array()).collect::<Vec<_>>(),
        "demo_tool": log.header.tracking_tool.iter().map(|p| p.to_array()).collect::<Vec<_>>(),
        "sweep": sweep.iter().map(|r| json!({"threshold": r.threshold, "r1": r.r1, "r2": r.r2})).collect::<Vec<_>>(),
    }))
}

/// Runs the scripted two-hand controller on a synthetic task with action
/// noise `noise` and returns the per-step trajectory and an r1/r2 sweep.
pub fn episode(template: &str, seed: u64, noise: f64, thresholds: &[f64]) -> Result<Value> {
    validate_thresholds(thresholds)?;
    let env = env_for(template, seed, 400, RewardToggles::default())?;
    let mut left = Noisy { rng: RngStream::new(seed, 1), std: noise };
    let mut right = Noisy { rng: RngStream::new(seed, 2), std: noise };
    let log = run_episode(&env, 0, &mut left, &mut right)?;
    log_json(&log, thresholds, env.sim.u, env.weights.f)
}

/// Stage-one reward of one hand at reset, on an `n × n` grid of wrist
/// positions in the x–z plane through the grasp center (half-width
/// `extent` meters), with the hand closed to `closure`.
pub fn reward_slice(template: &str, side: &str, closure: f64, extent: f64, n: usize, geometric: bool) -> Result<Value> {
    let side = match side {
        "left" => Side::Left,
        "right" => Side::Right,
        s => return Err(bidex_core::Error::InvalidArgument(format!("unknown side `{s}`"))),
    };
    let n = n.clamp(2, 200);
    let toggles = RewardToggles { use_geometric_center: geometric, ..Default::default() };
    let env = env_for(template, 0, 10, toggles)?;
    let state = env.reset(0);
    let i = side.index();
    let c = env.task(&state);
    let gc = env.grasp_center_world(&state, side);
    let geo = env.geometric_center_world(&state, side);
    let demo = c.tracked_positions(side);
    let mut values = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let dx = extent * (2.0 * col as f64 / (n - 1) as f64 - 1.0);
            let dz = extent * (1.0 - 2.0 * row as f64 / (n - 1) as f64);
            let wrist = Pose::from_translation(gc + Vec3::new(dx, 0.0, dz));
            let tips = fingertip_positions(&wrist, &[closure; FINGERTIPS]);
            let obs = SideObservation {
                wrist: wrist.position,
                fingertips: &tips,
                grasp_center: gc,
                geometric_center: geo,
                object: state.objects[i].pose,
                reference: c.reference_pose(side),
                initial_position: c.initial_pose(side).position,
                t_since_tracking: None,
                demo_positions: &demo,
            };
            values.push(total_reward(&obs, &env.weights).total);
        }
    }
    Ok(json!({ "n": n, "extent": extent, "values": values, "grasp_center": gc.to_array(), "geometric_center": geo.to_array() }))
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = runEpisode)]
pub fn run_episode_js(template: &str, seed: u32, noise: f64, thresholds: Vec<f64>) -> std::result::Result<String, JsValue> {
    to_js(episode(template, seed as u64, noise, &thresholds))
}

#[wasm_bindgen(js_name = rewardSlice)]
pub fn reward_slice_js(
    template: &str,
    side: &str,
    closure: f64,
    extent: f64,
    n: usize,
    geometric: bool,
) -> std::result::Result<String, JsValue> {
    to_js(reward_slice(template, side, closure, extent, n, geometric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_scripted_episode_sweeps_to_full_marks() {
        let v = episode("pour", 1, 0.0, &[0.05, 0.1]).unwrap();
        assert_eq!(v["steps"].as_array().unwrap().len(), 400);
        let last = &v["sweep"][1];
        assert_eq!(last["r1"], 1.0);
        assert!(last["r2"].as_f64().unwrap() > 0.9);
    }

    #[test]
    fn noisy_episode_sweep_is_monotone() {
        let v = episode("dust-sweep", 2, 0.8, &[0.02, 0.05, 0.1]).unwrap();
        let r2: Vec<f64> = v["sweep"].as_array().unwrap().iter().map(|r| r["r2"].as_f64().unwrap()).collect();
        assert!(r2.windows(2).all(|w| w[0] <= w[1]), "{r2:?}");
    }

    #[test]
    fn reward_slice_peaks_at_the_grasp_center() {
        let v = reward_slice("lift-hold", "right", 1.0, 0.2, 21, false).unwrap();
        let values: Vec<f64> = v["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(values.len(), 21 * 21);
        let best = values.iter().cloned().fold(f64::MIN, f64::max);
        assert!(values[10 * 21 + 10] >= best - 0.1);
        assert!(reward_slice("lift-hold", "middle", 1.0, 0.2, 5, false).is_err());
        assert!(episode("stir", 0, 0.0, &[0.1]).is_err());
    }
}
