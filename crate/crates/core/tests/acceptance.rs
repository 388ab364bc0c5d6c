//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Criterion ids given as arguments (`-- A1 A2`) restrict the run to those.
//!
//! The training criteria run on a fixed iteration budget chosen to fit the
//! wall-clock limit on a single core; every run is timed and the limit is
//! checked as well.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bidex_core::demo::{fingertip_positions, generate_synthetic_demo, SyntheticDemoSpec, Template, FINGERTIPS};
use bidex_core::eval::{eval_r1, eval_r2, sweep_thresholds, EvalReport};
use bidex_core::math::{Pose, RngStream, UnitQuat, Vec3};
use bidex_core::nn::gradcheck::{gradient_check, sample_coordinates};
use bidex_core::nn::mlp::{Mlp, MlpCache, MlpSpec};
use bidex_core::nn::params::ParamBuilder;
use bidex_core::nn::pointnet::{PointEncoder, PointEncoderCache, PointEncoderSpec};
use bidex_core::pipeline::{self, PolicyVariant, RunConfig};
use bidex_core::reward::{
    approach_reward, bonus_reward, lift_reward, total_reward, track_reward, LiftTarget, RewardToggles, RewardWeights,
    SideObservation,
};
use bidex_core::sim::{EpisodeHeader, EpisodeLog, Stage, StepRecord};
use bidex_core::task::{DatasetEntry, DatasetManifest, DATASET_MANIFEST};

const REWARD_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-5;
const GRAD_H: f64 = 1e-5;
const WALL_LIMIT: Duration = Duration::from_secs(30 * 60);
const EPS: f64 = 0.1;

const TEACHER_ITERATIONS: u64 = 1500;
const DAGGER_ITERATIONS: u64 = 300;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, pass: bool, detail: String) -> Line {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    Line { id, pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

// ---------------------------------------------------------------- A1

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: Vec3, b: Vec3) -> [f64; 3] {
    [a.x - b.x, a.y - b.y, a.z - b.z]
}

fn rotation_matrix(q: UnitQuat) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotation angle between two orientations from the trace of `Aᵀ·B`.
fn angle_oracle(a: UnitQuat, b: UnitQuat) -> f64 {
    let (ra, rb) = (rotation_matrix(a), rotation_matrix(b));
    let mut trace = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            trace += ra[k][i] * rb[k][i];
        }
    }
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

fn appro_oracle(wrist: Vec3, tips: &[Vec3], gc: Vec3, w_r: f64) -> f64 {
    let mut ft = 0.0;
    for t in tips {
        ft += norm(sub(*t, gc));
    }
    -(norm(sub(wrist, gc)) + w_r * ft)
}

fn lift_oracle(wrist: Vec3, tips: &[Vec3], gc: Vec3, obj: Pose, reference: Pose, init: Vec3, w: &RewardWeights) -> f64 {
    let ft: f64 = tips.iter().map(|t| norm(sub(*t, gc))).sum();
    if norm(sub(wrist, gc)) > w.lambda_w || ft > w.lambda_ft {
        return 0.0;
    }
    let d = norm(sub(obj.position, reference.position));
    let span = norm(sub(init, reference.position));
    let r_pos = if span <= 1e-9 {
        f64::from(d <= w.eps_succ)
    } else {
        f64::max(0.0, 1.0 - d / span)
    };
    r_pos - w.w_q * angle_oracle(obj.orientation, reference.orientation)
}

fn bonus_oracle(obj: Vec3, reference: Vec3, eps: f64) -> f64 {
    let d = norm(sub(obj, reference));
    if d <= eps {
        1.0 / (1.0 + d)
    } else {
        0.0
    }
}

fn track_oracle(obj: Vec3, demo: &[Vec3], t: Option<usize>, f: usize, w_t: f64) -> f64 {
    let Some(t) = t else { return 0.0 };
    let mut i = t / f;
    if t % f != 0 {
        i += 1;
    }
    let i = i.min(demo.len() - 1);
    (-w_t * norm(sub(obj, demo[i]))).exp()
}

fn total_oracle(o: &SideObservation<'_>, w: &RewardWeights) -> f64 {
    let track = track_oracle(o.object.position, o.demo_positions, o.t_since_tracking, w.f, w.w_t);
    if w.toggles.disable_stage1 {
        return w.w4 * track;
    }
    let gc = if w.toggles.use_geometric_center { o.geometric_center } else { o.grasp_center };
    let appro = appro_oracle(o.wrist, o.fingertips, gc, w.w_r);
    let lift = lift_oracle(o.wrist, o.fingertips, gc, o.object, o.reference, o.initial_position, w);
    let bonus = if w.toggles.disable_bonus {
        0.0
    } else {
        bonus_oracle(o.object.position, o.reference.position, w.eps_succ)
    };
    w.w1 * appro + w.w2 * lift + w.w3 * bonus + w.w4 * track
}

fn v(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

fn random_vec(rng: &mut RngStream, scale: f64) -> Vec3 {
    v(scale * rng.normal(), scale * rng.normal(), scale * rng.normal())
}

fn random_quat(rng: &mut RngStream) -> UnitQuat {
    let axis = random_vec(rng, 1.0);
    UnitQuat::from_axis_angle(axis, rng.uniform() * std::f64::consts::PI)
}

fn a1() -> Line {
    let start = Instant::now();
    let w = RewardWeights::default();
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let gc = v(0.1, 0.2, 0.3);
    let tips: Vec<Vec3> = [v(0.05, 0.0, 0.0), v(-0.05, 0.0, 0.0), v(0.0, 0.05, 0.0), v(0.0, 0.0, -0.05)]
        .iter()
        .map(|d| gc + *d)
        .collect();
    let appro = approach_reward(gc + v(0.0, 0.1, 0.0), &tips, gc, w.w_r);
    check(appro, -0.5);
    check(appro, appro_oracle(gc + v(0.0, 0.1, 0.0), &tips, gc, w.w_r));
    check(approach_reward(gc, &[gc; 4], gc, w.w_r), 0.0);

    let reference = Pose::new(v(0.0, 0.0, 0.5), UnitQuat::IDENTITY);
    let init = v(0.0, 0.0, 0.3);
    let half = Pose::new(v(0.0, 0.0, 0.4), UnitQuat::from_axis_angle(v(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2));
    let near = [gc; FINGERTIPS];
    let lifted = lift_reward(gc, &near, gc, &LiftTarget { object: half, reference, initial_position: init }, &w);
    check(lifted, 0.5 - 0.5 * std::f64::consts::FRAC_PI_2);
    check(lifted, -0.285_398_163_397_448_3);
    check(lifted, lift_oracle(gc, &near, gc, half, reference, init, &w));
    let at_ref = lift_reward(gc, &near, gc, &LiftTarget { object: reference, reference, initial_position: init }, &w);
    check(at_ref, 1.0);
    let far = lift_reward(gc + v(0.5, 0.0, 0.0), &near, gc, &LiftTarget { object: reference, reference, initial_position: init }, &w);
    check(far, 0.0);

    check(bonus_reward(v(0.1, 0.0, 0.0), Vec3::ZERO, 0.1), 1.0 / 1.1);
    check(bonus_reward(v(0.1, 0.0, 0.0), Vec3::ZERO, 0.1), 0.909_090_909_090_909_1);
    check(bonus_reward(v(0.11, 0.0, 0.0), Vec3::ZERO, 0.1), 0.0);
    check(bonus_reward(Vec3::ZERO, Vec3::ZERO, 0.1), 1.0);

    let demo = [Vec3::ZERO, v(0.0, 0.1, 0.0), v(0.0, 0.2, 0.0)];
    check(track_reward(v(0.1, 0.0, 0.0), &demo, Some(0), w.f, w.w_t), (-1.5f64).exp());
    check(track_reward(v(0.1, 0.0, 0.0), &demo, Some(0), w.f, w.w_t), 0.223_130_160_148_429_83);
    check(track_reward(v(0.0, 0.1, 0.0), &demo, Some(3), w.f, w.w_t), 1.0);
    check(track_reward(v(0.0, 0.1, 0.0), &demo, None, w.f, w.w_t), 0.0);

    let c = bidex_core::reward::compose_reward(-0.5, 1.0, 1.0, 0.0, &w);
    check(c.align, 1.75);
    check(c.total, 1.75);

    let mut rng = RngStream::new(11, 0);
    let mut fuzz = 0;
    for k in 0..2000 {
        let gc = random_vec(&mut rng, 0.3);
        let wrist = Pose::new(gc + random_vec(&mut rng, 0.06), random_quat(&mut rng));
        let closure = [rng.uniform(); FINGERTIPS];
        let tips = fingertip_positions(&wrist, &closure);
        let reference = Pose::new(random_vec(&mut rng, 0.3), random_quat(&mut rng));
        let object = Pose::new(reference.position + random_vec(&mut rng, 0.06), random_quat(&mut rng));
        let demo: Vec<Vec3> = (0..6).map(|_| random_vec(&mut rng, 0.3)).collect();
        let toggles = RewardToggles {
            disable_stage1: k % 7 == 0,
            use_geometric_center: k % 5 == 0,
            disable_bonus: k % 3 == 0,
        };
        let weights = RewardWeights { toggles, ..w };
        let obs = SideObservation {
            wrist: wrist.position,
            fingertips: &tips,
            grasp_center: gc,
            geometric_center: gc + random_vec(&mut rng, 0.02),
            object,
            reference,
            initial_position: reference.position + random_vec(&mut rng, 0.2),
            t_since_tracking: (k % 2 == 0).then(|| rng.below(40)),
            demo_positions: &demo,
        };
        let b = total_reward(&obs, &weights);
        check(b.total, total_oracle(&obs, &weights));
        check(b.align, weights.w1 * b.appro + weights.w2 * b.lift + weights.w3 * b.bonus);
        check(b.total, b.align + weights.w4 * b.track);
        fuzz += 1;
    }
    let elapsed = start.elapsed();
    report(
        "A1",
        worst <= REWARD_TOL && elapsed < Duration::from_secs(1),
        format!(
            "reward oracles: max |err| {worst:.2e} (tol {REWARD_TOL:.0e}) over fixed cases and {fuzz} fuzzed observations, {:.3} s (limit 1 s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- A2

fn mlp_check(hidden: &[usize], input: usize, output: usize, tanh: bool, seed: u64) -> f64 {
    let mut b = ParamBuilder::new();
    let mut spec = MlpSpec::new(input, hidden, output);
    if tanh {
        spec = spec.with_tanh();
    }
    let mlp = Mlp::alloc(spec, &mut b, "net").unwrap();
    let mut p = b.finish().data;
    let mut rng = RngStream::new(seed, 0);
    mlp.init(&mut p, 1.0, &mut rng);
    let batch = 3;
    let x: Vec<f64> = (0..batch * input).map(|_| rng.normal()).collect();
    let dy: Vec<f64> = (0..batch * output).map(|_| rng.normal()).collect();
    let loss = |q: &[f64]| {
        let mut c = MlpCache::default();
        let y = mlp.forward(q, &x, batch, &mut c).unwrap();
        y.iter().zip(&dy).map(|(a, t)| a * t).sum::<f64>()
    };
    let mut cache = MlpCache::default();
    mlp.forward(&p, &x, batch, &mut cache).unwrap();
    let mut g = vec![0.0; p.len()];
    mlp.backward(&p, &cache, &dy, &mut g, false);
    let coords = sample_coordinates(p.len(), 3000, &mut rng);
    gradient_check(&mut p, &g, &coords, GRAD_H, loss).rel_error
}

fn encoder_check(seed: u64) -> f64 {
    let spec = PointEncoderSpec::default();
    let mut b = ParamBuilder::new();
    let enc = PointEncoder::alloc(spec, &mut b, "enc").unwrap();
    let mut p = b.finish().data;
    let mut rng = RngStream::new(seed, 0);
    enc.init(&mut p, &mut rng);
    let (batch, points) = (8, 48);
    let clouds: Vec<f64> = (0..batch * points * 3).map(|_| 0.1 * rng.normal()).collect();
    let width = enc.output_width();
    let dy: Vec<f64> = (0..batch * width).map(|_| rng.normal()).collect();
    let loss = |q: &[f64]| {
        let mut c = PointEncoderCache::default();
        let y = enc.forward(q, &clouds, batch, points, &mut c).unwrap();
        y.iter().zip(&dy).map(|(a, t)| a * t).sum::<f64>()
    };
    let mut cache = PointEncoderCache::default();
    enc.forward(&p, &clouds, batch, points, &mut cache).unwrap();
    let mut g = vec![0.0; p.len()];
    enc.backward(&p, &cache, &dy, &mut g);
    let coords = sample_coordinates(p.len(), 3000, &mut rng);
    gradient_check(&mut p, &g, &coords, GRAD_H, loss).rel_error
}

fn a2() -> Line {
    let start = Instant::now();
    let hidden = [128, 128, 64, 64];
    let actor = mlp_check(&hidden, 64, 10, true, 1);
    let critic = mlp_check(&hidden, 64, 1, false, 2);
    let encoder = encoder_check(3);
    let elapsed = start.elapsed();
    let worst = actor.max(critic).max(encoder);
    report(
        "A2",
        worst < GRAD_TOL && elapsed < Duration::from_secs(60),
        format!(
            "gradient check (h = {GRAD_H:.0e}): actor {actor:.2e}, critic {critic:.2e}, point encoder {encoder:.2e} (tol {GRAD_TOL:.0e}), {:.1} s (limit 60 s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- A8

fn random_log(rng: &mut RngStream) -> EpisodeLog {
    let len = 20 + rng.below(100);
    let u = 1 + rng.below(12);
    let f = 1 + rng.below(6);
    let l_track = 2 + rng.below(20);
    let scale = 0.02 + 0.12 * rng.uniform();
    let object_reference = random_vec(rng, 0.3);
    let tool_reference = random_vec(rng, 0.3);
    let tracking_object: Vec<Vec3> = (0..l_track).map(|_| random_vec(rng, 0.3)).collect();
    let tracking_tool: Vec<Vec3> = (0..l_track).map(|_| random_vec(rng, 0.3)).collect();
    let origin = (rng.uniform() < 0.8).then(|| rng.below(len));
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let since = origin.filter(|&o| t >= o).map(|o| t - o);
        let (obj_target, tool_target) = match since {
            None => (object_reference, tool_reference),
            Some(s) => {
                let i = s.div_ceil(f).min(l_track - 1);
                (tracking_object[i], tracking_tool[i])
            }
        };
        let mut pose = |target: Vec3| {
            let p = if rng.uniform() < 0.1 { target } else { target + random_vec(rng, scale) };
            Pose::from_translation(p).to_array()
        };
        let object_pose = pose(obj_target);
        let tool_pose = pose(tool_target);
        steps.push(StepRecord {
            t: t + 1,
            stage: if since.is_some() { Stage::Tracking } else { Stage::Aligning },
            t_since_tracking: since,
            tool_pose,
            object_pose,
            left_wrist: Pose::IDENTITY.to_array(),
            right_wrist: Pose::IDENTITY.to_array(),
            rewards_left: Default::default(),
            rewards_right: Default::default(),
            object_attached: false,
            tool_attached: false,
        });
    }
    EpisodeLog {
        header: EpisodeHeader {
            task_id: "constructed".into(),
            episode_length: len,
            u,
            f,
            tool_reference,
            object_reference,
            tracking_tool,
            tracking_object,
        },
        steps,
    }
}

fn within(pose: &[f64; 7], target: Vec3, eps: f64) -> bool {
    let d = [pose[0] - target.x, pose[1] - target.y, pose[2] - target.z];
    norm(d) <= eps
}

/// Brute force: every window of `u` consecutive steps is scanned.
fn r1_oracle(log: &EpisodeLog, eps: f64) -> bool {
    let h = &log.header;
    let ok: Vec<bool> = log
        .steps
        .iter()
        .map(|s| within(&s.object_pose, h.object_reference, eps) && within(&s.tool_pose, h.tool_reference, eps))
        .collect();
    ok.len() >= h.u && (0..=ok.len() - h.u).any(|start| ok[start..start + h.u].iter().all(|&b| b))
}

/// Brute force: walks the tracking clock and checks the first step that
/// maps to each demo index.
fn r2_oracle(log: &EpisodeLog, eps: f64) -> (usize, usize) {
    let h = &log.header;
    let l = h.tracking_tool.len();
    let mut seen = vec![false; l];
    let mut hits = 0;
    for s in &log.steps {
        let Some(t) = s.t_since_tracking else { continue };
        let mut i = t / h.f;
        if t % h.f != 0 {
            i += 1;
        }
        if i >= l || seen[i] {
            continue;
        }
        seen[i] = true;
        if within(&s.object_pose, h.tracking_object[i], eps) && within(&s.tool_pose, h.tracking_tool[i], eps) {
            hits += 1;
        }
    }
    (hits, l)
}

fn sweep_is_monotone(report: &EvalReport) -> bool {
    let mut by_key: BTreeMap<(String, String), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in &report.rows {
        by_key.entry((r.split.clone(), r.task_id.clone())).or_default().push((r.threshold, r.r1, r.r2));
    }
    by_key.values_mut().all(|rows| {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].2 <= w[1].2)
    })
}

fn a8(reports: &[PathBuf]) -> Line {
    let mut rng = RngStream::new(8, 0);
    let logs: Vec<EpisodeLog> = (0..200).map(|_| random_log(&mut rng)).collect();
    let mut mismatches = 0;
    let mut r1_count = 0;
    for log in &logs {
        let (u, f) = (log.header.u, log.header.f);
        for eps in [0.03, 0.05, 0.075, 0.1, 0.2] {
            let single = std::slice::from_ref(log);
            let want1 = r1_oracle(log, eps);
            r1_count += usize::from(want1 && eps == EPS);
            let (hits, total) = r2_oracle(log, eps);
            if eval_r1(single, eps, u) != f64::from(u8::from(want1)) || eval_r2(single, eps, f) != hits as f64 / total as f64 {
                mismatches += 1;
            }
        }
    }
    // pooled rates over logs sharing u and f
    let mut pooled_ok = true;
    let mut groups: BTreeMap<(usize, usize), Vec<EpisodeLog>> = BTreeMap::new();
    for l in &logs {
        groups.entry((l.header.u, l.header.f)).or_default().push(l.clone());
    }
    for ((u, f), group) in &groups {
        let n1 = group.iter().filter(|l| r1_oracle(l, EPS)).count();
        let (h, t) = group.iter().map(|l| r2_oracle(l, EPS)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        pooled_ok &= eval_r1(group, EPS, *u) == n1 as f64 / group.len() as f64;
        pooled_ok &= eval_r2(group, EPS, *f) == h as f64 / t as f64;
        let sweep = sweep_thresholds(group, &[0.02, 0.05, 0.075, 0.1, 0.15], *u, *f).unwrap();
        pooled_ok &= sweep.windows(2).all(|w| w[0].r1 <= w[1].r1 && w[0].r2 <= w[1].r2);
    }
    let mut monotone = 0;
    let mut unreadable = Vec::new();
    for path in reports {
        match fs::read(path).ok().and_then(|b| EvalReport::from_json(&b).ok()) {
            Some(r) if sweep_is_monotone(&r) => monotone += 1,
            Some(_) => {}
            None => unreadable.push(path.display().to_string()),
        }
    }
    let pass = mismatches == 0 && pooled_ok && monotone == reports.len() && unreadable.is_empty();
    report(
        "A8",
        pass,
        format!(
            "metric oracles: {mismatches} mismatches over 200 constructed logs x 5 thresholds ({r1_count} r1 successes at eps 0.1), pooled rates {}; sweep monotone on {monotone}/{} evaluation reports{}",
            if pooled_ok { "equal" } else { "DIFFER" },
            reports.len(),
            if unreadable.is_empty() { String::new() } else { format!(", unreadable: {unreadable:?}") }
        ),
    )
}

// ---------------------------------------------------------------- pipeline helpers

/// Writes `n` demos of one template that share tool and object, so they
/// form a single task group.
fn write_dataset(dir: &Path, template: Template, n: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let (tool, object) = template.catalog();
    let mut demos = Vec::new();
    for i in 0..n {
        let id = format!("{}-{i:02}", template.name());
        let spec = SyntheticDemoSpec::new(&id, template, &format!("{tool}1"), &format!("{object}1"));
        let demo = generate_synthetic_demo(&spec, &mut RngStream::new(seed, i as u64)).unwrap();
        let file = format!("{id}.json");
        fs::write(dir.join(&file), demo.to_bytes()).unwrap();
        demos.push(DatasetEntry { id, file });
    }
    let bytes = serde_json::to_vec_pretty(&DatasetManifest { demos }).unwrap();
    fs::write(dir.join(DATASET_MANIFEST), bytes).unwrap();
}

fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.sim.episode_length = 200;
    c.ppo.total_iterations = TEACHER_ITERATIONS;
    c.ppo.checkpoint_interval = 0;
    c.dagger.total_iterations = DAGGER_ITERATIONS;
    c.dagger.checkpoint_interval = 0;
    c.eval.n_episodes = 8;
    c
}

struct Group {
    manifest: PathBuf,
    id: String,
}

fn build_group(root: &Path, template: Template, config: &RunConfig) -> Group {
    let data = root.join(format!("{}-demos", template.name()));
    write_dataset(&data, template, 3, 20);
    let manifest = root.join(format!("{}-tasks", template.name())).join("tasks.json");
    let m = pipeline::build_tasks(&data, config, &manifest).unwrap();
    assert_eq!(m.groups.len(), 1, "one group expected");
    let id = m.groups.keys().next().unwrap().clone();
    let train = m.tasks.values().filter(|t| t.split.as_deref() == Some("train")).count();
    assert_eq!(train, 2, "two training tasks expected");
    Group { manifest, id }
}

struct Scored {
    r1: f64,
    r2: f64,
    wall: Duration,
    dir: PathBuf,
    report: PathBuf,
}

fn evaluate(group: &Group, dir: &Path, config: &RunConfig) -> (f64, f64, PathBuf) {
    let out = dir.with_extension("eval");
    let rep = pipeline::evaluate(&group.manifest, dir, config, &out, true).unwrap();
    let row = rep.aggregate("train", EPS).expect("train aggregate row");
    (row.r1, row.r2, out.join("report.json"))
}

fn teacher_run(group: &Group, dir: &Path, config: &RunConfig) -> Scored {
    let start = Instant::now();
    pipeline::train_teacher(&group.manifest, &group.id, config, dir, false).unwrap();
    let wall = start.elapsed();
    let (r1, r2, report) = evaluate(group, dir, config);
    println!(
        "  run {}: r1 {r1:.3} r2 {r2:.3} in {:.0} s",
        dir.file_name().unwrap().to_string_lossy(),
        wall.as_secs_f64()
    );
    Scored { r1, r2, wall, dir: dir.to_path_buf(), report }
}

fn seeded(config: &RunConfig, seed: u64) -> RunConfig {
    let mut c = config.clone();
    c.seeds.teacher = seed;
    c
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn within_wall(runs: &[Scored]) -> bool {
    runs.iter().all(|r| r.wall <= WALL_LIMIT)
}

fn max_wall(runs: &[Scored]) -> f64 {
    runs.iter().map(|r| r.wall.as_secs_f64()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- A9

fn strip_wall_time(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for line in text.lines() {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(serde_json::Value::Object(mut m)) => {
                m.remove("wall_time");
                out.extend(serde_json::to_vec(&m).unwrap());
            }
            _ => out.extend(line.as_bytes()),
        }
        out.push(b'\n');
    }
    out
}

fn collect_files(root: &Path, rel: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    let mut entries: Vec<_> = fs::read_dir(root.join(rel)).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let name = rel.join(p.file_name().unwrap());
        if p.is_dir() {
            collect_files(root, &name, out);
        } else {
            let bytes = fs::read(&p).unwrap();
            let is_log = name.extension().is_some_and(|e| e == "jsonl");
            // the dataset path embedded in the manifest differs between the two roots
            let bytes = if is_log {
                strip_wall_time(&bytes)
            } else {
                String::from_utf8_lossy(&bytes).replace(&root.display().to_string(), "<root>").into_bytes()
            };
            out.insert(name, bytes);
        }
    }
}

fn tiny_pipeline(root: &Path) {
    let mut c = RunConfig::from_json(
        br#"{
  "sim": {"episode_length": 40},
  "ppo": {"num_envs": 4, "hidden": [16], "total_iterations": 4, "checkpoint_interval": 2},
  "dagger": {"points": 32, "num_envs": 4, "rollout_steps": 4, "minibatch_size": 16, "hidden": [16],
             "encoder": {"point_layers": [8, 8], "post_layers": [16, 16]},
             "total_iterations": 3, "checkpoint_interval": 2},
  "bc": {"epochs": 3, "hidden": [16], "hold_steps": 2},
  "eval": {"n_episodes": 2}
}"#,
    )
    .unwrap();
    let demos = root.join("demos");
    pipeline::gen_demos(&demos, 8, &[Template::Pour, Template::LiftHold], 5).unwrap();
    let manifest = root.join("tasks").join("tasks.json");
    let m = pipeline::build_tasks(&demos, &c, &manifest).unwrap();
    let group = m
        .groups
        .iter()
        .find(|(_, ids)| ids.iter().any(|id| m.tasks[id].split.as_deref() == Some("train")))
        .map(|(g, _)| g.clone())
        .unwrap();
    let teacher = root.join("teacher");
    pipeline::train_teacher(&manifest, &group, &c, &teacher, false).unwrap();
    pipeline::distill(&manifest, &teacher, std::slice::from_ref(&group), &c, &root.join("student"), false).unwrap();
    pipeline::evaluate(&manifest, &teacher, &c, &root.join("teacher.eval"), true).unwrap();
    pipeline::evaluate(&manifest, &root.join("student"), &c, &root.join("student.eval"), false).unwrap();
    c.variant = PolicyVariant::Bc;
    pipeline::train_teacher(&manifest, &group, &c, &root.join("bc"), false).unwrap();
    pipeline::evaluate(&manifest, &root.join("bc"), &c, &root.join("bc.eval"), false).unwrap();
}

fn a9(scratch: &Path) -> Line {
    let start = Instant::now();
    let (a, b) = (scratch.join("det-a"), scratch.join("det-b"));
    for r in [&a, &b] {
        let _ = fs::remove_dir_all(r);
        fs::create_dir_all(r).unwrap();
        tiny_pipeline(r);
    }
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect_files(&a, Path::new(""), &mut fa);
    collect_files(&b, Path::new(""), &mut fb);
    let same_set = fa.keys().eq(fb.keys());
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let count = |f: &dyn Fn(&Path) -> bool| fa.keys().filter(|k| f(k)).count();
    let ckpts = count(&|p| p.extension().is_some_and(|e| e == "ckpt"));
    let reports = count(&|p| p.file_name().is_some_and(|n| n == "report.json" || n == "report.csv"));
    let manifests = count(&|p| p.file_name().is_some_and(|n| n == "tasks.json" || n == "manifest.json"));
    report(
        "A9",
        same_set && differing.is_empty() && ckpts > 0 && reports > 0 && manifests > 0,
        format!(
            "determinism: {} files compared across two full pipeline runs ({manifests} manifests, {ckpts} checkpoints, {reports} reports), {} differ{}, {:.1} s",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {differing:?}") },
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- main

fn main() {
    let threads = pipeline::init_threads().expect("thread pool");
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).unwrap();
    println!(
        "acceptance: {threads} worker threads; teacher budget {TEACHER_ITERATIONS} iterations, DAgger budget {DAGGER_ITERATIONS} iterations; artifacts in {}",
        scratch.display()
    );
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| only.is_empty() || only.iter().any(|o| o.eq_ignore_ascii_case(id));
    let mut lines = Vec::new();
    if wanted("A1") {
        lines.push(a1());
    }
    if wanted("A2") {
        lines.push(a2());
    }
    if wanted("A9") {
        lines.push(a9(&scratch));
    }
    let mut reports = Vec::new();
    if ["A3", "A4", "A5", "A6", "A7"].iter().any(|id| wanted(id)) {
        training_criteria(&scratch, &wanted, &mut lines, &mut reports);
    }
    if wanted("A8") {
        lines.push(a8(&reports));
    }
    finish(&lines);
}

fn training_criteria(scratch: &Path, wanted: &dyn Fn(&str) -> bool, lines: &mut Vec<Line>, reports: &mut Vec<PathBuf>) {
    let config = desk_config();

    if wanted("A3") {
        let lift = build_group(scratch, Template::LiftHold, &config);
        let runs: Vec<Scored> = SEEDS
            .iter()
            .map(|&s| teacher_run(&lift, &scratch.join(format!("lift-ippo-{s}")), &seeded(&config, s)))
            .collect();
        reports.extend(runs.iter().map(|r| r.report.clone()));
        let r1s: Vec<f64> = runs.iter().map(|r| r.r1).collect();
        let m = median(r1s.clone());
        lines.push(report(
            "A3",
            m >= 0.90 && within_wall(&runs),
            format!(
                "lift-hold IPPO: median r1 {m:.3} (target >= 0.90) over seeds {}, slowest run {:.0} s (limit 1800 s)",
                fmt(&r1s),
                max_wall(&runs)
            ),
        ));
    }
    if !["A4", "A5", "A6", "A7"].iter().any(|id| wanted(id)) {
        return;
    }

    let pour = build_group(scratch, Template::Pour, &config);
    let pour_runs = |name: &str, toggles: RewardToggles, reports: &mut Vec<PathBuf>| -> Vec<Scored> {
        let mut c = config.clone();
        c.reward.toggles = toggles;
        let runs: Vec<Scored> = SEEDS
            .iter()
            .map(|&s| teacher_run(&pour, &scratch.join(format!("pour-{name}-{s}")), &seeded(&c, s)))
            .collect();
        reports.extend(runs.iter().map(|r| r.report.clone()));
        runs
    };
    let defaults = pour_runs("default", RewardToggles::default(), reports);
    let default_r1s: Vec<f64> = defaults.iter().map(|r| r.r1).collect();
    let default_r2s: Vec<f64> = defaults.iter().map(|r| r.r2).collect();
    let default_r1 = median(default_r1s.clone());
    let default_r2 = median(default_r2s.clone());
    if wanted("A4") {
        lines.push(report(
            "A4",
            default_r2 >= 0.50 && within_wall(&defaults),
            format!(
                "pour IPPO: median r2 {default_r2:.3} (target >= 0.50) over seeds {}, slowest run {:.0} s (limit 1800 s)",
                fmt(&default_r2s),
                max_wall(&defaults)
            ),
        ));
    }

    if wanted("A5") {
        let no_stage1 = pour_runs("no-stage1", RewardToggles { disable_stage1: true, ..Default::default() }, reports);
        let no_bonus = pour_runs("no-bonus", RewardToggles { disable_bonus: true, ..Default::default() }, reports);
        let s1: Vec<f64> = no_stage1.iter().map(|r| r.r1).collect();
        let nb: Vec<f64> = no_bonus.iter().map(|r| r.r2).collect();
        let (s1_m, nb_m) = (median(s1.clone()), median(nb.clone()));
        lines.push(report(
            "A5",
            s1_m <= 0.5 * default_r1 && nb_m < default_r2,
            format!(
                "ablations: w/o stage 1 median r1 {s1_m:.3} {} vs default {default_r1:.3} {} (need <= half); w/o bonus median r2 {nb_m:.3} {} vs default {default_r2:.3} (need strictly below)",
                fmt(&s1),
                fmt(&default_r1s),
                fmt(&nb)
            ),
        ));
    }
    if !wanted("A6") && !wanted("A7") {
        return;
    }

    // the student learns from the median pour teacher
    let mut order: Vec<usize> = (0..defaults.len()).collect();
    order.sort_by(|&a, &b| defaults[a].r2.total_cmp(&defaults[b].r2));
    let pick = order[order.len() / 2];
    let teacher = &defaults[pick];
    let teacher_config = seeded(&config, SEEDS[pick]);
    let student = |k: usize| -> (Scored, f64) {
        let mut c = teacher_config.clone();
        c.dagger.future_k = k;
        let dir = scratch.join(format!("pour-student-k{k}"));
        let start = Instant::now();
        pipeline::distill(&pour.manifest, &teacher.dir, &[], &c, &dir, false).unwrap();
        let wall = start.elapsed();
        let log = fs::read_to_string(dir.join("distill_log.jsonl")).unwrap();
        let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
        let mse = last["holdout_mse"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(0.0, f64::max);
        let (r1, r2, report) = evaluate(&pour, &dir, &c);
        println!("  run pour-student-k{k}: r1 {r1:.3} r2 {r2:.3} held-out mse {mse:.5} in {:.0} s", wall.as_secs_f64());
        (Scored { r1, r2, wall, dir, report }, mse)
    };
    let (k5, mse5) = student(5);
    reports.push(k5.report.clone());
    if wanted("A6") {
        let (k0, _) = student(0);
        reports.push(k0.report.clone());
        lines.push(report(
            "A6",
            k5.r2 >= 0.8 * teacher.r2 && mse5 < 0.01 && (k0.r2 - k5.r2).abs() <= 0.10 && k5.wall <= WALL_LIMIT,
            format!(
                "DAgger student (P = 512, K = 5): r2 {:.3} vs teacher {:.3} (need >= 0.8x), held-out MSE {mse5:.5} (need < 0.01), {:.0} s (limit 1800 s); K = 0 r2 {:.3} (need within 0.10)",
                k5.r2,
                teacher.r2,
                k5.wall.as_secs_f64(),
                k0.r2
            ),
        ));
    }

    if wanted("A7") {
        let mut bc_config = config.clone();
        bc_config.variant = PolicyVariant::Bc;
        let bc = teacher_run(&pour, &scratch.join("pour-bc"), &bc_config);
        reports.push(bc.report.clone());
        lines.push(report(
            "A7",
            bc.r2 <= 0.5 * k5.r2,
            format!("BC baseline r2 {:.3} vs DAgger student r2 {:.3} (need <= 0.5x)", bc.r2, k5.r2),
        ));
    }
}

fn finish(lines: &[Line]) {
    println!();
    for l in lines {
        println!("{} {:<4} {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", lines.len());
    } else {
        println!("acceptance: {} of {} criteria fail: {}", failed.len(), lines.len(), failed.join(", "));
        std::process::exit(1);
    }
}
