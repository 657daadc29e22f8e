//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its verdict under `cargo test`, and so the timings are not skewed
//! by other tests running alongside.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shoulder_core::harness::{self, ExperimentConfig, WheelSpec};
use shoulder_core::ik::{ik_fixed_scapula, scapulohumeral_ik, IkRequest, IkSettings, RhythmParams};
use shoulder_core::jmm::{JmmConfig, JointMuscleMap};
use shoulder_core::kinematics::{default_model, forward_kinematics, hand_jacobian_indexed, JointVector, RobotModel, Side};
use shoulder_core::muscle::{geometric_jmm_dataset, muscle_jacobian, muscle_lengths};
use shoulder_core::perception::{hand_pose_from_camera, hand_pose_from_object, observe_markers, MarkerId, MarkerNoise};
use shoulder_core::plant::{plant_build, Plant, PlantConfig, DEFAULT_TENSION_TARGET, TENSION_BAND};

struct Outcome {
    pass: bool,
    detail: String,
    /// Every number the criterion computed, for the determinism check.
    log: String,
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn(&RobotModel) -> Outcome,
}

const CRITERIA: [Criterion; 7] = [
    Criterion {
        id: 1,
        name: "rhythm ratio",
        budget: Duration::from_secs(1),
        run: rhythm_ratio,
    },
    Criterion {
        id: 2,
        name: "load reduction",
        budget: Duration::from_secs(10),
        run: load_reduction,
    },
    Criterion {
        id: 3,
        name: "IK and Jacobian correctness",
        budget: Duration::from_secs(30),
        run: ik_correctness,
    },
    Criterion {
        id: 4,
        name: "drift cancellation",
        budget: Duration::from_secs(5),
        run: drift_cancellation,
    },
    Criterion {
        id: 5,
        name: "geometric pre-training",
        budget: Duration::from_secs(120),
        run: geometric_pretraining,
    },
    Criterion {
        id: 6,
        name: "before/after learning",
        budget: Duration::from_secs(600),
        run: before_after_learning,
    },
    Criterion {
        id: 7,
        name: "initial posture",
        budget: Duration::from_secs(30),
        run: initial_posture,
    },
];

fn request(side: Side, target: shoulder_core::kinematics::Pose, q_init: JointVector) -> IkRequest {
    IkRequest {
        target,
        hand: side,
        q_init,
        settings: IkSettings::default(),
    }
}

fn neutral_scapula(m: &RobotModel, side: Side) -> JointVector {
    let mut q = m.initial_posture().clone();
    for &s in &m.arm(side).scapula {
        q[s] = 0.0;
    }
    q
}

/// Reachable arm posture with the scapula at zero, over a forward-reaching
/// range of the shoulder, elbow and wrist.
fn reaching_posture(m: &RobotModel, side: Side, rng: &mut ChaCha8Rng) -> JointVector {
    let arm = m.arm(side);
    let mut q = neutral_scapula(m, side);
    let gh = &arm.glenohumeral;
    let mut set = |d: usize, lo: f64, hi: f64| q[d] = rng.random_range(lo..hi).to_radians();
    set(gh[0], -70.0, -10.0);
    set(gh[1], 5.0, 45.0);
    set(gh[2], -40.0, 20.0);
    set(arm.elbow[0], -120.0, -50.0);
    set(arm.wrist[0], -30.0, 30.0);
    set(arm.wrist[1], -30.0, 30.0);
    set(arm.wrist[2], -20.0, 20.0);
    q
}

fn rhythm_ratio(m: &RobotModel) -> Outcome {
    let params = RhythmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut log = String::new();
    let (mut solved, mut exact) = (0, 0);
    for i in 0..200 {
        let side = Side::BOTH[i % 2];
        let truth = reaching_posture(m, side, &mut rng);
        let req = request(side, m.hand_pose(&truth, side), neutral_scapula(m, side));
        let Ok(sol) = scapulohumeral_ik(m, &req, params) else {
            writeln!(log, "{i} failed").unwrap();
            continue;
        };
        solved += 1;
        let ok = sol.scapula_targets.iter().zip(&m.arm(side).rhythm).all(|(t, &(scap, shoulder))| {
            t.dof == scap && t.unclamped == params.a * sol.first_pass[shoulder] && (t.clamped || sol.q[scap] == t.unclamped)
        });
        exact += usize::from(ok);
        writeln!(log, "{i} {:?}", sol.q.as_slice()).unwrap();
    }

    // Spot value: find the target whose first-pass shoulder roll is 4.9°.
    let side = Side::Left;
    let arm = m.arm(side);
    let (scap_roll, sh_roll) = arm.rhythm[0];
    let base = {
        let mut q = neutral_scapula(m, side);
        q[arm.glenohumeral[0]] = (-40f64).to_radians();
        q
    };
    let first_pass_roll = |truth_roll: f64| {
        let mut q = base.clone();
        q[sh_roll] = truth_roll;
        let req = request(side, m.hand_pose(&q, side), neutral_scapula(m, side));
        let sol = scapulohumeral_ik(m, &req, params).expect("spot target is reachable");
        (sol.first_pass[sh_roll], sol)
    };
    let goal = 4.9f64.to_radians();
    let (mut x0, mut x1) = (goal, goal + 0.01);
    let (mut f0, _) = first_pass_roll(x0);
    let (mut f1, mut sol) = first_pass_roll(x1);
    for _ in 0..30 {
        if (f1 - goal).abs() < 1e-7 {
            break;
        }
        let x2 = x1 - (f1 - goal) * (x1 - x0) / (f1 - f0);
        (x0, f0) = (x1, f1);
        x1 = x2;
        (f1, sol) = first_pass_roll(x1);
    }
    let sh_deg = f1.to_degrees();
    let sc_deg = sol.q[scap_roll].to_degrees();
    writeln!(log, "spot {sh_deg:?} {sc_deg:?}").unwrap();
    let spot_ok = (sh_deg - 4.9).abs() < 1e-4 && (sc_deg - 1.8).abs() <= 0.1;
    Outcome {
        pass: solved >= 190 && exact == solved && spot_ok,
        detail: format!(
            "{exact}/{solved} solves exact ({} failed); first pass {sh_deg:.3} deg -> scapula roll {sc_deg:.3} deg",
            200 - solved
        ),
        log,
    }
}

fn load_reduction(m: &RobotModel) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut log = String::new();
    let (mut reduced, mut accurate) = (0, 0);
    let n = 200;
    for i in 0..n {
        let side = Side::BOTH[i % 2];
        let arm = m.arm(side);
        let truth = reaching_posture(m, side, &mut rng);
        let req = request(side, m.hand_pose(&truth, side), neutral_scapula(m, side));
        let (Ok(fixed), Ok(rhythm)) = (ik_fixed_scapula(m, &req), scapulohumeral_ik(m, &req, RhythmParams::default())) else {
            writeln!(log, "{i} failed").unwrap();
            continue;
        };
        let on_target = |q: &JointVector| {
            let p = m.hand_pose(q, side);
            p.position_distance(&req.target) <= 1e-3 && p.rotation_distance(&req.target) <= 1e-2
        };
        accurate += usize::from(on_target(&fixed.q) && on_target(&rhythm.q));
        let smaller = arm.rhythm.iter().all(|&(_, sh)| rhythm.q[sh].abs() <= fixed.q[sh].abs());
        reduced += usize::from(smaller);
        writeln!(log, "{i} {:?} {:?}", fixed.q.as_slice(), rhythm.q.as_slice()).unwrap();
    }
    Outcome {
        pass: reduced * 10 >= n * 9 && accurate == n,
        detail: format!("shoulder roll/pitch reduced in {reduced}/{n}; both on target in {accurate}/{n}"),
        log,
    }
}

fn ik_correctness(m: &RobotModel) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut log = String::new();
    let (mut ok, mut worst_pos, mut worst_rot) = (0, 0.0f64, 0.0f64);
    let n = 1000;
    for i in 0..n {
        let side = Side::BOTH[i % 2];
        let mut truth = m.initial_posture().clone();
        for d in m.arm(side).ik_joints() {
            truth[d] = m.clamp_dof(d, truth[d] + rng.random_range(-25.0f64..25.0).to_radians());
        }
        let target = m.hand_pose(&truth, side);
        if let Ok(sol) = ik_fixed_scapula(m, &request(side, target, m.initial_posture().clone())) {
            let got = m.hand_pose(&sol.q, side);
            let (p, r) = (got.position_distance(&target), got.rotation_distance(&target));
            worst_pos = worst_pos.max(p);
            worst_rot = worst_rot.max(r);
            ok += usize::from(p <= 1e-3 && r <= 1e-2);
            writeln!(log, "{i} {:?}", sol.q.as_slice()).unwrap();
        } else {
            writeln!(log, "{i} failed").unwrap();
        }
    }

    let h = 1e-6;
    let random_q = |rng: &mut ChaCha8Rng| JointVector::from_vec(m.dofs.iter().map(|d| rng.random_range(d.lower..=d.upper)).collect());
    let mut hand_err = 0.0f64;
    let mut muscle_err = 0.0f64;
    for _ in 0..200 {
        let q = random_q(&mut rng);
        for side in Side::BOTH {
            let dofs = m.arm(side).all_joints();
            let j = hand_jacobian_indexed(m, &q, side, &dofs).unwrap();
            for (c, &d) in dofs.iter().enumerate() {
                let (mut qp, mut qm) = (q.clone(), q.clone());
                qp[d] += h;
                qm[d] -= h;
                let (pp, pm) = (m.hand_pose(&qp, side), m.hand_pose(&qm, side));
                let lin = (pp.position - pm.position) / (2.0 * h);
                let ang = (pp.orientation * pm.orientation.inverse()).scaled_axis() / (2.0 * h);
                for r in 0..3 {
                    hand_err = hand_err.max((j[(r, c)] - lin[r]).abs()).max((j[(r + 3, c)] - ang[r]).abs());
                }
            }
        }
        for (g, group) in m.groups.iter().enumerate() {
            let j = muscle_jacobian(m, &q, g).unwrap();
            for (c, &d) in group.joints.iter().enumerate() {
                let (mut qp, mut qm) = (q.clone(), q.clone());
                qp[d] += h;
                qm[d] -= h;
                let (lp, lm) = (muscle_lengths(m, &qp), muscle_lengths(m, &qm));
                for (r, &mi) in group.muscles.iter().enumerate() {
                    muscle_err = muscle_err.max((j[(r, c)] - (lp[mi] - lm[mi]) / (2.0 * h)).abs());
                }
            }
        }
    }
    writeln!(log, "{hand_err:?} {muscle_err:?}").unwrap();
    Outcome {
        pass: ok == n && hand_err < 1e-5 && muscle_err < 1e-5,
        detail: format!(
            "{ok}/{n} round trips (worst {worst_pos:.1e} m, {worst_rot:.1e} rad); Jacobian vs central differences: hand {hand_err:.1e}, muscle {muscle_err:.1e}"
        ),
        log,
    }
}

/// Plant driven to the initial posture with every scapula DOF at `scapula_deg`.
fn plant_at(m: &RobotModel, cfg: PlantConfig, scapula_deg: f64) -> Plant {
    let mut p = plant_build(m, cfg).unwrap();
    let mut q = m.initial_posture().clone();
    for side in Side::BOTH {
        for &d in &m.arm(side).scapula {
            q[d] = m.clamp_dof(d, scapula_deg.to_radians());
        }
    }
    let l = muscle_lengths(p.model(), &q);
    for _ in 0..200 {
        p.step(&l, 0.02).unwrap();
    }
    p
}

fn drift_cancellation(m: &RobotModel) -> Outcome {
    let wheel = WheelSpec::around_hands(m, m.initial_posture()).marker_pose(0.0);
    let default_gain = PlantConfig::default().camera_drift_gain;
    let mut log = String::new();
    let mut worst_rel = 0.0f64;
    let mut naive_min = f64::INFINITY;
    let camera = &m.links[m.camera_link].name;
    for gain in [0.0, 0.05, default_gain, 0.35, 0.5] {
        for scap in [-10.0, 5.0, 12.0] {
            let cfg = PlantConfig {
                camera_drift_gain: gain,
                ..PlantConfig::ideal()
            };
            let p = plant_at(m, cfg, scap);
            let obs = observe_markers(&p, &wheel, &MarkerNoise::NONE, 0).unwrap();
            let find = |id| obs.iter().find(|o| o.id == id).unwrap();
            let believed_eye = forward_kinematics(m, &p.state().q_true, camera).unwrap();
            for side in Side::BOTH {
                let truth = m.hand_pose(&p.state().q_true, side);
                let rel = hand_pose_from_object(find(MarkerId::WheelCenter), find(MarkerId::hand(side)), &wheel).unwrap();
                let naive = hand_pose_from_camera(find(MarkerId::hand(side)), &believed_eye).unwrap();
                let rel_err = rel.position_distance(&truth).max(rel.rotation_distance(&truth));
                let naive_err = naive.position_distance(&truth);
                worst_rel = worst_rel.max(rel_err);
                if gain == default_gain {
                    naive_min = naive_min.min(naive_err);
                }
                writeln!(log, "{gain} {scap} {side} {rel_err:?} {naive_err:?}").unwrap();
            }
        }
    }
    // The relative error is often exactly zero; measure the gap against the
    // tolerance instead so the ratio means something.
    let floor = worst_rel.max(1e-9);
    Outcome {
        pass: worst_rel <= 1e-9 && naive_min >= 1e3 * floor,
        detail: format!(
            "object-relative error {worst_rel:.1e} over gains 0..0.5; camera-frame error at default drift >= {naive_min:.1e} m ({:.0e}x the 1e-9 bound)",
            naive_min / floor
        ),
        log,
    }
}

fn geometric_pretraining(m: &RobotModel) -> Outcome {
    let mut log = String::new();
    let mut map = JointMuscleMap::new(m, JmmConfig::default(), 7).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for (g, group) in m.groups.iter().enumerate() {
        let data = geometric_jmm_dataset(m, g, 10_000, 100 + g as u64).unwrap();
        let report = map.pretrain(g, &data, 200, 1e-3, 3).unwrap();
        let reached = report.validation_rms_deg.iter().position(|v| *v <= 1.0);
        let held_out = geometric_jmm_dataset(m, g, 2000, 900 + g as u64).unwrap();
        let (mut sq, mut k) = (0.0, 0usize);
        for s in &held_out {
            let p = map.predict(g, &s.lengths, &s.tensions).unwrap();
            for (a, b) in p.angles.iter().zip(&s.angles) {
                sq += (a - b).to_degrees().powi(2);
                k += 1;
            }
        }
        let fresh = (sq / k as f64).sqrt();
        pass &= reached.is_some() && fresh <= 1.0;
        parts.push(format!(
            "{} {:.2} deg (<=1 at epoch {}, fresh {:.2})",
            group.name,
            report.final_validation_rms_deg(),
            reached.map_or("never".to_string(), |e| (e + 1).to_string()),
            fresh
        ));
        writeln!(log, "{} {:?} {fresh:?}", group.name, report.validation_rms_deg).unwrap();
    }
    Outcome {
        pass,
        detail: parts.join("; "),
        log,
    }
}

fn dir_contents(dir: &Path) -> String {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names
        .iter()
        .map(|p| {
            format!(
                "== {}\n{}",
                p.file_name().unwrap().to_string_lossy(),
                fs::read_to_string(p).unwrap()
            )
        })
        .collect()
}

fn before_after_learning(m: &RobotModel) -> Outcome {
    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    let map = harness::pretrain_map(m, &cfg.jmm, &cfg.pretrain).unwrap();
    let pretrain_time = t.elapsed();
    let mut log = map.to_json().unwrap();

    let run = |learning: bool| {
        let mut c = cfg.clone();
        c.learning.enabled = learning;
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let (report, _) = harness::run_with_map(&c, m, map.clone(), Some(dir.path())).unwrap();
        (report, t.elapsed(), dir_contents(dir.path()))
    };
    let (off, off_time, off_files) = run(false);
    let (on, on_time, on_files) = run(true);
    log.push_str(&off_files);
    log.push_str(&on_files);

    let wheel = cfg.wheel_for(m);
    let duration = off.summary.task_duration;
    let early_losses = off.grip_losses_between(0.0, 0.2 * duration);
    let final_start = wheel.angle_sequence.iter().rev().nth(2).map_or(0.0, |k| k.0);
    let final_losses = on.grip_losses_between(final_start, f64::INFINITY);
    let max_err = on.summary.max_tracking_error_deg;
    let windows = on.learning_window_errors(10.0);
    let steady = windows.windows(2).filter(|w| w[1] <= w[0]).count();
    let per_run = Duration::from_secs(300);
    let pass = early_losses >= 1
        && final_losses == 0
        && max_err.is_some_and(|e| e <= 2.0)
        && on.summary.aborted.is_none()
        && off_time < per_run
        && pretrain_time + on_time < per_run;
    Outcome {
        pass,
        detail: format!(
            "off: {early_losses} grip loss(es) in first {:.0} s (first at {:.2} s); on: {} loss(es) total, {final_losses} after {final_start} s, max error {} deg; \
             learning-window error non-increasing {steady}/{} (mm {:.1?}); times: pretrain {:.0?}, off {:.0?}, on {:.0?}",
            0.2 * duration,
            off.summary.grip_loss_times.first().copied().unwrap_or(f64::NAN),
            on.summary.grip_loss_times.len(),
            max_err.map_or("n/a".into(), |e| format!("{e:.2}")),
            windows.len().saturating_sub(1),
            windows.iter().map(|w| w * 1e3).collect::<Vec<_>>(),
            pretrain_time,
            off_time,
            on_time,
        ),
        log,
    }
}

fn initial_posture(m: &RobotModel) -> Outcome {
    let mut log = String::new();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, cfg) in [("default", PlantConfig::default()), ("ideal", PlantConfig::ideal())] {
        let mut p = plant_build(m, cfg).unwrap();
        let s = p.initialize_posture(DEFAULT_TENSION_TARGET).unwrap();
        let t = &s.measured.tensions;
        let (lo, hi) = t.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let in_band = t
            .iter()
            .all(|v| (v - DEFAULT_TENSION_TARGET).abs() <= TENSION_BAND * DEFAULT_TENSION_TARGET);
        let again = p.initialize_posture(DEFAULT_TENSION_TARGET).unwrap();
        let idempotent = again == s;
        pass &= in_band && idempotent;
        parts.push(format!(
            "{name}: tensions {lo:.1}..{hi:.1} N, re-entry {}",
            if idempotent { "unchanged" } else { "changed" }
        ));
        writeln!(log, "{name} {:?} {:?} {:?}", s.q_true.as_slice(), s.l_cmd, t).unwrap();
    }
    Outcome {
        pass,
        detail: parts.join("; "),
        log,
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that excludes this suite skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let model = default_model();
    let mut all = true;
    let mut logs = Vec::new();
    for c in &CRITERIA {
        let t = Instant::now();
        let out = (c.run)(&model);
        let elapsed = t.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = out.pass && in_time;
        all &= pass;
        println!(
            "criterion {} ({}): {} [{:.2} s, budget {} s] {}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            out.detail
        );
        logs.push(out.log);
    }

    let mut same = 0;
    for (c, first) in CRITERIA.iter().zip(&logs) {
        let again = (c.run)(&model).log;
        if &again == first {
            same += 1;
        } else {
            println!("  criterion {} differs on repeat", c.id);
        }
    }
    let pass = same == CRITERIA.len();
    all &= pass;
    println!(
        "criterion 8 (determinism): {} [{same}/{} criteria bit-identical on repeat, {} bytes of logs]",
        if pass { "PASS" } else { "FAIL" },
        CRITERIA.len(),
        logs.iter().map(String::len).sum::<usize>()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
