//! Fixed-scapula damped-least-squares IK and the scapulohumeral-rhythm
//! procedure built on it.
//!
//! The rhythm solver runs in four steps: start from the initial posture,
//! solve with the scapula held, set every scapula DOF to `A ×` its paired
//! glenohumeral angle, then solve again with the moved scapula held.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointVector, Pose, RobotModel, Side};

const LAMBDA_MIN: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkSettings {
    /// Weight of the position error, per meter.
    pub position_weight: f64,
    /// Weight of the orientation error, per radian.
    pub orientation_weight: f64,
    pub max_iters: usize,
    /// Meters.
    pub tol_pos: f64,
    /// Radians.
    pub tol_rot: f64,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            position_weight: 1.0,
            orientation_weight: 0.3,
            max_iters: 300,
            tol_pos: 1e-3,
            tol_rot: 1e-2,
        }
    }
}

impl IkSettings {
    fn validate(&self) -> Result<()> {
        if !(self.tol_pos > 0.0 && self.tol_rot > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidInput("IK tolerances must be > 0 and max_iters >= 1".into()));
        }
        if !(self.position_weight > 0.0 && self.orientation_weight >= 0.0) {
            return Err(Error::InvalidInput("IK weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IkRequest {
    /// Hand target in the trunk frame.
    pub target: Pose,
    pub hand: Side,
    pub q_init: JointVector,
    pub settings: IkSettings,
}

#[derive(Clone, Debug)]
pub struct IkSolution {
    pub q: JointVector,
    pub iterations: usize,
    pub position_error: f64,
    pub rotation_error: f64,
    /// Weighted squared error after each accepted step, starting with the
    /// initial error.
    pub cost_trace: Vec<f64>,
}

/// Scale between scapula and glenohumeral angles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhythmParams {
    pub a: f64,
}

impl Default for RhythmParams {
    fn default() -> Self {
        Self { a: 1.0 / 2.7 }
    }
}

impl RhythmParams {
    /// `a` in `[0, 1)`; zero turns the rhythm off.
    pub fn new(a: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::InvalidInput(format!("rhythm scale must be in [0, 1), got {a}")));
        }
        Ok(Self { a })
    }
}

#[derive(Clone, Debug)]
pub struct RhythmSolution {
    /// Second-pass solution.
    pub q: JointVector,
    /// Fixed-scapula solution from the first pass.
    pub first_pass: JointVector,
    /// Per rhythm pair: scapula DOF, `A ×` first-pass shoulder angle before
    /// clamping, and whether clamping changed it.
    pub scapula_targets: Vec<ScapulaTarget>,
    pub iterations: [usize; 2],
    pub position_error: f64,
    pub rotation_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScapulaTarget {
    pub dof: usize,
    pub unclamped: f64,
    pub clamped: bool,
}

struct Residual {
    e: DVector<f64>,
    pos: f64,
    rot: f64,
    cost: f64,
}

fn residual(model: &RobotModel, q: &JointVector, req: &IkRequest) -> Residual {
    let hand = model.hand_pose(q, req.hand);
    let dp = req.target.position - hand.position;
    let dr = hand.rotation_error_to(&req.target);
    let s = &req.settings;
    let e = DVector::from_iterator(
        6,
        dp.iter()
            .map(|v| v * s.position_weight)
            .chain(dr.iter().map(|v| v * s.orientation_weight)),
    );
    let cost = e.norm_squared();
    Residual {
        e,
        pos: dp.norm(),
        rot: dr.norm(),
        cost,
    }
}

fn converged(r: &Residual, s: &IkSettings) -> bool {
    r.pos <= s.tol_pos && r.rot <= s.tol_rot
}

fn solve_active(model: &RobotModel, req: &IkRequest, active: &[usize], pass: u8) -> Result<IkSolution> {
    req.settings.validate()?;
    model.check_dims(&req.q_init)?;
    if !req.target.is_finite() || !req.q_init.is_finite() {
        return Err(Error::InvalidInput("IK target and seed must be finite".into()));
    }
    let s = &req.settings;
    let mut q = req.q_init.clone();
    for &d in active {
        q[d] = model.clamp_dof(d, q[d]);
    }
    let mut r = residual(model, &q, req);
    let mut trace = vec![r.cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;

    let link = model.arm(req.hand).hand_link;
    while !converged(&r, s) {
        if iterations >= s.max_iters {
            break;
        }
        iterations += 1;

        let frames = model.frames(&q);
        let mut j = model.point_jacobian(&frames, link, &frames.links[link].position, active);
        for c in 0..j.ncols() {
            for row in 0..3 {
                j[(row, c)] *= s.position_weight;
                j[(row + 3, c)] *= s.orientation_weight;
            }
        }
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &r.e;

        let mut accepted = false;
        while !accepted {
            let Some(step) = damped_step(model, &q, active, &jtj, &g, lambda) else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    break;
                }
                continue;
            };
            let mut trial = q.clone();
            for (k, &d) in active.iter().enumerate() {
                trial[d] = model.clamp_dof(d, trial[d] + step[k]);
            }
            let tr = residual(model, &trial, req);
            if tr.cost < r.cost {
                q = trial;
                r = tr;
                trace.push(r.cost);
                lambda = (lambda * 0.3).max(LAMBDA_MIN);
                accepted = true;
            } else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    break;
                }
            }
        }
        if !accepted {
            // Stuck in a local minimum or against the limits.
            break;
        }
    }

    if converged(&r, s) {
        Ok(IkSolution {
            q,
            iterations,
            position_error: r.pos,
            rotation_error: r.rot,
            cost_trace: trace,
        })
    } else {
        Err(Error::IkNoConvergence {
            pass,
            iterations,
            position_error: r.pos,
            rotation_error: r.rot,
        })
    }
}

/// Levenberg-Marquardt step. Joints sitting on a limit whose step would push
/// further out are frozen and the step is recomputed without them, so they
/// do not stall the others.
fn damped_step(
    model: &RobotModel,
    q: &JointVector,
    active: &[usize],
    jtj: &DMatrix<f64>,
    g: &DVector<f64>,
    lambda: f64,
) -> Option<DVector<f64>> {
    let n = active.len();
    let solve = |free: &[bool]| {
        let mut h = jtj + DMatrix::identity(n, n) * lambda;
        let mut rhs = g.clone();
        for k in (0..n).filter(|&k| !free[k]) {
            h.row_mut(k).fill(0.0);
            h.column_mut(k).fill(0.0);
            h[(k, k)] = 1.0;
            rhs[k] = 0.0;
        }
        h.cholesky().map(|c| c.solve(&rhs))
    };
    let mut free = vec![true; n];
    let step = solve(&free)?;
    let mut changed = false;
    for (k, &d) in active.iter().enumerate() {
        let dof = &model.dofs[d];
        if (q[d] <= dof.lower && step[k] < 0.0) || (q[d] >= dof.upper && step[k] > 0.0) {
            free[k] = false;
            changed = true;
        }
    }
    if changed {
        solve(&free)
    } else {
        Some(step)
    }
}

/// Solves for the glenohumeral, elbow and wrist joints of `req.hand` with
/// the scapula (and every other joint) held at `req.q_init`.
pub fn ik_fixed_scapula(model: &RobotModel, req: &IkRequest) -> Result<IkSolution> {
    solve_active(model, req, &model.arm(req.hand).ik_joints(), 0)
}

/// Scapulohumeral-rhythm IK: fixed-scapula pass, scapula set to `A ×` the
/// first-pass shoulder angles (clamped to limits), second fixed-scapula pass.
pub fn scapulohumeral_ik(model: &RobotModel, req: &IkRequest, params: RhythmParams) -> Result<RhythmSolution> {
    RhythmParams::new(params.a)?;
    let arm = model.arm(req.hand);
    let active = arm.ik_joints();
    let first = solve_active(model, req, &active, 1)?;

    let mut seed = first.q.clone();
    let scapula_targets: Vec<ScapulaTarget> = arm
        .rhythm
        .iter()
        .map(|&(scap, shoulder)| {
            let unclamped = params.a * first.q[shoulder];
            let v = model.clamp_dof(scap, unclamped);
            seed[scap] = v;
            ScapulaTarget {
                dof: scap,
                unclamped,
                clamped: v != unclamped,
            }
        })
        .collect();

    let mut second_req = IkRequest {
        target: req.target,
        hand: req.hand,
        q_init: seed.clone(),
        settings: req.settings,
    };
    // Seeded from the first-pass arm; if that lands in a local minimum, retry
    // once from the caller's arm seed with the same scapula.
    let second = match solve_active(model, &second_req, &active, 2) {
        Ok(s) => s,
        Err(first_err) => {
            for &d in &active {
                second_req.q_init[d] = req.q_init[d];
            }
            solve_active(model, &second_req, &active, 2).map_err(|_| first_err)?
        }
    };
    Ok(RhythmSolution {
        q: second.q,
        first_pass: first.q,
        scapula_targets,
        iterations: [first.iterations, second.iterations],
        position_error: second.position_error,
        rotation_error: second.rotation_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::default_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random arm posture near the initial one, scapula left at the seed.
    fn perturbed(model: &RobotModel, side: Side, rng: &mut ChaCha8Rng, spread_deg: f64) -> JointVector {
        let mut q = model.initial_posture().clone();
        for d in model.arm(side).ik_joints() {
            let v = q[d] + rng.random_range(-spread_deg..spread_deg).to_radians();
            q[d] = model.clamp_dof(d, v);
        }
        q
    }

    fn request(model: &RobotModel, side: Side, target: Pose) -> IkRequest {
        IkRequest {
            target,
            hand: side,
            q_init: model.initial_posture().clone(),
            settings: IkSettings::default(),
        }
    }

    #[test]
    fn already_solved_returns_seed() {
        let m = default_model();
        let q = m.initial_posture().clone();
        let req = request(&m, Side::Left, m.hand_pose(&q, Side::Left));
        let sol = ik_fixed_scapula(&m, &req).unwrap();
        assert_eq!(sol.q, q);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn reaches_targets_generated_by_fk() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for i in 0..100 {
            let side = Side::BOTH[i % 2];
            let truth = perturbed(&m, side, &mut rng, 25.0);
            let target = m.hand_pose(&truth, side);
            let req = request(&m, side, target);
            let sol = ik_fixed_scapula(&m, &req).unwrap();
            let got = m.hand_pose(&sol.q, side);
            assert!(got.position_distance(&target) <= 1e-3);
            assert!(got.rotation_distance(&target) <= 1e-2);
            for &s in &m.arm(side).scapula {
                assert_eq!(sol.q[s], req.q_init[s]);
            }
            assert!(m.within_limits(&sol.q));
            assert!(sol.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn unreachable_target_reports_no_convergence() {
        let m = default_model();
        let target = Pose::from_translation(2.0, 0.0, 0.0);
        let err = ik_fixed_scapula(&m, &request(&m, Side::Left, target)).unwrap_err();
        assert!(matches!(err, Error::IkNoConvergence { pass: 0, .. }));
        let err = scapulohumeral_ik(&m, &request(&m, Side::Left, target), RhythmParams::default()).unwrap_err();
        assert!(matches!(err, Error::IkNoConvergence { pass: 1, .. }));
    }

    #[test]
    fn rejects_bad_settings() {
        let m = default_model();
        let mut req = request(&m, Side::Left, Pose::identity());
        req.settings.tol_pos = 0.0;
        assert!(matches!(ik_fixed_scapula(&m, &req), Err(Error::InvalidInput(_))));
        assert!(RhythmParams::new(1.0).is_err());
        assert!(RhythmParams::new(-0.1).is_err());
    }

    #[test]
    fn rhythm_sets_scapula_from_first_pass() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = RhythmParams::default();
        for side in Side::BOTH {
            let truth = perturbed(&m, side, &mut rng, 20.0);
            let req = request(&m, side, m.hand_pose(&truth, side));
            let sol = scapulohumeral_ik(&m, &req, params).unwrap();
            for (t, &(s, g)) in sol.scapula_targets.iter().zip(&m.arm(side).rhythm) {
                assert_eq!(t.dof, s);
                assert_eq!(t.unclamped, params.a * sol.first_pass[g]);
                if !t.clamped {
                    assert_eq!(sol.q[s], t.unclamped);
                }
            }
            let hand = m.hand_pose(&sol.q, side);
            assert!(hand.position_distance(&req.target) <= 1e-3);
        }
    }

    #[test]
    fn zero_rhythm_matches_fixed_scapula() {
        let m = default_model();
        let mut q0 = m.initial_posture().clone();
        for s in m.arm(Side::Right).scapula.clone() {
            q0[s] = 0.0;
        }
        let mut truth = q0.clone();
        let sh = m.arm(Side::Right).glenohumeral[1];
        truth[sh] += 0.2;
        let mut req = request(&m, Side::Right, m.hand_pose(&truth, Side::Right));
        req.q_init = q0;
        let fixed = ik_fixed_scapula(&m, &req).unwrap();
        let rhythm = scapulohumeral_ik(&m, &req, RhythmParams::new(0.0).unwrap()).unwrap();
        assert_eq!(fixed.q, rhythm.q);
    }

    #[test]
    fn solver_is_deterministic() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = perturbed(&m, Side::Left, &mut rng, 20.0);
        let req = request(&m, Side::Left, m.hand_pose(&truth, Side::Left));
        let a = scapulohumeral_ik(&m, &req, RhythmParams::default()).unwrap();
        let b = scapulohumeral_ik(&m, &req, RhythmParams::default()).unwrap();
        assert_eq!(a.q, b.q);
    }
}
