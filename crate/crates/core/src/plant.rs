//! Simulated robot: a perturbed copy of the nominal model whose muscles are
//! springs in series with a compliant tendon. Joint angles follow the
//! quasi-static equilibrium of the commanded muscle lengths.

use std::io::Write;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointVector, Pose, RobotModel};
use crate::muscle::{jacobian_from_frames, lengths_from_frames, muscle_lengths, MuscleState};

/// Tension every muscle is brought to before a run (4 kgf).
pub const DEFAULT_TENSION_TARGET: f64 = 39.2;
/// Relative band `initialize_posture` must reach around its tension target.
pub const TENSION_BAND: f64 = 0.10;
/// Per-step joint motion below which the posture counts as settled (rad).
const SETTLED_STEP: f64 = 0.01 * std::f64::consts::PI / 180.0;
const BALANCE_ROUNDS: usize = 40;
const BALANCE_ITERS: usize = 4000;
/// Residual joint torque accepted from the balance search (N·m).
const BALANCE_TOL: f64 = 1e-4;
/// Largest posture change per balance round (rad).
const BALANCE_STEP: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Std. dev. of the Gaussian added to every via-point offset, per axis (m).
    pub via_point_noise_sigma: f64,
    /// Tendon elongation per newton (m/N), in series with the muscle spring.
    pub stretch_compliance: f64,
    /// Camera rotation per radian of summed scapula angle (rad/rad).
    pub camera_drift_gain: f64,
    /// Camera translation per radian of summed scapula angle (m/rad).
    pub camera_offset_gain: f64,
    /// Muscle spring stiffness (N/m).
    pub muscle_stiffness: f64,
    /// Equilibrium gradient norm accepted as settled (N·m).
    pub settle_tol: f64,
    /// Joint speed limit (rad/s).
    pub max_joint_speed: f64,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            via_point_noise_sigma: 0.003,
            stretch_compliance: 1e-4,
            camera_drift_gain: 0.2,
            camera_offset_gain: 0.02,
            muscle_stiffness: 1e5,
            settle_tol: 1e-4,
            max_joint_speed: 3.0,
            seed: 0,
        }
    }
}

impl PlantConfig {
    /// No modelling error and no camera drift.
    pub fn ideal() -> Self {
        Self {
            via_point_noise_sigma: 0.0,
            stretch_compliance: 0.0,
            camera_drift_gain: 0.0,
            camera_offset_gain: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let non_negative = [
            self.via_point_noise_sigma,
            self.stretch_compliance,
            self.camera_drift_gain,
            self.camera_offset_gain,
        ]
        .iter()
        .all(|v| *v >= 0.0);
        if !non_negative || !(self.muscle_stiffness > 0.0 && self.settle_tol > 0.0 && self.max_joint_speed > 0.0) {
            return Err(Error::InvalidInput(format!("invalid plant configuration {self:?}")));
        }
        Ok(())
    }

    /// Stiffness of the spring and tendon in series.
    pub fn effective_stiffness(&self) -> f64 {
        self.muscle_stiffness / (1.0 + self.muscle_stiffness * self.stretch_compliance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub time: f64,
    pub q_true: JointVector,
    pub l_cmd: Vec<f64>,
    /// Length sensor (the commanded actuator length) and spring tension.
    pub measured: MuscleState,
    pub camera_pose_true: Pose,
}

/// Diagnostics of the last equilibrium solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Energy after each accepted step, starting with the initial energy.
    pub energy_trace: Vec<f64>,
    /// Norm of the projected energy gradient at exit (N·m).
    pub gradient_norm: f64,
    /// Largest joint motion of the step (rad).
    pub max_joint_motion: f64,
}

#[derive(Clone, Debug)]
pub struct Plant {
    model: RobotModel,
    cfg: PlantConfig,
    state: PlantState,
    last_solve: SolveStats,
    reference_lengths: Option<Vec<f64>>,
}

/// Copies `nominal`, perturbs every via point and starts at the nominal
/// initial posture with all muscles just taut.
pub fn plant_build(nominal: &RobotModel, cfg: PlantConfig) -> Result<Plant> {
    cfg.validate()?;
    let mut model = nominal.clone();
    if cfg.via_point_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.via_point_noise_sigma).expect("sigma is finite and positive");
        for m in &mut model.muscles {
            for v in &mut m.via_points {
                v.offset += Vector3::from_fn(|_, _| normal.sample(&mut rng));
            }
        }
    }
    let q = nominal.initial_posture().clone();
    let l_cmd = muscle_lengths(&model, &q);
    let mut plant = Plant {
        state: PlantState {
            time: 0.0,
            measured: MuscleState {
                lengths: l_cmd.clone(),
                tensions: vec![0.0; l_cmd.len()],
            },
            l_cmd,
            camera_pose_true: Pose::identity(),
            q_true: q,
        },
        model,
        cfg,
        last_solve: SolveStats::default(),
        reference_lengths: None,
    };
    plant.refresh();
    Ok(plant)
}

struct Eval {
    energy: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl Plant {
    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn last_solve(&self) -> &SolveStats {
        &self.last_solve
    }

    /// Measured lengths recorded by [`Plant::initialize_posture`].
    pub fn reference_lengths(&self) -> Option<&[f64]> {
        self.reference_lengths.as_deref()
    }

    /// True path lengths at the current posture.
    pub fn true_lengths(&self) -> Vec<f64> {
        muscle_lengths(&self.model, &self.state.q_true)
    }

    fn tensions_at(&self, q: &JointVector, l_cmd: &[f64]) -> Vec<f64> {
        let k = self.cfg.effective_stiffness();
        muscle_lengths(&self.model, q)
            .iter()
            .zip(l_cmd)
            .map(|(l, c)| k * (l - c).max(0.0))
            .collect()
    }

    fn energy(&self, q: &JointVector, l_cmd: &[f64]) -> f64 {
        let k = self.cfg.effective_stiffness();
        muscle_lengths(&self.model, q)
            .iter()
            .zip(l_cmd)
            .map(|(l, c)| 0.5 * k * (l - c).max(0.0).powi(2))
            .sum()
    }

    fn evaluate(&self, q: &JointVector, l_cmd: &[f64], dofs: &[usize], muscles: &[usize]) -> Eval {
        let k = self.cfg.effective_stiffness();
        let frames = self.model.frames(q);
        let lengths = lengths_from_frames(&self.model, &frames);
        let g = jacobian_from_frames(&self.model, &frames, muscles, dofs);
        let n = dofs.len();
        let mut gradient = DVector::zeros(n);
        let mut hessian = DMatrix::zeros(n, n);
        let mut energy = 0.0;
        for (r, &m) in muscles.iter().enumerate() {
            let s = lengths[m] - l_cmd[m];
            if s <= 0.0 {
                continue;
            }
            energy += 0.5 * k * s * s;
            let row = g.row(r);
            gradient += row.transpose() * (k * s);
            hessian += row.transpose() * row * k;
        }
        Eval { energy, gradient, hessian }
    }

    /// Components of the gradient that can still be followed without
    /// leaving the joint limits.
    fn projected(&self, q: &JointVector, dofs: &[usize], gradient: &DVector<f64>) -> DVector<f64> {
        let mut g = gradient.clone();
        for (k, &d) in dofs.iter().enumerate() {
            let dof = &self.model.dofs[d];
            if (q[d] <= dof.lower && g[k] > 0.0) || (q[d] >= dof.upper && g[k] < 0.0) {
                g[k] = 0.0;
            }
        }
        g
    }

    /// Damped Newton descent on the spring energy with a backtracking line
    /// search. Every joint stays within `max_move` of its start value.
    fn solve(&self, q_start: &JointVector, l_cmd: &[f64], max_move: f64, max_iters: usize) -> Result<(JointVector, SolveStats)> {
        let dofs: Vec<usize> = (0..self.model.dof_count()).collect();
        let muscles: Vec<usize> = (0..self.model.muscle_count()).collect();
        let mut q = q_start.clone();
        let mut ev = self.evaluate(&q, l_cmd, &dofs, &muscles);
        let mut stats = SolveStats {
            energy_trace: vec![ev.energy],
            ..SolveStats::default()
        };
        for _ in 0..max_iters {
            let pg = self.projected(&q, &dofs, &ev.gradient);
            stats.gradient_norm = pg.norm();
            if stats.gradient_norm <= self.cfg.settle_tol {
                break;
            }
            stats.iterations += 1;
            let n = dofs.len();
            let free: Vec<bool> = (0..n).map(|k| pg[k] != 0.0 || ev.gradient[k] == 0.0).collect();
            let mut h = ev.hessian.clone();
            let damping = 1e-9 * h.trace().max(1.0) / n as f64 + 1e-9;
            let mut rhs = -&pg;
            for k in 0..n {
                h[(k, k)] += damping;
                if !free[k] {
                    h.row_mut(k).fill(0.0);
                    h.column_mut(k).fill(0.0);
                    h[(k, k)] = 1.0;
                    rhs[k] = 0.0;
                }
            }
            let step = match h.cholesky() {
                Some(c) => c.solve(&rhs),
                None => rhs.clone(),
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial = q.clone();
                for (k, &d) in dofs.iter().enumerate() {
                    let v = (q[d] + alpha * step[k]).clamp(q_start[d] - max_move, q_start[d] + max_move);
                    trial[d] = self.model.clamp_dof(d, v);
                }
                let e = self.energy(&trial, l_cmd);
                if !e.is_finite() || !trial.is_finite() {
                    return Err(Error::NonFinite("plant equilibrium solve".into()));
                }
                if e < ev.energy {
                    q = trial;
                    ev = self.evaluate(&q, l_cmd, &dofs, &muscles);
                    stats.energy_trace.push(ev.energy);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                stats.gradient_norm = self.projected(&q, &dofs, &ev.gradient).norm();
                break;
            }
        }
        stats.gradient_norm = self.projected(&q, &dofs, &ev.gradient).norm();
        stats.max_joint_motion = q.iter().zip(q_start.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((q, stats))
    }

    fn refresh(&mut self) {
        let tensions = self.tensions_at(&self.state.q_true, &self.state.l_cmd);
        self.state.measured = MuscleState {
            lengths: self.state.l_cmd.clone(),
            tensions,
        };
        self.state.camera_pose_true = self.camera_pose_at(&self.state.q_true);
    }

    fn check_command(&self, l_cmd: &[f64]) -> Result<()> {
        if l_cmd.len() != self.model.muscle_count() {
            return Err(Error::DimensionMismatch {
                expected: self.model.muscle_count(),
                actual: l_cmd.len(),
            });
        }
        if l_cmd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("muscle length command".into()));
        }
        Ok(())
    }

    /// Applies `l_cmd` for `dt` seconds: the posture moves toward the energy
    /// minimum, at most `max_joint_speed · dt` per joint.
    pub fn step(&mut self, l_cmd: &[f64], dt: f64) -> Result<&PlantState> {
        self.check_command(l_cmd)?;
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("time step must be positive".into()));
        }
        let (q, stats) = self.solve(&self.state.q_true, l_cmd, self.cfg.max_joint_speed * dt, 50)?;
        self.state.q_true = q;
        self.state.l_cmd = l_cmd.to_vec();
        self.state.time += dt;
        self.last_solve = stats;
        self.refresh();
        Ok(&self.state)
    }

    /// Moves to the equilibrium of the current command without a rate limit.
    pub fn settle(&mut self, max_iters: usize) -> Result<&PlantState> {
        let l_cmd = self.state.l_cmd.clone();
        let (q, stats) = self.solve(&self.state.q_true, &l_cmd, f64::INFINITY, max_iters)?;
        let settled = stats.gradient_norm <= self.cfg.settle_tol;
        self.state.q_true = q;
        self.last_solve = stats;
        self.refresh();
        if settled {
            Ok(&self.state)
        } else {
            Err(Error::NoSettle { iterations: max_iters })
        }
    }

    fn tensions_in_band(&self, target: f64) -> bool {
        self.state
            .measured
            .tensions
            .iter()
            .all(|t| (t - target).abs() <= TENSION_BAND * target)
    }

    fn is_settled(&self) -> bool {
        let dofs: Vec<usize> = (0..self.model.dof_count()).collect();
        let muscles: Vec<usize> = (0..self.model.muscle_count()).collect();
        let ev = self.evaluate(&self.state.q_true, &self.state.l_cmd, &dofs, &muscles);
        self.projected(&self.state.q_true, &dofs, &ev.gradient).norm() <= self.cfg.settle_tol
    }

    /// Pre-tensions every muscle to about `tension_target` and lets the
    /// posture settle; the result is the initial posture of a run.
    ///
    /// Tensions and a nearby posture are first chosen so that the in-band
    /// tensions leave no joint torque. The commands that realise them are
    /// applied and a tension servo corrects what is left.
    pub fn initialize_posture(&mut self, tension_target: f64) -> Result<PlantState> {
        if !(tension_target > 0.0) {
            return Err(Error::InvalidInput("tension target must be positive".into()));
        }
        if self.tensions_in_band(tension_target) && self.is_settled() {
            self.reference_lengths = Some(self.state.measured.lengths.clone());
            return Ok(self.state.clone());
        }
        let k = self.cfg.effective_stiffness();
        let (q, balanced) = self.balanced_posture(&self.state.q_true, tension_target);
        let lengths = muscle_lengths(&self.model, &q);
        self.state.l_cmd = lengths.iter().zip(&balanced).map(|(l, t)| l - t / k).collect();
        self.refresh();

        const MAX_ROUNDS: usize = 200;
        let band = 0.9 * TENSION_BAND * tension_target;
        for _ in 0..MAX_ROUNDS {
            let before = self.state.q_true.clone();
            self.settle(200)?;
            let moved = self
                .state
                .q_true
                .iter()
                .zip(before.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if self.tensions_in_band(tension_target) {
                if moved < SETTLED_STEP {
                    self.reference_lengths = Some(self.state.measured.lengths.clone());
                    return Ok(self.state.clone());
                }
                continue;
            }
            // Tension servo on muscles outside the inner band only.
            let tensions = self.state.measured.tensions.clone();
            for (l, t) in self.state.l_cmd.iter_mut().zip(&tensions) {
                let goal = t.clamp(tension_target - band, tension_target + band);
                *l -= 0.5 * (goal - t) / k;
            }
            self.refresh();
        }
        Err(Error::NoSettle { iterations: MAX_ROUNDS })
    }

    /// Posture near `q_start` and tensions within 95% of the allowed band
    /// around `target` that leave (close to) no joint torque.
    ///
    /// Each round linearises the torque `Gᵀt` in the posture and solves the
    /// box-constrained least squares over the posture step and the tensions.
    fn balanced_posture(&self, q_start: &JointVector, target: f64) -> (JointVector, Vec<f64>) {
        let m = self.model.muscle_count();
        let n = self.model.dof_count();
        let dofs: Vec<usize> = (0..n).collect();
        let muscles: Vec<usize> = (0..m).collect();
        let band = 0.95 * TENSION_BAND * target;
        let (lo, hi) = (target - band, target + band);
        // Weights on posture change and on distance from the target tension.
        let (w_q, w_t) = (1e-2, 1e-9);
        let h = 1e-6;

        let mut q = q_start.clone();
        let mut t = DVector::from_element(m, target);
        for _ in 0..BALANCE_ROUNDS {
            let g = jacobian_from_frames(&self.model, &self.model.frames(&q), &muscles, &dofs);
            let torque = g.transpose() * &t;
            // Stiffness of the torque with respect to posture at fixed tension.
            let mut a = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut qp = q.clone();
                qp[j] += h;
                let gp = jacobian_from_frames(&self.model, &self.model.frames(&qp), &muscles, &dofs);
                a.set_column(j, &((gp.transpose() * &t - &torque) / h));
            }
            // Residual e = A·δ + Gᵀ·s over z = (δ, s).
            let mut mt = DMatrix::zeros(n, n + m);
            mt.view_mut((0, 0), (n, n)).copy_from(&a);
            mt.view_mut((0, n), (n, m)).copy_from(&g.transpose());
            let mut hess = mt.transpose() * &mt;
            for i in 0..n {
                hess[(i, i)] += w_q;
            }
            for i in n..n + m {
                hess[(i, i)] += w_t;
            }
            let mut linear = DVector::zeros(n + m);
            for i in n..n + m {
                linear[i] = -w_t * target;
            }
            // Jacobi scaling z = D·y keeps the box separable and evens out
            // the very different curvatures of posture and tension.
            let d = hess.diagonal().map(|v| 1.0 / v.sqrt());
            let scaled = DMatrix::from_fn(n + m, n + m, |i, j| hess[(i, j)] * d[i] * d[j]);
            let linear = linear.component_mul(&d);
            let step = 1.0 / scaled.clone().symmetric_eigenvalues().max();
            let (mut lower, mut upper) = (DVector::zeros(n + m), DVector::zeros(n + m));
            for i in 0..n {
                let dof = &self.model.dofs[i];
                lower[i] = (dof.lower - q[i]).max(-BALANCE_STEP) / d[i];
                upper[i] = (dof.upper - q[i]).min(BALANCE_STEP) / d[i];
            }
            for i in n..n + m {
                lower[i] = lo / d[i];
                upper[i] = hi / d[i];
            }
            let project = |y: DVector<f64>| y.zip_zip_map(&lower, &upper, |v, a, b| v.clamp(a, b));
            let mut y = DVector::zeros(n + m);
            for i in n..n + m {
                y[i] = t[i - n] / d[i];
            }
            let mut x = y.clone();
            let mut momentum = 1.0_f64;
            for _ in 0..BALANCE_ITERS {
                let grad = &scaled * &x + &linear;
                let next = project(&x - grad * step);
                let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
                x = &next + (&next - &y) * ((momentum - 1.0) / next_momentum);
                y = next;
                momentum = next_momentum;
            }
            let z = y.component_mul(&d);
            for i in 0..n {
                q[i] += z[i];
            }
            t.copy_from(&z.rows(n, m));
            let g = jacobian_from_frames(&self.model, &self.model.frames(&q), &muscles, &dofs);
            let residual = (g.transpose() * &t).amax();
            if residual < BALANCE_TOL {
                break;
            }
        }
        (q, t.iter().copied().collect())
    }

    fn camera_pose_at(&self, q: &JointVector) -> Pose {
        let base = self.model.frames(q).links[self.model.camera_link];
        let deflection: f64 = crate::kinematics::Side::BOTH
            .iter()
            .flat_map(|s| self.model.arm(*s).scapula.iter())
            .map(|&d| q[d])
            .sum();
        let drift = Pose::new(
            Vector3::new(0.0, self.cfg.camera_offset_gain * deflection, 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.cfg.camera_drift_gain * deflection),
        );
        base.compose(&drift)
    }

    /// True head-camera pose: the camera link pose followed by a drift that
    /// grows with the summed scapula angles.
    pub fn camera_pose(&self) -> Pose {
        self.state.camera_pose_true
    }
}

/// Per-step plant log: `time, q_<joint> (deg)..., l_cmd_<muscle> (m)...,
/// tension_<muscle> (N)..., wheel_angle (deg)`.
pub struct StateLogWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> StateLogWriter<W> {
    pub fn new(model: &RobotModel, out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend(model.joint_names().map(|n| format!("q_{n}")));
        header.extend(model.muscles.iter().map(|m| format!("l_cmd_{}", m.name)));
        header.extend(model.muscles.iter().map(|m| format!("tension_{}", m.name)));
        header.push("wheel_angle".into());
        out.write_record(&header)?;
        Ok(Self { out })
    }

    pub fn write(&mut self, state: &PlantState, wheel_angle: f64) -> Result<()> {
        let mut row = vec![state.time.to_string()];
        row.extend(state.q_true.iter().map(|q| q.to_degrees().to_string()));
        row.extend(state.l_cmd.iter().map(|v| v.to_string()));
        row.extend(state.measured.tensions.iter().map(|v| v.to_string()));
        row.push(wheel_angle.to_degrees().to_string());
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
