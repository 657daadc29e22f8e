//! Dual-arm steering-wheel experiment: wheel model, control loop, learning
//! schedule and the per-step report.
//!
//! A run optionally starts with a learning phase (wheel removed, hands follow
//! the same target sequence while teacher data accumulates), followed by the
//! task phase in which the hands hold and turn the wheel.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ik::{scapulohumeral_ik, IkRequest, IkSettings, RhythmParams};
use crate::jmm::{InvertSettings, JmmConfig, JointMuscleMap, ReplayBuffer, TeacherSample};
use crate::kinematics::{default_model, JointVector, Pose, PoseSpec, RobotModel, Side};
use crate::muscle::geometric_jmm_dataset;
use crate::perception::{estimate_joint_angles, hand_pose_from_object, observe_markers, MarkerId, MarkerNoise, TeacherLogWriter};
use crate::plant::{plant_build, Plant, PlantConfig, StateLogWriter, DEFAULT_TENSION_TARGET};

/// Steering wheel fixed in the body frame. The wheel turns about the z axis
/// of `center_pose_body`; rim angles are measured from its x axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelSpec {
    pub center_pose_body: PoseSpec,
    /// Meters.
    pub radius: f64,
    /// Rim angle of the left and right grip (rad).
    pub grip_angles: [f64; 2],
    /// Hand pose relative to the rim frame at its grip, left and right.
    pub grip_offsets: [PoseSpec; 2],
    /// Meters.
    pub grip_tolerance: f64,
    /// Keyframes `(time s, wheel angle deg)`, linearly interpolated.
    pub angle_sequence: Vec<(f64, f64)>,
}

/// 0 → +10° → −10° → +10° → 0 in 10 s segments, each starting with a ramp.
pub fn default_angle_sequence() -> Vec<(f64, f64)> {
    vec![
        (0.0, 0.0),
        (10.0, 0.0),
        (13.0, 10.0),
        (20.0, 10.0),
        (26.0, -10.0),
        (30.0, -10.0),
        (36.0, 10.0),
        (40.0, 10.0),
        (43.0, 0.0),
        (50.0, 0.0),
    ]
}

impl WheelSpec {
    /// Wheel whose rim passes through both hands at posture `q`, turning
    /// about the horizontal axis normal to the line between the hands.
    pub fn around_hands(model: &RobotModel, q: &JointVector) -> Self {
        let left = model.hand_pose(q, Side::Left);
        let right = model.hand_pose(q, Side::Right);
        let across = left.position - right.position;
        let x = across.normalize();
        let forward = Vector3::x();
        let z = (forward - x * forward.dot(&x)).normalize();
        let y = z.cross(&x);
        let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_basis_unchecked(&[x, y, z]));
        let center = Pose::new((left.position + right.position) * 0.5, rot);
        let grip_angles = [0.0, std::f64::consts::PI];
        let rim = |a: f64| {
            center.compose(&Pose::new(
                Vector3::new(0.0, 0.0, 0.0),
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a),
            ))
        };
        let offset = |a: f64, hand: &Pose| {
            let mut rel = rim(a)
                .compose(&Pose::from_translation(across.norm() * 0.5, 0.0, 0.0))
                .inverse()
                .compose(hand);
            rel.position = Vector3::zeros();
            PoseSpec::from(rel)
        };
        Self {
            center_pose_body: PoseSpec::from(center),
            radius: across.norm() * 0.5,
            grip_angles,
            grip_offsets: [offset(grip_angles[0], &left), offset(grip_angles[1], &right)],
            grip_tolerance: 0.025,
            angle_sequence: default_angle_sequence(),
        }
    }

    fn validate(&self) -> Result<()> {
        let keys_ok = !self.angle_sequence.is_empty()
            && self.angle_sequence.windows(2).all(|w| w[1].0 >= w[0].0)
            && self.angle_sequence.iter().all(|(t, a)| t.is_finite() && a.is_finite());
        if !(self.radius > 0.0) || !(self.grip_tolerance > 0.0) || self.grip_angles[0] == self.grip_angles[1] || !keys_ok {
            return Err(Error::InvalidInput(format!("invalid wheel spec {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> Pose {
        Pose::from(self.center_pose_body)
    }

    /// Wheel marker pose with the wheel turned by `angle` (rad).
    pub fn marker_pose(&self, angle: f64) -> Pose {
        self.center().compose(&Pose::new(
            Vector3::zeros(),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle),
        ))
    }

    /// Target wheel angle (rad) at `t` seconds.
    pub fn target_angle(&self, t: f64) -> f64 {
        let keys = &self.angle_sequence;
        let deg = if t <= keys[0].0 {
            keys[0].1
        } else if let Some(w) = keys.windows(2).find(|w| t <= w[1].0) {
            let (t0, a0) = w[0];
            let (t1, a1) = w[1];
            if t1 > t0 {
                a0 + (a1 - a0) * (t - t0) / (t1 - t0)
            } else {
                a1
            }
        } else {
            keys[keys.len() - 1].1
        };
        deg.to_radians()
    }

    pub fn sequence_duration(&self) -> f64 {
        self.angle_sequence.last().map_or(0.0, |k| k.0)
    }

    fn grip_point(&self, side: Side, angle: f64) -> Vector3<f64> {
        let a = self.grip_angles[side.index()] + angle;
        self.center()
            .transform_point(&Vector3::new(self.radius * a.cos(), self.radius * a.sin(), 0.0))
    }
}

/// Hand targets on the rim with the wheel turned by `wheel_angle` (rad).
pub fn grip_targets(wheel: &WheelSpec, wheel_angle: f64) -> [Pose; 2] {
    let center = wheel.center();
    Side::BOTH.map(|side| {
        let a = wheel.grip_angles[side.index()] + wheel_angle;
        let rim = center.compose(&Pose::new(
            Vector3::new(wheel.radius * a.cos(), wheel.radius * a.sin(), 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a),
        ));
        rim.compose(&Pose::from(wheel.grip_offsets[side.index()]))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WheelState {
    /// Radians.
    pub angle: f64,
    pub gripping: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GripStatus {
    pub state: WheelState,
    /// Distance of each hand from its rim point (m).
    pub errors: [f64; 2],
    /// Hands beyond the grip tolerance.
    pub slipping: [bool; 2],
}

fn wrap(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Moves the wheel with the hands. While both hands hold, the wheel angle is
/// the mean of the hands' angular positions in the wheel plane (relative to
/// their grips). A hand beyond tolerance breaks the grip and the wheel keeps
/// its angle until both hands are back on their rim points.
pub fn wheel_update(wheel: &WheelSpec, state: WheelState, hands: &[Pose; 2]) -> GripStatus {
    let errors_at = |angle: f64| Side::BOTH.map(|s| (hands[s.index()].position - wheel.grip_point(s, angle)).norm());
    let within = |e: &[f64; 2]| e.map(|v| v <= wheel.grip_tolerance);
    if state.gripping {
        let inv = wheel.center().inverse();
        let mean_offset = Side::BOTH
            .iter()
            .map(|s| {
                let p = inv.transform_point(&hands[s.index()].position);
                wrap(p.y.atan2(p.x) - wheel.grip_angles[s.index()] - state.angle)
            })
            .sum::<f64>()
            / 2.0;
        let candidate = state.angle + mean_offset;
        let errors = errors_at(candidate);
        let ok = within(&errors);
        if ok[0] && ok[1] {
            return GripStatus {
                state: WheelState {
                    angle: candidate,
                    gripping: true,
                },
                errors,
                slipping: [false; 2],
            };
        }
    }
    let errors = errors_at(state.angle);
    let ok = within(&errors);
    GripStatus {
        state: WheelState {
            angle: state.angle,
            gripping: ok[0] && ok[1],
        },
        errors,
        slipping: ok.map(|v| !v),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Std. dev. of the Gaussian added to every training length (m), so the
    /// mapping tolerates commands slightly off the geometric length manifold.
    pub length_jitter: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            epochs: 200,
            learning_rate: 1e-3,
            length_jitter: 0.004,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub enabled: bool,
    /// Seconds of learning with the wheel removed before the task.
    pub learning_phase: f64,
    /// Control ticks between online updates.
    pub update_every: usize,
    pub steps_per_update: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            learning_phase: 50.0,
            update_every: 25,
            steps_per_update: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Robot model file; the built-in model when absent.
    pub model: Option<PathBuf>,
    /// Defaults to a wheel through the hands at the initial posture.
    pub wheel: Option<WheelSpec>,
    pub plant: PlantConfig,
    pub jmm: JmmConfig,
    pub pretrain: PretrainConfig,
    pub learning: LearningConfig,
    pub marker_noise: MarkerNoise,
    pub rhythm_a: f64,
    /// Control period (s).
    pub tick: f64,
    /// Newtons.
    pub tension_target: f64,
    pub invert_tolerance_deg: f64,
    /// Seeds observation noise and online updates.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: None,
            wheel: None,
            plant: PlantConfig::default(),
            jmm: JmmConfig::default(),
            pretrain: PretrainConfig::default(),
            learning: LearningConfig::default(),
            marker_noise: MarkerNoise::default(),
            rhythm_a: 1.0 / 2.7,
            tick: 0.02,
            tension_target: DEFAULT_TENSION_TARGET,
            invert_tolerance_deg: 0.05,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn load_model(&self) -> Result<RobotModel> {
        match &self.model {
            Some(p) => RobotModel::load(p),
            None => Ok(default_model()),
        }
    }

    pub fn wheel_for(&self, model: &RobotModel) -> WheelSpec {
        self.wheel
            .clone()
            .unwrap_or_else(|| WheelSpec::around_hands(model, model.initial_posture()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Learning,
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Seconds since the start of the phase.
    pub time: f64,
    pub phase: Phase,
    pub target_deg: f64,
    pub wheel_deg: f64,
    /// Wheel angle while both hands grip.
    pub achieved_deg: Option<f64>,
    /// Left and right hand distance from their rim points (m).
    pub grip_error: [f64; 2],
    pub gripping: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Over gripping task steps; `None` if the wheel was never held.
    pub max_tracking_error_deg: Option<f64>,
    /// Task times at which the grip broke.
    pub grip_loss_times: Vec<f64>,
    pub task_duration: f64,
    pub teacher_samples: usize,
    pub learning_rounds: usize,
    pub rolled_back_rounds: usize,
    pub ik_failures: usize,
    pub inversion_failures: usize,
    /// Set when the plant solver failed and the run stopped early.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn task_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.phase == Phase::Task)
    }

    /// Grip losses with task time in `[from, to)`.
    pub fn grip_losses_between(&self, from: f64, to: f64) -> usize {
        self.summary.grip_loss_times.iter().filter(|t| **t >= from && **t < to).count()
    }

    /// Largest tracking error (deg) over gripping task steps in `[from, to)`.
    pub fn max_tracking_error_between(&self, from: f64, to: f64) -> Option<f64> {
        self.task_steps()
            .filter(|s| s.time >= from && s.time < to)
            .filter_map(|s| s.achieved_deg.map(|a| (a - s.target_deg).abs()))
            .reduce(f64::max)
    }

    /// Mean of both hands' grip error (m) over consecutive windows of the
    /// learning phase.
    pub fn learning_window_errors(&self, window: f64) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for s in self.steps.iter().filter(|s| s.phase == Phase::Learning) {
            let k = ((s.time - 1e-9) / window).floor().max(0.0) as usize;
            if out.len() <= k {
                out.resize(k + 1, (0.0, 0));
            }
            out[k].0 += 0.5 * (s.grip_error[0] + s.grip_error[1]);
            out[k].1 += 1;
        }
        out.into_iter().filter(|(_, n)| *n > 0).map(|(sum, n)| sum / n as f64).collect()
    }
}

/// Geometric pre-training of every group of a fresh mapping.
pub fn pretrain_map(model: &RobotModel, jmm: &JmmConfig, cfg: &PretrainConfig) -> Result<JointMuscleMap> {
    let mut map = JointMuscleMap::new(model, jmm.clone(), cfg.seed)?;
    for g in 0..model.groups.len() {
        let mut data = geometric_jmm_dataset(model, g, cfg.samples, cfg.seed.wrapping_add(100 + g as u64))?;
        if cfg.length_jitter > 0.0 {
            let noise = Normal::new(0.0, cfg.length_jitter).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(400 + g as u64));
            for s in &mut data {
                s.lengths.iter_mut().for_each(|l| *l += noise.sample(&mut rng));
            }
        }
        map.pretrain(g, &data, cfg.epochs, cfg.learning_rate, cfg.seed.wrapping_add(200 + g as u64))?;
    }
    Ok(map)
}

/// Writers for the optional per-step logs.
pub struct RunLogs {
    pub state: StateLogWriter<Box<dyn Write>>,
    pub teacher: TeacherLogWriter<Box<dyn Write>>,
}

impl RunLogs {
    pub fn create(model: &RobotModel, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<Box<dyn Write>> { Ok(Box::new(BufWriter::new(File::create(dir.join(name))?))) };
        Ok(Self {
            state: StateLogWriter::new(model, open(STATE_LOG)?)?,
            teacher: TeacherLogWriter::new(model, open(TEACHER_LOG)?)?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.state.flush()?;
        self.teacher.flush()
    }
}

pub const STATE_LOG: &str = "plant_state.csv";
pub const TEACHER_LOG: &str = "teacher.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MAP_FILE: &str = "map.json";

struct Controller<'a> {
    model: &'a RobotModel,
    cfg: &'a ExperimentConfig,
    rhythm: RhythmParams,
    map: JointMuscleMap,
    buffers: Vec<ReplayBuffer>,
    pending: Vec<Vec<TeacherSample>>,
    /// Side each group belongs to.
    group_side: Vec<Side>,
    q_cmd: JointVector,
    rng: ChaCha8Rng,
    summary: RunSummary,
}

impl Controller<'_> {
    /// Hand targets → rhythm IK → inverted mapping → muscle-length command.
    fn command(&mut self, plant: &Plant, targets: &[Pose; 2]) -> Vec<f64> {
        for side in Side::BOTH {
            let req = IkRequest {
                target: targets[side.index()],
                hand: side,
                q_init: self.model.initial_posture().clone(),
                settings: IkSettings::default(),
            };
            match scapulohumeral_ik(self.model, &req, self.rhythm) {
                Ok(sol) => {
                    for d in self.model.arm(side).all_joints() {
                        self.q_cmd[d] = sol.q[d];
                    }
                }
                Err(_) => self.summary.ik_failures += 1,
            }
        }
        let state = plant.state();
        let mut l_cmd = state.l_cmd.clone();
        let settings = InvertSettings {
            tolerance_deg: self.cfg.invert_tolerance_deg,
            ..InvertSettings::default()
        };
        for (g, group) in self.model.groups.iter().enumerate() {
            let q: Vec<f64> = group.joints.iter().map(|&d| self.q_cmd[d]).collect();
            let (l0, t0) = state.measured.select(&group.muscles);
            match self.map.invert(g, &q, &t0, &l0, &settings) {
                Ok(l) => {
                    for (&m, v) in group.muscles.iter().zip(l) {
                        l_cmd[m] = v;
                    }
                }
                Err(_) => self.summary.inversion_failures += 1,
            }
        }
        l_cmd
    }

    /// Teacher samples from the markers after the step.
    fn observe(&mut self, plant: &Plant, marker_pose: &Pose, time: f64, logs: Option<&mut RunLogs>) -> Result<()> {
        let obs = observe_markers(plant, marker_pose, &self.cfg.marker_noise, self.rng.random())?;
        let find = |id: MarkerId| obs.iter().find(|o| o.id == id).expect("all markers observed");
        let wheel = find(MarkerId::WheelCenter);
        let mut q_est = self.model.initial_posture().clone();
        let mut ok = [false; 2];
        for side in Side::BOTH {
            let Ok(hand) = hand_pose_from_object(wheel, find(MarkerId::hand(side)), marker_pose) else {
                continue;
            };
            if let Ok(q) = estimate_joint_angles(self.model, side, &hand, self.model.initial_posture(), self.rhythm) {
                for d in self.model.arm(side).all_joints() {
                    q_est[d] = q[d];
                }
                ok[side.index()] = true;
            }
        }
        let state = plant.state();
        if let Some(logs) = logs {
            let all = ok[0] && ok[1];
            logs.teacher
                .write(time, all, &state.measured.lengths, &state.measured.tensions, all.then_some(&q_est))?;
        }
        for (g, group) in self.model.groups.iter().enumerate() {
            if !ok[self.group_side[g].index()] {
                continue;
            }
            let (lengths, tensions) = state.measured.select(&group.muscles);
            self.pending[g].push(TeacherSample {
                lengths,
                tensions,
                q_est: group.joints.iter().map(|&d| q_est[d]).collect(),
                timestamp: time,
            });
        }
        Ok(())
    }

    fn learn(&mut self) {
        for g in 0..self.pending.len() {
            let samples = std::mem::take(&mut self.pending[g]);
            if samples.is_empty() {
                continue;
            }
            self.summary.teacher_samples += samples.len();
            let seed = self.rng.random();
            match self
                .map
                .update_online(g, &mut self.buffers[g], &samples, self.cfg.learning.steps_per_update, seed)
            {
                Ok(r) => {
                    self.summary.learning_rounds += 1;
                    if r.rolled_back {
                        self.summary.rolled_back_rounds += 1;
                    }
                }
                Err(_) => self.summary.rolled_back_rounds += 1,
            }
        }
    }
}

fn side_of_group(model: &RobotModel, g: usize) -> Result<Side> {
    let joints = &model.groups[g].joints;
    Side::BOTH
        .into_iter()
        .find(|s| {
            let arm = model.arm(*s).all_joints();
            joints.iter().all(|d| arm.contains(d))
        })
        .ok_or_else(|| Error::InvalidModel(format!("group `{}` spans both arms", model.groups[g].name)))
}

/// Runs the whole experiment with a freshly pre-trained mapping.
pub fn run_steering_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<(RunReport, JointMuscleMap)> {
    let model = cfg.load_model()?;
    let map = pretrain_map(&model, &cfg.jmm, &cfg.pretrain)?;
    run_with_map(cfg, &model, map, out_dir)
}

/// Runs the experiment starting from `map`; returns the report and the map
/// as it stands at the end. With `out_dir`, writes the logs, per-step table,
/// summary and final map there.
pub fn run_with_map(
    cfg: &ExperimentConfig,
    model: &RobotModel,
    map: JointMuscleMap,
    out_dir: Option<&Path>,
) -> Result<(RunReport, JointMuscleMap)> {
    if !(cfg.tick > 0.0) || cfg.learning.update_every == 0 || !(cfg.learning.learning_phase >= 0.0) {
        return Err(Error::InvalidInput(
            "tick, update interval and learning phase must be positive".into(),
        ));
    }
    if map.layout_hash() != crate::jmm::layout_hash(model) {
        return Err(Error::LayoutMismatch {
            expected: crate::jmm::layout_hash(model),
            found: map.layout_hash().to_owned(),
        });
    }
    let wheel = cfg.wheel_for(model);
    wheel.validate()?;
    let mut logs = out_dir.map(|d| RunLogs::create(model, d)).transpose()?;

    let mut plant = plant_build(model, cfg.plant.clone())?;
    plant.initialize_posture(cfg.tension_target)?;

    let mut buffers = Vec::with_capacity(model.groups.len());
    let mut group_side = Vec::with_capacity(model.groups.len());
    for g in 0..model.groups.len() {
        let geo = geometric_jmm_dataset(model, g, cfg.jmm.replay_capacity.max(1), cfg.seed.wrapping_add(300 + g as u64))?;
        buffers.push(ReplayBuffer::new(cfg.jmm.replay_capacity, cfg.jmm.mix_ratio, geo)?);
        group_side.push(side_of_group(model, g)?);
    }
    let mut ctl = Controller {
        model,
        cfg,
        rhythm: RhythmParams::new(cfg.rhythm_a)?,
        map,
        buffers,
        pending: vec![Vec::new(); model.groups.len()],
        group_side,
        q_cmd: model.initial_posture().clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        summary: RunSummary::default(),
    };

    let period = wheel.sequence_duration();
    let learning_ticks = if cfg.learning.enabled {
        (cfg.learning.learning_phase / cfg.tick).round() as usize
    } else {
        0
    };
    let task_ticks = (period / cfg.tick).round() as usize;
    ctl.summary.task_duration = task_ticks as f64 * cfg.tick;
    let mut steps = Vec::with_capacity(learning_ticks + task_ticks);
    let mut wheel_state = WheelState {
        angle: 0.0,
        gripping: true,
    };

    for tick in 0..learning_ticks + task_ticks {
        let (phase, k) = if tick < learning_ticks {
            (Phase::Learning, tick + 1)
        } else {
            (Phase::Task, tick - learning_ticks + 1)
        };
        let time = k as f64 * cfg.tick;
        let seq_time = if period > 0.0 { time % period } else { 0.0 };
        let target = wheel.target_angle(if phase == Phase::Task { time } else { seq_time });
        let hand_targets = grip_targets(&wheel, target);
        let l_cmd = ctl.command(&plant, &hand_targets);
        if let Err(e) = plant.step(&l_cmd, cfg.tick) {
            ctl.summary.aborted = Some(e.to_string());
            break;
        }
        let hands = Side::BOTH.map(|s| plant.model().hand_pose(&plant.state().q_true, s));
        let record = match phase {
            Phase::Learning => {
                let grip_error = Side::BOTH.map(|s| (hands[s.index()].position - hand_targets[s.index()].position).norm());
                StepRecord {
                    time,
                    phase,
                    target_deg: target.to_degrees(),
                    wheel_deg: target.to_degrees(),
                    achieved_deg: None,
                    grip_error,
                    gripping: false,
                }
            }
            Phase::Task => {
                let status = wheel_update(&wheel, wheel_state, &hands);
                if wheel_state.gripping && !status.state.gripping {
                    ctl.summary.grip_loss_times.push(time);
                }
                wheel_state = status.state;
                StepRecord {
                    time,
                    phase,
                    target_deg: target.to_degrees(),
                    wheel_deg: wheel_state.angle.to_degrees(),
                    achieved_deg: wheel_state.gripping.then(|| wheel_state.angle.to_degrees()),
                    grip_error: status.errors,
                    gripping: wheel_state.gripping,
                }
            }
        };
        let marker = match phase {
            Phase::Learning => wheel.marker_pose(0.0),
            Phase::Task => wheel.marker_pose(wheel_state.angle),
        };
        let elapsed = tick as f64 * cfg.tick + cfg.tick;
        if let Some(l) = logs.as_mut() {
            l.state.write(plant.state(), wheel_state.angle)?;
        }
        if cfg.learning.enabled {
            ctl.observe(&plant, &marker, elapsed, logs.as_mut())?;
            if (tick + 1) % cfg.learning.update_every == 0 {
                ctl.learn();
            }
        }
        steps.push(record);
    }

    ctl.summary.max_tracking_error_deg = steps
        .iter()
        .filter(|s| s.phase == Phase::Task)
        .filter_map(|s| s.achieved_deg.map(|a| (a - s.target_deg).abs()))
        .reduce(f64::max);
    let report = RunReport {
        steps,
        summary: ctl.summary,
    };
    if let Some(dir) = out_dir {
        if let Some(l) = logs.as_mut() {
            l.flush()?;
        }
        write_steps_csv(&report, File::create(dir.join(STEPS_FILE))?)?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&report.summary)?)?;
        ctl.map.save(dir.join(MAP_FILE))?;
    }
    Ok((report, ctl.map))
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRow {
    time: f64,
    phase: Phase,
    target_deg: f64,
    wheel_deg: f64,
    achieved_deg: Option<f64>,
    grip_error_left_m: f64,
    grip_error_right_m: f64,
    gripping: bool,
}

pub fn write_steps_csv<W: Write>(report: &RunReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in &report.steps {
        w.serialize(StepRow {
            time: s.time,
            phase: s.phase,
            target_deg: s.target_deg,
            wheel_deg: s.wheel_deg,
            achieved_deg: s.achieved_deg,
            grip_error_left_m: s.grip_error[0],
            grip_error_right_m: s.grip_error[1],
            gripping: s.gripping,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_steps_csv<R: std::io::Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<StepRow>()
        .map(|row| {
            let row = row?;
            Ok(StepRecord {
                time: row.time,
                phase: row.phase,
                target_deg: row.target_deg,
                wheel_deg: row.wheel_deg,
                achieved_deg: row.achieved_deg,
                grip_error: [row.grip_error_left_m, row.grip_error_right_m],
                gripping: row.gripping,
            })
        })
        .collect()
}

/// Reads the per-step table of a run directory and writes the plot-ready
/// `wheel_angle.csv` (task phase) and `grip_error.csv` (mm) next to it.
pub fn write_report(dir: &Path) -> Result<Vec<StepRecord>> {
    let steps = read_steps_csv(File::open(dir.join(STEPS_FILE))?)?;
    let mut angle = csv::Writer::from_path(dir.join("wheel_angle.csv"))?;
    angle.write_record(["time", "target_deg", "achieved_deg"])?;
    for s in steps.iter().filter(|s| s.phase == Phase::Task) {
        let achieved = s.achieved_deg.map(|a| a.to_string()).unwrap_or_default();
        angle.write_record([s.time.to_string(), s.target_deg.to_string(), achieved])?;
    }
    angle.flush()?;
    let mut grip = csv::Writer::from_path(dir.join("grip_error.csv"))?;
    grip.write_record(["time", "phase", "left_mm", "right_mm", "gripping"])?;
    for s in &steps {
        let phase = match s.phase {
            Phase::Learning => "learning",
            Phase::Task => "task",
        };
        grip.write_record([
            s.time.to_string(),
            phase.to_string(),
            (s.grip_error[0] * 1e3).to_string(),
            (s.grip_error[1] * 1e3).to_string(),
            u8::from(s.gripping).to_string(),
        ])?;
    }
    grip.flush()?;
    Ok(steps)
}
