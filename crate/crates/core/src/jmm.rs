//! Joint-muscle mapping: one single-hidden-layer tanh network per group,
//! mapping (muscle lengths, muscle tensions) to joint angles.
//!
//! Networks are pre-trained on geometric samples, refined online from
//! teacher samples through a replay buffer, and inverted numerically to turn
//! joint targets into muscle-length commands.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::muscle::{geometric_jmm_dataset, muscle_jacobian, GroupSample};

const SNAPSHOT_VERSION: u32 = 1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Samples drawn per group to fix the length normalization.
const NORMALIZATION_SAMPLES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JmmConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Per-epoch learning-rate factor during pre-training.
    pub lr_decay: f64,
    /// Tension inputs are divided by this (N).
    pub tension_scale: f64,
    pub replay_capacity: usize,
    /// Share of each online mini-batch drawn from retained geometric samples.
    pub mix_ratio: f64,
    pub online_learning_rate: f64,
}

impl Default for JmmConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            lr_decay: 0.985,
            tension_scale: 50.0,
            replay_capacity: 2000,
            mix_ratio: 0.2,
            online_learning_rate: 1e-3,
        }
    }
}

impl JmmConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.batch_size > 0
            && self.replay_capacity > 0
            && self.learning_rate > 0.0
            && self.online_learning_rate > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.tension_scale > 0.0
            && (0.0..=1.0).contains(&self.mix_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid mapping configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Params {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Params {
    fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
        }
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn slices(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }
}

#[derive(Clone, Debug)]
struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn new(p: &Params) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, p: &mut Params, g: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let gs = g.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in p.slices_mut().into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Network output for one group, in the group's joint order (rad).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub angles: Vec<f64>,
    /// True when at least one output was pulled back inside its limits.
    pub clamped: bool,
}

/// One group's network plus its normalization.
#[derive(Clone, Debug)]
pub struct GroupNet {
    pub name: String,
    pub joint_names: Vec<String>,
    pub muscle_names: Vec<String>,
    params: Params,
    input_mean: DVector<f64>,
    input_scale: DVector<f64>,
    output_mean: DVector<f64>,
    output_scale: DVector<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    adam: Adam,
}

struct Forward {
    hidden: DMatrix<f64>,
    output: DMatrix<f64>,
}

impl GroupNet {
    pub fn muscle_count(&self) -> usize {
        self.muscle_names.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    fn forward(&self, x: &DMatrix<f64>) -> Forward {
        let p = &self.params;
        let mut z = &p.w1 * x;
        for mut c in z.column_iter_mut() {
            c += &p.b1;
            c.apply(|v| *v = v.tanh());
        }
        let mut y = &p.w2 * &z;
        for mut c in y.column_iter_mut() {
            c += &p.b2;
        }
        Forward { hidden: z, output: y }
    }

    fn check_inputs(&self, lengths: &[f64], tensions: &[f64]) -> Result<()> {
        let m = self.muscle_count();
        for v in [lengths.len(), tensions.len()] {
            if v != m {
                return Err(Error::DimensionMismatch { expected: m, actual: v });
            }
        }
        Ok(())
    }

    fn normalize_input(&self, lengths: &[f64], tensions: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.muscle_count(),
            lengths
                .iter()
                .chain(tensions)
                .enumerate()
                .map(|(i, v)| (v - self.input_mean[i]) / self.input_scale[i]),
        )
    }

    fn normalize_output(&self, angles: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            angles.len(),
            angles
                .iter()
                .enumerate()
                .map(|(i, v)| (v - self.output_mean[i]) / self.output_scale[i]),
        )
    }

    fn batch<'a, I>(&self, samples: I) -> (DMatrix<f64>, DMatrix<f64>)
    where
        I: ExactSizeIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    {
        let n = samples.len();
        let mut x = DMatrix::zeros(2 * self.muscle_count(), n);
        let mut t = DMatrix::zeros(self.joint_count(), n);
        for (c, (l, tn, q)) in samples.enumerate() {
            x.set_column(c, &self.normalize_input(l, tn));
            t.set_column(c, &self.normalize_output(q));
        }
        (x, t)
    }

    /// Unclamped network output (rad).
    fn raw(&self, lengths: &[f64], tensions: &[f64]) -> (Vec<f64>, Forward) {
        let x = DMatrix::from_column_slice(2 * self.muscle_count(), 1, self.normalize_input(lengths, tensions).as_slice());
        let f = self.forward(&x);
        let q = (0..self.joint_count())
            .map(|i| f.output[(i, 0)] * self.output_scale[i] + self.output_mean[i])
            .collect();
        (q, f)
    }

    /// Mean squared error over a normalized batch and the parameter gradient.
    fn gradient(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> (f64, Params) {
        let f = self.forward(x);
        let count = (t.nrows() * t.ncols()) as f64;
        let diff = &f.output - t;
        let loss = diff.norm_squared() / count;
        let dy = diff * (2.0 / count);
        let gw2 = &dy * f.hidden.transpose();
        let gb2 = dy.column_sum();
        let mut dz = self.params.w2.transpose() * &dy;
        dz.zip_apply(&f.hidden, |d, a| *d *= 1.0 - a * a);
        let gw1 = &dz * x.transpose();
        let gb1 = dz.column_sum();
        (
            loss,
            Params {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        )
    }

    /// Mean squared angle error in deg² over samples and joints.
    fn mse_deg2<'a, I>(&self, samples: I) -> f64
    where
        I: ExactSizeIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    {
        if samples.len() == 0 {
            return 0.0;
        }
        let (x, t) = self.batch(samples);
        let f = self.forward(&x);
        let mut sum = 0.0;
        for c in 0..t.ncols() {
            for r in 0..t.nrows() {
                let e = (f.output[(r, c)] - t[(r, c)]) * self.output_scale[r];
                sum += e.to_degrees().powi(2);
            }
        }
        sum / (t.nrows() * t.ncols()) as f64
    }
}

fn geometric_view(s: &GroupSample) -> (&[f64], &[f64], &[f64]) {
    (&s.lengths, &s.tensions, &s.angles)
}

fn teacher_view(s: &TeacherSample) -> (&[f64], &[f64], &[f64]) {
    (&s.lengths, &s.tensions, &s.q_est)
}

/// Per-epoch pre-training history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub train_rms_deg: Vec<f64>,
    pub validation_rms_deg: Vec<f64>,
    pub validation_samples: usize,
}

impl TrainReport {
    pub fn final_validation_rms_deg(&self) -> f64 {
        self.validation_rms_deg.last().copied().unwrap_or(f64::NAN)
    }
}

/// Muscle readings with the joint angles estimated for them, in the group's
/// muscle and joint order.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub lengths: Vec<f64>,
    pub tensions: Vec<f64>,
    /// Radians.
    pub q_est: Vec<f64>,
    /// Seconds.
    pub timestamp: f64,
}

/// FIFO of teacher samples for one group plus the geometric samples mixed
/// into every online mini-batch.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    mix_ratio: f64,
    samples: VecDeque<TeacherSample>,
    geometric: Vec<GroupSample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, mix_ratio: f64, geometric: Vec<GroupSample>) -> Result<Self> {
        if capacity == 0 || !(0.0..=1.0).contains(&mix_ratio) {
            return Err(Error::InvalidInput("replay capacity must be > 0 and mix ratio in [0, 1]".into()));
        }
        if mix_ratio > 0.0 && geometric.is_empty() {
            return Err(Error::InvalidInput("a positive mix ratio needs geometric samples".into()));
        }
        Ok(Self {
            capacity,
            mix_ratio,
            samples: VecDeque::with_capacity(capacity),
            geometric,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mix_ratio(&self) -> f64 {
        self.mix_ratio
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &TeacherSample> {
        self.samples.iter()
    }

    /// Appends, evicting the oldest sample when full.
    pub fn push(&mut self, s: TeacherSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    /// RMS error on the new samples before and after, degrees.
    pub new_rms_before_deg: f64,
    pub new_rms_after_deg: f64,
    /// Mean squared error on the buffer/geometric mix, deg².
    pub mix_loss_before: f64,
    pub mix_loss_after: f64,
    pub steps: usize,
    pub rolled_back: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertSettings {
    /// Largest per-joint residual accepted, degrees.
    pub tolerance_deg: f64,
    pub max_iters: usize,
    /// Damping of the minimum-norm step, rad².
    pub damping: f64,
}

impl Default for InvertSettings {
    fn default() -> Self {
        Self {
            tolerance_deg: 0.5,
            max_iters: 100,
            damping: 1e-3,
        }
    }
}

/// The full mapping: one network per model group, indexed like
/// `RobotModel::groups`.
#[derive(Clone, Debug)]
pub struct JointMuscleMap {
    pub config: JmmConfig,
    pub groups: Vec<GroupNet>,
    model: RobotModel,
    layout_hash: String,
}

impl JointMuscleMap {
    /// Fresh networks. Length normalization comes from geometric samples,
    /// tension inputs are centred at zero, outputs are scaled to the joint
    /// ranges. Tension weights start at zero so that pre-training on
    /// zero-tension data leaves them neutral.
    pub fn new(model: &RobotModel, config: JmmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = Vec::with_capacity(model.groups.len());
        for (gi, g) in model.groups.iter().enumerate() {
            let m = g.muscles.len();
            let n = g.joints.len();
            let h = config.hidden;
            let stats = geometric_jmm_dataset(model, gi, NORMALIZATION_SAMPLES, rng.random())?;
            let mut input_mean = DVector::zeros(2 * m);
            let mut input_scale = DVector::from_element(2 * m, config.tension_scale);
            for k in 0..m {
                let mean = stats.iter().map(|s| s.lengths[k]).sum::<f64>() / stats.len() as f64;
                let var = stats.iter().map(|s| (s.lengths[k] - mean).powi(2)).sum::<f64>() / stats.len() as f64;
                input_mean[k] = mean;
                input_scale[k] = var.sqrt().max(1e-4);
            }
            let lower: Vec<f64> = g.joints.iter().map(|&j| model.dofs[j].lower).collect();
            let upper: Vec<f64> = g.joints.iter().map(|&j| model.dofs[j].upper).collect();
            let output_mean = DVector::from_iterator(n, lower.iter().zip(&upper).map(|(a, b)| 0.5 * (a + b)));
            let output_scale = DVector::from_iterator(n, lower.iter().zip(&upper).map(|(a, b)| 0.5 * (b - a)));

            let a1 = (6.0 / (m + h) as f64).sqrt();
            let w1 = DMatrix::from_fn(h, 2 * m, |_, c| if c < m { rng.random_range(-a1..a1) } else { 0.0 });
            let a2 = (6.0 / (h + n) as f64).sqrt();
            let w2 = DMatrix::from_fn(n, h, |_, _| rng.random_range(-a2..a2));
            let params = Params {
                w1,
                b1: DVector::zeros(h),
                w2,
                b2: DVector::zeros(n),
            };
            groups.push(GroupNet {
                name: g.name.clone(),
                joint_names: g.joints.iter().map(|&j| model.dofs[j].name.clone()).collect(),
                muscle_names: g.muscles.iter().map(|&k| model.muscles[k].name.clone()).collect(),
                adam: Adam::new(&params),
                params,
                input_mean,
                input_scale,
                output_mean,
                output_scale,
                lower,
                upper,
            });
        }
        Ok(Self {
            config,
            groups,
            model: model.clone(),
            layout_hash: layout_hash(model),
        })
    }

    pub fn layout_hash(&self) -> &str {
        &self.layout_hash
    }

    fn net(&self, group: usize) -> Result<&GroupNet> {
        self.groups.get(group).ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    fn net_mut(&mut self, group: usize) -> Result<&mut GroupNet> {
        self.groups.get_mut(group).ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    /// Joint angles for one group's muscle readings, clamped to the limits.
    pub fn predict(&self, group: usize, lengths: &[f64], tensions: &[f64]) -> Result<Prediction> {
        let net = self.net(group)?;
        net.check_inputs(lengths, tensions)?;
        let (mut angles, _) = net.raw(lengths, tensions);
        let mut clamped = false;
        for (i, a) in angles.iter_mut().enumerate() {
            let c = a.clamp(net.lower[i], net.upper[i]);
            clamped |= c != *a;
            *a = c;
        }
        Ok(Prediction { angles, clamped })
    }

    /// ∂θ/∂l of the unclamped output (rad/m), joints × muscles.
    pub fn length_jacobian(&self, group: usize, lengths: &[f64], tensions: &[f64]) -> Result<DMatrix<f64>> {
        let net = self.net(group)?;
        net.check_inputs(lengths, tensions)?;
        let (_, f) = net.raw(lengths, tensions);
        Ok(length_jacobian_at(net, &f))
    }

    /// Trains one group on `dataset`, holding out 10% for validation.
    pub fn pretrain(&mut self, group: usize, dataset: &[GroupSample], epochs: usize, lr: f64, seed: u64) -> Result<TrainReport> {
        let batch_size = self.config.batch_size;
        let decay = self.config.lr_decay;
        let net = self.net_mut(group)?;
        if dataset.is_empty() {
            return Err(Error::InvalidInput("pre-training dataset is empty".into()));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        for s in dataset {
            net.check_inputs(&s.lengths, &s.tensions)?;
            if s.angles.len() != net.joint_count() {
                return Err(Error::DimensionMismatch {
                    expected: net.joint_count(),
                    actual: s.angles.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let n_val = dataset.len() / 10;
        let (val_idx, train_idx) = order.split_at(n_val);
        // A dataset too small to split is validated on itself.
        let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

        let (x_all, t_all) = net.batch(dataset.iter().map(geometric_view));
        let x_val = x_all.select_columns(val_idx);
        let t_val = t_all.select_columns(val_idx);
        let backup = (net.params.clone(), net.adam.clone());

        let mut report = TrainReport {
            train_rms_deg: Vec::with_capacity(epochs),
            validation_rms_deg: Vec::with_capacity(epochs),
            validation_samples: val_idx.len(),
        };
        let mut train: Vec<usize> = train_idx.to_vec();
        let mut rate = lr;
        for epoch in 0..epochs {
            train.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in train.chunks(batch_size) {
                let x = x_all.select_columns(chunk);
                let t = t_all.select_columns(chunk);
                let (loss, g) = net.gradient(&x, &t);
                net.adam.step(&mut net.params, &g, rate);
                sum += loss * chunk.len() as f64;
            }
            if !net.params.is_finite() {
                (net.params, net.adam) = backup;
                return Err(Error::NonFinite(format!("network weights after pre-training epoch {epoch}")));
            }
            report.train_rms_deg.push(normalized_rms_deg(net, sum / train.len() as f64));
            report.validation_rms_deg.push(rms_deg(net, &x_val, &t_val));
            rate *= decay;
        }
        Ok(report)
    }

    /// Appends `new_samples` to `buffer` and takes `steps` mini-batch steps on
    /// a buffer/geometric mix. The step is undone if the error on the new
    /// samples or the mix validation loss (by more than 20%) goes up.
    pub fn update_online(
        &mut self,
        group: usize,
        buffer: &mut ReplayBuffer,
        new_samples: &[TeacherSample],
        steps: usize,
        seed: u64,
    ) -> Result<UpdateReport> {
        let lr = self.config.online_learning_rate;
        let batch_size = self.config.batch_size;
        let net = self.net_mut(group)?;
        for s in new_samples {
            net.check_inputs(&s.lengths, &s.tensions)?;
            if s.q_est.len() != net.joint_count() {
                return Err(Error::DimensionMismatch {
                    expected: net.joint_count(),
                    actual: s.q_est.len(),
                });
            }
            let finite = s.lengths.iter().chain(&s.tensions).chain(&s.q_est).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite("teacher sample".into()));
            }
            for (i, q) in s.q_est.iter().enumerate() {
                if *q < net.lower[i] || *q > net.upper[i] {
                    return Err(Error::TargetOutOfLimits {
                        joint: net.joint_names[i].clone(),
                        value_deg: q.to_degrees(),
                    });
                }
            }
        }
        let new_rms_before = net.mse_deg2(new_samples.iter().map(teacher_view)).sqrt();
        if new_samples.is_empty() || steps == 0 {
            let mix = mix_loss(net, buffer);
            return Ok(UpdateReport {
                new_rms_before_deg: new_rms_before,
                new_rms_after_deg: new_rms_before,
                mix_loss_before: mix,
                mix_loss_after: mix,
                steps: 0,
                rolled_back: false,
            });
        }
        for s in new_samples {
            buffer.push(s.clone());
        }
        let mix_before = mix_loss(net, buffer);
        let backup = (net.params.clone(), net.adam.clone());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_geo = ((buffer.mix_ratio * batch_size as f64).round() as usize).min(batch_size);
        let n_geo = if buffer.geometric.is_empty() { 0 } else { n_geo };
        let n_buf = batch_size - n_geo;
        for _ in 0..steps {
            let mut picks: Vec<(&[f64], &[f64], &[f64])> = Vec::with_capacity(batch_size);
            for _ in 0..n_buf {
                picks.push(teacher_view(&buffer.samples[rng.random_range(0..buffer.samples.len())]));
            }
            for _ in 0..n_geo {
                picks.push(geometric_view(&buffer.geometric[rng.random_range(0..buffer.geometric.len())]));
            }
            let (x, t) = net.batch(picks.into_iter());
            let (_, g) = net.gradient(&x, &t);
            net.adam.step(&mut net.params, &g, lr);
        }

        if !net.params.is_finite() {
            (net.params, net.adam) = backup;
            return Err(Error::NonFinite("network weights after online update (rolled back)".into()));
        }
        let new_rms_after = net.mse_deg2(new_samples.iter().map(teacher_view)).sqrt();
        let mix_after = mix_loss(net, buffer);
        let rolled_back = new_rms_after > new_rms_before || mix_after > 1.2 * mix_before;
        if rolled_back {
            (net.params, net.adam) = backup;
        }
        Ok(UpdateReport {
            new_rms_before_deg: new_rms_before,
            new_rms_after_deg: if rolled_back { new_rms_before } else { new_rms_after },
            mix_loss_before: mix_before,
            mix_loss_after: if rolled_back { mix_before } else { mix_after },
            steps,
            rolled_back,
        })
    }

    /// `G Gᵀ + εI` with `G` the geometric muscle Jacobian at the currently
    /// predicted angles. Steps measured in its inverse stay close to the set
    /// of lengths the geometry can produce, where the network was trained.
    fn tangent_metric(&self, group: usize, net: &GroupNet, l: &[f64], tensions: &[f64]) -> Result<DMatrix<f64>> {
        let (angles, _) = net.raw(l, tensions);
        let mut q = self.model.initial_posture().clone();
        for (k, &d) in self.model.groups[group].joints.iter().enumerate() {
            q[d] = self.model.clamp_dof(d, angles[k]);
        }
        let g = muscle_jacobian(&self.model, &q, group)?;
        let mut metric = &g * g.transpose();
        let m = metric.nrows();
        let eps = 1e-3 * metric.trace() / m as f64;
        for i in 0..m {
            metric[(i, i)] += eps;
        }
        Ok(metric)
    }

    /// Muscle lengths whose prediction under `tensions` matches `q_target`,
    /// found by damped minimum-norm Gauss-Newton steps from `l_init`. Step
    /// size is measured against the geometric length manifold so that
    /// redundant muscles are not driven where the network has no data.
    pub fn invert(&self, group: usize, q_target: &[f64], tensions: &[f64], l_init: &[f64], settings: &InvertSettings) -> Result<Vec<f64>> {
        let net = self.net(group)?;
        net.check_inputs(l_init, tensions)?;
        if q_target.len() != net.joint_count() {
            return Err(Error::DimensionMismatch {
                expected: net.joint_count(),
                actual: q_target.len(),
            });
        }
        for (i, q) in q_target.iter().enumerate() {
            if !(*q >= net.lower[i] && *q <= net.upper[i]) {
                return Err(Error::TargetOutOfLimits {
                    joint: net.joint_names[i].clone(),
                    value_deg: q.to_degrees(),
                });
            }
        }
        let target = DVector::from_column_slice(q_target);
        let n = net.joint_count();
        let residual = |l: &[f64]| {
            let (q, f) = net.raw(l, tensions);
            (DVector::from_vec(q) - &target, f)
        };
        let worst = |r: &DVector<f64>| r.amax().to_degrees();

        let mut l = l_init.to_vec();
        let (mut r, mut f) = residual(&l);
        for _ in 0..settings.max_iters {
            if worst(&r) <= settings.tolerance_deg {
                return Ok(l);
            }
            let j = length_jacobian_at(net, &f);
            let metric = self.tangent_metric(group, net, &l, tensions)?;
            let jm = &j * &metric;
            let jmjt = &jm * j.transpose() + DMatrix::identity(n, n) * settings.damping;
            let Some(y) = jmjt.cholesky().map(|c| c.solve(&(-&r))) else {
                break;
            };
            let step = jm.transpose() * y;
            let mut alpha = 1.0;
            let mut improved = false;
            for _ in 0..20 {
                let trial: Vec<f64> = l.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
                let (tr, tf) = residual(&trial);
                if tr.norm() < r.norm() {
                    l = trial;
                    r = tr;
                    f = tf;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if worst(&r) <= settings.tolerance_deg {
            Ok(l)
        } else {
            Err(Error::InversionNoConvergence { residual_deg: worst(&r) })
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            layout_hash: self.layout_hash.clone(),
            config: self.config.clone(),
            groups: self.groups.iter().map(GroupSnapshot::from).collect(),
        };
        Ok(serde_json::to_string_pretty(&snap)?)
    }

    /// Parses a snapshot, refusing one written for a different model layout.
    /// Optimizer state is not stored and starts fresh.
    pub fn from_json(model: &RobotModel, s: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(s)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported snapshot version {}", snap.version)));
        }
        let expected = layout_hash(model);
        if snap.layout_hash != expected {
            return Err(Error::LayoutMismatch {
                expected,
                found: snap.layout_hash,
            });
        }
        snap.config.validate()?;
        if snap.groups.len() != model.groups.len() {
            return Err(Error::DimensionMismatch {
                expected: model.groups.len(),
                actual: snap.groups.len(),
            });
        }
        let groups = snap
            .groups
            .into_iter()
            .zip(&model.groups)
            .map(|(gs, g)| gs.into_net(model, g, snap.config.hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: snap.config,
            groups,
            model: model.clone(),
            layout_hash: expected,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(model: &RobotModel, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(model, &std::fs::read_to_string(path)?)
    }
}

fn length_jacobian_at(net: &GroupNet, f: &Forward) -> DMatrix<f64> {
    let m = net.muscle_count();
    let p = &net.params;
    let mut inner = p.w1.columns(0, m).clone_owned();
    for (r, mut row) in inner.row_iter_mut().enumerate() {
        let a = f.hidden[(r, 0)];
        row *= 1.0 - a * a;
    }
    let mut j = &p.w2 * inner;
    for r in 0..j.nrows() {
        for c in 0..m {
            j[(r, c)] *= net.output_scale[r] / net.input_scale[c];
        }
    }
    j
}

fn rms_deg(net: &GroupNet, x: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    let f = net.forward(x);
    let mut sum = 0.0;
    for c in 0..t.ncols() {
        for r in 0..t.nrows() {
            sum += ((f.output[(r, c)] - t[(r, c)]) * net.output_scale[r]).to_degrees().powi(2);
        }
    }
    (sum / (t.nrows() * t.ncols()) as f64).sqrt()
}

/// Converts a normalized MSE to an approximate RMS in degrees using the mean
/// output scale.
fn normalized_rms_deg(net: &GroupNet, mse: f64) -> f64 {
    let s2 = net.output_scale.iter().map(|s| s * s).sum::<f64>() / net.joint_count() as f64;
    (mse * s2).sqrt().to_degrees()
}

fn mix_loss(net: &GroupNet, buffer: &ReplayBuffer) -> f64 {
    let teacher = net.mse_deg2(buffer.samples.iter().map(teacher_view));
    if buffer.geometric.is_empty() {
        return teacher;
    }
    let geo = net.mse_deg2(buffer.geometric.iter().map(geometric_view));
    (1.0 - buffer.mix_ratio) * teacher + buffer.mix_ratio * geo
}

/// Hash of the group names, joint names and muscle names, in order.
pub fn layout_hash(model: &RobotModel) -> String {
    let mut h = Sha256::new();
    for g in &model.groups {
        h.update(g.name.as_bytes());
        h.update([0]);
        for &j in &g.joints {
            h.update(model.dofs[j].name.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for &m in &g.muscles {
            h.update(model.muscles[m].name.as_bytes());
            h.update([0]);
        }
        h.update([2]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    layout_hash: String,
    config: JmmConfig,
    groups: Vec<GroupSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct GroupSnapshot {
    name: String,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    output_mean: Vec<f64>,
    output_scale: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn vector(v: Vec<f64>, len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            actual: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(DVector::from_vec(v))
}

impl From<&GroupNet> for GroupSnapshot {
    fn from(n: &GroupNet) -> Self {
        Self {
            name: n.name.clone(),
            w1: rows(&n.params.w1),
            b1: n.params.b1.iter().copied().collect(),
            w2: rows(&n.params.w2),
            b2: n.params.b2.iter().copied().collect(),
            input_mean: n.input_mean.iter().copied().collect(),
            input_scale: n.input_scale.iter().copied().collect(),
            output_mean: n.output_mean.iter().copied().collect(),
            output_scale: n.output_scale.iter().copied().collect(),
        }
    }
}

impl GroupSnapshot {
    fn into_net(self, model: &RobotModel, g: &crate::kinematics::Group, hidden: usize) -> Result<GroupNet> {
        let m = g.muscles.len();
        let n = g.joints.len();
        let params = Params {
            w1: from_rows(&self.w1, hidden, 2 * m, "w1")?,
            b1: vector(self.b1, hidden, "b1")?,
            w2: from_rows(&self.w2, n, hidden, "w2")?,
            b2: vector(self.b2, n, "b2")?,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("weights of group `{}`", self.name)));
        }
        let input_scale = vector(self.input_scale, 2 * m, "input_scale")?;
        let output_scale = vector(self.output_scale, n, "output_scale")?;
        if input_scale.iter().chain(output_scale.iter()).any(|s| *s <= 0.0) {
            return Err(Error::InvalidInput("normalization scales must be positive".into()));
        }
        Ok(GroupNet {
            name: self.name,
            joint_names: g.joints.iter().map(|&j| model.dofs[j].name.clone()).collect(),
            muscle_names: g.muscles.iter().map(|&k| model.muscles[k].name.clone()).collect(),
            adam: Adam::new(&params),
            params,
            input_mean: vector(self.input_mean, 2 * m, "input_mean")?,
            input_scale,
            output_mean: vector(self.output_mean, n, "output_mean")?,
            output_scale,
            lower: g.joints.iter().map(|&j| model.dofs[j].lower).collect(),
            upper: g.joints.iter().map(|&j| model.dofs[j].upper).collect(),
        })
    }
}
