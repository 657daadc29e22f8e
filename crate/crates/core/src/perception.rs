//! Simulated fiducial markers seen by the head camera, and the joint-angle
//! estimate that turns them into teacher data.
//!
//! The hand pose is recovered relative to the wheel marker, whose pose in the
//! body frame is known, so any error in the camera pose cancels.

use std::fmt;
use std::io::Write;

use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ik::{scapulohumeral_ik, IkRequest, IkSettings, RhythmParams};
use crate::kinematics::{JointVector, Pose, RobotModel, Side};
use crate::plant::Plant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerId {
    HandLeft,
    HandRight,
    WheelCenter,
}

impl MarkerId {
    pub const ALL: [MarkerId; 3] = [MarkerId::HandLeft, MarkerId::HandRight, MarkerId::WheelCenter];

    pub fn hand(side: Side) -> Self {
        match side {
            Side::Left => MarkerId::HandLeft,
            Side::Right => MarkerId::HandRight,
        }
    }
}

impl fmt::Display for MarkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerId::HandLeft => "hand-left",
            MarkerId::HandRight => "hand-right",
            MarkerId::WheelCenter => "wheel-center",
        })
    }
}

/// Per-axis standard deviations of the marker pose noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkerNoise {
    /// Meters.
    pub sigma_pos: f64,
    /// Radians, applied as a rotation vector.
    pub sigma_rot: f64,
}

impl Default for MarkerNoise {
    fn default() -> Self {
        Self {
            sigma_pos: 0.002,
            sigma_rot: 0.005,
        }
    }
}

impl MarkerNoise {
    pub const NONE: MarkerNoise = MarkerNoise {
        sigma_pos: 0.0,
        sigma_rot: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerObservation {
    pub id: MarkerId,
    /// Pose in the camera frame.
    pub pose_in_eye: Pose,
    pub noise_sigma_pos: f64,
    pub noise_sigma_rot: f64,
    /// In front of the camera (positive optical axis).
    pub visible: bool,
}

impl MarkerObservation {
    fn visible_pose(&self) -> Result<&Pose> {
        if self.visible {
            Ok(&self.pose_in_eye)
        } else {
            Err(Error::MarkerNotVisible(self.id.to_string()))
        }
    }
}

/// Observes both hand markers and the wheel marker from the plant's true
/// camera. `wheel_pose_body` is the true wheel marker pose in the body frame.
/// Output order follows [`MarkerId::ALL`].
pub fn observe_markers(plant: &Plant, wheel_pose_body: &Pose, noise: &MarkerNoise, seed: u64) -> Result<Vec<MarkerObservation>> {
    if !(noise.sigma_pos >= 0.0 && noise.sigma_rot >= 0.0) {
        return Err(Error::InvalidInput(format!("marker noise must be non-negative, got {noise:?}")));
    }
    let model = plant.model();
    let q = &plant.state().q_true;
    let eye_inv = plant.camera_pose().inverse();
    let pos_noise = Normal::new(0.0, noise.sigma_pos).expect("checked sigma");
    let rot_noise = Normal::new(0.0, noise.sigma_rot).expect("checked sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations = MarkerId::ALL
        .iter()
        .map(|&id| {
            let body = match id {
                MarkerId::HandLeft => model.hand_pose(q, Side::Left),
                MarkerId::HandRight => model.hand_pose(q, Side::Right),
                MarkerId::WheelCenter => *wheel_pose_body,
            };
            let exact = eye_inv.compose(&body);
            let dp = Vector3::from_fn(|_, _| pos_noise.sample(&mut rng));
            let dr = Vector3::from_fn(|_, _| rot_noise.sample(&mut rng));
            let pose = Pose::new(exact.position + dp, exact.orientation * UnitQuaternion::from_scaled_axis(dr));
            MarkerObservation {
                id,
                visible: pose.is_finite() && pose.position.z > 0.0,
                pose_in_eye: pose,
                noise_sigma_pos: noise.sigma_pos,
                noise_sigma_rot: noise.sigma_rot,
            }
        })
        .collect();
    Ok(observations)
}

/// Hand pose in the body frame from the hand pose relative to the wheel:
/// `wheel_pose_body ∘ obs_wheel⁻¹ ∘ obs_hand`. The camera pose drops out.
pub fn hand_pose_from_object(obs_wheel: &MarkerObservation, obs_hand: &MarkerObservation, wheel_pose_body: &Pose) -> Result<Pose> {
    let wheel = obs_wheel.visible_pose()?;
    let hand = obs_hand.visible_pose()?;
    Ok(wheel_pose_body.compose(&wheel.inverse().compose(hand)))
}

/// Hand pose in the body frame through the camera pose the robot believes it
/// has. Camera drift goes straight into the result.
pub fn hand_pose_from_camera(obs_hand: &MarkerObservation, camera_pose_body: &Pose) -> Result<Pose> {
    Ok(camera_pose_body.compose(obs_hand.visible_pose()?))
}

/// Estimated joint angles for one arm: the same rhythm IK that generates
/// postures, on the nominal model, seeded at `q_seed`.
pub fn estimate_joint_angles(
    model: &RobotModel,
    hand: Side,
    hand_pose_body: &Pose,
    q_seed: &JointVector,
    params: RhythmParams,
) -> Result<JointVector> {
    if !hand_pose_body.is_finite() {
        return Err(Error::NonFinite("hand pose".into()));
    }
    model.check_dims(q_seed)?;
    let req = IkRequest {
        target: *hand_pose_body,
        hand,
        q_init: q_seed.clone(),
        settings: IkSettings::default(),
    };
    Ok(scapulohumeral_ik(model, &req, params)?.q)
}

/// Teacher-data log: `time, marker_vis, l_<muscle>..., t_<muscle>...,
/// q_est_<joint>...` in seconds, meters, newtons and degrees. Rows without an
/// estimate leave the angle columns empty.
pub struct TeacherLogWriter<W: Write> {
    out: csv::Writer<W>,
    joints: usize,
}

impl<W: Write> TeacherLogWriter<W> {
    pub fn new(model: &RobotModel, out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "marker_vis".to_string()];
        header.extend(model.muscles.iter().map(|m| format!("l_{}", m.name)));
        header.extend(model.muscles.iter().map(|m| format!("t_{}", m.name)));
        header.extend(model.joint_names().map(|n| format!("q_est_{n}")));
        out.write_record(&header)?;
        Ok(Self {
            out,
            joints: model.dof_count(),
        })
    }

    pub fn write(
        &mut self,
        time: f64,
        markers_visible: bool,
        lengths: &[f64],
        tensions: &[f64],
        q_est: Option<&JointVector>,
    ) -> Result<()> {
        let mut row = vec![time.to_string(), u8::from(markers_visible).to_string()];
        row.extend(lengths.iter().map(|v| v.to_string()));
        row.extend(tensions.iter().map(|v| v.to_string()));
        match q_est {
            Some(q) => row.extend(q.iter().map(|v| v.to_degrees().to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), self.joints)),
        }
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
