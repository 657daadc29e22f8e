//! Pose algebra, the kinematic tree and forward kinematics.

pub mod default_model;
mod fk;
pub mod model;
pub mod pose;

pub use default_model::{default_model, default_model_file};
pub use fk::{forward_kinematics, hand_jacobian, hand_jacobian_indexed, Frames};
pub use model::{Arm, Group, JointVector, ModelFile, MusclePath, RobotModel, Side};
pub use pose::{Pose, PoseSpec};
