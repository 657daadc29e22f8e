//! Built-in humanlike upper-body model: two shoulder complexes with a
//! 2-DOF scapula, 3-DOF glenohumeral joint, elbow and 3-DOF wrist.
//!
//! Per arm, six muscles run from the trunk to the scapula and seven cross
//! the glenohumeral joint; four elbow and six wrist muscles complete the
//! arm group. The right side mirrors the left across the sagittal plane.

use super::model::{
    ArmSpec, CameraSpec, GroupSpec, HandsSpec, JointKind, JointSpec, JointVector, LinkSpec, ModelFile, MuscleSpec, RhythmPairSpec,
    RobotModel, ViaPointSpec,
};
use super::pose::PoseSpec;
use crate::muscle::muscle_lengths;

pub const UPPER_ARM_LENGTH: f64 = 0.30;
pub const FOREARM_LENGTH: f64 = 0.25;
pub const HAND_LENGTH: f64 = 0.08;

/// Initial ("average driving") posture per arm, degrees. The scapula values
/// follow the 1/2.7 rhythm of the shoulder values.
const INITIAL_POSTURE_DEG: [(&str, f64); 9] = [
    ("scapula_roll", 15.0 / 2.7),
    ("scapula_pitch", -30.0 / 2.7),
    ("shoulder_pitch", -30.0),
    ("shoulder_roll", 15.0),
    ("shoulder_yaw", -20.0),
    ("elbow", -80.0),
    ("wrist_yaw", 0.0),
    ("wrist_pitch", 0.0),
    ("wrist_roll", 0.0),
];

struct Mirror(f64);

impl Mirror {
    fn p(&self, v: [f64; 3]) -> [f64; 3] {
        [v[0], self.0 * v[1], v[2]]
    }

    /// Rotation axes are pseudo-vectors: reflecting y flips x and z.
    fn axis(&self, v: [f64; 3]) -> [f64; 3] {
        if self.0 > 0.0 {
            v
        } else {
            [-v[0], v[1], -v[2]]
        }
    }
}

fn revolute(name: String, parent: String, child: String, xyz: [f64; 3], axis: [f64; 3], limits_deg: [f64; 2]) -> JointSpec {
    JointSpec {
        name,
        kind: JointKind::Revolute,
        parent,
        child,
        origin: PoseSpec { xyz, rpy_deg: [0.0; 3] },
        axis,
        limits_deg,
    }
}

fn via(link: &str, offset: [f64; 3]) -> ViaPointSpec {
    ViaPointSpec {
        link: link.to_owned(),
        offset,
    }
}

fn muscle(name: String, via_points: Vec<ViaPointSpec>) -> MuscleSpec {
    MuscleSpec {
        name,
        via_points,
        reference_length: 1.0,
    }
}

struct ArmParts {
    links: Vec<LinkSpec>,
    joints: Vec<JointSpec>,
    muscles: Vec<MuscleSpec>,
    groups: [GroupSpec; 2],
    arm: ArmSpec,
}

fn build_arm(prefix: &str, sign: f64) -> ArmParts {
    let m = Mirror(sign);
    let n = |s: &str| format!("{prefix}_{s}");
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];

    let link_names = [
        "scapula_base",
        "scapula",
        "humerus_pitch",
        "humerus_roll",
        "humerus",
        "forearm",
        "wrist_twist",
        "wrist_base",
        "wrist",
        "hand",
    ];
    let links = link_names.iter().map(|l| LinkSpec { name: n(l) }).collect();

    let joints = vec![
        revolute(
            n("scapula_pitch"),
            "trunk".into(),
            n("scapula_base"),
            m.p([0.0, 0.03, 0.45]),
            m.axis(y),
            [-30.0, 15.0],
        ),
        revolute(
            n("scapula_roll"),
            n("scapula_base"),
            n("scapula"),
            [0.0; 3],
            m.axis(x),
            [-15.0, 30.0],
        ),
        revolute(
            n("shoulder_pitch"),
            n("scapula"),
            n("humerus_pitch"),
            m.p([0.0, 0.17, 0.0]),
            m.axis(y),
            [-100.0, 30.0],
        ),
        revolute(
            n("shoulder_roll"),
            n("humerus_pitch"),
            n("humerus_roll"),
            [0.0; 3],
            m.axis(x),
            [-20.0, 70.0],
        ),
        revolute(
            n("shoulder_yaw"),
            n("humerus_roll"),
            n("humerus"),
            [0.0; 3],
            m.axis(z),
            [-45.0, 70.0],
        ),
        revolute(
            n("elbow"),
            n("humerus"),
            n("forearm"),
            [0.0, 0.0, -UPPER_ARM_LENGTH],
            m.axis(y),
            [-145.0, -10.0],
        ),
        revolute(
            n("wrist_yaw"),
            n("forearm"),
            n("wrist_twist"),
            [0.0, 0.0, -FOREARM_LENGTH],
            m.axis(z),
            [-60.0, 60.0],
        ),
        revolute(
            n("wrist_pitch"),
            n("wrist_twist"),
            n("wrist_base"),
            [0.0; 3],
            m.axis(y),
            [-45.0, 45.0],
        ),
        revolute(n("wrist_roll"), n("wrist_base"), n("wrist"), [0.0; 3], m.axis(x), [-35.0, 35.0]),
        JointSpec {
            name: n("hand_fixed"),
            kind: JointKind::Fixed,
            parent: n("wrist"),
            child: n("hand"),
            origin: PoseSpec {
                xyz: [0.0, 0.0, -HAND_LENGTH],
                rpy_deg: [0.0; 3],
            },
            axis: z,
            limits_deg: [0.0, 0.0],
        },
    ];

    let trunk = "trunk";
    let scap = n("scapula");
    let hum = n("humerus");
    let fore = n("forearm");
    let twist = n("wrist_twist");
    let wrist = n("wrist");

    let scapula_muscles = vec![
        muscle(
            n("upper_trapezius"),
            vec![via(trunk, m.p([-0.06, 0.04, 0.62])), via(&scap, m.p([-0.03, 0.13, 0.03]))],
        ),
        muscle(
            n("middle_trapezius"),
            vec![via(trunk, m.p([-0.10, 0.0, 0.47])), via(&scap, m.p([-0.07, 0.09, 0.0]))],
        ),
        muscle(
            n("lower_trapezius_a"),
            vec![via(trunk, m.p([-0.10, 0.0, 0.30])), via(&scap, m.p([-0.08, 0.055, -0.06]))],
        ),
        muscle(
            n("lower_trapezius_b"),
            vec![via(trunk, m.p([-0.10, 0.0, 0.36])), via(&scap, m.p([-0.08, 0.11, -0.04]))],
        ),
        muscle(
            n("rhomboid"),
            vec![via(trunk, m.p([-0.10, 0.0, 0.52])), via(&scap, m.p([-0.08, 0.05, -0.13]))],
        ),
        muscle(
            n("serratus_anterior"),
            vec![via(trunk, m.p([0.10, 0.10, 0.30])), via(&scap, m.p([-0.06, 0.07, -0.07]))],
        ),
    ];

    let arm_muscles = vec![
        // Glenohumeral: three deltoid heads plus the deep rotator-cuff layer.
        muscle(
            n("deltoid_anterior"),
            vec![via(&scap, m.p([0.04, 0.15, 0.04])), via(&hum, m.p([0.05, 0.01, -0.13]))],
        ),
        muscle(
            n("deltoid_middle"),
            vec![via(&scap, m.p([0.0, 0.19, 0.05])), via(&hum, m.p([0.0, 0.028, -0.13]))],
        ),
        muscle(
            n("deltoid_posterior"),
            vec![via(&scap, m.p([-0.05, 0.15, 0.04])), via(&hum, m.p([-0.01, 0.01, -0.13]))],
        ),
        muscle(
            n("supraspinatus"),
            vec![via(&scap, m.p([-0.04, 0.09, 0.04])), via(&hum, m.p([0.0, 0.014, 0.02]))],
        ),
        muscle(
            n("infraspinatus"),
            vec![via(&scap, m.p([-0.07, 0.10, -0.05])), via(&hum, m.p([-0.045, 0.03, 0.0]))],
        ),
        muscle(
            n("subscapularis"),
            vec![via(&scap, m.p([-0.03, 0.08, -0.06])), via(&hum, m.p([0.03, -0.015, 0.0]))],
        ),
        muscle(
            n("teres_major"),
            vec![via(&scap, m.p([-0.07, 0.10, -0.11])), via(&hum, m.p([0.005, -0.01, -0.08]))],
        ),
        // Elbow.
        muscle(
            n("biceps"),
            vec![via(&hum, m.p([0.03, 0.0, -0.10])), via(&fore, m.p([0.008, 0.0, -0.035]))],
        ),
        muscle(
            n("brachioradialis"),
            vec![via(&hum, m.p([0.005, 0.02, -0.24])), via(&fore, m.p([0.008, 0.015, -0.20]))],
        ),
        muscle(
            n("triceps"),
            vec![
                via(&hum, m.p([-0.03, 0.0, -0.10])),
                via(&fore, m.p([-0.05, 0.0, 0.04])),
                via(&fore, m.p([-0.015, 0.0, -0.04])),
            ],
        ),
        muscle(
            n("triceps_lateral"),
            vec![
                via(&hum, m.p([-0.035, 0.012, -0.14])),
                via(&fore, m.p([-0.045, 0.0, 0.035])),
                via(&fore, m.p([-0.02, 0.012, -0.05])),
            ],
        ),
        // Wrist.
        muscle(
            n("flexor_carpi_radialis"),
            vec![via(&fore, m.p([0.03, 0.025, -0.17])), via(&wrist, m.p([0.025, 0.025, -0.03]))],
        ),
        muscle(
            n("flexor_carpi_ulnaris"),
            vec![via(&fore, m.p([0.03, -0.025, -0.17])), via(&wrist, m.p([0.025, -0.025, -0.03]))],
        ),
        muscle(
            n("extensor_carpi_radialis"),
            vec![via(&fore, m.p([-0.03, 0.025, -0.17])), via(&wrist, m.p([-0.025, 0.025, -0.03]))],
        ),
        muscle(
            n("extensor_carpi_ulnaris"),
            vec![via(&fore, m.p([-0.03, -0.025, -0.17])), via(&wrist, m.p([-0.025, -0.025, -0.03]))],
        ),
        // Forearm rotators end on the twist segment and cross only the yaw joint.
        muscle(
            n("pronator"),
            vec![via(&fore, m.p([0.03, -0.03, -0.21])), via(&twist, m.p([0.03, 0.03, 0.01]))],
        ),
        muscle(
            n("supinator"),
            vec![via(&fore, m.p([-0.03, -0.03, -0.21])), via(&twist, m.p([-0.03, 0.03, 0.01]))],
        ),
    ];

    let groups = [
        GroupSpec {
            name: n("scapula"),
            joints: vec![n("scapula_roll"), n("scapula_pitch")],
            muscles: scapula_muscles.iter().map(|m| m.name.clone()).collect(),
        },
        GroupSpec {
            name: n("arm"),
            joints: [
                "shoulder_pitch",
                "shoulder_roll",
                "shoulder_yaw",
                "elbow",
                "wrist_yaw",
                "wrist_pitch",
                "wrist_roll",
            ]
            .iter()
            .map(|j| n(j))
            .collect(),
            muscles: arm_muscles.iter().map(|m| m.name.clone()).collect(),
        },
    ];

    let arm = ArmSpec {
        link: n("hand"),
        scapula: vec![n("scapula_roll"), n("scapula_pitch")],
        glenohumeral: vec![n("shoulder_pitch"), n("shoulder_roll"), n("shoulder_yaw")],
        elbow: vec![n("elbow")],
        wrist: vec![n("wrist_yaw"), n("wrist_pitch"), n("wrist_roll")],
        rhythm: vec![
            RhythmPairSpec {
                scapula: n("scapula_roll"),
                shoulder: n("shoulder_roll"),
            },
            RhythmPairSpec {
                scapula: n("scapula_pitch"),
                shoulder: n("shoulder_pitch"),
            },
        ],
    };

    ArmParts {
        links,
        joints,
        muscles: scapula_muscles.into_iter().chain(arm_muscles).collect(),
        groups,
        arm,
    }
}

/// The default model document, with reference lengths filled in at the
/// all-zero posture.
pub fn default_model_file() -> ModelFile {
    let left = build_arm("l", 1.0);
    let right = build_arm("r", -1.0);

    let mut links = vec![
        LinkSpec { name: "trunk".into() },
        LinkSpec {
            name: "head_camera".into(),
        },
    ];
    links.extend(left.links);
    links.extend(right.links);

    // Optical convention: z forward, x right, y down.
    let mut joints = vec![JointSpec {
        name: "camera_mount".into(),
        kind: JointKind::Fixed,
        parent: "trunk".into(),
        child: "head_camera".into(),
        origin: PoseSpec {
            xyz: [0.08, 0.0, 0.75],
            rpy_deg: [-90.0, 0.0, -90.0],
        },
        axis: [0.0, 0.0, 1.0],
        limits_deg: [0.0, 0.0],
    }];
    joints.extend(left.joints);
    joints.extend(right.joints);

    let [ls, la] = left.groups;
    let [rs, ra] = right.groups;
    let initial_posture_deg = ["l", "r"]
        .iter()
        .flat_map(|p| INITIAL_POSTURE_DEG.iter().map(move |(j, v)| (format!("{p}_{j}"), *v)))
        .collect();

    let mut spec = ModelFile {
        name: "humanlike-shoulder-complex".into(),
        links,
        joints,
        muscles: left.muscles.into_iter().chain(right.muscles).collect(),
        groups: vec![ls, rs, la, ra],
        hands: HandsSpec {
            left: left.arm,
            right: right.arm,
        },
        camera: CameraSpec {
            link: "head_camera".into(),
        },
        initial_posture_deg,
    };

    let model = RobotModel::from_spec(&spec).expect("built-in model is valid");
    let rest = muscle_lengths(&model, &JointVector::zeros(model.dof_count()));
    for (m, l) in spec.muscles.iter_mut().zip(rest) {
        m.reference_length = l;
    }
    spec
}

pub fn default_model() -> RobotModel {
    RobotModel::from_spec(&default_model_file()).expect("built-in model is valid")
}
