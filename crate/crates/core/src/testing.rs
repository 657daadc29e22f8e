//! Small hand-checkable models shared by unit tests.

use crate::kinematics::model::{
    ArmSpec, CameraSpec, GroupSpec, HandsSpec, JointKind, JointSpec, LinkSpec, ModelFile, MuscleSpec, RhythmPairSpec, ViaPointSpec,
};
use crate::kinematics::pose::PoseSpec;
use crate::kinematics::RobotModel;

fn planar_spec(link_len: f64) -> ModelFile {
    let rev = |name: &str, parent: &str, child: &str| JointSpec {
        name: name.into(),
        kind: JointKind::Revolute,
        parent: parent.into(),
        child: child.into(),
        origin: PoseSpec {
            xyz: [0.0; 3],
            rpy_deg: [0.0; 3],
        },
        axis: [0.0, 0.0, 1.0],
        limits_deg: [-180.0, 180.0],
    };
    let names = ["base", "a", "b", "c", "d", "e", "f", "g", "h", "hand"];
    let mut joints: Vec<JointSpec> = ["j0", "s1", "g0", "g1", "g2", "el", "w0", "w1"]
        .iter()
        .zip(names.windows(2))
        .map(|(j, w)| rev(j, w[0], w[1]))
        .collect();
    joints.push(JointSpec {
        name: "tip".into(),
        kind: JointKind::Fixed,
        parent: "h".into(),
        child: "hand".into(),
        origin: PoseSpec {
            xyz: [link_len, 0.0, 0.0],
            rpy_deg: [0.0; 3],
        },
        axis: [0.0, 0.0, 1.0],
        limits_deg: [0.0, 0.0],
    });
    let arm = ArmSpec {
        link: "hand".into(),
        scapula: vec!["j0".into(), "s1".into()],
        glenohumeral: vec!["g0".into(), "g1".into(), "g2".into()],
        elbow: vec!["el".into()],
        wrist: vec!["w0".into(), "w1".into()],
        rhythm: vec![RhythmPairSpec {
            scapula: "j0".into(),
            shoulder: "g0".into(),
        }],
    };
    ModelFile {
        name: "planar".into(),
        links: names.iter().map(|n| LinkSpec { name: (*n).into() }).collect(),
        joints,
        muscles: vec![],
        groups: vec![GroupSpec {
            name: "all".into(),
            joints: ["j0", "s1", "g0", "g1", "g2", "el", "w0", "w1"].map(String::from).to_vec(),
            muscles: vec![],
        }],
        hands: HandsSpec {
            left: arm.clone(),
            right: arm,
        },
        camera: CameraSpec { link: "base".into() },
        initial_posture_deg: vec![],
    }
}

/// Eight coincident z-axis revolute joints at the origin followed by a
/// straight hand link of `link_len` along x. Only the first joint matters
/// in the tests; the rest satisfy the arm layout.
pub fn planar_model(link_len: f64) -> RobotModel {
    RobotModel::from_spec(&planar_spec(link_len)).unwrap()
}

/// The planar chain with two muscles: muscle 0 spans the first hinge from
/// `(ra, 0, 0)` on the base to radius `rb` at angle `phi0` on the moving
/// link; muscle 1 has both points on the base.
pub fn hinge_model(ra: f64, rb: f64, phi0: f64) -> RobotModel {
    let mut spec = planar_spec(0.5);
    spec.muscles = vec![
        MuscleSpec {
            name: "span".into(),
            via_points: vec![
                ViaPointSpec {
                    link: "base".into(),
                    offset: [ra, 0.0, 0.0],
                },
                ViaPointSpec {
                    link: "a".into(),
                    offset: [rb * phi0.cos(), rb * phi0.sin(), 0.0],
                },
            ],
            reference_length: 1.0,
        },
        MuscleSpec {
            name: "rigid".into(),
            via_points: vec![
                ViaPointSpec {
                    link: "base".into(),
                    offset: [0.1, 0.0, 0.0],
                },
                ViaPointSpec {
                    link: "base".into(),
                    offset: [0.0, 0.2, 0.0],
                },
            ],
            reference_length: 1.0,
        },
    ];
    spec.groups[0].muscles = vec!["span".into(), "rigid".into()];
    RobotModel::from_spec(&spec).unwrap()
}

/// The planar chain with an antagonist pair on the first hinge. Both
/// muscles end at radius `rb` on the moving link (on its y axis at zero
/// angle) and start at `(∓ra, 0, 0)` on the base. Shortening muscle 0
/// turns the hinge positive.
pub fn hinge_pair_model(ra: f64, rb: f64) -> RobotModel {
    let mut spec = planar_spec(0.5);
    let muscle = |name: &str, x: f64| MuscleSpec {
        name: name.into(),
        via_points: vec![
            ViaPointSpec {
                link: "base".into(),
                offset: [x, 0.0, 0.0],
            },
            ViaPointSpec {
                link: "a".into(),
                offset: [0.0, rb, 0.0],
            },
        ],
        reference_length: 1.0,
    };
    spec.muscles = vec![muscle("flexor", -ra), muscle("extensor", ra)];
    spec.groups[0].muscles = vec!["flexor".into(), "extensor".into()];
    RobotModel::from_spec(&spec).unwrap()
}
