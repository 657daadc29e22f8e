use nalgebra::{DMatrix, UnitQuaternion, Vector3};

use super::model::{JointVector, RobotModel, Side};
use super::pose::Pose;
use crate::error::{Error, Result};

/// Every link pose of one configuration, plus world-frame joint axes and
/// origins (indexed by DOF) for Jacobian assembly.
#[derive(Clone, Debug)]
pub struct Frames {
    pub links: Vec<Pose>,
    pub axes: Vec<Vector3<f64>>,
    pub origins: Vec<Vector3<f64>>,
}

impl RobotModel {
    /// Forward sweep over the tree. `q` must have one entry per DOF.
    pub fn frames(&self, q: &JointVector) -> Frames {
        assert_eq!(q.len(), self.dof_count(), "joint vector length");
        let mut links = Vec::with_capacity(self.links.len());
        let mut axes = vec![Vector3::zeros(); self.dof_count()];
        let mut origins = vec![Vector3::zeros(); self.dof_count()];
        for link in &self.links {
            let base = match link.parent {
                Some(p) => links[p],
                None => Pose::identity(),
            };
            let joint_frame: Pose = base.compose(&link.origin);
            let pose = match link.dof {
                Some(d) => {
                    let axis = self.dofs[d].axis;
                    axes[d] = joint_frame.orientation * axis.into_inner();
                    origins[d] = joint_frame.position;
                    Pose::new(
                        joint_frame.position,
                        joint_frame.orientation * UnitQuaternion::from_axis_angle(&axis, q[d]),
                    )
                }
                None => joint_frame,
            };
            links.push(pose);
        }
        Frames { links, axes, origins }
    }

    pub fn hand_pose(&self, q: &JointVector, side: Side) -> Pose {
        self.frames(q).links[self.arm(side).hand_link]
    }

    /// 6×N spatial Jacobian (linear rows first) of a point fixed on `link`.
    /// Columns of DOF that do not move the link are zero.
    pub fn point_jacobian(&self, frames: &Frames, link: usize, point: &Vector3<f64>, dofs: &[usize]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(6, dofs.len());
        for (c, &d) in dofs.iter().enumerate() {
            if !self.dof_moves_link(d, link) {
                continue;
            }
            let a = frames.axes[d];
            let lin = a.cross(&(point - frames.origins[d]));
            j.fixed_view_mut::<3, 1>(0, c).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, c).copy_from(&a);
        }
        j
    }
}

/// Pose of `target_link` in the trunk-root frame.
pub fn forward_kinematics(model: &RobotModel, q: &JointVector, target_link: &str) -> Result<Pose> {
    let link = model.link_index(target_link)?;
    model.check_dims(q)?;
    Ok(model.frames(q).links[link])
}

/// Spatial Jacobian of the hand frame origin with respect to `active_joints`.
pub fn hand_jacobian(model: &RobotModel, q: &JointVector, hand: Side, active_joints: &[&str]) -> Result<DMatrix<f64>> {
    model.check_dims(q)?;
    let dofs = active_joints.iter().map(|n| model.joint_index(n)).collect::<Result<Vec<_>>>()?;
    let frames = model.frames(q);
    let link = model.arm(hand).hand_link;
    Ok(model.point_jacobian(&frames, link, &frames.links[link].position, &dofs))
}

/// Like [`hand_jacobian`] but for DOF indices.
pub fn hand_jacobian_indexed(model: &RobotModel, q: &JointVector, hand: Side, dofs: &[usize]) -> Result<DMatrix<f64>> {
    model.check_dims(q)?;
    if let Some(&bad) = dofs.iter().find(|&&d| d >= model.dof_count()) {
        return Err(Error::UnknownJoint(bad.to_string()));
    }
    let frames = model.frames(q);
    let link = model.arm(hand).hand_link;
    Ok(model.point_jacobian(&frames, link, &frames.links[link].position, dofs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::default_model::default_model;
    use crate::testing::planar_model;
    use nalgebra::{Matrix4, Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn planar_quarter_turn() {
        let m = planar_model(0.7);
        let mut q = JointVector::zeros(m.dof_count());
        q[0] = FRAC_PI_2;
        let p = forward_kinematics(&m, &q, "hand").unwrap();
        assert!((p.position - Vector3::new(0.0, 0.7, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn single_joint_jacobian_column() {
        let m = planar_model(0.7);
        let q = JointVector::zeros(m.dof_count());
        let j = hand_jacobian(&m, &q, Side::Left, &["j0"]).unwrap();
        let expected = [0.0, 0.7, 0.0, 0.0, 0.0, 1.0];
        for (r, e) in expected.iter().enumerate() {
            assert!((j[(r, 0)] - e).abs() < 1e-12, "row {r}");
        }
    }

    #[test]
    fn unknown_link_and_joint() {
        let m = default_model();
        let q = JointVector::zeros(m.dof_count());
        assert!(matches!(forward_kinematics(&m, &q, "tail"), Err(Error::UnknownLink(_))));
        assert!(matches!(
            hand_jacobian(&m, &q, Side::Left, &["tail_wag"]),
            Err(Error::UnknownJoint(_))
        ));
    }

    #[test]
    fn off_path_joint_has_zero_column() {
        let m = default_model();
        let q = m.initial_posture().clone();
        let right = m.arm(Side::Right).glenohumeral[0];
        let j = hand_jacobian_indexed(&m, &q, Side::Left, &[right]).unwrap();
        assert!(j.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_posture_is_reference_pose() {
        let m = default_model();
        let q = JointVector::zeros(m.dof_count());
        let frames = m.frames(&q);
        // At zero every link sits at the composed fixed origins.
        for (i, l) in m.links.iter().enumerate() {
            let mut expected = l.origin;
            let mut p = l.parent;
            while let Some(pi) = p {
                expected = m.links[pi].origin.compose(&expected);
                p = m.links[pi].parent;
            }
            assert!(frames.links[i].position_distance(&expected) < 1e-12);
            assert!(frames.links[i].rotation_distance(&expected) < 1e-9);
        }
    }

    /// Homogeneous-matrix chain, built independently of `Pose`.
    fn matrix_fk(m: &RobotModel, q: &JointVector, link: usize) -> Matrix4<f64> {
        let mut chain = vec![];
        let mut cur = Some(link);
        while let Some(i) = cur {
            chain.push(i);
            cur = m.links[i].parent;
        }
        let mut t = Matrix4::identity();
        for &i in chain.iter().rev() {
            let l = &m.links[i];
            t *= l.origin.to_homogeneous();
            if let Some(d) = l.dof {
                let r = Rotation3::from_axis_angle(&m.dofs[d].axis, q[d]);
                t *= r.to_homogeneous();
            }
        }
        t
    }

    #[test]
    fn random_configurations_match_matrix_oracle() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = JointVector::from_vec(m.dofs.iter().map(|d| rng.random_range(d.lower..=d.upper)).collect());
            let frames = m.frames(&q);
            for i in 0..m.links.len() {
                let oracle = matrix_fk(&m, &q, i);
                let got = frames.links[i].to_homogeneous();
                assert!((oracle - got).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn fk_is_bit_deterministic() {
        let m = default_model();
        let q = m.initial_posture().clone();
        let a = m.hand_pose(&q, Side::Right);
        let b = m.hand_pose(&q, Side::Right);
        assert_eq!(a.position, b.position);
        assert_eq!(a.orientation, b.orientation);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..1000 {
            let q = JointVector::from_vec(m.dofs.iter().map(|d| rng.random_range(d.lower..=d.upper)).collect());
            for side in Side::BOTH {
                let dofs = m.arm(side).all_joints();
                let j = hand_jacobian_indexed(&m, &q, side, &dofs).unwrap();
                for (c, &d) in dofs.iter().enumerate() {
                    let mut qp = q.clone();
                    qp[d] += h;
                    let mut qm = q.clone();
                    qm[d] -= h;
                    let pp = m.hand_pose(&qp, side);
                    let pm = m.hand_pose(&qm, side);
                    let lin = (pp.position - pm.position) / (2.0 * h);
                    // Angular velocity from the relative rotation of the two probes.
                    let ang = (pp.orientation * pm.orientation.inverse()).scaled_axis() / (2.0 * h);
                    for r in 0..3 {
                        assert!((j[(r, c)] - lin[r]).abs() < 1e-5);
                        assert!((j[(r + 3, c)] - ang[r]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn axis_is_normalized_on_load() {
        let m = planar_model(1.0);
        let a: Unit<Vector3<f64>> = m.dofs[0].axis;
        assert!((a.norm() - 1.0).abs() < 1e-15);
    }
}
