//! Straight-line via-point muscle geometry: path lengths, the muscle
//! Jacobian (moment arms) and geometric training data for the
//! joint-muscle mapping.

use std::io::{Read, Write};

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{Frames, JointVector, RobotModel};

/// Per-muscle sensor readings, indexed by model muscle order.
#[derive(Clone, Debug, PartialEq)]
pub struct MuscleState {
    /// Meters.
    pub lengths: Vec<f64>,
    /// Newtons, never negative.
    pub tensions: Vec<f64>,
}

impl MuscleState {
    pub fn new(lengths: Vec<f64>, tensions: Vec<f64>) -> Result<Self> {
        if lengths.len() != tensions.len() {
            return Err(Error::DimensionMismatch {
                expected: lengths.len(),
                actual: tensions.len(),
            });
        }
        if lengths.iter().any(|l| !(*l > 0.0)) || tensions.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidInput("muscle lengths must be > 0 and tensions >= 0".into()));
        }
        Ok(Self { lengths, tensions })
    }

    /// The entries belonging to `muscles`.
    pub fn select(&self, muscles: &[usize]) -> (Vec<f64>, Vec<f64>) {
        (
            muscles.iter().map(|&m| self.lengths[m]).collect(),
            muscles.iter().map(|&m| self.tensions[m]).collect(),
        )
    }
}

fn via_world(frames: &Frames, link: usize, offset: &Vector3<f64>) -> Vector3<f64> {
    frames.links[link].transform_point(offset)
}

/// Path lengths for an already-computed set of frames.
pub fn lengths_from_frames(model: &RobotModel, frames: &Frames) -> Vec<f64> {
    model
        .muscles
        .iter()
        .map(|m| {
            m.via_points
                .windows(2)
                .map(|w| (via_world(frames, w[1].link, &w[1].offset) - via_world(frames, w[0].link, &w[0].offset)).norm())
                .sum()
        })
        .collect()
}

/// Sum of straight segment lengths between consecutive via points.
pub fn muscle_lengths(model: &RobotModel, q: &JointVector) -> Vec<f64> {
    lengths_from_frames(model, &model.frames(q))
}

/// ∂l/∂q for the listed muscles (rows) and DOF (columns), from unit segment
/// directions and joint axes.
pub fn jacobian_from_frames(model: &RobotModel, frames: &Frames, muscles: &[usize], dofs: &[usize]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(muscles.len(), dofs.len());
    for (r, &mi) in muscles.iter().enumerate() {
        let vps = &model.muscles[mi].via_points;
        for w in vps.windows(2) {
            let a = via_world(frames, w[0].link, &w[0].offset);
            let b = via_world(frames, w[1].link, &w[1].offset);
            let d = b - a;
            let len = d.norm();
            if len < 1e-12 {
                continue;
            }
            let u = d / len;
            for (c, &dof) in dofs.iter().enumerate() {
                let moves_a = model.dof_moves_link(dof, w[0].link);
                let moves_b = model.dof_moves_link(dof, w[1].link);
                if moves_a == moves_b {
                    // Both ends ride on (or off) the joint together.
                    continue;
                }
                let axis = frames.axes[dof];
                let o = frames.origins[dof];
                let vb = if moves_b { axis.cross(&(b - o)) } else { Vector3::zeros() };
                let va = if moves_a { axis.cross(&(a - o)) } else { Vector3::zeros() };
                jac[(r, c)] += u.dot(&(vb - va));
            }
        }
    }
    jac
}

/// Muscle Jacobian of one group: its muscles over its joints (m/rad).
pub fn muscle_jacobian(model: &RobotModel, q: &JointVector, group: usize) -> Result<DMatrix<f64>> {
    model.check_dims(q)?;
    let g = model.group(group)?;
    Ok(jacobian_from_frames(model, &model.frames(q), &g.muscles, &g.joints))
}

/// One training example for a group: muscle lengths (m), tensions (N) and
/// joint angles (rad), all in the group's own ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub lengths: Vec<f64>,
    pub tensions: Vec<f64>,
    pub angles: Vec<f64>,
}

/// Samples of the geometric model: joint angles uniform within limits,
/// lengths from [`muscle_lengths`], zero tension.
pub fn geometric_jmm_dataset(model: &RobotModel, group: usize, n: usize, seed: u64) -> Result<Vec<GroupSample>> {
    let g = model.group(group)?;
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = model.initial_posture().clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let angles: Vec<f64> = g
            .joints
            .iter()
            .map(|&j| rng.random_range(model.dofs[j].lower..=model.dofs[j].upper))
            .collect();
        for (&j, &a) in g.joints.iter().zip(&angles) {
            q[j] = a;
        }
        let all = muscle_lengths(model, &q);
        out.push(GroupSample {
            lengths: g.muscles.iter().map(|&m| all[m]).collect(),
            tensions: vec![0.0; g.muscles.len()],
            angles,
        });
    }
    Ok(out)
}

/// Writes samples as CSV (`muscle_i` m, `tension_i` N, `joint_i` deg).
pub fn write_dataset_csv<W: Write>(samples: &[GroupSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = samples.first() else {
        w.flush()?;
        return Ok(());
    };
    let (m, n) = (first.lengths.len(), first.angles.len());
    let header: Vec<String> = (0..m)
        .map(|i| format!("muscle_{i}"))
        .chain((0..m).map(|i| format!("tension_{i}")))
        .chain((0..n).map(|i| format!("joint_{i}")))
        .collect();
    w.write_record(&header)?;
    for s in samples {
        if s.lengths.len() != m || s.tensions.len() != m || s.angles.len() != n {
            return Err(Error::DimensionMismatch {
                expected: 2 * m + n,
                actual: s.lengths.len() + s.tensions.len() + s.angles.len(),
            });
        }
        let row: Vec<String> = s
            .lengths
            .iter()
            .chain(&s.tensions)
            .map(|v| v.to_string())
            .chain(s.angles.iter().map(|a| a.to_degrees().to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<GroupSample>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let m = header.iter().filter(|h| h.starts_with("muscle_")).count();
    let t = header.iter().filter(|h| h.starts_with("tension_")).count();
    let n = header.iter().filter(|h| h.starts_with("joint_")).count();
    if m != t || m + t + n != header.len() {
        return Err(Error::InvalidInput("dataset header must be muscle_*, tension_*, joint_*".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::InvalidInput(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.push(GroupSample {
            lengths: vals[..m].to_vec(),
            tensions: vals[m..2 * m].to_vec(),
            angles: vals[2 * m..].iter().map(|d| d.to_radians()).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::default_model;
    use crate::testing::hinge_model;

    fn random_q(model: &RobotModel, rng: &mut ChaCha8Rng) -> JointVector {
        JointVector::from_vec(model.dofs.iter().map(|d| rng.random_range(d.lower..=d.upper)).collect())
    }

    #[test]
    fn same_link_muscle_is_rigid() {
        // Muscle 1 of the hinge toy has both points on the base link.
        let m = hinge_model(0.05, 0.05, 0.0);
        let q0 = JointVector::zeros(m.dof_count());
        let mut q1 = q0.clone();
        q1[0] = 1.1;
        assert_eq!(muscle_lengths(&m, &q0)[1], muscle_lengths(&m, &q1)[1]);
        let j = muscle_jacobian(&m, &q1, 0).unwrap();
        assert!(j.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn chord_length_closed_form() {
        // Two points at radius r on either side of a z hinge; at θ the chord
        // spans the angle θ + φ0 where φ0 is the rest angle between them.
        let r = 0.04;
        let phi0 = 0.6;
        let m = hinge_model(r, r, phi0);
        for k in 0..20 {
            let theta = -0.95 + 0.1 * k as f64;
            let mut q = JointVector::zeros(m.dof_count());
            q[0] = theta;
            let l = muscle_lengths(&m, &q)[0];
            let oracle = 2.0 * r * ((theta + phi0) / 2.0).sin().abs();
            assert!((l - oracle).abs() < 1e-12, "theta {theta}: {l} vs {oracle}");
            // Derivative of the chord: r cos((θ+φ0)/2), sign-adjusted.
            let dl = muscle_jacobian(&m, &q, 0).unwrap()[(0, 0)];
            let doracle = r * ((theta + phi0) / 2.0).cos() * ((theta + phi0) / 2.0).sin().signum();
            assert!((dl - doracle).abs() < 1e-9);
        }
    }

    #[test]
    fn flexor_shortens_with_flexion() {
        // Elbow flexion is a negative rotation; the biceps moment arm points
        // the same way, so ∂l/∂q is positive (l drops as q decreases).
        let m = default_model();
        let q = m.initial_posture().clone();
        let g = m.group_index("l_arm").unwrap();
        let grp = m.group(g).unwrap();
        let elbow = grp.joints.iter().position(|&j| m.dofs[j].name == "l_elbow").unwrap();
        let biceps = grp.muscles.iter().position(|&mu| m.muscles[mu].name == "l_biceps").unwrap();
        let triceps = grp.muscles.iter().position(|&mu| m.muscles[mu].name == "l_triceps").unwrap();
        let j = muscle_jacobian(&m, &q, g).unwrap();
        assert!(j[(biceps, elbow)] > 0.0);
        assert!(j[(triceps, elbow)] < 0.0);
    }

    #[test]
    fn zero_posture_matches_reference_lengths() {
        let m = default_model();
        let l = muscle_lengths(&m, &JointVector::zeros(m.dof_count()));
        for (mu, v) in m.muscles.iter().zip(l) {
            assert!((mu.reference_length - v).abs() < 1e-12, "{}", mu.name);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for g in 0..m.groups.len() {
            let grp = m.group(g).unwrap().clone();
            for _ in 0..500 {
                let q = random_q(&m, &mut rng);
                let j = muscle_jacobian(&m, &q, g).unwrap();
                for (c, &d) in grp.joints.iter().enumerate() {
                    let mut qp = q.clone();
                    qp[d] += h;
                    let mut qm = q.clone();
                    qm[d] -= h;
                    let lp = muscle_lengths(&m, &qp);
                    let lm = muscle_lengths(&m, &qm);
                    for (r, &mu) in grp.muscles.iter().enumerate() {
                        let fd = (lp[mu] - lm[mu]) / (2.0 * h);
                        assert!((fd - j[(r, c)]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn lengths_are_lipschitz() {
        // Each segment end moves at most |δ| · (distance to the joint axis),
        // bounded here by the arm's reach.
        let m = default_model();
        let lip = 2.0 * (1.0 + 0.3 + 0.25 + 0.08);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let a = random_q(&m, &mut rng);
            let b = random_q(&m, &mut rng);
            let dq = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
            let la = muscle_lengths(&m, &a);
            let lb = muscle_lengths(&m, &b);
            for (x, y) in la.iter().zip(&lb) {
                assert!((x - y).abs() <= lip * dq);
                assert!(*x > 0.0);
            }
        }
    }

    #[test]
    fn unknown_group() {
        let m = default_model();
        let q = JointVector::zeros(m.dof_count());
        assert!(matches!(muscle_jacobian(&m, &q, 99), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn dataset_is_reproducible_and_consistent() {
        let m = default_model();
        for g in 0..m.groups.len() {
            let a = geometric_jmm_dataset(&m, g, 50, 42).unwrap();
            let b = geometric_jmm_dataset(&m, g, 50, 42).unwrap();
            assert_eq!(a, b);
            let grp = m.group(g).unwrap();
            for s in &a {
                let mut q = m.initial_posture().clone();
                for (&j, &v) in grp.joints.iter().zip(&s.angles) {
                    assert!(v >= m.dofs[j].lower && v <= m.dofs[j].upper);
                    q[j] = v;
                }
                let l = muscle_lengths(&m, &q);
                for (&mu, &v) in grp.muscles.iter().zip(&s.lengths) {
                    assert_eq!(l[mu], v);
                }
                assert!(s.tensions.iter().all(|t| *t == 0.0));
            }
        }
        assert_eq!(
            geometric_jmm_dataset(&m, 0, 1, 7).unwrap(),
            geometric_jmm_dataset(&m, 0, 1, 7).unwrap()
        );
        assert!(geometric_jmm_dataset(&m, 0, 0, 7).is_err());
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let m = default_model();
        let data = geometric_jmm_dataset(&m, 0, 5, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("muscle_0,"));
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            for (x, y) in a.lengths.iter().zip(&b.lengths) {
                assert_eq!(x, y);
            }
            for (x, y) in a.angles.iter().zip(&b.angles) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
