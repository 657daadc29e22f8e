//! Kinematic tree, muscle paths and group layout of the robot.
//!
//! The model is loaded from a JSON document (meters and degrees) and is
//! immutable afterwards. Links are stored parent-before-child so a single
//! forward sweep computes every frame.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::pose::{Pose, PoseSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(Error::InvalidInput(format!("unknown arm `{other}`"))),
        }
    }
}

/// Joint angles in radians, ordered like [`RobotModel::joint_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointVector(Vec<f64>);

impl JointVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Named values in degrees, in model order.
    pub fn to_degrees_named(&self, model: &RobotModel) -> Vec<(String, f64)> {
        model
            .joint_names()
            .zip(self.0.iter())
            .map(|(n, v)| (n.to_owned(), v.to_degrees()))
            .collect()
    }
}

impl Index<usize> for JointVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for JointVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub name: String,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    pub muscles: Vec<MuscleSpec>,
    pub groups: Vec<GroupSpec>,
    pub hands: HandsSpec,
    pub camera: CameraSpec,
    /// Joint name → degrees. Missing joints default to zero.
    #[serde(default)]
    pub initial_posture_deg: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub origin: PoseSpec,
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    #[serde(default)]
    pub limits_deg: [f64; 2],
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViaPointSpec {
    pub link: String,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuscleSpec {
    pub name: String,
    pub via_points: Vec<ViaPointSpec>,
    /// Path length at the all-zero posture, meters.
    pub reference_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub joints: Vec<String>,
    pub muscles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhythmPairSpec {
    pub scapula: String,
    pub shoulder: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub link: String,
    pub scapula: Vec<String>,
    pub glenohumeral: Vec<String>,
    pub elbow: Vec<String>,
    pub wrist: Vec<String>,
    /// Scapula DOF driven as `A ×` the paired glenohumeral DOF.
    pub rhythm: Vec<RhythmPairSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandsSpec {
    pub left: ArmSpec,
    pub right: ArmSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub link: String,
}

// ---------------------------------------------------------------------------
// Resolved model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    /// Transform from the parent link frame to the joint frame.
    pub origin: Pose,
    /// Revolute DOF rotating this link about its joint frame, if any.
    pub dof: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dof {
    pub name: String,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
    /// Link moved by this DOF.
    pub link: usize,
}

#[derive(Clone, Debug)]
pub struct ViaPoint {
    pub link: usize,
    pub offset: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct MusclePath {
    pub name: String,
    pub via_points: Vec<ViaPoint>,
    pub reference_length: f64,
}

#[derive(Clone, Debug)]
pub struct Group {
    pub name: String,
    pub joints: Vec<usize>,
    pub muscles: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Arm {
    pub side: Side,
    pub hand_link: usize,
    pub scapula: Vec<usize>,
    pub glenohumeral: Vec<usize>,
    pub elbow: Vec<usize>,
    pub wrist: Vec<usize>,
    /// (scapula DOF, glenohumeral DOF) pairs coupled by the rhythm ratio.
    pub rhythm: Vec<(usize, usize)>,
}

impl Arm {
    /// DOF moved by the fixed-scapula solver.
    pub fn ik_joints(&self) -> Vec<usize> {
        self.glenohumeral.iter().chain(&self.elbow).chain(&self.wrist).copied().collect()
    }

    pub fn all_joints(&self) -> Vec<usize> {
        self.scapula.iter().copied().chain(self.ik_joints()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    pub dofs: Vec<Dof>,
    pub muscles: Vec<MusclePath>,
    pub groups: Vec<Group>,
    arms: [Arm; 2],
    pub camera_link: usize,
    initial_posture: JointVector,
    /// `dof_on_path[link][dof]`: the DOF lies on the root → link path.
    dof_on_path: Vec<Vec<bool>>,
    link_lookup: HashMap<String, usize>,
    dof_lookup: HashMap<String, usize>,
}

impl RobotModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: ModelFile = serde_json::from_str(s)?;
        Self::from_spec(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_spec(spec: &ModelFile) -> Result<Self> {
        let bad = |m: String| Error::InvalidModel(m);

        let mut link_names = HashSet::new();
        for l in &spec.links {
            if !link_names.insert(l.name.as_str()) {
                return Err(bad(format!("duplicate link `{}`", l.name)));
            }
        }
        let mut joint_names = HashSet::new();
        let mut parent_joint: HashMap<&str, &JointSpec> = HashMap::new();
        for j in &spec.joints {
            if !joint_names.insert(j.name.as_str()) {
                return Err(bad(format!("duplicate joint `{}`", j.name)));
            }
            for l in [&j.parent, &j.child] {
                if !link_names.contains(l.as_str()) {
                    return Err(Error::UnknownLink(l.clone()));
                }
            }
            if parent_joint.insert(j.child.as_str(), j).is_some() {
                return Err(bad(format!("link `{}` has more than one parent joint", j.child)));
            }
        }
        let roots: Vec<&str> = spec
            .links
            .iter()
            .map(|l| l.name.as_str())
            .filter(|n| !parent_joint.contains_key(n))
            .collect();
        if roots.len() != 1 {
            return Err(bad(format!("expected exactly one root link, found {roots:?}")));
        }

        // Topological order, parents first. A cycle leaves links unvisited.
        let mut children: HashMap<&str, Vec<&JointSpec>> = HashMap::new();
        for j in &spec.joints {
            children.entry(j.parent.as_str()).or_default().push(j);
        }
        let mut links: Vec<Link> = Vec::with_capacity(spec.links.len());
        let mut dofs: Vec<Dof> = Vec::new();
        let mut link_lookup = HashMap::new();
        let mut stack: Vec<(&str, Option<&JointSpec>)> = vec![(roots[0], None)];
        while let Some((name, joint)) = stack.pop() {
            let idx = links.len();
            link_lookup.insert(name.to_owned(), idx);
            let (parent, origin, dof) = match joint {
                None => (None, Pose::identity(), None),
                Some(j) => {
                    let parent = link_lookup[j.parent.as_str()];
                    let dof = match j.kind {
                        JointKind::Fixed => None,
                        JointKind::Revolute => {
                            let axis = Vector3::from(j.axis);
                            if !(axis.norm() > 1e-9) {
                                return Err(bad(format!("joint `{}` has a zero axis", j.name)));
                            }
                            let [lo, hi] = j.limits_deg;
                            if !(lo < hi) {
                                return Err(bad(format!("joint `{}` has empty limits", j.name)));
                            }
                            dofs.push(Dof {
                                name: j.name.clone(),
                                axis: Unit::new_normalize(axis),
                                lower: lo.to_radians(),
                                upper: hi.to_radians(),
                                link: idx,
                            });
                            Some(dofs.len() - 1)
                        }
                    };
                    (Some(parent), Pose::from(j.origin), dof)
                }
            };
            links.push(Link {
                name: name.to_owned(),
                parent,
                origin,
                dof,
            });
            if let Some(cs) = children.get(name) {
                for j in cs.iter().rev() {
                    stack.push((j.child.as_str(), Some(j)));
                }
            }
        }
        if links.len() != spec.links.len() {
            return Err(bad("kinematic tree is disconnected or cyclic".into()));
        }
        let dof_lookup: HashMap<String, usize> = dofs.iter().enumerate().map(|(i, d)| (d.name.clone(), i)).collect();

        let mut dof_on_path = vec![vec![false; dofs.len()]; links.len()];
        for i in 0..links.len() {
            if let Some(p) = links[i].parent {
                dof_on_path[i] = dof_on_path[p].clone();
            }
            if let Some(d) = links[i].dof {
                dof_on_path[i][d] = true;
            }
        }

        let link_idx = |n: &str| link_lookup.get(n).copied().ok_or_else(|| Error::UnknownLink(n.to_owned()));
        let dof_idx = |n: &str| dof_lookup.get(n).copied().ok_or_else(|| Error::UnknownJoint(n.to_owned()));

        let mut muscles = Vec::with_capacity(spec.muscles.len());
        let mut muscle_lookup = HashMap::new();
        for m in &spec.muscles {
            if m.via_points.len() < 2 {
                return Err(bad(format!("muscle `{}` needs at least two via points", m.name)));
            }
            if !(m.reference_length > 0.0) {
                return Err(bad(format!("muscle `{}` has non-positive reference length", m.name)));
            }
            let via_points = m
                .via_points
                .iter()
                .map(|v| {
                    Ok(ViaPoint {
                        link: link_idx(&v.link)?,
                        offset: Vector3::from(v.offset),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if muscle_lookup.insert(m.name.clone(), muscles.len()).is_some() {
                return Err(bad(format!("duplicate muscle `{}`", m.name)));
            }
            muscles.push(MusclePath {
                name: m.name.clone(),
                via_points,
                reference_length: m.reference_length,
            });
        }

        let mut joint_owner = vec![None; dofs.len()];
        let mut muscle_owner = vec![None; muscles.len()];
        let mut groups = Vec::with_capacity(spec.groups.len());
        for (gi, g) in spec.groups.iter().enumerate() {
            let joints = g.joints.iter().map(|n| dof_idx(n)).collect::<Result<Vec<_>>>()?;
            let ms = g
                .muscles
                .iter()
                .map(|n| {
                    muscle_lookup
                        .get(n)
                        .copied()
                        .ok_or_else(|| bad(format!("group `{}` names unknown muscle `{n}`", g.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            for &j in &joints {
                if joint_owner[j].replace(gi).is_some() {
                    return Err(bad(format!("joint `{}` is in more than one group", dofs[j].name)));
                }
            }
            for &m in &ms {
                if muscle_owner[m].replace(gi).is_some() {
                    return Err(bad(format!("muscle `{}` is in more than one group", muscles[m].name)));
                }
            }
            groups.push(Group {
                name: g.name.clone(),
                joints,
                muscles: ms,
            });
        }
        if let Some(j) = joint_owner.iter().position(Option::is_none) {
            return Err(bad(format!("joint `{}` belongs to no group", dofs[j].name)));
        }
        if let Some(m) = muscle_owner.iter().position(Option::is_none) {
            return Err(bad(format!("muscle `{}` belongs to no group", muscles[m].name)));
        }
        // A muscle's length may only depend on joints of its own group.
        for (mi, m) in muscles.iter().enumerate() {
            let gi = muscle_owner[mi].unwrap();
            for d in 0..dofs.len() {
                let first = dof_on_path[m.via_points[0].link][d];
                let crosses = m.via_points.iter().any(|v| dof_on_path[v.link][d] != first);
                if crosses && joint_owner[d] != Some(gi) {
                    return Err(bad(format!(
                        "muscle `{}` crosses joint `{}` outside its group",
                        m.name, dofs[d].name
                    )));
                }
            }
        }

        let arm = |side: Side, a: &ArmSpec| -> Result<Arm> {
            let names = |v: &[String]| v.iter().map(|n| dof_idx(n)).collect::<Result<Vec<_>>>();
            let arm = Arm {
                side,
                hand_link: link_idx(&a.link)?,
                scapula: names(&a.scapula)?,
                glenohumeral: names(&a.glenohumeral)?,
                elbow: names(&a.elbow)?,
                wrist: names(&a.wrist)?,
                rhythm: a
                    .rhythm
                    .iter()
                    .map(|p| Ok((dof_idx(&p.scapula)?, dof_idx(&p.shoulder)?)))
                    .collect::<Result<Vec<_>>>()?,
            };
            if arm.scapula.len() < 2 || arm.glenohumeral.len() != 3 || arm.elbow.is_empty() || arm.wrist.len() < 2 {
                return Err(bad(format!(
                    "{side} arm needs >=2 scapula, 3 glenohumeral, >=1 elbow and >=2 wrist DOF"
                )));
            }
            for &d in arm.all_joints().iter() {
                if !dof_on_path[arm.hand_link][d] {
                    return Err(bad(format!("joint `{}` is not on the path to the {side} hand", dofs[d].name)));
                }
            }
            for &(s, g) in &arm.rhythm {
                if !arm.scapula.contains(&s) || !arm.glenohumeral.contains(&g) {
                    return Err(bad(format!("{side} rhythm pair must map scapula to glenohumeral DOF")));
                }
            }
            Ok(arm)
        };
        let arms = [arm(Side::Left, &spec.hands.left)?, arm(Side::Right, &spec.hands.right)?];

        let camera_link = link_idx(&spec.camera.link)?;

        let mut initial = JointVector::zeros(dofs.len());
        for (n, deg) in &spec.initial_posture_deg {
            initial[dof_idx(n)?] = deg.to_radians();
        }

        let model = RobotModel {
            name: spec.name.clone(),
            links,
            dofs,
            muscles,
            groups,
            arms,
            camera_link,
            initial_posture: initial,
            dof_on_path,
            link_lookup,
            dof_lookup,
        };
        if !model.within_limits(&model.initial_posture) {
            return Err(bad("initial posture violates joint limits".into()));
        }
        Ok(model)
    }

    pub fn dof_count(&self) -> usize {
        self.dofs.len()
    }

    pub fn muscle_count(&self) -> usize {
        self.muscles.len()
    }

    pub fn joint_names(&self) -> impl Iterator<Item = &str> {
        self.dofs.iter().map(|d| d.name.as_str())
    }

    pub fn link_index(&self, name: &str) -> Result<usize> {
        self.link_lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLink(name.to_owned()))
    }

    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.dof_lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownJoint(name.to_owned()))
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_owned()))
    }

    pub fn group(&self, id: usize) -> Result<&Group> {
        self.groups.get(id).ok_or_else(|| Error::UnknownGroup(id.to_string()))
    }

    pub fn arm(&self, side: Side) -> &Arm {
        &self.arms[side.index()]
    }

    /// True when `dof` moves `link`.
    pub fn dof_moves_link(&self, dof: usize, link: usize) -> bool {
        self.dof_on_path[link][dof]
    }

    pub fn initial_posture(&self) -> &JointVector {
        &self.initial_posture
    }

    pub fn check_dims(&self, q: &JointVector) -> Result<()> {
        if q.len() != self.dofs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dofs.len(),
                actual: q.len(),
            });
        }
        Ok(())
    }

    pub fn clamp(&self, q: &mut JointVector) {
        for (v, d) in q.as_mut_slice().iter_mut().zip(&self.dofs) {
            *v = v.clamp(d.lower, d.upper);
        }
    }

    pub fn clamp_dof(&self, dof: usize, v: f64) -> f64 {
        v.clamp(self.dofs[dof].lower, self.dofs[dof].upper)
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.len() == self.dofs.len()
            && q.iter()
                .zip(&self.dofs)
                .all(|(v, d)| *v >= d.lower - 1e-12 && *v <= d.upper + 1e-12)
    }

    /// Joint vector from named degrees; unnamed joints are zero.
    pub fn joint_vector_deg(&self, named: &[(&str, f64)]) -> Result<JointVector> {
        let mut q = JointVector::zeros(self.dof_count());
        for (n, v) in named {
            q[self.joint_index(n)?] = v.to_radians();
        }
        Ok(q)
    }
}
