use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pose::{Pose, PoseRecord};
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Clone, Debug)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Motion axis in the joint frame (after the origin transform).
    pub axis: Vector3<f64>,
    /// Fixed transform from the parent frame.
    pub origin: Pose,
    pub lower: f64,
    pub upper: f64,
    pub parent: Option<usize>,
}

impl JointSpec {
    pub fn revolute(name: &str, parent: Option<usize>, origin: Pose, axis: [f64; 3], lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_owned(),
            kind: JointKind::Revolute,
            axis: Vector3::from(axis),
            origin,
            lower,
            upper,
            parent,
        }
    }

    pub fn prismatic(name: &str, parent: Option<usize>, origin: Pose, axis: [f64; 3], lower: f64, upper: f64) -> Self {
        Self {
            kind: JointKind::Prismatic,
            ..Self::revolute(name, parent, origin, axis, lower, upper)
        }
    }

    pub fn fixed(name: &str, parent: Option<usize>, origin: Pose) -> Self {
        Self {
            name: name.to_owned(),
            kind: JointKind::Fixed,
            axis: Vector3::z(),
            origin,
            lower: 0.0,
            upper: 0.0,
            parent,
        }
    }

    fn motion(&self, value: f64) -> Isometry3<f64> {
        match self.kind {
            JointKind::Revolute => Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_scaled_axis(self.axis * value),
            ),
            JointKind::Prismatic => {
                Isometry3::from_parts(Translation3::from(self.axis * value), UnitQuaternion::identity())
            }
            JointKind::Fixed => Isometry3::identity(),
        }
    }
}

/// A rooted tree of joints with one or more end-effector frames.
///
/// Every joint defines a frame; frames are indexed like the joints. Joints
/// are stored in topological order (parent index below child index).
#[derive(Clone, Debug)]
pub struct KinematicModel {
    name: String,
    joints: Vec<JointSpec>,
    end_effectors: Vec<usize>,
    /// Position of each joint in the joint vector, `None` for fixed joints.
    slots: Vec<Option<usize>>,
    dof: usize,
}

impl KinematicModel {
    pub fn new(name: &str, joints: Vec<JointSpec>, end_effectors: Vec<usize>) -> Result<Self> {
        let mut names = HashMap::new();
        let mut slots = Vec::with_capacity(joints.len());
        let mut dof = 0;
        for (i, j) in joints.iter().enumerate() {
            let bad = |reason: String| Error::RobotSpec {
                joint: j.name.clone(),
                reason,
            };
            if names.insert(j.name.as_str(), i).is_some() {
                return Err(bad("duplicate joint name".into()));
            }
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(bad(format!("parent index {p} is not before joint index {i}")));
                }
            }
            if !(j.lower <= j.upper) {
                return Err(bad(format!("lower limit {} exceeds upper limit {}", j.lower, j.upper)));
            }
            if !j.lower.is_finite() || !j.upper.is_finite() {
                return Err(bad("joint limits must be finite".into()));
            }
            if j.kind != JointKind::Fixed && (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(bad(format!("axis norm {} is not 1", j.axis.norm())));
            }
            if j.kind == JointKind::Fixed {
                slots.push(None);
            } else {
                slots.push(Some(dof));
                dof += 1;
            }
        }
        if end_effectors.is_empty() {
            return Err(Error::RobotSpec {
                joint: name.to_owned(),
                reason: "at least one end effector is required".into(),
            });
        }
        for &e in &end_effectors {
            if e >= joints.len() {
                return Err(Error::EndEffectorIndex {
                    index: e,
                    count: joints.len(),
                });
            }
        }
        Ok(Self {
            name: name.to_owned(),
            joints,
            end_effectors,
            slots,
            dof,
        })
    }

    /// Reads and validates a robot specification JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RobotFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("robot spec: {e}")))?;
        file.into_model()
    }

    pub fn to_json(&self) -> String {
        let file = RobotFile {
            name: self.name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| JointRecord {
                    name: j.name.clone(),
                    kind: j.kind,
                    parent: j.parent.map(|p| self.joints[p].name.clone()),
                    axis: (j.kind != JointKind::Fixed).then(|| [j.axis.x, j.axis.y, j.axis.z]),
                    origin: Some(PoseRecord {
                        position: j.origin.position.into(),
                        orientation: j.origin.wxyz(),
                    }),
                    lower: (j.kind != JointKind::Fixed).then_some(j.lower),
                    upper: (j.kind != JointKind::Fixed).then_some(j.upper),
                })
                .collect(),
            end_effectors: self
                .end_effectors
                .iter()
                .map(|&e| self.joints[e].name.clone())
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("robot spec serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of actuated joints `n`.
    pub fn dof(&self) -> usize {
        self.dof
    }

    /// Number of end effectors `m`.
    pub fn num_targets(&self) -> usize {
        self.end_effectors.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn end_effectors(&self) -> &[usize] {
        &self.end_effectors
    }

    /// Lower and upper limits of the actuated joints, in joint-vector order.
    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.actuated().map(|j| (j.lower, j.upper)).collect()
    }

    fn actuated(&self) -> impl Iterator<Item = &JointSpec> {
        self.joints.iter().filter(|j| j.kind != JointKind::Fixed)
    }

    /// World transform of every frame.
    fn frames(&self, q: &[f64]) -> Vec<Isometry3<f64>> {
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for (j, slot) in self.joints.iter().zip(&self.slots) {
            let parent = j.parent.map_or_else(Isometry3::identity, |p| out[p]);
            let value = slot.map_or(0.0, |s| q[s]);
            out.push(parent * j.origin.to_isometry() * j.motion(value));
        }
        out
    }

    /// End-effector poses, one per declared end effector.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Vec<Pose>> {
        check_dim("forward kinematics joint vector", self.dof, q.len())?;
        let frames = self.frames(q);
        Ok(self
            .end_effectors
            .iter()
            .map(|&e| Pose::from_isometry(&frames[e]))
            .collect())
    }

    /// Geometric Jacobian (linear velocity of the end-effector point, then
    /// world-frame angular velocity) of end effector `ee`.
    pub fn jacobian(&self, q: &[f64], ee: usize) -> Result<DMatrix<f64>> {
        check_dim("jacobian joint vector", self.dof, q.len())?;
        let frame = *self.end_effectors.get(ee).ok_or(Error::EndEffectorIndex {
            index: ee,
            count: self.end_effectors.len(),
        })?;
        let frames = self.frames(q);
        let p_ee = frames[frame].translation.vector;
        let mut jac = DMatrix::zeros(6, self.dof);

        let mut cursor = Some(frame);
        while let Some(i) = cursor {
            let j = &self.joints[i];
            if let Some(col) = self.slots[i] {
                // joint frame before its own motion
                let base = j.parent.map_or_else(Isometry3::identity, |p| frames[p]) * j.origin.to_isometry();
                let axis = base.rotation * j.axis;
                match j.kind {
                    JointKind::Revolute => {
                        let lin = axis.cross(&(p_ee - base.translation.vector));
                        jac.fixed_view_mut::<3, 1>(0, col).copy_from(&lin);
                        jac.fixed_view_mut::<3, 1>(3, col).copy_from(&axis);
                    }
                    JointKind::Prismatic => {
                        jac.fixed_view_mut::<3, 1>(0, col).copy_from(&axis);
                    }
                    JointKind::Fixed => unreachable!(),
                }
            }
            cursor = j.parent;
        }
        Ok(jac)
    }

    /// Joint vectors drawn i.i.d. uniformly within the joint limits.
    pub fn sample_joints(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_joints_with(&mut rng)).collect()
    }

    pub fn sample_joints_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.actuated()
            .map(|j| {
                let u: f64 = rng.gen();
                (j.lower + (j.upper - j.lower) * u).clamp(j.lower, j.upper)
            })
            .collect()
    }

    /// Clamps `q` into the joint limits in place.
    pub fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(self.actuated()) {
            *v = v.clamp(j.lower, j.upper);
        }
    }

    /// Like [`KinematicModel::clamp`], except that revolute joints whose
    /// range covers a full turn are wrapped into `[lower, lower + 2 pi)`:
    /// their limits coincide and are not stops.
    pub fn enforce_limits(&self, q: &mut [f64]) {
        let turn = 2.0 * std::f64::consts::PI;
        for (v, j) in q.iter_mut().zip(self.actuated()) {
            if j.kind == JointKind::Revolute && j.upper - j.lower >= turn && v.is_finite() {
                *v = j.lower + (*v - j.lower).rem_euclid(turn);
            } else {
                *v = v.clamp(j.lower, j.upper);
            }
        }
    }

    pub fn within_limits(&self, q: &[f64], tol: f64) -> bool {
        q.iter()
            .zip(self.actuated())
            .all(|(v, j)| *v >= j.lower - tol && *v <= j.upper + tol)
    }

    /// Sum of the distances between consecutive frame origins along the path
    /// from the root to end effector `ee`; an upper bound on reach.
    pub fn reach(&self, ee: usize) -> f64 {
        let mut total = 0.0;
        let mut cursor = Some(self.end_effectors[ee]);
        while let Some(i) = cursor {
            total += self.joints[i].origin.position.norm();
            cursor = self.joints[i].parent;
        }
        total
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RobotFile {
    name: String,
    joints: Vec<JointRecord>,
    end_effectors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JointRecord {
    name: String,
    kind: JointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
}

impl RobotFile {
    fn into_model(self) -> Result<KinematicModel> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut joints = Vec::with_capacity(self.joints.len());
        for (i, rec) in self.joints.into_iter().enumerate() {
            let bad = |reason: &str| Error::RobotSpec {
                joint: rec.name.clone(),
                reason: reason.to_owned(),
            };
            let parent = match &rec.parent {
                None => None,
                Some(p) => Some(
                    *index
                        .get(p)
                        .ok_or_else(|| bad(&format!("parent `{p}` is not declared before this joint")))?,
                ),
            };
            let origin = match &rec.origin {
                None => Pose::identity(),
                Some(o) => {
                    let qn = o.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if !(qn > 0.0) || (qn - 1.0).abs() > 1e-6 {
                        return Err(bad(&format!("origin quaternion norm {qn} is not 1")));
                    }
                    Pose::from_parts(o.position, o.orientation)
                }
            };
            let joint = match rec.kind {
                JointKind::Fixed => JointSpec::fixed(&rec.name, parent, origin),
                kind => {
                    let axis = rec.axis.ok_or_else(|| bad("missing axis"))?;
                    let lower = rec.lower.ok_or_else(|| bad("missing lower limit"))?;
                    let upper = rec.upper.ok_or_else(|| bad("missing upper limit"))?;
                    JointSpec {
                        name: rec.name.clone(),
                        kind,
                        axis: Vector3::from(axis),
                        origin,
                        lower,
                        upper,
                        parent,
                    }
                }
            };
            if index.insert(rec.name.clone(), i).is_some() {
                return Err(bad("duplicate joint name"));
            }
            joints.push(joint);
        }
        let mut ees = Vec::with_capacity(self.end_effectors.len());
        for name in &self.end_effectors {
            ees.push(*index.get(name).ok_or_else(|| Error::RobotSpec {
                joint: name.clone(),
                reason: "end-effector frame does not exist".into(),
            })?);
        }
        KinematicModel::new(&self.name, joints, ees)
    }
}
