use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// End-effector pose: position in meters and a unit quaternion kept in the
/// `w >= 0` hemisphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonicalize(orientation),
        }
    }

    /// Builds a pose from raw components. The quaternion is given as
    /// `[w, x, y, z]` and is normalized.
    pub fn from_parts(position: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(Vector3::from(position), UnitQuaternion::from_quaternion(q))
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn orientation(&self) -> &UnitQuaternion<f64> {
        &self.orientation
    }

    /// Quaternion components as `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// The 7 numbers fed to the flow conditioner: position then quaternion.
    pub fn features(&self) -> [f64; 7] {
        let [w, x, y, z] = self.wxyz();
        [self.position.x, self.position.y, self.position.z, w, x, y, z]
    }
}

/// Flips the quaternion into the canonical hemisphere: `w > 0`, or when
/// `w == 0`, the first nonzero imaginary component is positive.
pub fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion();
    let flip = if c.w != 0.0 {
        c.w < 0.0
    } else {
        [c.i, c.j, c.k].into_iter().find(|v| *v != 0.0).is_some_and(|v| v < 0.0)
    };
    if flip {
        UnitQuaternion::new_unchecked(-*c)
    } else {
        q
    }
}

/// Euclidean distance between the two positions.
pub fn position_error(a: &Pose, b: &Pose) -> f64 {
    (a.position - b.position).norm()
}

/// Quaternion geodesic distance `2 acos(|<qa, qb>|)`, in `[0, pi]`.
///
/// Evaluated as `4 atan2(|qa - qb|, |qa + qb|)` after aligning signs, which
/// has the same value but keeps full precision for small angles and is
/// exactly zero for equal quaternions.
pub fn orientation_error(a: &Pose, b: &Pose) -> f64 {
    let qa = a.orientation.quaternion();
    let mut qb = *b.orientation.quaternion();
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    4.0 * (qa - qb).norm().atan2((qa + qb).norm())
}

/// Rotation vector (axis * angle) of `target * current^-1`, expressed in the
/// world frame.
pub(crate) fn rotation_error_vector(current: &Pose, target: &Pose) -> Vector3<f64> {
    let rel = canonicalize(target.orientation * current.orientation.inverse());
    rel.scaled_axis()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct PoseRecord {
    pub position: [f64; 3],
    #[serde(default = "identity_wxyz")]
    pub orientation: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}
