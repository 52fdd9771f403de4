//! Rigid kinematic trees: forward kinematics, Jacobians, pose error metrics
//! and uniform joint sampling.
//!
//! Joint frames follow the robot-description convention: a joint's frame is
//! its parent frame composed with the fixed origin transform, then with the
//! joint motion about (revolute) or along (prismatic) the joint axis.

mod model;
mod pose;

pub use model::{JointKind, JointSpec, KinematicModel};
pub(crate) use pose::rotation_error_vector;
pub use pose::{canonicalize, orientation_error, position_error, Pose};

use std::f64::consts::PI;

/// Concatenated `[position; quaternion]` features of a target list.
pub fn pose_features(poses: &[Pose]) -> Vec<f64> {
    poses.iter().flat_map(|p| p.features()).collect()
}

impl KinematicModel {
    /// A planar serial chain of revolute joints about `z` with the given
    /// link lengths and a fixed `tool` frame at the tip.
    pub fn planar_chain(name: &str, lengths: &[f64], limits: &[(f64, f64)]) -> Self {
        assert_eq!(lengths.len(), limits.len());
        let mut joints = Vec::with_capacity(lengths.len() + 1);
        let mut offset = 0.0;
        for (i, (&len, &(lo, hi))) in lengths.iter().zip(limits).enumerate() {
            let origin = Pose::from_parts([offset, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
            let parent = i.checked_sub(1);
            joints.push(JointSpec::revolute(
                &format!("joint{}", i + 1),
                parent,
                origin,
                [0.0, 0.0, 1.0],
                lo,
                hi,
            ));
            offset = len;
        }
        joints.push(JointSpec::fixed(
            "tool",
            Some(lengths.len() - 1),
            Pose::from_parts([offset, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]),
        ));
        let ee = joints.len() - 1;
        Self::new(name, joints, vec![ee]).expect("planar chain is valid")
    }

    /// Planar two-link arm with unit links and joint range `[-pi, pi]`.
    pub fn planar_2r() -> Self {
        Self::planar_chain("planar2r", &[1.0, 1.0], &[(-PI, PI), (-PI, PI)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Trunk joint with two 2-link branches; branch joints are distinct.
    fn dual_branch() -> KinematicModel {
        let id = [1.0, 0.0, 0.0, 0.0];
        let joints = vec![
            JointSpec::revolute("trunk", None, Pose::identity(), [0.0, 0.0, 1.0], -1.0, 1.0),
            JointSpec::revolute(
                "l1",
                Some(0),
                Pose::from_parts([0.0, 0.3, 0.0], id),
                [0.0, 0.0, 1.0],
                -2.0,
                2.0,
            ),
            JointSpec::revolute(
                "l2",
                Some(1),
                Pose::from_parts([0.5, 0.0, 0.0], id),
                [0.0, 1.0, 0.0],
                -2.0,
                2.0,
            ),
            JointSpec::fixed("ltool", Some(2), Pose::from_parts([0.4, 0.0, 0.0], id)),
            JointSpec::revolute(
                "r1",
                Some(0),
                Pose::from_parts([0.0, -0.3, 0.0], id),
                [0.0, 0.0, 1.0],
                -2.0,
                2.0,
            ),
            JointSpec::prismatic(
                "r2",
                Some(4),
                Pose::from_parts([0.5, 0.0, 0.0], id),
                [1.0, 0.0, 0.0],
                0.0,
                0.2,
            ),
            JointSpec::fixed("rtool", Some(5), Pose::from_parts([0.4, 0.0, 0.0], id)),
        ];
        KinematicModel::new("dual", joints, vec![3, 6]).unwrap()
    }

    #[test]
    fn planar_2r_examples() {
        let arm = KinematicModel::planar_2r();
        let p = arm.forward_kinematics(&[0.0, 0.0]).unwrap()[0];
        assert!((p.position - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(orientation_error(&p, &Pose::identity()) < 1e-12);

        let p = arm.forward_kinematics(&[FRAC_PI_2, 0.0]).unwrap()[0];
        assert!((p.position - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        let rz = Pose::new(
            Vector3::zeros(),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
        );
        assert!(orientation_error(&p, &rz) < 1e-12);

        // (cos a, sin a) + (cos(a+b), sin(a+b)) with a = pi/2, b = -pi/2
        let p = arm.forward_kinematics(&[FRAC_PI_2, -FRAC_PI_2]).unwrap()[0];
        assert!((p.position - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(orientation_error(&p, &Pose::identity()) < 1e-12);
    }

    #[test]
    fn fk_rejects_wrong_dimension() {
        let arm = KinematicModel::planar_2r();
        assert!(matches!(
            arm.forward_kinematics(&[0.0]),
            Err(crate::Error::Dimension {
                expected: 2,
                actual: 1,
                ..
            })
        ));
        assert!(arm.jacobian(&[0.0, 0.0], 1).is_err());
    }

    /// Central differences of FK: position directly, orientation through the
    /// rotation vector of `R(q+h) R(q-h)^T`.
    fn fd_jacobian(model: &KinematicModel, q: &[f64], ee: usize, h: f64) -> nalgebra::DMatrix<f64> {
        let mut jac = nalgebra::DMatrix::zeros(6, q.len());
        for k in 0..q.len() {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[k] += h;
            qm[k] -= h;
            let a = model.forward_kinematics(&qp).unwrap()[ee];
            let b = model.forward_kinematics(&qm).unwrap()[ee];
            let lin = (a.position - b.position) / (2.0 * h);
            let ang = (a.orientation() * b.orientation().inverse()).scaled_axis() / (2.0 * h);
            for r in 0..3 {
                jac[(r, k)] = lin[r];
                jac[(r + 3, k)] = ang[r];
            }
        }
        jac
    }

    #[test]
    fn jacobian_first_column_straight_arm() {
        let arm = KinematicModel::planar_2r();
        let j = arm.jacobian(&[0.0, 0.0], 0).unwrap();
        assert!(close(j[(0, 0)], 0.0, 1e-12));
        assert!(close(j[(1, 0)], 2.0, 1e-12));
        assert!(close(j[(2, 0)], 0.0, 1e-12));
        let fd = fd_jacobian(&arm, &[0.0, 0.0], 0, 1e-6);
        assert!((j - fd).abs().max() < 1e-5);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spatial = KinematicModel::from_json(include_str!("../../../../robots/spatial6r.json")).unwrap();
        let dual = dual_branch();
        for model in [&spatial, &dual] {
            for (i, q) in model.sample_joints(20, 11).iter().enumerate() {
                for ee in 0..model.num_targets() {
                    let j = model.jacobian(q, ee).unwrap();
                    let fd = fd_jacobian(model, q, ee, 1e-6);
                    let dev = (&j - &fd).abs().max();
                    assert!(dev < 1e-5, "{} sample {i} ee {ee}: {dev}", model.name());
                }
            }
        }
    }

    #[test]
    fn branch_columns_are_structurally_zero() {
        let dual = dual_branch();
        assert_eq!(dual.dof(), 5);
        let q = [0.2, -0.4, 0.7, 0.1, 0.05];
        let jl = dual.jacobian(&q, 0).unwrap();
        let jr = dual.jacobian(&q, 1).unwrap();
        // slots: trunk 0, l1 1, l2 2, r1 3, r2 4
        for col in [3, 4] {
            assert!(jl.column(col).iter().all(|v| *v == 0.0));
        }
        for col in [1, 2] {
            assert!(jr.column(col).iter().all(|v| *v == 0.0));
        }
        assert!(jl.column(0).norm() > 0.0 && jr.column(0).norm() > 0.0);
        // prismatic column has no angular part
        assert!(jr.fixed_view::<3, 1>(3, 4).norm() == 0.0);
    }

    #[test]
    fn fixed_joints_have_no_column() {
        let arm = KinematicModel::planar_2r();
        assert_eq!(arm.joints().len(), 3);
        assert_eq!(arm.jacobian(&[0.3, 0.2], 0).unwrap().ncols(), 2);
    }

    #[test]
    fn first_joint_offset_rotates_positions() {
        let arm = KinematicModel::planar_chain("p3", &[1.0, 0.8, 0.6], &[(-3.0, 3.0); 3]);
        let delta = 0.37;
        for q in arm.sample_joints(50, 5) {
            let mut shifted = q.clone();
            shifted[0] += delta;
            let a = arm.forward_kinematics(&q).unwrap()[0];
            let b = arm.forward_kinematics(&shifted).unwrap()[0];
            let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), delta);
            assert!((rot * a.position - b.position).norm() < 1e-9);
        }
    }

    #[test]
    fn fk_is_deterministic() {
        let dual = dual_branch();
        for q in dual.sample_joints(10, 3) {
            let a = dual.forward_kinematics(&q).unwrap();
            let b = dual.forward_kinematics(&q).unwrap();
            assert_eq!(a, b);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(orientation_error(x, y), 0.0);
            }
        }
    }

    #[test]
    fn sampling_examples() {
        let arm = KinematicModel::planar_chain("deg", &[1.0, 1.0], &[(0.5, 0.5), (-1.0, 1.0)]);
        let samples = arm.sample_joints(100_000, 42);
        assert!(samples.iter().all(|q| q[0] == 0.5));
        assert!(samples.iter().all(|q| (-1.0..=1.0).contains(&q[1])));
        let mean = samples.iter().map(|q| q[1]).sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert_eq!(samples[..10], arm.sample_joints(10, 42)[..]);
        assert_ne!(samples[..10], arm.sample_joints(10, 43)[..]);
    }

    #[test]
    fn loader_reports_offending_joint() {
        let text = r#"{"name":"bad","joints":[
            {"name":"a","kind":"revolute","axis":[0,0,1],"lower":-1,"upper":1},
            {"name":"b","kind":"revolute","parent":"a","axis":[0,0,2],"lower":-1,"upper":1}
        ],"end_effectors":["b"]}"#;
        match KinematicModel::from_json(text) {
            Err(crate::Error::RobotSpec { joint, .. }) => assert_eq!(joint, "b"),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"name":"bad","joints":[
            {"name":"a","kind":"revolute","axis":[0,0,1],"lower":1,"upper":-1}
        ],"end_effectors":["a"]}"#;
        assert!(matches!(KinematicModel::from_json(text), Err(crate::Error::RobotSpec { joint, .. }) if joint == "a"));
        let text = r#"{"name":"bad","joints":[
            {"name":"a","kind":"revolute","parent":"zz","axis":[0,0,1],"lower":-1,"upper":1}
        ],"end_effectors":["a"]}"#;
        assert!(matches!(KinematicModel::from_json(text), Err(crate::Error::RobotSpec { joint, .. }) if joint == "a"));
        let text = r#"{"name":"bad","joints":[
            {"name":"a","kind":"revolute","axis":[0,0,1],"lower":-1,"upper":1}
        ],"end_effectors":["nope"]}"#;
        assert!(
            matches!(KinematicModel::from_json(text), Err(crate::Error::RobotSpec { joint, .. }) if joint == "nope")
        );
    }

    #[test]
    fn json_round_trip_preserves_kinematics() {
        let dual = dual_branch();
        let again = KinematicModel::from_json(&dual.to_json()).unwrap();
        for q in dual.sample_joints(5, 9) {
            assert_eq!(
                dual.forward_kinematics(&q).unwrap(),
                again.forward_kinematics(&q).unwrap()
            );
        }
    }
}
