use std::sync::OnceLock;

use armature::correctives::{eval_correctives, CorrectiveConfig, CorrectiveNet};
use armature::fitting::{procrustes_align, robust_loss};
use armature::kinematics::{forward_kinematics, joint_positions, PoseState};
use armature::math::{euler_from_matrix, euler_xyz, rot6d, rotation_from_6d};
use armature::model::{BodyModel, ModelParams};
use armature::rig::{make_desk_rig, Rig};
use armature::skinning::skin;
use armature::training::project_simplex;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn rig() -> &'static Rig {
    static RIG: OnceLock<Rig> = OnceLock::new();
    RIG.get_or_init(|| make_desk_rig(0, 17, 12).unwrap())
}

fn model() -> &'static BodyModel {
    static MODEL: OnceLock<BodyModel> = OnceLock::new();
    MODEL.get_or_init(|| BodyModel::from_rig(rig().clone()))
}

fn angle() -> impl Strategy<Value = f64> {
    -3.0..3.0f64
}

fn pose_strategy() -> impl Strategy<Value = PoseState> {
    let j = rig().joint_count();
    (
        prop::array::uniform3(angle()),
        prop::array::uniform3(-1.0..1.0f64),
        prop::collection::vec(prop::array::uniform3(-0.8..0.8f64), j),
    )
        .prop_map(|(rr, rt, mut angles)| {
            angles[0] = [0.0; 3];
            PoseState {
                root_rotation: rr,
                root_translation: rt,
                joint_angles: angles,
                skeletal: vec![0.0; rig().attribute_count()],
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euler_rotations_are_orthonormal(e in prop::array::uniform3(angle())) {
        let r = euler_xyz(e);
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_round_trip_away_from_gimbal(x in angle(), y in -1.5..1.5f64, z in angle()) {
        let r = euler_xyz([x, y, z]);
        let back = euler_xyz(euler_from_matrix(&r));
        prop_assert!((back - r).abs().max() < 1e-9);
    }

    #[test]
    fn six_d_round_trip(e in prop::array::uniform3(angle())) {
        let r = euler_xyz(e);
        prop_assert!((rotation_from_6d(&rot6d(&r)) - r).abs().max() < 1e-12);
    }

    #[test]
    fn surface_shape_never_moves_joints(
        pose in pose_strategy(),
        beta in prop::collection::vec(-3.0..3.0f64, 8),
    ) {
        let m = model();
        let theta: Vec<f64> = pose.joint_angles.iter().flatten().copied().collect();
        let plain = ModelParams { theta: theta.clone(), root_rotation: pose.root_rotation, root_translation: pose.root_translation, ..ModelParams::zero() };
        let shaped = ModelParams { beta_s: beta, ..plain.clone() };
        let a = m.mesh(&plain).unwrap();
        let b = m.mesh(&shaped).unwrap();
        for (p, q) in a.joints.iter().zip(&b.joints) {
            prop_assert!(p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn simplex_projection_is_a_valid_weight_row(
        w in prop::collection::vec(-2.0..2.0f64, 8),
        mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(mask.iter().any(|m| *m));
        let mut row = w.clone();
        project_simplex(&mut row, &mask);
        prop_assert!(row.iter().all(|x| *x >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, m) in row.iter().zip(&mask) {
            if !m {
                prop_assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn skinning_commutes_with_a_global_rigid_motion(pose in pose_strategy(), yaw in angle(), shift in prop::array::uniform3(-1.0..1.0f64)) {
        let rig = rig();
        let base = PoseState { root_rotation: [0.0; 3], root_translation: [0.0; 3], ..pose.clone() };
        let moved = PoseState { root_rotation: [0.0, yaw, 0.0], root_translation: shift, ..pose };
        let a = skin(rig, &rig.template.vertices, &forward_kinematics(rig, &base).unwrap()).unwrap();
        let b = skin(rig, &rig.template.vertices, &forward_kinematics(rig, &moved).unwrap()).unwrap();
        let r = euler_xyz([0.0, yaw, 0.0]);
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            let want = r * Vector3::from(*p) + Vector3::from(shift);
            prop_assert!((want - Vector3::from(*q)).abs().max() < 1e-10);
        }
    }

    #[test]
    fn joint_positions_ignore_the_template_surface(pose in pose_strategy()) {
        let rig = rig();
        let t = forward_kinematics(rig, &pose).unwrap();
        let mut other = rig.clone();
        for v in &mut other.template.vertices {
            v[0] *= 1.1;
        }
        let u = forward_kinematics(&other, &pose).unwrap();
        prop_assert_eq!(joint_positions(&t), joint_positions(&u));
    }

    #[test]
    fn robust_loss_is_bounded_and_monotone(a in 0.0..10.0f64, b in 0.0..10.0f64, sigma in 0.01..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(robust_loss(lo, sigma) <= robust_loss(hi, sigma));
        prop_assert!((0.0..1.0).contains(&robust_loss(hi, sigma)));
        prop_assert_eq!(robust_loss(-a, sigma), robust_loss(a, sigma));
    }

    #[test]
    fn procrustes_never_increases_the_residual(
        pts in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 4..20),
        noise in prop::collection::vec(prop::array::uniform3(-0.1..0.1f64), 20),
        e in prop::array::uniform3(angle()),
    ) {
        let r = euler_xyz(e);
        let target: Vec<[f64; 3]> = pts.iter().zip(&noise).map(|(p, n)| {
            let q = r * Vector3::from(*p);
            [q.x + n[0], q.y + n[1], q.z + n[2]]
        }).collect();
        if let Ok(a) = procrustes_align(&pts, &target) {
            let before = (pts.iter().zip(&target).map(|(p, q)| armature::mesh::dist(*p, *q).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
            prop_assert!(a.rms <= before + 1e-12);
            let m = a.transform.matrix();
            prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corrective_offsets_stay_inside_their_support(pose in pose_strategy(), seed in 0u64..4) {
        let rig = rig();
        let mut net = CorrectiveNet::new(rig, &CorrectiveConfig { seed, ..Default::default() });
        // non-zero projection so every entry can move; switch off every
        // third gate
        for jc in &mut net.joints {
            for (k, p) in jc.p.data.iter_mut().enumerate() {
                *p = ((k % 7) as f64 - 3.0) * 1e-3;
            }
            for (k, a) in jc.logits.iter_mut().enumerate() {
                if (k + seed as usize).is_multiple_of(3) {
                    *a = -a.abs() - 0.1;
                }
            }
        }
        let off = eval_correctives(&net, rig, &pose).unwrap();
        let mut inside = vec![false; rig.vertex_count()];
        for jc in &net.joints {
            for (&v, a) in jc.support.iter().zip(&jc.logits) {
                if *a > 0.0 {
                    inside[v as usize] = true;
                }
            }
        }
        for (v, ok) in inside.iter().enumerate() {
            if !ok {
                prop_assert!(off[3 * v..3 * v + 3].iter().all(|x| *x == 0.0));
            }
        }
    }
}
