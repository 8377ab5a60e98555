use armature::autodiff::Camera;
use armature::fitting::*;
use armature::model::BodyModel;
use armature::prior::PoseVae;
use armature::rig::make_desk_rig;
use armature::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> BodyModel {
    BodyModel::from_rig(make_desk_rig(0, 17, 12).unwrap())
}

fn model_with_prior() -> BodyModel {
    let mut m = model();
    m.pose_prior = Some(PoseVae::new(m.rig.body_joints(), 8, 32, 3));
    m
}

fn camera() -> Camera {
    // three meters in front of the subject, looking back along -z
    Camera {
        fx: 1000.0,
        fy: 1000.0,
        cx: 320.0,
        cy: 240.0,
        rotation: [1., 0., 0., 0., -1., 0., 0., 0., -1.],
        translation: [0.0, 1.0, 3.0],
    }
}

fn joint_shift_mm(model: &BodyModel, a: &FitResult, b: &FitResult) -> f64 {
    let ja = model.mesh(&a.model_params).unwrap().joints;
    let jb = model.mesh(&b.model_params).unwrap().joints;
    1e3 * ja.iter().zip(&jb).map(|(x, y)| armature::mesh::dist(*x, *y)).fold(0.0, f64::max)
}

#[test]
fn full_information_recovery() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = FitParams::sample(&m, &mut rng, 0.4);
    let obs = synthesize_observation(
        &m,
        &truth,
        &SynthOptions {
            vertices: true,
            ..Default::default()
        },
    )
    .unwrap();
    let r = fit(&m, &obs, &FitConfig::default()).unwrap();
    println!("recovery: {:?}", r.metrics);
    for st in &r.stages {
        println!(
            "  {} it {} conv {} {:?} -> {:?}",
            st.name,
            st.iterations,
            st.converged,
            st.objective.first(),
            st.objective.last()
        );
    }
    assert!(r.metrics.joint_mm.unwrap() < 1.0);
    assert!(r.metrics.vertex_mm.unwrap() < 1.0);
}

#[test]
fn full_information_recovery_in_latent_space() {
    let m = model_with_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let truth = FitParams::sample(&m, &mut rng, 0.6);
    let obs = synthesize_observation(
        &m,
        &truth,
        &SynthOptions {
            vertices: true,
            ..Default::default()
        },
    )
    .unwrap();
    let r = fit(&m, &obs, &FitConfig::default()).unwrap();
    println!("latent recovery: {:?}", r.metrics);
    assert!(r.metrics.joint_mm.unwrap() < 1.0);
    assert!(r.metrics.vertex_mm.unwrap() < 1.0);
}

#[test]
fn metrics_recompute_from_stored_params() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let truth = FitParams::sample(&m, &mut rng, 0.3);
    let obs = synthesize_observation(
        &m,
        &truth,
        &SynthOptions {
            vertices: true,
            ..Default::default()
        },
    )
    .unwrap();
    let r = fit(&m, &obs, &FitConfig::default()).unwrap();
    let again = compute_metrics(&m, &obs, &r.model_params).unwrap();
    assert_eq!(again, r.metrics, "{again:?} {:?}", r.metrics);
    let json = serde_json::to_string(&r.model_params).unwrap();
    let back: armature::model::ModelParams = serde_json::from_str(&json).unwrap();
    assert_eq!(compute_metrics(&m, &obs, &back).unwrap(), r.metrics);
}

#[test]
fn keypoint_only_fit_leaves_surface_shape_at_zero() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut truth = FitParams::sample(&m, &mut rng, 0.4);
    for b in &mut truth.beta_s {
        *b = 2.0 * rng.random::<f64>() - 1.0;
    }
    let obs = synthesize_observation(&m, &truth, &SynthOptions::default()).unwrap();
    let r = fit(&m, &obs, &FitConfig::default()).unwrap();
    assert!(r.params.beta_s.iter().all(|b| *b == 0.0));
    let norm = r.params.beta_s.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(norm <= 1e-3);

    // the data term does not see beta_s at the keypoint optimum
    let cfg = FitConfig::default();
    let prob = FitProblem::new(&m, &obs, &cfg).unwrap();
    let terms = [Term::Joints, Term::Landmarks];
    let base = prob.evaluate(&r.params, &terms, 1.0).unwrap();
    let mut moved = r.params.clone();
    moved.beta_s = truth.beta_s.clone();
    let other = prob.evaluate(&moved, &terms, 1.0).unwrap();
    assert!((base.terms.joints3d - other.terms.joints3d).abs() < 1e-6);
}

#[test]
fn single_outlier_moves_joints_by_less_than_5mm() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let truth = FitParams::sample(&m, &mut rng, 0.4);
    let obs = synthesize_observation(
        &m,
        &truth,
        &SynthOptions {
            vertices: true,
            ..Default::default()
        },
    )
    .unwrap();
    let clean = fit(&m, &obs, &FitConfig::default()).unwrap();
    let mut bad = obs.clone();
    // 1 m = 20 sigma; also check 10^3 sigma
    for dist in [1.0, 1e3 * DEFAULT_SIGMA_3D] {
        bad.keypoints3d[7].position[0] = obs.keypoints3d[7].position[0] + dist;
        let r = fit(&m, &bad, &FitConfig::default()).unwrap();
        let shift = joint_shift_mm(&m, &clean, &r);
        println!("outlier {dist} m: joint shift {shift:.3} mm");
        assert!(shift < 5.0);
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let m = model_with_prior();
    let cam = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for state in 0..10 {
        let truth = FitParams::sample(&m, &mut rng, 0.4);
        let opts = SynthOptions {
            vertices: true,
            camera: Some(cam),
            ..Default::default()
        };
        let mut obs = synthesize_observation(&m, &truth, &opts).unwrap();
        for k in &mut obs.keypoints3d {
            k.confidence = rng.random_range(0.2..1.0);
        }
        let prob = FitProblem::new(&m, &obs, &FitConfig::default()).unwrap();
        let terms = [Term::Joints, Term::Landmarks, Term::Vertices];
        let mut x = FitParams::sample(&m, &mut rng, 0.3);
        x.root_translation = truth.root_translation;
        let o = prob.evaluate(&x, &terms, 1.0).unwrap();
        let h = 1e-6;
        for b in ALL_BLOCKS {
            let v = x.block(b);
            let g = o.gradient.block(b);
            let mut fd = vec![0.0; v.len()];
            for i in 0..v.len() {
                let mut p = x.clone();
                let mut w = v.clone();
                w[i] = v[i] + h;
                p.set_block(b, &w);
                let fp = prob.evaluate(&p, &terms, 1.0).unwrap().value;
                w[i] = v[i] - h;
                p.set_block(b, &w);
                let fm = prob.evaluate(&p, &terms, 1.0).unwrap().value;
                fd[i] = (fp - fm) / (2.0 * h);
            }
            let err = armature::autodiff::relative_error(&g, &fd);
            assert!(err < 1e-4, "state {state} block {b:?}: rel err {err}");
        }
    }
}

#[test]
fn zero_confidence_leaves_only_prior_energy() {
    let m = model_with_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let truth = FitParams::sample(&m, &mut rng, 0.4);
    let mut obs = synthesize_observation(
        &m,
        &truth,
        &SynthOptions {
            camera: Some(camera()),
            ..Default::default()
        },
    )
    .unwrap();
    for k in &mut obs.keypoints3d {
        k.confidence = 0.0;
    }
    for k in &mut obs.keypoints2d {
        k.confidence = 0.0;
    }
    let cfg = FitConfig::default();
    let prob = FitProblem::new(&m, &obs, &cfg).unwrap();
    let x = FitParams::sample(&m, &mut rng, 0.4);
    let o = prob.evaluate(&x, &[Term::Joints, Term::Landmarks], 1.0).unwrap();
    let p = &cfg.priors;
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let prior =
        p.body * sq(&x.body) + p.hand * sq(&x.hand) + p.beta_s * sq(&x.beta_s) + p.beta_f * sq(&x.beta_f) + p.beta_k * sq(&x.beta_k);
    assert_eq!(o.terms.data(), 0.0);
    assert!((o.value - prior).abs() < 1e-15 * prior.max(1.0));
}

#[test]
fn stages_are_monotone_and_isolated() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let truth = FitParams::sample(&m, &mut rng, 0.4);
    let obs = synthesize_observation(
        &m,
        &truth,
        &SynthOptions {
            vertices: true,
            ..Default::default()
        },
    )
    .unwrap();
    let init = FitProblem::new(&m, &obs, &FitConfig::default()).unwrap().initial_params().unwrap();
    let mut seen = Vec::new();
    let r = fit_with(&m, &obs, &FitConfig::default(), Some(init.clone()), &mut |s| {
        seen.push(s.name.clone())
    })
    .unwrap();
    assert_eq!(seen, ["body_coarse", "body", "detail", "surface", "refine"]);
    for s in &r.stages {
        assert!(s.objective.windows(2).all(|w| w[1] <= w[0]), "stage {} not monotone", s.name);
    }

    let mut cfg = FitConfig::default();
    cfg.stages.truncate(1);
    let body_only = fit_with(&m, &obs, &cfg, Some(init.clone()), &mut |_| {}).unwrap();
    for b in [Block::Hand, Block::BetaS, Block::BetaF] {
        let same = init
            .block(b)
            .iter()
            .zip(body_only.params.block(b))
            .all(|(a, c)| a.to_bits() == c.to_bits());
        assert!(same, "{b:?} changed in the body stage");
    }
}

#[test]
fn surface_stage_is_skipped_without_vertex_targets() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let truth = FitParams::sample(&m, &mut rng, 0.3);
    let obs = synthesize_observation(&m, &truth, &SynthOptions::default()).unwrap();
    let r = fit(&m, &obs, &FitConfig::default()).unwrap();
    let skipped: Vec<bool> = r.stages.iter().map(|s| s.skipped.is_some()).collect();
    assert_eq!(skipped, [false, false, false, true, false]);
}

#[test]
fn fit_from_2d_keypoints() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let truth = FitParams::sample(&m, &mut rng, 0.2);
    let opts = SynthOptions {
        joints3d: false,
        landmarks3d: false,
        vertices: false,
        camera: Some(camera()),
    };
    let obs = synthesize_observation(&m, &truth, &opts).unwrap();
    let r = fit(&m, &obs, &FitConfig::default()).unwrap();
    let first = r.stages[0].objective.first().unwrap();
    let last = r.stages[0].objective.last().unwrap();
    println!("2D fit: objective {first:.4} -> {last:.6}, {:?}", r.terms);
    assert!(last < &(0.01 * first));
    assert_eq!(r.metrics.masked_keypoints, 0);
}

#[test]
fn nan_objective_reports_stage() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let truth = FitParams::sample(&m, &mut rng, 0.3);
    let mut obs = synthesize_observation(&m, &truth, &SynthOptions::default()).unwrap();
    obs.keypoints3d[3].position = [1e300, 0.0, 0.0];
    let cfg = FitConfig::default();
    let init = FitParams::zeros(&m);
    match fit_with(&m, &obs, &cfg, Some(init), &mut |_| {}) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("stage `body_coarse`") && msg.contains("evaluation 1"), "{msg}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_observations_are_rejected() {
    let m = model();
    assert!(matches!(
        FitProblem::new(&m, &Observation::default(), &FitConfig::default()),
        Err(Error::Input(_))
    ));
    let obs = Observation {
        keypoints3d: vec![Keypoint3d {
            joint: Some(0),
            name: None,
            position: [0.0; 3],
            confidence: -1.0,
        }],
        ..Default::default()
    };
    assert!(FitProblem::new(&m, &obs, &FitConfig::default()).is_err());
    let obs = Observation {
        keypoints2d: vec![Keypoint2d {
            joint: Some(0),
            name: None,
            pixel: [0.0; 2],
            confidence: 1.0,
        }],
        ..Default::default()
    };
    assert!(FitProblem::new(&m, &obs, &FitConfig::default()).is_err());
    let mut cfg = FitConfig::default();
    cfg.stages[0].free.clear();
    let ok = synthesize_observation(&m, &FitParams::zeros(&m), &SynthOptions::default()).unwrap();
    assert!(FitProblem::new(&m, &ok, &cfg).is_err());
}

#[test]
fn robust_loss_derivative_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let r: f64 = rng.random_range(-0.5..0.5);
        let s: f64 = rng.random_range(0.01..0.2);
        let h = 1e-7;
        let fd = (robust_loss(r + h, s) - robust_loss(r - h, s)) / (2.0 * h);
        let an = robust_loss_derivative(r, s);
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
    }
}

#[test]
fn procrustes_recovers_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let src: Vec<[f64; 3]> = (0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let r = armature::math::euler_xyz([0.3, -0.7, 1.1]);
    let t = nalgebra::Vector3::new(0.5, -2.0, 1.0);
    let dst: Vec<[f64; 3]> = src
        .iter()
        .map(|p| {
            let q = r * nalgebra::Vector3::from(*p) + t;
            [q.x, q.y, q.z]
        })
        .collect();
    let p = procrustes_align(&src, &dst).unwrap();
    assert!(p.rms < 1e-9);
    assert!((p.transform.matrix() - r).abs().max() < 1e-9);
}

#[test]
fn procrustes_matches_angle_grid_in_the_plane() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..5 {
        let src: Vec<[f64; 3]> = (0..12)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
            .collect();
        let dst: Vec<[f64; 3]> = (0..12)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
            .collect();
        // brute force over in-plane rotations and reflections (a half turn
        // about an in-plane axis reflects planar points); the optimal
        // translation is the centroid difference
        let c = |pts: &[[f64; 3]]| {
            let n = pts.len() as f64;
            [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (cs, cd) = (c(&src), c(&dst));
        let mut best = f64::INFINITY;
        for (k, flip) in (0..200_000).flat_map(|k| [(k, 1.0), (k, -1.0)]) {
            let a = k as f64 / 200_000.0 * std::f64::consts::TAU;
            let (s, co) = a.sin_cos();
            let e: f64 = src
                .iter()
                .zip(&dst)
                .map(|(p, q)| {
                    let py = flip * (p[1] - cs[1]);
                    let x = co * (p[0] - cs[0]) - s * py + cd[0];
                    let y = s * (p[0] - cs[0]) + co * py + cd[1];
                    (x - q[0]).powi(2) + (y - q[1]).powi(2)
                })
                .sum();
            best = best.min(e);
        }
        let grid_rms = (best / 12.0).sqrt();
        let p = procrustes_align(&src, &dst).unwrap();
        assert!((p.rms - grid_rms).abs() < 1e-3, "{} vs {}", p.rms, grid_rms);
        assert!(p.rms <= grid_rms + 1e-12);
    }
}

fn face_points() -> Vec<[f64; 3]> {
    // eight points on a curved face, 1.6 m high
    let mut pts = Vec::new();
    for (x, y) in [
        (-0.04, 0.03),
        (0.04, 0.03),
        (0.0, 0.0),
        (-0.03, -0.04),
        (0.03, -0.04),
        (0.0, -0.06),
        (-0.06, 0.0),
        (0.06, 0.0),
    ] {
        let z: f64 = 0.1 - 4.0 * (x * x + y * y);
        pts.push([x, 1.6 + y, z]);
    }
    pts
}

#[test]
fn expression_alignment_identity_and_rotation() {
    let cam = camera();
    let pts = face_points();
    let px: Vec<[f64; 2]> = pts.iter().map(|p| cam.project(*p).unwrap()).collect();
    let id = align_expression_keypoints(&pts, &px, &cam).unwrap();
    println!("identity alignment {:?} angle {}", id.translation, id.angle());
    assert!(id.angle() < 1e-6, "{}", id.angle());
    assert!(id.translation.iter().all(|t| t.abs() < 1e-6));

    let c = pts
        .iter()
        .fold([0.0; 3], |a, p| [a[0] + p[0] / 8.0, a[1] + p[1] / 8.0, a[2] + p[2] / 8.0]);
    let rot = armature::math::euler_xyz([0.0, 10f64.to_radians(), 0.0]);
    let turned: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| {
            let q = rot * (nalgebra::Vector3::from(*p) - nalgebra::Vector3::from(c)) + nalgebra::Vector3::from(c);
            [q.x, q.y, q.z]
        })
        .collect();
    let px: Vec<[f64; 2]> = turned.iter().map(|p| cam.project(*p).unwrap()).collect();
    let a = align_expression_keypoints(&pts, &px, &cam).expect("alignment");
    let err = armature::math::rotation_angle_between(&a.matrix(), &rot).to_degrees();
    println!("alignment rotation error {err:.4} deg");
    assert!(err < 1.0);

    assert!(align_expression_keypoints(&pts[..3], &px[..3], &cam).is_none());
}

#[test]
fn shape_and_skeleton_ablation_ordering() {
    let m = model();
    let r = decoupling_ablation(&m, 3, 5).unwrap();
    println!("decoupling ablation: {r:?}");
    assert!(r.both_mm < r.skeleton_only_mm);
    assert!(r.skeleton_only_mm < r.shape_only_mm);
}
