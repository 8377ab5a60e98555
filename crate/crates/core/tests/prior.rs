use armature::prior::*;
use armature::rig::make_desk_rig;
use armature::shape::eval_basis;
use armature::skinning::random_poses;
use nalgebra::DMatrix;

#[test]
fn toy_vae_reconstructs_training_poses_within_10_degrees() {
    let rig = make_desk_rig(0, 17, 12).unwrap();
    let poses = synthetic_pose_corpus(&rig, 1024, 8, 0);
    let cfg = VaeConfig {
        epochs: 60,
        batch: 128,
        ..Default::default()
    };
    let (vae, log) = train_pose_vae(&poses, &rig.body_joints(), &cfg).unwrap();
    assert_eq!(log.len(), 60);
    let deg = vae_reconstruction_angle(&vae, &poses[..256]).to_degrees();
    println!("toy VAE reconstruction: {deg:.2} deg");
    assert!(deg < 10.0);
}

#[test]
fn vae_defaults() {
    let c = VaeConfig::default();
    assert_eq!((c.latent_dim, c.epochs, c.batch), (32, 40, 512));
    assert_eq!(c.lr, 5e-3);
}

#[test]
fn vae_needs_latent_dim_samples() {
    let rig = make_desk_rig(0, 17, 12).unwrap();
    let poses = synthetic_pose_corpus(&rig, 16, 4, 0);
    assert!(train_pose_vae(&poses, &rig.body_joints(), &VaeConfig::default()).is_err());
}

#[test]
fn hand_pca_residual_matches_eigen_oracle() {
    let rig = make_desk_rig(0, 17, 12).unwrap();
    let poses = random_poses(&rig, 300, 7);
    let hands = &rig.hand_joints;
    let data: Vec<Vec<f64>> = poses.iter().map(|p| hand_features(p, hands)).collect();
    let d = data[0].len();
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| data.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in &data {
        let c = nalgebra::DVector::from_iterator(d, x.iter().zip(&mean).map(|(a, b)| a - b));
        cov += &c * c.transpose() / n;
    }
    let mut ev: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    for k in [1, 3, 6] {
        let basis = fit_hand_pca(&poses, hands, k).unwrap();
        let mse: f64 = data
            .iter()
            .map(|x| {
                let r = eval_basis(&basis, &basis.project(x)).unwrap();
                r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / n;
        let oracle: f64 = ev[k..].iter().sum();
        assert!((mse - oracle).abs() < 1e-9 * oracle.max(1.0), "k={k}: {mse} vs {oracle}");
    }
}

#[test]
fn hand_pca_needs_samples() {
    let rig = make_desk_rig(0, 17, 12).unwrap();
    let poses = random_poses(&rig, 2, 7);
    assert!(fit_hand_pca(&poses, &rig.hand_joints, 4).is_err());
}
