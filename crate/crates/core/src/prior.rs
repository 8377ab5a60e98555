//! Pose priors: a VAE over body-joint 6D rotations and a PCA subspace over
//! hand-joint 6D residuals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::correctives::{local_rotations, rotation_residual};
use crate::error::{Error, Result};
use crate::kinematics::PoseState;
use crate::math::{euler_xyz, ROT6D_IDENTITY};
use crate::nn::{bind_layers, init_layers, layer_tensors_mut, mlp, Dense};
use crate::optim::Adam;
use crate::shape::{pca, BasisDomain, LinearBasis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub kl_weight: f64,
    pub recon_weight: f64,
    pub angle_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 32,
            hidden: 128,
            epochs: 40,
            batch: 512,
            lr: 5e-3,
            seed: 0,
            kl_weight: 1e-3,
            recon_weight: 1.0,
            angle_weight: 1.0,
        }
    }
}

/// Encoder `6n -> h -> h -> 2L` (mean, log-variance) and decoder
/// `L -> h -> h -> 6n`; decoded 6D values are offsets from the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseVae {
    pub joints: Vec<usize>,
    pub latent_dim: usize,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

pub struct BoundVae {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
    pub angle: f64,
}

impl PoseVae {
    pub fn new(joints: Vec<usize>, latent_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6 * joints.len();
        let encoder = init_layers(&mut rng, &[n, hidden, hidden, 2 * latent_dim]);
        let mut decoder = init_layers(&mut rng, &[latent_dim, hidden, hidden, n]);
        // start decoding near the identity
        decoder.last_mut().unwrap().w.data.iter_mut().for_each(|w| *w *= 0.1);
        PoseVae {
            joints,
            latent_dim,
            encoder,
            decoder,
        }
    }

    pub fn input_dim(&self) -> usize {
        6 * self.joints.len()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundVae {
        BoundVae {
            encoder: bind_layers(g, &self.encoder, trainable),
            decoder: bind_layers(g, &self.decoder, trainable),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = layer_tensors_mut(&mut self.encoder);
        out.extend(layer_tensors_mut(&mut self.decoder));
        out
    }

    /// `(mean, log-variance)`, each `B x L`, from `B x 6n` residuals.
    pub fn encode_graph(&self, g: &mut Graph, b: &BoundVae, x: Var) -> (Var, Var) {
        let h = mlp(g, &b.encoder, x);
        let mu = g.slice_cols(h, 0, self.latent_dim);
        let logvar = g.slice_cols(h, self.latent_dim, self.latent_dim);
        (mu, logvar)
    }

    /// Rotation matrices `B x 9n` for latents `B x L`.
    pub fn decode_graph(&self, g: &mut Graph, b: &BoundVae, z: Var) -> Var {
        let out = mlp(g, &b.decoder, z);
        let batch = g.shape(out).0;
        let id: Vec<f64> = (0..batch * self.joints.len()).flat_map(|_| ROT6D_IDENTITY).collect();
        let six = g.add_const(out, &id);
        g.gram_schmidt_6d(six)
    }

    /// Body-joint residual features of a pose.
    pub fn features(&self, pose: &PoseState) -> Vec<f64> {
        self.joints
            .iter()
            .flat_map(|&j| rotation_residual(&euler_xyz(pose.joint_angles[j])))
            .collect()
    }

    /// Posterior mean of a pose.
    pub fn encode(&self, pose: &PoseState) -> Vec<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(1, self.input_dim(), self.features(pose));
        let (mu, _) = self.encode_graph(&mut g, &b, x);
        g.value(mu).to_vec()
    }

    /// Row-major body-joint rotations (`9n`).
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::dim("pose latent", self.latent_dim, z.len()));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(1, self.latent_dim, z.to_vec());
        let r = self.decode_graph(&mut g, &b, zv);
        Ok(g.value(r).to_vec())
    }
}

fn body_rotations(poses: &[PoseState], joints: &[usize]) -> Vec<f64> {
    poses
        .iter()
        .flat_map(|p| {
            let all = local_rotations(p);
            joints.iter().flat_map(move |&j| all[9 * j..9 * j + 9].to_vec()).collect::<Vec<_>>()
        })
        .collect()
}

/// Trains with KL, rotation-matrix reconstruction and geodesic-angle
/// losses. Returns the model and one record per epoch.
pub fn train_pose_vae(poses: &[PoseState], joints: &[usize], cfg: &VaeConfig) -> Result<(PoseVae, Vec<VaeEpoch>)> {
    if poses.len() < cfg.latent_dim {
        return Err(Error::Input(format!(
            "pose VAE needs at least {} poses, got {}",
            cfg.latent_dim,
            poses.len()
        )));
    }
    if joints.is_empty() {
        return Err(Error::Input("pose VAE needs at least one joint".into()));
    }
    let mut vae = PoseVae::new(joints.to_vec(), cfg.latent_dim, cfg.hidden, cfg.seed);
    let feats: Vec<Vec<f64>> = poses.iter().map(|p| vae.features(p)).collect();
    let rots = body_rotations(poses, joints);
    let n = joints.len();
    let sizes: Vec<usize> = vae.tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let lrs = vec![cfg.lr; sizes.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..poses.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        crate::shape::shuffle(&mut order, &mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let b = chunk.len();
            let mut g = Graph::new();
            let bound = vae.bind(&mut g, true);
            let x: Vec<f64> = chunk.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let target: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| rots[i * 9 * n..(i + 1) * 9 * n].iter().copied())
                .collect();
            let xv = g.constant(b, 6 * n, x);
            let tv = g.constant(b, 9 * n, target);
            let (mu, logvar) = vae.encode_graph(&mut g, &bound, xv);
            let eps: Vec<f64> = (0..b * cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = g.constant(b, cfg.latent_dim, eps);
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, eps);
            let z = g.add(mu, noise);
            let r = vae.decode_graph(&mut g, &bound, z);
            // KL(q || N(0, I)) = 0.5 sum(mu^2 + exp(lv) - 1 - lv)
            let mu2 = g.sum_sq(mu);
            let var = g.exp(logvar);
            let sv = g.sum(var);
            let sl = g.sum(logvar);
            let kl_sum = g.linear_combination(&[(mu2, 0.5), (sv, 0.5), (sl, -0.5)]);
            let kl = g.add_const(kl_sum, &[-0.5 * (b * cfg.latent_dim) as f64]);
            let kl = g.scale(kl, 1.0 / b as f64);
            let d = g.sub(r, tv);
            let recon = g.sum_sq(d);
            let recon = g.scale(recon, 1.0 / (b * n) as f64);
            let ang = g.rotation_angles(r, tv);
            let ang = g.mean(ang);
            let loss = g.linear_combination(&[(kl, cfg.kl_weight), (recon, cfg.recon_weight), (ang, cfg.angle_weight)]);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("pose VAE loss at epoch {epoch}")));
            }
            let mut grads = g.backward(loss);
            let gs: Vec<Vec<f64>> = {
                let mut vars = Vec::new();
                for (w, bb) in bound.encoder.iter().chain(&bound.decoder) {
                    vars.push(*w);
                    vars.push(*bb);
                }
                vars.into_iter().map(|v| grads.take(v)).collect()
            };
            sums[0] += lv;
            sums[1] += g.scalar_value(kl);
            sums[2] += g.scalar_value(recon);
            sums[3] += g.scalar_value(ang);
            batches += 1.0;
            adam.step(&mut vae.tensors_mut(), &gs, &lrs);
        }
        log.push(VaeEpoch {
            epoch,
            loss: sums[0] / batches,
            kl: sums[1] / batches,
            recon: sums[2] / batches,
            angle: sums[3] / batches,
        });
    }
    Ok((vae, log))
}

/// Mean geodesic angle (radians) between poses and their posterior-mean
/// reconstructions.
pub fn vae_reconstruction_angle(vae: &PoseVae, poses: &[PoseState]) -> f64 {
    let n = vae.joints.len();
    let rots = body_rotations(poses, &vae.joints);
    let mut total = 0.0;
    for (i, p) in poses.iter().enumerate() {
        let r = vae.decode(&vae.encode(p)).expect("latent length");
        for k in 0..n {
            let a = nalgebra::Matrix3::from_row_slice(&r[9 * k..9 * k + 9]);
            let b = nalgebra::Matrix3::from_row_slice(&rots[i * 9 * n + 9 * k..i * 9 * n + 9 * k + 9]);
            total += crate::math::rotation_angle_between(&a, &b);
        }
    }
    total / (poses.len() * n) as f64
}

/// Seeded pose corpus with low-dimensional structure: each pose mixes
/// `primitives` shared joint-angle patterns with Gaussian weights, plus small
/// independent noise. Root rotation and translation stay zero.
pub fn synthetic_pose_corpus(rig: &crate::rig::Rig, n: usize, primitives: usize, seed: u64) -> Vec<PoseState> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = rig.joint_count();
    let basis: Vec<Vec<[f64; 3]>> = (0..primitives)
        .map(|_| {
            (0..j)
                .map(|k| {
                    if k == 0 {
                        [0.0; 3]
                    } else {
                        std::array::from_fn(|_| rng.random_range(-0.35..0.35))
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|_| {
            let mut p = PoseState::zero(rig);
            let w: Vec<f64> = (0..primitives).map(|_| StandardNormal.sample(&mut rng)).collect();
            for k in 1..j {
                for a in 0..3 {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    p.joint_angles[k][a] = basis.iter().zip(&w).map(|(b, wi)| wi * b[k][a]).sum::<f64>() + 0.02 * noise;
                }
            }
            p
        })
        .collect()
}

/// Hand residual features of a pose.
pub fn hand_features(pose: &PoseState, hand_joints: &[usize]) -> Vec<f64> {
    hand_joints
        .iter()
        .flat_map(|&j| rotation_residual(&euler_xyz(pose.joint_angles[j])))
        .collect()
}

/// Centered PCA over concatenated hand-joint 6D residuals.
pub fn fit_hand_pca(poses: &[PoseState], hand_joints: &[usize], n_comp: usize) -> Result<LinearBasis> {
    if poses.len() < n_comp || poses.is_empty() {
        return Err(Error::Input(format!(
            "hand PCA needs at least {} poses, got {}",
            n_comp.max(1),
            poses.len()
        )));
    }
    let data: Vec<Vec<f64>> = poses.iter().map(|p| hand_features(p, hand_joints)).collect();
    let p = pca(&data, n_comp, true)?;
    LinearBasis::new(BasisDomain::Hand, p.mean, p.components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::rig::make_desk_rig;
    use crate::skinning::random_poses;

    #[test]
    fn zero_latent_decodes_to_rotations() {
        let vae = PoseVae::new(vec![1, 2, 3], 8, 16, 0);
        let r = vae.decode(&[0.0; 8]).unwrap();
        for k in 0..3 {
            let m = nalgebra::Matrix3::from_row_slice(&r[9 * k..9 * k + 9]);
            assert!((m.transpose() * m - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
        }
        assert!(vae.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn decoder_gradient_matches_fd() {
        let vae = PoseVae::new(vec![1, 2], 4, 8, 3);
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();
        let f = |z: &[f64]| {
            let mut g = Graph::new();
            let b = vae.bind(&mut g, false);
            let zv = g.param(1, 4, z.to_vec());
            let r = vae.decode_graph(&mut g, &b, zv);
            let wv = g.constant(1, 18, w.clone());
            let p = g.mul(r, wv);
            let s = g.sum(p);
            (g.scalar_value(s), g.backward(s).get(zv))
        };
        assert!(gradient_check(&f, &[0.3, -0.2, 0.5, 0.1], 1e-5) < 1e-6);
    }

    #[test]
    fn toy_training_reduces_angle_error() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let poses = random_poses(&rig, 256, 1);
        let joints = rig.body_joints();
        let cfg = VaeConfig {
            latent_dim: 8,
            hidden: 32,
            epochs: 5,
            batch: 64,
            ..Default::default()
        };
        let untrained = PoseVae::new(joints.clone(), 8, 32, cfg.seed);
        let before = vae_reconstruction_angle(&untrained, &poses[..32]);
        let (vae, log) = train_pose_vae(&poses, &joints, &cfg).unwrap();
        assert_eq!(log.len(), 5);
        let after = vae_reconstruction_angle(&vae, &poses[..32]);
        assert!(after < before, "{after} vs {before}");
        assert!(train_pose_vae(&poses[..4], &joints, &cfg).is_err());
    }

    #[test]
    fn hand_pca_subspace_and_mean() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let mut poses = Vec::new();
        for k in 0..20 {
            let mut p = PoseState::zero(&rig);
            let t = k as f64 * 0.05;
            for &h in &rig.hand_joints {
                p.joint_angles[h] = [t, 0.0, 0.0];
            }
            poses.push(p);
        }
        let basis = fit_hand_pca(&poses, &rig.hand_joints, 3).unwrap();
        let data: Vec<Vec<f64>> = poses.iter().map(|p| hand_features(p, &rig.hand_joints)).collect();
        let mean: Vec<f64> = (0..basis.dim()).map(|i| data.iter().map(|r| r[i]).sum::<f64>() / 20.0).collect();
        for (a, b) in basis.mean.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fit_hand_pca(&poses[..2], &rig.hand_joints, 3).is_err());
    }
}
