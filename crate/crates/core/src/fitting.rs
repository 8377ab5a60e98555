//! Staged robust fitting of model parameters to keypoints and scans.
//!
//! The body pose lives in the pose-prior latent space (or as direct 6D
//! residuals without a prior), hands in the hand PCA space. Data terms use
//! the Geman-McClure penalty; every stage runs L-BFGS with backtracking over
//! the parameter blocks it frees and leaves the rest untouched.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Camera, FkLayout, Graph, LandmarkSpec, Var, PROJECT_EPS};
use crate::error::{Error, Result};
use crate::math::{euler_from_matrix, euler_xyz, near_gimbal, ROT6D_IDENTITY};
use crate::model::{skin_slots, BodyModel, ModelParams};
use crate::optim::{lbfgs, LbfgsOptions};

pub const DEFAULT_SIGMA_3D: f64 = 0.05;
pub const DEFAULT_SIGMA_2D: f64 = 10.0;
/// Euler middle angles within this many radians of +-pi/2 are reported.
pub const GIMBAL_MARGIN: f64 = 1e-2;

/// Geman-McClure penalty `r^2 / (sigma^2 + r^2)`.
pub fn robust_loss(r: f64, sigma: f64) -> f64 {
    r * r / (sigma * sigma + r * r)
}

pub fn robust_loss_derivative(r: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    2.0 * r * s2 / ((s2 + r * r) * (s2 + r * r))
}

fn one() -> f64 {
    1.0
}

/// A 3D keypoint addressed by joint index or by joint/landmark name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint3d {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub position: [f64; 3],
    #[serde(default = "one")]
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint2d {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub pixel: [f64; 2],
    #[serde(default = "one")]
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Observation {
    pub keypoints3d: Vec<Keypoint3d>,
    pub keypoints2d: Vec<Keypoint2d>,
    pub camera: Option<Camera>,
    pub target_vertices: Option<Vec<[f64; 3]>>,
}

impl Observation {
    pub fn check(&self, model: &BodyModel) -> Result<()> {
        if self.keypoints3d.is_empty() && self.keypoints2d.is_empty() && self.target_vertices.is_none() {
            return Err(Error::Input("observation has no keypoints and no target vertices".into()));
        }
        let confs = self
            .keypoints3d
            .iter()
            .map(|k| k.confidence)
            .chain(self.keypoints2d.iter().map(|k| k.confidence));
        for c in confs {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Input(format!("keypoint confidence {c} must be finite and >= 0")));
            }
        }
        let finite = self.keypoints3d.iter().all(|k| k.position.iter().all(|x| x.is_finite()))
            && self.keypoints2d.iter().all(|k| k.pixel.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Input("keypoint coordinates must be finite".into()));
        }
        if !self.keypoints2d.is_empty() && self.camera.is_none() {
            return Err(Error::Input("2D keypoints need a camera".into()));
        }
        if let Some(t) = &self.target_vertices {
            if t.len() != model.rig.vertex_count() {
                return Err(Error::dim("target_vertices", model.rig.vertex_count(), t.len()));
            }
            if t.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Input("target vertices must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Where a keypoint lives on the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeypointTarget {
    /// Joint center or skeletal landmark.
    Point(LandmarkSpec),
    /// Surface landmark vertex.
    Surface(usize),
}

pub fn resolve_keypoint(model: &BodyModel, joint: Option<usize>, name: Option<&str>) -> Result<KeypointTarget> {
    let rig = &model.rig;
    match (joint, name) {
        (Some(j), _) => {
            if j >= rig.joint_count() {
                return Err(Error::Input(format!("keypoint joint {j} out of range (J = {})", rig.joint_count())));
            }
            Ok(KeypointTarget::Point(LandmarkSpec {
                joint: j,
                offset: [0.0; 3],
            }))
        }
        (None, Some(n)) => {
            if let Some(j) = rig.tree.index_of(n) {
                return Ok(KeypointTarget::Point(LandmarkSpec {
                    joint: j,
                    offset: [0.0; 3],
                }));
            }
            if let Some(l) = rig.landmarks.skeletal.iter().find(|l| l.name == n) {
                return Ok(KeypointTarget::Point(LandmarkSpec {
                    joint: l.joint,
                    offset: l.offset,
                }));
            }
            if let Some(l) = rig.landmarks.surface.iter().find(|l| l.name == n) {
                return Ok(KeypointTarget::Surface(l.vertex));
            }
            Err(Error::Input(format!("unknown keypoint name `{n}`")))
        }
        (None, None) => Err(Error::Input("keypoint needs a joint index or a name".into())),
    }
}

/// Parameter blocks a stage can free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Root,
    Body,
    Hand,
    BetaS,
    BetaF,
    BetaK,
}

pub const ALL_BLOCKS: [Block; 6] = [Block::Root, Block::Body, Block::Hand, Block::BetaS, Block::BetaF, Block::BetaK];

/// Loss-term slots. `silhouette` and `depth` are reserved and contribute
/// nothing until image-space predictors exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Keypoints on joint centers and skeletal landmarks.
    Joints,
    /// Keypoints on surface landmarks.
    Landmarks,
    /// Dense vertex targets.
    Vertices,
    Silhouette,
    Depth,
}

/// Data terms with an implementation.
pub const ALL_TERMS: [Term; 3] = [Term::Joints, Term::Landmarks, Term::Vertices];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitStage {
    pub name: String,
    pub free: Vec<Block>,
    pub terms: Vec<Term>,
    pub iterations: usize,
    /// The stage is skipped unless every listed term has data.
    #[serde(default)]
    pub requires: Vec<Term>,
    /// Multiplies every prior weight during this stage.
    #[serde(default = "one")]
    pub prior_scale: f64,
    /// Multiplies the robust scales; values above 1 widen the basin of the
    /// penalty for coarse early stages.
    #[serde(default = "one")]
    pub sigma_scale: f64,
}

impl FitStage {
    pub fn new(name: &str, free: &[Block], terms: &[Term], iterations: usize) -> Self {
        FitStage {
            name: name.into(),
            free: free.to_vec(),
            terms: terms.to_vec(),
            iterations,
            requires: vec![],
            prior_scale: 1.0,
            sigma_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorWeights {
    pub body: f64,
    pub hand: f64,
    pub beta_s: f64,
    pub beta_f: f64,
    pub beta_k: f64,
}

impl Default for PriorWeights {
    fn default() -> Self {
        PriorWeights {
            body: 1e-4,
            hand: 1e-4,
            beta_s: 1e-4,
            beta_f: 1e-4,
            beta_k: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub stages: Vec<FitStage>,
    pub sigma_3d: f64,
    pub sigma_2d: f64,
    pub priors: PriorWeights,
    pub landmark_weight: f64,
    /// Weight of the mean per-vertex penalty.
    pub vertex_weight: f64,
    /// Relative objective decrease that ends a stage.
    pub tolerance: f64,
    /// Rigidly pre-align projected face landmarks before fitting them.
    pub align_expression: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stages: vec![
                FitStage {
                    sigma_scale: 10.0,
                    ..FitStage::new("body_coarse", &[Block::Root, Block::Body, Block::BetaK], &[Term::Joints], 200)
                },
                FitStage::new("body", &[Block::Root, Block::Body, Block::BetaK], &[Term::Joints], 500),
                FitStage::new("detail", &[Block::Hand, Block::BetaF], &[Term::Joints, Term::Landmarks], 100),
                FitStage {
                    requires: vec![Term::Vertices],
                    ..FitStage::new("surface", &[Block::BetaS, Block::BetaF], &ALL_TERMS, 150)
                },
                FitStage::new("refine", &ALL_BLOCKS, &ALL_TERMS, 2000),
            ],
            sigma_3d: DEFAULT_SIGMA_3D,
            sigma_2d: DEFAULT_SIGMA_2D,
            priors: PriorWeights::default(),
            landmark_weight: 1.0,
            vertex_weight: 10.0,
            tolerance: 1e-12,
            align_expression: true,
        }
    }
}

impl FitConfig {
    /// The same schedule with `blocks` never freed; stages left without
    /// free blocks are dropped.
    pub fn without_blocks(&self, blocks: &[Block]) -> Self {
        let mut cfg = self.clone();
        for s in &mut cfg.stages {
            s.free.retain(|b| !blocks.contains(b));
        }
        cfg.stages.retain(|s| !s.free.is_empty());
        cfg
    }

    pub fn check(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Input("fit config has no stages".into()));
        }
        for s in &self.stages {
            if s.free.is_empty() {
                return Err(Error::Input(format!("stage `{}` frees no parameter block", s.name)));
            }
            if s.terms.is_empty() {
                return Err(Error::Input(format!("stage `{}` has no loss terms", s.name)));
            }
            if !(s.prior_scale.is_finite() && s.prior_scale >= 0.0) {
                return Err(Error::Input(format!("stage `{}` prior_scale must be >= 0", s.name)));
            }
            if !(s.sigma_scale.is_finite() && s.sigma_scale > 0.0) {
                return Err(Error::Input(format!("stage `{}` sigma_scale must be > 0", s.name)));
            }
        }
        let p = &self.priors;
        let weights = [
            p.body,
            p.hand,
            p.beta_s,
            p.beta_f,
            p.beta_k,
            self.landmark_weight,
            self.vertex_weight,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Input("fit weights must be finite and >= 0".into()));
        }
        if !(self.sigma_3d > 0.0 && self.sigma_2d > 0.0) {
            return Err(Error::Input("robust scales must be > 0".into()));
        }
        Ok(())
    }
}

/// Optimization variables of a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParams {
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
    /// Pose-prior latent, or 6D residuals of the body joints without a prior.
    pub body: Vec<f64>,
    /// Hand PCA coefficients, or 6D residuals of the hand joints.
    pub hand: Vec<f64>,
    pub beta_s: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub beta_k: Vec<f64>,
}

impl FitParams {
    pub fn zeros(model: &BodyModel) -> Self {
        let l = Layout::new(model);
        FitParams {
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            body: vec![0.0; l.body_dim],
            hand: vec![0.0; l.hand_dim],
            beta_s: vec![0.0; model.surface.n_comp()],
            beta_f: vec![0.0; model.expression.n_comp()],
            beta_k: vec![0.0; model.skeletal.n_comp()],
        }
    }

    /// Gaussian draw with standard deviation `scale` on the pose and shape
    /// blocks (root rotation `scale / 2`, translation zero).
    pub fn sample(model: &BodyModel, rng: &mut impl Rng, scale: f64) -> Self {
        let mut p = FitParams::zeros(model);
        let mut draw = |v: &mut [f64], s: f64| {
            for x in v {
                *x = s * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let mut rr = [0.0; 3];
        draw(&mut rr, 0.5 * scale);
        p.root_rotation = rr;
        let body_scale = if model.pose_prior.is_some() { scale } else { 0.3 * scale };
        draw(&mut p.body, body_scale);
        draw(&mut p.hand, 0.3 * scale);
        draw(&mut p.beta_s, scale);
        draw(&mut p.beta_f, scale);
        draw(&mut p.beta_k, scale);
        p
    }

    pub fn block(&self, b: Block) -> Vec<f64> {
        match b {
            Block::Root => self.root_rotation.iter().chain(&self.root_translation).copied().collect(),
            Block::Body => self.body.clone(),
            Block::Hand => self.hand.clone(),
            Block::BetaS => self.beta_s.clone(),
            Block::BetaF => self.beta_f.clone(),
            Block::BetaK => self.beta_k.clone(),
        }
    }

    pub fn set_block(&mut self, b: Block, v: &[f64]) {
        match b {
            Block::Root => {
                self.root_rotation.copy_from_slice(&v[..3]);
                self.root_translation.copy_from_slice(&v[3..6]);
            }
            Block::Body => self.body.copy_from_slice(v),
            Block::Hand => self.hand.copy_from_slice(v),
            Block::BetaS => self.beta_s.copy_from_slice(v),
            Block::BetaF => self.beta_f.copy_from_slice(v),
            Block::BetaK => self.beta_k.copy_from_slice(v),
        }
    }

    pub fn check(&self, model: &BodyModel) -> Result<()> {
        let z = FitParams::zeros(model);
        for b in ALL_BLOCKS {
            let (want, got) = (z.block(b).len(), self.block(b).len());
            if want != got {
                return Err(Error::dim(format!("{b:?} parameters"), want, got));
            }
            if self.block(b).iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("{b:?} parameters must be finite")));
            }
        }
        Ok(())
    }

    /// Equivalent direct model parameters (per-joint Euler angles).
    pub fn to_model_params(&self, model: &BodyModel) -> Result<ModelParams> {
        let rot = local_rotation_matrices(model, self)?;
        let theta = rot.iter().flat_map(euler_from_matrix).collect();
        Ok(ModelParams {
            beta_s: self.beta_s.clone(),
            beta_f: self.beta_f.clone(),
            beta_k: self.beta_k.clone(),
            attributes: Default::default(),
            theta,
            root_rotation: self.root_rotation,
            root_translation: self.root_translation,
            apply_correctives: true,
        })
    }
}

/// Local joint rotations produced by the pose blocks.
pub fn local_rotation_matrices(model: &BodyModel, params: &FitParams) -> Result<Vec<Matrix3<f64>>> {
    params.check(model)?;
    let layout = Layout::new(model);
    let mut g = Graph::new();
    let vars = layout.pose_vars(&mut g, params);
    let rot = layout.rotations(&mut g, model, &vars);
    Ok(g.value(rot).chunks_exact(9).map(Matrix3::from_row_slice).collect())
}

/// Per-block sizes and joint routing.
struct Layout {
    body_joints: Vec<usize>,
    hand_joints: Vec<usize>,
    body_dim: usize,
    hand_dim: usize,
}

struct PoseVars {
    rr: Var,
    rt: Var,
    body: Option<Var>,
    hand: Option<Var>,
}

impl Layout {
    fn new(model: &BodyModel) -> Self {
        let hand_joints = model.rig.hand_joints.clone();
        let body_joints = match &model.pose_prior {
            Some(v) => v.joints.clone(),
            None => model.rig.body_joints(),
        };
        let body_dim = match &model.pose_prior {
            Some(v) => v.latent_dim,
            None => 6 * body_joints.len(),
        };
        let hand_dim = match &model.hand_pca {
            Some(h) => h.n_comp(),
            None => 6 * hand_joints.len(),
        };
        Layout {
            body_joints,
            hand_joints,
            body_dim,
            hand_dim,
        }
    }

    fn pose_vars(&self, g: &mut Graph, p: &FitParams) -> PoseVars {
        let rr = g.param(1, 3, p.root_rotation.to_vec());
        let rt = g.param(1, 3, p.root_translation.to_vec());
        let body = (!p.body.is_empty()).then(|| g.param(1, p.body.len(), p.body.clone()));
        let hand = (!p.hand.is_empty()).then(|| g.param(1, p.hand.len(), p.hand.clone()));
        PoseVars { rr, rt, body, hand }
    }

    /// Local rotations `1 x 9J`; the root joint and uncovered joints stay at
    /// the identity.
    fn rotations(&self, g: &mut Graph, model: &BodyModel, v: &PoseVars) -> Var {
        let j_count = model.rig.joint_count();
        let body_rot = v.body.map(|z| match &model.pose_prior {
            Some(vae) => {
                let b = vae.bind(g, false);
                vae.decode_graph(g, &b, z)
            }
            None => {
                let id: Vec<f64> = (0..self.body_joints.len()).flat_map(|_| ROT6D_IDENTITY).collect();
                let six = g.add_const(z, &id);
                g.gram_schmidt_6d(six)
            }
        });
        let hand_rot = if self.hand_joints.is_empty() {
            None
        } else {
            let id: Vec<f64> = (0..self.hand_joints.len()).flat_map(|_| ROT6D_IDENTITY).collect();
            let six = match (&model.hand_pca, v.hand) {
                (Some(pca), Some(c)) => {
                    let comps = g.constant(pca.n_comp(), pca.dim(), pca.components.data.clone());
                    let x = g.matmul(c, comps);
                    let off: Vec<f64> = pca.mean.iter().zip(&id).map(|(m, i)| m + i).collect();
                    g.add_const(x, &off)
                }
                (Some(pca), None) => {
                    let off: Vec<f64> = pca.mean.iter().zip(&id).map(|(m, i)| m + i).collect();
                    g.constant(1, off.len(), off)
                }
                (None, Some(x)) => g.add_const(x, &id),
                (None, None) => g.constant(1, id.len(), id),
            };
            Some(g.gram_schmidt_6d(six))
        };
        let mut inputs = Vec::new();
        let body_slot = body_rot.map(|r| {
            inputs.push(r);
            inputs.len() - 1
        });
        let hand_slot = hand_rot.map(|r| {
            inputs.push(r);
            inputs.len() - 1
        });
        let identity = [1., 0., 0., 0., 1., 0., 0., 0., 1.];
        let mut map = Vec::with_capacity(9 * j_count);
        let mut fill = Vec::with_capacity(9 * j_count);
        for j in 0..j_count {
            let src = if let (Some(k), Some(s)) = (self.hand_joints.iter().position(|&h| h == j), hand_slot) {
                Some((s, k))
            } else if let (Some(k), Some(s)) = (self.body_joints.iter().position(|&b| b == j), body_slot) {
                Some((s, k))
            } else {
                None
            };
            for e in 0..9 {
                map.push(src.map(|(s, k)| (s, 9 * k + e)));
                fill.push(identity[e]);
            }
        }
        if inputs.is_empty() {
            return g.constant(1, 9 * j_count, fill);
        }
        g.gather_cols(&inputs, &map, &fill)
    }
}

/// Rigid transform `p -> R (p - c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [1., 0., 0., 0., 1., 0., 0., 0., 1.],
            translation: [0.0; 3],
            center: [0.0; 3],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let c = Vector3::from(self.center);
        let q = self.matrix() * (Vector3::from(p) - c) + c + Vector3::from(self.translation);
        [q.x, q.y, q.z]
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        crate::math::rotation_angle_between(&self.matrix(), &Matrix3::identity())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Procrustes {
    pub transform: RigidTransform,
    pub aligned: Vec<[f64; 3]>,
    pub rms: f64,
    pub mean: f64,
}

/// Least-squares rigid alignment of `source` onto `target` (no scale).
pub fn procrustes_align(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<Procrustes> {
    if source.len() != target.len() {
        return Err(Error::dim("procrustes target", source.len(), target.len()));
    }
    if source.len() < 3 {
        return Err(Error::Input(format!("procrustes needs >= 3 points, got {}", source.len())));
    }
    let n = source.len() as f64;
    let centroid = |pts: &[[f64; 3]]| pts.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) / n;
    let (cs, ct) = (centroid(source), centroid(target));
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let a = Vector3::from(*s) - cs;
        h += a * (Vector3::from(*t) - ct).transpose();
        spread += a * a.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Input("procrustes points are collinear or coincident".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = ct - r * cs;
    let transform = RigidTransform {
        rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
        translation: [t.x, t.y, t.z],
        center: [0.0; 3],
    };
    let aligned: Vec<[f64; 3]> = source.iter().map(|p| transform.apply(*p)).collect();
    let errs: Vec<f64> = aligned.iter().zip(target).map(|(a, b)| crate::mesh::dist(*a, *b)).collect();
    Ok(Procrustes {
        transform,
        rms: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errs.iter().sum::<f64>() / n,
        aligned,
    })
}

/// Rigid pre-alignment of 3D face keypoints to their 2D detections: the
/// translation is initialized under weak perspective, then rotation (about
/// the keypoint centroid) and translation minimize the reprojection error.
/// `None` with a warning when fewer than four usable points exist.
pub fn align_expression_keypoints(face3d: &[[f64; 3]], face2d: &[[f64; 2]], camera: &Camera) -> Option<RigidTransform> {
    let pairs: Vec<([f64; 3], [f64; 2])> = face3d
        .iter()
        .zip(face2d)
        .filter(|(p, _)| camera.to_camera(**p)[2] > PROJECT_EPS)
        .map(|(a, b)| (*a, *b))
        .collect();
    if pairs.len() < 4 || face3d.len() != face2d.len() {
        log::warn!("expression alignment skipped: {} usable face keypoints, need 4", pairs.len());
        return None;
    }
    let n = pairs.len();
    let c = pairs.iter().fold(Vector3::zeros(), |a, (p, _)| a + Vector3::from(*p)) / n as f64;
    let center = [c.x, c.y, c.z];
    let centered: Vec<f64> = pairs.iter().flat_map(|(p, _)| [p[0] - c.x, p[1] - c.y, p[2] - c.z]).collect();
    let target: Vec<f64> = pairs.iter().flat_map(|(_, q)| *q).collect();

    // weak perspective: scale ratio gives depth, centroid ray gives the rest
    let cc = camera.to_camera(center);
    let uv_mean = [
        pairs.iter().map(|(_, q)| q[0]).sum::<f64>() / n as f64,
        pairs.iter().map(|(_, q)| q[1]).sum::<f64>() / n as f64,
    ];
    let proj: Vec<[f64; 2]> = pairs.iter().map(|(p, _)| camera.project(*p).unwrap()).collect();
    let spread = |pts: &mut dyn Iterator<Item = [f64; 2]>, m: [f64; 2]| {
        pts.map(|q| ((q[0] - m[0]) / camera.fx).powi(2) + ((q[1] - m[1]) / camera.fy).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let pm = [
        proj.iter().map(|q| q[0]).sum::<f64>() / n as f64,
        proj.iter().map(|q| q[1]).sum::<f64>() / n as f64,
    ];
    let s_model = spread(&mut proj.iter().copied(), pm);
    let s_target = spread(&mut pairs.iter().map(|(_, q)| *q), uv_mean);
    let depth = if s_model > 0.0 && s_target > 0.0 {
        cc[2] * s_model / s_target
    } else {
        cc[2]
    };
    let want = [
        (uv_mean[0] - camera.cx) / camera.fx * depth,
        (uv_mean[1] - camera.cy) / camera.fy * depth,
        depth,
    ];
    let r = Matrix3::from_row_slice(&camera.rotation);
    let dt = r.transpose() * (Vector3::from(want) - Vector3::from(cc));
    let x0 = [0.0, 0.0, 0.0, dt.x, dt.y, dt.z];

    let scale = 1.0 / n as f64;
    let tile: Vec<f64> = (0..n).flat_map(|_| center).collect();
    let neg_target: Vec<f64> = target.iter().map(|x| -x).collect();
    let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let e = g.param(1, 3, x[..3].to_vec());
        let t = g.param(1, 3, x[3..].to_vec());
        let rot = g.euler_to_rot(e);
        let rot = g.reshape(rot, 3, 3);
        let pts = g.constant(n, 3, centered.clone());
        let moved = g.matmul_nt(pts, rot);
        let moved = g.add_row(moved, t);
        let moved = g.reshape(moved, 1, 3 * n);
        let moved = g.add_const(moved, &tile);
        let uv = g.project(moved, camera);
        let diff = g.add_const(uv, &neg_target);
        let e2 = g.sum_sq(diff);
        let e2 = g.scale(e2, scale);
        let grads = g.backward(e2);
        let mut grad = grads.get(e);
        grad.extend(grads.get(t));
        Ok((g.scalar_value(e2), grad))
    };
    let opts = LbfgsOptions {
        max_iters: 300,
        memory: 10,
        tol: 1e-15,
        grad_tol: 1e-14,
    };
    let res = lbfgs(&mut f, &x0, &opts).ok()?;
    let rot = euler_xyz([res.x[0], res.x[1], res.x[2]]);
    Some(RigidTransform {
        rotation: std::array::from_fn(|k| rot[(k / 3, k % 3)]),
        translation: [res.x[3], res.x[4], res.x[5]],
        center,
    })
}

/// Weighted energy contributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub joints3d: f64,
    pub joints2d: f64,
    pub landmarks3d: f64,
    pub landmarks2d: f64,
    pub vertices: f64,
    pub prior_body: f64,
    pub prior_hand: f64,
    pub prior_beta_s: f64,
    pub prior_beta_f: f64,
    pub prior_beta_k: f64,
}

impl TermBreakdown {
    pub fn data(&self) -> f64 {
        self.joints3d + self.joints2d + self.landmarks3d + self.landmarks2d + self.vertices
    }

    pub fn prior(&self) -> f64 {
        self.prior_body + self.prior_hand + self.prior_beta_s + self.prior_beta_f + self.prior_beta_k
    }

    pub fn total(&self) -> f64 {
        self.data() + self.prior()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub terms: TermBreakdown,
    pub gradient: FitParams,
}

#[derive(Default)]
struct PointSet {
    specs: Vec<LandmarkSpec>,
    vertices: Vec<usize>,
    targets: Vec<f64>,
    conf: Vec<f64>,
}

/// Observation compiled against a model.
pub struct FitProblem<'a> {
    model: &'a BodyModel,
    cfg: FitConfig,
    layout: Layout,
    fk: Arc<FkLayout>,
    skin_weights: Vec<f64>,
    skin_joints: Arc<Vec<u32>>,
    base: Vec<f64>,
    joints3d: PointSet,
    joints2d: PointSet,
    surf3d: PointSet,
    surf2d: PointSet,
    target_vertices: Option<Vec<f64>>,
    camera: Option<Camera>,
    /// Applied to surface landmarks before projection.
    pub alignment: Option<RigidTransform>,
}

impl<'a> FitProblem<'a> {
    pub fn new(model: &'a BodyModel, obs: &Observation, cfg: &FitConfig) -> Result<Self> {
        cfg.check()?;
        obs.check(model)?;
        let mut joints3d = PointSet::default();
        let mut surf3d = PointSet::default();
        for k in &obs.keypoints3d {
            let set = match resolve_keypoint(model, k.joint, k.name.as_deref())? {
                KeypointTarget::Point(s) => {
                    joints3d.specs.push(s);
                    &mut joints3d
                }
                KeypointTarget::Surface(v) => {
                    surf3d.vertices.push(v);
                    &mut surf3d
                }
            };
            set.targets.extend(k.position);
            set.conf.push(k.confidence);
        }
        let mut joints2d = PointSet::default();
        let mut surf2d = PointSet::default();
        for k in &obs.keypoints2d {
            let set = match resolve_keypoint(model, k.joint, k.name.as_deref())? {
                KeypointTarget::Point(s) => {
                    joints2d.specs.push(s);
                    &mut joints2d
                }
                KeypointTarget::Surface(v) => {
                    surf2d.vertices.push(v);
                    &mut surf2d
                }
            };
            set.targets.extend(k.pixel);
            set.conf.push(k.confidence);
        }
        let template = model.rig.template.flat();
        let base = template
            .iter()
            .zip(&model.surface.mean)
            .zip(&model.expression.mean)
            .map(|((t, s), f)| t + s + f)
            .collect();
        let (skin_weights, skin_joints) = skin_slots(&model.rig);
        Ok(FitProblem {
            model,
            cfg: cfg.clone(),
            layout: Layout::new(model),
            fk: model.fk_layout(),
            skin_weights,
            skin_joints,
            base,
            joints3d,
            joints2d,
            surf3d,
            surf2d,
            target_vertices: obs.target_vertices.as_ref().map(|t| t.iter().flatten().copied().collect()),
            camera: obs.camera,
            alignment: None,
        })
    }

    pub fn has_data(&self, term: Term) -> bool {
        match term {
            Term::Joints => !self.joints3d.conf.is_empty() || !self.joints2d.conf.is_empty(),
            Term::Landmarks => !self.surf3d.conf.is_empty() || !self.surf2d.conf.is_empty(),
            Term::Vertices => self.target_vertices.is_some(),
            Term::Silhouette | Term::Depth => false,
        }
    }

    /// Objective and gradient for the given active terms.
    pub fn evaluate(&self, params: &FitParams, terms: &[Term], prior_scale: f64) -> Result<ObjectiveValue> {
        self.evaluate_scaled(params, terms, prior_scale, 1.0)
    }

    /// [`FitProblem::evaluate`] with the robust scales multiplied by
    /// `sigma_scale`.
    pub fn evaluate_scaled(&self, params: &FitParams, terms: &[Term], prior_scale: f64, sigma_scale: f64) -> Result<ObjectiveValue> {
        let (s3, s2) = (self.cfg.sigma_3d * sigma_scale, self.cfg.sigma_2d * sigma_scale);
        params.check(self.model)?;
        let model = self.model;
        let rig = &model.rig;
        let v_count = rig.vertex_count();
        let mut g = Graph::new();
        let pv = self.layout.pose_vars(&mut g, params);
        let rot = self.layout.rotations(&mut g, model, &pv);
        let bk = (!params.beta_k.is_empty()).then(|| g.param(1, params.beta_k.len(), params.beta_k.clone()));
        let bs = (!params.beta_s.is_empty()).then(|| g.param(1, params.beta_s.len(), params.beta_s.clone()));
        let bf = (!params.beta_f.is_empty()).then(|| g.param(1, params.beta_f.len(), params.beta_f.clone()));
        let ell = match bk {
            Some(b) => {
                let k = g.constant(
                    model.skeletal.n_comp(),
                    model.skeletal.dim(),
                    model.skeletal.components.data.clone(),
                );
                let x = g.matmul(b, k);
                g.add_const(x, &model.skeletal.mean)
            }
            None => g.constant(1, model.skeletal.dim(), model.skeletal.mean.clone()),
        };
        let world = g.forward_kinematics(&self.fk, pv.rr, pv.rt, rot, ell);

        let mut parts: Vec<(Var, f64, usize)> = Vec::new();
        let active = |t: Term| terms.contains(&t);
        const J3: usize = 0;
        const J2: usize = 1;
        const L3: usize = 2;
        const L2: usize = 3;
        const VX: usize = 4;
        if active(Term::Joints) && !self.joints3d.conf.is_empty() {
            let pts = g.transform_points(world, &self.joints3d.specs);
            let e = g.geman_mcclure(pts, &self.joints3d.targets, &self.joints3d.conf, s3, 3);
            parts.push((e, 1.0, J3));
        }
        if active(Term::Joints) && !self.joints2d.conf.is_empty() {
            let cam = self.camera.as_ref().expect("checked with observation");
            let pts = g.transform_points(world, &self.joints2d.specs);
            let uv = g.project(pts, cam);
            let e = g.geman_mcclure(uv, &self.joints2d.targets, &self.joints2d.conf, s2, 2);
            parts.push((e, 1.0, J2));
        }
        let want_landmarks = active(Term::Landmarks) && self.has_data(Term::Landmarks);
        let want_vertices = active(Term::Vertices) && self.target_vertices.is_some();
        if want_landmarks || want_vertices {
            let mut shaped = g.constant(1, 3 * v_count, self.base.clone());
            if let Some(b) = bs {
                let s = g.constant(model.surface.n_comp(), model.surface.dim(), model.surface.components.data.clone());
                let x = g.matmul(b, s);
                shaped = g.add(shaped, x);
            }
            if let Some(b) = bf {
                let f = g.constant(
                    model.expression.n_comp(),
                    model.expression.dim(),
                    model.expression.components.data.clone(),
                );
                let x = g.matmul(b, f);
                shaped = g.add(shaped, x);
            }
            if let Some(net) = &model.correctives {
                let bound = net.bind(&mut g, false);
                let bp = net.apply(&mut g, &bound, rot);
                shaped = g.add(shaped, bp);
            }
            let weights = g.constant(v_count, self.skin_weights.len() / v_count, self.skin_weights.clone());
            // surface landmark vertices index into the skinned subset
            let (subset, index): (Option<Arc<Vec<usize>>>, Box<dyn Fn(usize) -> usize>) = if want_vertices {
                (None, Box::new(|v| v))
            } else {
                let set: Vec<usize> = self
                    .surf3d
                    .vertices
                    .iter()
                    .chain(&self.surf2d.vertices)
                    .copied()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let lookup = set.clone();
                (Some(Arc::new(set)), Box::new(move |v| lookup.binary_search(&v).unwrap()))
            };
            let posed = g.skin(&self.fk, world, shaped, weights, &self.skin_joints, subset);
            let gather = |g: &mut Graph, verts: &[usize]| {
                let map: Vec<Option<(usize, usize)>> = verts
                    .iter()
                    .flat_map(|&v| (0..3).map(move |c| (v, c)))
                    .map(|(v, c)| Some((0, 3 * index(v) + c)))
                    .collect();
                let fill = vec![0.0; map.len()];
                g.gather_cols(&[posed], &map, &fill)
            };
            if want_landmarks && !self.surf3d.conf.is_empty() {
                let pts = gather(&mut g, &self.surf3d.vertices);
                let e = g.geman_mcclure(pts, &self.surf3d.targets, &self.surf3d.conf, s3, 3);
                parts.push((e, self.cfg.landmark_weight, L3));
            }
            if want_landmarks && !self.surf2d.conf.is_empty() {
                let cam = self.camera.as_ref().expect("checked with observation");
                let mut pts = gather(&mut g, &self.surf2d.vertices);
                if let Some(a) = &self.alignment {
                    let n = self.surf2d.vertices.len();
                    let r = g.constant(3, 3, a.rotation.to_vec());
                    let m = g.reshape(pts, n, 3);
                    let m = g.matmul_nt(m, r);
                    let m = g.reshape(m, 1, 3 * n);
                    let c = Vector3::from(a.center);
                    let off = c - a.matrix() * c + Vector3::from(a.translation);
                    let tile: Vec<f64> = (0..n).flat_map(|_| [off.x, off.y, off.z]).collect();
                    pts = g.add_const(m, &tile);
                }
                let uv = g.project(pts, cam);
                let e = g.geman_mcclure(uv, &self.surf2d.targets, &self.surf2d.conf, s2, 2);
                parts.push((e, self.cfg.landmark_weight, L2));
            }
            if want_vertices {
                let t = self.target_vertices.as_ref().unwrap();
                let e = g.geman_mcclure(posed, t, &vec![1.0; v_count], s3, 3);
                parts.push((e, self.cfg.vertex_weight / v_count as f64, VX));
            }
        }

        let p = &self.cfg.priors;
        let mut priors: Vec<(Var, f64, usize)> = Vec::new();
        for (var, w, slot) in [
            (pv.body, p.body, 0),
            (pv.hand, p.hand, 1),
            (bs, p.beta_s, 2),
            (bf, p.beta_f, 3),
            (bk, p.beta_k, 4),
        ] {
            if let Some(x) = var {
                let e = g.sum_sq(x);
                priors.push((e, w * prior_scale, slot));
            }
        }
        let all: Vec<(Var, f64)> = parts.iter().chain(&priors).map(|(v, w, _)| (*v, *w)).collect();
        let total = if all.is_empty() {
            g.scalar(0.0)
        } else {
            g.linear_combination(&all)
        };
        let mut tb = TermBreakdown::default();
        for (v, w, slot) in &parts {
            let x = w * g.scalar_value(*v);
            match *slot {
                J3 => tb.joints3d = x,
                J2 => tb.joints2d = x,
                L3 => tb.landmarks3d = x,
                L2 => tb.landmarks2d = x,
                _ => tb.vertices = x,
            }
        }
        for (v, w, slot) in &priors {
            let x = w * g.scalar_value(*v);
            match *slot {
                0 => tb.prior_body = x,
                1 => tb.prior_hand = x,
                2 => tb.prior_beta_s = x,
                3 => tb.prior_beta_f = x,
                _ => tb.prior_beta_k = x,
            }
        }
        let value = g.scalar_value(total);
        let grads = g.backward(total);
        let mut gradient = FitParams::zeros(model);
        let rr = grads.get(pv.rr);
        let rt = grads.get(pv.rt);
        gradient.root_rotation.copy_from_slice(&rr);
        gradient.root_translation.copy_from_slice(&rt);
        if let Some(x) = pv.body {
            gradient.body = grads.get(x);
        }
        if let Some(x) = pv.hand {
            gradient.hand = grads.get(x);
        }
        if let Some(x) = bs {
            gradient.beta_s = grads.get(x);
        }
        if let Some(x) = bf {
            gradient.beta_f = grads.get(x);
        }
        if let Some(x) = bk {
            gradient.beta_k = grads.get(x);
        }
        Ok(ObjectiveValue {
            value,
            terms: tb,
            gradient,
        })
    }

    /// Current 3D positions of the face landmarks used by the 2D term.
    fn face_points(&self, params: &FitParams) -> Result<Vec<[f64; 3]>> {
        let mp = params.to_model_params(self.model)?;
        let out = self.model.mesh(&mp)?;
        Ok(self.surf2d.vertices.iter().map(|&v| out.vertices[v]).collect())
    }

    fn face_targets(&self) -> Vec<[f64; 2]> {
        self.surf2d.targets.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }

    /// Starting point: zero pose and shape, root translation placing the
    /// keypoint centroid on the observed one.
    pub fn initial_params(&self) -> Result<FitParams> {
        let mut p = FitParams::zeros(self.model);
        let mp = p.to_model_params(self.model)?;
        let out = self.model.mesh(&mp)?;
        let kin_points = |specs: &[LandmarkSpec]| -> Vec<[f64; 3]> {
            specs
                .iter()
                .map(|s| {
                    let w = &out.transforms.world[s.joint];
                    let o = s.offset;
                    std::array::from_fn(|r| w[r * 4] * o[0] + w[r * 4 + 1] * o[1] + w[r * 4 + 2] * o[2] + w[r * 4 + 3])
                })
                .collect()
        };
        let mut model_pts = kin_points(&self.joints3d.specs);
        model_pts.extend(self.surf3d.vertices.iter().map(|&v| out.vertices[v]));
        let targets: Vec<f64> = self.joints3d.targets.iter().chain(&self.surf3d.targets).copied().collect();
        let confs: Vec<f64> = self.joints3d.conf.iter().chain(&self.surf3d.conf).copied().collect();
        if confs.iter().any(|c| *c > 0.0) {
            let wsum: f64 = confs.iter().sum();
            for c in 0..3 {
                let m: f64 = model_pts.iter().zip(&confs).map(|(p, w)| w * p[c]).sum::<f64>() / wsum;
                let t: f64 = targets.chunks_exact(3).zip(&confs).map(|(p, w)| w * p[c]).sum::<f64>() / wsum;
                p.root_translation[c] = t - m;
            }
            return Ok(p);
        }
        if let Some(t) = &self.target_vertices {
            for c in 0..3 {
                let m: f64 = out.vertices.iter().map(|p| p[c]).sum::<f64>() / out.vertices.len() as f64;
                let tm: f64 = t.chunks_exact(3).map(|p| p[c]).sum::<f64>() / out.vertices.len() as f64;
                p.root_translation[c] = tm - m;
            }
            return Ok(p);
        }
        let mut pts = kin_points(&self.joints2d.specs);
        pts.extend(self.surf2d.vertices.iter().map(|&v| out.vertices[v]));
        let pix: Vec<f64> = self.joints2d.targets.iter().chain(&self.surf2d.targets).copied().collect();
        let conf: Vec<f64> = self.joints2d.conf.iter().chain(&self.surf2d.conf).copied().collect();
        if let (Some(cam), true) = (&self.camera, conf.iter().any(|c| *c > 0.0)) {
            p.root_translation = weak_perspective_translation(cam, &pts, &pix, &conf);
        }
        Ok(p)
    }
}

/// Translation placing `points` in front of `camera` so their projection
/// matches the centroid and spread of `pixels`.
fn weak_perspective_translation(cam: &Camera, points: &[[f64; 3]], pixels: &[f64], conf: &[f64]) -> [f64; 3] {
    let used: Vec<usize> = (0..conf.len()).filter(|&i| conf[i] > 0.0).collect();
    let n = used.len() as f64;
    let r = Matrix3::from_row_slice(&cam.rotation);
    let pc: Vec<Vector3<f64>> = used.iter().map(|&i| r * Vector3::from(points[i])).collect();
    let mc = pc.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let uv: Vec<[f64; 2]> = used
        .iter()
        .map(|&i| [(pixels[2 * i] - cam.cx) / cam.fx, (pixels[2 * i + 1] - cam.cy) / cam.fy])
        .collect();
    let mu = [uv.iter().map(|q| q[0]).sum::<f64>() / n, uv.iter().map(|q| q[1]).sum::<f64>() / n];
    let s3 = pc.iter().map(|p| (p.x - mc.x).powi(2) + (p.y - mc.y).powi(2)).sum::<f64>().sqrt();
    let s2 = uv
        .iter()
        .map(|q| (q[0] - mu[0]).powi(2) + (q[1] - mu[1]).powi(2))
        .sum::<f64>()
        .sqrt();
    let depth = if s2 > 1e-12 && s3 > 1e-12 { s3 / s2 } else { 3.0 };
    let want = Vector3::new(mu[0] * depth, mu[1] * depth, depth);
    // camera-frame offset mapped back to world
    let t_cam = want - mc - Vector3::from(cam.translation);
    let t = r.transpose() * t_cam;
    [t.x, t.y, t.z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub name: String,
    pub free: Vec<Block>,
    /// Reason the stage did not run.
    pub skipped: Option<String>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub objective: Vec<f64>,
    pub terms: TermBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    /// Mean distance to 3D joint-center and skeletal-landmark keypoints.
    pub joint_mm: Option<f64>,
    pub joint_mm_aligned: Option<f64>,
    pub vertex_mm: Option<f64>,
    pub vertex_mm_aligned: Option<f64>,
    /// Keypoints behind the camera at the solution.
    pub masked_keypoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParams,
    /// Direct parameters reproducing the fitted mesh.
    pub model_params: ModelParams,
    pub objective: f64,
    pub terms: TermBreakdown,
    pub stages: Vec<StageTrace>,
    pub metrics: FitMetrics,
    pub alignment: Option<RigidTransform>,
    pub warnings: Vec<String>,
}

pub fn fit(model: &BodyModel, obs: &Observation, cfg: &FitConfig) -> Result<FitResult> {
    fit_with(model, obs, cfg, None, &mut |_| {})
}

/// Runs the stage schedule from `init` (or the default initialization),
/// reporting each finished stage to `on_stage`.
pub fn fit_with(
    model: &BodyModel,
    obs: &Observation,
    cfg: &FitConfig,
    init: Option<FitParams>,
    on_stage: &mut dyn FnMut(&StageTrace),
) -> Result<FitResult> {
    let mut problem = FitProblem::new(model, obs, cfg)?;
    let mut params = match init {
        Some(p) => {
            p.check(model)?;
            p
        }
        None => problem.initial_params()?,
    };
    let mut warnings = Vec::new();
    let mut stages = Vec::new();
    for stage in &cfg.stages {
        let mut free: Vec<Block> = stage.free.iter().copied().filter(|b| !params.block(*b).is_empty()).collect();
        if free.contains(&Block::BetaS) && !problem.has_data(Term::Vertices) {
            // surface shape is only observable through dense targets
            free.retain(|b| *b != Block::BetaS);
        }
        let missing: Vec<Term> = stage.requires.iter().copied().filter(|t| !problem.has_data(*t)).collect();
        let skip = if !missing.is_empty() {
            Some(format!("no data for {missing:?}"))
        } else if !stage.terms.iter().any(|t| problem.has_data(*t)) {
            Some("no data for any active term".to_string())
        } else if free.is_empty() {
            Some("no free parameters with data".to_string())
        } else {
            None
        };
        if let Some(reason) = skip {
            let trace = StageTrace {
                name: stage.name.clone(),
                free,
                skipped: Some(reason),
                iterations: 0,
                converged: true,
                objective: vec![],
                terms: TermBreakdown::default(),
            };
            on_stage(&trace);
            stages.push(trace);
            continue;
        }
        if stage.terms.contains(&Term::Landmarks) && cfg.align_expression && !problem.surf2d.conf.is_empty() {
            let cam = problem.camera.unwrap();
            let face = problem.face_points(&params)?;
            problem.alignment = align_expression_keypoints(&face, &problem.face_targets(), &cam);
            if problem.alignment.is_none() {
                warnings.push(format!(
                    "stage `{}`: expression alignment skipped (fewer than 4 face keypoints)",
                    stage.name
                ));
            }
        }

        let before = params.clone();
        let x0: Vec<f64> = free.iter().flat_map(|b| params.block(*b)).collect();
        let mut evals = 0usize;
        let mut failure: Option<String> = None;
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            evals += 1;
            let mut p = before.clone();
            let mut off = 0;
            for b in &free {
                let n = p.block(*b).len();
                p.set_block(*b, &x[off..off + n]);
                off += n;
            }
            if x.iter().any(|v| !v.is_finite()) {
                failure = Some(format!("stage `{}`, evaluation {evals}: non-finite parameters", stage.name));
                return Err(Error::NonFinite("parameters".into()));
            }
            let o = problem.evaluate_scaled(&p, &stage.terms, stage.prior_scale, stage.sigma_scale)?;
            let grad: Vec<f64> = free.iter().flat_map(|b| o.gradient.block(*b)).collect();
            if !o.value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                failure = Some(format!("stage `{}`, evaluation {evals}: objective or gradient is NaN", stage.name));
                return Err(Error::NonFinite("objective".into()));
            }
            Ok((o.value, grad))
        };
        let opts = LbfgsOptions {
            max_iters: stage.iterations,
            memory: 10,
            tol: cfg.tolerance,
            grad_tol: 1e-12,
        };
        let res = lbfgs(&mut f, &x0, &opts);
        let res = match res {
            Ok(r) => r,
            Err(e) => return Err(Error::Diverged(failure.unwrap_or_else(|| format!("stage `{}`: {e}", stage.name)))),
        };
        let mut off = 0;
        for b in &free {
            let n = params.block(*b).len();
            params.set_block(*b, &res.x[off..off + n]);
            off += n;
        }
        for b in ALL_BLOCKS {
            if !free.contains(&b) {
                let same = before.block(b).iter().zip(params.block(b)).all(|(a, c)| a.to_bits() == c.to_bits());
                assert!(same, "stage `{}` modified frozen block {b:?}", stage.name);
            }
        }
        let terms = problem
            .evaluate_scaled(&params, &stage.terms, stage.prior_scale, stage.sigma_scale)?
            .terms;
        let trace = StageTrace {
            name: stage.name.clone(),
            free,
            skipped: None,
            iterations: res.iterations,
            converged: res.converged,
            objective: res.trace,
            terms,
        };
        on_stage(&trace);
        stages.push(trace);
    }

    let final_eval = problem.evaluate(&params, &ALL_TERMS, 1.0)?;
    let model_params = params.to_model_params(model)?;
    for (j, e) in model_params.theta.chunks_exact(3).enumerate() {
        if near_gimbal([e[0], e[1], e[2]], GIMBAL_MARGIN) {
            warnings.push(format!("joint {j} ({}) is near gimbal lock", model.rig.tree.name(j)));
        }
    }
    let metrics = compute_metrics(model, obs, &model_params)?;
    if metrics.masked_keypoints > 0 {
        warnings.push(format!(
            "{} keypoints are behind the camera and were ignored",
            metrics.masked_keypoints
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FitResult {
        params,
        model_params,
        objective: final_eval.value,
        terms: final_eval.terms,
        stages,
        metrics,
        alignment: problem.alignment,
        warnings,
    })
}

/// Metrics of the mesh produced by `params` against the observation.
pub fn compute_metrics(model: &BodyModel, obs: &Observation, params: &ModelParams) -> Result<FitMetrics> {
    let out = model.mesh(params)?;
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for k in &obs.keypoints3d {
        if k.confidence <= 0.0 {
            continue;
        }
        if let KeypointTarget::Point(s) = resolve_keypoint(model, k.joint, k.name.as_deref())? {
            let w = &out.transforms.world[s.joint];
            let o = s.offset;
            pred.push(std::array::from_fn(|r| {
                w[r * 4] * o[0] + w[r * 4 + 1] * o[1] + w[r * 4 + 2] * o[2] + w[r * 4 + 3]
            }));
            target.push(k.position);
        }
    }
    let mean_mm =
        |a: &[[f64; 3]], b: &[[f64; 3]]| 1e3 * a.iter().zip(b).map(|(x, y)| crate::mesh::dist(*x, *y)).sum::<f64>() / a.len() as f64;
    let mut m = FitMetrics::default();
    if !pred.is_empty() {
        m.joint_mm = Some(mean_mm(&pred, &target));
        m.joint_mm_aligned = procrustes_align(&pred, &target).ok().map(|p| 1e3 * p.mean);
    }
    if let Some(t) = &obs.target_vertices {
        m.vertex_mm = Some(mean_mm(&out.vertices, t));
        m.vertex_mm_aligned = procrustes_align(&out.vertices, t).ok().map(|p| 1e3 * p.mean);
    }
    if let Some(cam) = &obs.camera {
        for k in &obs.keypoints2d {
            let p = match resolve_keypoint(model, k.joint, k.name.as_deref())? {
                KeypointTarget::Point(s) => {
                    let w = &out.transforms.world[s.joint];
                    let o = s.offset;
                    std::array::from_fn(|r| w[r * 4] * o[0] + w[r * 4 + 1] * o[1] + w[r * 4 + 2] * o[2] + w[r * 4 + 3])
                }
                KeypointTarget::Surface(v) => out.vertices[v],
            };
            if cam.project(p).is_none() {
                m.masked_keypoints += 1;
            }
        }
    }
    Ok(m)
}

/// Which channels a synthetic observation carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// 3D joint centers and skeletal landmarks.
    pub joints3d: bool,
    /// 3D surface landmarks.
    pub landmarks3d: bool,
    pub vertices: bool,
    /// 2D projections of joints and surface landmarks.
    pub camera: Option<Camera>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            joints3d: true,
            landmarks3d: true,
            vertices: false,
            camera: None,
        }
    }
}

/// Noise-free observation of the mesh produced by `params`.
pub fn synthesize_observation(model: &BodyModel, params: &FitParams, opts: &SynthOptions) -> Result<Observation> {
    let mp = params.to_model_params(model)?;
    let out = model.mesh(&mp)?;
    let rig = &model.rig;
    let point = |s: LandmarkSpec| -> [f64; 3] {
        let w = &out.transforms.world[s.joint];
        let o = s.offset;
        std::array::from_fn(|r| w[r * 4] * o[0] + w[r * 4 + 1] * o[1] + w[r * 4 + 2] * o[2] + w[r * 4 + 3])
    };
    let mut pts: Vec<(Option<usize>, Option<String>, [f64; 3], bool)> = Vec::new();
    for j in 0..rig.joint_count() {
        pts.push((
            Some(j),
            None,
            point(LandmarkSpec {
                joint: j,
                offset: [0.0; 3],
            }),
            false,
        ));
    }
    for l in &rig.landmarks.skeletal {
        pts.push((
            None,
            Some(l.name.clone()),
            point(LandmarkSpec {
                joint: l.joint,
                offset: l.offset,
            }),
            false,
        ));
    }
    for l in &rig.landmarks.surface {
        pts.push((None, Some(l.name.clone()), out.vertices[l.vertex], true));
    }
    let mut obs = Observation::default();
    for (joint, name, p, surface) in &pts {
        if (*surface && opts.landmarks3d) || (!*surface && opts.joints3d) {
            obs.keypoints3d.push(Keypoint3d {
                joint: *joint,
                name: name.clone(),
                position: *p,
                confidence: 1.0,
            });
        }
        if let Some(cam) = &opts.camera {
            if let Some(px) = cam.project(*p) {
                obs.keypoints2d.push(Keypoint2d {
                    joint: *joint,
                    name: name.clone(),
                    pixel: px,
                    confidence: 1.0,
                });
            }
        }
    }
    obs.camera = opts.camera;
    if opts.vertices {
        obs.target_vertices = Some(out.vertices.clone());
    }
    Ok(obs)
}

/// Scan-fitting errors with shape only, skeleton only, and both free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingReport {
    pub scans: usize,
    pub shape_only_mm: f64,
    pub skeleton_only_mm: f64,
    pub both_mm: f64,
}

/// Fits synthetic scans (vertices plus 3D joint keypoints) with varied
/// skeletal attributes and soft-tissue offsets under three parameter
/// restrictions and reports the mean vertex error of each.
pub fn decoupling_ablation(model: &BodyModel, scans: usize, seed: u64) -> Result<DecouplingReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = FitConfig::default();
    let variants = [
        cfg.without_blocks(&[Block::BetaK]),
        cfg.without_blocks(&[Block::BetaS]),
        cfg.clone(),
    ];
    let mut err = [0.0; 3];
    for _ in 0..scans {
        let mut truth = FitParams::sample(model, &mut rng, 0.3);
        for b in truth.beta_k.iter_mut().chain(truth.beta_s.iter_mut()) {
            *b *= 3.0;
        }
        let opts = SynthOptions {
            joints3d: true,
            landmarks3d: false,
            vertices: true,
            camera: None,
        };
        let obs = synthesize_observation(model, &truth, &opts)?;
        for (e, c) in err.iter_mut().zip(&variants) {
            let r = fit(model, &obs, c)?;
            *e += r.metrics.vertex_mm.expect("vertex targets") / scans as f64;
        }
    }
    Ok(DecouplingReport {
        scans,
        shape_only_mm: err[0],
        skeleton_only_mm: err[1],
        both_mm: err[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::make_desk_rig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> BodyModel {
        BodyModel::from_rig(make_desk_rig(0, 17, 12).unwrap())
    }

    #[test]
    fn robust_loss_values() {
        assert_eq!(robust_loss(0.0, 0.05), 0.0);
        assert!((robust_loss(0.05, 0.05) - 0.5).abs() < 1e-15);
        assert!(robust_loss(1e6, 0.05) > 1.0 - 1e-9);
    }

    #[test]
    fn zero_residual_at_generating_params() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FitParams::sample(&m, &mut rng, 0.3);
        let obs = synthesize_observation(
            &m,
            &p,
            &SynthOptions {
                vertices: true,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = FitConfig {
            priors: PriorWeights {
                body: 0.0,
                hand: 0.0,
                beta_s: 0.0,
                beta_f: 0.0,
                beta_k: 0.0,
            },
            ..Default::default()
        };
        let prob = FitProblem::new(&m, &obs, &cfg).unwrap();
        let o = prob.evaluate(&p, &[Term::Joints, Term::Landmarks, Term::Vertices], 1.0).unwrap();
        assert!(o.terms.data() < 1e-12, "{:?}", o.terms);
    }

    #[test]
    fn procrustes_identity() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let p = procrustes_align(&pts, &pts).unwrap();
        assert!(p.rms < 1e-12);
        assert!(p.transform.angle() < 1e-7);
        let line = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(procrustes_align(&line, &line).is_err());
    }
}
