//! Synthetic ground-truth oracle, registration datasets, the seven-term
//! training loss and the end-to-end trainer.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FkLayout, Graph, Var};
use crate::correctives::{geodesic_init, local_rotations, BoundCorrectives, CorrectiveConfig, CorrectiveKind, CorrectiveNet};
use crate::error::{Error, Result};
use crate::kinematics::{joint_positions, Kinematics, PoseState};
use crate::mesh::{cotangent_weights, vertex_normals};
use crate::model::{procedural_surface_basis, skin_slots, BodyModel};
use crate::optim::{Adam, Momentum, Tensor};
use crate::rig::{Container, ContainerWriter, Rig, MAX_INFLUENCES};
use crate::shape::{
    eval_basis, fit_autoencoder, AutoencoderOptions, BasisDomain, LinearAutoencoder, LinearBasis, DEFAULT_SKELETAL_COMPONENTS,
    DEFAULT_SURFACE_COMPONENTS,
};
use crate::skinning::SkinningKernel;

/// A target mesh in template correspondence with its known generating pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub subject_id: usize,
    /// Includes the subject's skeletal attributes.
    pub pose: PoseState,
    /// Rest-pose surface of the subject (no pose correctives).
    pub rest_vertices: Vec<[f64; 3]>,
    pub vertices: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    pub surface_components: usize,
    pub skeletal_components: usize,
    /// Peak surface offset per unit coefficient, meters.
    pub surface_scale: f64,
    /// Peak corrective offset, meters.
    pub corrective_amplitude: f64,
    /// Bump radius around each corrective joint, meters.
    pub corrective_radius: f64,
    pub corrective_joints: Vec<String>,
    /// Half-range of sampled joint angles.
    pub angle_range: f64,
    /// Half-range of the driving x angle at corrective joints.
    pub corrective_angle_range: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 0,
            surface_components: 4,
            skeletal_components: 3,
            surface_scale: 0.02,
            corrective_amplitude: 0.05,
            corrective_radius: 0.09,
            corrective_joints: ["l_shoulder", "l_elbow", "r_shoulder", "r_elbow", "l_knee", "r_knee"]
                .map(String::from)
                .to_vec(),
            angle_range: 0.5,
            corrective_angle_range: 1.4,
        }
    }
}

/// Closed-form corrective `amp * relu(sin θx)^2 * bump_i * n_i` of one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCorrective {
    pub joint: usize,
    pub vertices: Vec<u32>,
    /// Per listed vertex: amplitude times bump times normal.
    pub field: Vec<[f64; 3]>,
}

/// Generating model of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub config: OracleConfig,
    /// Rig, oracle surface and skeletal bases (zero-mean); the skin weights
    /// are the rig's.
    pub model: BodyModel,
    pub correctives: Vec<OracleCorrective>,
}

impl OracleModel {
    pub fn new(rig: &Rig, config: &OracleConfig) -> Result<Self> {
        let mut model = BodyModel::from_rig(rig.clone());
        let mut surface = procedural_surface_basis(rig, config.surface_components, config.seed ^ 0x0c1e);
        let scale = config.surface_scale / 0.01;
        surface.components.data.iter_mut().for_each(|x| *x *= scale);
        model.surface = surface;
        model.skeletal = oracle_skeletal_basis(rig, config.skeletal_components, config.seed ^ 0x5ce1);
        let init = geodesic_init(rig);
        let kin = Kinematics::new(rig);
        let world = kin.world(&PoseState::zero(rig));
        let normals = vertex_normals(&rig.template.vertices, &rig.template.faces);
        let mut correctives = Vec::new();
        for name in &config.corrective_joints {
            let j = rig
                .tree
                .index_of(name)
                .ok_or_else(|| Error::Input(format!("oracle corrective joint `{name}` not in rig")))?;
            let c = [world[j][3], world[j][7], world[j][11]];
            let mut vertices = Vec::new();
            let mut field = Vec::new();
            for (i, p) in rig.template.vertices.iter().enumerate() {
                if init[j][i] <= 0.0 {
                    continue;
                }
                let d2: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
                let bump = (-d2 / (2.0 * config.corrective_radius.powi(2))).exp();
                if bump < 1e-3 {
                    continue;
                }
                vertices.push(i as u32);
                field.push(normals[i].map(|n| config.corrective_amplitude * bump * n));
            }
            correctives.push(OracleCorrective { joint: j, vertices, field });
        }
        Ok(OracleModel {
            config: config.clone(),
            model,
            correctives,
        })
    }

    pub fn rig(&self) -> &Rig {
        &self.model.rig
    }

    /// Oracle pose-corrective field `3V` for a pose.
    pub fn corrective_offsets(&self, pose: &PoseState) -> Vec<f64> {
        let mut out = vec![0.0; 3 * self.rig().vertex_count()];
        for oc in &self.correctives {
            let s = pose.joint_angles[oc.joint][0].sin().max(0.0);
            let a = s * s;
            if a == 0.0 {
                continue;
            }
            for (&i, f) in oc.vertices.iter().zip(&oc.field) {
                for k in 0..3 {
                    out[3 * i as usize + k] += a * f[k];
                }
            }
        }
        out
    }

    pub fn sample_subject<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let bs = (0..self.model.surface.n_comp()).map(|_| StandardNormal.sample(rng)).collect();
        let bk = (0..self.model.skeletal.n_comp()).map(|_| StandardNormal.sample(rng)).collect();
        (bs, bk)
    }

    /// Bounded seeded pose; skeletal attributes left at zero.
    pub fn sample_pose<R: Rng>(&self, rng: &mut R) -> PoseState {
        let rig = self.rig();
        let mut p = PoseState::zero(rig);
        p.root_rotation = [
            rng.random_range(-0.3..0.3),
            rng.random_range(-3.1..3.1),
            rng.random_range(-0.3..0.3),
        ];
        p.root_translation = [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.5..0.5),
        ];
        let r = self.config.angle_range;
        for a in p.joint_angles.iter_mut().skip(1) {
            *a = [rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)];
        }
        let rc = self.config.corrective_angle_range;
        for oc in &self.correctives {
            p.joint_angles[oc.joint][0] = rng.random_range(-rc..rc);
        }
        p
    }

    /// Rest surface, skeletal attributes and posed mesh generated by the
    /// oracle's own shaping, FK and skinning.
    pub fn registration(&self, subject_id: usize, beta_s: &[f64], beta_k: &[f64], pose: &PoseState) -> Result<Registration> {
        let rig = self.rig();
        let s = eval_basis(&self.model.surface, beta_s)?;
        let rest: Vec<[f64; 3]> = rig
            .template
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| std::array::from_fn(|k| v[k] + s[3 * i + k]))
            .collect();
        let mut pose = pose.clone();
        pose.skeletal = eval_basis(&self.model.skeletal, beta_k)?;
        let bp = self.corrective_offsets(&pose);
        let shaped: Vec<[f64; 3]> = rest
            .iter()
            .enumerate()
            .map(|(i, v)| std::array::from_fn(|k| v[k] + bp[3 * i + k]))
            .collect();
        let out = self.model.pose_shaped(&shaped, pose.clone())?;
        Ok(Registration {
            subject_id,
            pose,
            rest_vertices: rest,
            vertices: out.vertices,
        })
    }
}

/// Skeletal directions mixing all attributes, each with a peak of a fifth
/// of the attribute range.
fn oracle_skeletal_basis(rig: &Rig, n_comp: usize, seed: u64) -> LinearBasis {
    let attrs = &rig.schema.attributes;
    let n = attrs.len();
    let n_comp = n_comp.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_comp)
        .flat_map(|_| {
            attrs
                .iter()
                .map(|a| 0.2 * (a.range[1] - a.range[0]) * rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>()
        })
        .collect();
    LinearBasis::new(BasisDomain::Skeletal, vec![0.0; n], Tensor::new(n_comp, n, data)).expect("finite basis")
}

/// `n_subjects * n_poses` registrations, subject-major.
pub fn synth_dataset(oracle: &OracleModel, n_subjects: usize, n_poses: usize, seed: u64) -> Result<Vec<Registration>> {
    if n_subjects == 0 || n_poses == 0 {
        return Err(Error::Precondition("subject and pose counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_subjects * n_poses);
    for s in 0..n_subjects {
        let (bs, bk) = oracle.sample_subject(&mut rng);
        for _ in 0..n_poses {
            let pose = oracle.sample_pose(&mut rng);
            out.push(oracle.registration(s, &bs, &bk, &pose)?);
        }
    }
    Ok(out)
}

fn pose_block_len(j: usize, n_k: usize) -> usize {
    6 + 3 * j + n_k
}

pub fn dataset_to_bytes(rig: &Rig, regs: &[Registration]) -> Vec<u8> {
    let (j, v, n_k) = (rig.joint_count(), rig.vertex_count(), rig.attribute_count());
    let mut poses = Vec::with_capacity(regs.len() * pose_block_len(j, n_k));
    let mut rest = Vec::with_capacity(regs.len() * 3 * v);
    let mut verts = Vec::with_capacity(regs.len() * 3 * v);
    for r in regs {
        poses.extend(r.pose.root_rotation);
        poses.extend(r.pose.root_translation);
        poses.extend(r.pose.joint_angles.iter().flatten());
        poses.extend(&r.pose.skeletal);
        rest.extend(r.rest_vertices.iter().flatten());
        verts.extend(r.vertices.iter().flatten());
    }
    let ids: Vec<u32> = regs.iter().map(|r| r.subject_id as u32).collect();
    let mut w = ContainerWriter::new("armature-dataset");
    w.meta("rig_id", &rig.id)
        .meta("count", regs.len())
        .meta("J", j)
        .meta("V", v)
        .meta("N_k", n_k)
        .u32("subject_ids", &ids)
        .f32("poses", &poses)
        .f32("rest_vertices", &rest)
        .f32("vertices", &verts);
    w.to_bytes()
}

pub fn save_dataset(path: &Path, rig: &Rig, regs: &[Registration]) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(rig, regs)).map_err(|e| Error::io(path, e))
}

pub fn dataset_from_bytes(bytes: &[u8], rig: &Rig) -> Result<Vec<Registration>> {
    let c = Container::from_bytes(bytes)?;
    if c.format() != Some("armature-dataset") {
        return Err(Error::parse("header", "not a dataset container"));
    }
    let n: usize = c.meta("count")?;
    let (j, v, n_k) = (rig.joint_count(), rig.vertex_count(), rig.attribute_count());
    for (key, want) in [("J", j), ("V", v), ("N_k", n_k)] {
        let got: usize = c.meta(key)?;
        if got != want {
            return Err(Error::dim(format!("dataset {key}"), want, got));
        }
    }
    let pl = pose_block_len(j, n_k);
    let ids = c.u32("subject_ids", Some(n))?;
    let poses = c.f32("poses", Some(n * pl))?;
    let rest = c.f32("rest_vertices", Some(n * 3 * v))?;
    let verts = c.f32("vertices", Some(n * 3 * v))?;
    let rows = |flat: &[f64]| flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    Ok((0..n)
        .map(|i| {
            let p = &poses[i * pl..(i + 1) * pl];
            Registration {
                subject_id: ids[i] as usize,
                pose: PoseState {
                    root_rotation: [p[0], p[1], p[2]],
                    root_translation: [p[3], p[4], p[5]],
                    joint_angles: p[6..6 + 3 * j].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    skeletal: p[6 + 3 * j..].to_vec(),
                },
                rest_vertices: rows(&rest[i * 3 * v..(i + 1) * 3 * v]),
                vertices: rows(&verts[i * 3 * v..(i + 1) * 3 * v]),
            }
        })
        .collect())
}

pub fn load_dataset(path: &Path, rig: &Rig) -> Result<Vec<Registration>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes, rig)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub shape_reg: f64,
    pub skele_reg: f64,
    pub skin_lapl: f64,
    pub pc_lapl: f64,
    pub skin_init: f64,
    pub pc_act_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            data: 1.0,
            shape_reg: 1e-8,
            skele_reg: 1e-8,
            skin_lapl: 1e-10,
            pc_lapl: 1e-5,
            skin_init: 1e-3,
            pc_act_reg: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        let all = [
            self.data,
            self.shape_reg,
            self.skele_reg,
            self.skin_lapl,
            self.pc_lapl,
            self.skin_init,
            self.pc_act_reg,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    pub shape_reg: f64,
    pub skele_reg: f64,
    pub skin_lapl: f64,
    pub pc_lapl: f64,
    pub skin_init: f64,
    pub pc_act_reg: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("data", self.data),
            ("shape_reg", self.shape_reg),
            ("skele_reg", self.skele_reg),
            ("skin_lapl", self.skin_lapl),
            ("pc_lapl", self.pc_lapl),
            ("skin_init", self.skin_init),
            ("pc_act_reg", self.pc_act_reg),
        ]
    }

    fn add_scaled(&mut self, o: &LossTerms, k: f64) {
        self.data += k * o.data;
        self.shape_reg += k * o.shape_reg;
        self.skele_reg += k * o.skele_reg;
        self.skin_lapl += k * o.skin_lapl;
        self.pc_lapl += k * o.pc_lapl;
        self.skin_init += k * o.skin_init;
        self.pc_act_reg += k * o.pc_act_reg;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub surface_components: usize,
    pub skeletal_components: usize,
    /// Ordered-dropout epochs of the autoencoders before the joint stage.
    pub autoencoder_epochs: usize,
    pub ordered_dropout: bool,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_basis: f64,
    pub lr_mlp: f64,
    pub lr_projection: f64,
    /// Projection step for the linear corrective kind, whose unnormalized
    /// features diverge at the non-linear step size.
    pub lr_linear_projection: f64,
    pub lr_gate: f64,
    pub lr_skin: f64,
    /// Epochs with the activation logits frozen.
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    pub corrective: CorrectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch: 16,
            seed: 0,
            surface_components: DEFAULT_SURFACE_COMPONENTS,
            skeletal_components: DEFAULT_SKELETAL_COMPONENTS,
            autoencoder_epochs: 20,
            ordered_dropout: true,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            lr_basis: 0.0,
            lr_mlp: 1e-2,
            lr_projection: 1e-2,
            lr_linear_projection: 1e-4,
            lr_gate: 1e-2,
            lr_skin: 1e-5,
            warmup_epochs: 10,
            weights: LossWeights::default(),
            corrective: CorrectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        self.weights.check()?;
        if self.batch == 0 {
            return Err(Error::Input("batch must be at least 1".into()));
        }
        let lrs = [
            self.lr_basis,
            self.lr_mlp,
            self.lr_projection,
            self.lr_linear_projection,
            self.lr_gate,
            self.lr_skin,
            self.momentum,
        ];
        if lrs.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Input("learning rates and momentum must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Everything the trainer optimizes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub rig: Rig,
    pub surface: LinearAutoencoder,
    pub skeletal: LinearAutoencoder,
    pub correctives: CorrectiveNet,
    /// `V x I` slot weights; slot joints stay those of the rig.
    pub skin: Vec<f64>,
    pub skin_init: Vec<f64>,
    pub skin_joints: Arc<Vec<u32>>,
    /// Slots allowed to carry weight (those non-zero at initialization).
    pub skin_active: Vec<bool>,
    layout: Arc<FkLayout>,
    edges: Arc<Vec<[u32; 2]>>,
    cotan: Arc<Vec<f64>>,
}

struct Bound {
    surface: [Var; 4],
    skeletal: [Var; 4],
    correctives: BoundCorrectives,
    skin: Var,
}

impl Bound {
    /// Leaves grouped as (surface, skeletal, correctives, skin).
    fn vars(&self) -> Vec<Var> {
        let mut v = self.surface.to_vec();
        v.extend(self.skeletal);
        v.extend(self.correctives.vars());
        v.push(self.skin);
        v
    }
}

impl TrainState {
    /// Autoencoders are PCA-initialized on the dataset (one sample per
    /// subject) and refined with ordered dropout; correctives start neutral;
    /// skin weights start at the rig's.
    pub fn new(rig: &Rig, regs: &[Registration], cfg: &TrainConfig) -> Result<Self> {
        if regs.is_empty() {
            return Err(Error::Precondition("training needs at least one registration".into()));
        }
        for r in regs {
            if r.vertices.len() != rig.vertex_count() || r.rest_vertices.len() != rig.vertex_count() {
                return Err(Error::dim("registration vertices", rig.vertex_count(), r.vertices.len()));
            }
            r.pose.check(rig)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        let subjects: Vec<&Registration> = regs.iter().filter(|r| seen.insert(r.subject_id)).collect();
        let template = rig.template.flat();
        let shapes: Vec<Vec<f64>> = subjects
            .iter()
            .map(|r| r.rest_vertices.iter().flatten().zip(&template).map(|(a, b)| a - b).collect())
            .collect();
        let skels: Vec<Vec<f64>> = subjects.iter().map(|r| r.pose.skeletal.clone()).collect();
        let ae_opts = |seed| AutoencoderOptions {
            ordered_dropout: cfg.ordered_dropout,
            epochs: cfg.autoencoder_epochs,
            seed,
            center: false,
            ..Default::default()
        };
        let ns = clamp_components("surface", cfg.surface_components, shapes.len(), 3 * rig.vertex_count());
        let nk = clamp_components("skeletal", cfg.skeletal_components, skels.len(), rig.attribute_count());
        let surface = fit_autoencoder(&shapes, ns, BasisDomain::Surface, &ae_opts(cfg.seed))?;
        let skeletal = fit_autoencoder(&skels, nk, BasisDomain::Skeletal, &ae_opts(cfg.seed + 1))?;
        let correctives = CorrectiveNet::new(rig, &cfg.corrective);
        Ok(TrainState::assemble(rig, surface, skeletal, correctives))
    }

    fn assemble(rig: &Rig, surface: LinearAutoencoder, skeletal: LinearAutoencoder, correctives: CorrectiveNet) -> Self {
        let (skin, skin_joints) = skin_slots(rig);
        let cw = cotangent_weights(&rig.template.vertices, &rig.template.faces);
        TrainState {
            rig: rig.clone(),
            surface,
            skeletal,
            correctives,
            skin_active: skin.iter().map(|w| *w > 0.0).collect(),
            skin_init: skin.clone(),
            skin,
            skin_joints,
            layout: Arc::new(FkLayout::new(&Kinematics::new(rig), rig.attribute_count())),
            edges: Arc::new(cw.edges),
            cotan: Arc::new(cw.weights),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.surface.tensors_mut());
        out.extend(self.skeletal.tensors_mut());
        out.extend(self.correctives.tensors_mut());
        out.push(&mut self.skin);
        out
    }

    /// Learning rate per leaf, in the order of [`Bound::vars`].
    fn learning_rates(&self, cfg: &TrainConfig, gates_frozen: bool) -> Vec<f64> {
        let mut lrs = vec![cfg.lr_basis; 8];
        let lr_p = match self.correctives.kind {
            CorrectiveKind::NonLinear => cfg.lr_projection,
            CorrectiveKind::Linear => cfg.lr_linear_projection,
        };
        for jc in &self.correctives.joints {
            lrs.extend(std::iter::repeat_n(cfg.lr_mlp, 2 * jc.layers.len()));
            lrs.push(lr_p);
            lrs.push(if gates_frozen { 0.0 } else { cfg.lr_gate });
        }
        lrs.push(cfg.lr_skin);
        lrs
    }

    fn bind(&self, g: &mut Graph) -> Bound {
        let ae = |g: &mut Graph, a: &LinearAutoencoder| {
            [
                g.param(a.encoder_w.rows, a.encoder_w.cols, a.encoder_w.data.clone()),
                g.param(1, a.encoder_b.len(), a.encoder_b.clone()),
                g.param(a.decoder_w.rows, a.decoder_w.cols, a.decoder_w.data.clone()),
                g.param(1, a.decoder_b.len(), a.decoder_b.clone()),
            ]
        };
        Bound {
            surface: ae(g, &self.surface),
            skeletal: ae(g, &self.skeletal),
            correctives: self.correctives.bind(g, true),
            skin: g.param(self.rig.vertex_count(), MAX_INFLUENCES, self.skin.clone()),
        }
    }

    /// Builds the loss graph; returns the weighted total and the seven
    /// unweighted term nodes.
    fn build(&self, g: &mut Graph, b: &Bound, batch: &[&Registration], w: &LossWeights) -> (Var, [Var; 7]) {
        let n = batch.len();
        let v = self.rig.vertex_count();
        let j = self.rig.joint_count();
        let n_k = self.rig.attribute_count();
        let template = self.rig.template.flat();
        let mut rest: Vec<f64> = Vec::with_capacity(n * 3 * v);
        let mut target: Vec<f64> = Vec::with_capacity(n * 3 * v);
        let mut skel = Vec::with_capacity(n * n_k);
        let mut rot = Vec::with_capacity(n * 9 * j);
        let mut rr = Vec::with_capacity(3 * n);
        let mut rt = Vec::with_capacity(3 * n);
        for r in batch {
            rest.extend(r.rest_vertices.iter().flatten().zip(&template).map(|(a, t)| a - t));
            target.extend(r.vertices.iter().flatten());
            skel.extend(&r.pose.skeletal);
            rot.extend(local_rotations(&r.pose));
            rr.extend(r.pose.root_rotation);
            rt.extend(r.pose.root_translation);
        }
        let rest = g.constant(n, 3 * v, rest);
        let skel = g.constant(n, n_k, skel);
        let rot = g.constant(n, 9 * j, rot);
        let rr = g.constant(n, 3, rr);
        let rt = g.constant(n, 3, rt);

        let (beta_s, offsets) = autoencode(g, &b.surface, rest);
        let (beta_k, ell) = autoencode(g, &b.skeletal, skel);
        let bp = self.correctives.apply(g, &b.correctives, rot);
        let tiled: Vec<f64> = (0..n).flat_map(|_| template.iter().copied()).collect();
        let shaped = g.add(offsets, bp);
        let shaped = g.add_const(shaped, &tiled);
        let world = g.forward_kinematics(&self.layout, rr, rt, rot, ell);
        let posed = g.skin(&self.layout, world, shaped, b.skin, &self.skin_joints, None);

        let diff = g.add_const(posed, &target.iter().map(|x| -x).collect::<Vec<_>>());
        let data = g.sum_sq(diff);
        let data = g.scale(data, 1.0 / (n * v) as f64);
        let shape_reg = g.sum_sq(beta_s);
        let shape_reg = g.scale(shape_reg, 1.0 / n as f64);
        let skele_reg = g.sum_sq(beta_k);
        let skele_reg = g.scale(skele_reg, 1.0 / n as f64);
        let dense = g.slots_to_dense(b.skin, &self.skin_joints, j);
        let dense = g.reshape(dense, 1, v * j);
        let skin_lapl = g.cotan_energy(dense, j, &self.edges, &self.cotan);
        let pc_lapl = g.cotan_energy(bp, 3, &self.edges, &self.cotan);
        let pc_lapl = g.scale(pc_lapl, 1.0 / n as f64);
        let init = g.constant(v, MAX_INFLUENCES, self.skin_init.iter().map(|x| -x).collect());
        let dev = g.add(b.skin, init);
        let skin_init = g.sum_sq(dev);
        let skin_init = g.scale(skin_init, 1.0 / (v * MAX_INFLUENCES) as f64);
        let gate_count: usize = self.correctives.joints.iter().map(|jc| jc.support.len()).sum();
        let gates: Vec<Var> = b
            .correctives
            .joints
            .iter()
            .map(|bj| {
                let r = g.relu(bj.logits);
                g.sum(r)
            })
            .collect();
        let act = g.linear_combination(&gates.iter().map(|&x| (x, 1.0 / gate_count.max(1) as f64)).collect::<Vec<_>>());
        let terms = [data, shape_reg, skele_reg, skin_lapl, pc_lapl, skin_init, act];
        let total = g.linear_combination(&[
            (data, w.data),
            (shape_reg, w.shape_reg),
            (skele_reg, w.skele_reg),
            (skin_lapl, w.skin_lapl),
            (pc_lapl, w.pc_lapl),
            (skin_init, w.skin_init),
            (act, w.pc_act_reg),
        ]);
        (total, terms)
    }

    /// Projects every skin-weight row onto the simplex over its active
    /// slots.
    pub fn project_skin(&mut self) {
        for (row, mask) in self
            .skin
            .chunks_exact_mut(MAX_INFLUENCES)
            .zip(self.skin_active.chunks_exact(MAX_INFLUENCES))
        {
            project_simplex(row, mask);
        }
    }

    /// Trained bases, correctives and skin weights as a model.
    pub fn to_model(&self) -> BodyModel {
        let mut rig = self.rig.clone();
        for (dst, src) in rig.skin.weights.iter_mut().zip(self.skin.chunks_exact(MAX_INFLUENCES)) {
            dst.copy_from_slice(src);
        }
        let mut model = BodyModel::from_rig(rig);
        model.surface = self.surface.basis();
        model.skeletal = self.skeletal.basis();
        model.correctives = Some(self.correctives.clone());
        model
    }
}

fn clamp_components(what: &str, wanted: usize, samples: usize, dim: usize) -> usize {
    let n = wanted.min(samples).min(dim);
    if n < wanted {
        log::warn!("{what} components clamped from {wanted} to {n} by sample count or dimension");
    }
    n
}

/// Latents and reconstruction of rows `x` through an affine autoencoder.
fn autoencode(g: &mut Graph, ae: &[Var; 4], x: Var) -> (Var, Var) {
    let z = g.matmul_nt(x, ae[0]);
    let z = g.add_row(z, ae[1]);
    let y = g.matmul_nt(z, ae[2]);
    let y = g.add_row(y, ae[3]);
    (z, y)
}

/// Euclidean projection onto `{w >= 0, sum w = 1}` restricted to `mask`;
/// masked-out entries become 0.
pub fn project_simplex(w: &mut [f64], mask: &[bool]) {
    let mut vals: Vec<f64> = w.iter().zip(mask).filter(|(_, m)| **m).map(|(x, _)| *x).collect();
    if vals.is_empty() {
        return;
    }
    vals.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &u) in vals.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    for (x, m) in w.iter_mut().zip(mask) {
        *x = if *m { (*x - tau).max(0.0) } else { 0.0 };
    }
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: LossTerms,
}

/// Loss of `state` on a batch; every term is reported unweighted.
pub fn loss(state: &TrainState, batch: &[&Registration], weights: &LossWeights) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Precondition("loss needs a non-empty batch".into()));
    }
    let mut g = Graph::new();
    let b = state.bind(&mut g);
    let (total, t) = state.build(&mut g, &b, batch, weights);
    Ok(LossReport {
        total: g.scalar_value(total),
        terms: terms_of(&g, &t),
    })
}

fn terms_of(g: &Graph, t: &[Var; 7]) -> LossTerms {
    let v = |k: usize| g.scalar_value(t[k]);
    LossTerms {
        data: v(0),
        shape_reg: v(1),
        skele_reg: v(2),
        skin_lapl: v(3),
        pc_lapl: v(4),
        skin_init: v(5),
        pc_act_reg: v(6),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub terms: LossTerms,
    pub active_gates: usize,
    pub seconds: f64,
}

enum Opt {
    Adam(Adam),
    Momentum(Momentum),
}

/// Gradient-based minimization of the loss. `on_epoch` receives one record
/// per epoch (the JSON-lines log).
pub fn train(
    rig: &Rig,
    regs: &[Registration],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainEpoch),
) -> Result<(TrainState, Vec<TrainEpoch>)> {
    cfg.check()?;
    let mut state = TrainState::new(rig, regs, cfg)?;
    let sizes: Vec<usize> = state.tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Adam => Opt::Adam(Adam::new(&sizes)),
        OptimizerKind::Momentum => Opt::Momentum(Momentum::new(&sizes, cfg.momentum)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a17);
    let mut order: Vec<usize> = (0..regs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        crate::shape::shuffle(&mut order, &mut rng);
        let lrs = state.learning_rates(cfg, epoch < cfg.warmup_epochs);
        let mut sum = LossTerms::default();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Registration> = chunk.iter().map(|&i| &regs[i]).collect();
            let mut g = Graph::new();
            let b = state.bind(&mut g);
            let (l, t) = state.build(&mut g, &b, &batch, &cfg.weights);
            let terms = terms_of(&g, &t);
            if let Some((name, _)) = terms.named().iter().find(|(_, x)| !x.is_finite()) {
                return Err(Error::NonFinite(format!("loss term `{name}` at epoch {epoch}")));
            }
            let frac = batch.len() as f64 / regs.len() as f64;
            sum.add_scaled(&terms, frac);
            total += frac * g.scalar_value(l);
            let mut grads = g.backward(l);
            let gs: Vec<Vec<f64>> = b.vars().into_iter().map(|v| grads.take(v)).collect();
            if gs.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            match &mut opt {
                Opt::Adam(a) => a.step(&mut state.tensors_mut(), &gs, &lrs),
                Opt::Momentum(m) => m.step(&mut state.tensors_mut(), &gs, &lrs),
            }
            state.project_skin();
        }
        let rec = TrainEpoch {
            epoch,
            loss: total,
            terms: sum,
            active_gates: state.correctives.active_count(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok((state, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub vertex_mm: f64,
    pub joint_mm: f64,
    pub count: usize,
}

/// Mean vertex and FK joint errors (mm) of a model on registrations whose
/// rest surface and skeletal attributes are projected onto the model bases.
pub fn evaluate(model: &BodyModel, regs: &[Registration]) -> Result<EvalReport> {
    if regs.is_empty() {
        return Err(Error::Precondition("evaluation needs at least one registration".into()));
    }
    let template = model.rig.template.flat();
    let kin = Kinematics::new(&model.rig);
    let kernel = SkinningKernel::new(&model.rig.skin, model.rig.joint_count());
    let (mut ve, mut je) = (0.0, 0.0);
    let mut out = vec![[0.0; 3]; model.rig.vertex_count()];
    for r in regs {
        let d: Vec<f64> = r.rest_vertices.iter().flatten().zip(&template).map(|(a, b)| a - b).collect();
        let bs = model.surface.project(&d);
        let bk = model.skeletal.project(&r.pose.skeletal);
        let mut pose = r.pose.clone();
        pose.skeletal = eval_basis(&model.skeletal, &bk)?;
        let mut params = crate::model::ModelParams::zero();
        params.beta_s = bs;
        let shaped = model.shaped_vertices(&params, &pose)?;
        let t = kin.transforms(&pose);
        kernel.apply(&shaped, &t.skinning, &mut out);
        ve += out.iter().zip(&r.vertices).map(|(a, b)| crate::mesh::dist(*a, *b)).sum::<f64>() / out.len() as f64;
        let truth = joint_positions(&kin.transforms(&r.pose));
        let got = joint_positions(&t);
        je += got.iter().zip(&truth).map(|(a, b)| crate::mesh::dist(*a, *b)).sum::<f64>() / got.len() as f64;
    }
    let n = regs.len() as f64;
    Ok(EvalReport {
        vertex_mm: 1e3 * ve / n,
        joint_mm: 1e3 * je / n,
        count: regs.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub nonlinear: EvalReport,
    pub linear: EvalReport,
    pub relative_improvement: f64,
}

/// Trains the non-linear and linear corrective variants with identical
/// data, masks (gates frozen) and schedule; compares held-out errors.
pub fn corrective_ablation(rig: &Rig, train_set: &[Registration], held_out: &[Registration], cfg: &TrainConfig) -> Result<AblationReport> {
    let run = |kind: CorrectiveKind| -> Result<EvalReport> {
        let mut c = cfg.clone();
        c.corrective.kind = kind;
        c.lr_gate = 0.0;
        c.weights.pc_act_reg = 0.0;
        let (state, _) = train(rig, train_set, &c, &mut |_| {})?;
        evaluate(&state.to_model(), held_out)
    };
    let nonlinear = run(CorrectiveKind::NonLinear)?;
    let linear = run(CorrectiveKind::Linear)?;
    Ok(AblationReport {
        relative_improvement: (linear.vertex_mm - nonlinear.vertex_mm) / linear.vertex_mm,
        nonlinear,
        linear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::make_desk_rig;

    fn oracle() -> OracleModel {
        OracleModel::new(&make_desk_rig(0, 17, 12).unwrap(), &OracleConfig::default()).unwrap()
    }

    #[test]
    fn zero_pose_single_subject_equals_shaped_template() {
        let o = oracle();
        let rig = o.rig();
        let (bs, bk) = (vec![0.5, -1.0, 0.2, 0.0], vec![0.0; 3]);
        let r = o.registration(0, &bs, &bk, &PoseState::zero(rig)).unwrap();
        let s = eval_basis(&o.model.surface, &bs).unwrap();
        for (i, v) in r.vertices.iter().enumerate() {
            for k in 0..3 {
                let want = rig.template.vertices[i][k] + s[3 * i + k];
                assert!((v[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let o = oracle();
        let a = synth_dataset(&o, 2, 3, 5).unwrap();
        let b = synth_dataset(&o, 2, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let bytes = dataset_to_bytes(o.rig(), &a);
        let back = dataset_from_bytes(&bytes, o.rig()).unwrap();
        assert_eq!(dataset_to_bytes(o.rig(), &back), bytes);
        assert!((back[3].vertices[10][1] - a[3].vertices[10][1]).abs() < 1e-6);
        assert!(synth_dataset(&o, 0, 3, 5).is_err());
    }

    #[test]
    fn oracle_corrective_is_one_sided() {
        let o = oracle();
        let mut p = PoseState::zero(o.rig());
        let j = o.correctives[1].joint;
        p.joint_angles[j][0] = -0.8;
        assert!(o.corrective_offsets(&p).iter().all(|x| *x == 0.0));
        p.joint_angles[j][0] = 0.8;
        assert!(o.corrective_offsets(&p).iter().any(|x| *x != 0.0));
    }

    #[test]
    fn self_consistency_data_term() {
        let cfg = OracleConfig {
            corrective_amplitude: 0.0,
            ..Default::default()
        };
        let o = OracleModel::new(&make_desk_rig(0, 17, 12).unwrap(), &cfg).unwrap();
        let regs = synth_dataset(&o, 6, 2, 1).unwrap();
        let tc = TrainConfig {
            surface_components: 4,
            skeletal_components: 3,
            autoencoder_epochs: 0,
            ..Default::default()
        };
        let state = TrainState::new(o.rig(), &regs, &tc).unwrap();
        let batch: Vec<&Registration> = regs.iter().collect();
        let rep = loss(&state, &batch, &tc.weights).unwrap();
        assert!(rep.terms.data < 1e-10, "{}", rep.terms.data);
        assert_eq!(rep.terms.pc_lapl, 0.0);
        assert_eq!(rep.terms.skin_init, 0.0);
    }

    #[test]
    fn simplex_projection_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..1.5)).collect();
            let mask: Vec<bool> = (0..8).map(|k| k < 5 || rng.random_bool(0.5)).collect();
            project_simplex(&mut w, &mask);
            assert!(w.iter().all(|x| *x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().zip(&mask).all(|(x, m)| *m || *x == 0.0));
        }
        let mut w = vec![0.2, 0.3, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let before = w.clone();
        project_simplex(&mut w, &[true, true, true, false, false, false, false, false]);
        assert_eq!(w, before);
    }

    #[test]
    fn uniform_skin_column_has_zero_laplacian() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let cw = cotangent_weights(&rig.template.vertices, &rig.template.faces);
        let mut g = Graph::new();
        let f = g.constant(1, rig.vertex_count(), vec![0.37; rig.vertex_count()]);
        let e = g.cotan_energy(f, 1, &Arc::new(cw.edges), &Arc::new(cw.weights));
        assert_eq!(g.scalar_value(e), 0.0);
    }

    #[test]
    fn isolated_terms_decrease_under_their_own_step() {
        let o = oracle();
        let regs = synth_dataset(&o, 4, 2, 2).unwrap();
        let tc = TrainConfig {
            surface_components: 4,
            skeletal_components: 3,
            autoencoder_epochs: 0,
            ..Default::default()
        };
        let mut state = TrainState::new(o.rig(), &regs, &tc).unwrap();
        // move off the minima of the init and Laplacian terms
        state
            .skin
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w += 0.01 * ((i as f64) * 0.37).sin());
        for jc in &mut state.correctives.joints {
            jc.p.data
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = 1e-3 * ((i as f64) * 0.11).cos());
        }
        let batch: Vec<&Registration> = regs.iter().collect();
        let zero = LossWeights {
            data: 0.0,
            shape_reg: 0.0,
            skele_reg: 0.0,
            skin_lapl: 0.0,
            pc_lapl: 0.0,
            skin_init: 0.0,
            pc_act_reg: 0.0,
        };
        let cases: [(&str, LossWeights, fn(&LossTerms) -> f64); 7] = [
            ("data", LossWeights { data: 1.0, ..zero }, |t| t.data),
            ("shape_reg", LossWeights { shape_reg: 1.0, ..zero }, |t| t.shape_reg),
            ("skele_reg", LossWeights { skele_reg: 1.0, ..zero }, |t| t.skele_reg),
            ("skin_lapl", LossWeights { skin_lapl: 1.0, ..zero }, |t| t.skin_lapl),
            ("pc_lapl", LossWeights { pc_lapl: 1.0, ..zero }, |t| t.pc_lapl),
            ("skin_init", LossWeights { skin_init: 1.0, ..zero }, |t| t.skin_init),
            ("pc_act_reg", LossWeights { pc_act_reg: 1.0, ..zero }, |t| t.pc_act_reg),
        ];
        for (name, w, pick) in cases {
            let mut s = state.clone();
            let before = pick(&loss(&s, &batch, &w).unwrap().terms);
            let mut g = Graph::new();
            let b = s.bind(&mut g);
            let (l, _) = s.build(&mut g, &b, &batch, &w);
            let mut grads = g.backward(l);
            let gs: Vec<Vec<f64>> = b.vars().into_iter().map(|v| grads.take(v)).collect();
            let gmax = gs.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
            let lr = 1e-3 / gmax.max(1e-300);
            for (t, gr) in s.tensors_mut().into_iter().zip(&gs) {
                t.iter_mut().zip(gr).for_each(|(x, d)| *x -= lr * d);
            }
            let after = pick(&loss(&s, &batch, &w).unwrap().terms);
            assert!(after < before, "{name}: {after} !< {before}");
        }
    }

    #[test]
    fn short_training_reduces_data_term_and_keeps_simplex() {
        let o = oracle();
        let regs = synth_dataset(&o, 4, 8, 3).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch: 8,
            surface_components: 4,
            skeletal_components: 3,
            autoencoder_epochs: 2,
            warmup_epochs: 1,
            corrective: CorrectiveConfig {
                hidden: vec![16],
                ..Default::default()
            },
            ..Default::default()
        };
        let mut seen = Vec::new();
        let (state, log) = train(o.rig(), &regs, &tc, &mut |e| seen.push(e.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert!(log[2].terms.data < log[0].terms.data);
        for row in state.skin.chunks_exact(MAX_INFLUENCES) {
            assert!(row.iter().all(|x| *x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (again, _) = train(o.rig(), &regs, &tc, &mut |_| {}).unwrap();
        assert_eq!(again.skin, state.skin);
        assert_eq!(again.correctives, state.correctives);
    }
}
