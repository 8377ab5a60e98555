//! The full body model: rig plus shape bases, pose correctives and pose
//! priors, the parameter-to-mesh pipeline, and container persistence.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::FkLayout;
use crate::correctives::{eval_correctives, CorrectiveKind, CorrectiveNet, JointCorrective};
use crate::error::{Error, Result};
use crate::kinematics::{joint_positions, JointTransforms, Kinematics, PoseState};
use crate::mesh::vertex_normals;
use crate::nn::Dense;
use crate::optim::Tensor;
use crate::prior::PoseVae;
use crate::rig::{read_rig, write_rig, Container, ContainerWriter, Rig, MAX_INFLUENCES};
use crate::shape::{eval_basis, shape_surface, BasisDomain, LinearBasis, DEFAULT_SKELETAL_COMPONENTS};
use crate::skinning::SkinningKernel;

/// Expression components shipped with desk rigs.
pub const DESK_EXPRESSION_COMPONENTS: usize = 4;

/// Surface components of the procedural basis used before training.
pub const PROCEDURAL_SURFACE_COMPONENTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub rig: Rig,
    pub surface: LinearBasis,
    pub expression: LinearBasis,
    pub skeletal: LinearBasis,
    pub correctives: Option<CorrectiveNet>,
    pub pose_prior: Option<PoseVae>,
    pub hand_pca: Option<LinearBasis>,
}

/// Everything needed to produce one mesh. Empty vectors mean zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub beta_s: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub beta_k: Vec<f64>,
    /// Direct skeletal-attribute values by name; they replace the value
    /// produced by `beta_k`.
    pub attributes: BTreeMap<String, f64>,
    /// Per-joint Euler angles, `3J` values (or empty).
    pub theta: Vec<f64>,
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
    #[serde(default = "default_true")]
    pub apply_correctives: bool,
}

fn default_true() -> bool {
    true
}

impl ModelParams {
    pub fn zero() -> Self {
        ModelParams {
            apply_correctives: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub vertices: Vec<[f64; 3]>,
    pub joints: Vec<[f64; 3]>,
    pub transforms: JointTransforms,
    pub pose: PoseState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub rig_id: String,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "N_k")]
    pub n_k: usize,
    pub components: ComponentCounts,
    pub attributes: Vec<AttributeMeta>,
    pub joint_names: Vec<String>,
    pub hand_joints: Vec<usize>,
    pub has_correctives: bool,
    pub has_pose_prior: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub surface: usize,
    pub expression: usize,
    pub skeletal: usize,
    pub hand: usize,
    pub pose_latent: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeMeta {
    pub name: String,
    pub kind: crate::rig::AttributeKind,
    pub range: [f64; 2],
    pub joints: Vec<usize>,
}

impl BodyModel {
    /// Untrained model: procedural surface basis, desk expression basis,
    /// axis-aligned skeletal basis, no correctives or priors.
    pub fn from_rig(rig: Rig) -> Self {
        let surface = procedural_surface_basis(&rig, PROCEDURAL_SURFACE_COMPONENTS, 0);
        let expression = desk_expression_basis(&rig);
        let skeletal = axis_skeletal_basis(&rig, DEFAULT_SKELETAL_COMPONENTS);
        BodyModel {
            rig,
            surface,
            expression,
            skeletal,
            correctives: None,
            pose_prior: None,
            hand_pca: None,
        }
    }

    pub fn meta(&self) -> ModelMeta {
        let rig = &self.rig;
        ModelMeta {
            rig_id: rig.id.clone(),
            j: rig.joint_count(),
            v: rig.vertex_count(),
            f: rig.template.faces.len(),
            n_k: rig.attribute_count(),
            components: ComponentCounts {
                surface: self.surface.n_comp(),
                expression: self.expression.n_comp(),
                skeletal: self.skeletal.n_comp(),
                hand: self.hand_pca.as_ref().map_or(0, |h| h.n_comp()),
                pose_latent: self.pose_prior.as_ref().map_or(0, |p| p.latent_dim),
            },
            attributes: rig
                .schema
                .attributes
                .iter()
                .map(|a| AttributeMeta {
                    name: a.name.clone(),
                    kind: a.kind,
                    range: a.range,
                    joints: a.targets.iter().map(|t| t.joint).collect(),
                })
                .collect(),
            joint_names: rig.tree.names().to_vec(),
            hand_joints: rig.hand_joints.clone(),
            has_correctives: self.correctives.is_some(),
            has_pose_prior: self.pose_prior.is_some(),
        }
    }

    /// Skeletal attributes `ℓ`: the basis output with named overrides.
    pub fn attributes(&self, beta_k: &[f64], overrides: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let mut l = eval_basis(&self.skeletal, beta_k)?;
        for (name, value) in overrides {
            let idx = self.rig.schema.index_of(name).ok_or_else(|| {
                Error::Input(format!(
                    "unknown attribute `{name}`; valid names: {}",
                    self.rig.schema.names().join(", ")
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("attribute `{name}`")));
            }
            l[idx] = *value;
        }
        Ok(l)
    }

    pub fn pose_state(&self, params: &ModelParams) -> Result<PoseState> {
        let j = self.rig.joint_count();
        let joint_angles = match params.theta.len() {
            0 => vec![[0.0; 3]; j],
            n if n == 3 * j => params.theta.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            n => return Err(Error::dim("theta", 3 * j, n)),
        };
        let pose = PoseState {
            root_rotation: params.root_rotation,
            root_translation: params.root_translation,
            joint_angles,
            skeletal: self.attributes(&params.beta_k, &params.attributes)?,
        };
        pose.check(&self.rig)?;
        Ok(pose)
    }

    /// Rest-pose surface with shape, expression and (optionally) pose
    /// correctives for `pose`.
    pub fn shaped_vertices(&self, params: &ModelParams, pose: &PoseState) -> Result<Vec<[f64; 3]>> {
        let mut x = shape_surface(&self.rig, &self.surface, &self.expression, &params.beta_s, &params.beta_f)?.vertices;
        if params.apply_correctives {
            if let Some(net) = &self.correctives {
                let bp = eval_correctives(net, &self.rig, pose)?;
                for (i, v) in x.iter_mut().enumerate() {
                    for c in 0..3 {
                        v[c] += bp[3 * i + c];
                    }
                }
            }
        }
        Ok(x)
    }

    /// shape, correctives, FK and skinning.
    pub fn mesh(&self, params: &ModelParams) -> Result<ModelOutput> {
        let pose = self.pose_state(params)?;
        let shaped = self.shaped_vertices(params, &pose)?;
        if shaped.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("shaped vertices".into()));
        }
        self.pose_shaped(&shaped, pose)
    }

    /// FK and skinning of an already shaped rest surface.
    pub fn pose_shaped(&self, shaped: &[[f64; 3]], pose: PoseState) -> Result<ModelOutput> {
        let kin = Kinematics::new(&self.rig);
        let transforms = kin.transforms(&pose);
        let kernel = SkinningKernel::new(&self.rig.skin, self.rig.joint_count());
        let mut vertices = vec![[0.0; 3]; shaped.len()];
        kernel.apply(shaped, &transforms.skinning, &mut vertices);
        Ok(ModelOutput {
            vertices,
            joints: joint_positions(&transforms),
            transforms,
            pose,
        })
    }

    pub fn fk_layout(&self) -> Arc<FkLayout> {
        Arc::new(FkLayout::new(&Kinematics::new(&self.rig), self.rig.attribute_count()))
    }

    pub fn check(&self) -> Result<()> {
        let m = 3 * self.rig.vertex_count();
        for (b, dim) in [
            (&self.surface, m),
            (&self.expression, m),
            (&self.skeletal, self.rig.attribute_count()),
        ] {
            if b.dim() != dim {
                return Err(Error::dim(format!("{:?} basis dimension", b.domain), dim, b.dim()));
            }
        }
        if let Some(net) = &self.correctives {
            net.check(&self.rig)?;
        }
        if let Some(h) = &self.hand_pca {
            let want = 6 * self.rig.hand_joints.len();
            if h.dim() != want {
                return Err(Error::dim("hand PCA dimension", want, h.dim()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ContainerWriter::new("armature");
        write_rig(&mut w, &self.rig);
        let mut header = ModelHeader {
            bases: Vec::new(),
            correctives: None,
            pose_prior: None,
        };
        let mut bases = vec![
            ("surface", &self.surface),
            ("expression", &self.expression),
            ("skeletal", &self.skeletal),
        ];
        if let Some(h) = &self.hand_pca {
            bases.push(("hand", h));
        }
        for (name, b) in bases {
            header.bases.push(BasisHeader {
                name: name.to_string(),
                domain: b.domain,
                dim: b.dim(),
                n_comp: b.n_comp(),
            });
            w.f32(&format!("{name}_mean"), &b.mean);
            w.f32(&format!("{name}_components"), &b.components.data);
        }
        if let Some(net) = &self.correctives {
            let mut joints = Vec::new();
            for jc in &net.joints {
                let j = jc.joint;
                w.u32(&format!("pc_{j}_support"), &jc.support);
                w.f32(&format!("pc_{j}_p"), &jc.p.data);
                w.f32(&format!("pc_{j}_logits"), &jc.logits);
                write_layers(&mut w, &format!("pc_{j}"), &jc.layers);
                joints.push(CorrectiveJointHeader {
                    joint: j,
                    neighbors: jc.neighbors.clone(),
                    support: jc.support.len(),
                    p_cols: jc.p.cols,
                    layers: layer_dims(&jc.layers),
                });
            }
            header.correctives = Some(CorrectiveHeader {
                kind: net.kind,
                feature_dim: net.feature_dim,
                hidden: net.hidden.clone(),
                joints,
            });
        }
        if let Some(vae) = &self.pose_prior {
            write_layers(&mut w, "vae_enc", &vae.encoder);
            write_layers(&mut w, "vae_dec", &vae.decoder);
            header.pose_prior = Some(VaeHeader {
                joints: vae.joints.clone(),
                latent_dim: vae.latent_dim,
                encoder: layer_dims(&vae.encoder),
                decoder: layer_dims(&vae.decoder),
            });
        }
        w.meta("model", &header);
        w.to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a model file; a bare rig container yields [`BodyModel::from_rig`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        let rig = read_rig(&c)?;
        rig.validate()?;
        if !c.has_meta("model") {
            return Ok(BodyModel::from_rig(rig));
        }
        let header: ModelHeader = c.meta("model")?;
        let mut bases: BTreeMap<String, LinearBasis> = BTreeMap::new();
        for b in &header.bases {
            let mean = c.f32(&format!("{}_mean", b.name), Some(b.dim))?;
            let comps = c.f32(&format!("{}_components", b.name), Some(b.dim * b.n_comp))?;
            bases.insert(
                b.name.clone(),
                LinearBasis::new(b.domain, mean, Tensor::new(b.n_comp, b.dim, comps))?,
            );
        }
        let mut take = |name: &str| {
            bases
                .remove(name)
                .ok_or_else(|| Error::parse(format!("{name}_mean"), "basis missing"))
        };
        let surface = take("surface")?;
        let expression = take("expression")?;
        let skeletal = take("skeletal")?;
        let hand_pca = bases.remove("hand");
        let correctives = match header.correctives {
            None => None,
            Some(h) => {
                let mut joints = Vec::with_capacity(h.joints.len());
                for jh in h.joints {
                    let j = jh.joint;
                    let support = c.u32(&format!("pc_{j}_support"), Some(jh.support))?;
                    let p = c.f32(&format!("pc_{j}_p"), Some(3 * jh.support * jh.p_cols))?;
                    let logits = c.f32(&format!("pc_{j}_logits"), Some(jh.support))?;
                    if support.iter().any(|&v| v as usize >= rig.vertex_count()) {
                        return Err(Error::parse(format!("pc_{j}_support"), "vertex index out of range"));
                    }
                    joints.push(JointCorrective {
                        joint: j,
                        neighbors: jh.neighbors,
                        layers: read_layers(&c, &format!("pc_{j}"), &jh.layers)?,
                        support,
                        p: Tensor::new(3 * jh.support, jh.p_cols, p),
                        logits,
                    });
                }
                Some(CorrectiveNet {
                    kind: h.kind,
                    feature_dim: h.feature_dim,
                    hidden: h.hidden,
                    vertex_count: rig.vertex_count(),
                    joint_count: rig.joint_count(),
                    joints,
                })
            }
        };
        let pose_prior = match header.pose_prior {
            None => None,
            Some(h) => Some(PoseVae {
                joints: h.joints,
                latent_dim: h.latent_dim,
                encoder: read_layers(&c, "vae_enc", &h.encoder)?,
                decoder: read_layers(&c, "vae_dec", &h.decoder)?,
            }),
        };
        let model = BodyModel {
            rig,
            surface,
            expression,
            skeletal,
            correctives,
            pose_prior,
            hand_pca,
        };
        model.check()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        BodyModel::from_bytes(&bytes)
    }

    /// Round-trips through the container so in-memory values carry the
    /// same f32 quantization as a saved file.
    pub fn quantized(&self) -> Result<Self> {
        BodyModel::from_bytes(&self.to_bytes())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    bases: Vec<BasisHeader>,
    correctives: Option<CorrectiveHeader>,
    pose_prior: Option<VaeHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisHeader {
    name: String,
    domain: BasisDomain,
    dim: usize,
    n_comp: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrectiveHeader {
    kind: CorrectiveKind,
    feature_dim: usize,
    hidden: Vec<usize>,
    joints: Vec<CorrectiveJointHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrectiveJointHeader {
    joint: usize,
    neighbors: Vec<Option<usize>>,
    support: usize,
    p_cols: usize,
    layers: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VaeHeader {
    joints: Vec<usize>,
    latent_dim: usize,
    encoder: Vec<[usize; 2]>,
    decoder: Vec<[usize; 2]>,
}

/// `[out, in]` per layer.
fn layer_dims(layers: &[Dense]) -> Vec<[usize; 2]> {
    layers.iter().map(|l| [l.w.rows, l.w.cols]).collect()
}

fn write_layers(w: &mut ContainerWriter, prefix: &str, layers: &[Dense]) {
    for (k, l) in layers.iter().enumerate() {
        w.f32(&format!("{prefix}_l{k}_w"), &l.w.data);
        w.f32(&format!("{prefix}_l{k}_b"), &l.b);
    }
}

fn read_layers(c: &Container, prefix: &str, dims: &[[usize; 2]]) -> Result<Vec<Dense>> {
    dims.iter()
        .enumerate()
        .map(|(k, &[out, inp])| {
            Ok(Dense {
                w: Tensor::new(out, inp, c.f32(&format!("{prefix}_l{k}_w"), Some(out * inp))?),
                b: c.f32(&format!("{prefix}_l{k}_b"), Some(out))?,
            })
        })
        .collect()
}

/// Smooth normal-direction fields: each component is a sum of a few seeded
/// Gaussian bumps on the template, scaled to at most 1 cm per unit
/// coefficient.
pub fn procedural_surface_basis(rig: &Rig, n_comp: usize, seed: u64) -> LinearBasis {
    let verts = &rig.template.vertices;
    let v = verts.len();
    let normals = vertex_normals(verts, &rig.template.faces);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_comp = n_comp.min(3 * v);
    let mut data = Vec::with_capacity(n_comp * 3 * v);
    for _ in 0..n_comp {
        let bumps: Vec<([f64; 3], f64, f64)> = (0..3)
            .map(|_| {
                let c = verts[rng.random_range(0..v)];
                (c, rng.random_range(0.08..0.25), rng.random_range(-1.0..1.0))
            })
            .collect();
        let field: Vec<f64> = verts
            .iter()
            .map(|p| {
                bumps
                    .iter()
                    .map(|(c, r, a)| {
                        let d2 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
                        a * (-d2 / (2.0 * r * r)).exp()
                    })
                    .sum()
            })
            .collect();
        let peak = field.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        for (f, n) in field.iter().zip(&normals) {
            for k in 0..3 {
                data.push(0.01 * f / peak * n[k]);
            }
        }
    }
    LinearBasis::new(BasisDomain::Surface, vec![0.0; 3 * v], Tensor::new(n_comp, 3 * v, data)).expect("finite basis")
}

/// Toy expression basis over the head segment: jaw drop, cheek puff, brow
/// raise and mouth widening.
pub fn desk_expression_basis(rig: &Rig) -> LinearBasis {
    let v = rig.vertex_count();
    let Some(head) = rig.tree.index_of("head") else {
        return LinearBasis::empty(BasisDomain::Expression, 3 * v);
    };
    let verts = &rig.template.vertices;
    let normals = vertex_normals(verts, &rig.template.faces);
    let members: Vec<usize> = (0..v).filter(|&i| rig.segmentation[i] as usize == head).collect();
    if members.is_empty() {
        return LinearBasis::empty(BasisDomain::Expression, 3 * v);
    }
    let c: [f64; 3] = std::array::from_fn(|k| members.iter().map(|&i| verts[i][k]).sum::<f64>() / members.len() as f64);
    let radius = members
        .iter()
        .map(|&i| (0..3).map(|k| (verts[i][k] - c[k]).powi(2)).sum::<f64>().sqrt())
        .fold(1e-6, f64::max);
    let mut data = vec![0.0; DESK_EXPRESSION_COMPONENTS * 3 * v];
    for &i in &members {
        let r = [
            (verts[i][0] - c[0]) / radius,
            (verts[i][1] - c[1]) / radius,
            (verts[i][2] - c[2]) / radius,
        ];
        let front = r[2].max(0.0);
        let low = (-r[1]).max(0.0);
        let high = r[1].max(0.0);
        let fields = [
            [0.0, -0.01 * low * front, 0.0],
            normals[i].map(|n| 0.005 * n * front * (-4.0 * r[1] * r[1]).exp()),
            [0.0, 0.005 * high * high * front, 0.0],
            [0.005 * r[0] * low * front, 0.0, 0.0],
        ];
        for (k, f) in fields.iter().enumerate() {
            for d in 0..3 {
                data[k * 3 * v + 3 * i + d] = f[d];
            }
        }
    }
    LinearBasis::new(
        BasisDomain::Expression,
        vec![0.0; 3 * v],
        Tensor::new(DESK_EXPRESSION_COMPONENTS, 3 * v, data),
    )
    .expect("finite basis")
}

/// One component per attribute (up to `n_comp`), each spanning a quarter
/// of the attribute's range; zero mean.
pub fn axis_skeletal_basis(rig: &Rig, n_comp: usize) -> LinearBasis {
    let attrs = &rig.schema.attributes;
    let n = attrs.len();
    let n_comp = n_comp.min(n);
    let mut data = vec![0.0; n_comp * n];
    for (k, a) in attrs.iter().take(n_comp).enumerate() {
        data[k * n + k] = 0.25 * (a.range[1] - a.range[0]);
    }
    LinearBasis::new(BasisDomain::Skeletal, vec![0.0; n], Tensor::new(n_comp, n, data)).expect("finite basis")
}

/// Flat `V x I` slot weights and slot joints of the rig's skin.
pub fn skin_slots(rig: &Rig) -> (Vec<f64>, Arc<Vec<u32>>) {
    let w = rig.skin.weights.iter().flatten().copied().collect();
    let j = rig.skin.joints.iter().flatten().copied().collect();
    debug_assert_eq!(rig.skin.weights.first().map_or(MAX_INFLUENCES, |r| r.len()), MAX_INFLUENCES);
    (w, Arc::new(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correctives::CorrectiveConfig;
    use crate::prior::PoseVae;
    use crate::rig::make_desk_rig;

    fn desk() -> BodyModel {
        BodyModel::from_rig(make_desk_rig(0, 17, 12).unwrap())
    }

    #[test]
    fn zero_params_give_template() {
        let m = desk();
        let out = m.mesh(&ModelParams::zero()).unwrap();
        for (a, b) in out.vertices.iter().zip(&m.rig.template.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attribute_override_moves_only_its_subtree() {
        let m = desk();
        let base = m.mesh(&ModelParams::zero()).unwrap().joints;
        let mut p = ModelParams::zero();
        p.attributes.insert("shoulder_width".into(), 0.05);
        let moved = m.mesh(&p).unwrap().joints;
        let mut sub = m.rig.tree.subtree(5);
        sub.extend(m.rig.tree.subtree(8));
        for j in 0..m.rig.joint_count() {
            let changed = base[j] != moved[j];
            assert_eq!(changed, sub.contains(&j), "joint {j}");
        }
        p.attributes.insert("nope".into(), 1.0);
        let err = m.mesh(&p).unwrap_err().to_string();
        assert!(err.contains("shoulder_width"), "{err}");
    }

    #[test]
    fn surface_coefficients_leave_joints_bit_identical() {
        let m = desk();
        let base = m.mesh(&ModelParams::zero()).unwrap();
        let mut p = ModelParams::zero();
        p.beta_s = vec![1.0, -2.0, 0.5];
        p.beta_f = vec![1.0];
        let shaped = m.mesh(&p).unwrap();
        assert_eq!(base.joints, shaped.joints);
        assert!(base.vertices != shaped.vertices);
    }

    #[test]
    fn expression_basis_is_confined_to_head() {
        let m = desk();
        let head = m.rig.tree.index_of("head").unwrap();
        let v = m.rig.vertex_count();
        for k in 0..m.expression.n_comp() {
            let c = m.expression.component(k);
            assert!(c.iter().any(|x| *x != 0.0));
            for i in 0..v {
                if m.rig.segmentation[i] as usize != head {
                    assert!(c[3 * i..3 * i + 3].iter().all(|x| *x == 0.0));
                }
            }
        }
    }

    #[test]
    fn theta_length_is_checked() {
        let m = desk();
        let mut p = ModelParams::zero();
        p.theta = vec![0.0; 5];
        assert!(matches!(m.mesh(&p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = desk();
        let mut net = CorrectiveNet::new(
            &m.rig,
            &CorrectiveConfig {
                hidden: vec![8],
                ..Default::default()
            },
        );
        net.joints[6]
            .p
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = (i as f64 * 0.1).sin() * 0.01);
        m.correctives = Some(net);
        m.pose_prior = Some(PoseVae::new(m.rig.body_joints(), 4, 8, 1));
        let q = m.quantized().unwrap();
        let bytes = q.to_bytes();
        let back = BodyModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_bytes(), bytes);
        let mut p = ModelParams::zero();
        p.theta = vec![0.3; 3 * m.rig.joint_count()];
        let a = m.mesh(&p).unwrap().vertices;
        let b = back.mesh(&p).unwrap().vertices;
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bare_rig_loads_as_default_model() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let m = BodyModel::from_bytes(&crate::rig::rig_to_bytes(&rig)).unwrap();
        assert_eq!(m.skeletal.n_comp(), DEFAULT_SKELETAL_COMPONENTS);
        assert_eq!(m.expression.n_comp(), DESK_EXPRESSION_COMPONENTS);
    }
}
