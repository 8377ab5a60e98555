//! Sparse pose correctives: per-joint MLPs over 6D rotation residuals of the
//! joint's tree neighborhood, projected to vertex offsets and gated by a
//! ReLU activation map initialized from geodesic falloff.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kinematics::{Kinematics, PoseState};
use crate::math::{euler_xyz, rot6d, ROT6D_IDENTITY};
use crate::mesh;
use crate::nn::{bind_layers, init_layers, layer_tensors_mut, mlp, Dense};
use crate::optim::Tensor;
use crate::rig::Rig;

pub const DEFAULT_FEATURE_DIM: usize = 24;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
/// Ring vertices lie within this factor of the closest vertex distance.
pub const RING_FACTOR: f64 = 1.2;

/// `[self, parent, children ascending]`; `None` marks the missing parent of
/// the root.
pub fn neighborhood(rig: &Rig, j: usize) -> Vec<Option<usize>> {
    let mut n = vec![Some(j), rig.tree.parent(j)];
    let mut children = rig.tree.children(j).to_vec();
    children.sort_unstable();
    n.extend(children.into_iter().map(Some));
    n
}

/// Segments whose vertices may receive offsets from joint `j`: the part
/// owned by `j` and the part ending at `j` (owned by its parent).
pub fn support_segments(rig: &Rig, j: usize) -> Vec<usize> {
    let mut s = vec![j];
    s.extend(rig.tree.parent(j));
    s
}

/// Initial activation map `A` (`J x V`): `1 - d` on the support, where `d`
/// is the edge-graph geodesic distance from the ring of vertices nearest the
/// joint, normalized by its maximum over the support; zero elsewhere.
pub fn geodesic_init(rig: &Rig) -> Vec<Vec<f64>> {
    let kin = Kinematics::new(rig);
    let rest = kin.world(&PoseState::zero(rig));
    let verts = &rig.template.vertices;
    let nbrs = mesh::vertex_neighbors(verts.len(), &rig.template.faces);
    (0..rig.joint_count())
        .map(|j| {
            let segs = support_segments(rig, j);
            let in_support: Vec<bool> = rig.segmentation.iter().map(|s| segs.contains(&(*s as usize))).collect();
            let mut row = vec![0.0; verts.len()];
            let center = [rest[j][3], rest[j][7], rest[j][11]];
            let dist: Vec<f64> = verts.iter().map(|v| mesh::dist(*v, center)).collect();
            let dmin = (0..verts.len())
                .filter(|&i| in_support[i])
                .map(|i| dist[i])
                .fold(f64::INFINITY, f64::min);
            if !dmin.is_finite() {
                log::warn!("joint {} has an empty corrective support", rig.tree.name(j));
                return row;
            }
            let ring: Vec<usize> = (0..verts.len())
                .filter(|&i| in_support[i] && dist[i] <= RING_FACTOR * dmin + 1e-12)
                .collect();
            let d = dijkstra(verts, &nbrs, &in_support, &ring);
            let reached: Vec<usize> = (0..verts.len()).filter(|&i| in_support[i] && d[i].is_finite()).collect();
            if reached.len() < in_support.iter().filter(|x| **x).count() {
                log::warn!(
                    "joint {}: corrective support is disconnected; unreached vertices start inactive",
                    rig.tree.name(j)
                );
            }
            let dmax = reached.iter().map(|&i| d[i]).fold(0.0, f64::max);
            for &i in &reached {
                row[i] = if dmax > 0.0 { 1.0 - d[i] / dmax } else { 1.0 };
            }
            row
        })
        .collect()
}

/// Multi-source shortest edge paths restricted to `allowed` vertices.
fn dijkstra(verts: &[[f64; 3]], nbrs: &[Vec<u32>], allowed: &[bool], sources: &[usize]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; verts.len()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        d[s] = 0.0;
        heap.push(Reverse((0u64, s)));
    }
    // non-negative f64 bit patterns sort like the values
    while let Some(Reverse((bits, i))) = heap.pop() {
        let di = f64::from_bits(bits);
        if di > d[i] {
            continue;
        }
        for &n in &nbrs[i] {
            let n = n as usize;
            if !allowed[n] {
                continue;
            }
            let nd = di + mesh::dist(verts[i], verts[n]);
            if nd < d[n] {
                d[n] = nd;
                heap.push(Reverse((nd.to_bits(), n)));
            }
        }
    }
    d
}

/// 6D residual `R6d(R) - R6d(I)` of one rotation.
pub fn rotation_residual(r: &nalgebra::Matrix3<f64>) -> [f64; 6] {
    let f = rot6d(r);
    std::array::from_fn(|k| f[k] - ROT6D_IDENTITY[k])
}

/// Concatenated residuals of the neighborhood of `j` (a zero block for the
/// missing parent of the root).
pub fn pose_features(rig: &Rig, pose: &PoseState, j: usize) -> Result<Vec<f64>> {
    if j >= rig.joint_count() {
        return Err(Error::Input(format!("joint {j} out of range")));
    }
    let mut out = Vec::new();
    for a in neighborhood(rig, j) {
        match a {
            Some(a) => out.extend(rotation_residual(&euler_xyz(pose.joint_angles[a]))),
            None => out.extend([0.0; 6]),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectiveKind {
    /// Centered MLP followed by the projection.
    NonLinear,
    /// Projection applied directly to the features.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCorrective {
    pub joint: usize,
    pub neighbors: Vec<Option<usize>>,
    pub layers: Vec<Dense>,
    /// Vertices that may receive offsets; rows of `p` and `logits` follow
    /// this order.
    pub support: Vec<u32>,
    /// `3|support| x c` (`c` = feature width for the linear kind).
    pub p: Tensor,
    pub logits: Vec<f64>,
}

impl JointCorrective {
    pub fn input_dim(&self) -> usize {
        6 * self.neighbors.len()
    }

    pub fn active_count(&self) -> usize {
        self.logits.iter().filter(|a| **a > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveNet {
    pub kind: CorrectiveKind,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub vertex_count: usize,
    pub joint_count: usize,
    pub joints: Vec<JointCorrective>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectiveConfig {
    pub kind: CorrectiveKind,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for CorrectiveConfig {
    fn default() -> Self {
        CorrectiveConfig {
            kind: CorrectiveKind::NonLinear,
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: DEFAULT_HIDDEN.to_vec(),
            seed: 0,
        }
    }
}

impl CorrectiveNet {
    /// Geodesic-initialized gates, zero projections (so the net starts
    /// neutral) and seeded MLP weights.
    pub fn new(rig: &Rig, cfg: &CorrectiveConfig) -> Self {
        let init = geodesic_init(rig);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let joints = (0..rig.joint_count())
            .map(|j| {
                let neighbors = neighborhood(rig, j);
                let input = 6 * neighbors.len();
                let support: Vec<u32> = (0..rig.vertex_count()).filter(|&i| init[j][i] > 0.0).map(|i| i as u32).collect();
                let logits: Vec<f64> = support.iter().map(|&i| init[j][i as usize]).collect();
                let (layers, width) = match cfg.kind {
                    CorrectiveKind::NonLinear => {
                        let mut dims = vec![input];
                        dims.extend(&cfg.hidden);
                        dims.push(cfg.feature_dim);
                        (init_layers(&mut rng, &dims), cfg.feature_dim)
                    }
                    CorrectiveKind::Linear => (Vec::new(), input),
                };
                JointCorrective {
                    joint: j,
                    neighbors,
                    layers,
                    p: Tensor::zeros(3 * support.len(), width),
                    support,
                    logits,
                }
            })
            .collect();
        CorrectiveNet {
            kind: cfg.kind,
            feature_dim: cfg.feature_dim,
            hidden: cfg.hidden.clone(),
            vertex_count: rig.vertex_count(),
            joint_count: rig.joint_count(),
            joints,
        }
    }

    /// Number of strictly positive gates over all joints.
    pub fn active_count(&self) -> usize {
        self.joints.iter().map(|j| j.active_count()).sum()
    }

    pub fn check(&self, rig: &Rig) -> Result<()> {
        if self.vertex_count != rig.vertex_count() {
            return Err(Error::dim("corrective vertex count", rig.vertex_count(), self.vertex_count));
        }
        if self.joint_count != rig.joint_count() || self.joints.len() != rig.joint_count() {
            return Err(Error::dim("corrective joints", rig.joint_count(), self.joints.len()));
        }
        Ok(())
    }

    /// Parameter blocks in binding order: per joint, layer weights and
    /// biases, then `p`, then `logits`.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for jc in &mut self.joints {
            out.extend(layer_tensors_mut(&mut jc.layers));
            out.push(&mut jc.p.data);
            out.push(&mut jc.logits);
        }
        out
    }

    /// Creates graph leaves for every parameter.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCorrectives {
        let joints = self
            .joints
            .iter()
            .map(|jc| {
                let layers = bind_layers(g, &jc.layers, trainable);
                let (p, logits) = if trainable {
                    (
                        g.param(jc.p.rows, jc.p.cols, jc.p.data.clone()),
                        g.param(1, jc.logits.len(), jc.logits.clone()),
                    )
                } else {
                    (
                        g.constant(jc.p.rows, jc.p.cols, jc.p.data.clone()),
                        g.constant(1, jc.logits.len(), jc.logits.clone()),
                    )
                };
                BoundJoint {
                    layers,
                    p,
                    logits,
                    support: Arc::new(jc.support.clone()),
                }
            })
            .collect();
        BoundCorrectives { joints }
    }

    /// Offsets `B x 3V` for local rotations `rot` (`B x 9J`).
    pub fn apply(&self, g: &mut Graph, bound: &BoundCorrectives, rot: Var) -> Var {
        let batch = g.shape(rot).0;
        let mut parts = Vec::with_capacity(self.joints.len());
        for (jc, bj) in self.joints.iter().zip(&bound.joints) {
            let feats = neighborhood_features(g, rot, &jc.neighbors);
            let code = match self.kind {
                CorrectiveKind::NonLinear => {
                    let raw = mlp(g, &bj.layers, feats);
                    let zero = g.constant(1, jc.input_dim(), vec![0.0; jc.input_dim()]);
                    let raw0 = mlp(g, &bj.layers, zero);
                    g.sub_row(raw, raw0)
                }
                CorrectiveKind::Linear => feats,
            };
            let offsets = g.matmul_nt(code, bj.p);
            parts.push((offsets, bj.logits, bj.support.clone()));
        }
        g.gated_scatter(&parts, batch, self.vertex_count)
    }
}

pub struct BoundJoint {
    pub layers: Vec<(Var, Var)>,
    pub p: Var,
    pub logits: Var,
    pub support: Arc<Vec<u32>>,
}

pub struct BoundCorrectives {
    pub joints: Vec<BoundJoint>,
}

impl BoundCorrectives {
    /// Leaves in the order of [`CorrectiveNet::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for j in &self.joints {
            for (w, b) in &j.layers {
                out.push(*w);
                out.push(*b);
            }
            out.push(j.p);
            out.push(j.logits);
        }
        out
    }
}

/// `B x 6|n|` residual features gathered from `B x 9J` rotations.
pub fn neighborhood_features(g: &mut Graph, rot: Var, neighbors: &[Option<usize>]) -> Var {
    let batch = g.shape(rot).0;
    let mut map = Vec::with_capacity(6 * neighbors.len());
    let mut offset = Vec::with_capacity(6 * neighbors.len());
    for a in neighbors {
        for (k, idx) in [0usize, 3, 6, 1, 4, 7].into_iter().enumerate() {
            match a {
                Some(a) => {
                    map.push(Some((0, 9 * a + idx)));
                    offset.push(-ROT6D_IDENTITY[k]);
                }
                None => {
                    map.push(None);
                    offset.push(0.0);
                }
            }
        }
    }
    let fill = vec![0.0; map.len()];
    let f = g.gather_cols(&[rot], &map, &fill);
    let off: Vec<f64> = (0..batch).flat_map(|_| offset.iter().copied()).collect();
    g.add_const(f, &off)
}

/// Row-major local rotation matrices of a pose, `9J` values.
pub fn local_rotations(pose: &PoseState) -> Vec<f64> {
    pose.joint_angles
        .iter()
        .flat_map(|e| {
            let r = euler_xyz(*e);
            [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ]
        })
        .collect()
}

/// Pose-corrective offsets `B^p` (`3V`) for one pose.
pub fn eval_correctives(net: &CorrectiveNet, rig: &Rig, pose: &PoseState) -> Result<Vec<f64>> {
    net.check(rig)?;
    pose.check(rig)?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let rot = g.constant(1, 9 * rig.joint_count(), local_rotations(pose));
    let out = net.apply(&mut g, &bound, rot);
    Ok(g.value(out).to_vec())
}

/// Same masks and features with the projection applied directly to the
/// features; `net` must be of the linear kind.
pub fn linear_correctives_baseline(net: &CorrectiveNet, rig: &Rig, pose: &PoseState) -> Result<Vec<f64>> {
    if net.kind != CorrectiveKind::Linear {
        return Err(Error::Input("linear baseline needs a linear corrective net".into()));
    }
    eval_correctives(net, rig, pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::rig::make_desk_rig;
    use crate::skinning::random_poses;
    use rand::Rng;

    fn trained_like(rig: &Rig, kind: CorrectiveKind, seed: u64) -> CorrectiveNet {
        let mut net = CorrectiveNet::new(
            rig,
            &CorrectiveConfig {
                kind,
                seed,
                ..Default::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for jc in &mut net.joints {
            jc.p.data.iter_mut().for_each(|x| *x = rng.random_range(-0.01..0.01));
            for l in &mut jc.layers {
                l.b.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
            for a in jc.logits.iter_mut() {
                if rng.random_bool(0.3) {
                    *a = -0.1;
                }
            }
        }
        net
    }

    #[test]
    fn geodesic_init_ring_and_support() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let a = geodesic_init(&rig);
        let elbow = rig.tree.index_of("l_elbow").unwrap();
        let allowed = [elbow, rig.tree.parent(elbow).unwrap()];
        let mut has_one = false;
        for (i, &v) in a[elbow].iter().enumerate() {
            let seg = rig.segmentation[i] as usize;
            if v > 0.0 {
                assert!(allowed.contains(&seg), "vertex {i} in segment {seg}");
            }
            if !allowed.contains(&seg) {
                assert_eq!(v, 0.0);
            }
            assert!((0.0..=1.0).contains(&v));
            has_one |= v == 1.0;
        }
        assert!(has_one);
        for j in 0..rig.joint_count() {
            let segs = support_segments(&rig, j);
            for (i, &v) in a[j].iter().enumerate() {
                if v > 0.0 {
                    assert!(segs.contains(&(rig.segmentation[i] as usize)));
                }
            }
        }
    }

    #[test]
    fn features_of_half_turn() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let mut pose = PoseState::zero(&rig);
        assert!(pose_features(&rig, &pose, 0).unwrap().iter().all(|x| *x == 0.0));
        let j = rig.tree.index_of("l_elbow").unwrap();
        pose.joint_angles[j] = [std::f64::consts::PI, 0.0, 0.0];
        let f = pose_features(&rig, &pose, j).unwrap();
        assert_eq!(f.len(), 6 * neighborhood(&rig, j).len());
        // Rx(pi): columns (1,0,0) and (0,-1,0)
        let expect = [0.0, 0.0, 0.0, 0.0, -2.0, 0.0];
        for k in 0..6 {
            assert!((f[k] - expect[k]).abs() < 1e-12);
        }
        assert_eq!(f, pose_features(&rig, &pose, j).unwrap());
        assert!(pose_features(&rig, &pose, 99).is_err());
    }

    #[test]
    fn graph_features_match_direct() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let pose = random_poses(&rig, 1, 3).remove(0);
        let mut g = Graph::new();
        let rot = g.constant(1, 9 * 17, local_rotations(&pose));
        for j in [0, 6, 12] {
            let f = neighborhood_features(&mut g, rot, &neighborhood(&rig, j));
            let d = pose_features(&rig, &pose, j).unwrap();
            for (a, b) in g.value(f).iter().zip(&d) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_pose_is_neutral_and_masks_are_exact() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        for kind in [CorrectiveKind::NonLinear, CorrectiveKind::Linear] {
            let net = trained_like(&rig, kind, 1);
            let zero = eval_correctives(&net, &rig, &PoseState::zero(&rig)).unwrap();
            assert!(zero.iter().all(|x| *x == 0.0));
            let pose = random_poses(&rig, 1, 5).remove(0);
            let off = eval_correctives(&net, &rig, &pose).unwrap();
            let mut covered = vec![false; rig.vertex_count()];
            for jc in &net.joints {
                for (k, &v) in jc.support.iter().enumerate() {
                    covered[v as usize] |= jc.logits[k] > 0.0;
                }
            }
            for i in 0..rig.vertex_count() {
                if !covered[i] {
                    assert_eq!(&off[3 * i..3 * i + 3], &[0.0; 3]);
                }
            }
            assert!(off.iter().any(|x| *x != 0.0));
        }
    }

    #[test]
    fn locality_of_joint_contributions() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let net = trained_like(&rig, CorrectiveKind::NonLinear, 2);
        let pose = random_poses(&rig, 1, 8).remove(0);
        let a = rig.tree.index_of("l_elbow").unwrap();
        let mut moved = pose.clone();
        moved.joint_angles[a][0] += 0.3;
        for (j, jc) in net.joints.iter().enumerate() {
            let mut single = net.clone();
            single.joints.iter_mut().enumerate().for_each(|(k, x)| {
                if k != j {
                    x.logits.iter_mut().for_each(|v| *v = -1.0);
                }
            });
            let before = eval_correctives(&single, &rig, &pose).unwrap();
            let after = eval_correctives(&single, &rig, &moved).unwrap();
            if !jc.neighbors.contains(&Some(a)) {
                assert_eq!(before, after, "joint {j}");
            }
        }
    }

    #[test]
    fn linear_baseline_is_linear_in_features() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let net = trained_like(&rig, CorrectiveKind::Linear, 3);
        let j = rig.tree.index_of("l_knee").unwrap();
        let at = |alpha: f64| {
            let mut p = PoseState::zero(&rig);
            p.joint_angles[j] = [alpha, 0.0, 0.0];
            linear_correctives_baseline(&net, &rig, &p).unwrap()
        };
        // residual block is (cos a - 1) e4 + (sin a) e5, so o(pi/2) + o(-pi/2) = o(pi)
        let half = std::f64::consts::FRAC_PI_2;
        let (a, b, c) = (at(half), at(-half), at(2.0 * half));
        assert!(c.iter().any(|x| x.abs() > 1e-6));
        for i in 0..a.len() {
            assert!((a[i] + b[i] - c[i]).abs() < 1e-12);
        }
        // but not linear in the angle itself
        assert!(a.iter().zip(&c).any(|(x, y)| (2.0 * x - y).abs() > 1e-6));
        let nl = trained_like(&rig, CorrectiveKind::NonLinear, 3);
        assert!(linear_correctives_baseline(&nl, &rig, &PoseState::zero(&rig)).is_err());
    }

    #[test]
    fn corrective_gradient_wrt_pose() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let net = trained_like(&rig, CorrectiveKind::NonLinear, 4);
        let w: Vec<f64> = (0..3 * rig.vertex_count()).map(|i| ((i as f64) * 0.37).sin()).collect();
        for seed in 0..10 {
            let pose = random_poses(&rig, 1, seed).remove(0);
            let x0: Vec<f64> = pose.joint_angles.iter().flatten().copied().collect();
            let f = |x: &[f64]| {
                let mut g = Graph::new();
                let bound = net.bind(&mut g, false);
                let ang = g.param(1, x.len(), x.to_vec());
                let rot = g.euler_to_rot(ang);
                let off = net.apply(&mut g, &bound, rot);
                let wv = g.constant(1, w.len(), w.clone());
                let p = g.mul(off, wv);
                let s = g.sum(p);
                (g.scalar_value(s), g.backward(s).get(ang))
            };
            let err = gradient_check(&f, &x0, 1e-5);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
