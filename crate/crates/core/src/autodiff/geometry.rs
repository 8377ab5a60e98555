//! Fused geometric operations with hand-written vector-Jacobian products:
//! rotations, forward kinematics, skinning, correctives scatter, projection
//! and robust keypoint residuals.

use std::sync::Arc;

use super::{Graph, Var};
use crate::kinematics::Kinematics;
use crate::math::{euler_xyz, euler_xyz_with_jacobian};

type M3 = [f64; 9];
type Aff = [f64; 12];

#[inline]
fn m3_mul(a: &M3, b: &M3) -> M3 {
    let mut o = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            o[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
        }
    }
    o
}

/// `a * b^T`
#[inline]
fn m3_mul_nt(a: &M3, b: &M3) -> M3 {
    let mut o = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            o[r * 3 + c] = a[r * 3] * b[c * 3] + a[r * 3 + 1] * b[c * 3 + 1] + a[r * 3 + 2] * b[c * 3 + 2];
        }
    }
    o
}

/// `a^T * b`
#[inline]
fn m3_mul_tn(a: &M3, b: &M3) -> M3 {
    let mut o = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            o[r * 3 + c] = a[r] * b[c] + a[3 + r] * b[3 + c] + a[6 + r] * b[6 + c];
        }
    }
    o
}

#[inline]
fn m3_tvec(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[3] * v[1] + a[6] * v[2],
        a[1] * v[0] + a[4] * v[1] + a[7] * v[2],
        a[2] * v[0] + a[5] * v[1] + a[8] * v[2],
    ]
}

#[inline]
fn aff_lin(a: &[f64]) -> M3 {
    [a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]]
}

#[inline]
fn aff_t(a: &[f64]) -> [f64; 3] {
    [a[3], a[7], a[11]]
}

#[inline]
fn aff(lin: &M3, t: [f64; 3]) -> Aff {
    [
        lin[0], lin[1], lin[2], t[0], lin[3], lin[4], lin[5], t[1], lin[6], lin[7], lin[8], t[2],
    ]
}

#[inline]
fn aff_mul(a: &[f64], b: &[f64]) -> Aff {
    let mut o = [0.0; 12];
    for r in 0..3 {
        for c in 0..4 {
            let mut s = a[r * 4] * b[c] + a[r * 4 + 1] * b[4 + c] + a[r * 4 + 2] * b[8 + c];
            if c == 3 {
                s += a[r * 4 + 3];
            }
            o[r * 4 + c] = s;
        }
    }
    o
}

/// Gradients of `C = A * B` (3x4 affines) given `dC`: returns `(dA, dB)`.
#[inline]
fn aff_mul_back(a: &[f64], b: &[f64], dc: &[f64]) -> (Aff, Aff) {
    let (am, bm) = (aff_lin(a), aff_lin(b));
    let (dcm, dct) = (aff_lin(dc), aff_t(dc));
    let bt = aff_t(b);
    let mut dam = m3_mul_nt(&dcm, &bm);
    for r in 0..3 {
        for c in 0..3 {
            dam[r * 3 + c] += dct[r] * bt[c];
        }
    }
    let dbm = m3_mul_tn(&am, &dcm);
    let dbt = m3_tvec(&am, dct);
    (aff(&dam, dct), aff(&dbm, dbt))
}

fn mat_to_arr(m: &nalgebra::Matrix3<f64>) -> M3 {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

/// Rig constants consumed by the differentiable FK and skinning ops.
#[derive(Debug, Clone)]
pub struct FkLayout {
    pub parents: Vec<Option<usize>>,
    pub rest_rotation: Vec<M3>,
    pub rest_translation: Vec<[f64; 3]>,
    pub scale_attr: Vec<Option<usize>>,
    pub bone_attr: Vec<Option<(usize, [f64; 3])>>,
    pub rest_world_inverse: Vec<Aff>,
    pub attribute_count: usize,
}

impl FkLayout {
    pub fn new(kin: &Kinematics, attribute_count: usize) -> Self {
        let j = kin.joint_count();
        FkLayout {
            parents: kin.parents().to_vec(),
            rest_rotation: (0..j).map(|i| mat_to_arr(kin.rest_rotation(i))).collect(),
            rest_translation: (0..j)
                .map(|i| {
                    let t = kin.rest_translation(i);
                    [t.x, t.y, t.z]
                })
                .collect(),
            scale_attr: kin.modifiers().scale.clone(),
            bone_attr: kin.modifiers().bone.clone(),
            rest_world_inverse: kin.rest_world_inverse().to_vec(),
            attribute_count,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }
}

/// Keypoint attached to a joint frame (zero offset gives the joint center).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkSpec {
    pub joint: usize,
    pub offset: [f64; 3],
}

/// Pinhole camera: `p_cam = R p + t`, `u = fx x/z + cx`, `v = fy y/z + cy`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(default = "identity9")]
    pub rotation: [f64; 9],
    #[serde(default)]
    pub translation: [f64; 3],
}

fn identity9() -> [f64; 9] {
    [1., 0., 0., 0., 1., 0., 0., 0., 1.]
}

impl Camera {
    pub fn simple(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: identity9(),
            translation: [0.0; 3],
        }
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }

    /// Pixel coordinates, or `None` when the point is not in front of the
    /// camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let q = self.to_camera(p);
        (q[2] > PROJECT_EPS).then(|| [self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy])
    }
}

/// Points closer than this to the camera plane are masked out.
pub const PROJECT_EPS: f64 = 1e-6;

impl Graph {
    /// Euler triples (intrinsic XYZ) to row-major rotation matrices:
    /// `B x 3n -> B x 9n`.
    pub fn euler_to_rot(&mut self, angles: Var) -> Var {
        let (b, c) = self.shape(angles);
        assert_eq!(c % 3, 0);
        let n = c / 3;
        let av = self.value(angles);
        let mut v = Vec::with_capacity(b * n * 9);
        for e in av.chunks_exact(3) {
            v.extend_from_slice(&mat_to_arr(&euler_xyz([e[0], e[1], e[2]])));
        }
        self.push_op(
            b,
            9 * n,
            v,
            &[angles],
            Box::new(|pv, _, g, pg| {
                for (k, e) in pv[0].chunks_exact(3).enumerate() {
                    let (_, d) = euler_xyz_with_jacobian([e[0], e[1], e[2]]);
                    let gk = &g[k * 9..k * 9 + 9];
                    for a in 0..3 {
                        pg[0][k * 3 + a] = mat_to_arr(&d[a]).iter().zip(gk).map(|(x, y)| x * y).sum();
                    }
                }
            }),
        )
    }

    /// Gram-Schmidt decoding of 6D features (two columns) to rotations:
    /// `B x 6n -> B x 9n`.
    pub fn gram_schmidt_6d(&mut self, x: Var) -> Var {
        let (b, c) = self.shape(x);
        assert_eq!(c % 6, 0);
        let n = c / 6;
        let mut v = Vec::with_capacity(b * n * 9);
        for f in self.value(x).chunks_exact(6) {
            let (b1, b2, b3) = gs_forward(f).0;
            for r in 0..3 {
                v.extend_from_slice(&[b1[r], b2[r], b3[r]]);
            }
        }
        self.push_op(
            b,
            9 * n,
            v,
            &[x],
            Box::new(|pv, _, g, pg| {
                for (k, f) in pv[0].chunks_exact(6).enumerate() {
                    let ((b1, b2, _), (a2, n1, nu)) = gs_forward(f);
                    let gr = &g[k * 9..k * 9 + 9];
                    let col = |c: usize| [gr[c], gr[3 + c], gr[6 + c]];
                    let (mut gb1, mut gb2, gb3) = (col(0), col(1), col(2));
                    let t1 = cross(b2, gb3);
                    let t2 = cross(gb3, b1);
                    for i in 0..3 {
                        gb1[i] += t1[i];
                        gb2[i] += t2[i];
                    }
                    let d2 = dot3(b2, gb2);
                    let gu: [f64; 3] = std::array::from_fn(|i| (gb2[i] - b2[i] * d2) / nu);
                    let b1a2 = dot3(b1, a2);
                    let b1gu = dot3(b1, gu);
                    let ga2: [f64; 3] = std::array::from_fn(|i| gu[i] - b1[i] * b1gu);
                    for i in 0..3 {
                        gb1[i] -= b1a2 * gu[i] + a2[i] * b1gu;
                    }
                    let d1 = dot3(b1, gb1);
                    let out = &mut pg[0][k * 6..k * 6 + 6];
                    for i in 0..3 {
                        out[i] = (gb1[i] - b1[i] * d1) / n1;
                        out[3 + i] = ga2[i];
                    }
                }
            }),
        )
    }

    /// Forward kinematics: `root_rot (B x 3, Euler)`, `root_trans (B x 3)`,
    /// `rot (B x 9J local rotations)`, `skeletal (B x N_k)` to world affines
    /// `B x 12J`.
    pub fn forward_kinematics(&mut self, layout: &Arc<FkLayout>, root_rot: Var, root_trans: Var, rot: Var, skeletal: Var) -> Var {
        let j_count = layout.joint_count();
        let b = self.shape(rot).0;
        assert_eq!(self.shape(rot).1, 9 * j_count, "rotation block width");
        assert_eq!(self.shape(root_rot), (b, 3));
        assert_eq!(self.shape(root_trans), (b, 3));
        assert_eq!(self.shape(skeletal), (b, layout.attribute_count));
        let mut v = vec![0.0; b * 12 * j_count];
        for row in 0..b {
            let rr = &self.value(root_rot)[row * 3..row * 3 + 3];
            let rt = &self.value(root_trans)[row * 3..row * 3 + 3];
            let root = aff(&mat_to_arr(&euler_xyz([rr[0], rr[1], rr[2]])), [rt[0], rt[1], rt[2]]);
            let rots = &self.value(rot)[row * 9 * j_count..(row + 1) * 9 * j_count];
            let sk = &self.value(skeletal)[row * layout.attribute_count..(row + 1) * layout.attribute_count];
            let out = &mut v[row * 12 * j_count..(row + 1) * 12 * j_count];
            for j in 0..j_count {
                let local = fk_local(layout, rots, sk, j).0;
                let w = match layout.parents[j] {
                    Some(p) => aff_mul(&out[p * 12..p * 12 + 12], &local),
                    None => aff_mul(&root, &local),
                };
                out[j * 12..j * 12 + 12].copy_from_slice(&w);
            }
        }
        let layout = layout.clone();
        self.push_op(
            b,
            12 * j_count,
            v,
            &[root_rot, root_trans, rot, skeletal],
            Box::new(move |pv, out, g, pg| {
                let nk = layout.attribute_count;
                for row in 0..b {
                    let rr = &pv[0][row * 3..row * 3 + 3];
                    let rt = &pv[1][row * 3..row * 3 + 3];
                    let (rm, drm) = euler_xyz_with_jacobian([rr[0], rr[1], rr[2]]);
                    let root = aff(&mat_to_arr(&rm), [rt[0], rt[1], rt[2]]);
                    let rots = &pv[2][row * 9 * j_count..(row + 1) * 9 * j_count];
                    let sk = &pv[3][row * nk..(row + 1) * nk];
                    let w = &out[row * 12 * j_count..(row + 1) * 12 * j_count];
                    let mut gw = g[row * 12 * j_count..(row + 1) * 12 * j_count].to_vec();
                    let mut groot = [0.0; 12];
                    for j in (0..j_count).rev() {
                        let (local, scale) = fk_local(&layout, rots, sk, j);
                        let parent: &[f64] = match layout.parents[j] {
                            Some(p) => &w[p * 12..p * 12 + 12],
                            None => &root,
                        };
                        let (da, dl) = aff_mul_back(parent, &local, &gw[j * 12..j * 12 + 12]);
                        match layout.parents[j] {
                            Some(p) => gw[p * 12..p * 12 + 12].iter_mut().zip(&da).for_each(|(x, y)| *x += y),
                            None => groot.iter_mut().zip(&da).for_each(|(x, y)| *x += y),
                        }
                        let dlm = aff_lin(&dl);
                        if !pg[2].is_empty() {
                            let dr = m3_mul_nt(&dlm, &layout.rest_rotation[j]);
                            let o = &mut pg[2][row * 9 * j_count + j * 9..row * 9 * j_count + j * 9 + 9];
                            for (x, y) in o.iter_mut().zip(&dr) {
                                *x += scale * y;
                            }
                        }
                        if !pg[3].is_empty() {
                            if let Some(k) = layout.scale_attr[j] {
                                let lm = aff_lin(&local);
                                let s: f64 = dlm.iter().zip(&lm).map(|(x, y)| x * y).sum();
                                pg[3][row * nk + k] += std::f64::consts::LN_2 * s;
                            }
                            if let Some((k, dir)) = layout.bone_attr[j] {
                                pg[3][row * nk + k] += dot3(aff_t(&dl), dir);
                            }
                        }
                    }
                    if !pg[0].is_empty() {
                        let gm = aff_lin(&groot);
                        for a in 0..3 {
                            pg[0][row * 3 + a] = mat_to_arr(&drm[a]).iter().zip(&gm).map(|(x, y)| x * y).sum();
                        }
                    }
                    if !pg[1].is_empty() {
                        pg[1][row * 3..row * 3 + 3].copy_from_slice(&aff_t(&groot));
                    }
                }
            }),
        )
    }

    /// World positions of joint-attached points: `world (B x 12J) -> B x 3L`.
    pub fn transform_points(&mut self, world: Var, specs: &[LandmarkSpec]) -> Var {
        let (b, wc) = self.shape(world);
        let l = specs.len();
        let mut v = vec![0.0; b * 3 * l];
        let wv = self.value(world);
        for row in 0..b {
            for (i, s) in specs.iter().enumerate() {
                let w = &wv[row * wc + s.joint * 12..row * wc + s.joint * 12 + 12];
                let o = s.offset;
                for r in 0..3 {
                    v[row * 3 * l + 3 * i + r] = w[r * 4] * o[0] + w[r * 4 + 1] * o[1] + w[r * 4 + 2] * o[2] + w[r * 4 + 3];
                }
            }
        }
        let specs = specs.to_vec();
        self.push_op(
            b,
            3 * l,
            v,
            &[world],
            Box::new(move |_, _, g, pg| {
                for row in 0..b {
                    for (i, s) in specs.iter().enumerate() {
                        let gp = &g[row * 3 * l + 3 * i..row * 3 * l + 3 * i + 3];
                        let dw = &mut pg[0][row * wc + s.joint * 12..row * wc + s.joint * 12 + 12];
                        for r in 0..3 {
                            for c in 0..3 {
                                dw[r * 4 + c] += gp[r] * s.offset[c];
                            }
                            dw[r * 4 + 3] += gp[r];
                        }
                    }
                }
            }),
        )
    }

    /// Linear blend skinning. `world (B x 12J)`, `shaped (B x 3V)`,
    /// `weights (V x I)`; `joints` holds the slot joint indices. Only
    /// `subset` vertices are produced when given: output `B x 3|subset|`.
    pub fn skin(
        &mut self,
        layout: &Arc<FkLayout>,
        world: Var,
        shaped: Var,
        weights: Var,
        joints: &Arc<Vec<u32>>,
        subset: Option<Arc<Vec<usize>>>,
    ) -> Var {
        let (b, wc) = self.shape(world);
        let j_count = layout.joint_count();
        assert_eq!(wc, 12 * j_count);
        let (_, sc) = self.shape(shaped);
        let v_count = sc / 3;
        let (wr, slots) = self.shape(weights);
        assert_eq!(wr, v_count, "one weight row per vertex");
        assert_eq!(joints.len(), v_count * slots);
        let verts: Arc<Vec<usize>> = subset.unwrap_or_else(|| Arc::new((0..v_count).collect()));
        let n_out = verts.len();
        let mut v = vec![0.0; b * 3 * n_out];
        {
            let (wv, xv, ww) = (self.value(world), self.value(shaped), self.value(weights));
            for row in 0..b {
                let s = skin_mats(layout, &wv[row * wc..(row + 1) * wc]);
                for (o, &i) in verts.iter().enumerate() {
                    let m = blend(&s, &joints[i * slots..(i + 1) * slots], &ww[i * slots..(i + 1) * slots]);
                    let x = &xv[row * sc + 3 * i..row * sc + 3 * i + 3];
                    let out = &mut v[row * 3 * n_out + 3 * o..row * 3 * n_out + 3 * o + 3];
                    for r in 0..3 {
                        out[r] = m[r * 4] * x[0] + m[r * 4 + 1] * x[1] + m[r * 4 + 2] * x[2] + m[r * 4 + 3];
                    }
                }
            }
        }
        let layout = layout.clone();
        let joints = joints.clone();
        self.push_op(
            b,
            3 * n_out,
            v,
            &[world, shaped, weights],
            Box::new(move |pv, _, g, pg| {
                let (wv, xv, ww) = (pv[0], pv[1], pv[2]);
                for row in 0..b {
                    let s = skin_mats(&layout, &wv[row * wc..(row + 1) * wc]);
                    let mut ds = vec![[0.0; 12]; j_count];
                    for (o, &i) in verts.iter().enumerate() {
                        let js = &joints[i * slots..(i + 1) * slots];
                        let wi = &ww[i * slots..(i + 1) * slots];
                        let x = &xv[row * sc + 3 * i..row * sc + 3 * i + 3];
                        let go = &g[row * 3 * n_out + 3 * o..row * 3 * n_out + 3 * o + 3];
                        let mut dm = [0.0; 12];
                        for r in 0..3 {
                            dm[r * 4] = go[r] * x[0];
                            dm[r * 4 + 1] = go[r] * x[1];
                            dm[r * 4 + 2] = go[r] * x[2];
                            dm[r * 4 + 3] = go[r];
                        }
                        if !pg[1].is_empty() {
                            let m = blend(&s, js, wi);
                            let dx = &mut pg[1][row * sc + 3 * i..row * sc + 3 * i + 3];
                            for c in 0..3 {
                                dx[c] += m[c] * go[0] + m[4 + c] * go[1] + m[8 + c] * go[2];
                            }
                        }
                        for k in 0..slots {
                            let j = js[k] as usize;
                            if wi[k] != 0.0 {
                                for e in 0..12 {
                                    ds[j][e] += wi[k] * dm[e];
                                }
                            }
                            if !pg[2].is_empty() {
                                pg[2][i * slots + k] += s[j].iter().zip(&dm).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if !pg[0].is_empty() {
                        for j in 0..j_count {
                            let (dw, _) = aff_mul_back(
                                &wv[row * wc + j * 12..row * wc + j * 12 + 12],
                                &layout.rest_world_inverse[j],
                                &ds[j],
                            );
                            let out = &mut pg[0][row * wc + j * 12..row * wc + j * 12 + 12];
                            for e in 0..12 {
                                out[e] += dw[e];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Sum of gated per-joint offset fields scattered into `B x 3V`.
    /// `parts` holds `(offsets B x 3S_j, logits 1 x S_j, support vertices)`;
    /// each vertex offset is multiplied by `max(logit, 0)`.
    pub fn gated_scatter(&mut self, parts: &[(Var, Var, Arc<Vec<u32>>)], batch: usize, vertex_count: usize) -> Var {
        let width = 3 * vertex_count;
        let mut v = vec![0.0; batch * width];
        let mut inputs = Vec::with_capacity(parts.len() * 2);
        for (off, logit, support) in parts {
            let s = support.len();
            assert_eq!(self.shape(*off), (batch, 3 * s));
            assert_eq!(self.shape(*logit), (1, s));
            let (ov, lv) = (self.value(*off), self.value(*logit));
            for row in 0..batch {
                for (i, &vi) in support.iter().enumerate() {
                    let gate = lv[i].max(0.0);
                    if gate == 0.0 {
                        continue;
                    }
                    for c in 0..3 {
                        v[row * width + 3 * vi as usize + c] += gate * ov[row * 3 * s + 3 * i + c];
                    }
                }
            }
            inputs.push(*off);
            inputs.push(*logit);
        }
        let supports: Vec<Arc<Vec<u32>>> = parts.iter().map(|p| p.2.clone()).collect();
        self.push_op(
            batch,
            width,
            v,
            &inputs,
            Box::new(move |pv, _, g, pg| {
                for (p, support) in supports.iter().enumerate() {
                    let s = support.len();
                    let (ov, lv) = (pv[2 * p], pv[2 * p + 1]);
                    for row in 0..batch {
                        for (i, &vi) in support.iter().enumerate() {
                            let gate = lv[i].max(0.0);
                            let gv = &g[row * width + 3 * vi as usize..row * width + 3 * vi as usize + 3];
                            let o = &ov[row * 3 * s + 3 * i..row * 3 * s + 3 * i + 3];
                            if !pg[2 * p].is_empty() && gate > 0.0 {
                                for c in 0..3 {
                                    pg[2 * p][row * 3 * s + 3 * i + c] += gate * gv[c];
                                }
                            }
                            if !pg[2 * p + 1].is_empty() && lv[i] > 0.0 {
                                pg[2 * p + 1][i] += o[0] * gv[0] + o[1] * gv[1] + o[2] * gv[2];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Cotangent Dirichlet energy `sum_rows sum_e w_e |f_a - f_b|^2` of a
    /// per-vertex field stored as rows of `V * dim` values.
    pub fn cotan_energy(&mut self, field: Var, dim: usize, edges: &Arc<Vec<[u32; 2]>>, weights: &Arc<Vec<f64>>) -> Var {
        let (rows, cols) = self.shape(field);
        let fv = self.value(field);
        let mut e = 0.0;
        for r in 0..rows {
            let f = &fv[r * cols..(r + 1) * cols];
            for (&[a, b], &w) in edges.iter().zip(weights.iter()) {
                let (a, b) = (a as usize * dim, b as usize * dim);
                let d: f64 = (0..dim).map(|c| (f[a + c] - f[b + c]).powi(2)).sum();
                e += w * d;
            }
        }
        let (edges, weights) = (edges.clone(), weights.clone());
        self.push_op(
            1,
            1,
            vec![e],
            &[field],
            Box::new(move |pv, _, g, pg| {
                for r in 0..rows {
                    let f = &pv[0][r * cols..(r + 1) * cols];
                    let out = &mut pg[0][r * cols..(r + 1) * cols];
                    for (&[a, b], &w) in edges.iter().zip(weights.iter()) {
                        let (a, b) = (a as usize * dim, b as usize * dim);
                        for c in 0..dim {
                            let d = 2.0 * w * (f[a + c] - f[b + c]) * g[0];
                            out[a + c] += d;
                            out[b + c] -= d;
                        }
                    }
                }
            }),
        )
    }

    /// Slot weights `V x I` to a dense `V x J` matrix.
    pub fn slots_to_dense(&mut self, weights: Var, joints: &Arc<Vec<u32>>, joint_count: usize) -> Var {
        let (v_count, slots) = self.shape(weights);
        let wv = self.value(weights);
        let mut v = vec![0.0; v_count * joint_count];
        for i in 0..v_count {
            for k in 0..slots {
                v[i * joint_count + joints[i * slots + k] as usize] += wv[i * slots + k];
            }
        }
        let joints = joints.clone();
        self.push_op(
            v_count,
            joint_count,
            v,
            &[weights],
            Box::new(move |_, _, g, pg| {
                for i in 0..v_count {
                    for k in 0..slots {
                        pg[0][i * slots + k] = g[i * joint_count + joints[i * slots + k] as usize];
                    }
                }
            }),
        )
    }

    /// Pinhole projection `B x 3L -> B x 2L`. Points not in front of the
    /// camera produce `(cx, cy)` with zero gradient; see [`Camera::project`].
    pub fn project(&mut self, points: Var, camera: &Camera) -> Var {
        let (b, c) = self.shape(points);
        let l = c / 3;
        let pv = self.value(points);
        let mut v = vec![0.0; b * 2 * l];
        for row in 0..b {
            for i in 0..l {
                let p = &pv[row * c + 3 * i..row * c + 3 * i + 3];
                let uv = camera.project([p[0], p[1], p[2]]).unwrap_or([camera.cx, camera.cy]);
                v[row * 2 * l + 2 * i] = uv[0];
                v[row * 2 * l + 2 * i + 1] = uv[1];
            }
        }
        let cam = *camera;
        self.push_op(
            b,
            2 * l,
            v,
            &[points],
            Box::new(move |pv, _, g, pg| {
                let r = &cam.rotation;
                for row in 0..b {
                    for i in 0..l {
                        let p = &pv[0][row * c + 3 * i..row * c + 3 * i + 3];
                        let q = cam.to_camera([p[0], p[1], p[2]]);
                        if q[2] <= PROJECT_EPS {
                            continue;
                        }
                        let (gu, gv) = (g[row * 2 * l + 2 * i], g[row * 2 * l + 2 * i + 1]);
                        let iz = 1.0 / q[2];
                        // gradient with respect to camera-frame coordinates
                        let dq = [
                            gu * cam.fx * iz,
                            gv * cam.fy * iz,
                            -(gu * cam.fx * q[0] + gv * cam.fy * q[1]) * iz * iz,
                        ];
                        let out = &mut pg[0][row * c + 3 * i..row * c + 3 * i + 3];
                        for a in 0..3 {
                            out[a] += r[a] * dq[0] + r[3 + a] * dq[1] + r[6 + a] * dq[2];
                        }
                    }
                }
            }),
        )
    }

    /// Confidence-weighted Geman-McClure energy over point residuals:
    /// `sum_l c_l rho(|pred_l - target_l|)` with
    /// `rho(r) = r^2 / (sigma^2 + r^2)`. `pred` is `1 x dim L`.
    pub fn geman_mcclure(&mut self, pred: Var, target: &[f64], conf: &[f64], sigma: f64, dim: usize) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        assert_eq!(conf.len() * dim, target.len());
        let s2 = sigma * sigma;
        let mut e = 0.0;
        for (l, &c) in conf.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let r2: f64 = (0..dim).map(|k| (pv[l * dim + k] - target[l * dim + k]).powi(2)).sum();
            e += c * r2 / (s2 + r2);
        }
        let target = target.to_vec();
        let conf = conf.to_vec();
        self.push_op(
            1,
            1,
            vec![e],
            &[pred],
            Box::new(move |pv, _, g, pg| {
                for (l, &c) in conf.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let d: Vec<f64> = (0..dim).map(|k| pv[0][l * dim + k] - target[l * dim + k]).collect();
                    let r2: f64 = d.iter().map(|x| x * x).sum();
                    let drho = s2 / ((s2 + r2) * (s2 + r2));
                    for k in 0..dim {
                        pg[0][l * dim + k] = g[0] * c * drho * 2.0 * d[k];
                    }
                }
            }),
        )
    }

    /// Geodesic angles between matching rotations of two `B x 9n` inputs:
    /// output `B x n`.
    pub fn rotation_angles(&mut self, a: Var, b: Var) -> Var {
        let (rows, c) = self.shape(a);
        assert_eq!(self.shape(b), (rows, c));
        let n = c / 9;
        let (av, bv) = (self.value(a), self.value(b));
        let v: Vec<f64> = av
            .chunks_exact(9)
            .zip(bv.chunks_exact(9))
            .map(|(x, y)| {
                let d = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                2.0 * (d / (2.0 * std::f64::consts::SQRT_2)).min(1.0).asin()
            })
            .collect();
        self.push_op(
            rows,
            n,
            v,
            &[a, b],
            Box::new(|pv, _, g, pg| {
                for (k, (x, y)) in pv[0].chunks_exact(9).zip(pv[1].chunks_exact(9)).enumerate() {
                    let d = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                    let s = d * d / 8.0;
                    if d < 1e-12 || s >= 1.0 {
                        continue;
                    }
                    // d angle / d d = 1 / (sqrt(2) sqrt(1 - d^2/8))
                    let k_d = g[k] / (std::f64::consts::SQRT_2 * (1.0 - s).sqrt()) / d;
                    for e in 0..9 {
                        let diff = x[e] - y[e];
                        if !pg[0].is_empty() {
                            pg[0][k * 9 + e] = k_d * diff;
                        }
                        if !pg[1].is_empty() {
                            pg[1][k * 9 + e] = -k_d * diff;
                        }
                    }
                }
            }),
        )
    }
}

/// Local FK factor of joint `j` and its scale factor `2^s`.
fn fk_local(layout: &FkLayout, rots: &[f64], sk: &[f64], j: usize) -> (Aff, f64) {
    let scale = layout.scale_attr[j].map_or(1.0, |k| sk[k].exp2());
    let r: M3 = rots[j * 9..j * 9 + 9].try_into().unwrap();
    let mut lin = m3_mul(&r, &layout.rest_rotation[j]);
    lin.iter_mut().for_each(|x| *x *= scale);
    let mut t = layout.rest_translation[j];
    if let Some((k, dir)) = layout.bone_attr[j] {
        for a in 0..3 {
            t[a] += sk[k] * dir[a];
        }
    }
    (aff(&lin, t), scale)
}

fn skin_mats(layout: &FkLayout, world: &[f64]) -> Vec<Aff> {
    world
        .chunks_exact(12)
        .zip(&layout.rest_world_inverse)
        .map(|(w, r)| aff_mul(w, r))
        .collect()
}

#[inline]
fn blend(s: &[Aff], js: &[u32], ws: &[f64]) -> Aff {
    let mut m = [0.0; 12];
    for (j, w) in js.iter().zip(ws) {
        let sj = &s[*j as usize];
        for e in 0..12 {
            m[e] += w * sj[e];
        }
    }
    m
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Gram-Schmidt columns and the intermediates needed by the backward pass:
/// `((b1, b2, b3), (a2, |a1|, |u|))`.
#[allow(clippy::type_complexity)]
fn gs_forward(f: &[f64]) -> (([f64; 3], [f64; 3], [f64; 3]), ([f64; 3], f64, f64)) {
    let a1 = [f[0], f[1], f[2]];
    let a2 = [f[3], f[4], f[5]];
    let n1 = dot3(a1, a1).sqrt().max(1e-12);
    let b1 = a1.map(|x| x / n1);
    let p = dot3(b1, a2);
    let u: [f64; 3] = std::array::from_fn(|i| a2[i] - p * b1[i]);
    let nu = dot3(u, u).sqrt().max(1e-12);
    let b2 = u.map(|x| x / nu);
    let b3 = cross(b1, b2);
    ((b1, b2, b3), (a2, n1, nu))
}

#[cfg(test)]
mod tests {
    use super::super::{gradient_check, Graph};
    use super::*;
    use crate::kinematics::{Kinematics, PoseState};
    use crate::math::affine_apply;
    use crate::rig::make_desk_rig;

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    fn weighted_sum(g: &mut Graph, y: Var) -> Var {
        let (r, c) = g.shape(y);
        let w = g.constant(r, c, seq(r * c, 1.7));
        let wy = g.mul(y, w);
        g.sum(wy)
    }

    fn check(x0: &[f64], shape: (usize, usize), f: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let v = g.param(shape.0, shape.1, x.to_vec());
            let y = f(&mut g, v);
            let s = weighted_sum(&mut g, y);
            (g.scalar_value(s), g.backward(s).get(v))
        };
        let err = gradient_check(&eval, x0, 1e-5);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn euler_and_gram_schmidt_gradients() {
        check(&seq(6, 0.9), (2, 3), |g, x| g.euler_to_rot(x), 1e-8);
        let mut f = seq(12, 0.8);
        f[0] += 1.5;
        f[4] += 1.2;
        check(&f, (1, 12), |g, x| g.gram_schmidt_6d(x), 1e-7);
    }

    #[test]
    fn gram_schmidt_gives_rotations() {
        let mut g = Graph::new();
        let x = g.constant(1, 6, seq(6, 0.3));
        let r = g.gram_schmidt_6d(x);
        let m = nalgebra::Matrix3::from_row_slice(g.value(r));
        assert!((m.transpose() * m - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    fn fk_graph(layout: &Arc<FkLayout>, g: &mut Graph, x: &[f64], nk: usize) -> (Var, Var) {
        let j = layout.joint_count();
        let p = g.param(1, 6 + 3 * j + nk, x.to_vec());
        let rr = g.slice_cols(p, 0, 3);
        let rt = g.slice_cols(p, 3, 3);
        let ang = g.slice_cols(p, 6, 3 * j);
        let sk = g.slice_cols(p, 6 + 3 * j, nk);
        let rot = g.euler_to_rot(ang);
        (p, g.forward_kinematics(layout, rr, rt, rot, sk))
    }

    #[test]
    fn fk_matches_reference_and_gradient() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let kin = Kinematics::new(&rig);
        let nk = rig.attribute_count();
        let layout = Arc::new(FkLayout::new(&kin, nk));
        let j = rig.joint_count();
        let x: Vec<f64> = seq(6 + 3 * j + nk, 0.37).iter().map(|v| 0.5 * v).collect();
        let mut g = Graph::new();
        let (_, w) = fk_graph(&layout, &mut g, &x, nk);
        let pose = PoseState {
            root_rotation: [x[0], x[1], x[2]],
            root_translation: [x[3], x[4], x[5]],
            joint_angles: (0..j).map(|i| [x[6 + 3 * i], x[7 + 3 * i], x[8 + 3 * i]]).collect(),
            skeletal: x[6 + 3 * j..].to_vec(),
        };
        let reference = kin.world(&pose);
        for (a, b) in g.value(w).chunks_exact(12).zip(&reference) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let (p, w) = fk_graph(&layout, &mut g, x, nk);
            let s = weighted_sum(&mut g, w);
            (g.scalar_value(s), g.backward(s).get(p))
        };
        assert!(gradient_check(&eval, &x, 1e-5) < 1e-6);
    }

    #[test]
    fn skin_matches_kernel_and_gradient() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let kin = Kinematics::new(&rig);
        let nk = rig.attribute_count();
        let layout = Arc::new(FkLayout::new(&kin, nk));
        let j = rig.joint_count();
        let joints = Arc::new(rig.skin.joints.iter().flatten().copied().collect::<Vec<u32>>());
        let subset = Arc::new(vec![0usize, 17, 400, 1200, 1945]);
        let x: Vec<f64> = seq(6 + 3 * j + nk, 0.53).iter().map(|v| 0.4 * v).collect();
        let w0: Vec<f64> = rig.skin.weights.iter().flatten().copied().collect();
        let shaped0 = rig.template.flat();
        let build = |g: &mut Graph, x: &[f64], w: Var, s: Var| {
            let (_, world) = fk_graph(&layout, g, x, nk);
            g.skin(&layout, world, s, w, &joints, Some(subset.clone()))
        };
        // value check against the plain kernel
        let mut g = Graph::new();
        let w = g.constant(rig.vertex_count(), 8, w0.clone());
        let s = g.constant(1, shaped0.len(), shaped0.clone());
        let out = build(&mut g, &x, w, s);
        let pose = PoseState {
            root_rotation: [x[0], x[1], x[2]],
            root_translation: [x[3], x[4], x[5]],
            joint_angles: (0..j).map(|i| [x[6 + 3 * i], x[7 + 3 * i], x[8 + 3 * i]]).collect(),
            skeletal: x[6 + 3 * j..].to_vec(),
        };
        let posed = crate::skinning::skin(&rig, &rig.template.vertices, &kin.transforms(&pose)).unwrap();
        for (o, &i) in subset.iter().enumerate() {
            for c in 0..3 {
                assert!((g.value(out)[3 * o + c] - posed.vertices[i][c]).abs() < 1e-12);
            }
        }
        // gradients with respect to pose, vertices and weights
        let eval = |p: &[f64]| {
            let mut g = Graph::new();
            let w = g.param(rig.vertex_count(), 8, p[..w0.len()].to_vec());
            let s = g.param(1, shaped0.len(), p[w0.len()..w0.len() + shaped0.len()].to_vec());
            let out = build(&mut g, &p[w0.len() + shaped0.len()..], w, s);
            let total = weighted_sum(&mut g, out);
            let grads = g.backward(total);
            let mut grad = grads.get(w);
            grad.extend(grads.get(s));
            (g.scalar_value(total), grad)
        };
        let mut p = w0.clone();
        p.extend(&shaped0);
        p.extend(&x);
        // restrict the finite-difference sweep to the touched entries
        let (_, analytic) = eval(&p);
        let mut touched: Vec<usize> = analytic.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect();
        touched.truncate(60);
        let h = 1e-5;
        for &i in &touched {
            let mut pp = p.clone();
            pp[i] += h;
            let fp = eval(&pp).0;
            pp[i] -= 2.0 * h;
            let fm = eval(&pp).0;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-6 * fd.abs().max(1.0),
                "entry {i}: {fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn transform_points_matches_affine() {
        let mut g = Graph::new();
        let w = seq(24, 0.4);
        let specs = [LandmarkSpec {
            joint: 1,
            offset: [0.1, -0.2, 0.3],
        }];
        let world = g.constant(1, 24, w.clone());
        let p = g.transform_points(world, &specs);
        let a: [f64; 12] = w[12..].try_into().unwrap();
        let expect = affine_apply(&a, [0.1, -0.2, 0.3]);
        assert_eq!(g.value(p), &expect);
        check(&seq(24, 0.4), (1, 24), |g, x| g.transform_points(x, &specs), 1e-8);
    }

    #[test]
    fn scatter_energy_dense_gradients() {
        let support = Arc::new(vec![0u32, 2, 3]);
        check(
            &seq(9 + 3, 0.6),
            (1, 12),
            |g, x| {
                let off = g.slice_cols(x, 0, 9);
                let logit = g.slice_cols(x, 9, 3);
                g.gated_scatter(&[(off, logit, support.clone())], 1, 4)
            },
            1e-8,
        );
        let edges = Arc::new(vec![[0u32, 1], [1, 2], [0, 2]]);
        let weights = Arc::new(vec![0.5, -0.25, 1.5]);
        check(&seq(6, 0.8), (1, 6), |g, x| g.cotan_energy(x, 2, &edges, &weights), 1e-8);
        let joints = Arc::new(vec![0u32, 2, 1, 1]);
        check(&seq(4, 0.8), (2, 2), |g, x| g.slots_to_dense(x, &joints, 3), 1e-8);
    }

    #[test]
    fn gated_scatter_zero_gate_is_exact_zero() {
        let mut g = Graph::new();
        let off = g.constant(1, 6, vec![1.0; 6]);
        let logit = g.constant(1, 2, vec![-0.5, 0.25]);
        let out = g.gated_scatter(&[(off, logit, Arc::new(vec![1, 3]))], 1, 4);
        assert_eq!(g.value(out), &[0., 0., 0., 0., 0., 0., 0., 0., 0., 0.25, 0.25, 0.25]);
    }

    #[test]
    fn projection_values_and_gradient() {
        let cam = Camera::simple(1000.0, 1000.0, 320.0, 240.0);
        let mut g = Graph::new();
        let p = g.constant(1, 6, vec![0.0, 0.0, 1.0, 0.1, 0.0, 1.0]);
        let uv = g.project(p, &cam);
        assert_eq!(g.value(uv), &[320.0, 240.0, 420.0, 240.0]);
        let mut cam2 = cam;
        cam2.rotation = mat_to_arr(&euler_xyz([0.1, -0.2, 0.05]));
        cam2.translation = [0.1, 0.2, 3.0];
        check(&seq(9, 0.7), (1, 9), |g, x| g.project(x, &cam2), 1e-7);
    }

    #[test]
    fn geman_mcclure_values_and_gradient() {
        let mut g = Graph::new();
        let p = g.constant(1, 3, vec![0.05, 0.0, 0.0]);
        let e = g.geman_mcclure(p, &[0.0; 3], &[1.0], 0.05, 3);
        assert!((g.scalar_value(e) - 0.5).abs() < 1e-15);
        let target = seq(6, 0.2);
        check(&seq(6, 0.9), (1, 6), |g, x| g.geman_mcclure(x, &target, &[1.0, 0.5], 0.3, 3), 1e-7);
    }

    #[test]
    fn rotation_angle_gradient() {
        let b = seq(6, 0.3);
        check(
            &seq(6, 0.5),
            (1, 6),
            |g, x| {
                let r = g.euler_to_rot(x);
                let c = g.constant(1, 6, b.clone());
                let rb = g.euler_to_rot(c);
                g.rotation_angles(r, rb)
            },
            1e-6,
        );
    }
}
