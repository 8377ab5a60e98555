//! Procedural desk-scale humanoid rigs.
//!
//! The surface is one closed, consistently oriented triangle mesh: a torso
//! tube (pelvis to head top) with four side openings, each joined by a
//! triangle band to a limb tube. Joints follow a y-up, +z-forward frame with
//! the subject's left on +x, arms in an A-pose.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AttributeKind, AttributeTarget, KinematicTree, Landmarks, RestPose, Rig, SkeletalAttribute, SkeletalAttributeSchema, SkeletalLandmark,
    SkinWeights, SurfaceLandmark, TemplateMesh, MAX_INFLUENCES,
};
use crate::error::{Error, Result};
use crate::math::{euler_from_matrix, euler_xyz};
use crate::mesh;

pub const DEFAULT_JOINTS: usize = 17;
pub const DEFAULT_RADIAL_SEGMENTS: usize = 12;
pub const MAX_DESK_JOINTS: usize = 22;

const TORSO_RINGS: usize = 43;
const LIMB_RINGS_PER_SEGMENT: usize = 10;
const SKIN_FALLOFF: f64 = 0.04;
/// Skin weights are snapped to multiples of this so rows sum to one exactly.
const WEIGHT_QUANTUM: f64 = 1.0 / (1u32 << 20) as f64;

const NAMES: [&str; MAX_DESK_JOINTS] = [
    "pelvis",
    "spine1",
    "spine2",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hand",
    "r_hand",
    "l_toe",
    "r_toe",
    "head_top",
];

const PARENTS: [Option<usize>; MAX_DESK_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(2),
    Some(5),
    Some(6),
    Some(2),
    Some(8),
    Some(9),
    Some(0),
    Some(11),
    Some(12),
    Some(0),
    Some(14),
    Some(15),
    Some(7),
    Some(10),
    Some(13),
    Some(16),
    Some(4),
];

/// Child defining each joint's bone direction; `None` for tips.
const BONE_CHILD: [Option<usize>; MAX_DESK_JOINTS] = [
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(21),
    Some(6),
    Some(7),
    Some(17),
    Some(9),
    Some(10),
    Some(18),
    Some(12),
    Some(13),
    Some(19),
    Some(15),
    Some(16),
    Some(20),
    None,
    None,
    None,
    None,
    None,
];

/// (name, kind, target joints)
const ATTRIBUTES: [(&str, AttributeKind, &[usize]); 20] = [
    ("body_scale", AttributeKind::Scale, &[0]),
    ("head_scale", AttributeKind::Scale, &[4]),
    ("l_hand_scale", AttributeKind::Scale, &[7]),
    ("r_hand_scale", AttributeKind::Scale, &[10]),
    ("l_foot_scale", AttributeKind::Scale, &[13]),
    ("r_foot_scale", AttributeKind::Scale, &[16]),
    ("spine_lower", AttributeKind::BoneLength, &[1]),
    ("spine_upper", AttributeKind::BoneLength, &[2]),
    ("neck_length", AttributeKind::BoneLength, &[3]),
    ("head_offset", AttributeKind::BoneLength, &[4]),
    ("shoulder_width", AttributeKind::BoneLength, &[5, 8]),
    ("l_upper_arm", AttributeKind::BoneLength, &[6]),
    ("r_upper_arm", AttributeKind::BoneLength, &[9]),
    ("l_lower_arm", AttributeKind::BoneLength, &[7]),
    ("r_lower_arm", AttributeKind::BoneLength, &[10]),
    ("hip_width", AttributeKind::BoneLength, &[11, 14]),
    ("l_upper_leg", AttributeKind::BoneLength, &[12]),
    ("r_upper_leg", AttributeKind::BoneLength, &[15]),
    ("l_lower_leg", AttributeKind::BoneLength, &[13]),
    ("r_lower_leg", AttributeKind::BoneLength, &[16]),
];

const SCALE_RANGE: [f64; 2] = [-0.5, 0.5];
const BONE_RANGE: [f64; 2] = [-0.1, 0.1];

/// Generates a humanoid rig. `joints` takes a prefix of the 22-joint desk
/// skeleton (17 by default; 18..=22 add hand, toe and head-top tips). The
/// surface does not depend on `joints`.
pub fn make_desk_rig(seed: u64, joints: usize, radial_segments: usize) -> Result<Rig> {
    if !(2..=MAX_DESK_JOINTS).contains(&joints) {
        return Err(Error::Precondition(format!(
            "joints must be in 2..={MAX_DESK_JOINTS}, got {joints}"
        )));
    }
    if radial_segments < 8 || !radial_segments.is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "radial_segments must be even and at least 8, got {radial_segments}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = design_positions(&mut rng);
    let width = rng.random_range(0.95..1.05);
    let skel = Skeleton::from_design(&design);

    let (vertices, faces) = build_surface(&skel.pos, radial_segments, width);
    let n_joints = joints;
    let owner: Vec<usize> = (0..MAX_DESK_JOINTS)
        .map(|b| {
            let mut j = b;
            while j >= n_joints {
                j = PARENTS[j].expect("root is always present");
            }
            j
        })
        .collect();
    let (skin, segmentation) = bind_skin(&vertices, &skel.pos, &owner, n_joints);

    let names: Vec<String> = NAMES[..n_joints].iter().map(|s| s.to_string()).collect();
    let parents = PARENTS[..n_joints].to_vec();
    let tree = KinematicTree::new(names, parents);
    let rest = RestPose {
        rotation: skel.rotation[..n_joints].to_vec(),
        translation: skel.translation[..n_joints].to_vec(),
    };

    let mut attributes = Vec::new();
    for (name, kind, targets) in ATTRIBUTES {
        let targets: Vec<AttributeTarget> = targets
            .iter()
            .filter(|&&j| j < n_joints)
            .map(|&j| AttributeTarget {
                joint: j,
                direction: match kind {
                    AttributeKind::Scale => [0.0; 3],
                    AttributeKind::BoneLength => unit_f32(skel.translation[j]),
                },
            })
            .collect();
        if targets.is_empty() {
            continue;
        }
        attributes.push(SkeletalAttribute {
            name: name.to_string(),
            kind,
            targets,
            range: match kind {
                AttributeKind::Scale => SCALE_RANGE,
                AttributeKind::BoneLength => BONE_RANGE,
            },
        });
    }

    let landmarks = Landmarks {
        skeletal: skeletal_landmarks(&skel, &owner),
        surface: face_landmarks(&vertices, &skel.pos),
    };
    let hand_joints = [7, 10, 17, 18].into_iter().filter(|&j| j < n_joints).collect();

    let rig = Rig {
        id: format!("desk-s{seed}-j{joints}-r{radial_segments}"),
        tree,
        rest,
        schema: SkeletalAttributeSchema { attributes },
        template: TemplateMesh { vertices, faces },
        skin,
        segmentation,
        landmarks,
        hand_joints,
    };
    debug_assert!(super::validate_rig(&rig).is_empty());
    Ok(rig)
}

/// Applies `levels` rounds of midpoint subdivision to the template. Skin
/// weights of new vertices average their edge endpoints.
pub fn subdivide(rig: &Rig, levels: usize) -> Rig {
    let mut out = rig.clone();
    for _ in 0..levels {
        let (v, f, parents) = mesh::midpoint_subdivide(&out.template.vertices, &out.template.faces);
        let mut joints = Vec::with_capacity(v.len());
        let mut weights = Vec::with_capacity(v.len());
        let mut seg = Vec::with_capacity(v.len());
        for [a, b] in parents {
            let (a, b) = (a as usize, b as usize);
            if a == b {
                joints.push(out.skin.joints[a]);
                weights.push(out.skin.weights[a]);
                seg.push(out.segmentation[a]);
                continue;
            }
            let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
            for i in [a, b] {
                for (&j, &w) in out.skin.joints[i].iter().zip(&out.skin.weights[i]) {
                    if w > 0.0 {
                        *acc.entry(j).or_insert(0.0) += 0.5 * w;
                    }
                }
            }
            let (js, ws) = finalize_weights(acc.into_iter().collect());
            joints.push(js);
            weights.push(ws);
            seg.push(out.segmentation[a.min(b)]);
        }
        out.template = TemplateMesh { vertices: v, faces: f };
        out.skin = SkinWeights { joints, weights };
        out.segmentation = seg;
    }
    if levels > 0 {
        out.id = format!("{}-sub{levels}", rig.id);
    }
    out
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn unit_f32(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        return [0.0, 1.0, 0.0];
    }
    [q(v[0] / n), q(v[1] / n), q(v[2] / n)]
}

fn design_positions(rng: &mut ChaCha8Rng) -> [Vector3<f64>; MAX_DESK_JOINTS] {
    let mut jit = |x: f64| x * rng.random_range(0.95..1.05);
    let mut p = [Vector3::zeros(); MAX_DESK_JOINTS];
    p[0] = Vector3::new(0.0, jit(0.95), 0.0);
    p[1] = p[0] + Vector3::new(0.0, jit(0.15), 0.0);
    p[2] = p[1] + Vector3::new(0.0, jit(0.18), 0.0);
    p[3] = p[2] + Vector3::new(0.0, jit(0.19), 0.0);
    p[4] = p[3] + Vector3::new(0.0, jit(0.08), 0.0);
    p[21] = p[4] + Vector3::new(0.0, jit(0.20), 0.0);
    let arm = Vector3::new(1.0, -1.0, 0.0).normalize();
    for (side, (sh, el, wr, hand)) in [(1.0, (5, 6, 7, 17)), (-1.0, (8, 9, 10, 18))] {
        let dir = Vector3::new(side * arm.x, arm.y, arm.z);
        p[sh] = p[2] + Vector3::new(side * jit(0.19), jit(0.10), 0.0);
        p[el] = p[sh] + dir * jit(0.28);
        p[wr] = p[el] + dir * jit(0.25);
        p[hand] = p[wr] + dir * jit(0.17);
    }
    for (side, (hip, knee, ankle, toe)) in [(1.0, (11, 12, 13, 19)), (-1.0, (14, 15, 16, 20))] {
        p[hip] = p[0] + Vector3::new(side * jit(0.10), -jit(0.07), 0.0);
        p[knee] = p[hip] + Vector3::new(0.0, -jit(0.42), 0.01);
        p[ankle] = p[knee] + Vector3::new(0.0, -jit(0.40), -0.01);
        p[toe] = p[ankle] + Vector3::new(0.0, -0.05, jit(0.15));
    }
    p
}

/// Quantized rest pose of the full desk skeleton and the resulting rest
/// frames.
struct Skeleton {
    rotation: Vec<[f64; 3]>,
    translation: Vec<[f64; 3]>,
    /// World rest rotation per joint.
    frame: Vec<Matrix3<f64>>,
    /// World rest position per joint.
    pos: Vec<[f64; 3]>,
}

impl Skeleton {
    fn from_design(design: &[Vector3<f64>; MAX_DESK_JOINTS]) -> Self {
        let n = MAX_DESK_JOINTS;
        // skeleton-aligned target frames: y along the bone
        let mut target = vec![Matrix3::identity(); n];
        for j in 0..n {
            target[j] = match BONE_CHILD[j] {
                Some(c) => aligned_frame(design[c] - design[j]),
                None => target[PARENTS[j].unwrap()],
            };
        }
        let mut rotation = vec![[0.0; 3]; n];
        let mut translation = vec![[0.0; 3]; n];
        let mut frame = vec![Matrix3::identity(); n];
        let mut pos = vec![Vector3::zeros(); n];
        for j in 0..n {
            let (pf, pp) = match PARENTS[j] {
                Some(p) => (frame[p], pos[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            let local = pf.transpose() * target[j];
            rotation[j] = euler_from_matrix(&local).map(q);
            let offset = pf.transpose() * (design[j] - pp);
            translation[j] = [q(offset.x), q(offset.y), q(offset.z)];
            frame[j] = pf * euler_xyz(rotation[j]);
            pos[j] = pp + pf * Vector3::from(translation[j]);
        }
        Skeleton {
            rotation,
            translation,
            frame,
            pos: pos.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

fn aligned_frame(bone: Vector3<f64>) -> Matrix3<f64> {
    let y = bone.normalize();
    let reference = if y.x.abs() > 0.9 { Vector3::z() } else { Vector3::x() };
    let x = (reference - y * y.dot(&reference)).normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

fn lerp_profile(controls: &[(f64, f64)], y: f64) -> f64 {
    if y <= controls[0].0 {
        return controls[0].1;
    }
    for w in controls.windows(2) {
        let ((y0, r0), (y1, r1)) = (w[0], w[1]);
        if y <= y1 {
            let t = if y1 > y0 { (y - y0) / (y1 - y0) } else { 1.0 };
            return r0 + t * (r1 - r0);
        }
    }
    controls[controls.len() - 1].1
}

fn build_surface(p: &[[f64; 3]], n: usize, width: f64) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let y = |j: usize| p[j][1];
    let shoulder_y = 0.5 * (y(5) + y(8));
    let y_bot = y(0) - 0.13;
    let y_top = y(21);
    let mut controls = vec![
        (y_bot, 0.14),
        (y(0), 0.165),
        (y(1), 0.145),
        (y(2), 0.155),
        (shoulder_y - 0.03, 0.17),
        (shoulder_y + 0.02, 0.15),
        (y(3), 0.06),
        (y(4), 0.075),
        (y(4) + 0.08, 0.095),
        (y_top - 0.03, 0.07),
        (y_top, 0.03),
    ];
    controls.sort_by(|a, b| a.0.total_cmp(&b.0));

    let rings = TORSO_RINGS;
    let dy = (y_top - 0.015 - y_bot) / (rings - 1) as f64;
    let ring_y = |r: usize| y_bot + dy * r as f64;
    let phi = |k: usize| 2.0 * PI * (k as f64 + 0.5) / n as f64;

    // openings: (first quad row, vertex columns)
    let plus_x = [n - 2, n - 1, 0, 1];
    let minus_x = [n / 2 - 2, n / 2 - 1, n / 2, n / 2 + 1];
    let arm_row = (((shoulder_y - 0.02 - y_bot) / dy) - 1.5).round() as usize;
    let holes = [(arm_row, plus_x), (arm_row, minus_x), (1, plus_x), (1, minus_x)];

    let mut removed_vertex = vec![false; rings * n];
    let mut removed_quad = vec![false; (rings - 1) * n];
    for (row, cols) in holes {
        for r in row + 1..row + 3 {
            for &c in &cols[1..3] {
                removed_vertex[r * n + c] = true;
            }
        }
        for r in row..row + 3 {
            for &c in &cols[..3] {
                removed_quad[r * n + c] = true;
            }
        }
    }

    let mut vertices = Vec::new();
    let mut index = vec![u32::MAX; rings * n];
    for r in 0..rings {
        let yr = ring_y(r);
        let rx = lerp_profile(&controls, yr) * width;
        let rz = 0.72 * rx;
        for k in 0..n {
            if removed_vertex[r * n + k] {
                continue;
            }
            index[r * n + k] = vertices.len() as u32;
            vertices.push([rx * phi(k).cos(), yr, rz * phi(k).sin()]);
        }
    }
    let bottom = vertices.len() as u32;
    vertices.push([0.0, y_bot - 0.02, 0.0]);
    let top = vertices.len() as u32;
    vertices.push([0.0, y_top, 0.0]);

    let mut faces = Vec::new();
    for r in 0..rings - 1 {
        for k in 0..n {
            if removed_quad[r * n + k] {
                continue;
            }
            let k1 = (k + 1) % n;
            let a = index[r * n + k];
            let b = index[(r + 1) * n + k];
            let c = index[r * n + k1];
            let d = index[(r + 1) * n + k1];
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    for k in 0..n {
        let k1 = (k + 1) % n;
        faces.push([index[k], index[k1], bottom]);
        let last = (rings - 1) * n;
        faces.push([index[last + k1], index[last + k], top]);
    }
    let hole_probe: Vec<u32> = holes.iter().map(|(row, cols)| index[row * n + cols[0]]).collect();

    // limbs
    let arm_dir = |sh: usize, el: usize| {
        let d = Vector3::from(p[el]) - Vector3::from(p[sh]);
        d.normalize()
    };
    let v3 = |j: usize| Vector3::from(p[j]);
    let limbs: [([Vector3<f64>; 4], [f64; 4]); 4] = [
        ([v3(5) + arm_dir(5, 6) * 0.03, v3(6), v3(7), v3(17)], [0.055, 0.042, 0.032, 0.022]),
        ([v3(8) + arm_dir(8, 9) * 0.03, v3(9), v3(10), v3(18)], [0.055, 0.042, 0.032, 0.022]),
        (
            [Vector3::new(p[11][0], y_bot - 0.04, p[11][2]), v3(12), v3(13), v3(19)],
            [0.075, 0.05, 0.04, 0.025],
        ),
        (
            [Vector3::new(p[14][0], y_bot - 0.04, p[14][2]), v3(15), v3(16), v3(20)],
            [0.075, 0.05, 0.04, 0.025],
        ),
    ];
    let mut limb_probe = Vec::new();
    for (path, radii) in limbs {
        limb_probe.push(vertices.len() as u32);
        append_limb(&mut vertices, &mut faces, &path, &radii.map(|r| r * width), n);
    }

    let loops = mesh::boundary_loops(&faces);
    let find = |probe: u32| loops.iter().find(|l| l.contains(&probe)).expect("opening boundary present").clone();
    for (h, l) in hole_probe.iter().zip(&limb_probe) {
        stitch(&vertices, &mut faces, &find(*h), &find(*l));
    }

    if mesh::signed_volume(&vertices, &faces) < 0.0 {
        for f in &mut faces {
            f.swap(1, 2);
        }
    }
    let vertices = vertices.iter().map(|v| v.map(q)).collect();
    (vertices, faces)
}

fn append_limb(vertices: &mut Vec<[f64; 3]>, faces: &mut Vec<[u32; 3]>, path: &[Vector3<f64>; 4], radii: &[f64; 4], n: usize) {
    let base = vertices.len() as u32;
    let rings = 3 * LIMB_RINGS_PER_SEGMENT;
    let mut u: Option<Vector3<f64>> = None;
    for k in 0..rings {
        let seg = k / LIMB_RINGS_PER_SEGMENT;
        let t = ((k % LIMB_RINGS_PER_SEGMENT) as f64 + 0.5) / LIMB_RINGS_PER_SEGMENT as f64;
        let d = (path[seg + 1] - path[seg]).normalize();
        let c = path[seg] + (path[seg + 1] - path[seg]) * t;
        let r = radii[seg] + (radii[seg + 1] - radii[seg]) * t;
        let prev = u.unwrap_or_else(Vector3::z);
        let uk = (prev - d * d.dot(&prev)).normalize();
        let w = d.cross(&uk);
        u = Some(uk);
        for i in 0..n {
            let a = 2.0 * PI * i as f64 / n as f64;
            let pt = c + (uk * a.cos() + w * a.sin()) * r;
            vertices.push([pt.x, pt.y, pt.z]);
        }
    }
    let pole = vertices.len() as u32;
    vertices.push([path[3].x, path[3].y, path[3].z]);
    let idx = |r: usize, i: usize| base + (r * n + i % n) as u32;
    for r in 0..rings - 1 {
        for i in 0..n {
            faces.push([idx(r, i), idx(r, i + 1), idx(r + 1, i)]);
            faces.push([idx(r, i + 1), idx(r + 1, i + 1), idx(r + 1, i)]);
        }
    }
    for i in 0..n {
        faces.push([idx(rings - 1, i), idx(rings - 1, i + 1), pole]);
    }
}

/// Closes the annulus between two boundary loops, both given in fill
/// direction, by a greedy shortest-diagonal walk.
fn stitch(vertices: &[[f64; 3]], faces: &mut Vec<[u32; 3]>, a: &[u32], b: &[u32]) {
    let (m, n) = (a.len(), b.len());
    let pa = |i: usize| vertices[a[i % m] as usize];
    let k0 = (0..n)
        .min_by(|&x, &y| mesh::dist(pa(0), vertices[b[x] as usize]).total_cmp(&mesh::dist(pa(0), vertices[b[y] as usize])))
        .unwrap();
    // c runs against b so both loops advance in the same sense
    let c = |k: usize| b[(k0 + n - k % n) % n];
    let pc = |k: usize| vertices[c(k) as usize];
    let (mut i, mut k) = (0, 0);
    while i < m || k < n {
        let advance_a = k == n || (i < m && mesh::dist(pa(i + 1), pc(k)) < mesh::dist(pa(i), pc(k + 1)));
        if advance_a {
            faces.push([a[i % m], a[(i + 1) % m], c(k)]);
            i += 1;
        } else {
            faces.push([a[i % m], c(k + 1), c(k)]);
            k += 1;
        }
    }
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = mesh::sub(b, a);
    let ap = mesh::sub(p, a);
    let len2 = mesh::dot(ab, ab);
    let t = if len2 > 0.0 {
        (mesh::dot(ap, ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    mesh::dist(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

fn bind_skin(vertices: &[[f64; 3]], pos: &[[f64; 3]], owner: &[usize], n_joints: usize) -> (SkinWeights, Vec<u16>) {
    let mut joints = Vec::with_capacity(vertices.len());
    let mut weights = Vec::with_capacity(vertices.len());
    let mut seg = Vec::with_capacity(vertices.len());
    for &v in vertices {
        let mut d = vec![f64::INFINITY; n_joints];
        for b in 0..MAX_DESK_JOINTS {
            let end = BONE_CHILD[b].map_or(pos[b], |c| pos[c]);
            let dist = point_segment_distance(v, pos[b], end);
            let o = owner[b];
            if dist < d[o] {
                d[o] = dist;
            }
        }
        let (nearest, dmin) = d
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, x)| if x < best.1 { (j, x) } else { best });
        seg.push(nearest as u16);
        let raw: Vec<(u32, f64)> = d
            .iter()
            .enumerate()
            .map(|(j, &x)| (j as u32, (-((x - dmin) / SKIN_FALLOFF).powi(2)).exp()))
            .collect();
        let (js, ws) = finalize_weights(raw);
        joints.push(js);
        weights.push(ws);
    }
    (SkinWeights { joints, weights }, seg)
}

/// Keeps the `MAX_INFLUENCES` largest weights, normalizes them and snaps to
/// the weight quantum with an exact unit sum. Slots are ordered by joint.
pub(crate) fn finalize_weights(mut raw: Vec<(u32, f64)>) -> ([u32; MAX_INFLUENCES], [f64; MAX_INFLUENCES]) {
    raw.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    raw.truncate(MAX_INFLUENCES);
    let total: f64 = raw.iter().map(|x| x.1).sum();
    let scale = 1.0 / WEIGHT_QUANTUM;
    let mut quanta: Vec<(u32, i64)> = raw.iter().map(|&(j, w)| (j, (w / total * scale).round() as i64)).collect();
    let sum: i64 = quanta.iter().map(|x| x.1).sum();
    quanta[0].1 += scale as i64 - sum;
    quanta.retain(|x| x.1 > 0);
    quanta.sort_by_key(|x| x.0);
    let mut js = [0u32; MAX_INFLUENCES];
    let mut ws = [0.0; MAX_INFLUENCES];
    for (s, (j, c)) in quanta.into_iter().enumerate() {
        js[s] = j;
        ws[s] = c as f64 * WEIGHT_QUANTUM;
    }
    (js, ws)
}

fn skeletal_landmarks(skel: &Skeleton, owner: &[usize]) -> Vec<SkeletalLandmark> {
    let p = |j: usize| Vector3::from(skel.pos[j]);
    let head = p(4);
    let points: [(&str, usize, Vector3<f64>); 10] = [
        ("l_hand_tip", 17, p(17)),
        ("r_hand_tip", 18, p(18)),
        ("l_toe_tip", 19, p(19)),
        ("r_toe_tip", 20, p(20)),
        ("head_top", 21, p(21)),
        ("nose", 4, head + Vector3::new(0.0, 0.05, 0.09)),
        ("l_eye", 4, head + Vector3::new(0.035, 0.08, 0.075)),
        ("r_eye", 4, head + Vector3::new(-0.035, 0.08, 0.075)),
        ("l_heel", 13, p(13) + Vector3::new(0.0, -0.03, -0.05)),
        ("r_heel", 16, p(16) + Vector3::new(0.0, -0.03, -0.05)),
    ];
    points
        .into_iter()
        .map(|(name, j, world)| {
            let j = owner[j];
            let local = skel.frame[j].transpose() * (world - p(j));
            SkeletalLandmark {
                name: name.to_string(),
                joint: j,
                offset: [q(local.x), q(local.y), q(local.z)],
            }
        })
        .collect()
}

fn face_landmarks(vertices: &[[f64; 3]], pos: &[[f64; 3]]) -> Vec<SurfaceLandmark> {
    let head = pos[4];
    let neck_y = pos[3][1];
    let targets: [(&str, f64, f64); 8] = [
        ("face_brow", 0.0, 0.12),
        ("face_l_eye", 0.035, 0.09),
        ("face_r_eye", -0.035, 0.09),
        ("face_nose", 0.0, 0.06),
        ("face_l_cheek", 0.06, 0.04),
        ("face_r_cheek", -0.06, 0.04),
        ("face_mouth", 0.0, 0.02),
        ("face_chin", 0.0, -0.01),
    ];
    let candidates: Vec<usize> = (0..vertices.len())
        .filter(|&i| vertices[i][1] > neck_y + 0.03 && vertices[i][2] > 0.0 && vertices[i][0].abs() < 0.12)
        .collect();
    let mut used = Vec::new();
    let mut out = Vec::new();
    for (name, dx, dy) in targets {
        let t = [head[0] + dx, head[1] + dy, 0.1];
        let best = candidates
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .min_by(|&a, &b| mesh::dist(vertices[a], t).total_cmp(&mesh::dist(vertices[b], t)));
        if let Some(v) = best {
            used.push(v);
            out.push(SurfaceLandmark {
                name: name.to_string(),
                vertex: v,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::validate_rig;

    #[test]
    fn default_rig_has_pinned_size() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        assert_eq!(rig.joint_count(), 17);
        assert_eq!(rig.vertex_count(), 1946);
        assert_eq!(rig.attribute_count(), 20);
        assert_eq!(rig.schema.count(AttributeKind::Scale), 6);
        assert_eq!(validate_rig(&rig), vec![]);
    }

    #[test]
    fn surface_is_closed_and_outward() {
        let rig = make_desk_rig(3, 17, 12).unwrap();
        let f = &rig.template.faces;
        assert!(mesh::manifold_defect(f).is_none());
        assert!(mesh::boundary_loops(f).is_empty());
        assert!(mesh::signed_volume(&rig.template.vertices, f) > 0.0);
        // V - E + F = 2 for a sphere
        let euler = rig.vertex_count() as i64 - mesh::edges(f).len() as i64 + f.len() as i64;
        assert_eq!(euler, 2);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(make_desk_rig(5, 17, 12).unwrap(), make_desk_rig(5, 17, 12).unwrap());
        assert_ne!(
            make_desk_rig(5, 17, 12).unwrap().template,
            make_desk_rig(6, 17, 12).unwrap().template
        );
    }

    #[test]
    fn joint_count_range() {
        assert!(matches!(make_desk_rig(0, 1, 12), Err(Error::Precondition(_))));
        assert!(matches!(make_desk_rig(0, 23, 12), Err(Error::Precondition(_))));
        for j in [2, 5, 16, 18, 22] {
            let rig = make_desk_rig(0, j, 12).unwrap();
            assert_eq!(validate_rig(&rig), vec![], "joints={j}");
            assert_eq!(rig.vertex_count(), 1946);
        }
    }

    #[test]
    fn other_resolutions() {
        for n in [8, 16] {
            let rig = make_desk_rig(1, 17, n).unwrap();
            assert_eq!(rig.vertex_count(), 163 * n - 10);
            assert_eq!(validate_rig(&rig), vec![]);
        }
        assert!(make_desk_rig(0, 17, 7).is_err());
    }

    #[test]
    fn segmentation_follows_limbs() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let l_wrist = rig.tree.index_of("l_wrist").unwrap();
        // the hand tip pole is the last vertex of the left arm tube
        let tip = 12 * 43 + 2 - 16 + (12 * 30 + 1) - 1;
        assert_eq!(rig.segmentation[tip] as usize, l_wrist);
        assert!(rig.template.vertices[tip][0] > 0.3);
    }

    #[test]
    fn subdivision_keeps_rig_valid() {
        let rig = make_desk_rig(0, 17, 12).unwrap();
        let sub = subdivide(&rig, 1);
        assert_eq!(sub.template.faces.len(), 4 * rig.template.faces.len());
        assert_eq!(validate_rig(&sub), vec![]);
    }

    #[test]
    fn weight_rows_sum_exactly() {
        let rig = make_desk_rig(2, 17, 12).unwrap();
        for w in &rig.skin.weights {
            assert_eq!(w.iter().sum::<f64>(), 1.0);
            assert!(w.iter().all(|x| *x as f32 as f64 == *x));
        }
    }
}
