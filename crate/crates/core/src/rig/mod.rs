//! The posable asset: kinematic tree, rest pose, skeletal-attribute schema,
//! template mesh and skin weights.

mod container;
mod desk;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use container::{load_rig, rig_to_bytes, save_rig, Container, ContainerWriter, FORMAT_VERSION};
pub(crate) use container::{read_rig, write_rig};
pub use desk::{make_desk_rig, subdivide, DEFAULT_JOINTS, DEFAULT_RADIAL_SEGMENTS, MAX_DESK_JOINTS};

use crate::error::{Error, Result};

/// Maximum number of joints influencing a single vertex.
pub const MAX_INFLUENCES: usize = 8;

/// Per-vertex weight sums must be within this of one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

impl KinematicTree {
    /// Builds the tree without checking invariants; see [`validate_rig`].
    pub fn new(names: Vec<String>, parents: Vec<Option<usize>>) -> Self {
        let mut children = vec![Vec::new(); parents.len()];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p < children.len() {
                    children[p].push(j);
                }
            }
        }
        KinematicTree { names, parents, children }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|p| p.is_none()).unwrap_or(0)
    }

    /// Ancestor chain `K(j)` ordered root first and ending at `j`.
    pub fn ancestors(&self, j: usize) -> Vec<usize> {
        let mut chain = vec![j];
        let mut cur = j;
        while let Some(p) = self.parents[cur] {
            if chain.len() > self.len() {
                break;
            }
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// Tree neighbours of `j`: parent and children.
    pub fn neighbors(&self, j: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self.parents[j].into_iter().collect();
        n.extend_from_slice(&self.children[j]);
        n
    }

    /// Joints in the subtree rooted at `j` (including `j`).
    pub fn subtree(&self, j: usize) -> Vec<usize> {
        let mut out = vec![j];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.children[out[i]]);
            i += 1;
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestPose {
    /// Per-joint Euler angles (intrinsic XYZ, radians) relative to the parent.
    pub rotation: Vec<[f64; 3]>,
    /// Per-joint offset from the parent joint, in the parent frame (meters).
    pub translation: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Scale,
    BoneLength,
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributeKind::Scale => "scale",
            AttributeKind::BoneLength => "bone_length",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTarget {
    pub joint: usize,
    /// Unit direction in the parent frame; zero for scale attributes.
    pub direction: [f64; 3],
}

/// One controllable skeletal attribute. Scale attributes hold log2 factors;
/// bone-length attributes hold offsets in meters along each target's direction.
///
/// A bone-length attribute may drive several joints (e.g. a symmetric
/// shoulder width moves both shoulders along mirrored directions). Every joint
/// is driven by at most one scale and one bone-length attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletalAttribute {
    pub name: String,
    pub kind: AttributeKind,
    pub targets: Vec<AttributeTarget>,
    /// Suggested editing range for sliders.
    pub range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SkeletalAttributeSchema {
    pub attributes: Vec<SkeletalAttribute>,
}

/// Per-joint lookup of the attributes acting on it.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModifiers {
    pub scale: Vec<Option<usize>>,
    pub bone: Vec<Option<(usize, [f64; 3])>>,
}

impl SkeletalAttributeSchema {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn count(&self, kind: AttributeKind) -> usize {
        self.attributes.iter().filter(|a| a.kind == kind).count()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn joint_modifiers(&self, joint_count: usize) -> JointModifiers {
        let mut scale = vec![None; joint_count];
        let mut bone = vec![None; joint_count];
        for (k, a) in self.attributes.iter().enumerate() {
            for t in &a.targets {
                if t.joint >= joint_count {
                    continue;
                }
                match a.kind {
                    AttributeKind::Scale => scale[t.joint] = Some(k),
                    AttributeKind::BoneLength => bone[t.joint] = Some((k, t.direction)),
                }
            }
        }
        JointModifiers { scale, bone }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TemplateMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| v.iter().copied()).collect()
    }
}

/// Fixed-slot sparse skin weights: `MAX_INFLUENCES` (joint, weight) pairs per
/// vertex, unused slots carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    pub joints: Vec<[u32; MAX_INFLUENCES]>,
    pub weights: Vec<[f64; MAX_INFLUENCES]>,
}

impl SkinWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Dense `V x J` weight matrix, row-major.
    pub fn to_dense(&self, joint_count: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.len() * joint_count];
        for (i, (js, ws)) in self.joints.iter().zip(&self.weights).enumerate() {
            for (&j, &w) in js.iter().zip(ws) {
                d[i * joint_count + j as usize] += w;
            }
        }
        d
    }
}

/// A point rigidly attached to a joint frame (fingertip, nose tip, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletalLandmark {
    pub name: String,
    pub joint: usize,
    /// Offset in the joint's local frame.
    pub offset: [f64; 3],
}

/// A named template vertex (face keypoints).
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceLandmark {
    pub name: String,
    pub vertex: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Landmarks {
    pub skeletal: Vec<SkeletalLandmark>,
    pub surface: Vec<SurfaceLandmark>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub id: String,
    pub tree: KinematicTree,
    pub rest: RestPose,
    pub schema: SkeletalAttributeSchema,
    pub template: TemplateMesh,
    pub skin: SkinWeights,
    /// Body-part label (joint index) per vertex.
    pub segmentation: Vec<u16>,
    pub landmarks: Landmarks,
    /// Joints whose rotations form the hand pose subspace.
    pub hand_joints: Vec<usize>,
}

impl Rig {
    pub fn joint_count(&self) -> usize {
        self.tree.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.template.vertex_count()
    }

    pub fn attribute_count(&self) -> usize {
        self.schema.len()
    }

    /// Joints posed by the body prior: everything except the root and hands.
    pub fn body_joints(&self) -> Vec<usize> {
        let root = self.tree.root();
        (0..self.joint_count())
            .filter(|j| *j != root && !self.hand_joints.contains(j))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_rig(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: &'static str,
    pub index: usize,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}] {}: {}", self.entity, self.index, self.rule, self.detail)
    }
}

fn violation(entity: &'static str, index: usize, rule: &'static str, detail: String) -> Violation {
    Violation {
        entity,
        index,
        rule,
        detail,
    }
}

/// Checks every rig invariant. Returns an empty list for a valid rig.
pub fn validate_rig(rig: &Rig) -> Vec<Violation> {
    let mut out = Vec::new();
    let j_count = rig.tree.len();
    let v_count = rig.template.vertices.len();

    check_tree(&rig.tree, &mut out);

    if rig.tree.names.len() != j_count {
        out.push(violation(
            "KinematicTree",
            0,
            "names",
            format!("{} names for {} joints", rig.tree.names.len(), j_count),
        ));
    }
    for (j, name) in rig.tree.names.iter().enumerate() {
        if rig.tree.names[..j].contains(name) {
            out.push(violation("KinematicTree", j, "unique names", format!("duplicate name `{name}`")));
        }
    }

    for (what, arr) in [("rotation", &rig.rest.rotation), ("translation", &rig.rest.translation)] {
        if arr.len() != j_count {
            out.push(violation(
                "RestPose",
                0,
                "one entry per joint",
                format!("{what} has {} entries for {j_count} joints", arr.len()),
            ));
        }
        for (j, e) in arr.iter().enumerate() {
            if e.iter().any(|x| !x.is_finite()) {
                out.push(violation("RestPose", j, "finite", format!("{what} {e:?}")));
            }
        }
    }

    check_schema(&rig.schema, j_count, &mut out);
    check_mesh(&rig.template, &mut out);

    if rig.skin.joints.len() != v_count || rig.skin.weights.len() != v_count {
        out.push(violation(
            "SkinWeights",
            0,
            "one row per vertex",
            format!("{} rows for {v_count} vertices", rig.skin.weights.len()),
        ));
    }
    for (i, (js, ws)) in rig.skin.joints.iter().zip(&rig.skin.weights).enumerate() {
        if let Some(s) = ws.iter().position(|w| *w < 0.0 || !w.is_finite()) {
            out.push(violation("SkinWeights", i, "non-negative", format!("weight {} at slot {s}", ws[s])));
            continue;
        }
        let sum: f64 = ws.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            out.push(violation("SkinWeights", i, "sum to one", format!("weights sum to {sum}")));
        }
        for (&j, &w) in js.iter().zip(ws) {
            if w > 0.0 && j as usize >= j_count {
                out.push(violation("SkinWeights", i, "joint index", format!("joint {j} out of range")));
            }
        }
    }

    if rig.segmentation.len() != v_count {
        out.push(violation(
            "Rig",
            0,
            "segmentation per vertex",
            format!("{} labels for {v_count} vertices", rig.segmentation.len()),
        ));
    }
    for (i, &s) in rig.segmentation.iter().enumerate() {
        if s as usize >= j_count {
            out.push(violation("Rig", i, "segmentation label", format!("label {s} out of range")));
        }
    }
    for (k, l) in rig.landmarks.skeletal.iter().enumerate() {
        if l.joint >= j_count {
            out.push(violation("Landmarks", k, "joint index", format!("`{}` joint {}", l.name, l.joint)));
        }
    }
    for (k, l) in rig.landmarks.surface.iter().enumerate() {
        if l.vertex >= v_count {
            out.push(violation(
                "Landmarks",
                k,
                "vertex index",
                format!("`{}` vertex {}", l.name, l.vertex),
            ));
        }
    }
    for &h in &rig.hand_joints {
        if h >= j_count {
            out.push(violation("Rig", h, "hand joint", "hand joint out of range".into()));
        }
    }
    out
}

fn check_tree(tree: &KinematicTree, out: &mut Vec<Violation>) {
    let n = tree.len();
    let roots: Vec<usize> = (0..n).filter(|&j| tree.parents[j].is_none()).collect();
    if roots.len() != 1 {
        out.push(violation(
            "KinematicTree",
            roots.get(1).copied().unwrap_or(0),
            "single root",
            format!("{} roots: {roots:?}", roots.len()),
        ));
    }
    let mut in_cycle = vec![false; n];
    for j in 0..n {
        if let Some(p) = tree.parents[j] {
            if p >= n {
                out.push(violation("KinematicTree", j, "parent index", format!("parent {p} out of range")));
                in_cycle[j] = true;
            }
        }
    }
    for start in 0..n {
        if in_cycle[start] {
            continue;
        }
        // walk at most n steps; revisiting `start` means a cycle through it
        let mut cur = start;
        let mut steps = 0;
        let mut members = vec![start];
        while let Some(p) = tree.parents[cur] {
            if p >= n {
                break;
            }
            if p == start {
                let first = *members.iter().min().unwrap();
                if first == start {
                    out.push(violation(
                        "KinematicTree",
                        start,
                        "acyclic",
                        format!("cycle at joint {start}: {members:?}"),
                    ));
                }
                for m in &members {
                    in_cycle[*m] = true;
                }
                break;
            }
            members.push(p);
            cur = p;
            steps += 1;
            if steps > n {
                break;
            }
        }
    }
    for j in 0..n {
        if let Some(p) = tree.parents[j] {
            if !in_cycle[j] && p < n && p >= j {
                out.push(violation(
                    "KinematicTree",
                    j,
                    "topological order",
                    format!("parent {p} does not precede joint {j}"),
                ));
            }
        }
    }
}

fn check_schema(schema: &SkeletalAttributeSchema, j_count: usize, out: &mut Vec<Violation>) {
    let mut scale_seen = vec![false; j_count];
    let mut bone_seen = vec![false; j_count];
    for (k, a) in schema.attributes.iter().enumerate() {
        if a.targets.is_empty() {
            out.push(violation("SkeletalAttributeSchema", k, "has target", format!("`{}`", a.name)));
        }
        if a.kind == AttributeKind::Scale && a.targets.len() != 1 {
            out.push(violation(
                "SkeletalAttributeSchema",
                k,
                "scale targets one joint",
                format!("`{}` has {} targets", a.name, a.targets.len()),
            ));
        }
        for t in &a.targets {
            if t.joint >= j_count {
                out.push(violation(
                    "SkeletalAttributeSchema",
                    k,
                    "joint index",
                    format!("`{}` targets joint {}", a.name, t.joint),
                ));
                continue;
            }
            let seen = match a.kind {
                AttributeKind::Scale => &mut scale_seen,
                AttributeKind::BoneLength => &mut bone_seen,
            };
            if seen[t.joint] {
                out.push(violation(
                    "SkeletalAttributeSchema",
                    k,
                    "one attribute of each kind per joint",
                    format!("joint {} driven twice", t.joint),
                ));
            }
            seen[t.joint] = true;
            if a.kind == AttributeKind::BoneLength {
                let n = t.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    out.push(violation(
                        "SkeletalAttributeSchema",
                        k,
                        "unit direction",
                        format!("`{}` direction norm {n}", a.name),
                    ));
                }
            }
        }
    }
}

fn check_mesh(mesh: &TemplateMesh, out: &mut Vec<Violation>) {
    let v = mesh.vertices.len();
    for (i, p) in mesh.vertices.iter().enumerate() {
        if p.iter().any(|x| !x.is_finite()) {
            out.push(violation("TemplateMesh", i, "finite", format!("vertex {p:?}")));
        }
    }
    let mut ok = true;
    for (f, tri) in mesh.faces.iter().enumerate() {
        if tri.iter().any(|&i| i as usize >= v) {
            out.push(violation(
                "TemplateMesh",
                f,
                "face index",
                format!("face {tri:?} with {v} vertices"),
            ));
            ok = false;
        } else if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            out.push(violation("TemplateMesh", f, "distinct corners", format!("face {tri:?}")));
            ok = false;
        }
    }
    if ok {
        if let Some((e, detail)) = crate::mesh::manifold_defect(&mesh.faces) {
            out.push(violation("TemplateMesh", e, "manifold", detail));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> Rig {
        make_desk_rig(0, DEFAULT_JOINTS, DEFAULT_RADIAL_SEGMENTS).unwrap()
    }

    #[test]
    fn desk_rig_is_valid() {
        assert_eq!(validate_rig(&small_rig()), vec![]);
    }

    #[test]
    fn negative_weight_is_one_violation() {
        let mut rig = small_rig();
        rig.skin.weights[7][0] = -0.1;
        let v = validate_rig(&rig);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].index, 7);
        assert_eq!(v[0].rule, "non-negative");
    }

    #[test]
    fn weight_sum_violation_names_vertex() {
        let mut rig = small_rig();
        let w = &mut rig.skin.weights[11];
        let s: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x *= 0.9 / s;
        }
        let v = validate_rig(&rig);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].index, v[0].rule), (11, "sum to one"));
    }

    #[test]
    fn two_roots_is_single_violation() {
        let mut rig = small_rig();
        let mut parents = rig.tree.parents().to_vec();
        parents[4] = None;
        rig.tree = KinematicTree::new(rig.tree.names().to_vec(), parents);
        let v = validate_rig(&rig);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, "single root");
    }

    #[test]
    fn cycle_is_reported_at_smallest_joint() {
        let mut rig = small_rig();
        let mut parents = rig.tree.parents().to_vec();
        parents[3] = Some(5);
        parents[5] = Some(3);
        rig.tree = KinematicTree::new(rig.tree.names().to_vec(), parents);
        let v = validate_rig(&rig);
        let cycles: Vec<_> = v.iter().filter(|v| v.rule == "acyclic").collect();
        assert_eq!(cycles.len(), 1);
        assert!(cycles[0].to_string().contains("cycle at joint 3"), "{}", cycles[0]);
    }

    #[test]
    fn ancestors_end_at_root() {
        let rig = small_rig();
        for j in 0..rig.joint_count() {
            let k = rig.tree.ancestors(j);
            assert!(k.len() <= rig.joint_count());
            assert_eq!(k[0], rig.tree.root());
            assert_eq!(*k.last().unwrap(), j);
        }
    }
}
