//! Forward kinematics with per-joint scale and bone-length modifications.
//!
//! Each joint contributes the factor `[2^s R(theta) R(rest) | t * t_e + t_rest]`
//! and world transforms multiply those factors root first, after the global
//! root transform.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    affine_apply, affine_from_parts, affine_inverse, affine_mul, affine_to_matrix4, affine_translation, euler_xyz, Affine, AFFINE_IDENTITY,
};
use crate::rig::{JointModifiers, Rig};

/// Global transform, per-joint Euler angles and skeletal attributes of one
/// frame. Scale attributes are log2 factors, bone-length attributes meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
    pub joint_angles: Vec<[f64; 3]>,
    pub skeletal: Vec<f64>,
}

impl PoseState {
    pub fn zero(rig: &Rig) -> Self {
        PoseState {
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            joint_angles: vec![[0.0; 3]; rig.joint_count()],
            skeletal: vec![0.0; rig.attribute_count()],
        }
    }

    pub fn check(&self, rig: &Rig) -> Result<()> {
        if self.joint_angles.len() != rig.joint_count() {
            return Err(Error::dim("joint_angles", rig.joint_count(), self.joint_angles.len()));
        }
        if self.skeletal.len() != rig.attribute_count() {
            return Err(Error::dim("skeletal", rig.attribute_count(), self.skeletal.len()));
        }
        let finite = self.root_rotation.iter().chain(&self.root_translation).all(|x| x.is_finite())
            && self.joint_angles.iter().flatten().all(|x| x.is_finite())
            && self.skeletal.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Input("pose contains non-finite entries".into()));
        }
        Ok(())
    }

    pub fn root_affine(&self) -> Affine {
        affine_from_parts(&euler_xyz(self.root_rotation), &Vector3::from(self.root_translation))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    pub world: Vec<Affine>,
    pub rest_world_inverse: Vec<Affine>,
    pub skinning: Vec<Affine>,
}

impl JointTransforms {
    pub fn world_matrix(&self, j: usize) -> Matrix4<f64> {
        affine_to_matrix4(&self.world[j])
    }

    pub fn rest_world_inverse_matrix(&self, j: usize) -> Matrix4<f64> {
        affine_to_matrix4(&self.rest_world_inverse[j])
    }

    pub fn skinning_matrix(&self, j: usize) -> Matrix4<f64> {
        affine_to_matrix4(&self.skinning[j])
    }
}

/// Rig data needed by FK, precomputed once per rig.
#[derive(Debug, Clone)]
pub struct Kinematics {
    parents: Vec<Option<usize>>,
    rest_rotation: Vec<Matrix3<f64>>,
    rest_translation: Vec<Vector3<f64>>,
    modifiers: JointModifiers,
    rest_world_inverse: Vec<Affine>,
    attribute_count: usize,
}

impl Kinematics {
    pub fn new(rig: &Rig) -> Self {
        let j = rig.joint_count();
        let mut k = Kinematics {
            parents: rig.tree.parents().to_vec(),
            rest_rotation: rig.rest.rotation.iter().map(|e| euler_xyz(*e)).collect(),
            rest_translation: rig.rest.translation.iter().map(|t| Vector3::from(*t)).collect(),
            modifiers: rig.schema.joint_modifiers(j),
            rest_world_inverse: Vec::new(),
            attribute_count: rig.attribute_count(),
        };
        let zero = PoseState {
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            joint_angles: vec![[0.0; 3]; j],
            skeletal: vec![0.0; k.attribute_count],
        };
        let rest_world = k.world(&zero);
        k.rest_world_inverse = rest_world
            .iter()
            .map(|a| affine_inverse(a).expect("rest transforms are rotations"))
            .collect();
        k
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn modifiers(&self) -> &JointModifiers {
        &self.modifiers
    }

    pub fn rest_rotation(&self, j: usize) -> &Matrix3<f64> {
        &self.rest_rotation[j]
    }

    pub fn rest_translation(&self, j: usize) -> &Vector3<f64> {
        &self.rest_translation[j]
    }

    pub fn rest_world_inverse(&self) -> &[Affine] {
        &self.rest_world_inverse
    }

    /// Log2 scale and bone-length offset (with direction) acting on joint `j`.
    pub fn joint_modification(&self, skeletal: &[f64], j: usize) -> (f64, f64, [f64; 3]) {
        let s = self.modifiers.scale[j].map_or(0.0, |k| skeletal[k]);
        let (t, dir) = self.modifiers.bone[j].map_or((0.0, [0.0; 3]), |(k, d)| (skeletal[k], d));
        (s, t, dir)
    }

    /// Per-joint factor of the FK product.
    pub fn local(&self, pose: &PoseState, j: usize) -> Affine {
        let (s, t, dir) = self.joint_modification(&pose.skeletal, j);
        let lin = euler_xyz(pose.joint_angles[j]) * self.rest_rotation[j] * s.exp2();
        let tr = Vector3::from(dir) * t + self.rest_translation[j];
        affine_from_parts(&lin, &tr)
    }

    /// World transforms, reusing each parent's product.
    pub fn world(&self, pose: &PoseState) -> Vec<Affine> {
        let root = pose.root_affine();
        let mut world: Vec<Affine> = Vec::with_capacity(self.parents.len());
        for j in 0..self.parents.len() {
            let local = self.local(pose, j);
            let w = match self.parents[j] {
                Some(p) => affine_mul(&world[p], &local),
                None => affine_mul(&root, &local),
            };
            world.push(w);
        }
        world
    }

    pub fn transforms(&self, pose: &PoseState) -> JointTransforms {
        let world = self.world(pose);
        let skinning = world.iter().zip(&self.rest_world_inverse).map(|(w, r)| affine_mul(w, r)).collect();
        JointTransforms {
            world,
            rest_world_inverse: self.rest_world_inverse.clone(),
            skinning,
        }
    }
}

/// The FK factor of one joint as a 4x4 matrix.
pub fn local_transform(rig: &Rig, pose: &PoseState, joint: usize) -> Result<Matrix4<f64>> {
    pose.check(rig)?;
    if joint >= rig.joint_count() {
        return Err(Error::Input(format!("joint {joint} out of range")));
    }
    Ok(affine_to_matrix4(&Kinematics::new(rig).local(pose, joint)))
}

pub fn forward_kinematics(rig: &Rig, pose: &PoseState) -> Result<JointTransforms> {
    pose.check(rig)?;
    Ok(Kinematics::new(rig).transforms(pose))
}

pub fn joint_positions(transforms: &JointTransforms) -> Vec<[f64; 3]> {
    transforms
        .world
        .iter()
        .map(|w| {
            let t = affine_translation(w);
            [t.x, t.y, t.z]
        })
        .collect()
}

/// World positions of the rig's skeletal landmarks.
pub fn skeletal_landmark_positions(rig: &Rig, transforms: &JointTransforms) -> Vec<[f64; 3]> {
    rig.landmarks
        .skeletal
        .iter()
        .map(|l| affine_apply(&transforms.world[l.joint], l.offset))
        .collect()
}

/// Identity transforms for a rig with `joints` joints.
pub fn identity_transforms(joints: usize) -> JointTransforms {
    JointTransforms {
        world: vec![AFFINE_IDENTITY; joints],
        rest_world_inverse: vec![AFFINE_IDENTITY; joints],
        skinning: vec![AFFINE_IDENTITY; joints],
    }
}
