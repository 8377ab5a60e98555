//! Binary container shared by rigs, trained models and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8 bytes   magic "ARMATURE"
//! 8   u32       header length H (bytes, multiple of 8)
//! 12  u32       reserved, 0
//! 16  H bytes   JSON header, space padded
//! 16+H          data block; sections at 8-byte aligned offsets
//! ```
//!
//! The header lists every section as `{name, dtype, offset, count}` where
//! `offset` is relative to the data block and `count` is in elements. Dtypes:
//! `f32`, `u32`, `i32`, `u16`, and `u32f32` (interleaved index/weight pairs).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{
    AttributeKind, AttributeTarget, KinematicTree, Landmarks, RestPose, Rig, SkeletalAttribute, SkeletalAttributeSchema, SkeletalLandmark,
    SkinWeights, SurfaceLandmark, TemplateMesh, MAX_INFLUENCES,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ARMATURE";
pub const FORMAT_VERSION: u32 = 1;
pub const EULER_ORDER: &str = "XYZ-intrinsic";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    dtype: String,
    offset: u64,
    count: u64,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" | "u32" | "i32" => Some(4),
        "u16" => Some(2),
        "u32f32" => Some(8),
        _ => None,
    }
}

/// Accumulates header entries and sections, then serializes them.
#[derive(Debug, Default)]
pub struct ContainerWriter {
    meta: Map<String, Value>,
    sections: Vec<(String, &'static str, Vec<u8>, usize)>,
}

impl ContainerWriter {
    pub fn new(kind: &str) -> Self {
        let mut w = ContainerWriter::default();
        w.meta.insert("format".into(), Value::from(kind));
        w.meta.insert("format_version".into(), Value::from(FORMAT_VERSION));
        w
    }

    pub fn meta(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).expect("header values serialize");
        self.meta.insert(key.to_string(), v);
        self
    }

    pub fn f32(&mut self, name: &str, data: &[f64]) -> &mut Self {
        let bytes = data.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
        self.sections.push((name.to_string(), "f32", bytes, data.len()));
        self
    }

    pub fn u32(&mut self, name: &str, data: &[u32]) -> &mut Self {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.sections.push((name.to_string(), "u32", bytes, data.len()));
        self
    }

    pub fn i32(&mut self, name: &str, data: &[i32]) -> &mut Self {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.sections.push((name.to_string(), "i32", bytes, data.len()));
        self
    }

    pub fn u16(&mut self, name: &str, data: &[u16]) -> &mut Self {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.sections.push((name.to_string(), "u16", bytes, data.len()));
        self
    }

    pub fn pairs(&mut self, name: &str, index: &[u32], weight: &[f64]) -> &mut Self {
        let bytes = index
            .iter()
            .zip(weight)
            .flat_map(|(i, w)| {
                let mut b = [0u8; 8];
                b[..4].copy_from_slice(&i.to_le_bytes());
                b[4..].copy_from_slice(&(*w as f32).to_le_bytes());
                b
            })
            .collect();
        self.sections.push((name.to_string(), "u32f32", bytes, index.len()));
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.sections.len());
        let mut offset = 0u64;
        for (name, dtype, bytes, count) in &self.sections {
            entries.push(SectionEntry {
                name: name.clone(),
                dtype: dtype.to_string(),
                offset,
                count: *count as u64,
            });
            offset += (bytes.len() as u64).div_ceil(8) * 8;
        }
        let mut meta = self.meta.clone();
        meta.insert("sections".into(), serde_json::to_value(&entries).unwrap());
        let mut header = serde_json::to_vec(&Value::Object(meta)).unwrap();
        while !header.len().is_multiple_of(8) {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, bytes, _) in &self.sections {
            out.extend_from_slice(bytes);
            while out.len() % 8 != 0 {
                out.push(0);
            }
        }
        out
    }
}

/// A parsed container with lazy section decoding.
#[derive(Debug, Clone)]
pub struct Container {
    meta: Map<String, Value>,
    sections: Vec<SectionEntry>,
    data: Vec<u8>,
}

impl Container {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse("magic", "missing ARMATURE signature"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if 16 + hlen > bytes.len() {
            return Err(Error::parse("header", format!("length {hlen} exceeds file size")));
        }
        let value: Value = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::parse("header", e.to_string()))?;
        let Value::Object(mut meta) = value else {
            return Err(Error::parse("header", "not a JSON object"));
        };
        let version = meta.get("format_version").and_then(Value::as_u64);
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::parse("header", format!("unsupported format_version {version:?}")));
        }
        let sections: Vec<SectionEntry> = meta
            .remove("sections")
            .ok_or_else(|| Error::parse("header", "missing `sections`"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::parse("sections", e.to_string())))?;
        let data = bytes[16 + hlen..].to_vec();
        for s in &sections {
            let size = dtype_size(&s.dtype).ok_or_else(|| Error::parse(&s.name, format!("unknown dtype `{}`", s.dtype)))?;
            let end = s.offset as usize + s.count as usize * size;
            if end > data.len() {
                return Err(Error::parse(
                    &s.name,
                    format!("section ends at byte {end} past data block of {} bytes", data.len()),
                ));
            }
        }
        Ok(Container { meta, sections, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn format(&self) -> Option<&str> {
        self.meta.get("format").and_then(Value::as_str)
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::parse(format!("header.{key}"), "missing"))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::parse(format!("header.{key}"), e.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|s| s.name.as_str()).collect()
    }

    fn raw(&self, name: &str, dtype: &str, expected: Option<usize>) -> Result<(&[u8], usize)> {
        let s = self
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::parse(name, "section missing"))?;
        if s.dtype != dtype {
            return Err(Error::parse(name, format!("dtype `{}`, expected `{dtype}`", s.dtype)));
        }
        let count = s.count as usize;
        if let Some(e) = expected {
            if e != count {
                return Err(Error::parse(name, format!("{count} elements, header implies {e}")));
            }
        }
        let size = dtype_size(dtype).unwrap();
        let start = s.offset as usize;
        Ok((&self.data[start..start + count * size], count))
    }

    pub fn f32(&self, name: &str, expected: Option<usize>) -> Result<Vec<f64>> {
        let (b, _) = self.raw(name, "f32", expected)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn u32(&self, name: &str, expected: Option<usize>) -> Result<Vec<u32>> {
        let (b, _) = self.raw(name, "u32", expected)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn i32(&self, name: &str, expected: Option<usize>) -> Result<Vec<i32>> {
        let (b, _) = self.raw(name, "i32", expected)?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u16(&self, name: &str, expected: Option<usize>) -> Result<Vec<u16>> {
        let (b, _) = self.raw(name, "u16", expected)?;
        Ok(b.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn pairs(&self, name: &str, expected: Option<usize>) -> Result<(Vec<u32>, Vec<f64>)> {
        let (b, _) = self.raw(name, "u32f32", expected)?;
        Ok(b.chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .unzip())
    }
}

#[derive(Serialize, Deserialize)]
struct AttributeHeader {
    name: String,
    kind: AttributeKind,
    targets: Vec<usize>,
    range: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct JointRef {
    name: String,
    joint: usize,
}

#[derive(Serialize, Deserialize)]
struct VertexRef {
    name: String,
    vertex: usize,
}

fn flatten(rows: &[[f64; 3]]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

fn rows3(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Writes the rig sections into a container writer.
pub(crate) fn write_rig(w: &mut ContainerWriter, rig: &Rig) {
    let j = rig.joint_count();
    let v = rig.vertex_count();
    w.meta("rig_id", &rig.id)
        .meta("euler_order", EULER_ORDER)
        .meta("J", j)
        .meta("V", v)
        .meta("F", rig.template.faces.len())
        .meta("N_k", rig.attribute_count())
        .meta("I", MAX_INFLUENCES)
        .meta("joint_names", rig.tree.names())
        .meta(
            "attributes",
            rig.schema
                .attributes
                .iter()
                .map(|a| AttributeHeader {
                    name: a.name.clone(),
                    kind: a.kind,
                    targets: a.targets.iter().map(|t| t.joint).collect(),
                    range: a.range,
                })
                .collect::<Vec<_>>(),
        )
        .meta(
            "skeletal_landmarks",
            rig.landmarks
                .skeletal
                .iter()
                .map(|l| JointRef {
                    name: l.name.clone(),
                    joint: l.joint,
                })
                .collect::<Vec<_>>(),
        )
        .meta(
            "surface_landmarks",
            rig.landmarks
                .surface
                .iter()
                .map(|l| VertexRef {
                    name: l.name.clone(),
                    vertex: l.vertex,
                })
                .collect::<Vec<_>>(),
        )
        .meta("hand_joints", &rig.hand_joints);

    let parents: Vec<i32> = rig.tree.parents().iter().map(|p| p.map_or(-1, |p| p as i32)).collect();
    let faces: Vec<u32> = rig.template.faces.iter().flatten().copied().collect();
    let directions: Vec<[f64; 3]> = rig
        .schema
        .attributes
        .iter()
        .flat_map(|a| a.targets.iter().map(|t| t.direction))
        .collect();
    let skin_j: Vec<u32> = rig.skin.joints.iter().flatten().copied().collect();
    let skin_w: Vec<f64> = rig.skin.weights.iter().flatten().copied().collect();
    let offsets: Vec<[f64; 3]> = rig.landmarks.skeletal.iter().map(|l| l.offset).collect();
    w.f32("vertices", &rig.template.flat())
        .u32("faces", &faces)
        .i32("parents", &parents)
        .f32("rest_rotation", &flatten(&rig.rest.rotation))
        .f32("rest_translation", &flatten(&rig.rest.translation))
        .f32("attribute_directions", &flatten(&directions))
        .pairs("skin", &skin_j, &skin_w)
        .u16("segmentation", &rig.segmentation)
        .f32("landmark_offsets", &flatten(&offsets));
    debug_assert_eq!(skin_j.len(), v * MAX_INFLUENCES);
    debug_assert_eq!(parents.len(), j);
}

/// Decodes the rig part of a container (no validation).
pub(crate) fn read_rig(c: &Container) -> Result<Rig> {
    let j: usize = c.meta("J")?;
    let v: usize = c.meta("V")?;
    let f: usize = c.meta("F")?;
    let n_k: usize = c.meta("N_k")?;
    let i: usize = c.meta("I")?;
    if i != MAX_INFLUENCES {
        return Err(Error::parse("header.I", format!("{i} influences, expected {MAX_INFLUENCES}")));
    }
    let order: String = c.meta("euler_order")?;
    if order != EULER_ORDER {
        return Err(Error::parse("header.euler_order", format!("unsupported `{order}`")));
    }
    let names: Vec<String> = c.meta("joint_names")?;
    if names.len() != j {
        return Err(Error::parse("header.joint_names", format!("{} names for J = {j}", names.len())));
    }
    let attrs: Vec<AttributeHeader> = c.meta("attributes")?;
    if attrs.len() != n_k {
        return Err(Error::parse(
            "header.attributes",
            format!("{} entries for N_k = {n_k}", attrs.len()),
        ));
    }
    let skel_lm: Vec<JointRef> = c.meta("skeletal_landmarks")?;
    let surf_lm: Vec<VertexRef> = c.meta("surface_landmarks")?;
    let hand_joints: Vec<usize> = c.meta("hand_joints")?;

    let vertices = rows3(&c.f32("vertices", Some(v * 3))?);
    let faces: Vec<[u32; 3]> = c.u32("faces", Some(f * 3))?.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect();
    let parents: Vec<Option<usize>> = c
        .i32("parents", Some(j))?
        .into_iter()
        .map(|p| if p < 0 { None } else { Some(p as usize) })
        .collect();
    let rotation = rows3(&c.f32("rest_rotation", Some(j * 3))?);
    let translation = rows3(&c.f32("rest_translation", Some(j * 3))?);
    let n_targets: usize = attrs.iter().map(|a| a.targets.len()).sum();
    let directions = rows3(&c.f32("attribute_directions", Some(n_targets * 3))?);
    let (skin_j, skin_w) = c.pairs("skin", Some(v * MAX_INFLUENCES))?;
    let segmentation = c.u16("segmentation", Some(v))?;
    let offsets = rows3(&c.f32("landmark_offsets", Some(skel_lm.len() * 3))?);

    let mut dir_iter = directions.into_iter();
    let attributes = attrs
        .into_iter()
        .map(|a| SkeletalAttribute {
            name: a.name,
            kind: a.kind,
            targets: a
                .targets
                .into_iter()
                .map(|joint| AttributeTarget {
                    joint,
                    direction: dir_iter.next().unwrap(),
                })
                .collect(),
            range: a.range,
        })
        .collect();
    let skin = SkinWeights {
        joints: skin_j.chunks_exact(MAX_INFLUENCES).map(|c| c.try_into().unwrap()).collect(),
        weights: skin_w.chunks_exact(MAX_INFLUENCES).map(|c| c.try_into().unwrap()).collect(),
    };
    Ok(Rig {
        id: c.meta("rig_id")?,
        tree: KinematicTree::new(names, parents),
        rest: RestPose { rotation, translation },
        schema: SkeletalAttributeSchema { attributes },
        template: TemplateMesh { vertices, faces },
        skin,
        segmentation,
        landmarks: Landmarks {
            skeletal: skel_lm
                .into_iter()
                .zip(offsets)
                .map(|(l, offset)| SkeletalLandmark {
                    name: l.name,
                    joint: l.joint,
                    offset,
                })
                .collect(),
            surface: surf_lm
                .into_iter()
                .map(|l| SurfaceLandmark {
                    name: l.name,
                    vertex: l.vertex,
                })
                .collect(),
        },
        hand_joints,
    })
}

/// Canonical serialization of a rig.
pub fn rig_to_bytes(rig: &Rig) -> Vec<u8> {
    let mut w = ContainerWriter::new("armature");
    write_rig(&mut w, rig);
    w.to_bytes()
}

pub fn save_rig(rig: &Rig, path: &Path) -> Result<()> {
    std::fs::write(path, rig_to_bytes(rig)).map_err(|e| Error::io(path, e))
}

/// Loads and validates a rig. Model sections in the same file are ignored.
pub fn load_rig(path: &Path) -> Result<Rig> {
    let rig = read_rig(&Container::read(path)?)?;
    rig.validate()?;
    Ok(rig)
}
