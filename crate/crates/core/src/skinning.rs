//! Linear blend skinning kernel and its benchmark harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointTransforms, Kinematics, PoseState};
use crate::math::Affine;
use crate::rig::{Rig, SkinWeights, MAX_INFLUENCES};

#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<[f64; 3]>,
}

impl PosedMesh {
    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }
}

/// Skin weights flattened into fixed-width slots for a branch-free loop.
#[derive(Debug, Clone)]
pub struct SkinningKernel {
    joints: Vec<u32>,
    weights: Vec<f64>,
    joint_count: usize,
}

impl SkinningKernel {
    pub fn new(skin: &SkinWeights, joint_count: usize) -> Self {
        SkinningKernel {
            joints: skin.joints.iter().flatten().copied().collect(),
            weights: skin.weights.iter().flatten().copied().collect(),
            joint_count,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.weights.len() / MAX_INFLUENCES
    }

    /// `out_i = (sum_k w_ik S_{j_ik}) x_i`, accumulating slots in ascending
    /// order.
    pub fn apply(&self, shaped: &[[f64; 3]], skinning: &[Affine], out: &mut [[f64; 3]]) {
        debug_assert!(skinning.len() >= self.joint_count);
        let slots = self
            .joints
            .chunks_exact(MAX_INFLUENCES)
            .zip(self.weights.chunks_exact(MAX_INFLUENCES));
        for ((x, o), (js, ws)) in shaped.iter().zip(out.iter_mut()).zip(slots) {
            let mut m = [0.0; 12];
            for k in 0..MAX_INFLUENCES {
                let s = &skinning[js[k] as usize];
                let w = ws[k];
                for e in 0..12 {
                    m[e] += w * s[e];
                }
            }
            *o = [
                m[0] * x[0] + m[1] * x[1] + m[2] * x[2] + m[3],
                m[4] * x[0] + m[5] * x[1] + m[6] * x[2] + m[7],
                m[8] * x[0] + m[9] * x[1] + m[10] * x[2] + m[11],
            ];
        }
    }
}

fn check_vertices(rig: &Rig, shaped: &[[f64; 3]]) -> Result<()> {
    if shaped.len() != rig.vertex_count() {
        return Err(Error::dim("shaped_vertices", rig.vertex_count(), shaped.len()));
    }
    Ok(())
}

pub fn skin(rig: &Rig, shaped: &[[f64; 3]], transforms: &JointTransforms) -> Result<PosedMesh> {
    check_vertices(rig, shaped)?;
    if transforms.skinning.len() != rig.joint_count() {
        return Err(Error::dim("transforms", rig.joint_count(), transforms.skinning.len()));
    }
    let kernel = SkinningKernel::new(&rig.skin, rig.joint_count());
    let mut out = vec![[0.0; 3]; shaped.len()];
    kernel.apply(shaped, &transforms.skinning, &mut out);
    Ok(PosedMesh { vertices: out })
}

/// FK and skinning for many poses; frames run in parallel with results
/// identical to the sequential path.
pub fn skin_batch(rig: &Rig, shaped: &[[f64; 3]], poses: &[PoseState]) -> Result<Vec<PosedMesh>> {
    check_vertices(rig, shaped)?;
    if poses.is_empty() {
        return Err(Error::Input("empty pose list".into()));
    }
    for (f, p) in poses.iter().enumerate() {
        p.check(rig).map_err(|e| Error::Input(format!("frame {f}: {e}")))?;
    }
    let kin = Kinematics::new(rig);
    let kernel = SkinningKernel::new(&rig.skin, rig.joint_count());
    Ok(poses
        .par_iter()
        .map(|p| {
            let t = kin.transforms(p);
            let mut out = vec![[0.0; 3]; shaped.len()];
            kernel.apply(shaped, &t.skinning, &mut out);
            PosedMesh { vertices: out }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rig_id: String,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub frames: usize,
    pub repeats: usize,
    pub ms_mean: f64,
    pub ms_p50: f64,
    pub ms_p95: f64,
    pub verts_per_sec: f64,
    /// Mean ms per frame of each repeat, after the discarded warm-up pass.
    pub repeat_ms: Vec<f64>,
}

/// Seeded random poses within moderate joint ranges.
pub fn random_poses(rig: &Rig, frames: usize, seed: u64) -> Vec<PoseState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let mut p = PoseState::zero(rig);
            p.root_rotation = [0.0, rng.random_range(-3.1..3.1), 0.0];
            p.root_translation = [rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)];
            for a in p.joint_angles.iter_mut().skip(1) {
                *a = [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                ];
            }
            p
        })
        .collect()
}

/// Times FK plus skinning per frame on the calling thread.
pub fn bench_skinning(rig: &Rig, frames: usize, repeats: usize) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::Precondition("frames must be at least 1".into()));
    }
    let repeats = repeats.max(1);
    let poses = random_poses(rig, frames, 0);
    let kin = Kinematics::new(rig);
    let kernel = SkinningKernel::new(&rig.skin, rig.joint_count());
    let shaped = &rig.template.vertices;
    let mut out = vec![[0.0; 3]; shaped.len()];
    let mut run = |samples: &mut Vec<f64>| {
        for p in &poses {
            let start = Instant::now();
            let t = kin.transforms(p);
            kernel.apply(shaped, &t.skinning, &mut out);
            std::hint::black_box(&out);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    };
    run(&mut Vec::new());
    let mut samples = Vec::with_capacity(frames * repeats);
    let mut repeat_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let before = samples.len();
        run(&mut samples);
        let chunk = &samples[before..];
        repeat_ms.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
    Ok(BenchReport {
        rig_id: rig.id.clone(),
        v: rig.vertex_count(),
        j: rig.joint_count(),
        frames,
        repeats,
        ms_mean: mean,
        ms_p50: pct(0.5),
        ms_p95: pct(0.95),
        verts_per_sec: rig.vertex_count() as f64 / (mean * 1e-3),
        repeat_ms,
    })
}
