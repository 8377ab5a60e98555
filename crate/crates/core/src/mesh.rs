//! Triangle-mesh topology and geometry helpers.

use std::collections::{BTreeMap, HashMap};

/// Unique undirected edges `(a, b)` with `a < b`, sorted.
pub fn edges(faces: &[[u32; 3]]) -> Vec<[u32; 2]> {
    let mut e: Vec<[u32; 2]> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| if a < b { [a, b] } else { [b, a] })
        .collect();
    e.sort_unstable();
    e.dedup();
    e
}

/// First defect found when checking that every directed half-edge occurs at
/// most once (consistent orientation) and every edge borders at most two
/// faces. Returns the offending face index and a description.
pub fn manifold_defect(faces: &[[u32; 3]]) -> Option<(usize, String)> {
    let mut half: HashMap<(u32, u32), usize> = HashMap::with_capacity(faces.len() * 3);
    for (f, tri) in faces.iter().enumerate() {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            if let Some(prev) = half.insert((a, b), f) {
                return Some((f, format!("half-edge {a}->{b} shared with face {prev} (non-manifold or flipped)")));
            }
        }
    }
    None
}

/// Boundary loops, each ordered in the direction a face filling the hole
/// would traverse it (opposite to the existing half-edges).
pub fn boundary_loops(faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut present = std::collections::HashSet::with_capacity(faces.len() * 3);
    for tri in faces {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            present.insert((a, b));
        }
    }
    // fill direction of boundary half-edge a->b is b->a
    let mut next: BTreeMap<u32, u32> = BTreeMap::new();
    for tri in faces {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            if !present.contains(&(b, a)) {
                next.insert(b, a);
            }
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = next.iter().next() {
        let mut lp = vec![start];
        let mut cur = next.remove(&start).unwrap();
        while cur != start {
            lp.push(cur);
            match next.remove(&cur) {
                Some(n) => cur = n,
                None => break,
            }
        }
        loops.push(lp);
    }
    loops
}

/// Sorted, de-duplicated vertex adjacency lists.
pub fn vertex_neighbors(vertex_count: usize, faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); vertex_count];
    for [a, b] in edges(faces) {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    adj
}

/// Signed enclosed volume; positive for outward-facing closed meshes.
pub fn signed_volume(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> f64 {
    faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| vertices[i as usize]);
            a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
        })
        .sum::<f64>()
        / 6.0
}

/// Area-weighted unit vertex normals.
pub fn vertex_normals(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> Vec<[f64; 3]> {
    let mut n = vec![[0.0; 3]; vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|i| vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        for &i in f {
            for k in 0..3 {
                n[i as usize][k] += cr[k];
            }
        }
    }
    for v in &mut n {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 0.0 {
            v.iter_mut().for_each(|c| *c /= len);
        }
    }
    n
}

/// Cotangents are clamped to this magnitude near degenerate triangles.
pub const COTAN_CLAMP: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct CotanWeights {
    /// Undirected edges, `a < b`, sorted.
    pub edges: Vec<[u32; 2]>,
    /// `(cot alpha + cot beta) / 2` per edge.
    pub weights: Vec<f64>,
    /// Number of cotangents that hit the clamp.
    pub clamped: usize,
}

/// Cotangent edge weights. The Dirichlet energy of a per-vertex field `f` is
/// `sum_e w_e |f_a - f_b|^2`.
pub fn cotangent_weights(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> CotanWeights {
    let mut acc: BTreeMap<[u32; 2], f64> = BTreeMap::new();
    let mut clamped = 0;
    for f in faces {
        for k in 0..3 {
            let (i, j, o) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            let p = vertices[o as usize];
            let u = sub(vertices[i as usize], p);
            let v = sub(vertices[j as usize], p);
            let c = cross(u, v);
            let s = norm(c);
            let d = dot(u, v);
            let mut cot = if s > 0.0 { d / s } else { f64::INFINITY.copysign(d) };
            if !cot.is_finite() || cot.abs() > COTAN_CLAMP {
                cot = if cot.is_nan() { 0.0 } else { cot.clamp(-COTAN_CLAMP, COTAN_CLAMP) };
                clamped += 1;
            }
            let key = if i < j { [i, j] } else { [j, i] };
            *acc.entry(key).or_insert(0.0) += 0.5 * cot;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} cotangent weights clamped on degenerate triangles");
    }
    let (edges, weights) = acc.into_iter().unzip();
    CotanWeights { edges, weights, clamped }
}

/// One level of midpoint subdivision (each triangle split into four).
/// Returns new vertices, faces, and for each new vertex the pair of original
/// vertices it interpolates (`[i, i]` for original vertices, which keep their
/// indices).
pub fn midpoint_subdivide(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> (Vec<[f64; 3]>, Vec<[u32; 3]>, Vec<[u32; 2]>) {
    let mut out_v = vertices.to_vec();
    let mut parents: Vec<[u32; 2]> = (0..vertices.len() as u32).map(|i| [i, i]).collect();
    let mut mid: HashMap<[u32; 2], u32> = HashMap::new();
    let mut midpoint = |a: u32, b: u32, out_v: &mut Vec<[f64; 3]>, parents: &mut Vec<[u32; 2]>| {
        let key = if a < b { [a, b] } else { [b, a] };
        *mid.entry(key).or_insert_with(|| {
            let (p, q) = (vertices[a as usize], vertices[b as usize]);
            out_v.push([(p[0] + q[0]) * 0.5, (p[1] + q[1]) * 0.5, (p[2] + q[2]) * 0.5]);
            parents.push(key);
            (out_v.len() - 1) as u32
        })
    };
    let mut out_f = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, &mut out_v, &mut parents);
        let bc = midpoint(b, c, &mut out_v, &mut parents);
        let ca = midpoint(c, a, &mut out_v, &mut parents);
        out_f.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
    }
    (out_v, out_f, parents)
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm(sub(a, b))
}
