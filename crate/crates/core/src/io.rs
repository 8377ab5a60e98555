//! Wavefront OBJ export and import.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Writes `v` lines (shortest round-trip f32 text) and 1-based `f` lines.
pub fn write_obj<W: Write>(mut w: W, vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> std::io::Result<()> {
    let mut s = String::with_capacity(vertices.len() * 32 + faces.len() * 20);
    for v in vertices {
        s.push_str(&format!("v {} {} {}\n", v[0] as f32, v[1] as f32, v[2] as f32));
    }
    for f in faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    w.write_all(s.as_bytes())
}

pub fn obj_string(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> String {
    let mut buf = Vec::new();
    write_obj(&mut buf, vertices, faces).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Reads triangle OBJ files (`v` and `f` records; `f` entries may carry
/// `/vt/vn` suffixes, which are ignored).
pub fn read_obj<R: BufRead>(r: R) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::parse("obj", e.to_string()))?;
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::parse("obj", format!("line {}: {what}", n + 1));
        match it.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for x in &mut p {
                    *x = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad vertex"))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| t.split('/').next().and_then(|i| i.parse::<u32>().ok()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad("bad face"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("faces must be 1-based triangles"));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}
