//! Binary mesh payload returned by `POST /mesh`.
//!
//! All integers and floats are little-endian. The 32-byte header holds eight
//! `u32` words:
//!
//! | word | content |
//! |------|---------|
//! | 0 | magic `ARMM` |
//! | 1 | format version |
//! | 2 | vertex count `V` |
//! | 3 | face count `F` |
//! | 4 | joint count `J` |
//! | 5 | rig id length in bytes |
//! | 6 | request echo length in bytes |
//! | 7 | reserved, zero |
//!
//! The header is followed by `3V` f32 vertex coordinates, `3F` u32 face
//! indices, `3J` f32 joint positions, the UTF-8 rig id and the UTF-8 JSON
//! echo of the normalized request.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ARMM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshPayload {
    pub rig_id: String,
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub joints: Vec<[f32; 3]>,
    pub echo: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PayloadError {
    #[error("payload shorter than its header")]
    Truncated,
    #[error("bad magic")]
    Magic,
    #[error("unsupported payload version {0}")]
    Version(u32),
    #[error("payload length {actual} does not match header ({expected})")]
    Length { expected: usize, actual: usize },
    #[error("string section is not UTF-8")]
    Utf8,
}

impl MeshPayload {
    pub fn encode(&self) -> Vec<u8> {
        let words = [
            u32::from_le_bytes(MAGIC),
            VERSION,
            self.vertices.len() as u32,
            self.faces.len() as u32,
            self.joints.len() as u32,
            self.rig_id.len() as u32,
            self.echo.len() as u32,
            0,
        ];
        let mut out = Vec::with_capacity(self.encoded_len());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for x in self.vertices.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for i in self.faces.iter().flatten() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for x in self.joints.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(self.rig_id.as_bytes());
        out.extend_from_slice(self.echo.as_bytes());
        out
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 12 * (self.vertices.len() + self.faces.len() + self.joints.len()) + self.rig_id.len() + self.echo.len()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        if bytes.len() < HEADER_LEN {
            return Err(PayloadError::Truncated);
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        if bytes[..4] != MAGIC {
            return Err(PayloadError::Magic);
        }
        if word(1) != VERSION {
            return Err(PayloadError::Version(word(1)));
        }
        let (v, f, j, id_len, echo_len) = (
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
            word(6) as usize,
        );
        let expected = HEADER_LEN + 12 * (v + f + j) + id_len + echo_len;
        if bytes.len() != expected {
            return Err(PayloadError::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let mut at = HEADER_LEN;
        let mut triples = |n: usize| {
            let out: Vec<[[u8; 4]; 3]> = bytes[at..at + 12 * n]
                .chunks_exact(12)
                .map(|c| {
                    [
                        c[0..4].try_into().unwrap(),
                        c[4..8].try_into().unwrap(),
                        c[8..12].try_into().unwrap(),
                    ]
                })
                .collect();
            at += 12 * n;
            out
        };
        let vertices = triples(v).into_iter().map(|t| t.map(f32::from_le_bytes)).collect();
        let faces = triples(f).into_iter().map(|t| t.map(u32::from_le_bytes)).collect();
        let joints = triples(j).into_iter().map(|t| t.map(f32::from_le_bytes)).collect();
        let text = |s: &[u8]| String::from_utf8(s.to_vec()).map_err(|_| PayloadError::Utf8);
        let start = HEADER_LEN + 12 * (v + f + j);
        Ok(MeshPayload {
            rig_id: text(&bytes[start..start + id_len])?,
            vertices,
            faces,
            joints,
            echo: text(&bytes[start + id_len..])?,
        })
    }
}
