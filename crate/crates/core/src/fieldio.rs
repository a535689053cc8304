//! `GWF1` field files and 8-bit graymap rendering.
//!
//! Layout: magic `GWF1`, one shape-kind byte (`1` = grid, `2` = flat), the
//! dims as little-endian `u32` (`h, w` or `d`), then row-major little-endian
//! `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{Field, Shape};

pub const MAGIC: &[u8; 4] = b"GWF1";
const KIND_GRID: u8 = 1;
const KIND_FLAT: u8 = 2;

pub fn encode_field(field: &Field) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.len());
    out.extend_from_slice(MAGIC);
    match field.shape() {
        Shape::Grid { h, w } => {
            out.push(KIND_GRID);
            out.extend_from_slice(&(h as u32).to_le_bytes());
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        Shape::Flat { d } => {
            out.push(KIND_FLAT);
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in field.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let bad = |m: &str| Error::Io(format!("malformed GWF1 data: {m}"));
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let read_u32 = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    let (shape, offset) = match bytes[4] {
        KIND_GRID => (Shape::grid(read_u32(5)?, read_u32(9)?)?, 13),
        KIND_FLAT => (Shape::flat(read_u32(5)?)?, 9),
        k => return Err(bad(&format!("unknown shape kind {k}"))),
    };
    let payload = &bytes[offset..];
    if payload.len() != 4 * shape.volume() {
        return Err(bad("payload length does not match shape"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Field::new(shape, values)
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_field(&bytes)
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    std::fs::write(path, encode_field(field)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Linear `[min, max] -> [0, 255]` mapping used when rendering.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrayRange {
    pub min: f64,
    pub max: f64,
}

/// Binary PGM (P5) rendering of a grid field.
pub fn render_pgm(field: &Field) -> Result<(Vec<u8>, GrayRange)> {
    let (h, w) = field.shape().dims2().ok_or(Error::FlatShape { op: "render_pgm" })?;
    let min = field.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(field.values().iter().map(|v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok((out, GrayRange { min, max }))
}
