//! Orthonormal 2-D DCT-II and frequency-band energies.
//!
//! With orthonormal scaling the transform is an isometry, so the energies of
//! the low band (`max(i, j) < cutoff`) and the high band partition the
//! field's total energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Low,
    High,
}

impl Band {
    pub fn contains(self, i: usize, j: usize, cutoff: usize) -> bool {
        let low = i.max(j) < cutoff;
        match self {
            Band::Low => low,
            Band::High => !low,
        }
    }
}

/// `n x n` orthonormal DCT-II matrix, `m[k][x]`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for x in 0..n {
            m[k * n + x] = scale * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

fn grid_dims(f: &Field, op: &'static str) -> Result<(usize, usize)> {
    f.shape().dims2().ok_or(Error::FlatShape { op })
}

/// 2-D DCT-II coefficients of a grid field, row-major `(i, j)` with `i`
/// indexing vertical frequency.
pub fn dct2(f: &Field) -> Result<Field> {
    let (h, w) = grid_dims(f, "dct2")?;
    let (ch, cw) = (dct_matrix(h), dct_matrix(w));
    let v = f.values();
    // rows first: tmp[r][j] = sum_c v[r][c] * cw[j][c]
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for j in 0..w {
            tmp[r * w + j] = (0..w).map(|c| v[r * w + c] * cw[j * w + c]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (0..h).map(|r| ch[i * h + r] * tmp[r * w + j]).sum();
        }
    }
    Ok(Field::from_raw(f.shape(), out))
}

/// Inverse of [`dct2`].
pub fn idct2(coeffs: &Field) -> Result<Field> {
    let (h, w) = grid_dims(coeffs, "idct2")?;
    let (ch, cw) = (dct_matrix(h), dct_matrix(w));
    let v = coeffs.values();
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for c in 0..w {
            tmp[i * w + c] = (0..w).map(|j| v[i * w + j] * cw[j * w + c]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = (0..h).map(|i| ch[i * h + r] * tmp[i * w + c]).sum();
        }
    }
    Ok(Field::from_raw(coeffs.shape(), out))
}

fn check_cutoff(shape: Shape, cutoff: usize) -> Result<()> {
    let (h, w) = shape.dims2().ok_or(Error::FlatShape { op: "band_energy" })?;
    if cutoff >= h.min(w) {
        return Err(Error::param(format!(
            "band cutoff {cutoff} must be below min(h, w) = {}",
            h.min(w)
        )));
    }
    Ok(())
}

/// Energy of the DCT coefficients inside `band`.
pub fn band_energy(f: &Field, band: Band, cutoff: usize) -> Result<f64> {
    check_cutoff(f.shape(), cutoff)?;
    let coeffs = dct2(f)?;
    Ok(coefficient_energy(&coeffs, band, cutoff))
}

pub(crate) fn coefficient_energy(coeffs: &Field, band: Band, cutoff: usize) -> f64 {
    let (_, w) = coeffs.shape().dims2().expect("grid");
    coeffs
        .values()
        .iter()
        .enumerate()
        .filter(|(idx, _)| band.contains(idx / w, idx % w, cutoff))
        .map(|(_, c)| c * c)
        .sum()
}

/// Fraction of total energy in the low band; 0 for an all-zero field.
pub fn low_band_share(f: &Field, cutoff: usize) -> Result<f64> {
    check_cutoff(f.shape(), cutoff)?;
    let coeffs = dct2(f)?;
    let low = coefficient_energy(&coeffs, Band::Low, cutoff);
    let high = coefficient_energy(&coeffs, Band::High, cutoff);
    let total = low + high;
    Ok(if total > 0.0 { low / total } else { 0.0 })
}

/// Zeroes every DCT coefficient outside `keep`.
pub fn band_pass(f: &Field, keep: Band, cutoff: usize) -> Result<Field> {
    check_cutoff(f.shape(), cutoff)?;
    let coeffs = dct2(f)?;
    let (_, w) = f.shape().dims2().expect("grid");
    let filtered: Vec<f64> = coeffs
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &c)| if keep.contains(idx / w, idx % w, cutoff) { c } else { 0.0 })
        .collect();
    idct2(&Field::from_raw(f.shape(), filtered))
}
