//! Built-in condition models used by tests, examples and the CLI.
//!
//! * `two_styles_2d`: flat(2); every condition is a unit-variance Gaussian.
//!   `style_A` and `style_B` have opposed means.
//! * `pattern_16x16`: 16x16 grid, unit variance; the null condition is flat
//!   gray, `base` a horizontal gradient, `style` a +/-1 checkerboard with
//!   its low DCT band (cutoff 8) removed, so the style mean is pure texture.
//! * `bands_32x32`: 32x32 grid built from DCT basis patterns with cutoff
//!   [`BANDS_CUTOFF`]. The null condition is a mixture of four low-frequency
//!   layouts. `base` adds a smooth subject and a +/- fine texture to each
//!   layout, so its mean differs from the null mean only in the low band.
//!   `style` adds a high-frequency texture to the same layouts with a
//!   preference for the horizontal ones; its mean is purely high band.
//!   `style_A` / `style_B` carry two orthogonal textures with opposite signs.

use std::collections::BTreeMap;

use crate::dct::{band_pass, Band};
use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::oracle::{ConditionId, ConditionModel, GaussianComponent};

pub const BUILTIN_NAMES: [&str; 3] = ["two_styles_2d", "pattern_16x16", "bands_32x32"];

/// DCT cutoff separating layout from texture in `bands_32x32`.
pub const BANDS_CUTOFF: usize = 8;

/// Per-component variance of `bands_32x32`.
pub const BANDS_VARIANCE: f64 = 0.04;

/// Fraction of the endpoint style energy that guidance interpolation must
/// keep at lambda = 0.5 on `bands_32x32`. Calibrated against the fixture:
/// the interpolated texture settles on one texture from each style at half
/// magnitude, which keeps about half of the endpoint energy.
pub const STYLE_RETENTION_THRESHOLD: f64 = 0.25;

pub fn builtin_model(name: &str) -> Result<ConditionModel> {
    match name {
        "two_styles_2d" => two_styles_2d(),
        "pattern_16x16" => pattern_16x16(),
        "bands_32x32" => bands_32x32(),
        other => Err(Error::UnknownName {
            kind: "builtin model",
            name: other.to_string(),
        }),
    }
}

fn single(mean: Field, variance: f64) -> Vec<GaussianComponent> {
    vec![GaussianComponent::new(mean, variance, 1.0)]
}

fn two_styles_2d() -> Result<ConditionModel> {
    let shape = Shape::flat(2)?;
    let point = |x: f64, y: f64| Field::new(shape, vec![x, y]);
    let mut c = BTreeMap::new();
    c.insert(ConditionId::null(), single(point(0.0, 0.0)?, 1.0));
    c.insert("base".into(), single(point(1.5, 0.0)?, 1.0));
    c.insert("style_A".into(), single(point(0.5, 1.0)?, 1.0));
    c.insert("style_B".into(), single(point(-0.5, -1.0)?, 1.0));
    ConditionModel::new(shape, c)
}

fn pattern_16x16() -> Result<ConditionModel> {
    let n = 16;
    let mut c = BTreeMap::new();
    c.insert(ConditionId::null(), single(Field::from_fn(n, n, |_, _| 0.5)?, 1.0));
    c.insert(
        "base".into(),
        single(Field::from_fn(n, n, |_, col| col as f64 / (n - 1) as f64)?, 1.0),
    );
    let checker = Field::from_fn(n, n, |r, col| if (r + col) % 2 == 0 { 1.0 } else { -1.0 })?;
    c.insert("style".into(), single(band_pass(&checker, Band::High, 8)?, 1.0));
    ConditionModel::new(Shape::grid(n, n)?, c)
}

/// `amp * cos(pi (2r+1) i / 2n) * cos(pi (2c+1) j / 2n)`: a single DCT-II basis pattern.
pub fn dct_basis(n: usize, i: usize, j: usize, amp: f64) -> Result<Field> {
    let k = std::f64::consts::PI / (2 * n) as f64;
    Field::from_fn(n, n, |r, c| {
        amp * (k * ((2 * r + 1) * i) as f64).cos() * (k * ((2 * c + 1) * j) as f64).cos()
    })
}

/// Named patterns of `bands_32x32`.
pub struct BandsPatterns {
    pub layouts: [Field; 4],
    pub subject: Field,
    pub fine: Field,
    pub style_texture: Field,
    pub texture_1: Field,
    pub texture_2: Field,
}

pub fn bands_patterns() -> Result<BandsPatterns> {
    let n = 32;
    let la = dct_basis(n, 0, 1, 0.8)?;
    let lb = dct_basis(n, 1, 0, 0.8)?;
    let layouts = [la.clone(), la.scale(-1.0)?, lb.clone(), lb.scale(-1.0)?];
    let subject = dct_basis(n, 2, 2, 0.3)?.map(|v| v + 1.0, "subject")?;
    Ok(BandsPatterns {
        layouts,
        subject,
        fine: dct_basis(n, 12, 12, 0.4)?,
        style_texture: dct_basis(n, 3, 20, 0.5)?,
        texture_1: dct_basis(n, 10, 14, 0.5)?,
        texture_2: dct_basis(n, 14, 10, 0.5)?,
    })
}

fn bands_32x32() -> Result<ConditionModel> {
    let p = bands_patterns()?;
    let var = BANDS_VARIANCE;
    let comp = |mean: Field, w: f64| GaussianComponent::new(mean, var, w);
    let mut c = BTreeMap::new();

    c.insert(
        ConditionId::null(),
        p.layouts.iter().map(|l| comp(l.clone(), 1.0)).collect(),
    );

    let mut base = Vec::new();
    for l in &p.layouts {
        let coarse = l.add(&p.subject)?;
        base.push(comp(coarse.add(&p.fine)?, 1.0));
        base.push(comp(coarse.sub(&p.fine)?, 1.0));
    }
    c.insert("base".into(), base);

    let style_weights = [0.45, 0.45, 0.05, 0.05];
    let style = p
        .layouts
        .iter()
        .zip(style_weights)
        .map(|(l, w)| Ok(comp(l.add(&p.style_texture)?, w)))
        .collect::<Result<Vec<_>>>()?;
    c.insert("style".into(), style);

    for (name, sign) in [("style_A", 1.0), ("style_B", -1.0)] {
        let mut comps = Vec::new();
        for l in &p.layouts {
            for t in [&p.texture_1, &p.texture_2] {
                comps.push(comp(crate::field::axpy(sign, t, l)?, 1.0));
            }
        }
        c.insert(name.into(), comps);
    }
    ConditionModel::new(Shape::grid(32, 32)?, c)
}
