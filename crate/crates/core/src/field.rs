//! Dense real-valued fields.
//!
//! A [`Field`] is either an `h x w` grid (row-major) or a flat vector of
//! `d` values. Every latent, noise prediction, mask and mean image in the
//! crate is a `Field`. Values are `f64` and always finite; operations that
//! combine fields reject mismatched shapes instead of broadcasting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Grid { h: usize, w: usize },
    Flat { d: usize },
}

impl Shape {
    pub fn grid(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("grid {h}x{w} has a zero dimension")));
        }
        Ok(Shape::Grid { h, w })
    }

    pub fn flat(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidShape("flat shape with d = 0".into()));
        }
        Ok(Shape::Flat { d })
    }

    pub fn volume(&self) -> usize {
        match *self {
            Shape::Grid { h, w } => h * w,
            Shape::Flat { d } => d,
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, Shape::Grid { .. })
    }

    /// `(h, w)` for grids.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match *self {
            Shape::Grid { h, w } => Some((h, w)),
            Shape::Flat { .. } => None,
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        match *self {
            Shape::Grid { h, w } => Shape::grid(h, w).map(|_| ()),
            Shape::Flat { d } => Shape::flat(d).map(|_| ()),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Grid { h, w } => write!(f, "grid({h}x{w})"),
            Shape::Flat { d } => write!(f, "flat({d})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: Shape,
    values: Vec<f64>,
}

impl Field {
    /// Builds a field, validating the value count and finiteness.
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        shape.check()?;
        if values.len() != shape.volume() {
            return Err(Error::InvalidShape(format!(
                "{shape} needs {} values, got {}",
                shape.volume(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Field::new"));
        }
        Ok(Field { shape, values })
    }

    /// Internal constructor for hot paths whose inputs are already validated.
    pub(crate) fn from_raw(shape: Shape, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.volume());
        Field { shape, values }
    }

    pub fn zeros(shape: Shape) -> Self {
        Field::from_raw(shape, vec![0.0; shape.volume()])
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Field::new(shape, vec![value; shape.volume()])
    }

    /// Grid field from a function of `(row, col)`.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let shape = Shape::grid(h, w)?;
        let values = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Field::new(shape, values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at `(row, col)` of a grid field.
    pub fn at(&self, row: usize, col: usize) -> Option<f64> {
        let (h, w) = self.shape.dims2()?;
        (row < h && col < w).then(|| self.values[row * w + col])
    }

    pub fn check_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: other.shape,
            });
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, a: f64) -> Result<Field> {
        finite(
            Field::from_raw(self.shape, self.values.iter().map(|v| a * v).collect()),
            "scale",
        )
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        axpy(1.0, other, self)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64, op: &'static str) -> Result<Field> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        finite(Field::from_raw(self.shape, values), op)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, op: &'static str) -> Result<Field> {
        finite(Field::from_raw(self.shape, self.values.iter().map(|&v| f(v)).collect()), op)
    }

    /// Elementwise mean of a nonempty set of same-shaped fields.
    pub fn mean_of(fields: &[Field]) -> Result<Field> {
        let first = fields
            .first()
            .ok_or_else(|| Error::param("mean of an empty field list"))?;
        let mut acc = vec![0.0; first.len()];
        for f in fields {
            first.check_same_shape(f)?;
            for (a, v) in acc.iter_mut().zip(&f.values) {
                *a += v;
            }
        }
        let n = fields.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(Field::from_raw(first.shape, acc))
    }
}

fn finite(f: Field, op: &'static str) -> Result<Field> {
    if f.values.iter().all(|v| v.is_finite()) {
        Ok(f)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `a * x + y`, elementwise.
pub fn axpy(a: f64, x: &Field, y: &Field) -> Result<Field> {
    y.check_same_shape(x)?;
    let values = x.values.iter().zip(&y.values).map(|(&xv, &yv)| a * xv + yv).collect();
    finite(Field::from_raw(y.shape, values), "axpy")
}
