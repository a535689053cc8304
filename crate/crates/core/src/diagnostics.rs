//! Distribution distances, mean-field errors, norm-map series and layout metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dct::{dct2, Band};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::guidance::{guidance_norm_map, GuidanceTerm};
use crate::noise::{uniform_stream, NoiseKey, Stream};
use crate::oracle::{ConditionId, ConditionModel};
use crate::sampler::Trajectory;

fn check_sets(a: &[Field], b: &[Field]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("sample sets must be nonempty"));
    }
    let first = &a[0];
    for f in a.iter().chain(b) {
        first.check_same_shape(f)?;
    }
    Ok(())
}

fn dist(a: &Field, b: &Field) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_cross(a: &[Field], b: &[Field]) -> f64 {
    let total: f64 = a.par_iter().map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>()).sum();
    total / (a.len() * b.len()) as f64
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` with all pairs (including self-pairs)
/// in each expectation, so identical sets give exactly zero up to rounding.
pub fn energy_distance(a: &[Field], b: &[Field]) -> Result<f64> {
    check_sets(a, b)?;
    let e = 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
    Ok(e.max(0.0))
}

/// Pairwise distances of a pooled sample, upper triangle row by row.
struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    fn new(pool: &[&Field]) -> Self {
        let n = pool.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| dist(pool[i], pool[j])).collect())
            .collect();
        Condensed {
            n,
            d: rows.concat(),
        }
    }

    /// Energy statistic for the split given by `in_a` (exactly `n_a` true).
    fn statistic(&self, in_a: &[bool], n_a: usize) -> f64 {
        let (mut s_aa, mut s_bb, mut s_all) = (0.0, 0.0, 0.0);
        let mut k = 0;
        for i in 0..self.n {
            let (mut row_a, mut row_b) = (0.0, 0.0);
            for &j_in_a in &in_a[i + 1..] {
                let d = self.d[k];
                k += 1;
                if j_in_a {
                    row_a += d;
                } else {
                    row_b += d;
                }
            }
            s_all += row_a + row_b;
            if in_a[i] {
                s_aa += row_a;
            } else {
                s_bb += row_b;
            }
        }
        let n_b = self.n - n_a;
        let s_ab = s_all - s_aa - s_bb;
        let (na, nb) = (n_a as f64, n_b as f64);
        2.0 * s_ab / (na * nb) - 2.0 * s_aa / (na * na) - 2.0 * s_bb / (nb * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Two-sample permutation test on the energy distance.
/// `p = (1 + #{permuted >= observed}) / (1 + permutations)`.
pub fn energy_permutation_test(a: &[Field], b: &[Field], permutations: usize, seed: u64) -> Result<PermutationTest> {
    check_sets(a, b)?;
    if permutations == 0 {
        return Err(Error::param("at least one permutation is required"));
    }
    let pool: Vec<&Field> = a.iter().chain(b).collect();
    let dm = Condensed::new(&pool);
    let labels: Vec<bool> = (0..pool.len()).map(|i| i < a.len()).collect();
    let observed = dm.statistic(&labels, a.len());
    let exceed = (0..permutations)
        .into_par_iter()
        .filter(|&p| {
            let mut shuffled = labels.clone();
            let mut rng = uniform_stream(NoiseKey::new(seed, p as u64, Stream::Diagnostics, u64::MAX - 1));
            shuffled.shuffle(&mut rng);
            dm.statistic(&shuffled, a.len()) >= observed
        })
        .count();
    Ok(PermutationTest {
        statistic: observed.max(0.0),
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

/// `max |mean(samples) - target|` over locations.
pub fn mean_field_error(samples: &[Field], target: &Field) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("no samples"));
    }
    let mean = Field::mean_of(samples)?;
    Ok(mean.sub(target)?.max_abs())
}

/// Norm maps of the composed prediction, one per recorded step, in time order.
pub fn norm_map_series(trajectory: &Trajectory) -> Result<Vec<(f64, Field)>> {
    series(trajectory, |s| &s.epsilon)
}

/// Norm maps of the applied guidance `epsilon - f_null`.
pub fn guidance_norm_series(trajectory: &Trajectory) -> Result<Vec<(f64, Field)>> {
    series(trajectory, |s| &s.guidance)
}

fn series(
    trajectory: &Trajectory,
    pick: impl Fn(&crate::sampler::TrajectoryStep) -> &Field,
) -> Result<Vec<(f64, Field)>> {
    if trajectory.steps.is_empty() {
        return Err(Error::param("trajectory is empty"));
    }
    trajectory
        .steps
        .iter()
        .map(|s| Ok((s.t, guidance_norm_map(pick(s))?)))
        .collect()
}

/// Relative low-band error of `styled` against `base`.
pub fn layout_preservation(base: &Field, styled: &Field, cutoff: usize) -> Result<f64> {
    base.check_same_shape(styled)?;
    let (h, w) = base.shape().dims2().ok_or(Error::FlatShape { op: "layout_preservation" })?;
    if cutoff >= h.min(w) {
        return Err(Error::param(format!("cutoff {cutoff} must be below {}", h.min(w))));
    }
    let (ca, cb) = (dct2(base)?, dct2(styled)?);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if Band::Low.contains(i, j, cutoff) {
                let k = i * w + j;
                let (a, b) = (ca.values()[k], cb.values()[k]);
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
    }
    if num == 0.0 {
        return Ok(0.0);
    }
    if den == 0.0 {
        return Err(Error::param("base field has no low-band energy"));
    }
    Ok((num / den).sqrt())
}

/// Closed-form target `mu_null + sum_i s_i(t, u, v) (mu_i - mu_null)` of
/// guidance over single-Gaussian conditions sharing one variance. It is the
/// sampling target when every GSF is constant in time.
pub fn effective_mean(model: &ConditionModel, terms: &[GuidanceTerm], t: f64) -> Result<Field> {
    let null = ConditionId::null();
    let gaussian = |c: &ConditionId| -> Result<(Field, f64)> {
        model
            .single_gaussian(c)?
            .map(|(m, v)| (m.clone(), v))
            .ok_or_else(|| Error::MixtureCondition(c.to_string()))
    };
    let (mu_null, var) = gaussian(&null)?;
    let mut out = mu_null.values().to_vec();
    for term in terms {
        let (mu, v) = gaussian(&term.condition)?;
        if v != var {
            return Err(Error::param(format!(
                "condition `{}` has variance {v}, the null condition {var}",
                term.condition
            )));
        }
        let temporal = term.gsf.temporal.value(t);
        let mask = term.gsf.mask.to_field(mu.shape())?;
        for ((o, (m, n)), w) in out.iter_mut().zip(mu.values().iter().zip(mu_null.values())).zip(mask.values()) {
            *o += temporal * w * (m - n);
        }
    }
    Field::new(mu_null.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Error-type metric: passes when `value <= tolerance`.
    AtMost,
    /// Passes when `value >= tolerance`.
    AtLeast,
    /// Passes when `value > tolerance`.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub pass: bool,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64, comparison: Comparison) -> Self {
        let pass = match comparison {
            Comparison::AtMost => value <= tolerance,
            Comparison::AtLeast => value >= tolerance,
            Comparison::Above => value > tolerance,
        };
        MetricReport {
            name: name.into(),
            value,
            tolerance,
            comparison,
            pass,
            metadata: BTreeMap::new(),
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        MetricReport::new(name, value, tolerance, Comparison::AtMost)
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        MetricReport::new(name, value, threshold, Comparison::AtLeast)
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        MetricReport::new(name, value, threshold, Comparison::Above)
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.metadata
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }
}

/// Pretty JSON array with stable key order.
pub fn reports_to_json(reports: &[MetricReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}
