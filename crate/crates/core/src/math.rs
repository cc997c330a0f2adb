//! Vector primitives shared by every stage of the pipeline: feature vectors,
//! the softmax temperature, probability vectors, cosine similarity and a
//! max-shifted softmax.
//!
//! All arithmetic is `f64`. File formats may carry `f32`; those values are
//! promoted on load.

use serde::{Deserialize, Serialize};

use crate::error::{AdkError, Result};

/// Norms at or below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Tolerance on `|‖x‖ - 1|` for a vector to count as unit-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A point in the shared image/text embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AdkError::EmptyInput("feature vector must have dim >= 1"));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(AdkError::Data(format!(
                "non-finite coordinate {} at index {i}",
                values[i]
            )));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    /// True when the vector is too short for cosine similarity to be defined.
    pub fn is_degenerate(&self) -> bool {
        self.norm() <= DEGENERATE_NORM
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = AdkError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        FeatureVector::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// Softmax temperature. Similarities are divided by `tau` before
/// exponentiation, so the CLIP logit scale of 100 corresponds to `tau = 0.01`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const CLIP_DEFAULT: Temperature = Temperature(0.01);

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(AdkError::Domain(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        Ok(Temperature(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::CLIP_DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = AdkError;

    fn try_from(tau: f64) -> Result<Self> {
        Temperature::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> Self {
        t.0
    }
}

/// A categorical distribution produced by [`softmax`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        ProbabilityVector(probs)
    }
}

/// Index of the largest entry of a non-empty slice, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Element-wise Neumaier accumulation of whole rows. Each coordinate sees
/// its terms in the same order as [`compensated_sum`] would, so results match
/// it bit for bit while the rows are read contiguously.
pub(crate) struct RowAccumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl RowAccumulator {
    pub(crate) fn new(dim: usize) -> Self {
        RowAccumulator { sum: vec![0.0; dim], comp: vec![0.0; dim] }
    }

    pub(crate) fn add_scaled(&mut self, w: f64, row: &[f64]) {
        for ((s, c), &r) in self.sum.iter_mut().zip(&mut self.comp).zip(row) {
            let x = w * r;
            let t = *s + x;
            *c += if s.abs() >= x.abs() { (*s - t) + x } else { (x - t) + *s };
            *s = t;
        }
    }

    pub(crate) fn add(&mut self, row: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(&mut self.comp).zip(row) {
            let t = *s + x;
            *c += if s.abs() >= x.abs() { (*s - t) + x } else { (x - t) + *s };
            *s = t;
        }
    }

    pub(crate) fn finish(self, divisor: f64) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| (s + c) / divisor).collect()
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(AdkError::Dimension { expected, found });
    }
    Ok(())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_with_norm(a, norm(a), b)
}

/// [`cosine_slices`] with `norm(a)` supplied by the caller, for one vector
/// compared against many.
pub(crate) fn cosine_with_norm(a: &[f64], na: f64, b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let nb = norm(b);
    if na <= DEGENERATE_NORM || nb <= DEGENERATE_NORM {
        return Err(AdkError::DegenerateVector(format!(
            "cosine similarity undefined for norms {na:e} and {nb:e}"
        )));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `exp(s_k / tau) / sum_j exp(s_j / tau)`, evaluated with the maximum score
/// subtracted first so large scores cannot overflow.
pub fn softmax(scores: &[f64], tau: Temperature) -> Result<ProbabilityVector> {
    if scores.is_empty() {
        return Err(AdkError::EmptyInput("softmax over zero scores"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(AdkError::Data(format!("non-finite score {s}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t = tau.get();
    let mut exps: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= total;
    }
    Ok(ProbabilityVector(exps))
}

/// Rescale to unit L2 norm.
pub fn normalize(a: &FeatureVector) -> Result<FeatureVector> {
    let n = a.norm();
    if n <= DEGENERATE_NORM {
        return Err(AdkError::DegenerateVector(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(FeatureVector(a.0.iter().map(|x| x / n).collect()))
}
