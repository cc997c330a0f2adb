//! Class knowledge derived from per-class description embeddings.
//!
//! A [`DescriptorBank`] holds `M` unit-normalized description features for
//! each of `N` classes. Two aggregates are built from it:
//!
//! * compositional knowledge: the plain mean of a class's descriptors,
//!   shared by every image;
//! * instance knowledge: a convex combination of a class's descriptors whose
//!   weights are a temperature softmax over their cosine similarity to the
//!   image.
//!
//! Neither aggregate is re-normalized; the classification heads use cosine
//! similarity, which ignores scale.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AdkError, Result};
use crate::math::{
    check_dim, cosine_with_norm, norm, normalize, RowAccumulator, softmax, FeatureVector, Temperature,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorBank {
    class_names: Vec<String>,
    descriptions: Vec<Vec<String>>,
    // row-major [class][descriptor]
    features: Vec<FeatureVector>,
    per_class: usize,
    dim: usize,
    tau: Temperature,
}

impl DescriptorBank {
    /// Builds a bank from features that are already unit-normalized.
    pub fn new(
        class_names: Vec<String>,
        descriptions: Vec<Vec<String>>,
        features: Vec<Vec<FeatureVector>>,
        tau: Temperature,
    ) -> Result<Self> {
        let n = class_names.len();
        if n == 0 {
            return Err(AdkError::Schema("descriptor bank has no classes".into()));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(AdkError::Schema(format!("duplicate class name {name:?}")));
            }
        }
        if descriptions.len() != n || features.len() != n {
            return Err(AdkError::Schema(format!(
                "{n} classes but {} description lists and {} feature lists",
                descriptions.len(),
                features.len()
            )));
        }
        let per_class = features[0].len();
        if per_class == 0 {
            return Err(AdkError::Schema(format!(
                "class {:?} has no descriptors",
                class_names[0]
            )));
        }
        let ragged: Vec<&str> = class_names
            .iter()
            .zip(&features)
            .filter(|(_, f)| f.len() != per_class)
            .map(|(c, _)| c.as_str())
            .collect();
        if !ragged.is_empty() {
            return Err(AdkError::Schema(format!(
                "ragged descriptor counts (expected {per_class}) for classes: {}",
                ragged.join(", ")
            )));
        }
        for (c, (texts, feats)) in class_names.iter().zip(descriptions.iter().zip(&features)) {
            if texts.len() != feats.len() {
                return Err(AdkError::Schema(format!(
                    "class {c:?}: {} description texts for {} features",
                    texts.len(),
                    feats.len()
                )));
            }
        }
        let dim = features[0][0].dim();
        for (c, feats) in class_names.iter().zip(&features) {
            for (m, f) in feats.iter().enumerate() {
                check_dim(dim, f.dim())?;
                if !f.is_unit() {
                    return Err(AdkError::Schema(format!(
                        "descriptor {m} of class {c:?} is not unit-normalized (norm {})",
                        f.norm()
                    )));
                }
            }
        }
        Ok(DescriptorBank {
            class_names,
            descriptions,
            features: features.into_iter().flatten().collect(),
            per_class,
            dim,
            tau,
        })
    }

    /// Like [`DescriptorBank::new`] but normalizes every feature first.
    pub fn from_raw(
        class_names: Vec<String>,
        descriptions: Vec<Vec<String>>,
        features: Vec<Vec<FeatureVector>>,
        tau: Temperature,
    ) -> Result<Self> {
        let features = features
            .iter()
            .map(|row| row.iter().map(normalize).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(class_names, descriptions, features, tau)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn descriptors_per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> Temperature {
        self.tau
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn descriptions(&self, class: usize) -> &[String] {
        &self.descriptions[class]
    }

    pub fn class_descriptors(&self, class: usize) -> &[FeatureVector] {
        &self.features[class * self.per_class..(class + 1) * self.per_class]
    }

    pub fn with_tau(mut self, tau: Temperature) -> Self {
        self.tau = tau;
        self
    }

    pub(crate) fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(AdkError::Index {
                index: class,
                len: self.num_classes(),
            });
        }
        Ok(())
    }

    /// SHA-256 over class names, description texts and the exact bits of
    /// every feature. The temperature is not part of the digest.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes() as u64).to_le_bytes());
        h.update((self.per_class as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for (c, name) in self.class_names.iter().enumerate() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for (text, feat) in self.descriptions[c].iter().zip(self.class_descriptors(c)) {
                h.update((text.len() as u64).to_le_bytes());
                h.update(text.as_bytes());
                for x in feat.as_slice() {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// A bank over the given classes, in the given order.
    pub fn restrict(&self, classes: &[usize]) -> Result<DescriptorBank> {
        let mut names = Vec::with_capacity(classes.len());
        let mut texts = Vec::with_capacity(classes.len());
        let mut feats = Vec::with_capacity(classes.len());
        for &c in classes {
            self.check_class(c)?;
            names.push(self.class_names[c].clone());
            texts.push(self.descriptions[c].clone());
            feats.push(self.class_descriptors(c).to_vec());
        }
        DescriptorBank::new(names, texts, feats, self.tau)
    }
}

/// Per-class handcrafted and compositional vectors ready for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBank {
    pub class_names: Vec<String>,
    pub hand: Vec<FeatureVector>,
    pub comp: Vec<FeatureVector>,
    pub descriptors_per_class: usize,
    pub source_bank_checksum: String,
}

impl KnowledgeBank {
    /// Pairs handcrafted prompt features (same class order as `bank`) with the
    /// compositional mean of `bank`.
    pub fn build(
        hand_names: &[String],
        hand: Vec<FeatureVector>,
        bank: &DescriptorBank,
    ) -> Result<Self> {
        if hand_names != bank.class_names() {
            return Err(AdkError::Schema(format!(
                "handcrafted classes {:?} do not match descriptor classes {:?}",
                hand_names,
                bank.class_names()
            )));
        }
        if hand.len() != hand_names.len() {
            return Err(AdkError::Schema(format!(
                "{} class names but {} handcrafted features",
                hand_names.len(),
                hand.len()
            )));
        }
        for h in &hand {
            check_dim(bank.dim(), h.dim())?;
        }
        Ok(KnowledgeBank {
            class_names: hand_names.to_vec(),
            hand,
            comp: build_compositional(bank),
            descriptors_per_class: bank.descriptors_per_class(),
            source_bank_checksum: bank.checksum(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.hand.first().map_or(0, FeatureVector::dim)
    }

    /// Structural checks for a bank read from disk.
    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        if n == 0 {
            return Err(AdkError::Schema("knowledge bank has no classes".into()));
        }
        if self.hand.len() != n || self.comp.len() != n {
            return Err(AdkError::Schema(format!(
                "{n} classes but {} hand and {} comp vectors",
                self.hand.len(),
                self.comp.len()
            )));
        }
        let d = self.dim();
        for v in self.hand.iter().chain(&self.comp) {
            check_dim(d, v.dim())?;
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return Err(AdkError::Schema(format!("duplicate class name {name:?}")));
            }
        }
        Ok(())
    }

    /// Checks that this bank can be paired with `bank` at inference.
    pub fn check_compatible(&self, bank: &DescriptorBank) -> Result<()> {
        if self.class_names != bank.class_names() {
            return Err(AdkError::Schema(
                "knowledge bank and descriptor bank disagree on classes or their order".into(),
            ));
        }
        if self.dim() != bank.dim() {
            return Err(AdkError::Schema(format!(
                "knowledge bank dim {} vs descriptor bank dim {}",
                self.dim(),
                bank.dim()
            )));
        }
        Ok(())
    }

    pub fn restrict(&self, classes: &[usize]) -> Result<KnowledgeBank> {
        let n = self.num_classes();
        let mut out = KnowledgeBank {
            class_names: Vec::with_capacity(classes.len()),
            hand: Vec::with_capacity(classes.len()),
            comp: Vec::with_capacity(classes.len()),
            descriptors_per_class: self.descriptors_per_class,
            source_bank_checksum: self.source_bank_checksum.clone(),
        };
        for &c in classes {
            if c >= n {
                return Err(AdkError::Index { index: c, len: n });
            }
            out.class_names.push(self.class_names[c].clone());
            out.hand.push(self.hand[c].clone());
            out.comp.push(self.comp[c].clone());
        }
        Ok(out)
    }
}

/// Attention weights of one image over every class's descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// `weights[n][m]`; each row sums to 1.
    pub weights: Vec<Vec<f64>>,
}

/// Mean of each class's descriptors, with compensated summation so the result
/// does not depend on descriptor order.
pub fn build_compositional(bank: &DescriptorBank) -> Vec<FeatureVector> {
    (0..bank.num_classes())
        .map(|c| mean_of(bank.class_descriptors(c)))
        .collect()
}

fn mean_of(rows: &[FeatureVector]) -> FeatureVector {
    let mut acc = RowAccumulator::new(rows[0].dim());
    for r in rows {
        acc.add(r.as_slice());
    }
    FeatureVector::new(acc.finish(rows.len() as f64)).expect("mean of finite vectors is finite")
}

/// Softmax over the class's descriptors of `cos(v, t_m) / tau`.
pub fn attention_weights(v: &FeatureVector, bank: &DescriptorBank, class: usize) -> Result<Vec<f64>> {
    bank.check_class(class)?;
    check_dim(bank.dim(), v.dim())?;
    class_attention(v, bank, class)
}

fn class_attention(v: &FeatureVector, bank: &DescriptorBank, class: usize) -> Result<Vec<f64>> {
    class_attention_with_norm(v, norm(v.as_slice()), bank, class)
}

fn class_attention_with_norm(v: &FeatureVector, v_norm: f64, bank: &DescriptorBank, class: usize) -> Result<Vec<f64>> {
    let sims = bank
        .class_descriptors(class)
        .iter()
        .map(|t| cosine_with_norm(v.as_slice(), v_norm, t.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&sims, bank.tau())?.as_slice().to_vec())
}

fn weighted_sum(weights: &[f64], rows: &[FeatureVector]) -> FeatureVector {
    let mut acc = RowAccumulator::new(rows[0].dim());
    for (w, r) in weights.iter().zip(rows) {
        acc.add_scaled(*w, r.as_slice());
    }
    FeatureVector::new(acc.finish(1.0)).expect("convex combination of finite vectors is finite")
}

/// Instance knowledge for every class of `bank`, plus the attention used.
pub fn build_instance_knowledge(
    v: &FeatureVector,
    bank: &DescriptorBank,
) -> Result<(Vec<FeatureVector>, AttentionMap)> {
    let all: Vec<usize> = (0..bank.num_classes()).collect();
    instance_knowledge_for(v, bank, &all)
}

pub(crate) fn instance_knowledge_for(
    v: &FeatureVector,
    bank: &DescriptorBank,
    classes: &[usize],
) -> Result<(Vec<FeatureVector>, AttentionMap)> {
    check_dim(bank.dim(), v.dim())?;
    let mut knowledge = Vec::with_capacity(classes.len());
    let mut weights = Vec::with_capacity(classes.len());
    let v_norm = norm(v.as_slice());
    for &c in classes {
        bank.check_class(c)?;
        let w = class_attention_with_norm(v, v_norm, bank, c)?;
        knowledge.push(weighted_sum(&w, bank.class_descriptors(c)));
        weights.push(w);
    }
    Ok((knowledge, AttentionMap { weights }))
}

/// Keeps `m_keep` descriptors per class: the first ones when `seed` is
/// `None`, otherwise a seeded uniform sample without replacement (kept in
/// original order).
pub fn subset_descriptions(
    bank: &DescriptorBank,
    m_keep: usize,
    seed: Option<u64>,
) -> Result<DescriptorBank> {
    let m = bank.descriptors_per_class();
    if m_keep == 0 || m_keep > m {
        return Err(AdkError::Index { index: m_keep, len: m });
    }
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let mut texts = Vec::with_capacity(bank.num_classes());
    let mut feats = Vec::with_capacity(bank.num_classes());
    for c in 0..bank.num_classes() {
        let keep: Vec<usize> = match rng.as_mut() {
            None => (0..m_keep).collect(),
            Some(rng) => {
                let mut idx = rand::seq::index::sample(rng, m, m_keep).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        texts.push(keep.iter().map(|&i| bank.descriptions(c)[i].clone()).collect());
        feats.push(keep.iter().map(|&i| bank.class_descriptors(c)[i].clone()).collect());
    }
    DescriptorBank::new(bank.class_names().to_vec(), texts, feats, bank.tau())
}
