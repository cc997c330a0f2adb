//! Accuracy metrics and the scenario harness (all-to-all, base-to-novel,
//! cross-domain) over precomputed image features.
//!
//! Base-to-novel follows the usual split protocol: base images are scored
//! against base candidates only and novel images against novel candidates
//! only, and the two accuracies are summarized by their harmonic mean.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_indices, Head, PredictionRecord};
use crate::error::{AdkError, Result};
use crate::knowledge::{DescriptorBank, KnowledgeBank};
use crate::math::FeatureVector;
use crate::par::{self, Execution};

pub const SPLIT_MANIFEST_VERSION: u32 = 1;
pub const EVAL_REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    AllToAll,
    BaseToNovel,
    CrossDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub scenario: Scenario,
    pub base_classes: Vec<String>,
    #[serde(default)]
    pub novel_classes: Vec<String>,
    pub shots_per_class: usize,
    pub seed: u64,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != SPLIT_MANIFEST_VERSION {
            return Err(AdkError::Schema(format!(
                "unsupported split manifest version {}",
                self.version
            )));
        }
        if self.shots_per_class == 0 {
            return Err(AdkError::Schema("shots_per_class must be >= 1".into()));
        }
        if self.base_classes.is_empty() {
            return Err(AdkError::Schema("manifest lists no base classes".into()));
        }
        match (self.scenario, self.novel_classes.is_empty()) {
            (Scenario::BaseToNovel, true) => {
                return Err(AdkError::Schema("base-to-novel manifest lists no novel classes".into()))
            }
            (Scenario::AllToAll | Scenario::CrossDomain, false) => {
                return Err(AdkError::Schema(
                    "novel classes are only allowed in base-to-novel manifests".into(),
                ))
            }
            _ => {}
        }
        let mut seen = HashSet::new();
        for c in self.base_classes.iter().chain(&self.novel_classes) {
            if !seen.insert(c.as_str()) {
                return Err(AdkError::Schema(format!(
                    "class {c:?} appears more than once across base and novel sets"
                )));
            }
        }
        Ok(())
    }
}

/// Accuracy of one head, per partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub base: f64,
    pub novel: Option<f64>,
    pub harmonic_mean: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerHeadAccuracy {
    pub hand: HeadAccuracy,
    pub comp: HeadAccuracy,
    pub inst: HeadAccuracy,
    pub desc: HeadAccuracy,
    pub fused: HeadAccuracy,
}

impl PerHeadAccuracy {
    pub fn get(&self, head: Head) -> HeadAccuracy {
        match head {
            Head::Hand => self.hand,
            Head::Comp => self.comp,
            Head::Inst => self.inst,
            Head::Desc => self.desc,
            Head::Fused => self.fused,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub scenario: Scenario,
    pub base_acc: f64,
    pub novel_acc: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub per_class_acc: BTreeMap<String, f64>,
    pub per_head_acc: PerHeadAccuracy,
    pub n_images: usize,
    pub shots_per_class: usize,
}

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(AdkError::Schema(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(AdkError::Schema("accuracy over zero samples".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`. Both inputs must be positive and on the same scale.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base.is_finite() && novel.is_finite() && base > 0.0 && novel > 0.0) {
        return Err(AdkError::Domain(format!(
            "harmonic mean needs positive inputs, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

// A zero accuracy pulls the harmonic mean to its limit of zero.
fn report_hm(base: f64, novel: f64) -> Result<f64> {
    if base == 0.0 || novel == 0.0 {
        Ok(0.0)
    } else {
        harmonic_mean(base, novel)
    }
}

/// Stratified sample of exactly `k` indices per class, returned in ascending
/// order. Classes are visited in index order and each draws a partial
/// Fisher-Yates shuffle from one seeded stream.
pub fn kshot_subsample(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(AdkError::Domain("K must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(AdkError::Index { index: y, len: num_classes });
        }
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * num_classes);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < k {
            return Err(AdkError::MissingClass(format!(
                "class {c} has {} samples, {k} required",
                idx.len()
            )));
        }
        for i in 0..k {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        out.extend_from_slice(&idx[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

struct Partition {
    candidates: Vec<usize>,
    images: Vec<usize>,
}

#[derive(Default)]
struct PartitionOutcome {
    per_head: BTreeMap<Head, f64>,
    per_class: Vec<(usize, f64)>,
}

fn evaluate_partition(
    part: &Partition,
    images: &[FeatureVector],
    labels: &[usize],
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
    exec: Execution,
) -> Result<PartitionOutcome> {
    if part.images.is_empty() {
        return Err(AdkError::Schema("an evaluated partition has no images".into()));
    }
    let records: Vec<PredictionRecord> = par::try_map(exec, &part.images, |&i| {
        classify_indices(&images[i], kb, bank, &part.candidates).map(|(r, _)| r)
    })?;
    let truth: Vec<usize> = part.images.iter().map(|&i| labels[i]).collect();
    let mut out = PartitionOutcome::default();
    for head in Head::ALL {
        let preds: Vec<usize> = records
            .iter()
            .map(|r| part.candidates[r.predicted_by(head)])
            .collect();
        out.per_head.insert(head, accuracy(&preds, &truth)?);
    }
    for &c in &part.candidates {
        let (mut hits, mut total) = (0usize, 0usize);
        for (r, &y) in records.iter().zip(&truth) {
            if y == c {
                total += 1;
                hits += usize::from(part.candidates[r.predicted] == c);
            }
        }
        if total == 0 {
            return Err(AdkError::MissingClass(format!(
                "class {:?} has no evaluation images",
                kb.class_names[c]
            )));
        }
        out.per_class.push((c, hits as f64 / total as f64));
    }
    Ok(out)
}

/// Runs one evaluation scenario. `labels[i]` indexes the knowledge bank's
/// class list; images whose class is not part of the manifest are skipped.
pub fn run_scenario(
    manifest: &SplitManifest,
    images: &[FeatureVector],
    labels: &[usize],
    kb: &KnowledgeBank,
    bank: &DescriptorBank,
    exec: Execution,
) -> Result<EvalReport> {
    manifest.validate()?;
    kb.check_compatible(bank)?;
    if images.len() != labels.len() {
        return Err(AdkError::Schema(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    for v in images {
        if v.dim() != kb.dim() {
            return Err(AdkError::Schema(format!(
                "image dim {} does not match knowledge dim {}",
                v.dim(),
                kb.dim()
            )));
        }
    }
    let index: HashMap<&str, usize> = kb
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| AdkError::Schema(format!("manifest class {n:?} not in knowledge bank")))
            })
            .collect()
    };
    let partition = |candidates: Vec<usize>| -> Result<Partition> {
        let set: HashSet<usize> = candidates.iter().copied().collect();
        let mut imgs = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            if y >= kb.num_classes() {
                return Err(AdkError::Index { index: y, len: kb.num_classes() });
            }
            if set.contains(&y) {
                imgs.push(i);
            }
        }
        Ok(Partition { candidates, images: imgs })
    };

    let base = partition(resolve(&manifest.base_classes)?)?;
    let novel = if manifest.scenario == Scenario::BaseToNovel {
        Some(partition(resolve(&manifest.novel_classes)?)?)
    } else {
        None
    };

    let base_out = evaluate_partition(&base, images, labels, kb, bank, exec)?;
    let novel_out = novel
        .as_ref()
        .map(|p| evaluate_partition(p, images, labels, kb, bank, exec))
        .transpose()?;

    let head_acc = |head: Head| -> Result<HeadAccuracy> {
        let b = base_out.per_head[&head];
        let n = novel_out.as_ref().map(|o| o.per_head[&head]);
        Ok(HeadAccuracy {
            base: b,
            novel: n,
            harmonic_mean: n.map(|n| report_hm(b, n)).transpose()?,
        })
    };
    let per_head_acc = PerHeadAccuracy {
        hand: head_acc(Head::Hand)?,
        comp: head_acc(Head::Comp)?,
        inst: head_acc(Head::Inst)?,
        desc: head_acc(Head::Desc)?,
        fused: head_acc(Head::Fused)?,
    };
    let mut per_class_acc = BTreeMap::new();
    for out in std::iter::once(&base_out).chain(novel_out.as_ref()) {
        for &(c, acc) in &out.per_class {
            per_class_acc.insert(kb.class_names[c].clone(), acc);
        }
    }
    Ok(EvalReport {
        version: EVAL_REPORT_VERSION,
        scenario: manifest.scenario,
        base_acc: per_head_acc.fused.base,
        novel_acc: per_head_acc.fused.novel,
        harmonic_mean: per_head_acc.fused.harmonic_mean,
        per_class_acc,
        per_head_acc,
        n_images: base.images.len() + novel.as_ref().map_or(0, |p| p.images.len()),
        shots_per_class: manifest.shots_per_class,
    })
}
