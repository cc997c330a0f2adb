//! Analysis tools: inter-class similarity maps and their KL divergence,
//! attention inspection, and an inference FLOP model.
//!
//! The KL divergence between two similarity maps is convention-dependent.
//! Here each row, with its diagonal entry dropped, is turned into a
//! distribution by a temperature-1 softmax, and the result is the mean over
//! rows of `KL(text_row || image_row)`. Absolute values are only comparable
//! between runs that use this same convention.

use serde::{Deserialize, Serialize};

use crate::error::{AdkError, Result};
use crate::knowledge::{attention_weights, DescriptorBank, KnowledgeBank};
use crate::math::{check_dim, cosine_slices, FeatureVector, RowAccumulator};
use crate::par::{self, Execution};

pub const KLD_CONVENTION: &str = "row softmax (T=1) over off-diagonal entries; mean over rows of KL(text || image)";

/// Mean image feature per class. Prototypes are not re-normalized, so a
/// class whose images cancel out yields a (degenerate) zero vector.
pub fn class_prototypes(
    images: &[FeatureVector],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<FeatureVector>> {
    if images.len() != labels.len() {
        return Err(AdkError::Schema(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut members: Vec<Vec<&FeatureVector>> = vec![Vec::new(); num_classes];
    for (img, &y) in images.iter().zip(labels) {
        if y >= num_classes {
            return Err(AdkError::Index { index: y, len: num_classes });
        }
        members[y].push(img);
    }
    members
        .iter()
        .enumerate()
        .map(|(c, imgs)| {
            if imgs.is_empty() {
                return Err(AdkError::MissingClass(format!("class {c} has no images")));
            }
            let d = imgs[0].dim();
            let mut acc = RowAccumulator::new(d);
            for img in imgs {
                check_dim(d, img.dim())?;
                acc.add(img.as_slice());
            }
            FeatureVector::new(acc.finish(imgs.len() as f64))
        })
        .collect()
}

/// Pairwise cosine similarities among class-level vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub matrix: Vec<Vec<f64>>,
}

impl SimilarityMap {
    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let c = matrix.len();
        for (a, row) in matrix.iter().enumerate() {
            if row.len() != c {
                return Err(AdkError::Schema(format!("row {a} has {} entries, expected {c}", row.len())));
            }
            for (b, x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(AdkError::Data(format!("entry ({a},{b}) is {x}")));
                }
                if (x - matrix[b][a]).abs() > 1e-9 {
                    return Err(AdkError::Schema(format!("map not symmetric at ({a},{b})")));
                }
            }
        }
        Ok(SimilarityMap { matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.len()
    }
}

pub fn similarity_map(vectors: &[FeatureVector], exec: Execution) -> Result<SimilarityMap> {
    let c = vectors.len();
    if c < 2 {
        return Err(AdkError::Schema(format!("similarity map needs at least 2 vectors, got {c}")));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.is_degenerate() {
            return Err(AdkError::DegenerateVector(format!("vector {i} has zero norm")));
        }
    }
    let matrix = par::try_map_range(exec, c, |a| {
        (0..c)
            .map(|b| {
                if a == b {
                    Ok(1.0)
                } else {
                    cosine_slices(vectors[a].as_slice(), vectors[b].as_slice())
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SimilarityMap { matrix })
}

fn off_diagonal_softmax(row: &[f64], skip: usize) -> Vec<f64> {
    let vals: Vec<f64> = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &x)| x)
        .collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean row-wise `KL(text || image)`; see the module docs for the convention.
pub fn map_kld(text: &SimilarityMap, image: &SimilarityMap) -> Result<f64> {
    map_kld_with(text, image, Execution::default())
}

pub fn map_kld_with(text: &SimilarityMap, image: &SimilarityMap, exec: Execution) -> Result<f64> {
    let c = text.size();
    if c != image.size() {
        return Err(AdkError::Schema(format!("map sizes differ: {c} vs {}", image.size())));
    }
    if c < 2 {
        return Err(AdkError::Schema("KL divergence needs at least 2 classes".into()));
    }
    let rows: Vec<usize> = (0..c).collect();
    let per_row = par::map(exec, &rows, |&a| {
        let p = off_diagonal_softmax(&text.matrix[a], a);
        let q = off_diagonal_softmax(&image.matrix[a], a);
        p.iter()
            .zip(&q)
            .map(|(pi, qi)| if *pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
            .sum::<f64>()
    });
    let kld = per_row.iter().sum::<f64>() / c as f64;
    if kld < -1e-12 || !kld.is_finite() {
        return Err(AdkError::Invariant(format!("KL divergence evaluated to {kld}")));
    }
    Ok(kld.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDescription {
    pub index: usize,
    pub text: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopDescriptions {
    pub class_index: usize,
    pub entries: Vec<RankedDescription>,
    /// Total weight of the descriptions not listed.
    pub other: f64,
}

/// The `k` highest-weighted descriptions of `class` for image `v`; equal
/// weights keep their original order.
pub fn top_descriptions(
    v: &FeatureVector,
    bank: &DescriptorBank,
    class: usize,
    k: usize,
) -> Result<TopDescriptions> {
    let weights = attention_weights(v, bank, class)?;
    rank_weights(&weights, bank.descriptions(class), class, k)
}

pub(crate) fn rank_weights(
    weights: &[f64],
    texts: &[String],
    class: usize,
    k: usize,
) -> Result<TopDescriptions> {
    let m = weights.len();
    if k == 0 || k > m {
        return Err(AdkError::Index { index: k, len: m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    let entries: Vec<RankedDescription> = order[..k]
        .iter()
        .map(|&i| RankedDescription {
            index: i,
            text: texts[i].clone(),
            weight: weights[i],
        })
        .collect();
    let listed: f64 = entries.iter().map(|e| e.weight).sum();
    Ok(TopDescriptions {
        class_index: class,
        entries,
        other: (1.0 - listed).max(0.0),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CountConvention {
    /// One multiply-accumulate counts as one operation.
    #[default]
    Mac,
    /// One multiply-accumulate counts as two operations.
    Flop2,
}

impl CountConvention {
    fn factor(self) -> f64 {
        match self {
            CountConvention::Mac => 1.0,
            CountConvention::Flop2 => 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Clip,
    Cocoop,
    Adk,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Clip, Method::Cocoop, Method::Adk];
}

/// How offline text encoding enters the per-image cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TextEncoding {
    /// Prompt and description features are precomputed and not charged.
    #[default]
    Excluded,
    /// The one-off encoding of all static prompts is spread over `images`.
    Amortized { images: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub image_encoder_gflops: f64,
    pub text_encoder_gflops_per_prompt: f64,
    pub dim: usize,
    pub classes: usize,
    pub descriptors: usize,
    pub convention: CountConvention,
    #[serde(default)]
    pub text_encoding: TextEncoding,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("image_encoder_gflops", self.image_encoder_gflops),
            ("text_encoder_gflops_per_prompt", self.text_encoder_gflops_per_prompt),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(AdkError::Domain(format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        if self.dim == 0 || self.classes == 0 {
            return Err(AdkError::Domain("dim and classes must be positive".into()));
        }
        if let TextEncoding::Amortized { images: 0 } = self.text_encoding {
            return Err(AdkError::Domain("cannot amortize text encoding over 0 images".into()));
        }
        Ok(())
    }
}

/// Per-image GFLOPs. `total` sums the multiply-accumulate terms; exponentials,
/// divisions and additions are reported in `lower_order` only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub method: Method,
    pub encode: f64,
    pub text: f64,
    pub knowledge: f64,
    pub logits: f64,
    pub total: f64,
    pub lower_order: f64,
}

pub fn inference_cost(params: &CostModelParams, method: Method) -> Result<CostBreakdown> {
    params.validate()?;
    let giga = 1e9;
    let f = params.convention.factor();
    let n = params.classes as f64;
    let m = params.descriptors as f64;
    let d = params.dim as f64;
    let per_prompt = params.text_encoder_gflops_per_prompt;
    let amortized = |prompts: f64| match params.text_encoding {
        TextEncoding::Excluded => 0.0,
        TextEncoding::Amortized { images } => per_prompt * prompts / images as f64,
    };
    let uses_descriptions = method == Method::Adk && params.descriptors > 0;

    let encode = params.image_encoder_gflops;
    let text = match method {
        Method::Clip => amortized(n),
        Method::Cocoop => per_prompt * n,
        Method::Adk if uses_descriptions => amortized(n * (1.0 + m)),
        Method::Adk => amortized(n),
    };
    // descriptor similarities plus the attention-weighted sums
    let knowledge = if uses_descriptions { 2.0 * n * m * d * f / giga } else { 0.0 };
    let heads = if uses_descriptions { 3.0 } else { 1.0 };
    let logits = heads * n * d * f / giga;
    // softmax exp + divide per logit; attention softmax; fusion adds
    let lower_order = if uses_descriptions {
        (2.0 * 3.0 * n + 2.0 * n * m + 3.0 * n) / giga
    } else {
        2.0 * n / giga
    };
    Ok(CostBreakdown {
        method,
        encode,
        text,
        knowledge,
        logits,
        total: encode + text + knowledge + logits,
        lower_order,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub version: u32,
    pub num_classes: usize,
    pub kld_convention: String,
    pub kld_hand: f64,
    pub kld_comp: f64,
    pub s_hand: SimilarityMap,
    pub s_comp: SimilarityMap,
    pub s_img: SimilarityMap,
}

/// Compares handcrafted and compositional inter-class structure against the
/// structure of class-mean image features.
pub fn diagnose(
    images: &[FeatureVector],
    labels: &[usize],
    kb: &KnowledgeBank,
    exec: Execution,
) -> Result<DiagnosticsReport> {
    let c = kb.num_classes();
    let protos = class_prototypes(images, labels, c)?;
    let s_img = similarity_map(&protos, exec)?;
    let s_hand = similarity_map(&kb.hand, exec)?;
    let s_comp = similarity_map(&kb.comp, exec)?;
    Ok(DiagnosticsReport {
        version: 1,
        num_classes: c,
        kld_convention: KLD_CONVENTION.to_string(),
        kld_hand: map_kld_with(&s_hand, &s_img, exec)?,
        kld_comp: map_kld_with(&s_comp, &s_img, exec)?,
        s_hand,
        s_comp,
        s_img,
    })
}
