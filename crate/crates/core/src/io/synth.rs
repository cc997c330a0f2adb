//! Seeded synthetic fixtures: class prototypes with a controlled pairwise
//! cosine, descriptors and handcrafted vectors scattered around them, and
//! labeled images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::cache::{CacheKind, CacheRecord, Dtype, FeatureCache};
use super::documents::{desc_cache, hand_cache, DescriptionManifest};
use crate::error::{AdkError, Result};
use crate::eval::{Scenario, SplitManifest, SPLIT_MANIFEST_VERSION};
use crate::knowledge::{DescriptorBank, KnowledgeBank};
use crate::math::{dot, normalize, FeatureVector, Temperature};

const REJECTION_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SynthParams {
    pub classes: usize,
    pub descriptors: usize,
    pub dim: usize,
    pub images_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.descriptors == 0 || self.dim == 0 || self.images_per_class == 0 {
            return Err(AdkError::Domain(
                "classes, descriptors, dim and images_per_class must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(AdkError::Domain(format!("separation {} outside [0, 1]", self.separation)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(AdkError::Domain(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub params: SynthParams,
    pub prototypes: Vec<FeatureVector>,
    pub bank: DescriptorBank,
    pub hand: Vec<FeatureVector>,
    pub images: Vec<FeatureVector>,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn class_names(&self) -> &[String] {
        self.bank.class_names()
    }

    pub fn image_names(&self) -> Vec<String> {
        (0..self.images.len()).map(|i| format!("img_{i:05}")).collect()
    }

    pub fn knowledge_bank(&self) -> Result<KnowledgeBank> {
        KnowledgeBank::build(self.class_names(), self.hand.clone(), &self.bank)
    }

    pub fn hand_cache(&self) -> Result<FeatureCache> {
        hand_cache(self.class_names(), &self.hand, Dtype::F64)
    }

    pub fn desc_cache(&self) -> FeatureCache {
        desc_cache(&self.bank, Dtype::F64)
    }

    pub fn image_cache(&self) -> FeatureCache {
        let mut cache = FeatureCache::new(CacheKind::Image, Dtype::F64, self.params.dim as u32);
        for ((name, v), &y) in self.image_names().into_iter().zip(&self.images).zip(&self.labels) {
            cache.records.push(CacheRecord {
                name,
                class_index: Some(y as u32),
                desc_index: None,
                values: v.as_slice().to_vec(),
            });
        }
        cache
    }

    pub fn description_manifest(&self) -> DescriptionManifest {
        DescriptionManifest {
            classes: (0..self.bank.num_classes())
                .map(|c| (self.class_names()[c].clone(), self.bank.descriptions(c).to_vec()))
                .collect(),
        }
    }

    pub fn all_to_all_manifest(&self, shots: usize, seed: u64) -> SplitManifest {
        SplitManifest {
            version: SPLIT_MANIFEST_VERSION,
            scenario: Scenario::AllToAll,
            base_classes: self.class_names().to_vec(),
            novel_classes: Vec::new(),
            shots_per_class: shots,
            seed,
        }
    }

    /// First half (rounded up) of the classes is base, the rest novel. Needs
    /// at least two classes.
    pub fn base_to_novel_manifest(&self, shots: usize, seed: u64) -> Result<SplitManifest> {
        let names = self.class_names();
        if names.len() < 2 {
            return Err(AdkError::Domain("base-to-novel split needs at least 2 classes".into()));
        }
        let cut = names.len().div_ceil(2);
        Ok(SplitManifest {
            version: SPLIT_MANIFEST_VERSION,
            scenario: Scenario::BaseToNovel,
            base_classes: names[..cut].to_vec(),
            novel_classes: names[cut..].to_vec(),
            shots_per_class: shots,
            seed,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(values: Vec<f64>) -> Result<FeatureVector> {
    normalize(&FeatureVector::new(values)?)
}

/// `base + noise * g / sqrt(D)`, renormalized. With zero noise the base is
/// returned untouched.
fn perturb(rng: &mut ChaCha8Rng, base: &FeatureVector, noise: f64) -> Result<FeatureVector> {
    let d = base.dim();
    let g = gaussian(rng, d);
    if noise == 0.0 {
        return Ok(base.clone());
    }
    let scale = noise / (d as f64).sqrt();
    unit(base.as_slice().iter().zip(&g).map(|(b, e)| b + scale * e).collect())
}

/// Gram-Schmidt on Gaussian draws; `k <= d`.
fn orthonormal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut g = gaussian(rng, d);
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for q in &out {
                let p = dot(&g, q);
                g.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
            }
        }
        if let Ok(u) = unit(g) {
            out.push(u.into_inner());
        }
    }
    Ok(out)
}

/// Prototypes with pairwise cosine at most `1 - separation`.
///
/// With room for it (D > N, or D >= N when separation is 1) the cosines are
/// exactly `c = 1 - separation`: `p_n = sqrt(1 - c) e_n + sqrt(c) u` over an
/// orthonormal set. Otherwise random directions are drawn and rejected until
/// they fit.
fn prototypes(rng: &mut ChaCha8Rng, n: usize, d: usize, separation: f64) -> Result<Vec<FeatureVector>> {
    let c = 1.0 - separation;
    let needed = if c > 0.0 { n + 1 } else { n };
    if needed <= d {
        let basis = orthonormal(rng, needed, d)?;
        let (a, b) = ((1.0 - c).sqrt(), c.sqrt());
        return (0..n)
            .map(|i| {
                let raw: Vec<f64> = (0..d)
                    .map(|j| a * basis[i][j] + if c > 0.0 { b * basis[n][j] } else { 0.0 })
                    .collect();
                unit(raw)
            })
            .collect();
    }
    if c <= 0.0 {
        return Err(AdkError::Domain(format!(
            "{n} mutually orthogonal prototypes need dim >= {n}, got {d}"
        )));
    }
    let mut out: Vec<FeatureVector> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > REJECTION_ATTEMPTS * n {
            return Err(AdkError::Domain(format!(
                "could not place {n} prototypes with pairwise cosine <= {c} in dim {d}"
            )));
        }
        let cand = unit(gaussian(rng, d))?;
        if out.iter().all(|p| dot(p.as_slice(), cand.as_slice()) <= c) {
            out.push(cand);
        }
    }
    Ok(out)
}

fn class_name(c: usize, n: usize) -> String {
    let width = (n.saturating_sub(1)).to_string().len().max(2);
    format!("class_{c:0width$}")
}

/// Generates a complete fixture. Images are grouped by class, class 0 first.
pub fn synthesize_dataset(params: SynthParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let SynthParams { classes: n, descriptors: m, dim: d, images_per_class, noise, .. } = params;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let protos = prototypes(&mut rng, n, d, params.separation)?;

    let names: Vec<String> = (0..n).map(|c| class_name(c, n)).collect();
    let mut texts = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for (c, p) in protos.iter().enumerate() {
        texts.push((0..m).map(|j| format!("{} trait {j:02}", names[c])).collect::<Vec<_>>());
        feats.push((0..m).map(|_| perturb(&mut rng, p, noise)).collect::<Result<Vec<_>>>()?);
    }
    let bank = DescriptorBank::new(names, texts, feats, Temperature::CLIP_DEFAULT)?;
    let hand = protos.iter().map(|p| perturb(&mut rng, p, noise)).collect::<Result<Vec<_>>>()?;

    let mut images = Vec::with_capacity(n * images_per_class);
    let mut labels = Vec::with_capacity(n * images_per_class);
    for (c, p) in protos.iter().enumerate() {
        for _ in 0..images_per_class {
            images.push(perturb(&mut rng, p, noise)?);
            labels.push(c);
        }
    }
    Ok(SyntheticDataset { params, prototypes: protos, bank, hand, images, labels })
}
