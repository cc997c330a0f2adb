//! JSON documents: description manifests, knowledge-bank files, split
//! manifests and reports, plus conversions between feature caches and the
//! in-memory banks.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::{DeserializeOwned, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::cache::{CacheKind, CacheRecord, Dtype, FeatureCache};
use crate::error::{AdkError, Result};
use crate::knowledge::{DescriptorBank, KnowledgeBank};
use crate::math::{normalize, FeatureVector, Temperature};

pub const KNOWLEDGE_BANK_VERSION: u32 = 1;

const PRESERVE_NORM_TOL: f64 = 1e-12;

/// Class name to description texts, in file order. Serialized as a plain
/// JSON object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionManifest {
    pub classes: Vec<(String, Vec<String>)>,
}

impl DescriptionManifest {
    pub fn descriptions_per_class(&self) -> usize {
        self.classes.first().map_or(0, |(_, d)| d.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(AdkError::Schema("description manifest has no classes".into()));
        }
        let mut seen = HashSet::new();
        for (name, texts) in &self.classes {
            if name.is_empty() {
                return Err(AdkError::Schema("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(AdkError::Schema(format!("duplicate class name {name:?}")));
            }
            if let Some(m) = texts.iter().position(String::is_empty) {
                return Err(AdkError::Schema(format!("class {name:?}: description {m} is empty")));
            }
        }
        // the most common count is taken as M; every other class is ragged
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (_, texts) in &self.classes {
            *counts.entry(texts.len()).or_default() += 1;
        }
        let m = counts
            .iter()
            .max_by_key(|&(len, freq)| (*freq, *len))
            .map(|(len, _)| *len)
            .unwrap_or(0);
        let ragged: Vec<String> = self
            .classes
            .iter()
            .filter(|(_, t)| t.len() != m)
            .map(|(n, t)| format!("{n} ({})", t.len()))
            .collect();
        if !ragged.is_empty() {
            return Err(AdkError::Schema(format!(
                "ragged description counts (expected {m}): {}",
                ragged.join(", ")
            )));
        }
        if m == 0 {
            return Err(AdkError::Schema("classes carry no descriptions".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

impl Serialize for DescriptionManifest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.classes.len()))?;
        for (k, v) in &self.classes {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for DescriptionManifest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Entries;
        impl<'de> Visitor<'de> for Entries {
            type Value = Vec<(String, Vec<String>)>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping class names to arrays of descriptions")
            }

            // duplicates are kept so validation can report them
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = access.next_entry::<String, Vec<String>>()? {
                    out.push(entry);
                }
                Ok(out)
            }
        }
        d.deserialize_map(Entries).map(|classes| DescriptionManifest { classes })
    }
}

pub fn parse_descriptions(text: &str) -> Result<DescriptionManifest> {
    let m: DescriptionManifest = serde_json::from_str(text)
        .map_err(|e| AdkError::Schema(format!("description manifest: {e}")))?;
    m.validate()?;
    Ok(m)
}

pub fn load_descriptions(path: impl AsRef<Path>) -> Result<DescriptionManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AdkError::io(path, e))?;
    parse_descriptions(&text)
}

#[derive(Serialize, Deserialize)]
struct KnowledgeBankFile {
    version: u32,
    class_names: Vec<String>,
    descriptors_per_class: usize,
    source_bank_checksum: String,
    hand: Vec<FeatureVector>,
    comp: Vec<FeatureVector>,
}

pub fn knowledge_bank_to_json(kb: &KnowledgeBank) -> String {
    let file = KnowledgeBankFile {
        version: KNOWLEDGE_BANK_VERSION,
        class_names: kb.class_names.clone(),
        descriptors_per_class: kb.descriptors_per_class,
        source_bank_checksum: kb.source_bank_checksum.clone(),
        hand: kb.hand.clone(),
        comp: kb.comp.clone(),
    };
    serde_json::to_string(&file).expect("knowledge bank serializes") + "\n"
}

pub fn knowledge_bank_from_json(text: &str) -> Result<KnowledgeBank> {
    let file: KnowledgeBankFile =
        serde_json::from_str(text).map_err(|e| AdkError::Schema(format!("knowledge bank: {e}")))?;
    if file.version != KNOWLEDGE_BANK_VERSION {
        return Err(AdkError::Schema(format!("unsupported knowledge bank version {}", file.version)));
    }
    let kb = KnowledgeBank {
        class_names: file.class_names,
        hand: file.hand,
        comp: file.comp,
        descriptors_per_class: file.descriptors_per_class,
        source_bank_checksum: file.source_bank_checksum,
    };
    kb.validate()?;
    Ok(kb)
}

pub fn write_knowledge_bank(kb: &KnowledgeBank, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &knowledge_bank_to_json(kb))
}

pub fn read_knowledge_bank(path: impl AsRef<Path>) -> Result<KnowledgeBank> {
    knowledge_bank_from_json(&read_text(path)?)
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| AdkError::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| AdkError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| AdkError::Schema(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable document") + "\n";
    write_text(path, &text)
}

fn expect_kind(cache: &FeatureCache, kind: CacheKind) -> Result<()> {
    if cache.kind != kind {
        return Err(AdkError::Schema(format!("expected a {kind:?} cache, got {:?}", cache.kind)));
    }
    Ok(())
}

/// Rows already unit to working precision are kept bit for bit, so that a
/// bank written and read back has the same checksum.
fn unit_vector(r: &CacheRecord) -> Result<FeatureVector> {
    let v = FeatureVector::new(r.values.clone())?;
    if (v.norm() - 1.0).abs() <= PRESERVE_NORM_TOL {
        return Ok(v);
    }
    normalize(&v).map_err(|_| {
        AdkError::DegenerateVector(format!("record {:?} has (near-)zero norm", r.name))
    })
}

/// Class names and unit-normalized handcrafted features. Records must list
/// classes in order, with `class_index` equal to the position when present.
pub fn hand_from_cache(cache: &FeatureCache) -> Result<(Vec<String>, Vec<FeatureVector>)> {
    expect_kind(cache, CacheKind::Hand)?;
    if cache.records.is_empty() {
        return Err(AdkError::Schema("handcrafted cache has no classes".into()));
    }
    let mut names = Vec::with_capacity(cache.len());
    let mut feats = Vec::with_capacity(cache.len());
    for (i, r) in cache.records.iter().enumerate() {
        if r.class_index.is_some_and(|c| c as usize != i) {
            return Err(AdkError::Schema(format!(
                "handcrafted record {i} ({:?}) claims class index {:?}",
                r.name, r.class_index
            )));
        }
        names.push(r.name.clone());
        feats.push(unit_vector(r)?);
    }
    Ok((names, feats))
}

/// Builds a descriptor bank from a DESC cache whose `class_index` refers to
/// `class_names`. Descriptor indices must cover `0..M` for every class.
pub fn bank_from_cache(cache: &FeatureCache, class_names: &[String], tau: Temperature) -> Result<DescriptorBank> {
    expect_kind(cache, CacheKind::Desc)?;
    let n = class_names.len();
    let mut slots: Vec<BTreeMap<u32, (String, FeatureVector)>> = vec![BTreeMap::new(); n];
    for r in &cache.records {
        let (Some(c), Some(m)) = (r.class_index, r.desc_index) else {
            return Err(AdkError::Schema(format!("description record {:?} lacks class/desc index", r.name)));
        };
        let c = c as usize;
        if c >= n {
            return Err(AdkError::Schema(format!(
                "description record {:?} refers to class {c}, only {n} classes known",
                r.name
            )));
        }
        if slots[c].insert(m, (r.name.clone(), unit_vector(r)?)).is_some() {
            return Err(AdkError::Schema(format!(
                "class {:?} has descriptor index {m} twice",
                class_names[c]
            )));
        }
    }
    let mut texts = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for (c, slot) in slots.into_iter().enumerate() {
        if slot.keys().enumerate().any(|(pos, &m)| pos as u32 != m) {
            return Err(AdkError::Schema(format!(
                "class {:?} has non-contiguous descriptor indices",
                class_names[c]
            )));
        }
        let (t, f): (Vec<_>, Vec<_>) = slot.into_values().unzip();
        texts.push(t);
        feats.push(f);
    }
    let counts: Vec<usize> = feats.iter().map(Vec::len).collect();
    let m = counts.iter().copied().max().unwrap_or(0);
    let ragged: Vec<&str> = class_names
        .iter()
        .zip(&counts)
        .filter(|(_, &k)| k != m)
        .map(|(c, _)| c.as_str())
        .collect();
    if !ragged.is_empty() {
        return Err(AdkError::Schema(format!(
            "ragged descriptor counts (expected {m}) for classes: {}",
            ragged.join(", ")
        )));
    }
    DescriptorBank::new(class_names.to_vec(), texts, feats, tau)
}

/// Image features (unit-normalized), their names and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub names: Vec<String>,
    pub features: Vec<FeatureVector>,
    pub labels: Vec<Option<usize>>,
}

impl LabeledImages {
    /// All labels, or a schema error naming the first unlabeled image.
    pub fn require_labels(&self, num_classes: usize) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.names)
            .map(|(l, name)| match l {
                Some(y) if *y < num_classes => Ok(*y),
                Some(y) => Err(AdkError::Schema(format!(
                    "image {name:?} has label {y}, only {num_classes} classes known"
                ))),
                None => Err(AdkError::Schema(format!("image {name:?} has no label"))),
            })
            .collect()
    }
}

pub fn images_from_cache(cache: &FeatureCache) -> Result<LabeledImages> {
    expect_kind(cache, CacheKind::Image)?;
    let mut out = LabeledImages {
        names: Vec::with_capacity(cache.len()),
        features: Vec::with_capacity(cache.len()),
        labels: Vec::with_capacity(cache.len()),
    };
    for r in &cache.records {
        out.names.push(r.name.clone());
        out.features.push(unit_vector(r)?);
        out.labels.push(r.class_index.map(|c| c as usize));
    }
    Ok(out)
}

pub fn hand_cache(names: &[String], features: &[FeatureVector], dtype: Dtype) -> Result<FeatureCache> {
    let dim = features.first().map_or(0, FeatureVector::dim);
    let mut cache = FeatureCache::new(CacheKind::Hand, dtype, dim as u32);
    for (i, (name, f)) in names.iter().zip(features).enumerate() {
        cache.records.push(CacheRecord {
            name: name.clone(),
            class_index: Some(i as u32),
            desc_index: None,
            values: f.as_slice().to_vec(),
        });
    }
    Ok(cache)
}

pub fn desc_cache(bank: &DescriptorBank, dtype: Dtype) -> FeatureCache {
    let mut cache = FeatureCache::new(CacheKind::Desc, dtype, bank.dim() as u32);
    for c in 0..bank.num_classes() {
        for (m, (text, f)) in bank.descriptions(c).iter().zip(bank.class_descriptors(c)).enumerate() {
            cache.records.push(CacheRecord {
                name: text.clone(),
                class_index: Some(c as u32),
                desc_index: Some(m as u32),
                values: f.as_slice().to_vec(),
            });
        }
    }
    cache
}
