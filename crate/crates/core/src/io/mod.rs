//! File formats and fixture generation.

pub mod cache;
pub mod documents;
pub mod synth;

pub use cache::{decode, encode, read_cache, write_cache, CacheKind, CacheRecord, Dtype, FeatureCache};
pub use documents::{
    bank_from_cache, desc_cache, hand_cache, hand_from_cache, images_from_cache, knowledge_bank_from_json,
    knowledge_bank_to_json, load_descriptions, parse_descriptions, read_json, read_knowledge_bank, write_json,
    write_knowledge_bank, DescriptionManifest, LabeledImages,
};
pub use synth::{synthesize_dataset, SynthParams, SyntheticDataset};
