//! Descriptor-augmented zero-shot classification over precomputed
//! vision-language features.
//!
//! Each class carries a handcrafted prompt embedding and a bank of `M`
//! description embeddings. Three cosine-softmax heads score an image: one
//! against the prompt, one against the mean description ("compositional"),
//! and one against an image-conditioned attention mix of the descriptions
//! ("instance"). The two description heads are averaged and added to the
//! prompt head.

pub mod classifier;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod io;
pub mod knowledge;
pub mod math;
pub mod par;

#[cfg(test)]
mod testutil;

pub use classifier::{classify, classify_batch, classify_subset, grad_image, loss, Head, LossBreakdown, PredictionRecord};
pub use diagnostics::{diagnose, inference_cost, map_kld, similarity_map, CostBreakdown, CostModelParams, SimilarityMap};
pub use error::{AdkError, Result};
pub use eval::{harmonic_mean, run_scenario, EvalReport, Scenario, SplitManifest};
pub use knowledge::{build_compositional, build_instance_knowledge, DescriptorBank, KnowledgeBank};
pub use math::{cosine_similarity, softmax, FeatureVector, ProbabilityVector, Temperature};
pub use par::Execution;
