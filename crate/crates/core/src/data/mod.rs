//! Feature ingestion, the stacking/subsampling/CMVN frame pipeline,
//! synthetic corpora and padded batching.

mod corpus;
mod features;
mod pipeline;
mod synth;

pub use corpus::{bucket_batches, Batch, Utterance};
pub use features::{
    decode_features, encode_features, load_manifest, read_features, read_manifest, write_features,
    write_with_manifest, ManifestEntry, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use pipeline::{cmvn_apply, cmvn_fit, stack_subsample, CmvnStats, CMVN_VAR_FLOOR};
pub use synth::{synth_corpus, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Frame stacking and subsampling factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramePipeline {
    pub stack: usize,
    pub rate: usize,
}

impl Default for FramePipeline {
    fn default() -> Self {
        FramePipeline { stack: 8, rate: 3 }
    }
}

impl FramePipeline {
    pub fn apply(&self, corpus: &[Utterance]) -> Result<Vec<Utterance>> {
        corpus
            .iter()
            .map(|u| {
                Ok(Utterance {
                    id: u.id.clone(),
                    features: stack_subsample(&u.features, self.stack, self.rate)?,
                    labels: u.labels.clone(),
                })
            })
            .collect()
    }
}

/// Normalizes every utterance with statistics fitted elsewhere.
pub fn normalize(corpus: &[Utterance], stats: &CmvnStats) -> Result<Vec<Utterance>> {
    corpus
        .iter()
        .map(|u| {
            Ok(Utterance {
                id: u.id.clone(),
                features: cmvn_apply(&u.features, stats)?,
                labels: u.labels.clone(),
            })
        })
        .collect()
}
