use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One utterance: `frames × dim` features and its label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Checks finiteness and that no label reaches the blank index.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(Error::Contract(format!("utterance {} features must be a matrix", self.id)));
        }
        if !self.features.all_finite() {
            return Err(Error::Contract(format!("utterance {} has non-finite features", self.id)));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l + 1 >= vocab) {
            return Err(Error::Contract(format!(
                "utterance {} label {bad} is not below the blank index {}",
                self.id,
                vocab - 1
            )));
        }
        Ok(())
    }
}

/// Zero-padded `B × T_max × dim` batch. Padding frames never reach a loss or
/// a routing statistic because the model slices every utterance to its length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        Self::padded(utts, 0)
    }

    /// Like [`Batch::from_utterances`] but pads to at least `min_frames`.
    pub fn padded(utts: &[&Utterance], min_frames: usize) -> Result<Self> {
        let first = utts.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let dim = first.dim();
        let t_max = utts.iter().map(|u| u.frames()).max().unwrap_or(0).max(min_frames);
        let mut data = vec![0.0; utts.len() * t_max * dim];
        for (b, u) in utts.iter().enumerate() {
            if u.dim() != dim {
                return Err(Error::Contract(format!(
                    "utterance {} has width {}, batch width is {dim}",
                    u.id,
                    u.dim()
                )));
            }
            let start = b * t_max * dim;
            data[start..start + u.features.len()].copy_from_slice(u.features.data());
        }
        Ok(Batch {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            features: Tensor::new(vec![utts.len(), t_max, dim], data)?,
            lengths: utts.iter().map(|u| u.frames()).collect(),
            labels: utts.iter().map(|u| u.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn max_frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn label_lengths(&self) -> Vec<usize> {
        self.labels.iter().map(Vec::len).collect()
    }

    /// The unpadded `length × dim` features of utterance `b`.
    pub fn utterance(&self, b: usize) -> Tensor {
        let (t_max, dim) = (self.max_frames(), self.dim());
        let start = b * t_max * dim;
        let len = self.lengths[b];
        Tensor::new(vec![len, dim], self.features.data()[start..start + len * dim].to_vec())
            .expect("lengths validated at construction")
    }

    /// Subset of the batch in the given order.
    pub fn select(&self, keep: &[usize]) -> Result<Batch> {
        let owned: Vec<Utterance> = keep
            .iter()
            .map(|&b| Utterance {
                id: self.ids[b].clone(),
                features: self.utterance(b),
                labels: self.labels[b].clone(),
            })
            .collect();
        Batch::from_utterances(&owned.iter().collect::<Vec<_>>())
    }
}

/// Groups utterances of similar length so that each batch holds at most
/// `frame_budget` padded frames (but always at least one utterance). Batch
/// order is shuffled with `seed`; the grouping itself is deterministic.
pub fn bucket_batches(corpus: &[Utterance], frame_budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (corpus[i].frames(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let t = corpus[i].frames();
        // sorted ascending, so t is the padded length of the grown batch
        if !current.is_empty() && (current.len() + 1) * t > frame_budget {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}
