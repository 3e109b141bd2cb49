use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of a synthetic labelled corpus.
///
/// Each utterance is a run of segments. A segment's frames are Gaussian
/// around the mean of its label under the utterance's *condition* (think
/// speaker or channel): every condition has its own offset and its own
/// cluster means, so the frame-to-label map differs between conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub clusters: usize,
    pub vocab: usize,
    pub utterances: usize,
    /// Raw (pre-stacking) feature width.
    pub dim: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Raw frames per segment.
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    pub conditions: usize,
    /// Scale of the cluster means.
    pub separation: f64,
    /// Scale of the per-condition offsets.
    pub condition_offset: f64,
    /// Standard deviation of the per-frame noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clusters: 7,
            vocab: 8,
            utterances: 100,
            dim: 8,
            min_segments: 2,
            max_segments: 6,
            min_segment_frames: 9,
            max_segment_frames: 15,
            conditions: 1,
            separation: 1.0,
            condition_offset: 0.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.clusters == 0 || self.clusters + 1 > self.vocab {
            problems.push(format!(
                "clusters ({}) must be in 1..=vocab-1 ({})",
                self.clusters,
                self.vocab.saturating_sub(1)
            ));
        }
        if self.dim == 0 {
            problems.push("dim must be positive".to_string());
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            problems.push("need 1 <= min_segments <= max_segments".to_string());
        }
        if self.min_segment_frames == 0 || self.min_segment_frames > self.max_segment_frames {
            problems.push("need 1 <= min_segment_frames <= max_segment_frames".to_string());
        }
        if self.conditions == 0 {
            problems.push("conditions must be positive".to_string());
        }
        if self.clusters == 1 && self.max_segments > 1 {
            problems.push("a single cluster cannot form multi-segment utterances without repeats".to_string());
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0 && self.condition_offset >= 0.0) {
            problems.push("noise, separation and condition_offset must be >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Generates a corpus deterministically from `spec.seed`. Feature values are
/// rounded to `f32` so that they survive the feature-file format exactly.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets: Vec<Vec<f64>> = (0..spec.conditions)
        .map(|_| gaussian(&mut rng, spec.dim, spec.condition_offset))
        .collect();
    let means: Vec<Vec<Vec<f64>>> = (0..spec.conditions)
        .map(|_| {
            (0..spec.clusters)
                .map(|_| gaussian(&mut rng, spec.dim, spec.separation))
                .collect()
        })
        .collect();

    let mut corpus = Vec::with_capacity(spec.utterances);
    for u in 0..spec.utterances {
        let cond = rng.gen_range(0..spec.conditions);
        let segments = rng.gen_range(spec.min_segments..=spec.max_segments);
        let mut labels: Vec<usize> = Vec::with_capacity(segments);
        for _ in 0..segments {
            let label = loop {
                let l = rng.gen_range(0..spec.clusters);
                if labels.last() != Some(&l) {
                    break l;
                }
            };
            labels.push(label);
        }
        let mut data = Vec::new();
        for &label in &labels {
            let frames = rng.gen_range(spec.min_segment_frames..=spec.max_segment_frames);
            for _ in 0..frames {
                let noise = gaussian(&mut rng, spec.dim, spec.noise);
                for k in 0..spec.dim {
                    let v = offsets[cond][k] + means[cond][label][k] + noise[k];
                    data.push(v as f32 as f64);
                }
            }
        }
        let frames = data.len() / spec.dim;
        corpus.push(Utterance {
            id: format!("synth-{u:05}-c{cond}"),
            features: Tensor::new(vec![frames, spec.dim], data)?,
            labels,
        });
    }
    Ok(corpus)
}
