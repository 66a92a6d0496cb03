//! Epoch batching with in-batch negative sampling.
//!
//! Anchors are annotations. For the retrieval hinge, each anchor draws two
//! independent negative sets from the rest of the batch — other queries
//! scored against the anchor's video, and other videos scored against the
//! anchor's query — always excluding anchors that share the anchor's video
//! (they would be false negatives). The video-level contrastive loss instead
//! consumes the full pairing matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcmr_tensor::seed;

use crate::data::QueryAnnotation;
use crate::{EngineError, Result};

/// One training batch over annotation indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// Global annotation indices, in batch order.
    pub anchors: Vec<usize>,
    /// Per anchor: batch positions whose queries serve as negatives against
    /// the anchor's video. Empty when every other anchor shares the video.
    pub query_negatives: Vec<Vec<usize>>,
    /// Per anchor: batch positions whose videos serve as negatives against
    /// the anchor's query.
    pub video_negatives: Vec<Vec<usize>>,
    /// `positive[a][b]`: anchor `a`'s query belongs to anchor `b`'s video
    /// (video-id equality; the diagonal is always true).
    pub positive: Vec<Vec<bool>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Splits the given annotation subset into shuffled batches for one epoch.
/// The shuffle and the negative draws are functions of `(seed, epoch)` only.
/// A trailing chunk smaller than 2 is dropped (contrastive terms need
/// in-batch negatives).
pub fn make_batches(
    annotations: &[QueryAnnotation],
    subset: &[usize],
    batch_size: usize,
    n_neg: usize,
    base_seed: u64,
    epoch: u64,
) -> Result<Vec<TrainingBatch>> {
    if batch_size < 2 {
        return Err(EngineError::config(format!(
            "batch size must be ≥ 2 for in-batch negatives, got {batch_size}"
        )));
    }
    if n_neg == 0 {
        return Err(EngineError::config("negative sample count must be ≥ 1"));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= annotations.len()) {
        return Err(EngineError::data(format!(
            "annotation index {bad} out of range ({} annotations)",
            annotations.len()
        )));
    }

    let mut order: Vec<usize> = subset.to_vec();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(base_seed, "shuffle", epoch));
    order.shuffle(&mut shuffle_rng);

    let mut negative_rng = ChaCha8Rng::seed_from_u64(seed::derive(base_seed, "negatives", epoch));
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let b = chunk.len();
        let positive: Vec<Vec<bool>> = (0..b)
            .map(|a| {
                (0..b)
                    .map(|o| annotations[chunk[a]].video_id == annotations[chunk[o]].video_id)
                    .collect()
            })
            .collect();
        let mut query_negatives = Vec::with_capacity(b);
        let mut video_negatives = Vec::with_capacity(b);
        for a in 0..b {
            let candidates: Vec<usize> = (0..b).filter(|&o| !positive[a][o]).collect();
            query_negatives.push(draw(&mut negative_rng, &candidates, n_neg));
            video_negatives.push(draw(&mut negative_rng, &candidates, n_neg));
        }
        batches.push(TrainingBatch {
            anchors: chunk.to_vec(),
            query_negatives,
            video_negatives,
            positive,
        });
    }
    Ok(batches)
}

/// Draws `min(n, candidates.len())` distinct entries without replacement.
fn draw(rng: &mut ChaCha8Rng, candidates: &[usize], n: usize) -> Vec<usize> {
    let amount = n.min(candidates.len());
    rand::seq::index::sample(rng, candidates.len(), amount)
        .iter()
        .map(|i| candidates[i])
        .collect()
}
