//! Retrieval throughput comparison: precomputed index vs full re-encoding.
//!
//! Both modes score every query against every video and must produce the
//! exact same rankings; the benchmark exists to measure how much work the
//! precomputed index saves, not to trade accuracy for speed.

use std::time::Instant;

use serde::Serialize;

use vcmr_model::Model;

use crate::data::VideoRecord;
use crate::index::{build_corpus_index, encode_index_entry, CorpusIndex};
use crate::retrieval::{retrieve_videos, QueryVectors};
use crate::{EngineError, Result};

/// Wall-clock results for one retrieval mode.
#[derive(Debug, Clone, Serialize)]
pub struct ModeTiming {
    pub total_seconds: f64,
    pub mean_seconds_per_query: f64,
}

/// Outcome of the precomputed-vs-re-encode benchmark.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub queries: usize,
    pub videos: usize,
    pub k: usize,
    pub precomputed: ModeTiming,
    pub reencode: ModeTiming,
    /// Re-encode seconds-per-query divided by precomputed seconds-per-query.
    pub speedup: f64,
    /// True when both modes returned byte-for-byte identical rankings.
    pub rankings_identical: bool,
}

fn timing(total_seconds: f64, queries: usize) -> ModeTiming {
    ModeTiming { total_seconds, mean_seconds_per_query: total_seconds / queries as f64 }
}

/// Runs both retrieval modes single-threaded over the same queries.
///
/// The precomputed mode encodes the corpus once and reuses the index for
/// every query; the re-encode mode runs the full video encoder for every
/// (query, video) pair. Rankings are compared for exact equality.
pub fn bench_retrieval(
    model: &Model<f32>,
    fingerprint: [u8; 32],
    videos: &[VideoRecord],
    queries: &[QueryVectors],
    k: usize,
) -> Result<BenchReport> {
    if queries.is_empty() || videos.is_empty() {
        return Err(EngineError::config("benchmark needs at least one query and one video"));
    }

    // --- precomputed mode: build the index once, then score from it.
    let start = Instant::now();
    let index = build_corpus_index(model, fingerprint, videos)?;
    let mut precomputed_rankings = Vec::with_capacity(queries.len());
    for q in queries {
        precomputed_rankings.push(retrieve_videos(q, &index, k)?);
    }
    let precomputed = timing(start.elapsed().as_secs_f64(), queries.len());

    // --- re-encode mode: run the video encoder fresh for every pair.
    let start = Instant::now();
    let mut reencode_rankings = Vec::with_capacity(queries.len());
    for q in queries {
        let mut entries = Vec::with_capacity(videos.len());
        for video in videos {
            entries.push(encode_index_entry(model, video)?);
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let fresh = CorpusIndex {
            d: index.d,
            subtitles: index.subtitles,
            fingerprint,
            entries,
        };
        reencode_rankings.push(retrieve_videos(q, &fresh, k)?);
    }
    let reencode = timing(start.elapsed().as_secs_f64(), queries.len());

    let rankings_identical = precomputed_rankings == reencode_rankings;
    let speedup = reencode.mean_seconds_per_query / precomputed.mean_seconds_per_query;
    Ok(BenchReport {
        queries: queries.len(),
        videos: videos.len(),
        k,
        precomputed,
        reencode,
        speedup,
        rankings_identical,
    })
}
