//! The precomputed corpus index.
//!
//! Retrieval serves from per-video frame encodings computed once, offline.
//! Entries store the final cross-modal encodings H (one per stream) in
//! frame-major order so scoring walks contiguous memory, plus the SHA-256
//! fingerprint of the checkpoint that produced them — an index is unusable
//! with any other checkpoint.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use vcmr_model::{encode_video, Model, Session};
use vcmr_tensor::graph::Graph;
use vcmr_tensor::Tensor;

use crate::data::VideoRecord;
use crate::{EngineError, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"RLCI";
pub const INDEX_VERSION: u32 = 1;

/// One indexed video: final encodings for both streams, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub n_v: usize,
    pub mask: Vec<bool>,
    /// `h_v[f·d + r]` = dimension `r` of frame `f` (visual stream).
    pub h_v: Vec<f32>,
    /// Subtitle stream, same layout; present iff the index has subtitles.
    pub h_s: Option<Vec<f32>>,
}

impl IndexEntry {
    /// The `d` feature values of one frame.
    pub fn frame(&self, d: usize, f: usize) -> &[f32] {
        &self.h_v[f * d..(f + 1) * d]
    }

    pub fn frame_s(&self, d: usize, f: usize) -> Option<&[f32]> {
        self.h_s.as_ref().map(|h| &h[f * d..(f + 1) * d])
    }
}

/// An immutable retrieval index over one corpus and one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    pub d: usize,
    pub subtitles: bool,
    pub fingerprint: [u8; 32],
    /// Sorted by id ascending.
    pub entries: Vec<IndexEntry>,
}

/// SHA-256 of a checkpoint's serialized bytes.
pub fn checkpoint_fingerprint(checkpoint_bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(checkpoint_bytes).into()
}

/// Converts a `[d, n]` column-per-frame tensor to a frame-major buffer.
fn frame_major(t: &Tensor<f32>) -> Vec<f32> {
    let (d, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0f32; d * n];
    for r in 0..d {
        for f in 0..n {
            out[f * d + r] = t.data()[r * n + f];
        }
    }
    out
}

/// Encodes one video into the index layout using a fresh evaluation graph,
/// so the result is bit-identical to any later standalone re-encode.
pub fn encode_index_entry(model: &Model<f32>, video: &VideoRecord) -> Result<IndexEntry> {
    let mut g = Graph::eval();
    let mut s = Session::new(model, &mut g);
    let visual = s.g().constant(video.vis_feats.clone())?;
    let subtitle = match &video.sub_feats {
        Some(f) => Some(s.g().constant(f.clone())?),
        None => None,
    };
    let encoded = encode_video(&mut s, visual, subtitle, &video.mask)?;
    let h_v = s.value(encoded.h_v).clone();
    if !h_v.is_finite() {
        return Err(EngineError::data(format!(
            "video {} encoded to non-finite values",
            video.id
        )));
    }
    let h_s = match encoded.h_s {
        Some(v) => {
            let t = s.value(v).clone();
            if !t.is_finite() {
                return Err(EngineError::data(format!(
                    "video {} subtitle stream encoded to non-finite values",
                    video.id
                )));
            }
            Some(frame_major(&t))
        }
        None => None,
    };
    Ok(IndexEntry {
        id: video.id.clone(),
        n_v: video.n_v(),
        mask: video.mask.clone(),
        h_v: frame_major(&h_v),
        h_s,
    })
}

/// Builds an index over the whole corpus. Deterministic: entries are sorted
/// by id and each encoding runs in its own evaluation graph.
pub fn build_corpus_index(
    model: &Model<f32>,
    fingerprint: [u8; 32],
    videos: &[VideoRecord],
) -> Result<CorpusIndex> {
    let mut entries = Vec::with_capacity(videos.len());
    for video in videos {
        entries.push(encode_index_entry(model, video)?);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in entries.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(EngineError::data(format!(
                "duplicate video id {} in corpus",
                pair[0].id
            )));
        }
    }
    Ok(CorpusIndex {
        d: model.cfg.d,
        subtitles: model.cfg.subtitles,
        fingerprint,
        entries,
    })
}

impl CorpusIndex {
    /// Errors unless the index was built from the given checkpoint bytes.
    pub fn check_fingerprint(&self, checkpoint_bytes: &[u8]) -> Result<()> {
        if self.fingerprint != checkpoint_fingerprint(checkpoint_bytes) {
            return Err(EngineError::config(
                "index fingerprint does not match the checkpoint — rebuild the index",
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.push(u8::from(self.subtitles));
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            out.extend_from_slice(&(e.n_v as u32).to_le_bytes());
            out.extend(e.mask.iter().map(|&m| u8::from(m)));
            for x in &e.h_v {
                out.extend_from_slice(&x.to_le_bytes());
            }
            if let Some(h_s) = &e.h_s {
                for x in h_s {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<CorpusIndex> {
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *at + n > bytes.len() {
                return Err(EngineError::data(format!(
                    "{file}: truncated while reading {what} at offset {at}"
                )));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let u32_at = |at: &mut usize, what: &str| -> Result<u32> {
            Ok(u32::from_le_bytes(take(at, 4, what)?.try_into().unwrap()))
        };

        if take(&mut at, 4, "magic")? != INDEX_MAGIC {
            return Err(EngineError::data(format!("{file}: bad magic")));
        }
        let version = u32_at(&mut at, "version")?;
        if version != INDEX_VERSION {
            return Err(EngineError::data(format!(
                "{file}: unsupported version {version} (expected {INDEX_VERSION})"
            )));
        }
        let fingerprint: [u8; 32] = take(&mut at, 32, "fingerprint")?.try_into().unwrap();
        let d = u32_at(&mut at, "dimension")? as usize;
        let subtitles = match take(&mut at, 1, "subtitle flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(EngineError::data(format!("{file}: bad subtitle flag {b}"))),
        };
        let count = u32_at(&mut at, "entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = u32_at(&mut at, "id length")? as usize;
            let id = String::from_utf8(take(&mut at, id_len, "id")?.to_vec())
                .map_err(|_| EngineError::data(format!("{file}: entry id is not UTF-8")))?;
            let n_v = u32_at(&mut at, "frame count")? as usize;
            let mask: Vec<bool> = take(&mut at, n_v, "mask")?.iter().map(|&b| b != 0).collect();
            let read_h = |at: &mut usize, what: &str| -> Result<Vec<f32>> {
                let raw = take(at, 4 * n_v * d, what)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let h_v = read_h(&mut at, "visual payload")?;
            let h_s = if subtitles {
                Some(read_h(&mut at, "subtitle payload")?)
            } else {
                None
            };
            entries.push(IndexEntry { id, n_v, mask, h_v, h_s });
        }
        if at != bytes.len() {
            return Err(EngineError::data(format!(
                "{file}: {} trailing bytes after the last entry",
                bytes.len() - at
            )));
        }
        Ok(CorpusIndex { d, subtitles, fingerprint, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusIndex> {
        let bytes = fs::read(path)
            .map_err(|e| EngineError::data(format!("{}: {e}", path.display())))?;
        CorpusIndex::from_bytes(&bytes, &path.display().to_string())
    }
}
