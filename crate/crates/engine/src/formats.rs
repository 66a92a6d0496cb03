//! On-disk corpus formats.
//!
//! * Feature files (`.rlcf`): magic `RLCF`, version, role byte, dimensions,
//!   then length-prefixed records of little-endian `f32` frames.
//! * Annotations: JSON lines, one object per (query, moment) pair.
//! * Splits: a single JSON object with `train`/`val` id arrays.
//!
//! All readers are strict: wrong magic, wrong version, an unexpected role,
//! or a truncated payload fail with an error naming the offending file, and
//! never yield a partial record.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use vcmr_tensor::Tensor;

use crate::data::{Corpus, QueryAnnotation, Splits, VideoRecord};
use crate::{EngineError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"RLCF";
pub const FEATURE_VERSION: u32 = 1;
pub const VISUAL_FILE: &str = "visual.rlcf";
pub const SUBTITLE_FILE: &str = "subtitle.rlcf";
pub const QUERY_FILE: &str = "queries.rlcf";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

/// What a feature file holds; stored as one byte after the version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    Video = 0,
    Subtitle = 1,
    Query = 2,
}

impl FeatureRole {
    fn from_byte(b: u8) -> Option<FeatureRole> {
        match b {
            0 => Some(FeatureRole::Video),
            1 => Some(FeatureRole::Subtitle),
            2 => Some(FeatureRole::Query),
            _ => None,
        }
    }

    /// Only top-level video records carry a duration.
    fn has_duration(self) -> bool {
        self == FeatureRole::Video
    }
}

/// One sequence of per-frame (or per-word) feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// Present exactly when the role is [`FeatureRole::Video`].
    pub duration: Option<f64>,
    /// `[feat_dim, n]`, one column per frame/word.
    pub feats: Tensor<f32>,
}

impl FeatureRecord {
    pub fn len(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------- encoding

/// Serializes feature records. `feat_dim` must match every record even when
/// the record list is empty (readers need the dimension).
pub fn feature_bytes(role: FeatureRole, feat_dim: usize, records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let max_len = records.iter().map(FeatureRecord::len).max().unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(role as u8);
    out.extend_from_slice(&u32::try_from(feat_dim).unwrap().to_le_bytes());
    out.extend_from_slice(&u32::try_from(max_len).unwrap().to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).unwrap().to_le_bytes());
    for rec in records {
        if rec.feats.shape()[0] != feat_dim {
            return Err(EngineError::data(format!(
                "record {} has feature dimension {}, file says {feat_dim}",
                rec.id,
                rec.feats.shape()[0]
            )));
        }
        if rec.duration.is_some() != role.has_duration() {
            return Err(EngineError::data(format!(
                "record {} duration presence does not match role {role:?}",
                rec.id
            )));
        }
        let n = rec.len();
        out.extend_from_slice(&u32::try_from(rec.id.len()).unwrap().to_le_bytes());
        out.extend_from_slice(rec.id.as_bytes());
        out.extend_from_slice(&u32::try_from(n).unwrap().to_le_bytes());
        if let Some(duration) = rec.duration {
            out.extend_from_slice(&(duration as f32).to_le_bytes());
        }
        // Frame-major payload: frame index outer, feature dimension inner.
        for frame in 0..n {
            for dim in 0..feat_dim {
                out.extend_from_slice(&rec.feats.data()[dim * n + frame].to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    file: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(EngineError::data(format!(
                "{}: truncated while reading {what} at offset {}",
                self.file, self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a feature file, checking magic, version, and the expected role.
pub fn parse_feature_bytes(
    bytes: &[u8],
    expect_role: FeatureRole,
    file: &str,
) -> Result<Vec<FeatureRecord>> {
    let mut cur = Cursor { bytes, at: 0, file };
    let magic = cur.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(EngineError::data(format!("{file}: bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(EngineError::data(format!(
            "{file}: unsupported version {version} (expected {FEATURE_VERSION})"
        )));
    }
    let role_byte = cur.take(1, "role")?[0];
    let role = FeatureRole::from_byte(role_byte)
        .ok_or_else(|| EngineError::data(format!("{file}: unknown role byte {role_byte}")))?;
    if role != expect_role {
        return Err(EngineError::data(format!(
            "{file}: role {role:?} where {expect_role:?} was expected"
        )));
    }
    let feat_dim = cur.u32("feature dimension")? as usize;
    let _max_len = cur.u32("max length")?;
    let count = cur.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = cur.u32("id length")? as usize;
        let id = String::from_utf8(cur.take(id_len, "id")?.to_vec())
            .map_err(|_| EngineError::data(format!("{file}: record id is not UTF-8")))?;
        let n = cur.u32("sequence length")? as usize;
        let duration = if role.has_duration() {
            Some(cur.f32("duration")? as f64)
        } else {
            None
        };
        let mut data = vec![0.0f32; feat_dim * n];
        for frame in 0..n {
            for dim in 0..feat_dim {
                data[dim * n + frame] = cur.f32("feature payload")?;
            }
        }
        records.push(FeatureRecord {
            id,
            duration,
            feats: Tensor::from_vec(&[feat_dim, n], data)?,
        });
    }
    if cur.at != bytes.len() {
        return Err(EngineError::data(format!(
            "{file}: {} trailing bytes after the last record",
            bytes.len() - cur.at
        )));
    }
    Ok(records)
}

pub fn write_feature_file(
    path: &Path,
    role: FeatureRole,
    feat_dim: usize,
    records: &[FeatureRecord],
) -> Result<()> {
    let bytes = feature_bytes(role, feat_dim, records)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_feature_file(path: &Path, expect_role: FeatureRole) -> Result<Vec<FeatureRecord>> {
    let bytes = fs::read(path)
        .map_err(|e| EngineError::data(format!("{}: {e}", path.display())))?;
    parse_feature_bytes(&bytes, expect_role, &path.display().to_string())
}

// ------------------------------------------------------------- annotations

/// The JSON-lines row for one annotation; word features live in the query
/// feature file under `query_id`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnotationRow {
    pub query_id: String,
    pub video_id: String,
    pub tau_s: f64,
    pub tau_e: f64,
    pub i_s: usize,
    pub i_e: usize,
    pub n_q: usize,
}

pub fn annotation_lines(annotations: &[QueryAnnotation]) -> Result<String> {
    let mut out = String::new();
    for ann in annotations {
        let row = AnnotationRow {
            query_id: ann.query_id.clone(),
            video_id: ann.video_id.clone(),
            tau_s: ann.tau_s,
            tau_e: ann.tau_e,
            i_s: ann.i_s,
            i_e: ann.i_e,
            n_q: ann.n_q(),
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_annotation_lines(text: &str, file: &str) -> Result<Vec<AnnotationRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(line).map_err(|e| {
            EngineError::data(format!("{file}:{}: {e}", lineno + 1))
        })?;
        if row.i_s > row.i_e {
            return Err(EngineError::data(format!(
                "{file}:{}: span ({}, {}) has i_s > i_e",
                lineno + 1,
                row.i_s,
                row.i_e
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

// ------------------------------------------------------------ corpus on disk

/// Writes a corpus as a directory of feature files plus annotation and split
/// metadata.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let d_v = corpus.videos.first().map_or(0, |v| v.vis_feats.shape()[0]);
    let visual: Vec<FeatureRecord> = corpus
        .videos
        .iter()
        .map(|v| FeatureRecord {
            id: v.id.clone(),
            duration: Some(v.duration),
            feats: v.vis_feats.clone(),
        })
        .collect();
    write_feature_file(&dir.join(VISUAL_FILE), FeatureRole::Video, d_v, &visual)?;

    if corpus.has_subtitles() {
        let d_w = corpus.videos[0].sub_feats.as_ref().unwrap().shape()[0];
        let subs: Vec<FeatureRecord> = corpus
            .videos
            .iter()
            .map(|v| {
                let feats = v.sub_feats.clone().ok_or_else(|| {
                    EngineError::data(format!("video {} is missing subtitle features", v.id))
                })?;
                Ok(FeatureRecord { id: v.id.clone(), duration: None, feats })
            })
            .collect::<Result<_>>()?;
        write_feature_file(&dir.join(SUBTITLE_FILE), FeatureRole::Subtitle, d_w, &subs)?;
    }

    let d_w_q = corpus
        .annotations
        .first()
        .map_or(0, |a| a.word_feats.shape()[0]);
    let queries: Vec<FeatureRecord> = corpus
        .annotations
        .iter()
        .map(|a| FeatureRecord {
            id: a.query_id.clone(),
            duration: None,
            feats: a.word_feats.clone(),
        })
        .collect();
    write_feature_file(&dir.join(QUERY_FILE), FeatureRole::Query, d_w_q, &queries)?;

    fs::write(dir.join(ANNOTATIONS_FILE), annotation_lines(&corpus.annotations)?)?;
    let splits_json = serde_json::to_string_pretty(&corpus.splits)?;
    fs::write(dir.join(SPLITS_FILE), splits_json)?;
    Ok(())
}

/// Loads a corpus directory, cross-checking annotations against both feature
/// files.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let visual = read_feature_file(&dir.join(VISUAL_FILE), FeatureRole::Video)?;
    let sub_path = dir.join(SUBTITLE_FILE);
    let subtitles = if sub_path.exists() {
        Some(read_feature_file(&sub_path, FeatureRole::Subtitle)?)
    } else {
        None
    };
    let queries = read_feature_file(&dir.join(QUERY_FILE), FeatureRole::Query)?;

    let ann_path = dir.join(ANNOTATIONS_FILE);
    let ann_text = fs::read_to_string(&ann_path)
        .map_err(|e| EngineError::data(format!("{}: {e}", ann_path.display())))?;
    let rows = parse_annotation_lines(&ann_text, &ann_path.display().to_string())?;

    let splits_path = dir.join(SPLITS_FILE);
    let splits_text = fs::read_to_string(&splits_path)
        .map_err(|e| EngineError::data(format!("{}: {e}", splits_path.display())))?;
    let splits: Splits = serde_json::from_str(&splits_text)
        .map_err(|e| EngineError::data(format!("{}: {e}", splits_path.display())))?;

    let mut videos = Vec::with_capacity(visual.len());
    for (vi, rec) in visual.into_iter().enumerate() {
        let n_v = rec.len();
        let sub_feats = match &subtitles {
            Some(subs) => {
                let sub = subs.get(vi).ok_or_else(|| {
                    EngineError::data(format!("subtitle file has no record for {}", rec.id))
                })?;
                if sub.id != rec.id || sub.len() != n_v {
                    return Err(EngineError::data(format!(
                        "subtitle record {} ({} frames) does not match video {} ({} frames)",
                        sub.id,
                        sub.len(),
                        rec.id,
                        n_v
                    )));
                }
                Some(sub.feats.clone())
            }
            None => None,
        };
        videos.push(VideoRecord {
            id: rec.id,
            duration: rec.duration.expect("video role always has a duration"),
            vis_feats: rec.feats,
            sub_feats,
            mask: vec![true; n_v],
        });
    }

    let mut annotations = Vec::with_capacity(rows.len());
    for (row, query) in rows.iter().zip(&queries) {
        if query.id != row.query_id {
            return Err(EngineError::data(format!(
                "annotation order mismatch: row {} vs feature record {}",
                row.query_id, query.id
            )));
        }
        if query.len() != row.n_q {
            return Err(EngineError::data(format!(
                "query {} has {} words on disk but annotation says {}",
                row.query_id,
                query.len(),
                row.n_q
            )));
        }
        let video = videos
            .iter()
            .find(|v| v.id == row.video_id)
            .ok_or_else(|| {
                EngineError::data(format!(
                    "annotation {} references unknown video {}",
                    row.query_id, row.video_id
                ))
            })?;
        if row.i_e >= video.n_v() {
            return Err(EngineError::data(format!(
                "annotation {} span ({}, {}) exceeds video length {}",
                row.query_id,
                row.i_s,
                row.i_e,
                video.n_v()
            )));
        }
        annotations.push(QueryAnnotation {
            query_id: row.query_id.clone(),
            video_id: row.video_id.clone(),
            word_feats: query.feats.clone(),
            tau_s: row.tau_s,
            tau_e: row.tau_e,
            i_s: row.i_s,
            i_e: row.i_e,
        });
    }
    if annotations.len() != queries.len() {
        return Err(EngineError::data(format!(
            "{} annotations but {} query feature records",
            annotations.len(),
            queries.len()
        )));
    }

    Ok(Corpus { videos, annotations, splits })
}

// ------------------------------------------------------------------- tests

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, dim: usize, n: usize, fill: f32, duration: Option<f64>) -> FeatureRecord {
        let data: Vec<f32> = (0..dim * n).map(|i| fill + i as f32).collect();
        FeatureRecord {
            id: id.into(),
            duration,
            feats: Tensor::from_vec(&[dim, n], data).unwrap(),
        }
    }

    #[test]
    fn feature_round_trip_is_byte_identical() {
        let recs = vec![
            record("vid_0000", 3, 4, 0.5, Some(12.5)),
            record("vid_0001", 3, 2, -7.0, Some(3.25)),
        ];
        let bytes = feature_bytes(FeatureRole::Video, 3, &recs).unwrap();
        let parsed = parse_feature_bytes(&bytes, FeatureRole::Video, "mem").unwrap();
        assert_eq!(parsed, recs);
        let again = feature_bytes(FeatureRole::Video, 3, &parsed).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn empty_file_round_trips() {
        let bytes = feature_bytes(FeatureRole::Query, 5, &[]).unwrap();
        let parsed = parse_feature_bytes(&bytes, FeatureRole::Query, "mem").unwrap();
        assert!(parsed.is_empty());
    }

    #[test]
    fn reader_rejects_bad_headers_and_truncation() {
        let recs = vec![record("q", 2, 3, 1.0, None)];
        let bytes = feature_bytes(FeatureRole::Query, 2, &recs).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(parse_feature_bytes(&bad_magic, FeatureRole::Query, "mem").is_err());

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(parse_feature_bytes(&bad_version, FeatureRole::Query, "mem").is_err());

        // Role mismatch: a query file read as video features.
        assert!(parse_feature_bytes(&bytes, FeatureRole::Video, "mem").is_err());

        // Any truncation point must fail loudly, never return partial data.
        for cut in 0..bytes.len() {
            assert!(
                parse_feature_bytes(&bytes[..cut], FeatureRole::Query, "mem").is_err(),
                "truncation at {cut} went unnoticed"
            );
        }

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(parse_feature_bytes(&trailing, FeatureRole::Query, "mem").is_err());
    }

    #[test]
    fn duration_presence_is_tied_to_role() {
        let with = vec![record("a", 2, 1, 0.0, Some(1.0))];
        let without = vec![record("a", 2, 1, 0.0, None)];
        assert!(feature_bytes(FeatureRole::Query, 2, &with).is_err());
        assert!(feature_bytes(FeatureRole::Video, 2, &without).is_err());
    }

    #[test]
    fn annotation_lines_round_trip() {
        let generated =
            crate::data::generate_synthetic_corpus(&crate::data::SyntheticSpec {
                m: 4,
                n_v: (8, 10),
                n_q: (3, 5),
                d_v: 24,
                d_w: 16,
                latent_dim: 24,
                signal_strength: 0.9,
                moments_per_video: (1, 2),
                seed: 2,
                ..Default::default()
            })
            .unwrap();
        let text = annotation_lines(&generated.corpus.annotations).unwrap();
        let rows = parse_annotation_lines(&text, "mem").unwrap();
        assert_eq!(rows.len(), generated.corpus.annotations.len());
        for (row, ann) in rows.iter().zip(&generated.corpus.annotations) {
            assert_eq!(row.query_id, ann.query_id);
            assert_eq!(row.video_id, ann.video_id);
            assert_eq!(row.tau_s, ann.tau_s);
            assert_eq!((row.i_s, row.i_e), (ann.i_s, ann.i_e));
            assert_eq!(row.n_q, ann.n_q());
        }
        // Empty text is an empty set, not an error.
        assert!(parse_annotation_lines("", "mem").unwrap().is_empty());
        // Bad JSON names the line.
        let err = parse_annotation_lines("not json\n", "mem").unwrap_err();
        assert!(err.to_string().contains("mem:1"));
        // Inverted span is rejected.
        let bad = r#"{"query_id":"q","video_id":"v","tau_s":0.0,"tau_e":1.0,"i_s":3,"i_e":1,"n_q":2}"#;
        assert!(parse_annotation_lines(bad, "mem").is_err());
    }

    #[test]
    fn corpus_directory_round_trip() {
        let generated =
            crate::data::generate_synthetic_corpus(&crate::data::SyntheticSpec {
                m: 5,
                n_v: (6, 9),
                n_q: (3, 4),
                d_v: 20,
                d_w: 12,
                latent_dim: 24,
                signal_strength: 0.9,
                moments_per_video: (1, 2),
                seed: 5,
                ..Default::default()
            })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &generated.corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        // Durations pass through an f32 on disk; compare everything else
        // exactly and durations at f32 precision.
        assert_eq!(loaded.videos.len(), generated.corpus.videos.len());
        for (a, b) in loaded.videos.iter().zip(&generated.corpus.videos) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.vis_feats, b.vis_feats);
            assert_eq!(a.sub_feats, b.sub_feats);
            assert_eq!(a.duration as f32, b.duration as f32);
        }
        assert_eq!(loaded.splits, generated.corpus.splits);
        assert_eq!(loaded.annotations.len(), generated.corpus.annotations.len());
        for (a, b) in loaded.annotations.iter().zip(&generated.corpus.annotations) {
            assert_eq!(a.query_id, b.query_id);
            assert_eq!(a.word_feats, b.word_feats);
            assert_eq!((a.i_s, a.i_e), (b.i_s, b.i_e));
        }
        // Saving the loaded corpus reproduces identical files.
        let dir2 = tempfile::tempdir().unwrap();
        save_corpus(dir2.path(), &loaded).unwrap();
        for name in [VISUAL_FILE, SUBTITLE_FILE, QUERY_FILE, ANNOTATIONS_FILE, SPLITS_FILE] {
            let x = std::fs::read(dir.path().join(name)).unwrap();
            let y = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs after a round trip");
        }
    }
}
