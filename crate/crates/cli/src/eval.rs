//! Split evaluation: run every query against an encoded corpus and score it.
//!
//! For each annotation the pipeline produces three views of the same model:
//! the full video ranking (VR), span predictions inside the gold video
//! (SVMR), and corpus-level moment predictions fused by δ (VCMR). Recalls are
//! computed at the standard cutoffs plus a dense IoU grid for curve plots.

use vcmr_engine::data::{Corpus, QueryAnnotation};
use vcmr_engine::index::CorpusIndex;
use vcmr_engine::retrieval::{
    encode_query_vectors, localize_moments, ml_frame_scores, retrieve_videos, vcmr_rank,
    Localizer, RankParams,
};
use vcmr_model::Model;

use crate::metrics::{
    recall_moment, recall_vr, EvalReport, GoldMoment, KRecall, MomentRecall, PredictedMoment,
    Task, CURVE_MUS, MOMENT_KS, REPORT_MUS, VR_KS,
};
use crate::{CliError, Result};

/// Retrieval-time settings; `k` is the first-stage video cutoff.
#[derive(Debug, Clone, Copy)]
pub struct EvalParams {
    pub k: usize,
    pub top_n: usize,
    pub l_max: usize,
    pub gamma: f64,
}

impl EvalParams {
    pub fn from_model(model_gamma: f64, top_k: usize, top_n: usize, l_max: usize) -> EvalParams {
        EvalParams { k: top_k, top_n, l_max, gamma: model_gamma }
    }
}

/// Per-query raw outputs, kept for metric computation and invariant checks.
pub struct QueryOutputs {
    pub query_id: String,
    pub gold: GoldMoment,
    /// Video ids ranked by φ, best first (the full corpus).
    pub vr_ranking: Vec<String>,
    /// Spans in the gold video ranked by joint boundary probability.
    pub svmr: Vec<PredictedMoment>,
    /// Corpus-level moments ranked by δ.
    pub vcmr: Vec<PredictedMoment>,
}

/// Runs the full pipeline for the annotations of one split.
///
/// The index must cover exactly the split's videos: retrieval quality is
/// defined against the split corpus, and a missing gold video is an error.
pub fn run_queries(
    model: &Model<f32>,
    index: &CorpusIndex,
    annotations: &[&QueryAnnotation],
    params: &EvalParams,
) -> Result<Vec<QueryOutputs>> {
    if annotations.is_empty() {
        return Err(CliError::data("no annotations to evaluate"));
    }
    let localizer = Localizer::from_model(model);
    let mut all = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let entry_idx = index
            .entries
            .binary_search_by(|e| e.id.as_str().cmp(ann.video_id.as_str()))
            .map_err(|_| {
                CliError::data(format!(
                    "gold video {} of query {} is not in the index",
                    ann.video_id, ann.query_id
                ))
            })?;
        let q_mask = vec![true; ann.word_feats.shape()[1]];
        let q = encode_query_vectors(model, &ann.word_feats, &q_mask)?;

        // VR: rank the whole split corpus.
        let ranking = retrieve_videos(&q, index, index.entries.len())?;
        let vr_ranking: Vec<String> =
            ranking.iter().map(|&(i, _)| index.entries[i].id.clone()).collect();

        // SVMR: localize inside the gold video, ranked deep enough for R@100.
        let gold_entry = &index.entries[entry_idx];
        let scores = ml_frame_scores(&q, gold_entry, index.d)?;
        let (p_start, p_end) = localizer.distributions(&scores, &gold_entry.mask)?;
        let depth = MOMENT_KS.iter().copied().max().unwrap_or(params.top_n);
        let svmr = localize_moments(&p_start, &p_end, &gold_entry.mask, depth, params.l_max)?
            .into_iter()
            .map(|((i_s, i_e), _)| PredictedMoment {
                video_id: ann.video_id.clone(),
                i_s,
                i_e,
            })
            .collect();

        // VCMR: two-stage retrieval over the split corpus.
        let rank_params = RankParams {
            k: params.k.min(index.entries.len()),
            top_n: params.top_n,
            l_max: params.l_max,
            gamma: params.gamma,
        };
        let vcmr = vcmr_rank(&q, index, &localizer, rank_params)?
            .into_iter()
            .map(|p| PredictedMoment { video_id: p.video_id, i_s: p.i_s, i_e: p.i_e })
            .collect();

        all.push(QueryOutputs {
            query_id: ann.query_id.clone(),
            gold: GoldMoment {
                video_id: ann.video_id.clone(),
                i_s: ann.i_s,
                i_e: ann.i_e,
            },
            vr_ranking,
            svmr,
            vcmr,
        });
    }
    Ok(all)
}

/// Aggregates per-query outputs into the standard report.
pub fn build_report(outputs: &[QueryOutputs], videos: usize) -> Result<EvalReport> {
    let rankings: Vec<Vec<String>> = outputs.iter().map(|o| o.vr_ranking.clone()).collect();
    let gold_videos: Vec<String> = outputs.iter().map(|o| o.gold.video_id.clone()).collect();
    let gold: Vec<GoldMoment> = outputs.iter().map(|o| o.gold.clone()).collect();
    let svmr_preds: Vec<Vec<PredictedMoment>> = outputs.iter().map(|o| o.svmr.clone()).collect();
    let vcmr_preds: Vec<Vec<PredictedMoment>> = outputs.iter().map(|o| o.vcmr.clone()).collect();

    let mut vr = Vec::new();
    for &k in VR_KS.iter() {
        vr.push(KRecall { k, recall: recall_vr(&rankings, &gold_videos, k)? });
    }
    let table = |preds: &[Vec<PredictedMoment>], task: Task, mus: &[f64]| -> Result<Vec<MomentRecall>> {
        let mut rows = Vec::new();
        for &k in MOMENT_KS.iter() {
            for &mu in mus {
                rows.push(MomentRecall { k, mu, recall: recall_moment(preds, &gold, k, mu, task)? });
            }
        }
        Ok(rows)
    };
    let report = EvalReport {
        queries: outputs.len(),
        videos,
        vr,
        svmr: table(&svmr_preds, Task::Svmr, &REPORT_MUS)?,
        vcmr: table(&vcmr_preds, Task::Vcmr, &REPORT_MUS)?,
        svmr_curves: table(&svmr_preds, Task::Svmr, &CURVE_MUS)?,
        vcmr_curves: table(&vcmr_preds, Task::Vcmr, &CURVE_MUS)?,
    };
    report.check_invariants()?;
    Ok(report)
}

/// Convenience wrapper: evaluate the given split ids end to end.
pub fn evaluate_split(
    model: &Model<f32>,
    index: &CorpusIndex,
    corpus: &Corpus,
    split_ids: &[String],
    params: &EvalParams,
) -> Result<EvalReport> {
    let annotations: Vec<&QueryAnnotation> = corpus
        .annotations_in(split_ids)
        .into_iter()
        .map(|i| &corpus.annotations[i])
        .collect();
    let outputs = run_queries(model, index, &annotations, params)?;
    build_report(&outputs, index.entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(gold_video: &str, top_video: &str, span: (usize, usize)) -> QueryOutputs {
        QueryOutputs {
            query_id: "q".into(),
            gold: GoldMoment { video_id: gold_video.into(), i_s: 2, i_e: 5 },
            vr_ranking: vec![top_video.to_string(), gold_video.to_string()],
            svmr: vec![PredictedMoment { video_id: gold_video.into(), i_s: span.0, i_e: span.1 }],
            vcmr: vec![PredictedMoment { video_id: top_video.into(), i_s: span.0, i_e: span.1 }],
        }
    }

    #[test]
    fn report_reflects_hand_built_outputs() {
        // Query 1: everything right. Query 2: wrong video first.
        let o1 = outputs("v1", "v1", (2, 5));
        let o2 = outputs("v2", "v9", (2, 5));
        let report = build_report(&[o1, o2], 2).unwrap();
        let vr1 = report.vr.iter().find(|r| r.k == 1).unwrap();
        assert!((vr1.recall - 0.5).abs() < 1e-12);
        let vcmr1 = report.vcmr.iter().find(|r| r.k == 1 && r.mu == 0.5).unwrap();
        assert!((vcmr1.recall - 0.5).abs() < 1e-12);
        let svmr1 = report.svmr.iter().find(|r| r.k == 1 && r.mu == 0.5).unwrap();
        assert!((svmr1.recall - 1.0).abs() < 1e-12);
        assert!((report.vcmr_r1_iou05() - 0.5).abs() < 1e-12);
        report.check_invariants().unwrap();
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        assert!(build_report(&[], 0).is_err());
    }
}
