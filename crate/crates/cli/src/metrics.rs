//! Retrieval and localization quality metrics.
//!
//! Recall definitions follow the usual corpus-moment-retrieval conventions:
//! VR Recall@k asks whether the gold video appears in a query's top-k video
//! ranking; the moment recalls ask whether any of the top-k predicted spans
//! overlaps the gold span with temporal IoU strictly above a threshold μ —
//! within the gold video for SVMR, and with the video identity also required
//! to match for VCMR.

use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

// ------------------------------------------------------------------- IoU

/// Temporal IoU of two index spans, treated as half-open intervals
/// `[i_s, i_e + 1)` so adjacent spans do not overlap.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let (a0, a1) = (a.0 as f64, a.1 as f64 + 1.0);
    let (b0, b1) = (b.0 as f64, b.1 as f64 + 1.0);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    inter / union
}

// --------------------------------------------------------------- recalls

/// Fraction of queries whose gold video id appears in their top-k ranking.
pub fn recall_vr(rankings: &[Vec<String>], gold: &[String], k: usize) -> Result<f64> {
    if rankings.len() != gold.len() {
        return Err(CliError::data(format!(
            "{} rankings for {} queries",
            rankings.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(CliError::data("recall over zero queries is undefined"));
    }
    let hits = rankings
        .iter()
        .zip(gold)
        .filter(|(ranking, g)| ranking.iter().take(k).any(|id| id == *g))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Which identity constraint a moment hit must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Single-video: the gold video is given, so only the span is judged.
    Svmr,
    /// Corpus-level: the predicted video must also be the gold video.
    Vcmr,
}

/// One ranked span prediction, already ordered best-first per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMoment {
    pub video_id: String,
    pub i_s: usize,
    pub i_e: usize,
}

/// A query's gold moment.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldMoment {
    pub video_id: String,
    pub i_s: usize,
    pub i_e: usize,
}

/// Fraction of queries with at least one top-k prediction whose IoU with the
/// gold span strictly exceeds `mu` (and whose video matches, for VCMR).
pub fn recall_moment(
    predictions: &[Vec<PredictedMoment>],
    gold: &[GoldMoment],
    k: usize,
    mu: f64,
    task: Task,
) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(CliError::data(format!(
            "{} prediction lists for {} queries",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(CliError::data("recall over zero queries is undefined"));
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(preds, g)| {
            preds.iter().take(k).any(|p| {
                let video_ok = match task {
                    Task::Svmr => true,
                    Task::Vcmr => p.video_id == g.video_id,
                };
                video_ok && temporal_iou((p.i_s, p.i_e), (g.i_s, g.i_e)) > mu
            })
        })
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

// ---------------------------------------------------------------- report

/// Ranking cutoffs reported for the video-retrieval subtask.
pub const VR_KS: [usize; 4] = [1, 5, 10, 100];
/// Ranking cutoffs reported for the moment tasks.
pub const MOMENT_KS: [usize; 3] = [1, 10, 100];
/// Headline IoU thresholds.
pub const REPORT_MUS: [f64; 2] = [0.5, 0.7];
/// Dense μ grid for recall-vs-threshold curves.
pub const CURVE_MUS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRecall {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRecall {
    pub k: usize,
    pub mu: f64,
    pub recall: f64,
}

/// Full evaluation summary for one corpus split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub videos: usize,
    /// VR Recall@k for k ∈ {1, 5, 10, 100}.
    pub vr: Vec<KRecall>,
    /// SVMR Recall@k at the headline IoU thresholds.
    pub svmr: Vec<MomentRecall>,
    /// VCMR Recall@k at the headline IoU thresholds.
    pub vcmr: Vec<MomentRecall>,
    /// Dense (k, μ, recall) curves for threshold-sweep plots.
    pub svmr_curves: Vec<MomentRecall>,
    pub vcmr_curves: Vec<MomentRecall>,
}

impl EvalReport {
    /// The early-stopping / model-selection metric.
    pub fn vcmr_r1_iou05(&self) -> f64 {
        self.vcmr
            .iter()
            .find(|r| r.k == 1 && r.mu == 0.5)
            .map(|r| r.recall)
            .unwrap_or(0.0)
    }

    /// Validates the report's structural invariants: all recalls in [0, 1],
    /// non-decreasing in k at fixed μ, non-increasing in μ at fixed k.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |detail: String| Err(CliError::Data { detail });
        let in_range = |r: f64| (0.0..=1.0).contains(&r);
        if !self.vr.iter().all(|e| in_range(e.recall)) {
            return bad("VR recall out of [0,1]".into());
        }
        for w in self.vr.windows(2) {
            if w[1].k > w[0].k && w[1].recall < w[0].recall {
                return bad(format!("VR recall decreased from k={} to k={}", w[0].k, w[1].k));
            }
        }
        for (name, table) in [
            ("SVMR", &self.svmr),
            ("VCMR", &self.vcmr),
            ("SVMR curve", &self.svmr_curves),
            ("VCMR curve", &self.vcmr_curves),
        ] {
            if !table.iter().all(|e| in_range(e.recall)) {
                return bad(format!("{name} recall out of [0,1]"));
            }
            for a in table.iter() {
                for b in table.iter() {
                    if a.k == b.k && b.mu > a.mu && b.recall > a.recall + 1e-12 {
                        return bad(format!(
                            "{name} recall increased in μ at k={}: {}@{} vs {}@{}",
                            a.k, a.recall, a.mu, b.recall, b.mu
                        ));
                    }
                    if (a.mu - b.mu).abs() < 1e-12 && b.k > a.k && b.recall < a.recall - 1e-12 {
                        return bad(format!(
                            "{name} recall decreased in k at μ={}: {}@{} vs {}@{}",
                            a.mu, a.recall, a.k, b.recall, b.k
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV rendering of the threshold-sweep curves: `task,k,mu,recall`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("task,k,mu,recall\n");
        for (task, table) in [("svmr", &self.svmr_curves), ("vcmr", &self.vcmr_curves)] {
            for row in table.iter() {
                out.push_str(&format!("{task},{},{},{}\n", row.k, row.mu, row.recall));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_disjoint_and_partial() {
        assert_eq!(temporal_iou((3, 7), (3, 7)), 1.0);
        assert_eq!(temporal_iou((0, 1), (5, 9)), 0.0);
        // [2,6) vs [4,8): intersection 2, union 6.
        let iou = temporal_iou((2, 5), (4, 7));
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
        // Adjacent half-open bins do not overlap.
        assert_eq!(temporal_iou((0, 2), (3, 5)), 0.0);
        // Symmetry.
        assert_eq!(temporal_iou((2, 5), (4, 7)), temporal_iou((4, 7), (2, 5)));
        // Single-index spans.
        assert_eq!(temporal_iou((4, 4), (4, 4)), 1.0);
        assert!((temporal_iou((4, 4), (4, 5)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vr_recall_counts_ranks() {
        // Gold ranks 1, 4, 12 across three queries.
        let mk = |gold_rank: usize| -> Vec<String> {
            (0..12)
                .map(|i| {
                    if i + 1 == gold_rank {
                        "gold".to_string()
                    } else {
                        format!("other_{i}")
                    }
                })
                .collect()
        };
        let rankings = vec![mk(1), mk(4), mk(12)];
        let gold = vec!["gold".to_string(); 3];
        assert!((recall_vr(&rankings, &gold, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((recall_vr(&rankings, &gold, 5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((recall_vr(&rankings, &gold, 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((recall_vr(&rankings, &gold, 100).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vr_recall_boundary_cases() {
        let gold = vec!["a".to_string(), "b".to_string()];
        let always_first = vec![vec!["a".to_string()], vec!["b".to_string()]];
        assert_eq!(recall_vr(&always_first, &gold, 1).unwrap(), 1.0);
        let never = vec![vec!["x".to_string()], vec!["y".to_string()]];
        assert_eq!(recall_vr(&never, &gold, 10).unwrap(), 0.0);
        // Mismatched lengths are a data error, as is an empty query set.
        assert!(recall_vr(&never, &gold[..1], 1).is_err());
        assert!(recall_vr(&[], &[], 1).is_err());
    }

    #[test]
    fn moment_recall_applies_video_constraint_by_task() {
        let gold = vec![GoldMoment { video_id: "v1".into(), i_s: 2, i_e: 5 }];
        let right_span_wrong_video =
            vec![vec![PredictedMoment { video_id: "v2".into(), i_s: 2, i_e: 5 }]];
        assert_eq!(
            recall_moment(&right_span_wrong_video, &gold, 1, 0.5, Task::Vcmr).unwrap(),
            0.0
        );
        assert_eq!(
            recall_moment(&right_span_wrong_video, &gold, 1, 0.5, Task::Svmr).unwrap(),
            1.0
        );
        let exact = vec![vec![PredictedMoment { video_id: "v1".into(), i_s: 2, i_e: 5 }]];
        assert_eq!(recall_moment(&exact, &gold, 1, 0.99, Task::Vcmr).unwrap(), 1.0);
    }

    #[test]
    fn moment_recall_iou_threshold_is_strict() {
        // Prediction (2,5) vs gold (4,7) has IoU exactly 1/3.
        let gold = vec![GoldMoment { video_id: "v".into(), i_s: 4, i_e: 7 }];
        let preds = vec![vec![PredictedMoment { video_id: "v".into(), i_s: 2, i_e: 5 }]];
        let at_third = 1.0 / 3.0;
        assert_eq!(recall_moment(&preds, &gold, 1, at_third, Task::Svmr).unwrap(), 0.0);
        assert_eq!(
            recall_moment(&preds, &gold, 1, at_third - 1e-9, Task::Svmr).unwrap(),
            1.0
        );
    }

    #[test]
    fn moment_recall_respects_k() {
        let gold = vec![GoldMoment { video_id: "v".into(), i_s: 0, i_e: 1 }];
        let preds = vec![vec![
            PredictedMoment { video_id: "v".into(), i_s: 8, i_e: 9 },
            PredictedMoment { video_id: "v".into(), i_s: 0, i_e: 1 },
        ]];
        assert_eq!(recall_moment(&preds, &gold, 1, 0.5, Task::Svmr).unwrap(), 0.0);
        assert_eq!(recall_moment(&preds, &gold, 2, 0.5, Task::Svmr).unwrap(), 1.0);
    }

    #[test]
    fn report_invariants_catch_violations() {
        let ok = EvalReport {
            queries: 4,
            videos: 4,
            vr: vec![KRecall { k: 1, recall: 0.5 }, KRecall { k: 5, recall: 0.75 }],
            svmr: vec![
                MomentRecall { k: 1, mu: 0.5, recall: 0.6 },
                MomentRecall { k: 1, mu: 0.7, recall: 0.4 },
            ],
            vcmr: vec![],
            svmr_curves: vec![],
            vcmr_curves: vec![],
        };
        ok.check_invariants().unwrap();

        let mut bad_k = ok.clone();
        bad_k.vr = vec![KRecall { k: 1, recall: 0.8 }, KRecall { k: 5, recall: 0.5 }];
        assert!(bad_k.check_invariants().is_err());

        let mut bad_mu = ok.clone();
        bad_mu.svmr = vec![
            MomentRecall { k: 1, mu: 0.5, recall: 0.4 },
            MomentRecall { k: 1, mu: 0.7, recall: 0.6 },
        ];
        assert!(bad_mu.check_invariants().is_err());

        let mut out_of_range = ok;
        out_of_range.vr = vec![KRecall { k: 1, recall: 1.5 }];
        assert!(out_of_range.check_invariants().is_err());
    }

    #[test]
    fn curves_csv_shape() {
        let report = EvalReport {
            queries: 1,
            videos: 1,
            vr: vec![],
            svmr: vec![],
            vcmr: vec![],
            svmr_curves: vec![MomentRecall { k: 1, mu: 0.5, recall: 0.25 }],
            vcmr_curves: vec![MomentRecall { k: 10, mu: 0.7, recall: 0.125 }],
        };
        let csv = report.curves_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "task,k,mu,recall");
        assert_eq!(lines[1], "svmr,1,0.5,0.25");
        assert_eq!(lines[2], "vcmr,10,0.7,0.125");
    }
}
