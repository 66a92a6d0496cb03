//! The training loop: seeded, single-threaded, deterministic.
//!
//! Every epoch shuffles the training annotations, forms mini-batches with
//! in-batch negatives, builds one autodiff graph per step, and applies an
//! AdamW update. Validation runs on a schedule; the best checkpoint by
//! validation VCMR Recall@1 at IoU 0.5 is retained and restored at the end.
//! Log lines carry no timestamps so identical runs produce identical logs.

use std::collections::BTreeMap;

use serde::Serialize;
use vcmr_engine::data::Corpus;
use vcmr_engine::index::{build_corpus_index, checkpoint_fingerprint};
use vcmr_engine::make_batches;
use vcmr_model::{
    encode_query, encode_video, frame_cl_loss, ml_distributions, ml_loss, ml_scores, total_loss,
    video_cl_loss, vr_hinge_loss, vr_similarity, EncodedQuery, EncodedVideo, LossParts, Model,
    Session, StreamPairs,
};
use vcmr_tensor::{seed, AdamW, AdamWConfig, Graph, Scalar, Tensor, Var};

use crate::config::RunConfig;
use crate::eval::{evaluate_split, EvalParams};
use crate::{CliError, Result};

// ------------------------------------------------------------------ types

/// One epoch's log record. Serialized as a JSON line; field order is fixed.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ml: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video_cl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_cl: Option<f64>,
    /// Anchors whose retrieval hinge was skipped for lack of negatives.
    pub vr_skipped: usize,
    /// Frame-contrast terms whose background set was empty.
    pub frame_cl_degenerate: usize,
    /// Steps skipped entirely because no objective applied.
    pub steps_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_vcmr_r1_iou05: Option<f64>,
}

/// Result of a training run.
pub struct TrainOutcome {
    /// Model with the best-validation weights restored (final weights when
    /// validation never ran).
    pub model: Model<f32>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub epochs_run: usize,
    /// One JSON line per epoch, plus a final status line.
    pub log: Vec<String>,
    /// Diagnostic when training aborted on a non-finite loss.
    pub aborted: Option<String>,
}

// ------------------------------------------------------------ step output

struct StepStats {
    total: f64,
    vr: Option<f64>,
    ml: Option<f64>,
    video_cl: Option<f64>,
    frame_cl: Option<f64>,
    vr_skipped: usize,
    frame_cl_degenerate: usize,
    grads: Option<Vec<Tensor<f32>>>,
}

// ---------------------------------------------------------------- helpers

fn mean_of<T: Scalar>(s: &mut Session<T>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let sum = s.g().add_n(terms)?;
    Ok(Some(s.g().scale(sum, T::from_f64(1.0 / terms.len() as f64))?))
}

/// Checks that the corpus matches the model configuration before training.
fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    let m = &cfg.model;
    if corpus.has_subtitles() != m.subtitles {
        return Err(CliError::config(format!(
            "model expects subtitles={} but corpus has_subtitles={}",
            m.subtitles,
            corpus.has_subtitles()
        )));
    }
    for v in &corpus.videos {
        if v.vis_feats.shape()[0] != m.d_v {
            return Err(CliError::config(format!(
                "video {} has feature dim {}, model expects d_v={}",
                v.id,
                v.vis_feats.shape()[0],
                m.d_v
            )));
        }
        if v.n_v() > m.n_v_max {
            return Err(CliError::config(format!(
                "video {} has {} clip units, model supports n_v_max={}",
                v.id,
                v.n_v(),
                m.n_v_max
            )));
        }
    }
    for a in &corpus.annotations {
        if a.word_feats.shape()[0] != m.d_w {
            return Err(CliError::config(format!(
                "query {} has word dim {}, model expects d_w={}",
                a.query_id,
                a.word_feats.shape()[0],
                m.d_w
            )));
        }
        if a.n_q() > m.n_q_max {
            return Err(CliError::config(format!(
                "query {} has {} words, model supports n_q_max={}",
                a.query_id,
                a.n_q(),
                m.n_q_max
            )));
        }
    }
    Ok(())
}

// ----------------------------------------------------------- loss builder

/// The gated multi-task loss assembled over one batch, plus bookkeeping.
pub(crate) struct BatchLoss {
    pub parts: LossParts,
    /// Anchors whose retrieval hinge was skipped for lack of negatives.
    pub vr_skipped: usize,
    /// Frame-contrast terms whose background set was empty.
    pub frame_cl_degenerate: usize,
}

impl BatchLoss {
    /// True when no enabled objective produced a term for this batch.
    pub fn is_empty(&self) -> bool {
        self.parts.vr.is_none()
            && self.parts.ml.is_none()
            && self.parts.video_cl.is_none()
            && self.parts.frame_cl.is_none()
    }
}

/// Builds the full training loss for one batch inside an existing session.
///
/// Generic over the scalar so the trainer (f32) and the finite-difference
/// gradient checker (f64) construct exactly the same graph. Encoding order is
/// first-seen, so graph construction is deterministic for a fixed batch.
pub(crate) fn build_batch_loss<T: Scalar>(
    s: &mut Session<T>,
    cfg: &RunConfig,
    corpus: &Corpus,
    batch: &vcmr_engine::TrainingBatch,
) -> Result<BatchLoss> {
    // Encode each anchor's query, and each distinct video once.
    let mut queries: Vec<EncodedQuery> = Vec::with_capacity(batch.anchors.len());
    let mut video_slot: Vec<usize> = Vec::with_capacity(batch.anchors.len());
    let mut slot_by_id: BTreeMap<&str, usize> = BTreeMap::new();
    let mut videos: Vec<(EncodedVideo, &vcmr_engine::data::VideoRecord)> = Vec::new();

    for &a in &batch.anchors {
        let ann = &corpus.annotations[a];
        let words = s.g().constant(ann.word_feats.cast::<T>())?;
        let q_mask = vec![true; ann.n_q()];
        queries.push(encode_query(s, words, &q_mask)?);

        let slot = match slot_by_id.get(ann.video_id.as_str()) {
            Some(&slot) => slot,
            None => {
                let record = corpus
                    .video_index(&ann.video_id)
                    .map(|i| &corpus.videos[i])
                    .ok_or_else(|| {
                        CliError::data(format!("annotation references unknown video {}", ann.video_id))
                    })?;
                let vis = s.g().constant(record.vis_feats.cast::<T>())?;
                let sub = match &record.sub_feats {
                    Some(t) => Some(s.g().constant(t.cast::<T>())?),
                    None => None,
                };
                let encoded = encode_video(s, vis, sub, &record.mask)?;
                videos.push((encoded, record));
                let slot = videos.len() - 1;
                slot_by_id.insert(ann.video_id.as_str(), slot);
                slot
            }
        };
        video_slot.push(slot);
    }

    // φ(query a, video slot v), memoized across the hinge terms.
    let mut phi_cache: BTreeMap<(usize, usize), Var> = BTreeMap::new();
    let mut phi = |s: &mut Session<T>, qa: usize, vs: usize| -> Result<Var> {
        if let Some(&v) = phi_cache.get(&(qa, vs)) {
            return Ok(v);
        }
        let (video, record) = &videos[vs];
        let var = vr_similarity(s, &queries[qa], video, &record.mask)?;
        phi_cache.insert((qa, vs), var);
        Ok(var)
    };

    let mut vr_terms = Vec::new();
    let mut vr_skipped = 0usize;
    if cfg.gates.vr {
        for (a, &slot) in video_slot.iter().enumerate() {
            let q_negs = &batch.query_negatives[a];
            let v_negs = &batch.video_negatives[a];
            if q_negs.is_empty() || v_negs.is_empty() {
                vr_skipped += 1;
                continue;
            }
            let phi_pos = phi(s, a, slot)?;
            let mut neg_queries = Vec::with_capacity(q_negs.len());
            for &j in q_negs {
                neg_queries.push(phi(s, j, slot)?);
            }
            let mut neg_videos = Vec::with_capacity(v_negs.len());
            for &j in v_negs {
                neg_videos.push(phi(s, a, video_slot[j])?);
            }
            vr_terms.push(vr_hinge_loss(s, phi_pos, &neg_queries, &neg_videos, cfg.model.margin)?);
        }
    }

    let mut ml_terms = Vec::new();
    if cfg.gates.ml {
        for (a, &slot) in video_slot.iter().enumerate() {
            let ann = &corpus.annotations[batch.anchors[a]];
            let (video, record) = &videos[slot];
            let scores = ml_scores(s, &queries[a], video, &record.mask)?;
            let (p_start, p_end) = ml_distributions(s, scores, &record.mask)?;
            ml_terms.push(ml_loss(s, p_start, p_end, (ann.i_s, ann.i_e), &record.mask)?);
        }
    }

    let mut video_cl_term = None;
    if cfg.gates.video_cl && batch.len() >= 2 {
        let mut pooled_v: BTreeMap<usize, Var> = BTreeMap::new();
        let mut pooled_s: BTreeMap<usize, Var> = BTreeMap::new();
        for &slot in video_slot.iter() {
            if !pooled_v.contains_key(&slot) {
                let (video, record) = &videos[slot];
                let cv = vcmr_model::objectives::contrastive_video_vec(
                    s,
                    video.h_prime_v,
                    &record.mask,
                    false,
                )?;
                pooled_v.insert(slot, cv);
                if let Some(hps) = video.h_prime_s {
                    let cs =
                        vcmr_model::objectives::contrastive_video_vec(s, hps, &record.mask, true)?;
                    pooled_s.insert(slot, cs);
                }
            }
        }
        let q_v: Vec<Var> = queries.iter().map(|q| q.q_v).collect();
        let v_v: Vec<Var> = video_slot.iter().map(|slot| pooled_v[slot]).collect();
        let subtitle = if queries.iter().all(|q| q.q_s.is_some()) && pooled_s.len() == pooled_v.len()
        {
            Some((
                queries.iter().map(|q| q.q_s.expect("checked")).collect::<Vec<_>>(),
                video_slot.iter().map(|slot| pooled_s[slot]).collect::<Vec<_>>(),
            ))
        } else {
            None
        };
        let visual = StreamPairs { queries: &q_v, videos: &v_v };
        let sub_pairs = subtitle
            .as_ref()
            .map(|(q, v)| StreamPairs { queries: q, videos: v });
        video_cl_term = Some(video_cl_loss(s, visual, sub_pairs, &batch.positive)?);
    }

    let mut frame_cl_terms = Vec::new();
    let mut frame_cl_degenerate = 0usize;
    if cfg.gates.frame_cl {
        for (a, &slot) in video_slot.iter().enumerate() {
            let ann = &corpus.annotations[batch.anchors[a]];
            let (video, record) = &videos[slot];
            let (term, degenerate) =
                frame_cl_loss(s, &queries[a], video, (ann.i_s, ann.i_e), &record.mask)?;
            if degenerate {
                frame_cl_degenerate += 1;
            }
            frame_cl_terms.push(term);
        }
    }

    let parts = LossParts {
        vr: mean_of(s, &vr_terms)?,
        ml: mean_of(s, &ml_terms)?,
        video_cl: video_cl_term,
        frame_cl: mean_of(s, &frame_cl_terms)?,
    };
    Ok(BatchLoss { parts, vr_skipped, frame_cl_degenerate })
}

// ------------------------------------------------------------------- step

/// Builds one training graph over the batch and returns losses + gradients.
/// Returns `grads: None` when no enabled objective applied to this batch.
fn train_step(
    model: &Model<f32>,
    cfg: &RunConfig,
    corpus: &Corpus,
    batch: &vcmr_engine::TrainingBatch,
    dropout_seed: u64,
) -> Result<StepStats> {
    let mut g = Graph::train(dropout_seed);
    let mut s = Session::new(model, &mut g);
    let built = build_batch_loss(&mut s, cfg, corpus, batch)?;

    let part_value = |s: &Session<f32>, v: Option<Var>| v.map(|v| s.value(v).item() as f64);
    if built.is_empty() {
        return Ok(StepStats {
            total: 0.0,
            vr: None,
            ml: None,
            video_cl: None,
            frame_cl: None,
            vr_skipped: built.vr_skipped,
            frame_cl_degenerate: built.frame_cl_degenerate,
            grads: None,
        });
    }
    let total = total_loss(&mut s, &built.parts)?;
    let stats = StepStats {
        total: s.value(total).item() as f64,
        vr: part_value(&s, built.parts.vr),
        ml: part_value(&s, built.parts.ml),
        video_cl: part_value(&s, built.parts.video_cl),
        frame_cl: part_value(&s, built.parts.frame_cl),
        vr_skipped: built.vr_skipped,
        frame_cl_degenerate: built.frame_cl_degenerate,
        grads: None,
    };
    if !stats.total.is_finite() {
        // Caller turns this into an abort with diagnostics.
        return Ok(stats);
    }
    let grads = s.param_grads(total)?;
    Ok(StepStats { grads: Some(grads), ..stats })
}

// ------------------------------------------------------------------ train

/// Trains a model on the corpus's train split with validation-based early
/// stopping. Deterministic for a fixed config and corpus.
pub fn train(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;

    let train_ids = &corpus.splits.train;
    let val_ids = &corpus.splits.val;
    let in_split = |ids: &[String], video_id: &str| ids.iter().any(|id| id == video_id);
    let train_indices: Vec<usize> = corpus
        .annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| in_split(train_ids, &a.video_id))
        .map(|(i, _)| i)
        .collect();
    if train_indices.len() < 2 {
        return Err(CliError::config(format!(
            "train split has {} annotations; need ≥ 2 for in-batch negatives",
            train_indices.len()
        )));
    }
    let has_val = !val_ids.is_empty() && !corpus.annotations_in(val_ids).is_empty();

    let mut model: Model<f32> = Model::new(cfg.model.clone())
        .map_err(|e| CliError::Config { detail: e.to_string() })?;

    let batches_per_epoch = {
        let full = train_indices.len() / cfg.batch_size;
        let tail = train_indices.len() % cfg.batch_size;
        full + usize::from(tail >= 2)
    };
    if batches_per_epoch == 0 {
        return Err(CliError::config("batch size exceeds the training split"));
    }
    let mut optimizer: AdamW<f32> = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            warmup_proportion: cfg.warmup_proportion,
            total_steps: (cfg.epochs * batches_per_epoch) as u64,
        },
        &model.params.shapes(),
    )
    .map_err(|e| CliError::Config { detail: e.to_string() })?;

    let eval_params = EvalParams {
        k: cfg.model.top_k,
        top_n: cfg.top_n,
        l_max: cfg.l_max,
        gamma: cfg.model.gamma,
    };
    let val_videos: Vec<vcmr_engine::data::VideoRecord> = corpus
        .videos
        .iter()
        .filter(|v| in_split(val_ids, &v.id))
        .cloned()
        .collect();

    let mut log: Vec<String> = Vec::new();
    let mut best: Option<(f64, usize, Vec<u8>)> = None; // (metric, epoch, checkpoint)
    let mut bad_evals = 0usize;
    let mut step_counter = 0u64;
    let mut epochs_run = 0usize;
    let mut aborted: Option<String> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let batches = make_batches(
            &corpus.annotations,
            &train_indices,
            cfg.batch_size,
            cfg.model.n_neg,
            cfg.seed,
            epoch as u64,
        )
        .map_err(|e| CliError::Data { detail: e.to_string() })?;

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64); // total, vr, ml, vcl, fcl
        let mut counts = (0usize, 0usize, 0usize, 0usize, 0usize);
        let mut vr_skipped = 0usize;
        let mut frame_cl_degenerate = 0usize;
        let mut steps_skipped = 0usize;

        for batch in &batches {
            let dropout_seed = seed::derive(cfg.seed, "dropout", step_counter);
            let stats = train_step(&model, cfg, corpus, batch, dropout_seed)?;
            vr_skipped += stats.vr_skipped;
            frame_cl_degenerate += stats.frame_cl_degenerate;

            let Some(grads) = stats.grads else {
                if stats.total.is_finite() {
                    steps_skipped += 1;
                    continue;
                }
                aborted = Some(format!(
                    "non-finite loss at epoch {epoch} step {step_counter}; \
                     aborting with the last good checkpoint"
                ));
                break 'epochs;
            };
            optimizer
                .step(model.params.tensors_mut(), &grads)
                .map_err(|e| CliError::Config { detail: e.to_string() })?;
            step_counter += 1;

            sums.0 += stats.total;
            counts.0 += 1;
            if let Some(v) = stats.vr {
                sums.1 += v;
                counts.1 += 1;
            }
            if let Some(v) = stats.ml {
                sums.2 += v;
                counts.2 += 1;
            }
            if let Some(v) = stats.video_cl {
                sums.3 += v;
                counts.3 += 1;
            }
            if let Some(v) = stats.frame_cl {
                sums.4 += v;
                counts.4 += 1;
            }
        }
        epochs_run = epoch + 1;

        // Scheduled validation pass.
        let mut val_metric = None;
        if has_val && (epoch + 1) % cfg.eval_every == 0 {
            let bytes = model
                .to_checkpoint_bytes()
                .map_err(|e| CliError::Config { detail: e.to_string() })?;
            let fingerprint = checkpoint_fingerprint(&bytes);
            let index = build_corpus_index(&model, fingerprint, &val_videos)
                .map_err(|e| CliError::Data { detail: e.to_string() })?;
            let report = evaluate_split(&model, &index, corpus, val_ids, &eval_params)?;
            let metric = report.vcmr_r1_iou05();
            val_metric = Some(metric);
            let improved = best.as_ref().map(|(b, _, _)| metric > *b).unwrap_or(true);
            if improved {
                best = Some((metric, epoch, bytes));
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
        }

        let mean = |sum: f64, n: usize| if n > 0 { Some(sum / n as f64) } else { None };
        let entry = EpochLog {
            epoch,
            steps: counts.0,
            lr: optimizer.effective_lr(step_counter.max(1)),
            loss: mean(sums.0, counts.0).unwrap_or(0.0),
            vr: mean(sums.1, counts.1),
            ml: mean(sums.2, counts.2),
            video_cl: mean(sums.3, counts.3),
            frame_cl: mean(sums.4, counts.4),
            vr_skipped,
            frame_cl_degenerate,
            steps_skipped,
            val_vcmr_r1_iou05: val_metric,
        };
        log.push(serde_json::to_string(&entry)?);

        if has_val && bad_evals >= cfg.early_stop_patience {
            log.push(format!(
                "{{\"stopped\":\"early\",\"epoch\":{epoch},\"patience\":{}}}",
                cfg.early_stop_patience
            ));
            break;
        }
    }

    if let Some(msg) = &aborted {
        log.push(serde_json::to_string(&serde_json::json!({ "aborted": msg }))?);
    }

    // Restore the best validation checkpoint when one exists.
    let (best_epoch, best_val) = match &best {
        Some((metric, epoch, bytes)) => {
            model = Model::from_checkpoint_bytes(bytes)
                .map_err(|e| CliError::Config { detail: e.to_string() })?;
            (Some(*epoch), Some(*metric))
        }
        None => (None, None),
    };

    Ok(TrainOutcome { model, best_epoch, best_val, epochs_run, log, aborted })
}
