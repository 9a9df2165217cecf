//! Whole-night inference and IoU-matched scoring.
//!
//! Segments of length `T` slide across the night with stride `T/2`;
//! candidates above the classification threshold from all segments and
//! scales are pooled in absolute time and deduplicated with one final
//! per-class NMS. Scoring matches predictions to annotations greedily by
//! descending IoU and reports precision, recall and F1 per subject.

use crate::autodiff::{Graph, Tensor};
use crate::dsp::Recording;
use crate::edf::ScoredEvent;
use crate::model::{decode_loc, iou, CandidateEvent, Detector, Interval, ModelError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("recording is empty")]
    EmptyRecord,
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// non-maximum suppression
// ---------------------------------------------------------------------------

/// Greedy per-class NMS: sort by descending probability (ties: earlier
/// start first), keep the head, drop candidates overlapping a kept one
/// beyond `nms_iou`.
pub fn nms(candidates: &[CandidateEvent], nms_iou: f64) -> Vec<CandidateEvent> {
    let mut classes: Vec<u32> = candidates.iter().map(|c| c.class_k).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class_k in classes {
        let mut pool: Vec<&CandidateEvent> = candidates
            .iter()
            .filter(|c| c.class_k == class_k)
            .collect();
        pool.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then(a.start_s.total_cmp(&b.start_s))
        });
        let mut class_kept: Vec<CandidateEvent> = Vec::new();
        'next: for cand in pool {
            for k in &class_kept {
                if iou(cand.interval(), k.interval()).unwrap_or(0.0) > nms_iou {
                    continue 'next;
                }
            }
            class_kept.push(*cand);
        }
        kept.extend(class_kept);
    }
    kept.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.class_k.cmp(&b.class_k))
    });
    kept
}

// ---------------------------------------------------------------------------
// whole-night inference
// ---------------------------------------------------------------------------

/// Segment starts covering `[0, total)` with stride `T/2`; the final
/// segment is shifted left to end exactly at the record end.
fn segment_starts(total: usize, t: usize) -> Vec<usize> {
    let stride = (t / 2).max(1);
    let mut starts = Vec::new();
    let mut s = 0usize;
    while s + t <= total {
        starts.push(s);
        s += stride;
    }
    let last = total - t;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Inference batch size for whole-night scanning.
const SCAN_BATCH: usize = 8;

/// Detect events over an entire preprocessed recording. Candidates with
/// class probability strictly above `theta_clf` are kept, mapped to
/// absolute time, pooled over all segments and scales, and reduced with a
/// final NMS. Records shorter than one segment are extended by edge
/// reflection.
pub fn predict_record(
    det: &Detector<f32>,
    recording: &Recording,
    theta_clf: f64,
    nms_iou: f64,
) -> Result<Vec<CandidateEvent>, EvalError> {
    let t = det.config.segment_len;
    let c = det.config.channels;
    if recording.num_samples == 0 || recording.num_channels() != c {
        return Err(EvalError::EmptyRecord);
    }

    // reflect-pad short records to one full segment
    let padded: Recording;
    let rec = if recording.num_samples < t {
        let n = recording.num_samples;
        let mut channels = Vec::with_capacity(c * t);
        for ch in 0..c {
            let src = recording.channel(ch);
            let mut row = Vec::with_capacity(t);
            row.extend_from_slice(src);
            let mut i = n.saturating_sub(2);
            let mut down = true;
            while row.len() < t {
                row.push(src[i.min(n - 1)]);
                if down {
                    if i == 0 {
                        down = false;
                    } else {
                        i -= 1;
                    }
                } else if i + 1 >= n {
                    down = true;
                } else {
                    i += 1;
                }
            }
            channels.extend_from_slice(&row);
        }
        padded = Recording {
            labels: recording.labels.clone(),
            fs: recording.fs,
            channels,
            num_samples: t,
            events: recording.events.clone(),
        };
        &padded
    } else {
        recording
    };

    let starts = segment_starts(rec.num_samples, t);
    let mut pooled: Vec<CandidateEvent> = Vec::new();
    for chunk in starts.chunks(SCAN_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * c * t);
        for &s in chunk {
            data.extend_from_slice(&crate::sampling::extract_segment(rec, s, t));
        }
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[chunk.len(), c, t], data), false);
        let fwd = det.infer(&mut g, x)?;
        let raw = det.predictions(&g, &fwd, chunk.len());
        let decoded = decode_loc(&raw, &det.config);
        for (bi, cands) in decoded.into_iter().enumerate() {
            let seg_start_s = chunk[bi] as f64 / rec.fs;
            for mut cand in cands {
                if cand.probability > theta_clf && cand.duration_s > 0.0 {
                    cand.start_s += seg_start_s;
                    pooled.push(cand);
                }
            }
        }
    }
    Ok(nms(&pooled, nms_iou))
}

// ---------------------------------------------------------------------------
// matching and metrics
// ---------------------------------------------------------------------------

/// One-to-one greedy matching outcome for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction index, truth index, iou)` of accepted pairs
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy one-to-one matching: all (prediction, truth) pairs sorted by
/// descending IoU; a pair is accepted when both sides are unmatched, the
/// IoU reaches `eval_iou` and the overlap is non-empty.
pub fn match_events(
    preds: &[CandidateEvent],
    truths: &[ScoredEvent],
    eval_iou: f64,
) -> MatchResult {
    let mut pairs = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (ti, t) in truths.iter().enumerate() {
            let v = iou(p.interval(), Interval::from_event(t)).unwrap_or(0.0);
            if v >= eval_iou && v > 0.0 {
                pairs.push((pi, ti, v));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut truth_used = vec![false; truths.len()];
    let mut accepted = Vec::new();
    for (pi, ti, v) in pairs {
        if !pred_used[pi] && !truth_used[ti] {
            pred_used[pi] = true;
            truth_used[ti] = true;
            accepted.push((pi, ti, v));
        }
    }
    let tp = accepted.len();
    MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_: truths.len() - tp,
        pairs: accepted,
    }
}

/// Precision, recall and F1 from counts; all-zero counts define all three
/// as 0 rather than 0/0.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if 2 * tp + fp + fn_ > 0 {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    } else {
        0.0
    };
    (precision, recall, f1)
}

pub fn events_per_hour(count: usize, total_hours: f64) -> f64 {
    assert!(total_hours > 0.0, "zero-length recording");
    count as f64 / total_hours
}

/// Per-subject, per-class scoring row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub class_k: u32,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pred_per_hour: f64,
    pub truth_per_hour: f64,
    /// no predictions and no annotations: metrics defined as 0 and flagged
    pub degenerate: bool,
}

/// Score one record for one class.
pub fn score_record(
    record_id: &str,
    class_k: u32,
    preds: &[CandidateEvent],
    truths: &[ScoredEvent],
    eval_iou: f64,
    total_hours: f64,
) -> RecordScore {
    let p: Vec<CandidateEvent> = preds.iter().filter(|c| c.class_k == class_k).copied().collect();
    let t: Vec<ScoredEvent> = truths.iter().filter(|e| e.class_k == class_k).copied().collect();
    let m = match_events(&p, &t, eval_iou);
    let (precision, recall, f1) = prf1(m.tp, m.fp, m.fn_);
    RecordScore {
        record_id: record_id.to_string(),
        class_k,
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
        precision,
        recall,
        f1,
        pred_per_hour: events_per_hour(p.len(), total_hours),
        truth_per_hour: events_per_hour(t.len(), total_hours),
        degenerate: p.is_empty() && t.is_empty(),
    }
}

/// Cohort aggregate: subject-averaged mean and population standard
/// deviation per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub class_k: u32,
    pub records: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summarize per-record scores of one class.
pub fn subject_summary(scores: &[RecordScore]) -> CohortSummary {
    assert!(!scores.is_empty(), "summary of zero records");
    let class_k = scores[0].class_k;
    debug_assert!(scores.iter().all(|s| s.class_k == class_k));
    let f1: Vec<f64> = scores.iter().map(|s| s.f1).collect();
    let pr: Vec<f64> = scores.iter().map(|s| s.precision).collect();
    let re: Vec<f64> = scores.iter().map(|s| s.recall).collect();
    let (f1_mean, f1_std) = mean_std(&f1);
    let (precision_mean, precision_std) = mean_std(&pr);
    let (recall_mean, recall_std) = mean_std(&re);
    CohortSummary {
        class_k,
        records: scores.len(),
        f1_mean,
        f1_std,
        precision_mean,
        precision_std,
        recall_mean,
        recall_std,
    }
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eval_iou: f64,
    pub theta: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// F1 surface over `(eval_iou, theta)` for one class: candidates are decoded
/// once (already NMS-reduced at the lowest threshold) and re-thresholded and
/// re-matched per grid point; metrics are subject-averaged.
pub fn sweep(
    cands_per_record: &[Vec<CandidateEvent>],
    truths_per_record: &[Vec<ScoredEvent>],
    hours_per_record: &[f64],
    class_k: u32,
    iou_grid: &[f64],
    theta_grid: &[f64],
) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(iou_grid.len() * theta_grid.len());
    for &eval_iou in iou_grid {
        for &theta in theta_grid {
            let mut f1s = Vec::new();
            let mut prs = Vec::new();
            let mut res = Vec::new();
            for ((cands, truths), &hours) in cands_per_record
                .iter()
                .zip(truths_per_record)
                .zip(hours_per_record)
            {
                let kept: Vec<CandidateEvent> = cands
                    .iter()
                    .filter(|c| c.probability > theta)
                    .copied()
                    .collect();
                let s = score_record("", class_k, &kept, truths, eval_iou, hours);
                f1s.push(s.f1);
                prs.push(s.precision);
                res.push(s.recall);
            }
            out.push(SweepPoint {
                eval_iou,
                theta,
                f1: mean_std(&f1s).0,
                precision: mean_std(&prs).0,
                recall: mean_std(&res).0,
            });
        }
    }
    out
}

/// Best grid point of a sweep surface (ties: first in grid order).
pub fn sweep_argmax(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points
        .iter()
        .max_by(|a, b| a.f1.partial_cmp(&b.f1).unwrap_or(std::cmp::Ordering::Equal))
}

// ---------------------------------------------------------------------------
// CSV rendering
// ---------------------------------------------------------------------------

pub fn scores_to_csv(scores: &[RecordScore], class_label: &str) -> String {
    let mut out = String::from(
        "record,class,tp,fp,fn,precision,recall,f1,pred_per_hour,truth_per_hour,degenerate\n",
    );
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.record_id,
            class_label,
            s.tp,
            s.fp,
            s.fn_,
            s.precision,
            s.recall,
            s.f1,
            s.pred_per_hour,
            s.truth_per_hour,
            s.degenerate
        );
    }
    out
}

pub fn summary_to_csv(summaries: &[(String, CohortSummary)]) -> String {
    let mut out = String::from(
        "class,records,f1_mean,f1_std,precision_mean,precision_std,recall_mean,recall_std\n",
    );
    for (label, s) in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            label,
            s.records,
            s.f1_mean,
            s.f1_std,
            s.precision_mean,
            s.precision_std,
            s.recall_mean,
            s.recall_std
        );
    }
    out
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("eval_iou,theta,f1,precision,recall\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.eval_iou, p.theta, p.f1, p.precision, p.recall
        );
    }
    out
}

/// Per-subject F1 pairs for scatter export, one row per record.
pub fn scatter_to_csv(rows: &[(String, Vec<(String, f64)>)]) -> String {
    let mut out = String::from("record");
    if let Some((_, cols)) = rows.first() {
        for (label, _) in cols {
            let _ = write!(out, ",f1_{label}");
        }
    }
    out.push('\n');
    for (record, cols) in rows {
        let _ = write!(out, "{record}");
        for (_, v) in cols {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(class_k: u32, p: f64, start: f64, dur: f64) -> CandidateEvent {
        CandidateEvent {
            class_k,
            probability: p,
            start_s: start,
            duration_s: dur,
        }
    }

    #[test]
    fn nms_keeps_highest_probability_duplicate() {
        let kept = nms(
            &[cand(1, 0.9, 10.0, 5.0), cand(1, 0.8, 10.0, 5.0)],
            0.3,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].probability, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_candidates() {
        let kept = nms(
            &[cand(1, 0.9, 10.0, 5.0), cand(1, 0.8, 30.0, 5.0)],
            0.3,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_is_per_class() {
        let kept = nms(
            &[cand(1, 0.9, 10.0, 5.0), cand(2, 0.8, 10.0, 5.0)],
            0.3,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_output_is_an_antichain() {
        // no two kept candidates of one class exceed the threshold overlap
        let mut cands = Vec::new();
        let mut state = 123u64;
        let mut rnd = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..60 {
            cands.push(cand(1, rnd(), rnd() * 100.0, 0.5 + rnd() * 10.0));
        }
        let kept = nms(&cands, 0.3);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                let v = iou(kept[i].interval(), kept[j].interval()).unwrap();
                assert!(v <= 0.3, "kept pair with iou {v}");
            }
        }
    }

    #[test]
    fn match_identical_sets() {
        let preds = vec![cand(1, 0.9, 10.0, 5.0), cand(1, 0.9, 30.0, 4.0)];
        let truths = vec![ScoredEvent::new(1, 10.0, 5.0), ScoredEvent::new(1, 30.0, 4.0)];
        let m = match_events(&preds, &truths, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    }

    #[test]
    fn match_disjoint_sets() {
        let preds = vec![cand(1, 0.9, 100.0, 5.0)];
        let truths = vec![ScoredEvent::new(1, 10.0, 5.0), ScoredEvent::new(1, 30.0, 4.0)];
        let m = match_events(&preds, &truths, 0.1);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 2));
    }

    #[test]
    fn match_counts_are_consistent() {
        let preds = vec![
            cand(1, 0.9, 10.0, 5.0),
            cand(1, 0.8, 11.0, 5.0),
            cand(1, 0.7, 50.0, 2.0),
        ];
        let truths = vec![ScoredEvent::new(1, 10.5, 5.0), ScoredEvent::new(1, 80.0, 2.0)];
        let m = match_events(&preds, &truths, 0.3);
        assert_eq!(m.tp + m.fp, preds.len());
        assert_eq!(m.tp + m.fn_, truths.len());
        // one-to-one: the 0.9 prediction wins the overlapping truth
        assert_eq!(m.pairs[0].0, 0);
    }

    #[test]
    fn match_is_symmetric_under_role_swap() {
        let preds = vec![cand(1, 0.9, 10.0, 5.0), cand(1, 0.8, 40.0, 3.0)];
        let truths = vec![ScoredEvent::new(1, 11.0, 5.0)];
        let m1 = match_events(&preds, &truths, 0.2);
        let swapped_preds: Vec<CandidateEvent> = truths
            .iter()
            .map(|t| cand(t.class_k, 1.0, t.start_s, t.duration_s))
            .collect();
        let swapped_truths: Vec<ScoredEvent> = preds
            .iter()
            .map(|p| ScoredEvent::new(p.class_k, p.start_s, p.duration_s))
            .collect();
        let m2 = match_events(&swapped_preds, &swapped_truths, 0.2);
        assert_eq!(m1.tp, m2.tp);
        assert_eq!(m1.fp, m2.fn_);
        assert_eq!(m1.fn_, m2.fp);
    }

    #[test]
    fn prf1_known_values() {
        assert_eq!(prf1(1, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(prf1(1, 1, 1), (0.5, 0.5, 0.5));
        let (p, r, f) = prf1(3, 1, 2);
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 0.6).abs() < 1e-12);
        assert!((f - 2.0 * 3.0 / 9.0).abs() < 1e-12);
        assert_eq!(prf1(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_identity_holds() {
        for (tp, fp, fn_) in [(5, 3, 2), (0, 4, 0), (7, 0, 7), (1, 1, 0)] {
            let (_, _, f1) = prf1(tp, fp, fn_);
            let direct = if 2 * tp + fp + fn_ > 0 {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            } else {
                0.0
            };
            assert_eq!(f1, direct);
        }
    }

    #[test]
    fn events_per_hour_is_count_based() {
        assert!((events_per_hour(10, 8.0) - 1.25).abs() < 1e-12);
        assert_eq!(events_per_hour(0, 8.0), 0.0);
    }

    #[test]
    fn summary_mean_and_population_std() {
        let mk = |id: &str, f1: f64| RecordScore {
            record_id: id.into(),
            class_k: 1,
            tp: 0,
            fp: 0,
            fn_: 0,
            precision: f1,
            recall: f1,
            f1,
            pred_per_hour: 0.0,
            truth_per_hour: 0.0,
            degenerate: false,
        };
        let s = subject_summary(&[mk("a", 0.6), mk("b", 0.8)]);
        assert!((s.f1_mean - 0.7).abs() < 1e-12);
        assert!((s.f1_std - 0.1).abs() < 1e-12);

        let single = subject_summary(&[mk("a", 0.5)]);
        assert_eq!(single.f1_mean, 0.5);
        assert_eq!(single.f1_std, 0.0);
    }

    #[test]
    fn sweep_theta_one_gives_zero_recall() {
        let cands = vec![vec![cand(1, 0.9, 10.0, 5.0)]];
        let truths = vec![vec![ScoredEvent::new(1, 10.0, 5.0)]];
        let pts = sweep(&cands, &truths, &[1.0], 1, &[0.1], &[0.5, 1.0]);
        assert_eq!(pts.len(), 2);
        assert!((pts[0].f1 - 1.0).abs() < 1e-12);
        assert_eq!(pts[1].recall, 0.0);
    }

    #[test]
    fn raising_theta_never_increases_predictions() {
        let cands: Vec<CandidateEvent> = (0..20)
            .map(|i| cand(1, (i as f64 + 1.0) / 21.0, i as f64 * 10.0, 2.0))
            .collect();
        let mut prev = usize::MAX;
        for theta in [0.0, 0.2, 0.4, 0.6, 0.8, 0.99] {
            let n = cands.iter().filter(|c| c.probability > theta).count();
            assert!(n <= prev);
            prev = n;
        }
    }
}
