//! Balanced class sampling and event-centered segment extraction.
//!
//! Classes (including the non-event background, class 0) are drawn with
//! probability `1 / (K+1)`. An event-anchored draw picks one event of the
//! class uniformly, proposes a segment start uniformly from
//! `[midpoint - T, midpoint + T]`, clamps into the record, and redraws until
//! at least half of the anchor event lies inside the segment. Background
//! draws accept only segments free of any event overlap.

use crate::dsp::Recording;
use crate::edf::ScoredEvent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
/// Clipped events keep their spot in the target set only when this fraction
/// of the original duration survives; slivers are dropped.
pub const MIN_RETAINED_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no class-{class_k} events in records [{}]", records.join(", "))]
    NoEventOfClass { class_k: u32, records: Vec<String> },
    #[error("no admissible segment found after {MAX_PLACEMENT_ATTEMPTS} attempts (record {record})")]
    ExhaustedAttempts { record: String },
    #[error("record {record} is shorter than one segment")]
    RecordTooShort { record: String },
}

/// One training example: a segment location plus its clipped, re-based
/// events.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    /// index into the sampler's record list
    pub record: usize,
    pub start_sample: usize,
    /// events intersecting the segment, clipped to it, in segment-relative
    /// seconds
    pub events: Vec<ScoredEvent>,
}

/// Clip events to a segment, re-base to segment time, and drop slivers that
/// retain less than [`MIN_RETAINED_FRACTION`] of their duration.
pub fn clip_to_segment(events: &[ScoredEvent], seg_start_s: f64, seg_dur_s: f64) -> Vec<ScoredEvent> {
    let seg_end = seg_start_s + seg_dur_s;
    events
        .iter()
        .filter_map(|e| {
            let lo = e.start_s.max(seg_start_s);
            let hi = e.end_s().min(seg_end);
            let kept = hi - lo;
            if kept <= 0.0 || kept < MIN_RETAINED_FRACTION * e.duration_s {
                return None;
            }
            Some(ScoredEvent::new(e.class_k, lo - seg_start_s, kept))
        })
        .collect()
}

fn overlap_s(e: &ScoredEvent, seg_start_s: f64, seg_dur_s: f64) -> f64 {
    (e.end_s().min(seg_start_s + seg_dur_s) - e.start_s.max(seg_start_s)).max(0.0)
}

pub struct SegmentSampler<'a> {
    records: &'a [Recording],
    ids: Vec<String>,
    /// per class `k`, all `(record, event index)` pairs, `k-1` indexed
    class_events: Vec<Vec<(usize, usize)>>,
    num_classes: usize,
    segment_len: usize,
    fs: f64,
    rng: ChaCha8Rng,
}

impl<'a> SegmentSampler<'a> {
    pub fn new(
        records: &'a [Recording],
        ids: Vec<String>,
        num_classes: usize,
        segment_len: usize,
        fs: f64,
        seed: u64,
    ) -> SegmentSampler<'a> {
        assert_eq!(records.len(), ids.len());
        let mut class_events = vec![Vec::new(); num_classes];
        for (ri, rec) in records.iter().enumerate() {
            for (ei, e) in rec.events.iter().enumerate() {
                if e.class_k >= 1 && (e.class_k as usize) <= num_classes {
                    class_events[e.class_k as usize - 1].push((ri, ei));
                }
            }
        }
        SegmentSampler {
            records,
            ids,
            class_events,
            num_classes,
            segment_len,
            fs,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn segment_s(&self) -> f64 {
        self.segment_len as f64 / self.fs
    }

    /// Uniform over the `K+1` classes including background.
    pub fn sample_class(&mut self) -> u32 {
        self.rng.gen_range(0..=self.num_classes as u32)
    }

    fn place_around_event(
        &mut self,
        record: usize,
        event: ScoredEvent,
    ) -> Result<SegmentSample, SamplerError> {
        let rec = &self.records[record];
        let total = rec.num_samples;
        let t = self.segment_len;
        if total < t {
            return Err(SamplerError::RecordTooShort {
                record: self.ids[record].clone(),
            });
        }
        let seg_s = self.segment_s();
        let mid = ((event.start_s + event.duration_s / 2.0) * self.fs).round() as i64;
        let max_start = (total - t) as i64;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let proposal = self.rng.gen_range(mid - t as i64..=mid + t as i64);
            let start = proposal.clamp(0, max_start);
            let start_s = start as f64 / self.fs;
            if overlap_s(&event, start_s, seg_s) >= 0.5 * event.duration_s {
                return Ok(SegmentSample {
                    record,
                    start_sample: start as usize,
                    events: clip_to_segment(&rec.events, start_s, seg_s),
                });
            }
        }
        Err(SamplerError::ExhaustedAttempts {
            record: self.ids[record].clone(),
        })
    }

    fn place_background(&mut self, record: usize) -> Result<SegmentSample, SamplerError> {
        let rec = &self.records[record];
        let total = rec.num_samples;
        let t = self.segment_len;
        if total < t {
            return Err(SamplerError::RecordTooShort {
                record: self.ids[record].clone(),
            });
        }
        let seg_s = self.segment_s();
        let max_start = total - t;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let start = self.rng.gen_range(0..=max_start);
            let start_s = start as f64 / self.fs;
            let clean = rec
                .events
                .iter()
                .all(|e| overlap_s(e, start_s, seg_s) <= 0.0);
            if clean {
                return Ok(SegmentSample {
                    record,
                    start_sample: start,
                    events: Vec::new(),
                });
            }
        }
        Err(SamplerError::ExhaustedAttempts {
            record: self.ids[record].clone(),
        })
    }

    /// Draw one segment from a specific record: event-anchored for
    /// `class_k >= 1` (uniform over that record's class events), event-free
    /// for class 0.
    pub fn sample_segment(
        &mut self,
        record: usize,
        class_k: u32,
    ) -> Result<SegmentSample, SamplerError> {
        if class_k == 0 {
            return self.place_background(record);
        }
        let events: Vec<ScoredEvent> = self.records[record]
            .events
            .iter()
            .filter(|e| e.class_k == class_k)
            .copied()
            .collect();
        if events.is_empty() {
            return Err(SamplerError::NoEventOfClass {
                class_k,
                records: vec![self.ids[record].clone()],
            });
        }
        let event = events[self.rng.gen_range(0..events.len())];
        self.place_around_event(record, event)
    }

    /// Balanced minibatch: per-class counts differ by at most one; anchor
    /// events are drawn uniformly over all events of the class across the
    /// whole record set.
    pub fn make_minibatch(&mut self, batch: usize) -> Result<Vec<SegmentSample>, SamplerError> {
        let groups = self.num_classes + 1;
        let base = batch / groups;
        let rem = batch % groups;
        let mut counts = vec![base; groups];
        // remainder goes to a random subset of classes
        let mut order: Vec<usize> = (0..groups).collect();
        for i in (1..groups).rev() {
            let j = self.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for &cls in order.iter().take(rem) {
            counts[cls] += 1;
        }

        let mut out = Vec::with_capacity(batch);
        for (cls, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                if cls == 0 {
                    let record = self.rng.gen_range(0..self.records.len());
                    out.push(self.place_background(record)?);
                } else {
                    let pool = &self.class_events[cls - 1];
                    if pool.is_empty() {
                        return Err(SamplerError::NoEventOfClass {
                            class_k: cls as u32,
                            records: self.ids.clone(),
                        });
                    }
                    let (record, ei) = pool[self.rng.gen_range(0..pool.len())];
                    let event = self.records[record].events[ei];
                    out.push(self.place_around_event(record, event)?);
                }
            }
        }
        Ok(out)
    }
}

/// Deterministic eval-set construction: per record, `anchors_per_record`
/// event-anchored segments (cycling through the classes present) and the
/// same number of background segments. Used for the early-stopping loss.
pub fn stratified_segments(
    records: &[Recording],
    ids: &[String],
    num_classes: usize,
    segment_len: usize,
    fs: f64,
    seed: u64,
    anchors_per_record: usize,
) -> Result<Vec<SegmentSample>, SamplerError> {
    let mut out = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let mut sampler = SegmentSampler::new(
            std::slice::from_ref(rec),
            vec![ids[ri].clone()],
            num_classes,
            segment_len,
            fs,
            seed ^ (ri as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
        let present: Vec<u32> = (1..=num_classes as u32)
            .filter(|&k| rec.events.iter().any(|e| e.class_k == k))
            .collect();
        for a in 0..anchors_per_record {
            if !present.is_empty() {
                let k = present[a % present.len()];
                let mut s = sampler.sample_segment(0, k)?;
                s.record = ri;
                out.push(s);
            }
            let mut s = sampler.sample_segment(0, 0)?;
            s.record = ri;
            out.push(s);
        }
    }
    Ok(out)
}

/// Copy the `(C, len)` slice starting at `start` out of a recording,
/// channel-major, for batch assembly.
pub fn extract_segment(rec: &Recording, start: usize, len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rec.num_channels() * len);
    for c in 0..rec.num_channels() {
        out.extend_from_slice(&rec.channel(c)[start..start + len]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_recording(events: Vec<ScoredEvent>, total: usize) -> Recording {
        Recording {
            labels: vec!["a".into(), "b".into()],
            fs: 8.0,
            channels: (0..2 * total).map(|i| (i % 7) as f32).collect(),
            num_samples: total,
            events,
        }
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let rec = test_recording(vec![], 1024);
        let mut s = SegmentSampler::new(
            std::slice::from_ref(&rec),
            vec!["r".into()],
            1,
            64,
            8.0,
            7,
        );
        let n = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            counts[s.sample_class() as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.5).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn anchored_segments_keep_half_the_event() {
        // event at the record center, duration well under the segment
        let event = ScoredEvent::new(1, 60.0, 4.0);
        let rec = test_recording(vec![event], 1024); // 128 s at 8 Hz
        let mut s = SegmentSampler::new(
            std::slice::from_ref(&rec),
            vec!["r".into()],
            1,
            64, // 8 s segments
            8.0,
            11,
        );
        for _ in 0..500 {
            let seg = s.sample_segment(0, 1).unwrap();
            let start_s = seg.start_sample as f64 / 8.0;
            let ov = overlap_s(&event, start_s, 8.0);
            assert!(ov >= 0.5 * event.duration_s, "overlap {ov}");
            // re-based events stay inside the segment
            for e in &seg.events {
                assert!(e.start_s >= 0.0 && e.end_s() <= 8.0 + 1e-9);
            }
        }
    }

    #[test]
    fn background_segments_avoid_events() {
        let events = vec![
            ScoredEvent::new(1, 10.0, 2.0),
            ScoredEvent::new(1, 50.0, 3.0),
            ScoredEvent::new(1, 100.0, 1.0),
        ];
        let rec = test_recording(events.clone(), 1024);
        let mut s = SegmentSampler::new(
            std::slice::from_ref(&rec),
            vec!["r".into()],
            1,
            64,
            8.0,
            13,
        );
        for _ in 0..300 {
            let seg = s.sample_segment(0, 0).unwrap();
            let start_s = seg.start_sample as f64 / 8.0;
            for e in &events {
                assert_eq!(overlap_s(e, start_s, 8.0), 0.0);
            }
            assert!(seg.events.is_empty());
        }
    }

    #[test]
    fn background_on_event_free_record_accepts_anything() {
        let rec = test_recording(vec![], 128);
        let mut s = SegmentSampler::new(
            std::slice::from_ref(&rec),
            vec!["r".into()],
            1,
            64,
            8.0,
            5,
        );
        let seg = s.sample_segment(0, 0).unwrap();
        assert!(seg.start_sample <= 64);
    }

    #[test]
    fn minibatch_is_balanced_within_one() {
        let rec = test_recording(
            vec![ScoredEvent::new(1, 40.0, 3.0), ScoredEvent::new(1, 90.0, 2.0)],
            1024,
        );
        let recs = vec![rec];
        let mut s = SegmentSampler::new(&recs, vec!["r".into()], 1, 64, 8.0, 3);
        let batch = s.make_minibatch(32).unwrap();
        assert_eq!(batch.len(), 32);
        let anchored = batch.iter().filter(|b| !b.events.is_empty()).count();
        assert_eq!(anchored, 16);

        // odd batch splits 2/1
        let batch = s.make_minibatch(3).unwrap();
        let counts = batch.iter().filter(|b| !b.events.is_empty()).count();
        assert!(counts == 1 || counts == 2);
    }

    #[test]
    fn missing_class_is_reported() {
        let rec = test_recording(vec![ScoredEvent::new(1, 40.0, 3.0)], 1024);
        let recs = vec![rec];
        let mut s = SegmentSampler::new(&recs, vec!["rec7".into()], 2, 64, 8.0, 3);
        match s.make_minibatch(6) {
            Err(SamplerError::NoEventOfClass { class_k: 2, records }) => {
                assert_eq!(records, vec!["rec7".to_string()]);
            }
            other => panic!("expected NoEventOfClass, got {other:?}"),
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let rec = test_recording(vec![ScoredEvent::new(1, 40.0, 3.0)], 1024);
        let recs = vec![rec];
        let run = || {
            let mut s = SegmentSampler::new(&recs, vec!["r".into()], 1, 64, 8.0, 99);
            (0..20)
                .map(|_| s.make_minibatch(4).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_drops_slivers_and_rebases() {
        let events = vec![
            ScoredEvent::new(1, 9.1, 1.0),  // 0.1 s inside: dropped (10%)
            ScoredEvent::new(1, 9.5, 1.0),  // 0.5 s inside: kept
            ScoredEvent::new(2, 12.0, 2.0), // fully inside
        ];
        let clipped = clip_to_segment(&events, 10.0, 8.0);
        assert_eq!(clipped.len(), 2);
        assert_eq!(clipped[0], ScoredEvent::new(1, 0.0, 0.5));
        assert_eq!(clipped[1], ScoredEvent::new(2, 2.0, 2.0));
    }

    #[test]
    fn stratified_covers_every_record() {
        let recs = vec![
            test_recording(vec![ScoredEvent::new(1, 40.0, 3.0)], 1024),
            test_recording(vec![ScoredEvent::new(1, 80.0, 2.0)], 1024),
        ];
        let ids = vec!["a".to_string(), "b".to_string()];
        let segs = stratified_segments(&recs, &ids, 1, 64, 8.0, 5, 2).unwrap();
        assert_eq!(segs.len(), 8);
        assert!(segs.iter().any(|s| s.record == 0));
        assert!(segs.iter().any(|s| s.record == 1));
        // determinism
        let again = stratified_segments(&recs, &ids, 1, 64, 8.0, 5, 2).unwrap();
        assert_eq!(segs, again);
    }
}
