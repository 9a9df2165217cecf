//! Labeled synthetic recordings for end-to-end verification.
//!
//! Background is per-channel pink noise. Arousal events inject an 8-12 Hz
//! burst on the EEG and EOG channels plus a broadband chin-EMG power
//! increase; leg-movement events inject a high-frequency (>20 Hz) burst on
//! the left leg channel. Event times are Poisson draws thinned to keep
//! same-class events disjoint, and the emitted annotation list describes
//! the injected bursts exactly.

use crate::edf::ScoredEvent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Corpus class codes used by the synthetic annotations.
pub const AR_CLASS: u32 = 1;
pub const LM_CLASS: u32 = 2;

/// Background level in the physical (microvolt) domain.
pub const BACKGROUND_RMS_UV: f64 = 20.0;
/// Same-class events keep at least this gap.
pub const MIN_EVENT_GAP_S: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("event rates are infeasible: expected occupancy {occupancy:.2} exceeds 0.5")]
    InfeasibleRates { occupancy: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub duration_s: f64,
    /// native rate; 256 Hz exercises the resampling path
    pub fs: f64,
    pub ar_rate_per_hour: f64,
    pub lm_rate_per_hour: f64,
    /// arousal duration range `[lo, hi)`, at least 3 s
    pub ar_duration_s: (f64, f64),
    /// leg-movement duration range `[lo, hi)`, at least 0.5 s
    pub lm_duration_s: (f64, f64),
    pub snr_db: f64,
    /// probability that a leg movement co-occurs with an arousal
    pub overlap_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration_s: 3600.0,
            fs: 256.0,
            ar_rate_per_hour: 30.0,
            lm_rate_per_hour: 30.0,
            ar_duration_s: (3.0, 15.0),
            lm_duration_s: (0.5, 10.0),
            snr_db: 10.0,
            overlap_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.duration_s > 60.0) || !(self.fs > 0.0) {
            return fail(format!(
                "duration {} s at {} Hz",
                self.duration_s, self.fs
            ));
        }
        if self.ar_rate_per_hour < 0.0 || self.lm_rate_per_hour < 0.0 {
            return fail("negative event rate".into());
        }
        if self.ar_duration_s.0 < 3.0 || self.ar_duration_s.0 >= self.ar_duration_s.1 {
            return fail(format!(
                "arousal durations {:?} (minimum 3 s)",
                self.ar_duration_s
            ));
        }
        if self.lm_duration_s.0 < 0.5 || self.lm_duration_s.0 >= self.lm_duration_s.1 {
            return fail(format!(
                "leg movement durations {:?} (minimum 0.5 s)",
                self.lm_duration_s
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return fail(format!("overlap fraction {}", self.overlap_fraction));
        }
        let occupancy = (self.ar_rate_per_hour * (self.ar_duration_s.0 + self.ar_duration_s.1)
            / 2.0
            + self.lm_rate_per_hour * (self.lm_duration_s.0 + self.lm_duration_s.1) / 2.0)
            / 3600.0;
        if occupancy > 0.5 {
            return Err(SynthError::InfeasibleRates { occupancy });
        }
        Ok(())
    }
}

/// Raw (pre-montage) channel labels of the synthetic montage. The first
/// five are emitted pre-referenced; the leg pair exercises the left-minus-
/// right derivation.
pub const SYNTH_CHANNELS: [&str; 7] = [
    "C3-M2",
    "C4-M1",
    "EOG(L)-M2",
    "EOG(R)-M1",
    "Chin EMG",
    "Leg L",
    "Leg R",
];

/// A generated record: raw channels at native rate plus ground truth.
pub struct SynthRecord {
    pub fs: f64,
    pub channels: Vec<(String, Vec<f64>)>,
    pub events: Vec<ScoredEvent>,
}

/// Pink noise via the Kellet filter cascade, scaled to `rms`.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, rms: f64) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.gen_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let pink = b.iter().sum::<f64>() + w * 0.5362;
        b[6] = w * 0.115926;
        out.push(pink);
    }
    let measured = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = rms / measured.max(1e-12);
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// Trapezoid envelope: 15% ramp on either side.
fn envelope(frac: f64) -> f64 {
    let ramp = 0.15;
    if frac < ramp {
        frac / ramp
    } else if frac > 1.0 - ramp {
        (1.0 - frac) / ramp
    } else {
        1.0
    }
}

fn poisson_times(
    rng: &mut ChaCha8Rng,
    rate_per_hour: f64,
    duration_s: f64,
    dur_range: (f64, f64),
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if rate_per_hour <= 0.0 {
        return out;
    }
    let rate_per_s = rate_per_hour / 3600.0;
    let mut t = 2.0; // clear of the record start
    loop {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        t += -u.ln() / rate_per_s;
        let d = rng.gen_range(dur_range.0..dur_range.1);
        if t + d + 2.0 > duration_s {
            break;
        }
        out.push((t, d));
    }
    out
}

/// Drop events overlapping an earlier same-class event (including a minimum
/// gap).
fn thin_overlaps(mut events: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (start, dur) in events {
        if kept
            .last()
            .is_none_or(|(ps, pd)| start >= ps + pd + MIN_EVENT_GAP_S)
        {
            kept.push((start, dur));
        }
    }
    kept
}

/// Generate one record; bit-identical for equal `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthRecord, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (spec.duration_s * spec.fs).round() as usize;
    let burst_amp = BACKGROUND_RMS_UV * 10f64.powf(spec.snr_db / 20.0);

    let mut channels: Vec<(String, Vec<f64>)> = SYNTH_CHANNELS
        .iter()
        .map(|label| (label.to_string(), pink_noise(&mut rng, n, BACKGROUND_RMS_UV)))
        .collect();

    // arousals
    let ar_events = thin_overlaps(poisson_times(
        &mut rng,
        spec.ar_rate_per_hour,
        spec.duration_s,
        spec.ar_duration_s,
    ));
    for &(start, dur) in &ar_events {
        let f = rng.gen_range(8.0..12.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let i0 = (start * spec.fs) as usize;
        let i1 = ((start + dur) * spec.fs) as usize;
        for i in i0..i1.min(n) {
            let t = i as f64 / spec.fs;
            let frac = (t - start) / dur;
            let env = envelope(frac);
            let alpha = burst_amp * env * (std::f64::consts::TAU * f * t + phase).sin();
            for ch in 0..4 {
                channels[ch].1[i] += alpha;
            }
            // chin EMG tone loses meaning; a broadband power increase instead
            let grind: f64 = rng.gen_range(-1.0..1.0);
            channels[4].1[i] += 0.8 * burst_amp * env * grind;
        }
    }

    // leg movements, optionally co-occurring with arousals
    let mut lm_candidates = poisson_times(
        &mut rng,
        spec.lm_rate_per_hour,
        spec.duration_s,
        spec.lm_duration_s,
    );
    if !ar_events.is_empty() {
        for cand in lm_candidates.iter_mut() {
            if rng.gen_bool(spec.overlap_fraction) {
                let (ar_start, ar_dur) = ar_events[rng.gen_range(0..ar_events.len())];
                let jitter: f64 = rng.gen_range(-1.0..1.0);
                let center = ar_start + ar_dur / 2.0 + jitter;
                let start = (center - cand.1 / 2.0).max(2.0);
                if start + cand.1 + 2.0 < spec.duration_s {
                    cand.0 = start;
                }
            }
        }
    }
    let lm_events = thin_overlaps(lm_candidates);
    for &(start, dur) in &lm_events {
        let f = rng.gen_range(25.0..45.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let i0 = (start * spec.fs) as usize;
        let i1 = ((start + dur) * spec.fs) as usize;
        for i in i0..i1.min(n) {
            let t = i as f64 / spec.fs;
            let frac = (t - start) / dur;
            let env = envelope(frac);
            let am: f64 = 0.6 + 0.4 * rng.gen_range(0.0..1.0f64);
            channels[5].1[i] +=
                burst_amp * env * am * (std::f64::consts::TAU * f * t + phase).sin();
        }
    }

    let mut events: Vec<ScoredEvent> = ar_events
        .iter()
        .map(|&(s, d)| ScoredEvent::new(AR_CLASS, s, d))
        .chain(
            lm_events
                .iter()
                .map(|&(s, d)| ScoredEvent::new(LM_CLASS, s, d)),
        )
        .collect();
    events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

    Ok(SynthRecord {
        fs: spec.fs,
        channels,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec() -> SynthSpec {
        SynthSpec {
            duration_s: 120.0,
            fs: 128.0,
            ar_rate_per_hour: 60.0,
            lm_rate_per_hour: 60.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_rates_give_pure_noise() {
        let spec = SynthSpec {
            ar_rate_per_hour: 0.0,
            lm_rate_per_hour: 0.0,
            ..quick_spec()
        };
        let rec = generate(&spec, 1).unwrap();
        assert!(rec.events.is_empty());
        assert_eq!(rec.channels.len(), 7);
        assert_eq!(rec.channels[0].1.len(), (120.0 * 128.0) as usize);
    }

    #[test]
    fn labels_describe_injected_bursts_exactly() {
        let spec = SynthSpec {
            duration_s: 3600.0,
            ar_rate_per_hour: 20.0,
            lm_rate_per_hour: 15.0,
            fs: 128.0,
            ..SynthSpec::default()
        };
        let rec = generate(&spec, 42).unwrap();
        let ar: Vec<_> = rec.events.iter().filter(|e| e.class_k == AR_CLASS).collect();
        let lm: Vec<_> = rec.events.iter().filter(|e| e.class_k == LM_CLASS).collect();
        assert!(!ar.is_empty() && !lm.is_empty());
        // no two same-class events overlap
        for set in [&ar, &lm] {
            for w in set.windows(2) {
                assert!(w[1].start_s >= w[0].end_s() + MIN_EVENT_GAP_S - 1e-9);
            }
        }
        // durations respect the configured ranges
        for e in &ar {
            assert!(e.duration_s >= 3.0 && e.duration_s < 15.0);
        }
        for e in &lm {
            assert!(e.duration_s >= 0.5 && e.duration_s < 10.0);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = quick_spec();
        let a = generate(&spec, 7).unwrap();
        let b = generate(&spec, 7).unwrap();
        assert_eq!(a.events, b.events);
        for (ca, cb) in a.channels.iter().zip(&b.channels) {
            let bits_a: Vec<u64> = ca.1.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = cb.1.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn infeasible_rates_are_rejected() {
        let spec = SynthSpec {
            ar_rate_per_hour: 400.0,
            ..quick_spec()
        };
        assert!(matches!(
            generate(&spec, 0),
            Err(SynthError::InfeasibleRates { .. })
        ));
    }

    #[test]
    fn invalid_durations_are_rejected() {
        let spec = SynthSpec {
            ar_duration_s: (1.0, 5.0), // below the 3 s floor
            ..quick_spec()
        };
        assert!(matches!(generate(&spec, 0), Err(SynthError::InvalidSpec(_))));
    }

    /// Goertzel power of one DFT bin.
    fn band_power(x: &[f64], fs: f64, f_lo: f64, f_hi: f64) -> f64 {
        let n = x.len();
        let mut total = 0.0;
        let mut bins = 0;
        let mut f = f_lo;
        while f <= f_hi {
            let w = std::f64::consts::TAU * f / fs;
            let coeff = 2.0 * w.cos();
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for &v in x {
                s0 = v + coeff * s1 - s2;
                s2 = s1;
                s1 = s0;
            }
            total += s1 * s1 + s2 * s2 - coeff * s1 * s2;
            bins += 1;
            f += 1.0;
        }
        total / bins as f64 / (n as f64 * n as f64)
    }

    #[test]
    fn arousal_band_power_exceeds_background() {
        let spec = SynthSpec {
            duration_s: 600.0,
            fs: 128.0,
            ar_rate_per_hour: 30.0,
            lm_rate_per_hour: 0.0,
            snr_db: 10.0,
            ..SynthSpec::default()
        };
        let rec = generate(&spec, 5).unwrap();
        let ar = rec
            .events
            .iter()
            .find(|e| e.class_k == AR_CLASS && e.duration_s > 4.0)
            .expect("an arousal");
        let eeg = &rec.channels[0].1;
        let i0 = (ar.start_s * spec.fs) as usize;
        let i1 = (ar.end_s() * spec.fs) as usize;
        let during = band_power(&eeg[i0..i1], spec.fs, 8.0, 12.0);

        // background span free of events
        let mut bg_start = 2.0;
        'search: loop {
            let span = (bg_start, bg_start + ar.duration_s);
            if rec.events.iter().all(|e| e.end_s() < span.0 || e.start_s > span.1) {
                break 'search;
            }
            bg_start += 1.0;
        }
        let b0 = (bg_start * spec.fs) as usize;
        let b1 = b0 + (i1 - i0);
        let background = band_power(&eeg[b0..b1], spec.fs, 8.0, 12.0);
        let ratio_db = 10.0 * (during / background).log10();
        assert!(ratio_db >= 6.0, "band power ratio {ratio_db:.2} dB");
    }
}
