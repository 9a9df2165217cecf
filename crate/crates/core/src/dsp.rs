//! Signal conditioning: every channel is resampled to 128 Hz with a
//! Kaiser-windowed polyphase filter, filtered per modality with a 4th-order
//! zero-phase Butterworth (band-pass 0.3-35 Hz for EEG/EOG, high-pass 10 Hz
//! for chin/leg EMG), then z-normalized over the entire night.

use crate::edf::ScoredEvent;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TARGET_FS: f64 = 128.0;
pub const KAISER_BETA: f64 = 5.0;
pub const BUTTER_ORDER: usize = 4;
pub const EEG_BAND_HZ: (f64, f64) = (0.3, 35.0);
pub const EMG_HIGHPASS_HZ: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid cutoff {0:?} Hz for fs {1} Hz")]
    InvalidCutoff(Vec<f64>, f64),
    #[error("signal of {len} samples is too short for padding of {pad}")]
    SignalTooShort { len: usize, pad: usize },
    #[error("cannot derive a rational resampling ratio from {0} Hz to {1} Hz")]
    ZeroRate(f64, f64),
    #[error("channel {0:?} is constant; z-normalization undefined")]
    ConstantChannel(String),
}

// ---------------------------------------------------------------------------
// Butterworth design
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    Bandpass,
    Highpass,
}

/// Digital Butterworth specification; `order` is the analog prototype order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoffs_hz: Vec<f64>,
    pub fs: f64,
}

impl FilterSpec {
    pub fn bandpass(low: f64, high: f64, order: usize, fs: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass,
            order,
            cutoffs_hz: vec![low, high],
            fs,
        }
    }

    pub fn highpass(cutoff: f64, order: usize, fs: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Highpass,
            order,
            cutoffs_hz: vec![cutoff],
            fs,
        }
    }

    fn validate(&self) -> Result<(), DspError> {
        let nyq = self.fs / 2.0;
        let bad = || DspError::InvalidCutoff(self.cutoffs_hz.clone(), self.fs);
        if self.order == 0 || !self.fs.is_finite() || self.fs <= 0.0 {
            return Err(bad());
        }
        match self.kind {
            FilterKind::Highpass => {
                if self.cutoffs_hz.len() != 1 {
                    return Err(bad());
                }
            }
            FilterKind::Bandpass => {
                if self.cutoffs_hz.len() != 2 || self.cutoffs_hz[0] >= self.cutoffs_hz[1] {
                    return Err(bad());
                }
            }
        }
        for &c in &self.cutoffs_hz {
            if !(c > 0.0 && c < nyq) {
                return Err(bad());
            }
        }
        Ok(())
    }
}

/// One second-order section, denominator normalized to `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Cascade of biquads; the filter is applied section by section.
#[derive(Debug, Clone, PartialEq)]
pub struct SosCascade {
    pub sections: Vec<Biquad>,
    /// analog prototype order the cascade was designed from
    pub order: usize,
}

#[derive(Debug, Clone, Copy)]
struct AnalogSection {
    // B2 s^2 + B1 s + B0 over A2 s^2 + A1 s + A0
    b: [f64; 3],
    a: [f64; 3],
}

fn complex_sqrt(re: f64, im: f64) -> (f64, f64) {
    let r = (re * re + im * im).sqrt();
    let sr = ((r + re) / 2.0).max(0.0).sqrt();
    let si = ((r - re) / 2.0).max(0.0).sqrt();
    (sr, if im >= 0.0 { si } else { -si })
}

/// Analog Butterworth prototype poles (unit cutoff), as the negative-real
/// parts of conjugate pairs plus an optional real pole for odd orders.
fn prototype_pairs(order: usize) -> (Vec<f64>, bool) {
    let mut two_cos = Vec::new();
    let n = order as f64;
    for k in 0..order / 2 {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + 1.0 + n) / (2.0 * n);
        two_cos.push(-2.0 * theta.cos()); // = -2 Re(p), positive
    }
    (two_cos, order % 2 == 1)
}

/// Map an analog section to a digital biquad with `s = c (z-1)/(z+1)`.
fn bilinear(section: AnalogSection, c: f64) -> Biquad {
    let [b2, b1, b0] = [section.b[0], section.b[1], section.b[2]];
    let [a2, a1, a0] = [section.a[0], section.a[1], section.a[2]];
    let c2 = c * c;
    let nb0 = b2 * c2 + b1 * c + b0;
    let nb1 = -2.0 * b2 * c2 + 2.0 * b0;
    let nb2 = b2 * c2 - b1 * c + b0;
    let na0 = a2 * c2 + a1 * c + a0;
    let na1 = -2.0 * a2 * c2 + 2.0 * a0;
    let na2 = a2 * c2 - a1 * c + a0;
    Biquad {
        b: [nb0 / na0, nb1 / na0, nb2 / na0],
        a: [na1 / na0, na2 / na0],
    }
}

/// Design the cascade: analog prototype, frequency transform with bilinear
/// prewarping, one digital biquad per analog section. A band-pass of
/// prototype order `n` therefore carries `2n` poles.
pub fn design_butterworth(spec: &FilterSpec) -> Result<SosCascade, DspError> {
    spec.validate()?;
    let c = 2.0 * spec.fs;
    let warp = |f_hz: f64| c * (std::f64::consts::PI * f_hz / spec.fs).tan();
    let (pairs, has_real) = prototype_pairs(spec.order);
    let mut sections = Vec::new();

    match spec.kind {
        FilterKind::Highpass => {
            let wc = warp(spec.cutoffs_hz[0]);
            for &a1 in &pairs {
                // 1/(s^2 + a1 s + 1) with s -> wc/s
                sections.push(AnalogSection {
                    b: [1.0, 0.0, 0.0],
                    a: [1.0, a1 * wc, wc * wc],
                });
            }
            if has_real {
                // 1/(s + 1) -> s/(s + wc)
                sections.push(AnalogSection {
                    b: [0.0, 1.0, 0.0],
                    a: [0.0, 1.0, wc],
                });
            }
        }
        FilterKind::Bandpass => {
            let wl = warp(spec.cutoffs_hz[0]);
            let wh = warp(spec.cutoffs_hz[1]);
            let w0sq = wl * wh;
            let bw = wh - wl;
            let mut push_pole_pair = |re: f64, im: f64| {
                // conjugate pair (q, q*) -> s^2 - 2 Re(q) s + |q|^2
                sections.push(AnalogSection {
                    b: [0.0, bw, 0.0],
                    a: [1.0, -2.0 * re, re * re + im * im],
                });
            };
            for &a1 in &pairs {
                // prototype pair p = (-a1/2) +- j sqrt(1 - a1^2/4), |p| = 1
                let pre = -a1 / 2.0;
                let pim = (1.0 - pre * pre).max(0.0).sqrt();
                // q = (p bw +- sqrt((p bw)^2 - 4 w0^2)) / 2
                let (tre, tim) = (pre * bw, pim * bw);
                let (dre, dim) = (tre * tre - tim * tim - 4.0 * w0sq, 2.0 * tre * tim);
                let (sre, sim) = complex_sqrt(dre, dim);
                push_pole_pair((tre + sre) / 2.0, (tim + sim) / 2.0);
                push_pole_pair((tre - sre) / 2.0, (tim - sim) / 2.0);
            }
            if has_real {
                // real pole -1: q pair from s^2 + bw s + w0^2
                sections.push(AnalogSection {
                    b: [0.0, bw, 0.0],
                    a: [1.0, bw, w0sq],
                });
            }
        }
    }

    Ok(SosCascade {
        sections: sections.into_iter().map(|s| bilinear(s, c)).collect(),
        order: spec.order,
    })
}

/// `|H(e^{j 2 pi f / fs})|` of the cascade — direct evaluation of the
/// transfer function, usable as a design diagnostic.
pub fn sos_magnitude(cascade: &SosCascade, f_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f_hz / fs;
    let (zr, zi) = (w.cos(), -w.sin()); // z^-1
    let (z2r, z2i) = (zr * zr - zi * zi, 2.0 * zr * zi); // z^-2
    let mut mag = 1.0;
    for s in &cascade.sections {
        let nr = s.b[0] + s.b[1] * zr + s.b[2] * z2r;
        let ni = s.b[1] * zi + s.b[2] * z2i;
        let dr = 1.0 + s.a[0] * zr + s.a[1] * z2r;
        let di = s.a[0] * zi + s.a[1] * z2i;
        mag *= ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt();
    }
    mag
}

// ---------------------------------------------------------------------------
// zero-phase filtering
// ---------------------------------------------------------------------------

/// Run the cascade once, direct form II transposed, with initial state `zi`
/// per section scaled for input level `x0`.
fn sosfilt(x: &mut [f64], cascade: &SosCascade, x0: f64) {
    for (si, s) in cascade.sections.iter().enumerate() {
        // steady-state unit-step state of this section, scaled by the DC gain
        // of the preceding sections and the signal entry level
        let h1 = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
        let mut upstream = 1.0;
        for p in &cascade.sections[..si] {
            upstream *= (p.b[0] + p.b[1] + p.b[2]) / (1.0 + p.a[0] + p.a[1]);
        }
        let scale = upstream * x0;
        let mut z1 = (h1 - s.b[0]) * scale;
        let mut z2 = (s.b[2] - s.a[1] * h1) * scale;
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[0] * y + z2;
            z2 = s.b[2] * xin - s.a[1] * y;
            *v = y;
        }
    }
}

/// Forward-backward application: squared magnitude response, zero phase.
/// Edges are extended by odd reflection of length `3 * (2 * order)`.
pub fn filtfilt(x: &[f64], cascade: &SosCascade) -> Result<Vec<f64>, DspError> {
    let pad = 3 * (2 * cascade.order);
    if x.len() <= pad {
        return Err(DspError::SignalTooShort {
            len: x.len(),
            pad,
        });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let first = x[0];
    let last = x[n - 1];
    for i in (1..=pad).rev() {
        ext.push(2.0 * first - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * last - x[n - 1 - i]);
    }

    let x0 = ext[0];
    sosfilt(&mut ext, cascade, x0);
    ext.reverse();
    let x0 = ext[0];
    sosfilt(&mut ext, cascade, x0);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

// ---------------------------------------------------------------------------
// polyphase resampling
// ---------------------------------------------------------------------------

/// Rational rate change `up/down` with a Kaiser-windowed sinc low-pass of
/// half-length `10 * max(up, down)` taps.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleSpec {
    pub target_fs: f64,
    pub kaiser_beta: f64,
    pub up: usize,
    pub down: usize,
}

impl ResampleSpec {
    /// Reduce `target/source` to a coprime integer ratio. Rates are matched
    /// to milli-hertz resolution.
    pub fn from_rates(source_fs: f64, target_fs: f64) -> Result<Self, DspError> {
        if !(source_fs > 0.0) || !(target_fs > 0.0) {
            return Err(DspError::ZeroRate(source_fs, target_fs));
        }
        let up = (target_fs * 1000.0).round() as u64;
        let down = (source_fs * 1000.0).round() as u64;
        if up == 0 || down == 0 {
            return Err(DspError::ZeroRate(source_fs, target_fs));
        }
        let g = gcd(up, down);
        Ok(ResampleSpec {
            target_fs,
            kaiser_beta: KAISER_BETA,
            up: (up / g) as usize,
            down: (down / g) as usize,
        })
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (len - 1) as f64;
    (0..len)
        .map(|i| {
            let r = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Half-length multiplier of the anti-aliasing filter. The Kaiser beta is
/// fixed at 5.0, which caps the stopband near 37 dB; the length only has to
/// make the transition band narrow enough that the stopband is reached just
/// past the new Nyquist.
const RESAMPLE_TAPS_PER_RATE: usize = 40;

/// Anti-aliasing prototype: sinc at cutoff `1/max(up, down)` of the
/// upsampled Nyquist, Kaiser window, unit DC gain, then gain `up`.
fn design_resample_taps(spec: &ResampleSpec) -> (Vec<f64>, usize) {
    let max_rate = spec.up.max(spec.down);
    let half = RESAMPLE_TAPS_PER_RATE * max_rate;
    let len = 2 * half + 1;
    let fc = 1.0 / max_rate as f64;
    let win = kaiser_window(len, spec.kaiser_beta);
    let mut taps: Vec<f64> = (0..len)
        .map(|i| fc * sinc(fc * (i as f64 - half as f64)) * win[i])
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t = *t / sum * spec.up as f64;
    }
    (taps, half)
}

/// Polyphase resampling; output length `ceil(len * up / down)`, output sample
/// `m` aligned with input time `m * down / up` (group delay compensated,
/// zero-padded edges).
pub fn resample_polyphase(x: &[f64], spec: &ResampleSpec) -> Vec<f64> {
    if spec.up == spec.down {
        return x.to_vec();
    }
    let (taps, half) = design_resample_taps(spec);
    let n_out = (x.len() * spec.up).div_ceil(spec.down);
    let up = spec.up;
    let mut y = vec![0.0; n_out];
    for (m, out) in y.iter_mut().enumerate() {
        let base = m * spec.down + half;
        let mut j = base % up;
        let mut t = (base - j) / up;
        let mut acc = 0.0;
        // taps index j walks up while the input index t walks down
        while j < taps.len() {
            if t < x.len() {
                acc += taps[j] * x[t];
            }
            if t == 0 {
                break;
            }
            j += up;
            t -= 1;
        }
        *out = acc;
    }
    y
}

// ---------------------------------------------------------------------------
// normalization and the full per-record pipeline
// ---------------------------------------------------------------------------

/// Shift to zero mean and scale to unit population standard deviation.
pub fn znormalize(x: &[f64], label: &str) -> Result<Vec<f64>, DspError> {
    let constant = x.is_empty() || x.iter().all(|v| *v == x[0]);
    if constant {
        return Err(DspError::ConstantChannel(label.to_string()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(DspError::ConstantChannel(label.to_string()));
    }
    let inv = 1.0 / var.sqrt();
    Ok(x.iter().map(|v| (v - mean) * inv).collect())
}

/// Signal family of a derived channel; selects the conditioning filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Eeg,
    Eog,
    EmgChin,
    EmgLeg,
}

impl ChannelKind {
    pub fn filter_spec(self, fs: f64) -> FilterSpec {
        match self {
            ChannelKind::Eeg | ChannelKind::Eog => {
                FilterSpec::bandpass(EEG_BAND_HZ.0, EEG_BAND_HZ.1, BUTTER_ORDER, fs)
            }
            ChannelKind::EmgChin | ChannelKind::EmgLeg => {
                FilterSpec::highpass(EMG_HIGHPASS_HZ, BUTTER_ORDER, fs)
            }
        }
    }
}

/// A montage-derived channel awaiting preprocessing.
pub struct DerivedChannel {
    pub label: String,
    pub kind: ChannelKind,
    pub fs: f64,
    pub samples: Vec<f64>,
}

/// Fully preprocessed multichannel recording at 128 Hz: the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub labels: Vec<String>,
    pub fs: f64,
    /// `(C, T)` row-major
    pub channels: Vec<f32>,
    pub num_samples: usize,
    pub events: Vec<ScoredEvent>,
}

impl Recording {
    pub fn num_channels(&self) -> usize {
        self.labels.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c * self.num_samples..][..self.num_samples]
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples as f64 / self.fs
    }
}

/// Resample, filter and normalize one channel; `f64` throughout.
pub fn preprocess_channel(ch: &DerivedChannel) -> Result<Vec<f64>, DspError> {
    let spec = ResampleSpec::from_rates(ch.fs, TARGET_FS)?;
    let resampled = resample_polyphase(&ch.samples, &spec);
    let cascade = design_butterworth(&ch.kind.filter_spec(TARGET_FS))?;
    let filtered = filtfilt(&resampled, &cascade)?;
    znormalize(&filtered, &ch.label)
}

/// The whole per-record pipeline. Event timestamps are in seconds and pass
/// through unchanged. Channels process in parallel; if rational rate
/// reduction leaves channels off by a sample they are trimmed to the
/// shortest.
pub fn preprocess_record(
    channels: &[DerivedChannel],
    events: Vec<ScoredEvent>,
) -> Result<Recording, DspError> {
    let processed: Vec<Vec<f64>> = channels
        .par_iter()
        .map(preprocess_channel)
        .collect::<Result<_, _>>()?;
    let num_samples = processed.iter().map(|c| c.len()).min().unwrap_or(0);
    let mut flat = Vec::with_capacity(channels.len() * num_samples);
    for ch in &processed {
        flat.extend(ch[..num_samples].iter().map(|&v| v as f32));
    }
    Ok(Recording {
        labels: channels.iter().map(|c| c.label.clone()).collect(),
        fs: TARGET_FS,
        channels: flat,
        num_samples,
        events,
    })
}
