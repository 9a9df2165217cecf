//! The detection network and its target algebra.
//!
//! A segment of `C` channels and `T` samples runs through a linear channel
//! mixer, a pyramid of conv/batch-norm/ReLU/max-pool blocks (block `n` has
//! `2^(n+2)` kernels of size 3 and halves the temporal axis), optionally a
//! bidirectional GRU, and one classification/localization head pair per
//! default-event scale. Scale `tau` tiles the segment into `N_d = T / tau`
//! default windows; the classification head scores `K+1` classes per window
//! (class 0 is the non-event background) and the localization head predicts
//! a center offset and log duration ratio relative to the window.

use crate::autodiff::{
    BatchNormState, BgruWeights, Graph, GruDirection, NodeId, OpError, ParamId, ParamSet, Scalar,
    Tensor,
};
use crate::edf::ScoredEvent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("default scale {tau} does not divide segment length {t}")]
    NonDividing { t: usize, tau: usize },
    #[error("interval with non-positive duration")]
    EmptyInterval,
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("checkpoint does not describe this model: {0}")]
    BadCheckpoint(String),
}

/// Hard-negative mining ratio of the classification loss.
pub const NEGATIVES_PER_POSITIVE: usize = 3;
/// Localization loss weight.
pub const LOC_LOSS_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// input channels C
    pub channels: usize,
    /// segment length T in samples
    pub segment_len: usize,
    /// pyramid depth; the trunk emits `2^(2+n_max)` channels at `T / 2^n_max`
    pub n_max: usize,
    /// event classes K (class 0 is reserved for background)
    pub num_classes: usize,
    /// default-window sizes in samples, one head pair per entry
    pub scales: Vec<usize>,
    /// insert the bidirectional GRU between trunk and heads
    pub use_rnn: bool,
    /// minimum class probability for emitting a candidate
    pub theta_clf: f64,
    /// suppression threshold of the final NMS
    pub nms_iou: f64,
    /// IoU at which a default window matches a true event during training
    pub match_iou: f64,
    /// sampling rate of the preprocessed input
    pub fs: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.channels == 0 {
            return fail("zero input channels".into());
        }
        if self.n_max == 0 {
            return fail("pyramid depth must be at least 1".into());
        }
        if self.segment_len == 0 || self.segment_len % (1 << self.n_max) != 0 {
            return fail(format!(
                "segment length {} not divisible by 2^{}",
                self.segment_len, self.n_max
            ));
        }
        if self.num_classes == 0 {
            return fail("need at least one event class".into());
        }
        if self.scales.is_empty() {
            return fail("need at least one default-window scale".into());
        }
        for &tau in &self.scales {
            if tau == 0 || self.segment_len % tau != 0 {
                return Err(ModelError::NonDividing {
                    t: self.segment_len,
                    tau,
                });
            }
        }
        if !(self.theta_clf > 0.0 && self.theta_clf < 1.0) {
            return fail(format!("theta_clf {} outside (0,1)", self.theta_clf));
        }
        if !(self.fs > 0.0) {
            return fail(format!("sampling rate {}", self.fs));
        }
        Ok(())
    }

    /// trunk output channels
    pub fn c_tilde(&self) -> usize {
        1 << (2 + self.n_max)
    }

    /// trunk output length
    pub fn t_tilde(&self) -> usize {
        self.segment_len >> self.n_max
    }

    /// channels entering the heads
    pub fn head_in_channels(&self) -> usize {
        if self.use_rnn {
            2 * self.c_tilde()
        } else {
            self.c_tilde()
        }
    }

    pub fn n_defaults(&self, tau: usize) -> usize {
        self.segment_len / tau
    }

    pub fn segment_s(&self) -> f64 {
        self.segment_len as f64 / self.fs
    }
}

// ---------------------------------------------------------------------------
// intervals, grids, IoU
// ---------------------------------------------------------------------------

/// Half-open interval on the segment or recording timeline, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn from_event(e: &ScoredEvent) -> Self {
        Interval {
            start: e.start_s,
            end: e.end_s(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }
}

/// Jaccard index of two intervals.
pub fn iou(a: Interval, b: Interval) -> Result<f64, ModelError> {
    if !(a.duration() > 0.0) || !(b.duration() > 0.0) {
        return Err(ModelError::EmptyInterval);
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    Ok(inter / union)
}

/// The `N_d = T / tau` default event windows tiling a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultGrid {
    /// window size in samples
    pub tau: usize,
    /// tiling of `[0, T)` in samples
    pub windows: Vec<(usize, usize)>,
}

pub fn default_grid(segment_len: usize, tau: usize) -> Result<DefaultGrid, ModelError> {
    if tau == 0 || segment_len % tau != 0 {
        return Err(ModelError::NonDividing {
            t: segment_len,
            tau,
        });
    }
    let n_d = segment_len / tau;
    Ok(DefaultGrid {
        tau,
        windows: (0..n_d).map(|j| (j * tau, (j + 1) * tau)).collect(),
    })
}

impl DefaultGrid {
    /// Window `j` as a second-domain interval.
    pub fn window_s(&self, j: usize, fs: f64) -> Interval {
        let (a, b) = self.windows[j];
        Interval::new(a as f64 / fs, b as f64 / fs)
    }
}

// ---------------------------------------------------------------------------
// target encoding / decoding
// ---------------------------------------------------------------------------

/// Per-scale supervision for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleAssignment {
    pub tau: usize,
    /// `N_d` class indices, 0 for background
    pub class_target: Vec<u32>,
    /// `(2, N_d)` row-major: center offset / tau, ln(duration / tau)
    pub loc_target: Vec<f64>,
    pub match_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub scales: Vec<ScaleAssignment>,
}

impl TargetAssignment {
    pub fn num_matched(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.match_mask.iter().filter(|&&m| m).count())
            .sum()
    }
}

/// Match true events to default windows.
///
/// A window takes the class of its best-IoU event when that IoU reaches
/// `match_iou`; additionally every event forces its single best-IoU window
/// positive. When two events contend for the same forced window the higher
/// IoU wins. Matched windows carry `(center offset / tau, ln(duration/tau))`
/// localization targets.
pub fn encode_targets(
    events: &[ScoredEvent],
    config: &ModelConfig,
) -> Result<TargetAssignment, ModelError> {
    let mut scales = Vec::with_capacity(config.scales.len());
    for &tau in &config.scales {
        let grid = default_grid(config.segment_len, tau)?;
        let n_d = grid.windows.len();
        let tau_s = tau as f64 / config.fs;
        let mut class_target = vec![0u32; n_d];
        let mut assigned_event: Vec<Option<usize>> = vec![None; n_d];

        let ious: Vec<Vec<f64>> = events
            .iter()
            .map(|e| {
                (0..n_d)
                    .map(|j| {
                        iou(Interval::from_event(e), grid.window_s(j, config.fs)).unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();

        // threshold rule: window takes its best event at IoU >= match_iou
        for j in 0..n_d {
            let mut best: Option<(usize, f64)> = None;
            for (i, row) in ious.iter().enumerate() {
                if best.map_or(true, |(_, b)| row[j] > b) {
                    best = Some((i, row[j]));
                }
            }
            if let Some((i, v)) = best {
                if v >= config.match_iou {
                    assigned_event[j] = Some(i);
                }
            }
        }
        // forced-best rule: each event claims its best window; on collision
        // the higher IoU keeps it
        let mut forced: Vec<Option<(usize, f64)>> = vec![None; n_d];
        for (i, row) in ious.iter().enumerate() {
            let mut best_j = 0usize;
            for j in 1..n_d {
                if row[j] > row[best_j] {
                    best_j = j;
                }
            }
            if n_d == 0 || row.is_empty() || row[best_j] <= 0.0 {
                continue;
            }
            match forced[best_j] {
                Some((_, v)) if v >= row[best_j] => {}
                _ => forced[best_j] = Some((i, row[best_j])),
            }
        }
        for j in 0..n_d {
            if let Some((i, _)) = forced[j] {
                assigned_event[j] = Some(i);
            }
        }

        let mut loc_target = vec![0.0; 2 * n_d];
        let mut match_mask = vec![false; n_d];
        for j in 0..n_d {
            if let Some(i) = assigned_event[j] {
                let e = &events[i];
                let w = grid.window_s(j, config.fs);
                class_target[j] = e.class_k;
                loc_target[j] = (Interval::from_event(e).center() - w.center()) / tau_s;
                loc_target[n_d + j] = (e.duration_s / tau_s).ln();
                match_mask[j] = true;
            }
        }
        scales.push(ScaleAssignment {
            tau,
            class_target,
            loc_target,
            match_mask,
        });
    }
    Ok(TargetAssignment { scales })
}

/// One thresholdable detection: class, probability and its interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEvent {
    pub class_k: u32,
    pub probability: f64,
    pub start_s: f64,
    pub duration_s: f64,
}

impl CandidateEvent {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start_s, self.start_s + self.duration_s)
    }
}

/// Raw per-scale network outputs for a batch of segments.
#[derive(Debug, Clone)]
pub struct ScalePredictions<T> {
    pub tau: usize,
    /// `(B, K+1, N_d)` simplex along the class axis
    pub class_probs: Tensor<T>,
    /// `(B, 2, N_d)`: center offset / tau, ln(duration / tau)
    pub loc: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct RawPredictions<T> {
    pub batch: usize,
    pub scales: Vec<ScalePredictions<T>>,
}

/// Invert the target encoding: every (window, event class) pair becomes a
/// candidate carrying its probability and decoded interval in
/// segment-relative seconds. Thresholding happens downstream.
pub fn decode_loc<T: Scalar>(
    raw: &RawPredictions<T>,
    config: &ModelConfig,
) -> Vec<Vec<CandidateEvent>> {
    let mut out = vec![Vec::new(); raw.batch];
    for sp in &raw.scales {
        let n_d = config.n_defaults(sp.tau);
        let tau_s = sp.tau as f64 / config.fs;
        let classes = config.num_classes + 1;
        for b in 0..raw.batch {
            for j in 0..n_d {
                let window_center = (j as f64 + 0.5) * tau_s;
                let off = Scalar::into_f64(sp.loc.data()[(b * 2) * n_d + j]);
                let log_ratio = Scalar::into_f64(sp.loc.data()[(b * 2 + 1) * n_d + j]);
                let center = window_center + off * tau_s;
                let duration = tau_s * log_ratio.exp();
                for k in 1..classes {
                    let p = Scalar::into_f64(sp.class_probs.data()[(b * classes + k) * n_d + j]);
                    out[b].push(CandidateEvent {
                        class_k: k as u32,
                        probability: p,
                        start_s: center - duration / 2.0,
                        duration_s: duration,
                    });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// the detector
// ---------------------------------------------------------------------------

struct ConvParams {
    w: ParamId,
    b: ParamId,
}

struct BlockParams {
    conv: ConvParams,
    gamma: ParamId,
    beta: ParamId,
}

struct GruDirParams {
    w_x: ParamId,
    w_h: ParamId,
    b_x: ParamId,
    b_h: ParamId,
}

struct HeadParams {
    tau: usize,
    clf: ConvParams,
    loc: ConvParams,
}

/// Detector parameters plus batch-norm running statistics.
///
/// Immutable during inference ([`Detector::infer`]); training forward passes
/// take `&mut self` because they update the running statistics.
pub struct Detector<T: Scalar> {
    pub config: ModelConfig,
    params: ParamSet<T>,
    bn_states: Vec<BatchNormState<T>>,
    mixer: ConvParams,
    blocks: Vec<BlockParams>,
    rnn: Option<[GruDirParams; 2]>,
    heads: Vec<HeadParams>,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random square orthogonal matrix via modified Gram-Schmidt.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n * n).map(|_| gaussian(rng)).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            for k in 0..n {
                m[i * n + k] -= dot * m[j * n + k];
            }
        }
        let norm: f64 = (0..n)
            .map(|k| m[i * n + k] * m[i * n + k])
            .sum::<f64>()
            .sqrt();
        for k in 0..n {
            m[i * n + k] /= norm;
        }
    }
    m
}

fn tensor_from_f64<T: Scalar>(shape: &[usize], data: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec(shape, data.into_iter().map(|v| T::from_f64(v)).collect())
}

impl<T: Scalar> Detector<T> {
    /// Build a detector with deterministic weight initialization: He-uniform
    /// for convolutions and GRU input projections, orthogonal per-gate GRU
    /// recurrent weights, unit gamma / zero beta batch norm.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Detector<T>, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut bn_states = Vec::new();

        let c = config.channels;
        let conv = |params: &mut ParamSet<T>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        c_out: usize,
                        c_in: usize,
                        k: usize| {
            let w = params.register(
                format!("{name}.w"),
                tensor_from_f64(&[c_out, c_in, k], he_uniform(rng, c_in * k, c_out * c_in * k)),
            );
            let b = params.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
            ConvParams { w, b }
        };

        let mixer = conv(&mut params, &mut rng, "mixer", c, c, 1);

        let mut blocks = Vec::with_capacity(config.n_max);
        let mut c_in = c;
        for n in 1..=config.n_max {
            let c_out = 1 << (n + 2);
            let name = format!("trunk.{n}");
            let convp = conv(&mut params, &mut rng, &format!("{name}.conv"), c_out, c_in, 3);
            let gamma =
                params.register(format!("{name}.bn.gamma"), Tensor::full(&[c_out], T::one()));
            let beta = params.register(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
            bn_states.push(BatchNormState::new(c_out));
            blocks.push(BlockParams {
                conv: convp,
                gamma,
                beta,
            });
            c_in = c_out;
        }

        let rnn = if config.use_rnn {
            let h = config.c_tilde();
            let dir = |params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str| {
                let w_x = params.register(
                    format!("{name}.w_x"),
                    tensor_from_f64(&[h, 3 * h], he_uniform(rng, h, h * 3 * h)),
                );
                let mut w_h_data = vec![0.0f64; h * 3 * h];
                for gate in 0..3 {
                    let q = orthogonal(rng, h);
                    for r in 0..h {
                        for cidx in 0..h {
                            w_h_data[r * 3 * h + gate * h + cidx] = q[r * h + cidx];
                        }
                    }
                }
                let w_h =
                    params.register(format!("{name}.w_h"), tensor_from_f64(&[h, 3 * h], w_h_data));
                let b_x = params.register(format!("{name}.b_x"), Tensor::zeros(&[3 * h]));
                let b_h = params.register(format!("{name}.b_h"), Tensor::zeros(&[3 * h]));
                GruDirParams { w_x, w_h, b_x, b_h }
            };
            Some([
                dir(&mut params, &mut rng, "rnn.fwd"),
                dir(&mut params, &mut rng, "rnn.bwd"),
            ])
        } else {
            None
        };

        let head_in = config.head_in_channels();
        let t_t = config.t_tilde();
        let mut heads = Vec::with_capacity(config.scales.len());
        for &tau in &config.scales {
            let n_d = config.n_defaults(tau);
            let clf = conv(
                &mut params,
                &mut rng,
                &format!("head.{tau}.clf"),
                (config.num_classes + 1) * n_d,
                head_in,
                t_t,
            );
            let loc = conv(
                &mut params,
                &mut rng,
                &format!("head.{tau}.loc"),
                2 * n_d,
                head_in,
                t_t,
            );
            heads.push(HeadParams { tau, clf, loc });
        }

        Ok(Detector {
            config,
            params,
            bn_states,
            mixer,
            blocks,
            rnn,
            heads,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn_states
    }
}

/// Graph handles of one forward pass.
pub struct ForwardNodes {
    /// leaf node of every parameter, aligned with `ParamSet` order
    pub param_nodes: Vec<NodeId>,
    /// trunk output entering the heads
    pub trunk: NodeId,
    /// `(channels, length)` after each pyramid block
    pub block_shapes: Vec<(usize, usize)>,
    pub scales: Vec<ScaleNodes>,
}

pub struct ScaleNodes {
    pub tau: usize,
    /// `(B, K+1, N_d)` pre-softmax
    pub logits: NodeId,
    /// `(B, K+1, N_d)` softmax probabilities
    pub probs: NodeId,
    /// `(B, 2, N_d)`
    pub loc: NodeId,
}

impl<T: Scalar> Detector<T> {
    /// Training-mode forward: parameters become differentiable leaves and
    /// batch-norm running statistics are updated in place.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        training: bool,
    ) -> Result<ForwardNodes, ModelError> {
        let wiring = ModelWiring::of(self);
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), true))
            .collect();
        let bn = BnMode::Mutable(&mut self.bn_states, training);
        forward_with_params(&self.config, &wiring, g, &param_nodes, x, bn)
    }

    /// Inference on a frozen model: no gradient tracking, running statistics
    /// are read-only.
    pub fn infer(&self, g: &mut Graph<T>, x: NodeId) -> Result<ForwardNodes, ModelError> {
        let wiring = ModelWiring::of(self);
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), false))
            .collect();
        forward_with_params(
            &self.config,
            &wiring,
            g,
            &param_nodes,
            x,
            BnMode::Frozen(&self.bn_states),
        )
    }

    /// Copy the value tensors of one forward pass out of the graph.
    pub fn predictions(&self, g: &Graph<T>, fwd: &ForwardNodes, batch: usize) -> RawPredictions<T> {
        RawPredictions {
            batch,
            scales: fwd
                .scales
                .iter()
                .map(|s| ScalePredictions {
                    tau: s.tau,
                    class_probs: g.value(s.probs).clone(),
                    loc: g.value(s.loc).clone(),
                })
                .collect(),
        }
    }
}

/// Index map from semantic slots to `ParamSet` order, so a forward pass can
/// be driven either by a detector or by externally supplied leaves (the
/// gradient checker does the latter).
pub struct ModelWiring {
    mixer: (usize, usize),
    blocks: Vec<((usize, usize), usize, usize)>,
    rnn: Option<[[usize; 4]; 2]>,
    heads: Vec<(usize, (usize, usize), (usize, usize))>,
}

impl ModelWiring {
    pub fn of<T: Scalar>(det: &Detector<T>) -> ModelWiring {
        let ix = |p: ParamId| p.index();
        ModelWiring {
            mixer: (ix(det.mixer.w), ix(det.mixer.b)),
            blocks: det
                .blocks
                .iter()
                .map(|b| ((ix(b.conv.w), ix(b.conv.b)), ix(b.gamma), ix(b.beta)))
                .collect(),
            rnn: det.rnn.as_ref().map(|dirs| {
                [
                    [
                        ix(dirs[0].w_x),
                        ix(dirs[0].w_h),
                        ix(dirs[0].b_x),
                        ix(dirs[0].b_h),
                    ],
                    [
                        ix(dirs[1].w_x),
                        ix(dirs[1].w_h),
                        ix(dirs[1].b_x),
                        ix(dirs[1].b_h),
                    ],
                ]
            }),
            heads: det
                .heads
                .iter()
                .map(|h| {
                    (
                        h.tau,
                        (ix(h.clf.w), ix(h.clf.b)),
                        (ix(h.loc.w), ix(h.loc.b)),
                    )
                })
                .collect(),
        }
    }
}

pub enum BnMode<'a, T> {
    Mutable(&'a mut [BatchNormState<T>], bool),
    Frozen(&'a [BatchNormState<T>]),
}

/// Assemble the network on the tape from parameter leaf nodes.
pub fn forward_with_params<T: Scalar>(
    config: &ModelConfig,
    wiring: &ModelWiring,
    g: &mut Graph<T>,
    param_nodes: &[NodeId],
    x: NodeId,
    mut bn: BnMode<'_, T>,
) -> Result<ForwardNodes, ModelError> {
    let xsh = g.value(x).shape().to_vec();
    if xsh.len() != 3 || xsh[1] != config.channels || xsh[2] != config.segment_len {
        return Err(ModelError::Op(OpError::ShapeMismatch {
            op: "forward",
            detail: format!(
                "input {:?} vs (B, {}, {})",
                xsh, config.channels, config.segment_len
            ),
        }));
    }
    let bsz = xsh[0];

    // linear channel mixing as a width-1 convolution across all C inputs
    let mut h = g.conv1d(
        x,
        param_nodes[wiring.mixer.0],
        param_nodes[wiring.mixer.1],
        1,
        0,
    )?;

    let mut block_shapes = Vec::with_capacity(wiring.blocks.len());
    for (i, ((w, b), gamma, beta)) in wiring.blocks.iter().enumerate() {
        let conv = g.conv1d(h, param_nodes[*w], param_nodes[*b], 1, 1)?;
        let normed = match &mut bn {
            BnMode::Mutable(states, training) => g.batchnorm1d(
                conv,
                param_nodes[*gamma],
                param_nodes[*beta],
                &mut states[i],
                *training,
            )?,
            BnMode::Frozen(states) => {
                g.batchnorm1d_frozen(conv, param_nodes[*gamma], param_nodes[*beta], &states[i])?
            }
        };
        let act = g.relu(normed);
        h = g.maxpool1d(act, 2, 2)?;
        let sh = g.value(h).shape();
        block_shapes.push((sh[1], sh[2]));
    }

    if let Some(dirs) = &wiring.rnn {
        let weights = BgruWeights {
            fwd: GruDirection {
                w_x: param_nodes[dirs[0][0]],
                w_h: param_nodes[dirs[0][1]],
                b_x: param_nodes[dirs[0][2]],
                b_h: param_nodes[dirs[0][3]],
            },
            bwd: GruDirection {
                w_x: param_nodes[dirs[1][0]],
                w_h: param_nodes[dirs[1][1]],
                b_x: param_nodes[dirs[1][2]],
                b_h: param_nodes[dirs[1][3]],
            },
        };
        h = g.bgru(h, &weights)?;
    }

    let t_t = config.t_tilde();
    let classes = config.num_classes + 1;
    let mut scales = Vec::with_capacity(wiring.heads.len());
    for (tau, clf, loc) in &wiring.heads {
        let n_d = config.n_defaults(*tau);
        let clf_out = g.conv1d(h, param_nodes[clf.0], param_nodes[clf.1], t_t, 0)?;
        let logits = g.reshape(clf_out, &[bsz, classes, n_d]);
        let probs = g.softmax(logits, 1)?;
        let loc_out = g.conv1d(h, param_nodes[loc.0], param_nodes[loc.1], t_t, 0)?;
        let loc_n = g.reshape(loc_out, &[bsz, 2, n_d]);
        scales.push(ScaleNodes {
            tau: *tau,
            logits,
            probs,
            loc: loc_n,
        });
    }

    Ok(ForwardNodes {
        param_nodes: param_nodes.to_vec(),
        trunk: h,
        block_shapes,
        scales,
    })
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Detection loss over a batch: cross-entropy over matched windows plus
/// hard-mined negatives (3 background windows per positive, chosen by
/// descending background loss, pooled over the batch and all scales), and a
/// smooth-L1 localization term averaged over matched windows. Without any
/// positive in the batch the localization term vanishes and a quarter of the
/// windows (the hardest) feed the cross-entropy.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &ForwardNodes,
    targets: &[TargetAssignment],
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    let bsz = targets.len();
    let classes = config.num_classes + 1;

    struct WindowRef {
        scale: usize,
        flat: usize,
        bg_loss: f64,
    }
    let mut positives_per_scale: Vec<Vec<bool>> = Vec::new();
    let mut class_targets: Vec<Vec<u32>> = Vec::new();
    let mut negatives: Vec<WindowRef> = Vec::new();
    let mut total_windows = 0usize;
    let mut num_pos = 0usize;

    for (si, sn) in fwd.scales.iter().enumerate() {
        let n_d = config.n_defaults(sn.tau);
        let mut pos = vec![false; bsz * n_d];
        let mut tcls = vec![0u32; bsz * n_d];
        let logits = g.value(sn.logits);
        for (b, t) in targets.iter().enumerate() {
            let sa = &t.scales[si];
            debug_assert_eq!(sa.tau, sn.tau);
            for j in 0..n_d {
                let flat = b * n_d + j;
                total_windows += 1;
                if sa.match_mask[j] {
                    pos[flat] = true;
                    tcls[flat] = sa.class_target[j];
                    num_pos += 1;
                } else {
                    // -log softmax_0 of this window
                    let idx_of = |cls: usize| (b * classes + cls) * n_d + j;
                    let mut mx = Scalar::into_f64(logits.data()[idx_of(0)]);
                    for cidx in 1..classes {
                        mx = mx.max(Scalar::into_f64(logits.data()[idx_of(cidx)]));
                    }
                    let mut z = 0.0;
                    for cidx in 0..classes {
                        z += (Scalar::into_f64(logits.data()[idx_of(cidx)]) - mx).exp();
                    }
                    let bg_loss = -(Scalar::into_f64(logits.data()[idx_of(0)]) - mx - z.ln());
                    negatives.push(WindowRef {
                        scale: si,
                        flat,
                        bg_loss,
                    });
                }
            }
        }
        positives_per_scale.push(pos);
        class_targets.push(tcls);
    }

    let wanted_negatives = if num_pos > 0 {
        NEGATIVES_PER_POSITIVE * num_pos
    } else {
        (total_windows / 4).max(1)
    };
    negatives.sort_by(|a, b| {
        b.bg_loss
            .total_cmp(&a.bg_loss)
            .then(a.scale.cmp(&b.scale))
            .then(a.flat.cmp(&b.flat))
    });
    let mut selected = positives_per_scale.clone();
    for neg in negatives.iter().take(wanted_negatives) {
        selected[neg.scale][neg.flat] = true;
    }
    let ce_count: usize = selected
        .iter()
        .map(|s| s.iter().filter(|&&v| v).count())
        .sum();

    let mut ce_total: Option<NodeId> = None;
    let mut loc_total: Option<NodeId> = None;
    for (si, sn) in fwd.scales.iter().enumerate() {
        let n_d = config.n_defaults(sn.tau);
        if selected[si].iter().any(|&v| v) {
            let ce = g.cross_entropy_sum(sn.logits, &class_targets[si], &selected[si])?;
            ce_total = Some(match ce_total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
        if num_pos > 0 && positives_per_scale[si].iter().any(|&v| v) {
            let mut loc_target = Tensor::zeros(&[bsz, 2, n_d]);
            for (b, t) in targets.iter().enumerate() {
                let sa = &t.scales[si];
                for j in 0..n_d {
                    loc_target.data_mut()[(b * 2) * n_d + j] = T::from_f64(sa.loc_target[j]);
                    loc_target.data_mut()[(b * 2 + 1) * n_d + j] =
                        T::from_f64(sa.loc_target[n_d + j]);
                }
            }
            let l1 = g.smooth_l1_sum(sn.loc, &loc_target, &positives_per_scale[si])?;
            loc_total = Some(match loc_total {
                None => l1,
                Some(acc) => g.add(acc, l1)?,
            });
        }
    }

    let ce_mean = ce_total
        .map(|ce| g.scale(ce, T::from_f64(1.0 / ce_count as f64)))
        .ok_or(ModelError::Op(OpError::EmptyTargetSet))?;
    Ok(match loc_total {
        Some(l1) => {
            let l1_mean = g.scale(l1, T::from_f64(LOC_LOSS_WEIGHT / num_pos as f64));
            g.add(ce_mean, l1_mean)?
        }
        None => ce_mean,
    })
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

impl Detector<f32> {
    /// Serialize parameters, batch-norm statistics and the configuration.
    pub fn to_checkpoint(&self, extra_meta: serde_json::Value) -> crate::autodiff::Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "extra": extra_meta,
        });
        let mut ck = crate::autodiff::Checkpoint::new(meta);
        for p in self.params.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        for (i, st) in self.bn_states.iter().enumerate() {
            ck.push(
                format!("trunk.{}.bn.running_mean", i + 1),
                st.running_mean.clone(),
            );
            ck.push(
                format!("trunk.{}.bn.running_var", i + 1),
                st.running_var.clone(),
            );
        }
        ck
    }

    pub fn from_checkpoint(ck: &crate::autodiff::Checkpoint) -> Result<Detector<f32>, ModelError> {
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| ModelError::BadCheckpoint(format!("config: {e}")))?;
        let mut det = Detector::<f32>::build(config, 0)?;
        for id in det.params.ids().collect::<Vec<_>>() {
            let name = det.params.name(id).to_string();
            let stored = ck
                .get(&name)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing tensor {name}")))?;
            if stored.shape() != det.params.value(id).shape() {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    stored.shape(),
                    det.params.value(id).shape()
                )));
            }
            *det.params.value_mut(id) = stored.clone();
        }
        for i in 0..det.bn_states.len() {
            let mean = ck
                .get(&format!("trunk.{}.bn.running_mean", i + 1))
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing bn stats {i}")))?;
            let var = ck
                .get(&format!("trunk.{}.bn.running_var", i + 1))
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing bn stats {i}")))?;
            det.bn_states[i] = BatchNormState {
                running_mean: mean.clone(),
                running_var: var.clone(),
            };
        }
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 2,
            segment_len: 64,
            n_max: 2,
            num_classes: 1,
            scales: vec![16],
            use_rnn: false,
            theta_clf: 0.5,
            nms_iou: 0.3,
            match_iou: 0.5,
            fs: 8.0,
        }
    }

    #[test]
    fn config_shape_formulas() {
        let cfg = ModelConfig {
            channels: 6,
            segment_len: 15360,
            n_max: 7,
            num_classes: 1,
            scales: vec![384],
            use_rnn: false,
            theta_clf: 0.6,
            nms_iou: 0.3,
            match_iou: 0.5,
            fs: 128.0,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.c_tilde(), 512);
        assert_eq!(cfg.t_tilde(), 120);
        assert_eq!(cfg.n_defaults(384), 40);
        let rnn = ModelConfig {
            use_rnn: true,
            ..cfg
        };
        assert_eq!(rnn.head_in_channels(), 1024);
    }

    #[test]
    fn default_grid_tiles_exactly() {
        let g = default_grid(3840, 384).unwrap();
        assert_eq!(g.windows.len(), 10);
        assert_eq!(g.windows[0], (0, 384));
        assert_eq!(g.windows[9], (3456, 3840));
        for w in g.windows.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }

        let g = default_grid(3840, 3840).unwrap();
        assert_eq!(g.windows, vec![(0, 3840)]);

        assert!(matches!(
            default_grid(3840, 1000),
            Err(ModelError::NonDividing { .. })
        ));
    }

    #[test]
    fn iou_basics() {
        let a = Interval::new(0.0, 10.0);
        assert_eq!(iou(a, a).unwrap(), 1.0);
        assert_eq!(iou(a, Interval::new(20.0, 30.0)).unwrap(), 0.0);
        let v = iou(a, Interval::new(5.0, 15.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert!(iou(a, Interval::new(5.0, 5.0)).is_err());
    }

    #[test]
    fn encode_exact_window_event() {
        let cfg = tiny_config();
        // window 1 of the 16-sample grid at fs 8: [2 s, 4 s)
        let events = vec![ScoredEvent::new(1, 2.0, 2.0)];
        let t = encode_targets(&events, &cfg).unwrap();
        let sa = &t.scales[0];
        assert_eq!(sa.class_target[1], 1);
        assert!(sa.match_mask[1]);
        assert_eq!(sa.loc_target[1], 0.0);
        assert_eq!(sa.loc_target[4 + 1], 0.0);
        assert_eq!(sa.match_mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn encode_no_events_all_background() {
        let cfg = tiny_config();
        let t = encode_targets(&[], &cfg).unwrap();
        let sa = &t.scales[0];
        assert!(sa.class_target.iter().all(|&c| c == 0));
        assert!(sa.match_mask.iter().all(|&m| !m));
    }

    #[test]
    fn encode_forces_best_window_for_low_iou_event() {
        let cfg = tiny_config();
        // 0.25 s event inside window 2 ([4 s, 6 s)): IoU 0.125 < 0.5, still matched
        let events = vec![ScoredEvent::new(1, 4.5, 0.25)];
        let t = encode_targets(&events, &cfg).unwrap();
        let sa = &t.scales[0];
        assert!(sa.match_mask[2]);
        assert_eq!(sa.class_target[2], 1);
        assert_eq!(sa.match_mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn encode_decode_roundtrip_on_forced_best() {
        let cfg = tiny_config();
        let events = vec![ScoredEvent::new(1, 2.4, 1.7)];
        let t = encode_targets(&events, &cfg).unwrap();
        let sa = &t.scales[0];
        let j = sa.match_mask.iter().position(|&m| m).unwrap();
        let n_d = cfg.n_defaults(16);
        // plant the encoded target as the raw localization output
        let mut loc = Tensor::<f64>::zeros(&[1, 2, n_d]);
        loc.data_mut()[j] = sa.loc_target[j];
        loc.data_mut()[n_d + j] = sa.loc_target[n_d + j];
        let mut probs = Tensor::<f64>::zeros(&[1, 2, n_d]);
        probs.data_mut()[n_d + j] = 1.0; // class 1 certain
        let raw = RawPredictions {
            batch: 1,
            scales: vec![ScalePredictions {
                tau: 16,
                class_probs: probs,
                loc,
            }],
        };
        let decoded = decode_loc(&raw, &cfg);
        let cand = decoded[0]
            .iter()
            .find(|c| c.probability > 0.9)
            .expect("candidate for matched window");
        assert!((cand.start_s - 2.4).abs() < 1e-6);
        assert!((cand.duration_s - 1.7).abs() < 1e-6);
    }

    #[test]
    fn decode_identity_window() {
        let cfg = tiny_config();
        let n_d = cfg.n_defaults(16);
        let mut probs = Tensor::<f64>::zeros(&[1, 2, n_d]);
        for j in 0..n_d {
            probs.data_mut()[n_d + j] = 0.8;
        }
        let raw = RawPredictions {
            batch: 1,
            scales: vec![ScalePredictions {
                tau: 16,
                class_probs: probs,
                loc: Tensor::<f64>::zeros(&[1, 2, n_d]),
            }],
        };
        let decoded = decode_loc(&raw, &cfg);
        // window 1 spans [2 s, 4 s); zero offsets decode back to it
        let c = &decoded[0][1];
        assert!((c.start_s - 2.0).abs() < 1e-9);
        assert!((c.duration_s - 2.0).abs() < 1e-9);
    }

    #[test]
    fn build_reports_invalid_configs() {
        let mut cfg = tiny_config();
        cfg.scales = vec![17];
        assert!(matches!(
            Detector::<f32>::build(cfg, 0),
            Err(ModelError::NonDividing { .. })
        ));

        let mut cfg = tiny_config();
        cfg.segment_len = 66;
        assert!(Detector::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let cfg = tiny_config();
        let mut det: Detector<f32> = Detector::build(cfg.clone(), 7).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(
                &[2, 2, 64],
                (0..256).map(|i| (i as f32 * 0.11).sin()).collect(),
            ),
            false,
        );
        let fwd = det.forward(&mut g, x, true).unwrap();
        assert_eq!(fwd.block_shapes, vec![(8, 32), (16, 16)]);
        let sn = &fwd.scales[0];
        assert_eq!(g.value(sn.probs).shape(), &[2, 2, 4]);
        assert_eq!(g.value(sn.loc).shape(), &[2, 2, 4]);
        for b in 0..2 {
            for j in 0..4 {
                let p0 = g.value(sn.probs).data()[(b * 2) * 4 + j];
                let p1 = g.value(sn.probs).data()[(b * 2 + 1) * 4 + j];
                assert!((p0 + p1 - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let cfg = tiny_config();
        let run = || {
            let mut det: Detector<f32> = Detector::build(cfg.clone(), 42).unwrap();
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::from_vec(
                    &[1, 2, 64],
                    (0..128).map(|i| (i as f32 * 0.37).cos()).collect(),
                ),
                false,
            );
            let fwd = det.forward(&mut g, x, true).unwrap();
            g.value(fwd.scales[0].probs).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rnn_head_consumes_doubled_channels() {
        let mut cfg = tiny_config();
        cfg.use_rnn = true;
        let mut det: Detector<f32> = Detector::build(cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 64]), false);
        let fwd = det.forward(&mut g, x, false).unwrap();
        assert_eq!(g.value(fwd.trunk).shape(), &[1, 32, 16]);
        assert_eq!(g.value(fwd.scales[0].probs).shape(), &[1, 2, 4]);
    }

    #[test]
    fn loss_zero_for_perfect_predictions() {
        let cfg = tiny_config();
        let events = vec![ScoredEvent::new(1, 2.0, 2.0)];
        let targets = vec![encode_targets(&events, &cfg).unwrap()];
        let n_d = 4;
        let mut g: Graph<f64> = Graph::new();
        // logits strongly favoring the correct class everywhere
        let mut logits = Tensor::zeros(&[1, 2, n_d]);
        for j in 0..n_d {
            let cls = targets[0].scales[0].class_target[j] as usize;
            logits.data_mut()[cls * n_d + j] = 40.0;
            logits.data_mut()[(1 - cls) * n_d + j] = -40.0;
        }
        let logits_id = g.leaf(logits, false);
        let probs = g.softmax(logits_id, 1).unwrap();
        let mut loc = Tensor::zeros(&[1, 2, n_d]);
        for j in 0..n_d {
            loc.data_mut()[j] = targets[0].scales[0].loc_target[j];
            loc.data_mut()[n_d + j] = targets[0].scales[0].loc_target[n_d + j];
        }
        let loc_id = g.leaf(loc, false);
        let fwd = ForwardNodes {
            param_nodes: vec![],
            trunk: logits_id,
            block_shapes: vec![],
            scales: vec![ScaleNodes {
                tau: 16,
                logits: logits_id,
                probs,
                loc: loc_id,
            }],
        };
        let loss = detection_loss(&mut g, &fwd, &targets, &cfg).unwrap();
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn loss_uniform_predictions_hit_ln2() {
        let cfg = tiny_config();
        let events = vec![ScoredEvent::new(1, 2.0, 2.0)];
        let targets = vec![encode_targets(&events, &cfg).unwrap()];
        let n_d = 4;
        let mut g: Graph<f64> = Graph::new();
        let logits_id = g.leaf(Tensor::zeros(&[1, 2, n_d]), false);
        let probs = g.softmax(logits_id, 1).unwrap();
        // exact localization so only the CE term remains
        let mut loc = Tensor::zeros(&[1, 2, n_d]);
        for j in 0..n_d {
            loc.data_mut()[j] = targets[0].scales[0].loc_target[j];
            loc.data_mut()[n_d + j] = targets[0].scales[0].loc_target[n_d + j];
        }
        let loc_id = g.leaf(loc, false);
        let fwd = ForwardNodes {
            param_nodes: vec![],
            trunk: logits_id,
            block_shapes: vec![],
            scales: vec![ScaleNodes {
                tau: 16,
                logits: logits_id,
                probs,
                loc: loc_id,
            }],
        };
        let loss = detection_loss(&mut g, &fwd, &targets, &cfg).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let cfg = tiny_config();
        let mut det: Detector<f32> = Detector::build(cfg, 99).unwrap();
        // give running stats a non-default value
        det.bn_states[0].running_mean.data_mut()[0] = 0.25;
        det.to_checkpoint(serde_json::json!({}))
            .save(&path)
            .unwrap();
        let ck = crate::autodiff::Checkpoint::load(&path).unwrap();
        let back = Detector::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config, det.config);
        for (a, b) in det.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(back.bn_states[0].running_mean.data()[0], 0.25);
    }
}
