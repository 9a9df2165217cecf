//! Mini-batch SGD with momentum, eval-loss early stopping and stepped
//! learning-rate decay: training runs until the eval loss has not improved
//! for 10 epochs, halving the learning rate after every 5 non-improving
//! epochs, and returns the parameters of the best epoch.

use crate::autodiff::{Graph, ParamSet, Scalar, Tensor};
use crate::dsp::Recording;
use crate::model::{detection_loss, encode_targets, Detector, ModelConfig, ModelError};
use crate::sampling::{
    extract_segment, stratified_segments, SamplerError, SegmentSample, SegmentSampler,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DECAY_PATIENCE: usize = 5;
pub const STOP_PATIENCE: usize = 10;
pub const LR_DECAY_FACTOR: f64 = 2.0;
pub const GRAD_CLIP_NORM: f64 = 5.0;
pub const MAX_EPOCHS_CAP: usize = 200;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer state: classical momentum, one velocity buffer per parameter.
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<f32>>,
    pub epoch: usize,
    pub epochs_since_best: usize,
    pub best_eval_loss: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet<f32>, lr: f64, momentum: f64) -> OptimState {
        OptimState {
            lr,
            momentum,
            velocity: params
                .ids()
                .map(|id| Tensor::zeros(params.value(id).shape()))
                .collect(),
            epoch: 0,
            epochs_since_best: 0,
            best_eval_loss: f64::INFINITY,
        }
    }

    /// `v <- momentum * v + g; p <- p - lr * v`. Parameters without a
    /// gradient this step still see their velocity decay.
    pub fn sgd_step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &[Option<Tensor<f32>>],
    ) -> Result<(), TrainError> {
        let lr = self.lr as f32;
        let momentum = self.momentum as f32;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let v = &mut self.velocity[i];
            match &grads[i] {
                Some(g) => {
                    if !g.all_finite() {
                        return Err(TrainError::NonFiniteGradient(params.name(id).to_string()));
                    }
                    for (v, g) in v.data_mut().iter_mut().zip(g.data()) {
                        *v = momentum * *v + *g;
                    }
                }
                None => {
                    for v in v.data_mut().iter_mut() {
                        *v *= momentum;
                    }
                }
            }
            for (p, v) in params.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    /// Epoch-end schedule update. Any new best resets both the stop and the
    /// decay counters; otherwise the learning rate halves after every
    /// [`DECAY_PATIENCE`] stale epochs and training stops after
    /// [`STOP_PATIENCE`].
    pub fn observe_eval(&mut self, eval_loss: f64) -> ScheduleAction {
        if eval_loss < self.best_eval_loss {
            self.best_eval_loss = eval_loss;
            self.epochs_since_best = 0;
            return ScheduleAction {
                improved: true,
                decayed: false,
                stop: false,
            };
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best >= STOP_PATIENCE {
            return ScheduleAction {
                improved: false,
                decayed: false,
                stop: true,
            };
        }
        let decayed = self.epochs_since_best % DECAY_PATIENCE == 0;
        if decayed {
            self.lr /= LR_DECAY_FACTOR;
        }
        ScheduleAction {
            improved: false,
            decayed,
            stop: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleAction {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for v in g.data() {
            sq += (*v as f64) * (*v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_eval_loss: f64,
}

impl TrainRunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_loss,lr,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                e.epoch, e.train_loss, e.eval_loss, e.lr, e.seconds
            );
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub batch_size: usize,
    /// `None`: one pass over the training events in expectation,
    /// `ceil(total events / batch)`
    pub steps_per_epoch: Option<usize>,
    pub max_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// event-anchored eval segments per record (plus as many background)
    pub eval_anchors_per_record: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch_size: 32,
            steps_per_epoch: None,
            max_epochs: MAX_EPOCHS_CAP,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            grad_clip_norm: Some(GRAD_CLIP_NORM),
            seed: 0,
            eval_anchors_per_record: 4,
        }
    }
}

/// Assemble `(B, C, T)` input and per-sample targets for a batch of
/// segments.
pub fn assemble_batch(
    records: &[Recording],
    batch: &[SegmentSample],
    config: &ModelConfig,
) -> Result<(Tensor<f32>, Vec<crate::model::TargetAssignment>), ModelError> {
    let (c, t) = (config.channels, config.segment_len);
    let mut data = Vec::with_capacity(batch.len() * c * t);
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        data.extend_from_slice(&extract_segment(&records[s.record], s.start_sample, t));
        targets.push(encode_targets(&s.events, config)?);
    }
    Ok((Tensor::from_vec(&[batch.len(), c, t], data), targets))
}

/// Mean detection loss over a fixed segment list, inference mode (frozen
/// batch-norm statistics), deterministic for a given model and segment set.
pub fn evaluate_loss(
    det: &Detector<f32>,
    records: &[Recording],
    segments: &[SegmentSample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in segments.chunks(batch_size) {
        let (x, targets) = assemble_batch(records, chunk, &det.config)?;
        let mut g: Graph<f32> = Graph::new();
        let x_id = g.leaf(x, false);
        let fwd = det.infer(&mut g, x_id)?;
        let loss = detection_loss(&mut g, &fwd, &targets, &det.config)?;
        weighted += Scalar::into_f64(g.value(loss).item()) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(weighted / count as f64)
}

pub struct TrainOutcome {
    pub record: TrainRunRecord,
}

/// The full optimization loop. On return the detector carries the
/// parameters and batch-norm statistics of the best eval-loss epoch.
pub fn train(
    det: &mut Detector<f32>,
    train_records: &[Recording],
    train_ids: &[String],
    eval_records: &[Recording],
    eval_ids: &[String],
    params: &TrainParams,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let config = det.config.clone();
    let num_classes = config.num_classes;
    let mut sampler = SegmentSampler::new(
        train_records,
        train_ids.to_vec(),
        num_classes,
        config.segment_len,
        config.fs,
        params.seed,
    );
    let eval_segments = stratified_segments(
        eval_records,
        eval_ids,
        num_classes,
        config.segment_len,
        config.fs,
        params.seed ^ 0xE7A1_5E6D_00D5_EEDu64,
        params.eval_anchors_per_record,
    )?;

    let total_events: usize = train_records
        .iter()
        .map(|r| {
            r.events
                .iter()
                .filter(|e| e.class_k >= 1 && e.class_k as usize <= num_classes)
                .count()
        })
        .sum();
    let steps_per_epoch = params
        .steps_per_epoch
        .unwrap_or_else(|| total_events.div_ceil(params.batch_size).max(1));
    let max_epochs = params.max_epochs.min(MAX_EPOCHS_CAP);

    let mut optim = OptimState::new(det.params(), params.lr, params.momentum);
    let mut best_snapshot = (det.params().clone(), det.bn_states().to_vec());
    let mut best_epoch = 0usize;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..max_epochs {
        let t0 = Instant::now();
        let mut loss_acc = 0.0;
        for step in 0..steps_per_epoch {
            let batch = sampler.make_minibatch(params.batch_size)?;
            let (x, targets) = assemble_batch(train_records, &batch, &config)?;
            let mut g: Graph<f32> = Graph::new();
            let x_id = g.leaf(x, false);
            let fwd = det.forward(&mut g, x_id, true)?;
            let loss = detection_loss(&mut g, &fwd, &targets, &config)?;
            let loss_v = Scalar::into_f64(g.value(loss).item());
            if !loss_v.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            loss_acc += loss_v;
            g.backward(loss);
            let mut grads: Vec<Option<Tensor<f32>>> = fwd
                .param_nodes
                .iter()
                .map(|&id| g.grad(id).cloned())
                .collect();
            drop(g);
            if let Some(max_norm) = params.grad_clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            optim.sgd_step(det.params_mut(), &grads)?;
        }

        let eval_loss = evaluate_loss(det, eval_records, &eval_segments, params.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_acc / steps_per_epoch as f64,
            eval_loss,
            lr: optim.lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&rec);
        epochs.push(rec);
        optim.epoch = epoch + 1;

        let action = optim.observe_eval(eval_loss);
        if action.improved {
            best_snapshot = (det.params().clone(), det.bn_states().to_vec());
            best_epoch = epoch;
        }
        if action.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    *det.params_mut() = best_snapshot.0;
    det.bn_states_mut().clone_from_slice(&best_snapshot.1);

    Ok(TrainOutcome {
        record: TrainRunRecord {
            epochs,
            stop_reason,
            best_epoch,
            best_eval_loss: optim.best_eval_loss,
        },
    })
}
