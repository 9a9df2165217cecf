//! Command orchestration: each operator-facing command is a function here,
//! so tests and the CLI share one code path. Every command writes a
//! `run_manifest.json` (command, version, seed, config hash, inputs) next
//! to its outputs, and all outputs are byte-deterministic given equal
//! configuration and seed (wall-clock fields live only in the training log).

use crate::autodiff::Checkpoint;
use crate::cache;
use crate::dsp::{preprocess_record, Recording, TARGET_FS};
use crate::edf::{
    apply_montage, format_annotations, load_annotations, ClassMap, EdfFile, Montage, ScoredEvent,
    SignalSpec, StartDateTime,
};
use crate::eval::{
    predict_record, score_record, scores_to_csv, subject_summary, sweep, sweep_argmax,
    sweep_to_csv, scatter_to_csv, summary_to_csv, CohortSummary, RecordScore, SweepPoint,
};
use crate::manifest::{DatasetManifest, RecordEntry, Split};
use crate::model::{CandidateEvent, Detector, ModelConfig};
use crate::synth::{generate, SynthSpec};
use crate::train::{train, TrainParams, TrainRunRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Edf(#[from] crate::edf::EdfError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Cache(#[from] crate::cache::CacheError),
    #[error(transparent)]
    Manifest(#[from] crate::manifest::ManifestError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Checkpoint(#[from] crate::autodiff::CheckpointError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

fn default_batch() -> usize {
    32
}
fn default_segment_s() -> f64 {
    120.0
}
fn default_n_max() -> usize {
    7
}
fn default_scales_s() -> Vec<f64> {
    vec![3.0]
}
fn default_theta() -> f64 {
    0.6
}
fn default_nms_iou() -> f64 {
    0.3
}
fn default_match_iou() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    crate::train::DEFAULT_LR
}
fn default_momentum() -> f64 {
    crate::train::DEFAULT_MOMENTUM
}
fn default_max_epochs() -> usize {
    crate::train::MAX_EPOCHS_CAP
}
fn default_eval_anchors() -> usize {
    4
}

/// One training/evaluation run, JSON-serialized. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// event classes this run detects, e.g. `["LM"]`; model class `i+1`
    /// corresponds to entry `i`
    pub classes: Vec<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_segment_s")]
    pub segment_s: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_scales_s")]
    pub scales_s: Vec<f64>,
    #[serde(default)]
    pub use_rnn: bool,
    #[serde(default = "default_theta")]
    pub theta_clf: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_match_iou")]
    pub match_iou: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_eval_anchors")]
    pub eval_anchors_per_record: usize,
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunnerError> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.classes.is_empty() {
            return Err(RunnerError::Config("no event classes configured".into()));
        }
        if self.batch_size < self.classes.len() + 1 {
            return Err(RunnerError::Config(format!(
                "batch size {} cannot balance {} classes",
                self.batch_size,
                self.classes.len() + 1
            )));
        }
        self.to_model_config(1)?.validate()?;
        Ok(())
    }

    /// Materialize the network configuration for `channels` input channels.
    pub fn to_model_config(&self, channels: usize) -> Result<ModelConfig, RunnerError> {
        let segment_len = (self.segment_s * TARGET_FS).round() as usize;
        let scales = self
            .scales_s
            .iter()
            .map(|s| (s * TARGET_FS).round() as usize)
            .collect();
        Ok(ModelConfig {
            channels,
            segment_len,
            n_max: self.n_max,
            num_classes: self.classes.len(),
            scales,
            use_rnn: self.use_rnn,
            theta_clf: self.theta_clf,
            nms_iou: self.nms_iou,
            match_iou: self.match_iou,
            fs: TARGET_FS,
        })
    }

    /// Corpus class code of every configured class.
    pub fn class_codes(&self, map: &ClassMap) -> Result<Vec<u32>, RunnerError> {
        self.classes
            .iter()
            .map(|label| {
                map.class_of(label)
                    .ok_or_else(|| RunnerError::Config(format!("unknown event class {label:?}")))
            })
            .collect()
    }

    /// Label dictionary of this run's model classes (model class `i+1` maps
    /// to `classes[i]`).
    pub fn run_class_map(&self) -> ClassMap {
        ClassMap::from_pairs(
            &self
                .classes
                .iter()
                .enumerate()
                .map(|(i, label)| (label.as_str(), i as u32 + 1))
                .collect::<Vec<_>>(),
        )
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_sha256: &'a str,
    inputs: Vec<String>,
}

pub fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    seed: Option<u64>,
    config_sha256: &str,
    inputs: &[String],
) -> Result<(), RunnerError> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256,
        inputs: inputs.to_vec(),
    };
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Remap corpus-coded events onto this run's contiguous model classes;
/// events of unlisted classes are dropped.
pub fn remap_events(events: &[ScoredEvent], codes: &[u32]) -> Vec<ScoredEvent> {
    events
        .iter()
        .filter_map(|e| {
            codes
                .iter()
                .position(|&c| c == e.class_k)
                .map(|i| ScoredEvent::new(i as u32 + 1, e.start_s, e.duration_s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Synthetic corpus description: per-split record counts over a shared
/// signal spec; record `i` of the corpus derives its seed from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpusSpec {
    pub seed: u64,
    pub train: usize,
    pub eval: usize,
    pub test: usize,
    pub spec: SynthSpec,
}

pub fn run_synth(corpus: &SynthCorpusSpec, out_dir: &Path) -> Result<DatasetManifest, RunnerError> {
    std::fs::create_dir_all(out_dir)?;
    let classes = ClassMap::default();
    let splits = [
        (Split::Train, corpus.train),
        (Split::Eval, corpus.eval),
        (Split::Test, corpus.test),
    ];
    let mut jobs = Vec::new();
    let mut index = 0u64;
    for (split, count) in splits {
        for i in 0..count {
            jobs.push((split, i, index));
            index += 1;
        }
    }
    let records: Vec<RecordEntry> = jobs
        .par_iter()
        .map(|&(split, i, index)| -> Result<RecordEntry, RunnerError> {
            let id = format!("{split}-{i:03}");
            let seed = corpus
                .seed
                .wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let rec = generate(&corpus.spec, seed)?;
            let n = rec.channels[0].1.len();
            let spr = corpus.spec.fs.round() as usize;
            let num_records = n / spr;
            let signals: Vec<(SignalSpec, Vec<f64>)> = rec
                .channels
                .iter()
                .map(|(label, data)| {
                    (
                        SignalSpec {
                            label: label.clone(),
                            physical_dim: "uV".into(),
                            phys_min: -250.0,
                            phys_max: 250.0,
                            dig_min: -32768,
                            dig_max: 32767,
                            samples_per_record: spr,
                        },
                        data[..num_records * spr].to_vec(),
                    )
                })
                .collect();
            let edf_path = out_dir.join(format!("{id}.edf"));
            crate::edf::write_edf(
                &edf_path,
                StartDateTime::default(),
                1.0,
                num_records,
                &signals,
            )?;
            let ann_path = out_dir.join(format!("{id}.csv"));
            crate::edf::write_annotations(&ann_path, &rec.events, &classes)?;
            Ok(RecordEntry {
                id,
                edf: edf_path,
                annotations: ann_path,
                split,
            })
        })
        .collect::<Result<_, _>>()?;

    let manifest = DatasetManifest { records };
    manifest.save(&out_dir.join("manifest.json"))?;
    write_run_manifest(
        out_dir,
        "synth",
        Some(corpus.seed),
        &config_hash(corpus),
        &[],
    )?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

pub fn run_preprocess(
    manifest_path: &Path,
    cache_dir: &Path,
    montage: Option<&Path>,
) -> Result<(), RunnerError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let montage = match montage {
        Some(path) => Montage::from_json(&std::fs::read_to_string(path)?)?,
        None => Montage::default_psg(),
    };
    let classes = ClassMap::default();
    std::fs::create_dir_all(cache_dir)?;
    manifest
        .records
        .par_iter()
        .map(|entry| -> Result<(), RunnerError> {
            let file = EdfFile::open(&entry.edf)?;
            let raw: Vec<_> = file
                .signals
                .iter()
                .map(|s| file.read_channel(&s.label))
                .collect::<Result<_, _>>()?;
            let derived = apply_montage(&raw, &montage)?;
            let events = load_annotations(&entry.annotations, &classes)?;
            let rec = preprocess_record(&derived, events)?;
            cache::save_recording(cache_dir, &entry.id, &rec)?;
            Ok(())
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_run_manifest(
        cache_dir,
        "preprocess",
        None,
        &config_hash(&manifest_path.to_string_lossy().to_string()),
        &[manifest_path.to_string_lossy().into_owned()],
    )?;
    Ok(())
}

/// Load a split from the cache with events remapped onto model classes.
pub fn load_split(
    manifest: &DatasetManifest,
    cache_dir: &Path,
    split: Split,
    codes: &[u32],
) -> Result<(Vec<Recording>, Vec<String>), RunnerError> {
    let mut recs = Vec::new();
    let mut ids = Vec::new();
    for entry in manifest.split(split) {
        let mut rec = cache::load_recording(cache_dir, &entry.id)?;
        rec.events = remap_events(&rec.events, codes);
        recs.push(rec);
        ids.push(entry.id.clone());
    }
    if recs.is_empty() {
        return Err(RunnerError::Config(format!("split {split} is empty")));
    }
    Ok((recs, ids))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub record: TrainRunRecord,
}

pub fn run_train(
    config: &RunConfig,
    mut progress: impl FnMut(&crate::train::EpochRecord),
) -> Result<TrainSummary, RunnerError> {
    config.validate()?;
    let hash = config_hash(config);
    let manifest = DatasetManifest::load(&config.manifest)?;
    let codes = config.class_codes(&ClassMap::default())?;
    let (train_recs, train_ids) = load_split(&manifest, &config.cache_dir, Split::Train, &codes)?;
    let (eval_recs, eval_ids) = load_split(&manifest, &config.cache_dir, Split::Eval, &codes)?;

    let channels = train_recs[0].num_channels();
    if train_recs
        .iter()
        .chain(eval_recs.iter())
        .any(|r| r.num_channels() != channels)
    {
        return Err(RunnerError::Config(
            "records disagree on channel count".into(),
        ));
    }
    let model_config = config.to_model_config(channels)?;
    let mut det: Detector<f32> = Detector::build(model_config, config.seed)?;
    let params = TrainParams {
        batch_size: config.batch_size,
        steps_per_epoch: config.steps_per_epoch,
        max_epochs: config.max_epochs,
        lr: config.lr,
        momentum: config.momentum,
        grad_clip_norm: Some(crate::train::GRAD_CLIP_NORM),
        seed: config.seed,
        eval_anchors_per_record: config.eval_anchors_per_record,
    };
    let outcome = train(
        &mut det,
        &train_recs,
        &train_ids,
        &eval_recs,
        &eval_ids,
        &params,
        &mut progress,
    )?;

    std::fs::create_dir_all(&config.out_dir)?;
    let ckpt_path = config.out_dir.join("detector.ckpt");
    det.to_checkpoint(serde_json::json!({
        "seed": config.seed,
        "classes": config.classes,
        "best_eval_loss": outcome.record.best_eval_loss,
        "best_epoch": outcome.record.best_epoch,
        "config_sha256": hash,
    }))
    .save(&ckpt_path)?;
    std::fs::write(
        config.out_dir.join("trainlog.csv"),
        outcome.record.to_csv(),
    )?;
    write_run_manifest(
        &config.out_dir,
        "train",
        Some(config.seed),
        &hash,
        &[config.manifest.to_string_lossy().into_owned()],
    )?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        record: outcome.record,
    })
}

// ---------------------------------------------------------------------------
// detect / evaluate / sweep
// ---------------------------------------------------------------------------

pub struct LoadedModel {
    pub detector: Detector<f32>,
    pub classes: Vec<String>,
}

pub fn load_model(ckpt_path: &Path) -> Result<LoadedModel, RunnerError> {
    let ck = Checkpoint::load(ckpt_path)?;
    let detector = Detector::from_checkpoint(&ck)?;
    let classes: Vec<String> =
        serde_json::from_value(ck.meta["extra"]["classes"].clone()).unwrap_or_default();
    Ok(LoadedModel { detector, classes })
}

/// Candidates clipped to the recording timeline and converted to scored
/// events for CSV export.
fn candidates_to_events(cands: &[CandidateEvent], total_s: f64) -> Vec<ScoredEvent> {
    cands
        .iter()
        .filter_map(|c| {
            let start = c.start_s.max(0.0);
            let end = (c.start_s + c.duration_s).min(total_s);
            if end <= start {
                return None;
            }
            Some(ScoredEvent::new(c.class_k, start, end - start))
        })
        .collect()
}

pub struct DetectOutput {
    pub per_record: Vec<(String, Vec<CandidateEvent>)>,
}

pub fn run_detect(
    ckpt_path: &Path,
    manifest_path: &Path,
    cache_dir: &Path,
    split: Split,
    theta_clf: Option<f64>,
    nms_iou: Option<f64>,
    out_dir: &Path,
) -> Result<DetectOutput, RunnerError> {
    let model = load_model(ckpt_path)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let theta = theta_clf.unwrap_or(model.detector.config.theta_clf);
    let nms = nms_iou.unwrap_or(model.detector.config.nms_iou);
    let run_map = ClassMap::from_pairs(
        &model
            .classes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32 + 1))
            .collect::<Vec<_>>(),
    );
    std::fs::create_dir_all(out_dir)?;

    let entries: Vec<&RecordEntry> = manifest.split(split).collect();
    let per_record: Vec<(String, Vec<CandidateEvent>)> = entries
        .par_iter()
        .map(|entry| -> Result<(String, Vec<CandidateEvent>), RunnerError> {
            let rec = cache::load_recording(cache_dir, &entry.id)?;
            let cands = predict_record(&model.detector, &rec, theta, nms)?;
            let events = candidates_to_events(&cands, rec.duration_s());
            std::fs::write(
                out_dir.join(format!("{}.pred.csv", entry.id)),
                format_annotations(&events, &run_map),
            )?;
            Ok((entry.id.clone(), cands))
        })
        .collect::<Result<_, _>>()?;

    write_run_manifest(
        out_dir,
        "detect",
        None,
        &config_hash(&(theta, nms)),
        &[
            ckpt_path.to_string_lossy().into_owned(),
            manifest_path.to_string_lossy().into_owned(),
        ],
    )?;
    Ok(DetectOutput { per_record })
}

pub struct EvaluateOutput {
    pub scores: Vec<Vec<RecordScore>>,
    pub summaries: Vec<(String, CohortSummary)>,
}

/// Score prediction CSVs against the manifest's annotation CSVs.
pub fn run_evaluate(
    pred_dir: &Path,
    manifest_path: &Path,
    cache_dir: &Path,
    split: Split,
    classes: &[String],
    eval_iou: f64,
    out_dir: &Path,
) -> Result<EvaluateOutput, RunnerError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let corpus_map = ClassMap::default();
    let run_map = ClassMap::from_pairs(
        &classes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32 + 1))
            .collect::<Vec<_>>(),
    );
    let codes: Vec<u32> = classes
        .iter()
        .map(|l| {
            corpus_map
                .class_of(l)
                .ok_or_else(|| RunnerError::Config(format!("unknown class {l:?}")))
        })
        .collect::<Result<_, _>>()?;

    let mut scores: Vec<Vec<RecordScore>> = vec![Vec::new(); classes.len()];
    for entry in manifest.split(split) {
        let truths = remap_events(&load_annotations(&entry.annotations, &corpus_map)?, &codes);
        let preds = load_annotations(&pred_dir.join(format!("{}.pred.csv", entry.id)), &run_map)?;
        let pred_cands: Vec<CandidateEvent> = preds
            .iter()
            .map(|e| CandidateEvent {
                class_k: e.class_k,
                probability: 1.0,
                start_s: e.start_s,
                duration_s: e.duration_s,
            })
            .collect();
        let rec = cache::load_recording(cache_dir, &entry.id)?;
        let hours = rec.duration_s() / 3600.0;
        for (i, _) in classes.iter().enumerate() {
            scores[i].push(score_record(
                &entry.id,
                i as u32 + 1,
                &pred_cands,
                &truths,
                eval_iou,
                hours,
            ));
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::new();
    let mut subject_csv = String::new();
    for (i, label) in classes.iter().enumerate() {
        subject_csv.push_str(&scores_to_csv(&scores[i], label));
        summaries.push((label.clone(), subject_summary(&scores[i])));
    }
    std::fs::write(out_dir.join("per_subject.csv"), subject_csv)?;
    std::fs::write(out_dir.join("summary.csv"), summary_to_csv(&summaries))?;

    let scatter_rows: Vec<(String, Vec<(String, f64)>)> = manifest
        .split(split)
        .enumerate()
        .map(|(ri, entry)| {
            (
                entry.id.clone(),
                classes
                    .iter()
                    .enumerate()
                    .map(|(ci, label)| (label.clone(), scores[ci][ri].f1))
                    .collect(),
            )
        })
        .collect();
    std::fs::write(out_dir.join("scatter.csv"), scatter_to_csv(&scatter_rows))?;

    write_run_manifest(
        out_dir,
        "evaluate",
        None,
        &config_hash(&eval_iou),
        &[
            pred_dir.to_string_lossy().into_owned(),
            manifest_path.to_string_lossy().into_owned(),
        ],
    )?;
    Ok(EvaluateOutput { scores, summaries })
}

pub struct SweepOutput {
    /// per configured class
    pub surfaces: Vec<(String, Vec<SweepPoint>)>,
}

/// Decode each record once at the lowest threshold, then re-threshold and
/// re-match across the whole grid.
pub fn run_sweep(
    ckpt_path: &Path,
    manifest_path: &Path,
    cache_dir: &Path,
    split: Split,
    iou_grid: &[f64],
    theta_grid: &[f64],
    out_dir: &Path,
) -> Result<SweepOutput, RunnerError> {
    if iou_grid.is_empty() || theta_grid.is_empty() {
        return Err(RunnerError::Config("empty sweep grid".into()));
    }
    let model = load_model(ckpt_path)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let corpus_map = ClassMap::default();
    let codes: Vec<u32> = model
        .classes
        .iter()
        .map(|l| {
            corpus_map
                .class_of(l)
                .ok_or_else(|| RunnerError::Config(format!("unknown class {l:?}")))
        })
        .collect::<Result<_, _>>()?;
    let theta_min = theta_grid.iter().copied().fold(f64::INFINITY, f64::min);

    let entries: Vec<&RecordEntry> = manifest.split(split).collect();
    let decoded: Vec<(Vec<CandidateEvent>, Vec<ScoredEvent>, f64)> = entries
        .par_iter()
        .map(|entry| -> Result<_, RunnerError> {
            let rec = cache::load_recording(cache_dir, &entry.id)?;
            let cands = predict_record(
                &model.detector,
                &rec,
                theta_min,
                model.detector.config.nms_iou,
            )?;
            let truths = remap_events(&rec.events, &codes);
            Ok((cands, truths, rec.duration_s() / 3600.0))
        })
        .collect::<Result<_, _>>()?;

    let cands_per_record: Vec<Vec<CandidateEvent>> =
        decoded.iter().map(|(c, _, _)| c.clone()).collect();
    let truths_per_record: Vec<Vec<ScoredEvent>> =
        decoded.iter().map(|(_, t, _)| t.clone()).collect();
    let hours: Vec<f64> = decoded.iter().map(|(_, _, h)| *h).collect();

    std::fs::create_dir_all(out_dir)?;
    let mut surfaces = Vec::new();
    let mut argmax_csv = String::from("class,eval_iou,theta,f1,precision,recall\n");
    for (i, label) in model.classes.iter().enumerate() {
        let points = sweep(
            &cands_per_record,
            &truths_per_record,
            &hours,
            i as u32 + 1,
            iou_grid,
            theta_grid,
        );
        std::fs::write(
            out_dir.join(format!("sweep_{label}.csv")),
            sweep_to_csv(&points),
        )?;
        if let Some(best) = sweep_argmax(&points) {
            use std::fmt::Write as _;
            let _ = writeln!(
                argmax_csv,
                "{label},{},{},{},{},{}",
                best.eval_iou, best.theta, best.f1, best.precision, best.recall
            );
        }
        surfaces.push((label.clone(), points));
    }
    std::fs::write(out_dir.join("sweep_best.csv"), argmax_csv)?;

    write_run_manifest(
        out_dir,
        "sweep",
        None,
        &config_hash(&(iou_grid, theta_grid)),
        &[
            ckpt_path.to_string_lossy().into_owned(),
            manifest_path.to_string_lossy().into_owned(),
        ],
    )?;
    Ok(SweepOutput { surfaces })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let json = r#"{
            "seed": 1, "classes": ["LM"],
            "manifest": "m.json", "cache_dir": "c", "out_dir": "o",
            "bogus_key": 7
        }"#;
        let parsed: Result<RunConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn config_defaults_match_contract() {
        let json = r#"{
            "seed": 3, "classes": ["AR"],
            "manifest": "m.json", "cache_dir": "c", "out_dir": "o"
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.segment_s, 120.0);
        assert_eq!(cfg.n_max, 7);
        assert_eq!(cfg.scales_s, vec![3.0]);
        let mc = cfg.to_model_config(6).unwrap();
        assert_eq!(mc.segment_len, 15360);
        assert_eq!(mc.scales, vec![384]);
        assert_eq!(mc.num_classes, 1);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let mk = |seed: u64| RunConfig {
            seed,
            classes: vec!["LM".into()],
            batch_size: 32,
            segment_s: 120.0,
            n_max: 7,
            scales_s: vec![3.0],
            use_rnn: false,
            theta_clf: 0.6,
            nms_iou: 0.3,
            match_iou: 0.5,
            lr: 1e-3,
            momentum: 0.9,
            steps_per_epoch: None,
            max_epochs: 10,
            eval_anchors_per_record: 4,
            manifest: "m.json".into(),
            cache_dir: "c".into(),
            out_dir: "o".into(),
        };
        assert_eq!(config_hash(&mk(1)), config_hash(&mk(1)));
        assert_ne!(config_hash(&mk(1)), config_hash(&mk(2)));
    }

    #[test]
    fn event_remap_filters_and_renumbers() {
        let events = vec![
            ScoredEvent::new(1, 1.0, 2.0), // AR
            ScoredEvent::new(2, 5.0, 1.0), // LM
        ];
        // an LM-only run maps corpus class 2 onto model class 1
        let remapped = remap_events(&events, &[2]);
        assert_eq!(remapped, vec![ScoredEvent::new(1, 5.0, 1.0)]);
    }

    #[test]
    fn candidates_clip_to_recording() {
        let cands = vec![
            CandidateEvent {
                class_k: 1,
                probability: 0.9,
                start_s: -1.0,
                duration_s: 3.0,
            },
            CandidateEvent {
                class_k: 1,
                probability: 0.9,
                start_s: 99.0,
                duration_s: 5.0,
            },
            CandidateEvent {
                class_k: 1,
                probability: 0.9,
                start_s: 200.0,
                duration_s: 5.0,
            },
        ];
        let events = candidates_to_events(&cands, 100.0);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0], ScoredEvent::new(1, 0.0, 2.0));
        assert_eq!(events[1], ScoredEvent::new(1, 99.0, 1.0));
    }
}
