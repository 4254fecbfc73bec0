//! Optimization loop: enhance → segment → losses, back-propagation into the
//! enhancer only, Adam updates, checkpoints and the JSON-lines loss log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::data::{augmentation_plan, epoch_order, DataConfig, DataSource, TrainBatch, TrainExample};
use crate::enhancer::{apply_curves, apply_curves_backward, EnhancerConfig, EnhancerGrads, EnhancerParams, ENHANCER_VERSION};
use crate::error::{Error, Result};
use crate::features::{ConvFeatureNet, FeatureBackend};
use crate::losses::{total_loss, total_loss_grad, Backends, LossConfig, LossInputs, LossReport};
use crate::scalar::Real;
use crate::segmenter::{ConvSegmenter, OracleSegmenter, SegBackend};
use crate::tensor::Array;

pub const CHECKPOINT_KIND: &str = "enhancer-checkpoint";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.scla";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBackendKind {
    Reference,
    Vgg16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureBackendConfig {
    pub kind: FeatureBackendKind,
    /// Weight seed of the reference backend.
    pub seed: u64,
    /// Weight archive, required for `vgg16`.
    pub weights: Option<PathBuf>,
}

impl Default for FeatureBackendConfig {
    fn default() -> Self {
        Self {
            kind: FeatureBackendKind::Reference,
            seed: 0,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegBackendKind {
    Oracle,
    Tinycnn,
    Deeplab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegBackendConfig {
    pub kind: SegBackendKind,
    /// Weight seed of a randomly initialized `tinycnn`.
    pub seed: u64,
    /// Weight archive; required for `deeplab`, optional for `tinycnn`.
    pub weights: Option<PathBuf>,
}

impl Default for SegBackendConfig {
    fn default() -> Self {
        Self {
            kind: SegBackendKind::Oracle,
            seed: 0,
            weights: None,
        }
    }
}

pub fn build_feature_backend<T: Real>(cfg: &FeatureBackendConfig) -> Result<Box<dyn FeatureBackend<T>>> {
    Ok(match cfg.kind {
        FeatureBackendKind::Reference => Box::new(ConvFeatureNet::<T>::reference(cfg.seed)),
        FeatureBackendKind::Vgg16 => {
            let path = cfg
                .weights
                .as_deref()
                .ok_or_else(|| Error::Config("the vgg16 backend needs a weights file".into()))?;
            Box::new(ConvFeatureNet::<T>::vgg16_from_file(path)?)
        }
    })
}

pub fn build_segmenter<T: Real>(cfg: &SegBackendConfig, num_classes: usize) -> Result<Box<dyn SegBackend<T>>> {
    let check = |s: ConvSegmenter<T>| {
        if s.num_classes() != num_classes {
            return Err(Error::Config(format!(
                "segmenter predicts {} classes but the labels use {num_classes}",
                s.num_classes()
            )));
        }
        Ok(s)
    };
    Ok(match (cfg.kind, &cfg.weights) {
        (SegBackendKind::Oracle, _) => Box::new(OracleSegmenter { num_classes }),
        (SegBackendKind::Tinycnn, None) => Box::new(ConvSegmenter::<T>::tiny(num_classes, cfg.seed)),
        (SegBackendKind::Tinycnn | SegBackendKind::Deeplab, Some(path)) => {
            Box::new(check(ConvSegmenter::<T>::from_file(path)?)?)
        }
        (SegBackendKind::Deeplab, None) => {
            return Err(Error::Config("the deeplab backend needs a weights file".into()))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Stops early once this many optimizer steps have run in total.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub enhancer: EnhancerConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub features: FeatureBackendConfig,
    pub segmenter: SegBackendConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Checkpoint every this many steps; `0` means once per epoch.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            max_epochs: 50,
            max_steps: None,
            seed: 0,
            enhancer: EnhancerConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            features: FeatureBackendConfig::default(),
            segmenter: SegBackendConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1 when set".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        self.enhancer.validate()?;
        self.loss.validate()?;
        self.data.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// First and second moment estimates for every enhancer array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: EnhancerGrads<T>,
    pub v: EnhancerGrads<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &EnhancerParams<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: EnhancerGrads::zeros_like(params),
            v: EnhancerGrads::zeros_like(params),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut EnhancerParams<T>, grads: &EnhancerGrads<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let (lr, eps) = (T::of(lr), T::of(c.eps));
        let one = T::one();
        for (((conv, (gw, gb)), (mw, mb)), (vw, vb)) in params
            .convs
            .iter_mut()
            .zip(&grads.convs)
            .zip(self.m.convs.iter_mut())
            .zip(self.v.convs.iter_mut())
        {
            let pairs = [
                (conv.weight.as_mut_slice(), gw, mw, vw),
                (conv.bias.as_mut_slice(), gb, mb, vb),
            ];
            for (p, g, m, v) in pairs {
                for (((p, &g), m), v) in p
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(m.as_mut_slice())
                    .zip(v.as_mut_slice())
                {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Enhancer weights plus optimizer state at a given step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: EnhancerParams<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub train_config: Option<TrainConfig>,
}

impl<T: Real> Checkpoint<T> {
    /// A checkpoint whose enhancer predicts all-zero curves (the identity).
    pub fn zeros(config: EnhancerConfig) -> Result<Self> {
        let params = EnhancerParams::zeros(config)?;
        let adam = AdamState::new(&params, AdamConfig::default());
        Ok(Self {
            params,
            adam,
            step: 0,
            train_config: None,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let manifest = json!({
            "kind": CHECKPOINT_KIND,
            "enhancer_version": ENHANCER_VERSION,
            "enhancer": self.params.config,
            "step": self.step,
            "adam": {
                "beta1": self.adam.config.beta1,
                "beta2": self.adam.config.beta2,
                "eps": self.adam.config.eps,
                "step": self.adam.step,
            },
            "train_config": self.train_config,
        });
        let mut archive = Archive::new(manifest);
        self.params.write_to(&mut archive);
        let names: Vec<String> = self.params.named_arrays().into_iter().map(|(n, _)| n).collect();
        for (prefix, moments) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            let arrays = moments.convs.iter().flat_map(|(w, b)| [w, b]);
            for (name, a) in names.iter().zip(arrays) {
                archive.insert(format!("{prefix}{name}"), a.cast());
            }
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let m = &archive.manifest;
        let bad = |reason: &str| Error::Config(format!("checkpoint manifest: {reason}"));
        if m.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(bad("not an enhancer checkpoint"));
        }
        if m.get("enhancer_version").and_then(|v| v.as_str()) != Some(ENHANCER_VERSION) {
            return Err(bad("unsupported enhancer version"));
        }
        let config: EnhancerConfig =
            serde_json::from_value(m.get("enhancer").cloned().ok_or_else(|| bad("missing enhancer config"))?)?;
        config.validate()?;
        let params = EnhancerParams::read_from(config, archive)?;
        let adam_cfg = m.get("adam").cloned().unwrap_or(serde_json::Value::Null);
        let mut adam = AdamState::new(
            &params,
            AdamConfig {
                beta1: adam_cfg.get("beta1").and_then(|v| v.as_f64()).unwrap_or(0.9),
                beta2: adam_cfg.get("beta2").and_then(|v| v.as_f64()).unwrap_or(0.999),
                eps: adam_cfg.get("eps").and_then(|v| v.as_f64()).unwrap_or(1e-8),
            },
        );
        adam.step = adam_cfg.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let names: Vec<(String, Vec<usize>)> = params
            .named_arrays()
            .into_iter()
            .map(|(n, a)| (n, a.shape().to_vec()))
            .collect();
        for (prefix, moments) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
            let slots = moments.convs.iter_mut().flat_map(|(w, b)| [w, b]);
            for ((name, shape), slot) in names.iter().zip(slots) {
                let key = format!("{prefix}{name}");
                if archive.get(&key).is_some() {
                    *slot = archive.expect(&key, shape)?.cast();
                } else {
                    *slot = Array::zeros(shape);
                }
            }
        }
        let step = m.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let train_config = match m.get("train_config") {
            Some(v) if !v.is_null() => Some(serde_json::from_value(v.clone())?),
            _ => None,
        };
        Ok(Self {
            params,
            adam,
            step,
            train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub l_c: f64,
    pub l_sc: f64,
    pub l_fr: f64,
    pub l_cc: f64,
    pub total: f64,
}

impl LogEntry {
    pub fn new(step: u64, r: &LossReport) -> Self {
        Self {
            step,
            l_c: r.l_c,
            l_sc: r.l_sc,
            l_fr: r.l_fr,
            l_cc: r.l_cc,
            total: r.total,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loss and parameter gradients for one example.
pub fn example_grad<T: Real>(
    params: &EnhancerParams<T>,
    example: &TrainExample<T>,
    backends: Backends<'_, T>,
    loss: &LossConfig,
) -> Result<(LossReport, EnhancerGrads<T>)> {
    let trace = params.forward_trace(&example.low)?;
    let curves = trace.curve_stack();
    let enhanced = apply_curves(&example.low, &curves)?;
    let inputs = LossInputs {
        low: &example.low,
        enhanced: &enhanced,
        positive: example.positive.as_ref(),
        negative: example.negative.as_ref(),
        labels: &example.labels,
        curves: &curves,
    };
    if example.positive.is_none() && loss.weights.contrastive != 0.0 {
        return Err(Error::Config("contrastive loss enabled without a positive sample".into()));
    }
    let (report, grads) = total_loss_grad(&inputs, backends, loss)?;
    let (_, mut d_curves) = apply_curves_backward(&example.low, &curves, &grads.enhanced)?;
    d_curves.add_scaled(&grads.curves, T::one());
    let param_grads = params.backward(&trace, &d_curves)?;
    Ok((report, param_grads))
}

/// Mean loss and mean gradient over a batch, reduced in example order.
pub fn batch_grad<T: Real>(
    params: &EnhancerParams<T>,
    batch: &TrainBatch<T>,
    backends: Backends<'_, T>,
    loss: &LossConfig,
) -> Result<(LossReport, EnhancerGrads<T>)> {
    if batch.examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results: Vec<Result<(LossReport, EnhancerGrads<T>)>> = batch
        .examples
        .par_iter()
        .map(|ex| example_grad(params, ex, backends, loss))
        .collect();
    let scale = T::one() / T::of_usize(batch.examples.len());
    let mut total = EnhancerGrads::zeros_like(params);
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (report, g) = r?;
        total.add_scaled(&g, scale);
        reports.push(report);
    }
    let report = LossReport::mean(&reports).expect("non-empty batch");
    Ok((report, total))
}

/// Mean loss of `params` over fixed examples, without gradients.
pub fn evaluate_loss<T: Real>(
    params: &EnhancerParams<T>,
    examples: &[TrainExample<T>],
    backends: Backends<'_, T>,
    loss: &LossConfig,
) -> Result<LossReport> {
    let reports: Vec<LossReport> = examples
        .par_iter()
        .map(|ex| {
            let (enhanced, curves) = params.enhance(&ex.low)?;
            let inputs = LossInputs {
                low: &ex.low,
                enhanced: &enhanced,
                positive: ex.positive.as_ref(),
                negative: ex.negative.as_ref(),
                labels: &ex.labels,
                curves: &curves,
            };
            total_loss(&inputs, backends, loss)
        })
        .collect::<Result<_>>()?;
    LossReport::mean(&reports).ok_or_else(|| Error::InvalidArgument("no examples to evaluate".into()))
}

/// One optimizer step. Only `params` and `adam` change.
pub fn train_step<T: Real>(
    params: &mut EnhancerParams<T>,
    adam: &mut AdamState<T>,
    batch: &TrainBatch<T>,
    backends: Backends<'_, T>,
    config: &TrainConfig,
) -> Result<LossReport> {
    let (report, mut grads) = batch_grad(params, batch, backends, &config.loss)?;
    for (term, value) in report.terms() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, step: batch.step });
        }
    }
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "gradient",
            step: batch.step,
        });
    }
    if let Some(clip) = config.clip_norm {
        let clip = T::of(clip);
        if norm > clip {
            grads.scale(clip / norm);
        }
    }
    adam.update(params, &grads, config.lr);
    Ok(report)
}

/// Deterministic schedule mapping global steps (1-based) to record indices.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub num_records: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(num_records: usize, config: &TrainConfig) -> Self {
        let spe = num_records.div_ceil(config.batch_size) as u64;
        let mut total = spe * config.max_epochs;
        if let Some(cap) = config.max_steps {
            total = total.min(cap);
        }
        Self {
            num_records,
            batch_size: config.batch_size,
            seed: config.seed,
            steps_per_epoch: spe,
            total_steps: total,
        }
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        (step - 1) / self.steps_per_epoch
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let order = epoch_order(self.num_records, self.seed, self.epoch_of(step));
        let k = ((step - 1) % self.steps_per_epoch) as usize;
        let start = k * self.batch_size;
        order[start..(start + self.batch_size).min(self.num_records)].to_vec()
    }
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainSummary<T> {
    pub checkpoint: Checkpoint<T>,
    pub final_path: PathBuf,
    pub log: Vec<LogEntry>,
    pub steps_run: u64,
    pub feature_digest: (String, String),
    pub segmenter_digest: (String, String),
}

fn write_log_prefix(path: &Path, keep_until: u64) -> Result<()> {
    let kept: Vec<LogEntry> = if path.exists() {
        read_log(path)?.into_iter().filter(|e| e.step <= keep_until).collect()
    } else {
        Vec::new()
    };
    let mut bytes = Vec::new();
    for e in &kept {
        serde_json::to_writer(&mut bytes, e)?;
        bytes.push(b'\n');
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains from `data_root`, writing checkpoints and the loss log under
/// `out_dir`. With `resume`, continues from that checkpoint's step.
pub fn train<T: Real>(
    config: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary<T>> {
    config.validate()?;
    let mut data_cfg = config.data.clone();
    let (records, bank) = crate::data::scan_dataset(data_root, &data_cfg.layout)?;
    if config.loss.weights.contrastive == 0.0 && bank.positives.is_empty() {
        data_cfg.pools.positives = false;
    }
    let source = DataSource::<T>::new(records, bank, data_cfg)?;
    let features = build_feature_backend::<T>(&config.features)?;
    let segmenter = build_segmenter::<T>(&config.segmenter, config.data.num_classes)?;
    train_with(config, &source, features.as_ref(), segmenter.as_ref(), out_dir, resume)
}

/// [`train`] with an already opened data source and backends.
pub fn train_with<T: Real>(
    config: &TrainConfig,
    source: &DataSource<T>,
    features: &dyn FeatureBackend<T>,
    segmenter: &dyn SegBackend<T>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary<T>> {
    config.validate()?;
    let backends = Backends { features, segmenter };
    let digests_before = (features.parameter_digest(), segmenter.parameter_digest());

    let mut ckpt = match resume {
        Some(path) => {
            let c = Checkpoint::<T>::load(path)?;
            if c.params.config != config.enhancer {
                return Err(Error::Config("resume checkpoint has a different enhancer configuration".into()));
            }
            c
        }
        None => {
            let params = EnhancerParams::init(config.enhancer, config.seed)?;
            let adam = AdamState::new(&params, config.adam);
            Checkpoint {
                params,
                adam,
                step: 0,
                train_config: None,
            }
        }
    };
    ckpt.train_config = Some(config.clone());

    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    write_log_prefix(&log_path, ckpt.step)?;
    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let schedule = Schedule::new(source.records.len(), config);
    let start = ckpt.step;
    let mut gammas = Vec::new();
    let mut gamma_epoch = None;
    let mut log = Vec::new();
    for step in start + 1..=schedule.total_steps {
        let epoch = schedule.epoch_of(step);
        if gamma_epoch != Some(epoch) {
            gammas = augmentation_plan(source.records.len(), config.seed, epoch, &config.data.augment);
            gamma_epoch = Some(epoch);
        }
        let batch = source.make_batch(step, config.seed, &schedule.indices(step), &gammas)?;
        let report = train_step(&mut ckpt.params, &mut ckpt.adam, &batch, backends, config)?;
        ckpt.step = step;
        let entry = LogEntry::new(step, &report);
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        log_file.write_all(&line).map_err(|e| Error::io(&log_path, e))?;
        log.push(entry);
        if step % 50 == 0 || step == schedule.total_steps {
            log::info!("step {step}/{} epoch {} total {:.6}", schedule.total_steps, epoch + 1, report.total);
        }
        let due = if config.checkpoint_every > 0 {
            step % config.checkpoint_every == 0
        } else {
            step % schedule.steps_per_epoch == 0
        };
        if due {
            ckpt.save(&ckpt_dir.join(format!("step_{step:08}.scla")))?;
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    ckpt.save(&final_path)?;

    let digests_after = (features.parameter_digest(), segmenter.parameter_digest());
    Ok(TrainSummary {
        checkpoint: ckpt,
        final_path,
        log,
        steps_run: schedule.total_steps.saturating_sub(start),
        feature_digest: (digests_before.0, digests_after.0),
        segmenter_digest: (digests_before.1, digests_after.1),
    })
}

/// Single-field deltas from a base configuration for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoLc,
    NoLsc,
    NoLfr,
    /// Both negative pools emptied; the contrastive term keeps only the pull
    /// toward the positive.
    NoNeg,
    NoOver,
    NoUnder,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoLc,
        Ablation::NoLsc,
        Ablation::NoLfr,
        Ablation::NoNeg,
        Ablation::NoOver,
        Ablation::NoUnder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoLc => "no-lc",
            Ablation::NoLsc => "no-lsc",
            Ablation::NoLfr => "no-lfr",
            Ablation::NoNeg => "no-neg",
            Ablation::NoOver => "no-over",
            Ablation::NoUnder => "no-under",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::NoLc => cfg.loss.weights.contrastive = 0.0,
            Ablation::NoLsc => cfg.loss.weights.semantic = 0.0,
            Ablation::NoLfr => cfg.loss.weights.retention = 0.0,
            Ablation::NoNeg => {
                cfg.data.pools.neg_over = false;
                cfg.data.pools.neg_under = false;
            }
            Ablation::NoOver => cfg.data.pools.neg_over = false,
            Ablation::NoUnder => cfg.data.pools.neg_under = false,
        }
        cfg
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::InvalidArgument(format!("unknown ablation switch `{s}` (known: {})", known.join(", ")))
            })
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
