//! Gradient-based personalization: per-task inner adaptation on a short
//! labelled support window, outer updates from the adapted query losses, the
//! test-time entry point and the supervised fine-tune baseline.
//!
//! The optimizers work on flat `f64` parameter vectors through the
//! [`Objective`] trait, so the same code drives the network and small
//! closed-form problems.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Trial;
use crate::labelgen::finger_label;
use crate::model::{clip_target, loss_and_grad, preprocess_clip, ModelConfig, NetworkParams, PreprocessedClip};
use crate::pos::{pos_pulse, rgb_trace_from_clip, POS_WINDOW_S};

/// Differentiable loss over flat parameters.
pub trait Objective: Sync {
    type Data: Sync;

    fn loss_grad(&self, theta: &[f64], data: &Self::Data) -> Result<(f64, Vec<f64>)>;

    /// Hessian-vector product; defaults to central differences of the
    /// gradient.
    fn hvp(&self, theta: &[f64], data: &Self::Data, v: &[f64]) -> Result<Vec<f64>> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let eps = 1e-5 / norm;
        let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, v)| t + s * eps * v).collect() };
        let (_, gp) = self.loss_grad(&shifted(1.0), data)?;
        let (_, gm) = self.loss_grad(&shifted(-1.0), data)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    }
}

/// Clip and prepared target for the network objective.
#[derive(Debug, Clone)]
pub struct Sample {
    pub clip: PreprocessedClip,
    pub target: Vec<f64>,
}

/// The network's mean squared error.
#[derive(Debug, Clone)]
pub struct NetObjective {
    pub config: ModelConfig,
}

impl Objective for NetObjective {
    type Data = Sample;

    fn loss_grad(&self, theta: &[f64], data: &Sample) -> Result<(f64, Vec<f64>)> {
        loss_and_grad(&self.config, theta, &data.clip, &data.target)
    }
}

#[derive(Debug, Clone)]
pub struct Task<D> {
    pub id: String,
    pub support: D,
    pub query: D,
}

/// Where a training or adaptation label comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// The reference pulse waveform stored with the trial.
    Gold,
    /// Finger PPG from the rear camera.
    Finger,
    /// POS pulse extracted from the face clip itself.
    Pos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub support_s: f64,
    pub inner_steps: usize,
    pub epochs: usize,
    pub first_order: bool,
    pub task_batch: usize,
    pub seed: u64,
    /// Label for support and query windows during meta-training.
    pub train_label: LabelSource,
    /// Label for the support window at personalization time.
    pub adapt_label: LabelSource,
    /// Band-pass labels before differencing.
    pub bandpass_labels: bool,
    /// Longest query window used per task; the full remainder when unset.
    pub query_s: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.003,
            outer_lr: 0.001,
            support_s: 18.0,
            inner_steps: 1,
            epochs: 10,
            first_order: true,
            task_batch: 4,
            seed: 0,
            train_label: LabelSource::Gold,
            adapt_label: LabelSource::Finger,
            bandpass_labels: true,
            query_s: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.task_batch == 0 {
            return Err(Error::Config("task_batch must be positive".into()));
        }
        if self.support_s * 30.0 < (model.frame_depth + 1) as f64 {
            return Err(Error::Config(format!(
                "support window of {} s is shorter than one frame group",
                self.support_s
            )));
        }
        Ok(())
    }
}

/// Plain supervised training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Trials are cut into windows of this length.
    pub window_s: f64,
    /// Windows per update.
    pub batch: usize,
    pub seed: u64,
    pub label: LabelSource,
    pub bandpass_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.001,
            window_s: 10.0,
            batch: 4,
            seed: 0,
            label: LabelSource::Gold,
            bandpass_labels: true,
        }
    }
}

/// Support-window fine-tuning of the supervised baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub label: LabelSource,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 1, lr: 0.003, label: LabelSource::Finger }
    }
}

/// Every setting of the training pipeline, as read from a JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.meta.validate(&self.model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let cfg: Self = serde_json::from_str(&raw).map_err(|e| Error::schema(name, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} loss is {loss}")))
    }
}

/// `steps` plain gradient-descent steps of size `alpha` on `data`.
pub fn adapt<O: Objective>(obj: &O, theta: &[f64], data: &O::Data, alpha: f64, steps: usize) -> Result<Vec<f64>> {
    Ok(adapt_trace(obj, theta, data, alpha, steps)?.0)
}

/// Adapted parameters, the iterates before each step and the first loss.
fn adapt_trace<O: Objective>(
    obj: &O,
    theta: &[f64],
    data: &O::Data,
    alpha: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Option<f64>)> {
    let mut cur = theta.to_vec();
    let mut iterates = Vec::with_capacity(steps);
    let mut first = None;
    for _ in 0..steps {
        let (l, g) = obj.loss_grad(&cur, data)?;
        check_finite(l, "support")?;
        first.get_or_insert(l);
        iterates.push(cur.clone());
        for (c, g) in cur.iter_mut().zip(&g) {
            *c -= alpha * g;
        }
    }
    Ok((cur, iterates, first))
}

/// Losses and meta-gradient contribution of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGrad {
    /// Support loss before adaptation.
    pub support_loss: f64,
    /// Query loss at the adapted parameters.
    pub query_loss: f64,
    pub grad: Vec<f64>,
}

/// Gradient of the query loss at the adapted parameters with respect to
/// `theta`. First-order mode treats the adapted parameters as independent of
/// `theta`; otherwise the gradient is pulled back through each inner step
/// with Hessian-vector products.
pub fn meta_gradient<O: Objective>(obj: &O, theta: &[f64], task: &Task<O::Data>, cfg: &MetaConfig) -> Result<TaskGrad> {
    let (adapted, iterates, first) = adapt_trace(obj, theta, &task.support, cfg.inner_lr, cfg.inner_steps)?;
    let (query_loss, mut grad) = obj.loss_grad(&adapted, &task.query)?;
    check_finite(query_loss, "query")?;
    if !cfg.first_order {
        for it in iterates.iter().rev() {
            let hv = obj.hvp(it, &task.support, &grad)?;
            for (g, h) in grad.iter_mut().zip(&hv) {
                *g -= cfg.inner_lr * h;
            }
        }
    }
    let support_loss = match first {
        Some(l) => l,
        None => obj.loss_grad(theta, &task.support)?.0,
    };
    Ok(TaskGrad { support_loss, query_loss, grad })
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            theta[i] -= self.lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + self.eps);
        }
    }
}

/// Summed meta-gradient of a batch, tasks evaluated in parallel and reduced
/// in batch order.
pub fn batch_gradient<O: Objective>(
    obj: &O,
    theta: &[f64],
    tasks: &[&Task<O::Data>],
    cfg: &MetaConfig,
) -> Result<(Vec<f64>, Vec<TaskGrad>)> {
    if tasks.is_empty() {
        return Err(Error::Precondition("meta step needs at least one task".into()));
    }
    let per: Vec<TaskGrad> = tasks
        .par_iter()
        .map(|t| meta_gradient(obj, theta, t, cfg))
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; theta.len()];
    for tg in &per {
        for (a, b) in g.iter_mut().zip(&tg.grad) {
            *a += b;
        }
    }
    Ok((g, per))
}

/// One outer update of `theta` in place.
pub fn meta_step<O: Objective>(
    obj: &O,
    theta: &mut [f64],
    adam: &mut Adam,
    tasks: &[&Task<O::Data>],
    cfg: &MetaConfig,
) -> Result<Vec<TaskGrad>> {
    let (g, per) = batch_gradient(obj, theta, tasks, cfg)?;
    adam.step(theta, &g);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite parameters after outer update".into()));
    }
    Ok(per)
}

/// One telemetry line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub task_id: String,
    pub support_loss: f64,
    pub query_loss: f64,
}

pub fn write_telemetry<W: std::io::Write>(rows: &[TelemetryRow], out: W, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("telemetry", e))?;
    Ok(())
}

/// `epochs` shuffled passes of [`meta_step`] over task batches. `on_epoch`
/// sees the epoch number, its telemetry and the parameters after it.
pub fn meta_train<O: Objective>(
    obj: &O,
    theta0: &[f64],
    tasks: &[Task<O::Data>],
    cfg: &MetaConfig,
    mut on_epoch: impl FnMut(usize, &[TelemetryRow], &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    if tasks.len() < 2 {
        return Err(Error::Precondition(format!("meta-training needs at least 2 tasks, got {}", tasks.len())));
    }
    let mut theta = theta0.to_vec();
    let mut adam = Adam::new(theta.len(), cfg.outer_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut rows = Vec::with_capacity(tasks.len());
        for chunk in order.chunks(cfg.task_batch) {
            let batch: Vec<&Task<O::Data>> = chunk.iter().map(|&i| &tasks[i]).collect();
            let per = meta_step(obj, &mut theta, &mut adam, &batch, cfg)?;
            rows.extend(batch.iter().zip(per).map(|(t, g)| TelemetryRow {
                epoch,
                task_id: t.id.clone(),
                support_loss: g.support_loss,
                query_loss: g.query_loss,
            }));
        }
        on_epoch(epoch, &rows, &theta)?;
    }
    Ok(theta)
}

/// Mean post-adaptation query and pre-adaptation support losses over `tasks`
/// at `theta`, without updating anything.
pub fn evaluate_tasks<O: Objective>(obj: &O, theta: &[f64], tasks: &[Task<O::Data>], cfg: &MetaConfig) -> Result<(f64, f64)> {
    let first = MetaConfig { first_order: true, ..cfg.clone() };
    let per: Vec<TaskGrad> = tasks.par_iter().map(|t| meta_gradient(obj, theta, t, &first)).collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(|p| p.support_loss).sum::<f64>() / n,
        per.iter().map(|p| p.query_loss).sum::<f64>() / n,
    ))
}

/// Mini-batch Adam on the mean loss over `samples`.
pub fn supervised_train<O: Objective>(
    obj: &O,
    theta0: &[f64],
    samples: &[O::Data],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Precondition("no training samples".into()));
    }
    let mut theta = theta0.to_vec();
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let per: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| obj.loss_grad(&theta, &samples[i]))
                .collect::<Result<_>>()?;
            let mut g = vec![0.0; theta.len()];
            for (l, gi) in &per {
                check_finite(*l, "training")?;
                total += l;
                for (a, b) in g.iter_mut().zip(gi) {
                    *a += b / chunk.len() as f64;
                }
            }
            adam.step(&mut theta, &g);
        }
        on_epoch(epoch, total / samples.len() as f64, &theta)?;
    }
    Ok(theta)
}

/// Label waveform for `[t0, t1)` of a trial.
pub fn trial_label(trial: &Trial, t0: f64, t1: f64, source: LabelSource) -> Result<crate::signal::Waveform> {
    match source {
        LabelSource::Finger => finger_label(trial, t0, t1),
        LabelSource::Gold => match &trial.gold_ppg {
            Some(g) => g.crop_time(t0, t1),
            None => Err(Error::Precondition("trial has no gold waveform".into())),
        },
        LabelSource::Pos => pos_pulse(&rgb_trace_from_clip(&trial.front.crop_time(t0, t1)?)?, POS_WINDOW_S),
    }
}

/// Network sample for `[t0, t1)` of a trial.
pub fn trial_sample(
    trial: &Trial,
    model: &ModelConfig,
    t0: f64,
    t1: f64,
    source: LabelSource,
    bandpass: bool,
) -> Result<Sample> {
    let clip = preprocess_clip(&trial.front.crop_time(t0, t1)?, model)?;
    let label = trial_label(trial, t0, t1, source)?;
    let target = clip_target(&clip, &label, bandpass)?;
    Ok(Sample { clip, target })
}

/// Start and end of the support window at the beginning of a trial.
pub fn support_window(trial: &Trial, support_s: f64) -> Result<(f64, f64)> {
    let t0 = trial.front.start_time();
    let available = trial.front.end_time() - t0 + 1.0 / trial.front.frame_rate();
    if available + 1e-9 < support_s {
        return Err(Error::Precondition(format!(
            "support window needs {support_s} s of video, trial has {available:.2} s"
        )));
    }
    Ok((t0, t0 + support_s))
}

/// Meta-training task: the first `support_s` seconds as support, the rest
/// (optionally capped at `query_s`) as query.
pub fn trial_task(trial: &Trial, model: &ModelConfig, cfg: &MetaConfig) -> Result<Task<Sample>> {
    let (t0, t1) = support_window(trial, cfg.support_s)?;
    let support = trial_sample(trial, model, t0, t1, cfg.train_label, cfg.bandpass_labels)?;
    let end = trial.front.end_time() + 1.0 / trial.front.frame_rate();
    let q1 = cfg.query_s.map_or(end, |q| (t1 + q).min(end));
    let query = trial_sample(trial, model, t1, q1, cfg.train_label, cfg.bandpass_labels)?;
    Ok(Task { id: format!("{}_t{:02}", trial.meta.subject_id, trial.meta.trial_no), support, query })
}

/// Adapts meta-learned parameters to one trial from its first `support_s`
/// seconds, labelled by `cfg.adapt_label`.
pub fn personalize(theta_star: &NetworkParams, trial: &Trial, cfg: &MetaConfig) -> Result<NetworkParams> {
    let model = theta_star.config();
    let (t0, t1) = support_window(trial, cfg.support_s)?;
    let support = trial_sample(trial, model, t0, t1, cfg.adapt_label, cfg.bandpass_labels)?;
    let obj = NetObjective { config: model.clone() };
    let theta = adapt(&obj, &theta_star.to_flat(), &support, cfg.inner_lr, cfg.inner_steps)?;
    NetworkParams::from_flat(model.clone(), &theta)
}

/// Plain gradient steps of the supervised model on the same support window.
pub fn finetune_baseline(
    theta_sup: &NetworkParams,
    trial: &Trial,
    ft: &FinetuneConfig,
    support_s: f64,
    bandpass: bool,
) -> Result<NetworkParams> {
    let model = theta_sup.config();
    let (t0, t1) = support_window(trial, support_s)?;
    let support = trial_sample(trial, model, t0, t1, ft.label, bandpass)?;
    let obj = NetObjective { config: model.clone() };
    let theta = adapt(&obj, &theta_sup.to_flat(), &support, ft.lr, ft.steps)?;
    NetworkParams::from_flat(model.clone(), &theta)
}

/// Cuts every trial into consecutive windows of `window_s` seconds.
pub fn windowed_samples(trials: &[Trial], model: &ModelConfig, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for trial in trials {
        let fs = trial.front.frame_rate();
        let start = trial.front.start_time();
        let end = trial.front.end_time() + 1.0 / fs;
        let mut t0 = start;
        while t0 + cfg.window_s <= end + 1e-9 {
            out.push(trial_sample(trial, model, t0, t0 + cfg.window_s, cfg.label, cfg.bandpass_labels)?);
            t0 += cfg.window_s;
        }
    }
    Ok(out)
}
