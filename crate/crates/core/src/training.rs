//! Adam, the learning-rate schedule, the training loop and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{make_batch, stream_rng, BatchConfig, DropoutMode, Sample, Stream};
use crate::error::{Error, Result};
use crate::metrics::{psnr, scheduled_loss, ssim, LossKind, LossSchedule};
use crate::model::{forward, infer, ModelConfig, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::resample::{bicubic_resize, Image};

/// Checkpoint tensor prefix for optimizer moments.
pub const ADAM_PREFIX: &str = "adam.";
pub const REPORT_HEADER: &str = "epoch,loss,loss_kind,lr,psnr_g,ssim_g,psnr_u,ssim_u";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi as f64;
            let mi = cfg.beta1 * md[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * vd[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            pd[i] = (pd[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub p_th: f64,
    pub dropout: DropoutMode,
    pub augment: bool,
    /// First epoch trained with L2.
    pub t_loss: usize,
    /// First epoch trained at `lr_low`.
    pub t_lr: usize,
    pub lr_high: f64,
    pub lr_low: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (0 disables); the final epoch is
    /// always evaluated when it is nonzero.
    pub eval_every: usize,
    /// Write `epoch_NNNNNN.ckpt` every this many epochs (0 disables).
    pub ckpt_every: usize,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4300,
            batch: 16,
            patch: 128,
            p_th: 0.0,
            dropout: DropoutMode::PerSample,
            augment: true,
            t_loss: 3300,
            t_lr: 3300,
            lr_high: 4e-4,
            lr_low: 1e-4,
            seed: 0,
            eval_every: 10,
            ckpt_every: 100,
            grad_clip: None,
            adam: AdamConfig::default(),
        }
    }
}

const TRAIN_KEYS: [&str; 17] = [
    "epochs",
    "batch",
    "patch",
    "p_th",
    "dropout",
    "augment",
    "t_loss",
    "t_lr",
    "lr_high",
    "lr_low",
    "seed",
    "eval_every",
    "ckpt_every",
    "grad_clip",
    "beta1",
    "beta2",
    "adam_eps",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("train config: cannot parse {key}={value:?}")))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        &TRAIN_KEYS
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "patch" => self.patch.to_string(),
            "p_th" => self.p_th.to_string(),
            "dropout" => self.dropout.to_string(),
            "augment" => self.augment.to_string(),
            "t_loss" => self.t_loss.to_string(),
            "t_lr" => self.t_lr.to_string(),
            "lr_high" => self.lr_high.to_string(),
            "lr_low" => self.lr_low.to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            "grad_clip" => self.grad_clip.map_or("none".into(), |c| c.to_string()),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            _ => return None,
        })
    }

    /// Sets one field from text. `t` sets both switch epochs at once.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "p_th" => self.p_th = parse(key, value)?,
            "dropout" => self.dropout = value.trim().parse()?,
            "augment" => self.augment = parse(key, value)?,
            "t" => {
                self.t_loss = parse(key, value)?;
                self.t_lr = self.t_loss;
            }
            "t_loss" => self.t_loss = parse(key, value)?,
            "t_lr" => self.t_lr = parse(key, value)?,
            "lr_high" => self.lr_high = parse(key, value)?,
            "lr_low" => self.lr_low = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "ckpt_every" => self.ckpt_every = parse(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            _ => return Err(Error::Invalid(format!("unknown train config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in TRAIN_KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("train config: {m}")));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.patch == 0 || self.patch % model.scale != 0 {
            return bad(format!("patch {} must be a positive multiple of scale {}", self.patch, model.scale));
        }
        if !(0.0..=1.0).contains(&self.p_th) {
            return bad(format!("p_th {} outside [0, 1]", self.p_th));
        }
        for (k, v) in [("lr_high", self.lr_high), ("lr_low", self.lr_low)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} {v} must be finite and nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn batch_config(&self, model: &ModelConfig) -> BatchConfig {
        BatchConfig {
            patch: self.patch,
            scale: model.scale,
            p_th: self.p_th,
            dropout: self.dropout,
            augment: self.augment,
        }
    }
}

/// `lr_high` for epochs before `t_lr`, `lr_low` from then on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.t_lr {
        cfg.lr_high
    } else {
        cfg.lr_low
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Guided,
    Unguided,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub psnr: f64,
    pub ssim: f64,
}

fn mean_metrics(per_sample: Vec<(f64, f64)>) -> Result<EvalResult> {
    if per_sample.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let n = per_sample.len() as f64;
    let (p, s) = per_sample.iter().fold((0.0, 0.0), |(p, s), &(a, b)| (p + a, s + b));
    Ok(EvalResult { psnr: p / n, ssim: s / n })
}

/// Full-image super-resolution of one sample; the output is clamped to [0, 1].
pub fn super_resolve(cfg: &ModelConfig, params: &ModelParams<Tensor<f32>>, ir_lr: &Image, rgb: Option<&Image>) -> Result<Image> {
    let (h, w) = (ir_lr.height() * cfg.scale, ir_lr.width() * cfg.scale);
    let guide = match rgb {
        Some(g) => {
            if g.channels() != cfg.guide_channels || g.height() != h || g.width() != w {
                return Err(Error::Invalid(format!(
                    "guide is {}x{}x{} but IR {}x{} at scale {} needs {}x{}x{}",
                    g.channels(),
                    g.height(),
                    g.width(),
                    ir_lr.height(),
                    ir_lr.width(),
                    cfg.scale,
                    cfg.guide_channels,
                    h,
                    w
                )));
            }
            g.tensor().clone()
        }
        None => Tensor::zeros([cfg.guide_channels, h, w]),
    };
    let add_batch = |t: &Tensor<f32>| t.clone().reshape([1, t.shape()[0], t.shape()[1], t.shape()[2]]);
    let out = infer(cfg, params, &add_batch(ir_lr.tensor())?, &add_batch(&guide)?)?;
    let [_, c, oh, ow] = <[usize; 4]>::try_from(out.shape()).expect("rank 4");
    Ok(Image::from_tensor(out.reshape([c, oh, ow])?)?.clamped())
}

/// Mean PSNR and SSIM of full-image predictions against `ir_hr`. Samples are
/// processed in parallel; the means are summed in sample order.
pub fn evaluate(cfg: &ModelConfig, params: &ModelParams<Tensor<f32>>, samples: &[Sample], mode: EvalMode) -> Result<EvalResult> {
    let per: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let guide = match mode {
                EvalMode::Guided => Some(&s.rgb),
                EvalMode::Unguided => None,
            };
            let pred = super_resolve(cfg, params, &s.ir_lr, guide)?;
            Ok((psnr(&pred, &s.ir_hr)?, ssim(&pred, &s.ir_hr)?))
        })
        .collect::<Result<_>>()?;
    mean_metrics(per)
}

/// Metrics of the clamped bicubic upsample, the reference a zero-residual
/// model reproduces.
pub fn bicubic_baseline(samples: &[Sample]) -> Result<EvalResult> {
    let per: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let up = bicubic_resize(&s.ir_lr, s.height(), s.width())?.clamped();
            Ok((psnr(&up, &s.ir_hr)?, ssim(&up, &s.ir_hr)?))
        })
        .collect::<Result<_>>()?;
    mean_metrics(per)
}

/// One row of the training report. Metric columns are empty on epochs
/// without evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub loss: f64,
    pub loss_kind: LossKind,
    pub lr: f64,
    pub guided: Option<EvalResult>,
    pub unguided: Option<EvalResult>,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let m = |r: Option<EvalResult>| r.map_or((String::new(), String::new()), |r| (r.psnr.to_string(), r.ssim.to_string()));
        let (pg, sg) = m(self.guided);
        let (pu, su) = m(self.unguided);
        format!("{},{},{},{},{pg},{sg},{pu},{su}", self.epoch, self.loss, self.loss_kind, self.lr)
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Invalid(format!("report row has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Invalid(format!("bad number {s:?} in report"))) };
        let pair = |a: &str, b: &str| -> Result<Option<EvalResult>> {
            if a.is_empty() {
                return Ok(None);
            }
            Ok(Some(EvalResult { psnr: num(a)?, ssim: num(b)? }))
        };
        Ok(ReportRow {
            epoch: f[0].parse().map_err(|_| Error::Invalid(format!("bad epoch {:?}", f[0])))?,
            loss: num(f[1])?,
            loss_kind: f[2].parse()?,
            lr: num(f[3])?,
            guided: pair(f[4], f[5])?,
            unguided: pair(f[6], f[7])?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::Invalid("report does not start with the expected header".into()));
        }
        let rows = lines.filter(|l| !l.trim().is_empty()).map(ReportRow::from_csv).collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport { rows })
    }

    pub fn best_guided(&self) -> Option<(usize, EvalResult)> {
        self.rows
            .iter()
            .filter_map(|r| r.guided.map(|g| (r.epoch, g)))
            .fold(None, |best: Option<(usize, EvalResult)>, cur| match best {
                Some(b) if b.1.psnr >= cur.1.psnr => Some(b),
                _ => Some(cur),
            })
    }
}

/// What one epoch did.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_kind: LossKind,
    pub lr: f64,
    pub step_losses: Vec<f64>,
    /// Per batch, which samples trained without their guide.
    pub guide_dropped: Vec<Vec<bool>>,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        self.step_losses.iter().sum::<f64>() / self.step_losses.len().max(1) as f64
    }
}

/// Parameters, optimizer moments and the position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<Tensor<f32>>,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_psnr: Option<f64>,
}

fn flatten(p: &ModelParams<Tensor<f32>>) -> Vec<Tensor<f32>> {
    let mut out = Vec::new();
    p.for_each(|_, t| out.push(t.clone()));
    out
}

fn unflatten(template: &ModelParams<Tensor<f32>>, flat: Vec<Tensor<f32>>) -> ModelParams<Tensor<f32>> {
    let mut it = flat.into_iter();
    template.map(&mut |_, _| Ok(it.next().expect("same traversal"))).expect("infallible")
}

impl Trainer {
    /// Fresh weights drawn from the init stream of `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate(&model)?;
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
        let params = ModelParams::init(&model, &mut rng)?;
        Ok(Self::with_params(model, cfg, params))
    }

    pub fn with_params(model: ModelConfig, cfg: TrainConfig, params: ModelParams<Tensor<f32>>) -> Self {
        let adam = AdamState::new(&flatten(&params));
        Trainer {
            model,
            cfg,
            params,
            adam,
            epoch: 0,
            best_psnr: None,
        }
    }

    /// Runs one epoch over `samples` in a seeded order.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochStats> {
        if samples.is_empty() {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let epoch = self.epoch;
        let kind = scheduled_loss(epoch, LossSchedule { switch_epoch: self.cfg.t_loss });
        let lr = lr_at(epoch, &self.cfg);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let bcfg = self.cfg.batch_config(&self.model);
        let mut stats = EpochStats {
            epoch,
            loss_kind: kind,
            lr,
            step_losses: Vec::new(),
            guide_dropped: Vec::new(),
        };
        for (bi, idx) in order.chunks(self.cfg.batch).enumerate() {
            let batch = make_batch(samples, idx, &bcfg, self.cfg.seed, epoch as u64)?;
            let mut tape = Tape::<f32>::new();
            let vars = self.params.to_vars(&mut tape, true);
            let x = tape.constant(batch.ir_lr);
            let g = tape.constant(batch.rgb);
            let gt = tape.constant(batch.ir_hr);
            let pred = forward(&mut tape, x, g, &self.model, &vars)?;
            let loss = kind.apply(&mut tape, pred, gt)?;
            let value = tape.value(loss).item().map_or(f64::NAN, |v| v as f64);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, value });
            }
            let mut grads_by_var = tape.backward(loss)?;
            let mut grads = Vec::new();
            vars.for_each(|_, v| {
                let shape = tape.shape(*v).to_vec();
                grads.push(grads_by_var.take(*v).unwrap_or_else(|| Tensor::zeros(shape)));
            });
            if let Some(c) = self.cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let mut flat = flatten(&self.params);
            adam_step(&mut flat, &grads, &mut self.adam, lr, &self.cfg.adam)?;
            self.params = unflatten(&self.params, flat);
            stats.step_losses.push(value);
            stats.guide_dropped.push(batch.guide_dropped);
        }
        self.epoch += 1;
        Ok(stats)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(self.model.clone(), &self.params);
        let names = self.params.names();
        for (i, name) in names.iter().enumerate() {
            ck.tensors.insert(format!("{ADAM_PREFIX}m.{name}"), self.adam.m[i].clone());
            ck.tensors.insert(format!("{ADAM_PREFIX}v.{name}"), self.adam.v[i].clone());
        }
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck.meta.insert("adam_t".into(), self.adam.t.to_string());
        if let Some(b) = self.best_psnr {
            ck.meta.insert("best_psnr_g".into(), format!("{b:e}"));
        }
        for line in self.cfg.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                ck.meta.insert(format!("train.{k}"), v.to_string());
            }
        }
        ck
    }

    /// Restores a trainer written by [`Trainer::to_checkpoint`]. The stored
    /// training config is used unless `cfg` overrides it.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => c,
            None => {
                let mut c = TrainConfig::default();
                for (k, v) in &ck.meta {
                    if let Some(key) = k.strip_prefix("train.") {
                        c.set(key, v).map_err(|e| Error::Checkpoint(e.to_string()))?;
                    }
                }
                c
            }
        };
        cfg.validate(&ck.config)?;
        let params = ck.params(&[ADAM_PREFIX])?;
        let meta = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")));
        let num = |k: &str| -> Result<u64> { meta(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad metadata {k}"))) };
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut missing = None;
        params.for_each(|name, p| {
            for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
                match ck.tensors.get(&format!("{ADAM_PREFIX}{prefix}.{name}")) {
                    Some(t) if t.shape() == p.shape() => out.push(t.clone()),
                    _ => missing = missing.take().or(Some(format!("{ADAM_PREFIX}{prefix}.{name}"))),
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("optimizer state {name} missing or misshapen")));
        }
        let best_psnr = match ck.meta.get("best_psnr_g") {
            Some(b) => Some(b.parse().map_err(|_| Error::Checkpoint("bad metadata best_psnr_g".into()))?),
            None => None,
        };
        Ok(Trainer {
            model: ck.config.clone(),
            cfg,
            params,
            adam: AdamState { m, v, t: num("adam_t")? },
            epoch: num("epoch")? as usize,
            best_psnr,
        })
    }
}

/// Where a run writes its report and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.csv")
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn epoch_path(&self, epochs_done: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epochs_done:06}.ckpt"))
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub report: MetricsReport,
    pub epochs: Vec<EpochStats>,
}

/// Trains until `trainer.cfg.epochs` epochs are done.
///
/// `eval_set` defaults to the training samples. With `out`, the report is
/// rewritten after every epoch, `last.ckpt` at the end, numbered checkpoints
/// every `ckpt_every` epochs and `best.ckpt` whenever guided PSNR improves.
/// `progress` sees each row as it is produced.
pub fn train(
    mut trainer: Trainer,
    samples: &[Sample],
    eval_set: Option<&[Sample]>,
    out: Option<&RunOutput>,
    mut progress: impl FnMut(&ReportRow),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let eval_set = eval_set.unwrap_or(samples);
    let mut report = match out {
        Some(o) if trainer.epoch > 0 && o.report_path().exists() => {
            let text = fs::read_to_string(o.report_path()).map_err(|e| Error::io(o.report_path(), e))?;
            let mut r = MetricsReport::from_csv(&text)?;
            r.rows.retain(|row| row.epoch < trainer.epoch);
            r
        }
        _ => MetricsReport::default(),
    };
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let total = trainer.cfg.epochs;
    let mut epochs = Vec::new();
    while trainer.epoch < total {
        let stats = trainer.run_epoch(samples)?;
        let done = trainer.epoch;
        let every = trainer.cfg.eval_every;
        let eval_now = every > 0 && (done % every == 0 || done == total);
        let (guided, unguided) = if eval_now {
            (
                Some(evaluate(&trainer.model, &trainer.params, eval_set, EvalMode::Guided)?),
                Some(evaluate(&trainer.model, &trainer.params, eval_set, EvalMode::Unguided)?),
            )
        } else {
            (None, None)
        };
        let row = ReportRow {
            epoch: stats.epoch,
            loss: stats.mean_loss(),
            loss_kind: stats.loss_kind,
            lr: stats.lr,
            guided,
            unguided,
        };
        progress(&row);
        report.rows.push(row);
        let improved = guided.is_some_and(|g| trainer.best_psnr.map_or(true, |b| g.psnr > b));
        if improved {
            trainer.best_psnr = guided.map(|g| g.psnr);
        }
        if let Some(o) = out {
            write_text(&o.report_path(), &report.to_csv())?;
            if improved {
                trainer.to_checkpoint().save(&o.best_path())?;
            }
            if trainer.cfg.ckpt_every > 0 && done % trainer.cfg.ckpt_every == 0 {
                trainer.to_checkpoint().save(&o.epoch_path(done))?;
            }
        }
        epochs.push(stats);
    }
    if let Some(o) = out {
        write_text(&o.report_path(), &report.to_csv())?;
        trainer.to_checkpoint().save(&o.last_path())?;
    }
    Ok(TrainOutcome { trainer, report, epochs })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Digest of sample contents, for checking that training
/// leaves its inputs untouched.
pub fn dataset_checksum(samples: &[Sample]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for s in samples {
        s.id.hash(&mut h);
        for img in [&s.ir_hr, &s.ir_lr, &s.rgb] {
            img.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
    }
    h.finish()
}

/// Metadata the CLI stores next to a report.
pub fn run_metadata(model: &ModelConfig, cfg: &TrainConfig, extra: &BTreeMap<String, String>) -> String {
    let mut s = model.to_kv();
    s.push_str(&cfg.to_kv());
    for (k, v) in extra {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

#[cfg(test)]
mod tests;
