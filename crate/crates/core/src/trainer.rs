//! SGD-with-momentum training loop, learning-rate schedule, checkpointing and
//! evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, Configurable};
use crate::data::{make_batch, Clip, Dataset};
use crate::encoding::ClipBatch;
use crate::error::{Error, Result};
use crate::loss::{balanced_softmax_ce, cross_entropy, ClassCounts, LossKind};
use crate::metrics::{macro_one_vs_one, MetricReport};
use crate::model::{final_position, forward, BoundParams, ModelConfig, ModelParams};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to 5% of the total step count when unset.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    pub tau: f64,
    /// Validation interval in epochs.
    pub eval_every: usize,
    /// Global gradient-norm clip; off when unset.
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 3e-4,
            momentum: 0.9,
            batch_size: 4,
            epochs: 10,
            warmup_steps: None,
            seed: 0,
            loss: LossKind::Balanced,
            tau: 2.0,
            eval_every: 1,
            grad_clip: None,
            weight_decay: 0.0,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0) || !self.lr_base.is_finite() {
            return Err(Error::config(format!("lr_base must be > 0, got {}", self.lr_base)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::config("batch sizes, epochs and eval_every must be positive"));
        }
        if !(self.tau >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("tau and weight_decay must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| ((total_steps as f64 * 0.05).round() as usize).max(1))
    }
}

impl Configurable for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr_base" | "lr" => self.lr_base = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = Some(parse_value(key, value)?),
            "seed" => self.seed = parse_value(key, value)?,
            "loss" => self.loss = value.parse()?,
            "tau" => self.tau = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value.trim() {
                    "none" | "off" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Linear warmup to `lr_base` over `warmup` steps, then cosine decay to zero
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    let warmup = cfg.warmup_for(total_steps);
    if total_steps <= warmup {
        return Err(Error::config(format!(
            "total steps {total_steps} must exceed warmup steps {warmup}"
        )));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond total {total_steps}")));
    }
    if step < warmup {
        return Ok(cfg.lr_base * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.lr_base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: BTreeMap<String, Tensor>,
    momentum: f64,
    weight_decay: f64,
    step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            velocity,
            momentum,
            weight_decay: 0.0,
            step: 0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v` for every parameter.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, theta) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| Error::contract(format!("no velocity for `{name}`")))?;
        if g.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::shape("sgd step", theta.shape(), g.shape()));
        }
    }
    let (m, wd) = (state.momentum, state.weight_decay);
    for (name, theta) in params.iter_mut() {
        let g = grads[name].data();
        let v = state.velocity.get_mut(name).expect("checked above").data_mut();
        let theta = theta.data_mut();
        for i in 0..theta.len() {
            v[i] = m * v[i] + g[i] + wd * theta[i];
            theta[i] -= lr * v[i];
        }
    }
    state.step += 1;
    Ok(())
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters with the best validation AUC, with that epoch and AUC.
    pub best: Option<(usize, f64, ModelParams)>,
    pub losses: Vec<StepLog>,
    pub reports: Vec<MetricReport>,
}

fn batch_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    counts: Option<&ClassCounts>,
    logits: crate::Var,
    targets: &[usize],
) -> Result<crate::Var> {
    let rows = g.reshape(logits, &[targets.len(), cfg.num_classes])?;
    match (&tcfg.loss, counts) {
        (LossKind::Balanced, Some(c)) => balanced_softmax_ce(g, rows, targets, c),
        _ => cross_entropy(g, rows, targets),
    }
}

/// Trains from a fresh initialization on `train` clips of `ds`, scoring
/// `val` every `eval_every` epochs. `on_report` sees every validation report
/// as it is produced.
pub fn train_clips(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    ds: &Dataset,
    train: &[Clip],
    val: &[Clip],
    mut on_report: impl FnMut(&MetricReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training clips"));
    }
    let steps_per_epoch = train.len().div_ceil(tcfg.batch_size);
    let total = steps_per_epoch * tcfg.epochs;
    lr_at(0, total, tcfg)?;

    let counts = match tcfg.loss {
        LossKind::Balanced => {
            let finals = train.iter().map(|c| c.final_target(ds));
            Some(ClassCounts::from_labels(finals, cfg.num_classes, tcfg.tau)?)
        }
        LossKind::Ce => None,
    };

    let mut params = ModelParams::init(cfg, tcfg.seed)?;
    let mut state = OptimizerState::new(&params, tcfg.momentum).with_weight_decay(tcfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    dropout_rng.set_stream(2);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let mut reports = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let clips: Vec<Clip> = chunk.iter().map(|&i| train[i]).collect();
            let batch = make_batch(ds, &clips, cfg.num_classes)?;
            let targets: Vec<usize> = batch.target_labels.iter().flatten().copied().collect();

            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let out = forward(&mut g, &bound, &batch, cfg, Some(&mut dropout_rng))?;
            let loss = batch_loss(&mut g, cfg, tcfg, counts.as_ref(), out.logits, &targets)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric {
                    step,
                    msg: format!("loss is {value} in epoch {epoch}"),
                });
            }
            g.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, v) in bound.iter() {
                let grad = g
                    .grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                if !grad.is_finite() {
                    return Err(Error::Numeric {
                        step,
                        msg: format!("non-finite gradient for `{name}`"),
                    });
                }
                grads.insert(name.to_string(), grad);
            }
            if let Some(c) = tcfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = lr_at(step, total, tcfg)?;
            sgd_step(&mut params, &grads, &mut state, lr)?;
            log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {value:.6}");
            losses.push(StepLog {
                step,
                epoch,
                lr,
                loss: value,
            });
            step += 1;
        }

        if !val.is_empty() && (epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs) {
            match evaluate_clips(&params, cfg, ds, val, tcfg.eval_batch_size) {
                Ok(mut report) => {
                    report.split = "val".into();
                    report.epoch = epoch;
                    log::info!("epoch {epoch} val auc {:.4} acc {:.4}", report.auc, report.acc);
                    if best.as_ref().map_or(true, |b| report.auc >= b.1) {
                        best = Some((epoch, report.auc, params.clone()));
                    }
                    on_report(&report);
                    reports.push(report);
                }
                Err(Error::UndefinedMetric(msg)) => {
                    log::warn!("epoch {epoch}: validation metrics undefined ({msg})");
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainOutcome {
        params,
        best,
        losses,
        reports,
    })
}

/// Forecast class probabilities for the visit ending each clip.
pub fn predict_clips(
    params: &ModelParams,
    cfg: &ModelConfig,
    ds: &Dataset,
    clips: &[Clip],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let batch = make_batch(ds, chunk, cfg.num_classes)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let fwd = forward(&mut g, &bound, &batch, cfg, None)?;
        let last = final_position(&mut g, fwd.logits)?;
        let probs = g.softmax(last, 1)?;
        out.extend(g.value(probs).data().chunks(cfg.num_classes).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Scores final-position forecasts of `clips` against their final labels.
pub fn evaluate_clips(
    params: &ModelParams,
    cfg: &ModelConfig,
    ds: &Dataset,
    clips: &[Clip],
    batch_size: usize,
) -> Result<MetricReport> {
    let labels: Vec<usize> = clips.iter().map(|c| c.final_target(ds)).collect();
    let scores = predict_clips(params, cfg, ds, clips, batch_size)?;
    macro_one_vs_one(&scores, &labels)
}

/// Trains on `train`, keeps the parameters with the best validation AUC (the
/// final ones when validation is empty or undefined), and scores `test`.
pub fn train_and_test(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    ds: &Dataset,
    train: &[Clip],
    val: &[Clip],
    test: &[Clip],
) -> Result<MetricReport> {
    let outcome = train_clips(cfg, tcfg, ds, train, val, |_| {})?;
    let params = outcome.best.as_ref().map_or(&outcome.params, |b| &b.2);
    evaluate_clips(params, cfg, ds, test, tcfg.eval_batch_size)
}

/// Loads a checkpoint, checks it against `cfg`, and evaluates `clips`.
pub fn evaluate(
    checkpoint: &Path,
    cfg: &ModelConfig,
    ds: &Dataset,
    clips: &[Clip],
    split: &str,
) -> Result<MetricReport> {
    let params = ModelParams::load(checkpoint)?;
    params.check_against(cfg)?;
    let mut report = evaluate_clips(&params, cfg, ds, clips, 16)?;
    report.split = split.to_string();
    Ok(report)
}

/// A batch of uniform-noise images with increasing random timestamps and
/// random labels covering every class.
pub fn random_batch(cfg: &ModelConfig, batch_size: usize, steps: usize, seed: u64) -> Result<ClipBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (cfg.image_height, cfg.image_width, cfg.channels);
    let images = Tensor::from_fn(&[batch_size, steps, h, w, c], |_| rng.gen_range(0.0..1.0));
    let mut timestamps = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let mut t = rng.gen_range(0.0..3.0);
        let mut ts = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            ts.push(t);
            t += rng.gen_range(0.25..4.0);
        }
        timestamps.push(ts[..steps].to_vec());
        labels.push(
            (0..=steps)
                .map(|i| (b * (steps + 1) + i) % cfg.num_classes)
                .collect::<Vec<_>>(),
        );
    }
    let inputs = labels.iter().map(|l| l[..steps].to_vec()).collect();
    let targets = labels.iter().map(|l| l[1..].to_vec()).collect();
    ClipBatch::new(images, timestamps, inputs, targets, cfg.num_classes)
}

/// Compares the analytic gradient of the full training loss with respect to
/// every parameter against central finite differences.
pub fn check_loss_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &ClipBatch,
    counts: Option<&ClassCounts>,
    eps: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let targets: Vec<usize> = batch.target_labels.iter().flatten().copied().collect();
    let tcfg = TrainConfig {
        loss: if counts.is_some() { LossKind::Balanced } else { LossKind::Ce },
        ..TrainConfig::default()
    };
    check_gradients(
        |g, vars| {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let out = forward(g, &bound, batch, cfg, None)?;
            batch_loss(g, cfg, &tcfg, counts, out.logits, &targets)
        },
        &tensors,
        eps,
    )
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub losses: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            final_checkpoint: dir.join("final.mstp"),
            best_checkpoint: dir.join("best.mstp"),
            metrics: dir.join("metrics.jsonl"),
            losses: dir.join("loss.jsonl"),
        }
    }
}

/// Trains and writes checkpoints plus the metric and loss logs into `dir`.
/// The best checkpoint falls back to the final one when no validation
/// report was produced.
pub fn train_to_dir(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    ds: &Dataset,
    train: &[Clip],
    val: &[Clip],
    dir: &Path,
) -> Result<(TrainOutcome, RunFiles)> {
    std::fs::create_dir_all(dir)?;
    let files = RunFiles::in_dir(dir);
    let mut metrics = BufWriter::new(File::create(&files.metrics)?);
    let mut write_err = None;
    let outcome = train_clips(cfg, tcfg, ds, train, val, |r| {
        if let Err(e) = writeln!(metrics, "{}", r.to_line()).and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let mut losses = BufWriter::new(File::create(&files.losses)?);
    for entry in &outcome.losses {
        writeln!(losses, "{}", serde_json::to_string(entry).expect("step log serializes"))?;
    }
    losses.flush()?;
    outcome.params.save(&files.final_checkpoint)?;
    match &outcome.best {
        Some((_, _, best)) => best.save(&files.best_checkpoint)?,
        None => outcome.params.save(&files.best_checkpoint)?,
    }
    Ok((outcome, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: usize) -> TrainConfig {
        TrainConfig {
            lr_base: 1.0,
            warmup_steps: Some(warmup),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(10);
        assert_eq!(lr_at(4, 100, &c).unwrap(), 0.5);
        assert_eq!(lr_at(9, 100, &c).unwrap(), 1.0);
        assert_eq!(lr_at(10, 100, &c).unwrap(), 1.0);
        assert!(lr_at(100, 100, &c).unwrap().abs() < 1e-15);
        assert!(matches!(lr_at(0, 10, &c), Err(Error::Config(_))));
    }

    #[test]
    fn default_warmup_is_five_percent() {
        let c = TrainConfig::default();
        assert_eq!(c.warmup_for(200), 10);
        assert_eq!(c.warmup_for(4), 1);
    }

    fn single(value: f64) -> ModelParams {
        ModelParams::from_named([("w".to_string(), Tensor::new(vec![1], vec![value]).unwrap())]).unwrap()
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p, 0.9);
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())].into();
        sgd_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.1).abs() < 1e-15);
        assert_eq!(s.velocity("w").unwrap().data()[0], 1.0);
        sgd_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!((s.velocity("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[0] + 0.29).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut s, 0.0).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.29).abs() < 1e-15);
        assert!((s.velocity("w").unwrap().data()[0] - 2.71).abs() < 1e-15);
        assert_eq!(s.step(), 3);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p, 0.9);
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[2]))].into();
        assert!(matches!(sgd_step(&mut p, &g, &mut s, 0.1), Err(Error::Shape { .. })));
    }

    #[test]
    fn clip_norm() {
        let mut g: BTreeMap<_, _> = [("a".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())].into();
        clip_global_norm(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}
