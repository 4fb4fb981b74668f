//! Two-head cross-entropy objective, Adam and the epoch loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, FoldData, SampleRef};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, ParamKind};
use crate::net::{Checkpoint, CheckpointHeader, HeadMode, NetConfig, SiameseNet, OPTIMIZER_PREFIX};
use crate::predict::{predict_points, recalls, Predictor, ScoreNorm, THRESHOLDS_2014};
use crate::scalar::Scalar;
use crate::seed::{component_rng, derive_seed};
use crate::tensor::{Tape, Tensor, Var};

/// Lower clamp on the probability inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

/// Tolerance of the per-batch `total == corr + concat` check.
pub const LOSS_IDENTITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// The learning rate halves every this many epochs.
    pub halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub heads: HeadMode,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Score normalization used by validation predictions.
    pub score_norm: ScoreNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            halve_every: 40,
            epochs: 200,
            batch_size: 128,
            seed: 0,
            heads: HeadMode::Both,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            score_norm: ScoreNorm::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0");
        }
        if self.halve_every == 0 {
            return bad("halve_every");
        }
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        Ok(())
    }
}

/// Step schedule: `lr0 * 2^-(epoch / halve_every)` with integer division.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

/// Mean of `-ln(max(p[true class], floor))` over a `[batch, 2]` probability tensor.
pub fn head_loss<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant(probs.clone());
    let l = head_loss_var(&mut tape, p, targets)?;
    Ok(tape.value(l).item()?.as_f64())
}

/// [`head_loss`] recorded on a tape.
pub fn head_loss_var<T: Scalar>(tape: &mut Tape<T>, probs: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(probs, targets, T::of(PROB_FLOOR))
}

/// Sum of the active heads' losses.
pub fn total_loss(corr: Option<f64>, concat: Option<f64>, heads: HeadMode) -> Result<f64> {
    let pick = |active: bool, v: Option<f64>, name: &str| -> Result<f64> {
        if !active {
            return Ok(0.0);
        }
        let v = v.ok_or_else(|| Error::Config(format!("{name} head is active but produced no loss")))?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        Ok(v)
    };
    Ok(pick(heads.uses_corr(), corr, "correlation")? + pick(heads.uses_concat(), concat, "concatenation")?)
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected update of every trainable tensor whose name
    /// satisfies `active`, then releases all gradient buffers. Fails without
    /// touching anything if an active tensor has no gradient.
    pub fn update<M: Module<T>>(&mut self, module: &mut M, lr: f64, active: &dyn Fn(&str) -> bool) -> Result<()> {
        let mut missing = None;
        module.visit(&mut |name, t, kind| {
            if kind == ParamKind::Trainable && active(name) && t.grad().is_none() && missing.is_none() {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let moments = &mut self.moments;
        module.visit_mut(&mut |name, t, kind| {
            if kind == ParamKind::Trainable && active(name) {
                let g: Vec<f64> = t.grad().expect("checked above").iter().map(|v| v.as_f64()).collect();
                let n = g.len();
                let (m, v) = moments.entry(name.to_string()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
                for (i, p) in t.data_mut().iter_mut().enumerate() {
                    let mi = b1 * m[i].as_f64() + (1.0 - b1) * g[i];
                    let vi = b2 * v[i].as_f64() + (1.0 - b2) * g[i] * g[i];
                    m[i] = T::of(mi);
                    v[i] = T::of(vi);
                    let delta = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    *p = T::of(p.as_f64() - delta);
                }
            }
            t.clear_grad();
        });
        Ok(())
    }

    /// Appends the moments as `adam.m.<name>` / `adam.v.<name>` records.
    pub fn store(&self, ckpt: &mut Checkpoint<T>) {
        for (name, (m, v)) in &self.moments {
            ckpt.push(format!("{OPTIMIZER_PREFIX}m.{name}"), Tensor::from_vec(m.clone()));
            ckpt.push(format!("{OPTIMIZER_PREFIX}v.{name}"), Tensor::from_vec(v.clone()));
        }
        ckpt.header.step = self.step;
    }

    pub fn restore(ckpt: &Checkpoint<T>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let mut state = Self::new(beta1, beta2, eps);
        state.step = ckpt.header.step;
        let m_prefix = format!("{OPTIMIZER_PREFIX}m.");
        for (name, m) in ckpt.with_prefix(&m_prefix) {
            let v = ckpt
                .get(&format!("{OPTIMIZER_PREFIX}v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moment v.{name} missing")))?;
            if v.numel() != m.numel() {
                return Err(Error::LengthMismatch { left: m.numel(), right: v.numel() });
            }
            state.moments.insert(name.to_string(), (m.data().to_vec(), v.data().to_vec()));
        }
        Ok(state)
    }
}

/// Whether a parameter belongs to a part of the model the head mode trains.
pub fn is_active(name: &str, heads: HeadMode) -> bool {
    if name.starts_with("corr.") {
        heads.uses_corr()
    } else if name.starts_with("concat.") {
        heads.uses_concat()
    } else {
        true
    }
}

/// Per-epoch summary. Losses are sample-weighted means over the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_corr: Option<f64>,
    pub loss_concat: Option<f64>,
    pub loss_total: f64,
    /// Validation recall at 1, 3 and 5 px.
    pub val_r1: Option<f64>,
    pub val_r3: Option<f64>,
    pub val_r5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub loss_corr: Option<f64>,
    pub loss_concat: Option<f64>,
    pub loss_total: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "loss_corr", "loss_concat", "loss_total", "val_r1", "val_r3", "val_r5"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            opt(r.loss_corr),
            opt(r.loss_concat),
            r.loss_total.to_string(),
            opt(r.val_r1),
            opt(r.val_r3),
            opt(r.val_r5),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_batches(path: impl AsRef<Path>, batches: &[BatchRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "batch", "size", "loss_corr", "loss_concat", "loss_total"])?;
    for b in batches {
        w.write_record([
            b.epoch.to_string(),
            b.batch.to_string(),
            b.size.to_string(),
            opt(b.loss_corr),
            opt(b.loss_concat),
            b.loss_total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_batches(path: impl AsRef<Path>) -> Result<Vec<BatchRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Wall-clock seconds per epoch, kept apart from the deterministic logs.
pub fn write_timing(path: impl AsRef<Path>, seconds: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "seconds"])?;
    for (i, s) in seconds.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{s:.3}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub corr: Option<f64>,
    pub concat: Option<f64>,
    pub total: f64,
}

/// Train-mode forward and backward on one batch. Gradients are added to
/// the model's buffers and the batch-norm running statistics are updated.
pub fn forward_backward<T: Scalar>(
    model: &mut SiameseNet<T>,
    rgb: &Tensor<T>,
    lwir: &Tensor<T>,
    targets: &[usize],
    heads: HeadMode,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let r = tape.constant(rgb.clone());
    let l = tape.constant(lwir.clone());
    let out = model.forward(&mut tape, r, l, Mode::Train, heads)?;
    let lc = out.corr.map(|p| head_loss_var(&mut tape, p, targets)).transpose()?;
    let lk = out.concat.map(|p| head_loss_var(&mut tape, p, targets)).transpose()?;
    let total = match (lc, lk) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Config("no active head".into())),
    };
    let value = |v: Var| -> Result<f64> { Ok(tape.value(v).item()?.as_f64()) };
    let corr = lc.map(value).transpose()?;
    let concat = lk.map(value).transpose()?;
    let total_value = value(total)?;
    if !total_value.is_finite() {
        return Ok(StepLosses { corr, concat, total: total_value });
    }
    let expected = total_loss(corr, concat, heads)?;
    assert!(
        (total_value - expected).abs() <= LOSS_IDENTITY_TOLERANCE,
        "loss identity violated: total {total_value} vs corr + concat {expected}"
    );
    tape.backward(total)?;
    model.accumulate_grads(&tape)?;
    model.commit_moments(&out.moments)?;
    Ok(StepLosses { corr, concat, total: total_value })
}

/// Validation recall at 1, 3 and 5 px with eval-mode batch norm.
pub fn validation_recalls<T: Scalar>(model: &SiameseNet<T>, corpus: &Corpus, fold: &FoldData, cfg: &TrainConfig) -> Result<Option<Vec<f64>>> {
    if fold.validation.is_empty() {
        return Ok(None);
    }
    let predictor = Predictor::new(model, &fold.normalization, corpus.geometry, cfg.heads).with_score_norm(cfg.score_norm);
    let rows = predict_points(&predictor, corpus, &fold.validation)?;
    Ok(Some(recalls(&rows, &THRESHOLDS_2014)?))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// A loss became non-finite; the returned checkpoints predate it.
    Diverged { epoch: usize, batch: usize, corr: f64, concat: f64 },
}

impl TrainStatus {
    pub fn error(&self) -> Option<Error> {
        match *self {
            TrainStatus::Completed => None,
            TrainStatus::Diverged { epoch, batch, corr, concat } => Some(Error::Divergence { epoch, batch, corr, concat }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights of the epoch with the best validation recall@3 (lowest
    /// training loss when there is no validation set).
    pub best: Checkpoint<T>,
    pub best_epoch: usize,
    /// Final weights with optimizer state.
    pub last: Checkpoint<T>,
    pub history: Vec<LossRecord>,
    pub batches: Vec<BatchRecord>,
    pub epoch_seconds: Vec<f64>,
    pub status: TrainStatus,
}

fn snapshot<T: Scalar>(model: &SiameseNet<T>, fold: &FoldData, cfg: &TrainConfig, epoch: usize, step: u64, rec: Option<&LossRecord>) -> Checkpoint<T> {
    let mut header = CheckpointHeader::new::<T>(model.config().clone());
    header.epoch = epoch;
    header.seed = cfg.seed;
    header.heads = cfg.heads;
    header.normalization = Some(fold.normalization.clone());
    header.step = step;
    if let Some(r) = rec {
        header.metrics.insert("loss_total".into(), r.loss_total);
        for (k, v) in [("val_r1", r.val_r1), ("val_r3", r.val_r3), ("val_r5", r.val_r5)] {
            if let Some(v) = v {
                header.metrics.insert(k.into(), v);
            }
        }
    }
    Checkpoint::from_model(model, header)
}

/// Trains a freshly initialized model on `fold.train`. `observer` sees every
/// epoch summary with its wall time as it completes.
pub fn train<T: Scalar>(
    corpus: &Corpus,
    fold: &FoldData,
    net: &NetConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LossRecord, f64),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if fold.train.len() < 2 {
        return Err(Error::EmptyBatch);
    }
    if net.patch != corpus.geometry.patch {
        return Err(Error::Config(format!("network patch {} differs from data patch {}", net.patch, corpus.geometry.patch)));
    }
    let mut model = SiameseNet::<T>::new(net.clone(), derive_seed(cfg.seed, "model/init"))?;
    let mut adam = AdamState::from_config(cfg);
    let mut rng = component_rng(cfg.seed, "train/shuffle");
    let mut order: Vec<SampleRef> = fold.train.clone();
    let active = |name: &str| is_active(name, cfg.heads);

    let mut history = Vec::new();
    let mut batches = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best = snapshot(&model, fold, cfg, 0, 0, None);
    let mut best_epoch = 0;
    let mut best_key = f64::NEG_INFINITY;
    let mut status = TrainStatus::Completed;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        crate::data::shuffle(&mut order, &mut rng);
        let (mut sum_c, mut sum_k, mut sum_t, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = corpus.batch::<T>(chunk, &fold.normalization)?;
            let step = forward_backward(&mut model, &batch.rgb, &batch.lwir, &batch.targets, cfg.heads)?;
            if !step.total.is_finite() {
                model.zero_grads();
                status = TrainStatus::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    corr: step.corr.unwrap_or(f64::NAN),
                    concat: step.concat.unwrap_or(f64::NAN),
                };
                break 'epochs;
            }
            adam.update(&mut model, lr, &active)?;
            let n = chunk.len();
            sum_c += step.corr.unwrap_or(0.0) * n as f64;
            sum_k += step.concat.unwrap_or(0.0) * n as f64;
            sum_t += step.total * n as f64;
            seen += n;
            batches.push(BatchRecord { epoch: epoch + 1, batch: b, size: n, loss_corr: step.corr, loss_concat: step.concat, loss_total: step.total });
        }
        let mean = |s: f64| s / seen as f64;
        let val = validation_recalls(&model, corpus, fold, cfg)?;
        let rec = LossRecord {
            epoch: epoch + 1,
            lr,
            loss_corr: cfg.heads.uses_corr().then(|| mean(sum_c)),
            loss_concat: cfg.heads.uses_concat().then(|| mean(sum_k)),
            loss_total: mean(sum_t),
            val_r1: val.as_ref().map(|v| v[0]),
            val_r3: val.as_ref().map(|v| v[1]),
            val_r5: val.as_ref().map(|v| v[2]),
        };
        let key = rec.val_r3.unwrap_or(-rec.loss_total);
        if key > best_key {
            best_key = key;
            best_epoch = epoch + 1;
            best = snapshot(&model, fold, cfg, epoch + 1, adam.step, Some(&rec));
        }
        let secs = started.elapsed().as_secs_f64();
        epoch_seconds.push(secs);
        observer(&rec, secs);
        history.push(rec);
    }

    let mut last = snapshot(&model, fold, cfg, history.len(), adam.step, history.last());
    adam.store(&mut last);
    Ok(TrainOutcome { best, best_epoch, last, history, batches, epoch_seconds, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_fold, synth_corpus, synth_folds, synth_generate, AugmentOptions, SynthConfig};
    use crate::layers::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(39, &cfg), 0.01);
        assert_eq!(lr_at(40, &cfg), 0.005);
        assert_eq!(lr_at(199, &cfg), 0.000625);
    }

    #[test]
    fn head_loss_examples() {
        let half = Tensor::<f32>::full([4, 2], 0.5);
        assert!((head_loss(&half, &[0, 1, 0, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let perfect = Tensor::<f64>::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(head_loss(&perfect, &[0, 1]).unwrap().abs() < 1e-12);
        let wrong = Tensor::<f64>::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert!((head_loss(&wrong, &[1]).unwrap() - (1e7f64).ln()).abs() < 1e-9);
        assert!(matches!(head_loss(&Tensor::<f32>::zeros([0, 2]), &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn head_loss_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let mut data = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..n {
                let p: f32 = rng.gen_range(0.0..1.0);
                data.extend([p, 1.0 - p]);
                targets.push(rng.gen_range(0..2usize));
            }
            let mut expect = 0.0f64;
            for i in 0..n {
                let p = data[2 * i + targets[i]] as f64;
                expect -= p.max(PROB_FLOOR).ln();
            }
            expect /= n as f64;
            let got = head_loss(&Tensor::new([n, 2], data).unwrap(), &targets).unwrap();
            assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn total_loss_modes() {
        assert!((total_loss(Some(0.3), Some(0.5), HeadMode::Both).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(total_loss(Some(0.3), Some(9.0), HeadMode::Corr).unwrap(), 0.3);
        assert_eq!(total_loss(None, Some(0.5), HeadMode::Concat).unwrap(), 0.5);
        assert!(total_loss(Some(f64::NAN), Some(0.5), HeadMode::Both).is_err());
        assert!(total_loss(Some(0.3), None, HeadMode::Both).is_err());
    }

    fn scalar_layer(value: f64) -> Linear<f64> {
        let mut l = Linear::new("p", 1, 1);
        l.visit_mut(&mut |n, t, _| t.data_mut()[0] = if n.ends_with("weight") { value } else { 0.0 });
        l
    }

    fn weight(l: &Linear<f64>) -> f64 {
        let mut w = 0.0;
        l.visit(&mut |n, t, _| {
            if n.ends_with("weight") {
                w = t.data()[0];
            }
        });
        w
    }

    fn set_grads(l: &mut Linear<f64>, g: f64) {
        l.visit_mut(&mut |_, t, _| {
            t.clear_grad();
            t.accumulate_grad(&[g]).unwrap();
        });
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut l = scalar_layer(1.0);
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        set_grads(&mut l, 1.0);
        adam.update(&mut l, 0.01, &|_| true).unwrap();
        assert!((weight(&l) - (1.0 - 0.01)).abs() < 1e-9);
        assert_eq!(adam.step, 1);
        l.visit(&mut |_, t, _| assert!(t.grad().is_none()));
        for k in 2..=5 {
            set_grads(&mut l, 1.0);
            adam.update(&mut l, 0.01, &|_| true).unwrap();
            assert!((weight(&l) - (1.0 - 0.01 * k as f64)).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_and_missing() {
        let mut l = scalar_layer(0.7);
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        set_grads(&mut l, 0.0);
        adam.update(&mut l, 0.01, &|_| true).unwrap();
        assert_eq!(weight(&l), 0.7);
        assert!(matches!(adam.update(&mut l, 0.01, &|_| true), Err(Error::MissingGradient(_))));
        assert_eq!(adam.step, 1);
        adam.update(&mut l, 0.01, &|_| false).unwrap();
    }

    #[test]
    fn parameter_ownership() {
        assert!(is_active("rgb.conv1.weight", HeadMode::Corr));
        assert!(is_active("corr.fc1.bias", HeadMode::Corr));
        assert!(!is_active("concat.fc1.bias", HeadMode::Corr));
        assert!(!is_active("corr.fc3.weight", HeadMode::Concat));
    }

    fn tiny_net() -> NetConfig {
        NetConfig { head_hidden: vec![8, 4], ..NetConfig::with_channels(vec![2, 2, 2, 2, 2, 3, 3, 3, 4]) }
    }

    fn tiny_fold() -> (Corpus, FoldData) {
        let cfg = SynthConfig { frames: 3, points_per_frame: 3, validation_images: 1, ..SynthConfig::default() };
        let mut corpus = synth_corpus(&cfg, &synth_generate(&cfg).unwrap()).unwrap();
        let spec = &synth_folds(&cfg)[0];
        let fold = build_fold(spec, &mut corpus, &AugmentOptions::default(), 1).unwrap();
        (corpus, fold)
    }

    fn random_batch(b: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::from_fn([b, 3, 36, 36], |_| rng.gen_range(-1.0..1.0));
        let (r, l) = (t(), t());
        (r, l, (0..b).map(|i| i % 2).collect())
    }

    #[test]
    fn both_heads_gradient_is_sum_of_single_heads() {
        let (r, l, y) = random_batch(4, 2);
        let base = SiameseNet::<f64>::new(tiny_net(), 8).unwrap();
        let grads = |heads| {
            let mut m = base.clone();
            forward_backward(&mut m, &r, &l, &y, heads).unwrap();
            let mut out = BTreeMap::new();
            m.visit(&mut |n, t, _| {
                if let Some(g) = t.grad() {
                    out.insert(n.to_string(), g.to_vec());
                }
            });
            out
        };
        let both = grads(HeadMode::Both);
        let corr = grads(HeadMode::Corr);
        let concat = grads(HeadMode::Concat);
        assert!(!corr.keys().any(|k| k.starts_with("concat.")));
        assert!(!concat.keys().any(|k| k.starts_with("corr.")));
        for (name, g) in &both {
            let zeros = vec![0.0; g.len()];
            let a = corr.get(name).unwrap_or(&zeros);
            let b = concat.get(name).unwrap_or(&zeros);
            if name.starts_with("rgb.conv1") {
                assert!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0), "{name}");
            }
            for i in 0..g.len() {
                assert!((g[i] - a[i] - b[i]).abs() < 1e-9 * (1.0 + g[i].abs()), "{name}[{i}]");
            }
        }
    }

    #[test]
    fn small_step_does_not_increase_batch_loss() {
        let (r, l, y) = random_batch(6, 3);
        let mut m = SiameseNet::<f64>::new(tiny_net(), 4).unwrap();
        let before = forward_backward(&mut m, &r, &l, &y, HeadMode::Both).unwrap().total;
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        adam.update(&mut m, 1e-4, &|_| true).unwrap();
        let after = forward_backward(&mut m, &r, &l, &y, HeadMode::Both).unwrap().total;
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, fold) = tiny_fold();
        let cfg = TrainConfig { epochs: 3, batch_size: 32, lr0: 0.005, seed: 9, ..TrainConfig::default() };
        let run = || train::<f32>(&corpus, &fold, &tiny_net(), &cfg, &mut |_, _| {}).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.status, TrainStatus::Completed);
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|r| r.val_r3.is_some()));
        for bt in &a.batches {
            let sum = bt.loss_corr.unwrap() + bt.loss_concat.unwrap();
            assert!((bt.loss_total - sum).abs() <= LOSS_IDENTITY_TOLERANCE);
        }
        assert!(a.last.with_prefix(OPTIMIZER_PREFIX).count() > 0);
        let restored = AdamState::<f32>::restore(&a.last, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(restored.step, a.last.header.step);
        a.best.model().unwrap();
    }

    #[test]
    fn ablation_modes_run() {
        let (corpus, fold) = tiny_fold();
        for heads in [HeadMode::Corr, HeadMode::Concat] {
            let cfg = TrainConfig { epochs: 1, batch_size: 64, heads, ..TrainConfig::default() };
            let out = train::<f32>(&corpus, &fold, &tiny_net(), &cfg, &mut |_, _| {}).unwrap();
            let rec = &out.history[0];
            assert_eq!(rec.loss_corr.is_some(), heads.uses_corr());
            assert_eq!(rec.loss_concat.is_some(), heads.uses_concat());
        }
    }

    #[test]
    fn logs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let hist = vec![LossRecord { epoch: 1, lr: 0.01, loss_corr: Some(0.4), loss_concat: None, loss_total: 0.4, val_r1: None, val_r3: Some(0.5), val_r5: None }];
        write_history(dir.path().join("h.csv"), &hist).unwrap();
        assert_eq!(read_history(dir.path().join("h.csv")).unwrap(), hist);
        let b = vec![BatchRecord { epoch: 1, batch: 0, size: 8, loss_corr: Some(0.25), loss_concat: Some(0.5), loss_total: 0.75 }];
        write_batches(dir.path().join("b.csv"), &b).unwrap();
        assert_eq!(read_batches(dir.path().join("b.csv")).unwrap(), b);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
