//! Losses, Adam, and the mini-batch training loop with per-epoch
//! validation, best-model checkpointing and k-fold cross-validation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::split::kfold_split;
use crate::data::SliceSample;
use crate::edge::EdgeMap;
use crate::metrics::{aggregate, evaluate, MetricReport, SegmentationMask};
use crate::network::{Model, NetworkConfig};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result, Tape};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

fn one_hot(truth: &SegmentationMask, classes: usize) -> Result<Tensor> {
    if truth.classes() > classes {
        return Err(Error::Data(format!(
            "mask has {} classes, logits {classes}",
            truth.classes()
        )));
    }
    let plane = truth.height() * truth.width();
    let mut data = vec![0.0; classes * plane];
    for (p, &l) in truth.labels().iter().enumerate() {
        data[l as usize * plane + p] = 1.0;
    }
    Ok(Tensor::new([classes, truth.height(), truth.width()], data)?)
}

fn check_extents(x: Var<'_>, truth: &SegmentationMask) -> Result<usize> {
    match *x.shape() {
        [c, h, w] if (h, w) == (truth.height(), truth.width()) => Ok(c),
        ref s => Err(Error::Data(format!(
            "{s:?} logits against a {}×{} mask",
            truth.height(),
            truth.width()
        ))),
    }
}

/// Mean over pixels of `−log softmax(logits)[truth]`.
pub fn ce_loss<'t>(logits: Var<'t>, truth: &SegmentationMask) -> Result<Var<'t>> {
    let classes = check_extents(logits, truth)?;
    let target = logits.tape().constant(one_hot(truth, classes)?);
    let pixels = (truth.height() * truth.width()) as f64;
    Ok(logits.log_softmax(0)?.mul(target)?.sum_all()?.scale(-1.0 / pixels)?)
}

/// `1 − mean_c (2Σpt + s) / (Σp + Σt + s)` over foreground classes.
pub fn dice_loss<'t>(probs: Var<'t>, truth: &SegmentationMask) -> Result<Var<'t>> {
    let classes = check_extents(probs, truth)?;
    if classes < 2 {
        return Err(Error::Data("dice loss needs a foreground class".into()));
    }
    let tape = probs.tape();
    let onehot = one_hot(truth, classes)?;
    let target_sums: Vec<f64> = onehot.data().chunks(truth.height() * truth.width()).map(|c| c.iter().sum()).collect();
    let inter = probs.mul(tape.constant(onehot))?.sum(&[1, 2], false)?;
    let denom = probs
        .sum(&[1, 2], false)?
        .add(tape.constant(Tensor::from_vec(target_sums)))?
        .add_scalar(DICE_SMOOTH)?;
    let ratio = inter.scale(2.0)?.add_scalar(DICE_SMOOTH)?.div(denom)?;
    let mut fg = vec![1.0 / (classes - 1) as f64; classes];
    fg[0] = 0.0;
    let mean = ratio.mul(tape.constant(Tensor::from_vec(fg)))?.sum_all()?;
    Ok(mean.neg()?.add_scalar(1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossMode {
    #[default]
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
    #[serde(rename = "cross-entropy+dice")]
    CrossEntropyDice,
}

pub fn loss<'t>(mode: LossMode, logits: Var<'t>, truth: &SegmentationMask) -> Result<Var<'t>> {
    let ce = ce_loss(logits, truth)?;
    Ok(match mode {
        LossMode::CrossEntropy => ce,
        LossMode::CrossEntropyDice => ce.add(dice_loss(logits.softmax(0)?, truth)?)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update. `grads` is indexed like the store.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        let g = g.as_ref().ok_or_else(|| Error::MissingGradient(params.name(id).to_string()))?;
        if g.shape() != params.get(id).shape() {
            return Err(Error::Config(format!("gradient shape for {}", params.name(id))));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[i].as_ref().expect("checked");
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = params.get_mut(id).data_mut();
        for j in 0..theta.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            theta[j] -= state.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub folds: usize,
    pub seed: u64,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            lr: 0.01,
            folds: 5,
            seed: 0,
            loss: LossMode::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return Err(Error::Config("epochs, batch_size and folds must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss; absent for epoch 0.
    pub train_loss: Option<f64>,
    /// Mean foreground DSC on the validation samples.
    pub val_dsc: f64,
    /// Per-class validation DSC in report order.
    pub val_class_dsc: Vec<(String, f64)>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }

    /// The log with wall-clock times zeroed: everything that must repeat
    /// bit for bit under a fixed seed.
    pub fn reproducible(&self) -> TrainingLog {
        TrainingLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_seconds: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Checkpoint bytes of the best model.
    pub best_checkpoint: Vec<u8>,
}

/// Average of per-sample metric reports against the model's predictions.
pub fn evaluate_model(model: &Model, samples: &[SliceSample]) -> Result<MetricReport> {
    let reports = samples
        .iter()
        .map(|s| evaluate(&model.predict(&s.image)?, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports).ok_or_else(|| Error::Data("no samples to evaluate".into()))
}

struct Prepared<'a> {
    sample: &'a SliceSample,
    edges: Vec<EdgeMap>,
}

fn sample_loss<'t>(ctx: &Ctx<'t>, model: &Model, p: &Prepared<'_>, mode: LossMode) -> Result<Var<'t>> {
    let logits = model.forward(ctx, ctx.tape.constant(p.sample.image.clone()), &p.edges)?;
    loss(mode, logits, &p.sample.mask)
}

/// Mean loss over `samples`, recorded on one tape.
pub fn batch_loss<'t>(ctx: &Ctx<'t>, model: &Model, samples: &[SliceSample], mode: LossMode) -> Result<Var<'t>> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for s in samples {
        let p = Prepared {
            sample: s,
            edges: model.edges(&s.image)?,
        };
        let l = sample_loss(ctx, model, &p, mode)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / samples.len() as f64)?)
}

fn record(epoch: usize, train_loss: Option<f64>, report: &MetricReport, start: Instant) -> EpochRecord {
    EpochRecord {
        epoch,
        train_loss,
        val_dsc: report.mean_dsc,
        val_class_dsc: report.classes.iter().map(|c| (c.name.clone(), c.dsc)).collect(),
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Trains `model` in place. Each epoch shuffles the training samples with
/// a generator seeded from `cfg.seed`, runs mini-batches (gradients are the
/// mean of per-sample gradients, accumulated in batch order), then scores
/// the validation samples. The best-scoring state is kept as checkpoint
/// bytes; `on_epoch` sees each log record as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[SliceSample],
    validation: &[SliceSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let prepared = train_set
        .iter()
        .map(|s| {
            Ok(Prepared {
                sample: s,
                edges: model.edges(&s.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut log = TrainingLog::default();

    let initial = record(0, None, &evaluate_model(model, validation)?, start);
    on_epoch(&initial);
    let mut best = (0, initial.val_dsc, model.to_bytes());
    log.records.push(initial);

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum: Vec<Tensor> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                tape.reset();
                let ctx = Ctx::new(&tape, &model.params);
                let l = sample_loss(&ctx, model, &prepared[i], cfg.loss)?;
                batch_loss += l.value().item();
                tape.backward(l)?;
                for (acc, g) in sum.iter_mut().zip(tape.param_grads(&model.params)) {
                    let g = g.ok_or_else(|| Error::MissingGradient("unbound parameter".into()))?;
                    acc.add_assign(&g);
                }
            }
            tape.reset();
            let n = batch.len() as f64;
            let mean_loss = batch_loss / n;
            if !mean_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    samples: batch.iter().map(|&i| prepared[i].sample.id()).collect(),
                    loss: mean_loss,
                });
            }
            epoch_loss += batch_loss;
            let grads: Vec<Option<Tensor>> = sum.into_iter().map(|g| Some(g.map(|v| v / n))).collect();
            adam_step(&mut model.params, &grads, &mut adam)?;
        }
        let rec = record(
            epoch,
            Some(epoch_loss / prepared.len() as f64),
            &evaluate_model(model, validation)?,
            start,
        );
        on_epoch(&rec);
        if rec.val_dsc > best.1 {
            best = (epoch, rec.val_dsc, model.to_bytes());
        }
        log.records.push(rec);
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_val_dsc: best.1,
        best_checkpoint: best.2,
    })
}

/// SplitMix64 step, used to derive independent seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub validation_ids: Vec<String>,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldReport>,
    pub mean_dsc: f64,
    pub min_dsc: f64,
    pub max_dsc: f64,
}

/// Trains a freshly initialized model on fold `f` of a `cfg.folds`-way
/// split. The model is seeded with `derive_seed(seed, 2f)` and the batch
/// shuffle with `derive_seed(seed, 2f+1)`.
pub fn train_fold(
    net: &NetworkConfig,
    samples: &[SliceSample],
    cfg: &TrainConfig,
    f: usize,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldReport> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let folds = kfold_split(&idx, cfg.folds, cfg.seed)?;
    let fold = folds
        .get(f)
        .ok_or_else(|| Error::Config(format!("fold {f} requested, split has {}", folds.len())))?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (tr, va) = (pick(&fold.train), pick(&fold.validation));
    let mut model = Model::new(net.clone(), derive_seed(cfg.seed, 2 * f as u64))?;
    let fold_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 2 * f as u64 + 1),
        batch_size: cfg.batch_size.min(tr.len()),
        ..cfg.clone()
    };
    let outcome = train(&mut model, &tr, &va, &fold_cfg, on_epoch)?;
    Ok(FoldReport {
        fold: f,
        validation_ids: va.iter().map(SliceSample::id).collect(),
        outcome,
    })
}

/// Runs [`train_fold`] for every fold and summarizes the per-fold best
/// validation DSC.
pub fn cross_validate(
    net: &NetworkConfig,
    samples: &[SliceSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<CrossValidation> {
    let mut reports = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        reports.push(train_fold(net, samples, cfg, f, |r| on_epoch(f, r))?);
    }
    Ok(summarize(reports))
}

/// Mean, min and max of the per-fold best validation DSC.
pub fn summarize(folds: Vec<FoldReport>) -> CrossValidation {
    let scores: Vec<f64> = folds.iter().map(|r| r.outcome.best_val_dsc).collect();
    CrossValidation {
        mean_dsc: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
        min_dsc: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max_dsc: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        folds,
    }
}
