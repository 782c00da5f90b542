//! Training loop, evaluation, baselines, ablations and corruption runs.

use crate::checkpoint::Checkpoint;
use crate::config::{Component, RunConfig};
use crate::data::{
    corrupt_instructions, load_dataset, make_splits, stream_seed, AffordanceSample, CorruptionMode, Dataset,
    Split, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, SplitSummary};
use crate::model::ModelState;
use crate::tensor::{Graph, Tensor};
use crate::text::{Vocabulary, UNK};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::path::Path;

const EPOCH_STREAM: u64 = 2;
const PROTO_STREAM: u64 = 3;
const VAL_STREAM: u64 = 4;
const BASELINE_STREAM: u64 = 5;

/// Largest share of unknown tokens an instruction may have before the
/// vocabulary is considered foreign to the split.
pub const MAX_UNKNOWN_FRACTION: f64 = 0.5;

/// Mean loss components over one epoch, plus the validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mask: f64,
    pub focal: f64,
    pub dice: f64,
    pub align: f64,
    pub proto: f64,
    pub total: f64,
    pub lr: f64,
    pub val_aiou: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={}\tL_mask={:.6}\tL_focal={:.6}\tL_dice={:.6}\tL_align={:.6}\tL_proto={:.6}\tL_total={:.6}\tlr={:.3e}",
            self.epoch, self.mask, self.focal, self.dice, self.align, self.proto, self.total, self.lr
        )?;
        if let Some(v) = self.val_aiou {
            write!(f, "\tval_aIoU={:.4}", v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Best validation checkpoint reached during this call, if any improved
    /// on the starting best.
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// The checkpoint to evaluate: best on validation, else the last.
    pub fn selected(&self) -> &Checkpoint {
        self.best.as_ref().unwrap_or(&self.last)
    }
}

/// Loads `config.data_dir` when it holds a manifest, otherwise generates
/// the synthetic splits.
pub fn load_or_generate(config: &RunConfig) -> Result<Dataset> {
    match &config.data_dir {
        Some(dir) if Path::new(dir).join(MANIFEST_FILE).exists() => load_dataset(Path::new(dir)),
        _ => make_splits(&config.data),
    }
}

/// Deterministic validation carve-out: `round(fraction · n)` training
/// samples chosen by the data seed.
pub fn split_validation(
    train: &[AffordanceSample],
    fraction: f64,
    seed: u64,
) -> (Vec<AffordanceSample>, Vec<AffordanceSample>) {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[VAL_STREAM])));
    let n_val = (fraction * train.len() as f64).round() as usize;
    let mut is_val = vec![false; train.len()];
    for &i in &order[..n_val.min(train.len())] {
        is_val[i] = true;
    }
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (s, val) in train.iter().zip(is_val) {
        if val {
            v.push(s.clone());
        } else {
            t.push(s.clone());
        }
    }
    (t, v)
}

/// Vocabulary over the structured and raw texts of the training samples.
pub fn build_vocabulary(train: &[AffordanceSample]) -> Result<Vocabulary> {
    let texts: Vec<&str> = train
        .iter()
        .flat_map(|s| [s.instruction.structured.as_str(), s.instruction.raw.as_str()])
        .collect();
    Vocabulary::build(&texts)
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with L2 weight decay folded into the gradient.
fn adam_update(p: &mut Tensor, grad: &Tensor, m: &mut Tensor, v: &mut Tensor, lr: f64, step: u64, cfg: &RunConfig) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let g = grad.data()[i] + cfg.weight_decay * pd[i];
        md[i] = b1 * md[i] + (1.0 - b1) * g;
        vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
        let mh = md[i] / c1;
        let vh = vd[i] / c2;
        pd[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
}

struct SampleGrad {
    params: Vec<Tensor>,
    proto: Option<Tensor>,
    /// mask, focal, dice, align, proto, total.
    parts: [f64; 6],
}

fn sample_grad(model: &ModelState, sample: &AffordanceSample, row: Option<usize>) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let pv = model.prototypes.as_ref().map(|p| g.leaf(p.prototypes.clone()));
    let loss = match model.sample_loss(&mut g, sample, pv.zip(row)) {
        Ok(l) => l,
        Err(e) if e.is_domain() => {
            return Ok(SampleGrad {
                params: Vec::new(),
                proto: None,
                parts: [f64::NAN; 6],
            })
        }
        Err(e) => return Err(e),
    };
    let val = |g: &Graph, v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.scalar_value(v));
    let parts = [
        g.scalar_value(loss.mask),
        g.scalar_value(loss.focal),
        g.scalar_value(loss.dice),
        val(&g, loss.align),
        val(&g, loss.proto),
        g.scalar_value(loss.total),
    ];
    if !parts[5].is_finite() {
        return Ok(SampleGrad {
            params: Vec::new(),
            proto: None,
            parts,
        });
    }
    let grads = g.backward(loss.total)?;
    Ok(SampleGrad {
        params: grads.for_params(&model.store),
        proto: pv.map(|v| grads.get_or_zeros(v)),
        parts,
    })
}

fn add_into(acc: &mut Tensor, x: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

fn append_zero_rows(t: &mut Option<Tensor>, rows: usize, dim: usize) -> Result<()> {
    if let Some(t) = t {
        let have = t.rows();
        if have < rows {
            let mut data = std::mem::replace(t, Tensor::zeros(&[0, dim])).into_data();
            data.resize(rows * dim, 0.0);
            *t = Tensor::matrix(rows, dim, data)?;
        }
    }
    Ok(())
}

/// Number of optimizer steps in one epoch.
pub fn steps_per_epoch(train_len: usize, batch: usize) -> u64 {
    train_len.div_ceil(batch.max(1)) as u64
}

/// A fresh checkpoint: vocabulary from `train`, parameters from the seed.
pub fn init_checkpoint(config: &RunConfig, train: &[AffordanceSample]) -> Result<Checkpoint> {
    let vocab = build_vocabulary(train)?;
    Ok(Checkpoint::initial(ModelState::new(config.clone(), vocab)?))
}

/// Runs epochs `start.epoch .. config.epochs`. `on_epoch` sees each record
/// as soon as the epoch ends.
pub fn train(
    start: Checkpoint,
    train: &[AffordanceSample],
    val: &[AffordanceSample],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let stop = start.model.config.epochs;
    train_until(start, train, val, stop, on_epoch)
}

/// Like [`train`] but stops after epoch `stop` (capped at
/// `config.epochs`). The schedule still spans the full config.
pub fn train_until(
    start: Checkpoint,
    train: &[AffordanceSample],
    val: &[AffordanceSample],
    stop: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut ck = start;
    let cfg = ck.model.config.clone();
    let stop = stop.min(cfg.epochs);
    if train.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs as u64;
    let mut best = None;
    let mut log = Vec::new();
    for epoch in ck.epoch..stop {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[EPOCH_STREAM, epoch as u64])));
        let mut sums = [0.0; 6];
        let mut lr = cosine_lr(cfg.lr, ck.optimizer.step, total_steps);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&AffordanceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut rows = vec![None; batch.len()];
            if let Some(protos) = ck.model.prototypes.as_mut() {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[PROTO_STREAM, epoch as u64, b as u64]));
                for (r, s) in rows.iter_mut().zip(&batch) {
                    *r = Some(protos.ensure(s.instruction.affordance_id, &mut rng, true)?);
                }
                let (k, c) = (protos.len(), protos.dim());
                append_zero_rows(&mut ck.optimizer.proto_m, k, c)?;
                append_zero_rows(&mut ck.optimizer.proto_v, k, c)?;
            }
            let model = &ck.model;
            let results: Vec<SampleGrad> = batch
                .par_iter()
                .zip(rows.par_iter())
                .map(|(s, &r)| sample_grad(model, s, r))
                .collect::<Result<_>>()?;
            let bad: Vec<String> = results
                .iter()
                .zip(&batch)
                .filter(|(r, _)| {
                    !r.parts[5].is_finite()
                        || r.params.iter().any(|t| !t.is_finite())
                        || r.proto.as_ref().is_some_and(|t| !t.is_finite())
                })
                .map(|(_, s)| s.id.clone())
                .collect();
            if !bad.is_empty() {
                return Err(Error::NonFiniteLoss { epoch, batch: bad });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = model.store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
            let mut proto_grad = model.prototypes.as_ref().map(|p| Tensor::zeros(p.prototypes.shape()));
            for r in &results {
                for (acc, g) in grads.iter_mut().zip(&r.params) {
                    add_into(acc, g);
                }
                if let (Some(acc), Some(g)) = (proto_grad.as_mut(), r.proto.as_ref()) {
                    add_into(acc, g);
                }
                for (s, p) in sums.iter_mut().zip(r.parts) {
                    *s += p;
                }
            }
            lr = cosine_lr(cfg.lr, ck.optimizer.step, total_steps);
            ck.optimizer.step += 1;
            let step = ck.optimizer.step;
            let opt = &mut ck.optimizer;
            for (i, p) in ck.model.store.tensors_mut().iter_mut().enumerate() {
                let g = &mut grads[i];
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                adam_update(p, g, &mut opt.m[i], &mut opt.v[i], lr, step, &cfg);
            }
            if let (Some(protos), Some(g), Some(m), Some(v)) = (
                ck.model.prototypes.as_mut(),
                proto_grad.as_mut(),
                opt.proto_m.as_mut(),
                opt.proto_v.as_mut(),
            ) {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
                adam_update(&mut protos.prototypes, g, m, v, lr, step, &cfg);
            }
        }
        ck.epoch = epoch + 1;
        let n = train.len() as f64;
        let val_aiou = if val.is_empty() {
            None
        } else {
            Some(evaluate(&ck.model, val, Split::Train.name())?.aiou)
        };
        if let Some(a) = val_aiou {
            if ck.best_val_aiou.map_or(true, |b| a > b) {
                ck.best_val_aiou = Some(a);
                best = Some(ck.clone());
            }
        }
        let rec = EpochRecord {
            epoch: ck.epoch,
            mask: sums[0] / n,
            focal: sums[1] / n,
            dice: sums[2] / n,
            align: sums[3] / n,
            proto: sums[4] / n,
            total: sums[5] / n,
            lr,
            val_aiou,
        };
        log::info!("{rec}");
        on_epoch(&rec);
        log.push(rec);
    }
    if let Some(b) = best.as_mut() {
        b.best_val_aiou = ck.best_val_aiou;
    }
    Ok(TrainOutcome { last: ck, best, log })
}

/// Mean training objective over `samples` without touching the model.
/// Prototypes for unseen affordances are drawn from a fixed stream.
pub fn mean_loss(model: &ModelState, samples: &[AffordanceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("mean_loss", "no samples"));
    }
    let mut protos = model.prototypes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(model.config.seed, &[PROTO_STREAM, u64::MAX]));
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let p = match protos.as_mut() {
            Some(p) => {
                let row = p.ensure(s.instruction.affordance_id, &mut rng, true)?;
                Some((g.constant(p.prototypes.clone()), row))
            }
            None => None,
        };
        let loss = model.sample_loss(&mut g, s, p)?;
        total += g.scalar_value(loss.total);
    }
    Ok(total / samples.len() as f64)
}

/// Rejects samples whose instruction is mostly unknown to the vocabulary or
/// whose size differs from the config.
pub fn check_compatible(model: &ModelState, samples: &[AffordanceSample]) -> Result<()> {
    for s in samples {
        if s.cloud.len() != model.config.points() || s.gt.len() != s.cloud.len() {
            return Err(Error::invalid(
                "evaluate",
                format!(
                    "sample {} has {} points, checkpoint expects {}",
                    s.id,
                    s.cloud.len(),
                    model.config.points()
                ),
            ));
        }
        let text = model.tokenize(&s.instruction)?;
        let kept: Vec<usize> = text.ids.iter().copied().filter(|&i| i != crate::text::PAD).collect();
        let unknown = kept.iter().filter(|&&i| i == UNK).count();
        if kept.is_empty() || unknown as f64 > MAX_UNKNOWN_FRACTION * kept.len() as f64 {
            return Err(Error::invalid(
                "evaluate",
                format!(
                    "sample {}: {unknown} of {} tokens unknown, vocabulary does not match this split",
                    s.id,
                    kept.len()
                ),
            ));
        }
    }
    Ok(())
}

/// Predicted masks for every sample, in input order.
pub fn predict_all(model: &ModelState, samples: &[AffordanceSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.cloud, &s.instruction))
        .collect()
}

/// Inference-only metrics over `samples`.
pub fn evaluate(model: &ModelState, samples: &[AffordanceSample], split: &str) -> Result<SplitSummary> {
    check_compatible(model, samples)?;
    let preds = predict_all(model, samples)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = preds.into_iter().zip(samples.iter().map(|s| s.gt.clone())).collect();
    evaluate_pairs(split, &pairs)
}

/// Untrained-model aIoU spread over `models` initializations.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineBand {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl BaselineBand {
    /// `mean + 3σ`.
    pub fn upper(&self) -> f64 {
        self.mean + 3.0 * self.std
    }
}

pub fn baseline_band(
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[AffordanceSample],
    models: usize,
) -> Result<BaselineBand> {
    if models < 2 {
        return Err(Error::invalid("baseline_band", "need at least two models"));
    }
    let values = (0..models)
        .map(|i| {
            let mut cfg = config.clone();
            cfg.seed = stream_seed(config.seed, &[BASELINE_STREAM, i as u64]);
            let model = ModelState::new(cfg, vocab.clone())?;
            Ok(evaluate(&model, samples, "baseline")?.aiou)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(BaselineBand {
        values,
        mean,
        std: var.sqrt(),
    })
}

/// One row per rate: metrics on the instruction-corrupted samples.
pub fn corruption_experiment(
    model: &ModelState,
    samples: &[AffordanceSample],
    rates: &[f64],
    mode: CorruptionMode,
    seed: u64,
) -> Result<Vec<(f64, SplitSummary)>> {
    rates
        .iter()
        .map(|&rate| {
            let (corrupted, _) = corrupt_instructions(samples, rate, mode, seed)?;
            let name = format!("{}@{rate}", mode.name());
            Ok((rate, evaluate(model, &corrupted, &name)?))
        })
        .collect()
}

/// Result of one training run evaluated on the test splits.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub outcome: TrainOutcome,
    pub table: Vec<SplitSummary>,
}

/// Trains on the train split (minus validation) and evaluates the selected
/// checkpoint on `splits`.
pub fn train_and_evaluate(config: &RunConfig, data: &Dataset, splits: &[Split]) -> Result<RunReport> {
    let all_train = data.split_owned(Split::Train);
    let (train_set, val) = split_validation(&all_train, config.val_fraction, config.data.seed);
    let start = init_checkpoint(config, &train_set)?;
    let outcome = train(start, &train_set, &val, |_| {})?;
    let model = &outcome.selected().model;
    let table = splits
        .iter()
        .map(|&s| evaluate(model, &data.split_owned(s), s.name()))
        .collect::<Result<_>>()?;
    Ok(RunReport { outcome, table })
}

/// [`train_and_evaluate`] with `component` switched off.
pub fn ablate(config: &RunConfig, component: Component, data: &Dataset, splits: &[Split]) -> Result<RunReport> {
    let mut cfg = config.clone();
    cfg.disable(component);
    train_and_evaluate(&cfg, data, splits)
}
