//! Stage-wise training and top-k evaluation.

use std::fmt::Write;

use crate::channel::{ChannelConfig, ChannelRealization};
use crate::data::{batch_iter, BatchOptions, Dataset, NormStats, Split};
use crate::error::{Error, Result};
use crate::layers::{sgd_step, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

use super::loss::{cross_entropy, topk_hits};
use super::pipeline::{transmit_backward, transmit_forward, Pipeline};
use super::schedule::{Scope, Stage, TrainingSchedule};

pub const METRICS_HEADER: &str = "epoch,stage,lr,loss,top1,top5";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:e},{:.6},{:.6},{:.6}",
            self.epoch, self.stage, self.lr, self.loss, self.top1, self.top5
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(s, "{}", r.csv_line()).unwrap();
    }
    s
}

/// How a dataset is pushed through the model.
#[derive(Clone, Copy, Debug)]
pub enum EvalPath<'a> {
    /// The unsplit classifier.
    Backbone,
    /// The split classifier over a channel; `None` is the ideal channel.
    Link(Option<&'a ChannelConfig>),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    pub augment: bool,
    pub stats: NormStats,
    pub channel: ChannelConfig,
    /// Evaluate on at most this many test samples per epoch.
    pub eval_limit: Option<usize>,
    pub eval_batch: usize,
}

fn stage_key(stage: Stage) -> u64 {
    stage as u64 + 1
}

/// Top-`k` accuracy for every `k` in `ks`.
pub fn evaluate_topk(
    pipe: &Pipeline,
    params: &ParamStore<f32>,
    data: &Dataset,
    ks: &[usize],
    path: EvalPath<'_>,
    stats: &NormStats,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let classes = pipe.model.num_classes;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::OutOfRange {
            what: "k",
            detail: format!("{k} not in [1, {classes}]"),
        });
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let opts = BatchOptions {
        batch_size,
        seed: 0,
        epoch: 0,
        split: Split::Eval,
        shuffle: false,
        augment: false,
        stats: *stats,
    };
    let mut hits = vec![0usize; ks.len()];
    for b in batch_iter(data, opts)? {
        let logits = match path {
            EvalPath::Backbone => pipe.full.forward_eval(params, &b.x)?,
            EvalPath::Link(ch) => {
                let reals = ch.map(|c| pipe.draw_channel(c, rng::EVAL_CHANNEL, &[], &b.indices));
                pipe.infer(params, &b.x, reals.as_deref())?
            }
        };
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += topk_hits(&logits, &b.labels, k)?;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / data.len() as f64).collect())
}

/// Accumulates parameter gradients for one batch and returns its loss.
///
/// Parts whose scope is frozen in `sched` run in eval mode, so their
/// normalization statistics stay fixed.
pub fn train_step(
    pipe: &Pipeline,
    params: &mut ParamStore<f32>,
    sched: &TrainingSchedule,
    x: &Tensor<f32>,
    labels: &[usize],
    reals: Option<&[ChannelRealization]>,
) -> Result<f64> {
    if sched.stage == Stage::Backbone {
        let (y, tape) = pipe.full.forward_train(params, x)?;
        let (loss, dy) = cross_entropy(&y, labels)?;
        pipe.full.backward(params, &tape, &dy)?;
        return Ok(loss);
    }
    let frozen = |s: Scope| sched.frozen_scopes.contains(&s);
    let backbone_frozen = frozen(Scope::Backbone);

    let (mid, front_tape) = if backbone_frozen {
        (pipe.front.forward_eval(params, x)?, None)
    } else {
        let (m, t) = pipe.front.forward_train(params, x)?;
        (m, Some(t))
    };
    let (v, enc_tape) = if frozen(Scope::Encoder) {
        pipe.encoder.forward_frozen(params, &mid)?
    } else {
        pipe.encoder.forward_train(params, &mid)?
    };
    let (z, link_tape) = transmit_forward(&v, pipe.codec.power, reals)?;
    let (feat, dec_tape) = if frozen(Scope::Decoder) {
        pipe.decoder.forward_frozen(params, &z)?
    } else {
        pipe.decoder.forward_train(params, &z)?
    };
    let (y, rest_tape) = if backbone_frozen {
        pipe.rest.forward_frozen(params, &feat)?
    } else {
        pipe.rest.forward_train(params, &feat)?
    };
    let (loss, dy) = cross_entropy(&y, labels)?;

    let dfeat = pipe.rest.backward(params, &rest_tape, &dy)?;
    let dz = pipe.decoder.backward(params, &dec_tape, &dfeat)?;
    let dv = transmit_backward(&link_tape, &dz, pipe.codec.power)?;
    let dmid = pipe.encoder.backward(params, &enc_tape, &dv)?;
    if let Some(t) = front_tape {
        pipe.front.backward(params, &t, &dmid)?;
    }
    Ok(loss)
}

/// Marks parameters of frozen scopes non-trainable; returns the previous
/// flags.
fn freeze(params: &mut ParamStore<f32>, sched: &TrainingSchedule) -> Vec<bool> {
    params
        .iter_mut()
        .map(|(name, p)| {
            let was = p.trainable;
            if sched.is_frozen(name) {
                p.trainable = false;
            }
            p.velocity = None;
            was
        })
        .collect()
}

fn restore(params: &mut ParamStore<f32>, flags: &[bool]) {
    for ((_, p), &f) in params.iter_mut().zip(flags) {
        p.trainable = f;
        p.velocity = None;
    }
}

/// Runs every epoch of one stage, calling `on_epoch` after each.
pub fn run_stage(
    pipe: &Pipeline,
    params: &mut ParamStore<f32>,
    sched: &TrainingSchedule,
    opts: &RunOptions,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    sched.validate()?;
    pipe.check_params(params)?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let flags = freeze(params, sched);
    let result = epochs(pipe, params, sched, opts, train, test, &mut on_epoch);
    restore(params, &flags);
    result
}

fn epochs(
    pipe: &Pipeline,
    params: &mut ParamStore<f32>,
    sched: &TrainingSchedule,
    opts: &RunOptions,
    train: &Dataset,
    test: &Dataset,
    on_epoch: &mut impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let stage = sched.stage;
    let eval_set = match opts.eval_limit {
        Some(n) if n < test.len() => test.truncated(n),
        _ => test.clone(),
    };
    let mut rows = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at_epoch(epoch);
        let bopts = BatchOptions {
            batch_size: sched.batch_size,
            seed: opts.seed,
            epoch: stage_key(stage) << 32 | epoch as u64,
            split: Split::Train,
            shuffle: true,
            augment: opts.augment,
            stats: opts.stats,
        };
        let mut total = 0.0;
        for b in batch_iter(train, bopts)? {
            let reals = stage.uses_channel().then(|| {
                pipe.draw_channel(
                    &opts.channel,
                    rng::CHANNEL,
                    &[stage_key(stage), epoch as u64, b.index as u64],
                    &b.indices,
                )
            });
            let loss = train_step(pipe, params, sched, &b.x, &b.labels, reals.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("stage {stage}, epoch {epoch}, batch {}", b.index)));
            }
            sgd_step(params, lr, sched.weight_decay, sched.momentum)?;
            total += loss * b.labels.len() as f64;
        }
        let path = if stage.uses_channel() {
            EvalPath::Link(Some(&opts.channel))
        } else {
            EvalPath::Backbone
        };
        let acc = evaluate_topk(pipe, params, &eval_set, &[1, 5.min(pipe.model.num_classes)], path, &opts.stats, opts.eval_batch)?;
        let row = MetricsRow {
            epoch,
            stage,
            lr,
            loss: total / train.len() as f64,
            top1: acc[0],
            top5: acc[1],
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}
