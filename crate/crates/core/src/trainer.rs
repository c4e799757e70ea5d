//! Fine-tuning, attribution-driven dropout steps, cross-tuning and evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionConfig, Scores};
use crate::autodiff::IGNORE_INDEX;
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::masking::{build_masks, DiscardPolicy, DropMode, MaskSet};
use crate::metrics::{self, MetricKind};
use crate::model::{loss, Batch, ForwardOptions, Labels, Model};
use crate::optim::Adam;
use crate::rng;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ft,
    Addrop,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ft => "ft",
            Phase::Addrop => "addrop",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(Phase::Ft),
            "addrop" => Ok(Phase::Addrop),
            other => Err(Error::config(format!("unknown phase '{other}'"))),
        }
    }
}

/// Phase of a 1-based epoch: alternating plain and masked epochs when
/// cross-tuning, masked epochs only otherwise.
pub fn phase_for(epoch: usize, cross_tuning: bool) -> Phase {
    if cross_tuning && epoch % 2 == 1 {
        Phase::Ft
    } else {
        Phase::Addrop
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub policy: DiscardPolicy,
    pub attribution: AttributionConfig,
    pub cross_tuning: bool,
    /// Hidden dropout in the masked forward pass.
    pub second_pass_stochastic: bool,
    /// Hidden dropout in the attribution pass.
    pub first_pass_stochastic: bool,
    pub seed: u64,
    /// Defaults to the task's usual metric.
    pub metric: Option<MetricKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 0,
            policy: DiscardPolicy::default(),
            attribution: AttributionConfig::default(),
            cross_tuning: true,
            second_pass_stochastic: true,
            first_pass_stochastic: false,
            seed: 0,
            metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.attribution.steps == 0 {
            return Err(Error::config("attribution steps must be at least 1"));
        }
        self.policy.validate()
    }

    pub fn metric_for(&self, task: TaskKind) -> Result<MetricKind> {
        let kind = self.metric.unwrap_or(MetricKind::default_for(task));
        if kind.fits(task) {
            Ok(kind)
        } else {
            Err(Error::config(format!("metric {kind} does not apply to {task}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean of the per-step losses that drove the updates.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_metric: f64,
    pub metric_name: MetricKind,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
    pub kind: MetricKind,
    /// The metric was undefined (constant predictions or targets) and is
    /// reported as 0.
    pub undefined: bool,
}

/// Deterministic, mask-free evaluation.
pub fn evaluate(model: &Model, data: &Dataset, kind: MetricKind) -> Result<Evaluation> {
    evaluate_with(model, data, kind, |_, _| Ok(None))
}

/// Evaluation where `masks_for(batch, index)` may supply masks per batch.
pub fn evaluate_with(
    model: &Model,
    data: &Dataset,
    kind: MetricKind,
    mut masks_for: impl FnMut(&Batch, usize) -> Result<Option<MaskSet>>,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset"));
    }
    if !kind.fits(data.task) {
        return Err(Error::config(format!("metric {kind} does not apply to {}", data.task)));
    }
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let (mut pred_cls, mut gold_cls) = (Vec::new(), Vec::new());
    let (mut pred_val, mut gold_val) = (Vec::new(), Vec::new());
    for (bi, chunk) in data.batches(EVAL_BATCH, None).iter().enumerate() {
        let batch = Batch::from_examples(chunk)?;
        let masks = masks_for(&batch, bi)?;
        let opts = ForwardOptions {
            masks: masks.as_ref(),
            ..ForwardOptions::frozen()
        };
        let mut out = model.forward_with(&batch, &opts, None)?;
        let l = loss(&mut out, &batch)?;
        let l = out.graph.value(l).item().unwrap_or(f64::NAN);
        match &batch.labels {
            Labels::Classes(gold) => {
                loss_sum += l * gold.len() as f64;
                loss_count += gold.len();
                pred_cls.extend(out.logits().rows().map(attribution::argmax));
                gold_cls.extend(gold);
            }
            Labels::Values(gold) => {
                loss_sum += l * gold.len() as f64;
                loss_count += gold.len();
                pred_val.extend_from_slice(out.logits().data());
                gold_val.extend(gold);
            }
            Labels::Tags(gold) => {
                let counted = gold.iter().flatten().filter(|&&t| t != IGNORE_INDEX).count();
                loss_sum += l * counted as f64;
                loss_count += counted;
                for (row, &t) in out.logits().rows().zip(gold.iter().flatten()) {
                    if t != IGNORE_INDEX {
                        pred_cls.push(attribution::argmax(row));
                        gold_cls.push(t);
                    }
                }
            }
        }
    }
    let (metric, undefined) = match kind {
        MetricKind::Acc => (metrics::accuracy(&pred_cls, &gold_cls), false),
        MetricKind::Mcc => (metrics::mcc(&pred_cls, &gold_cls), false),
        MetricKind::Pcc => metrics::pearson(&pred_val, &gold_val),
    };
    if undefined {
        warn!("{kind} undefined on constant predictions or targets; reporting 0");
    }
    Ok(Evaluation {
        loss: loss_sum / loss_count.max(1) as f64,
        metric,
        kind,
        undefined,
    })
}

/// Owns a model and its optimizer state for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    opt: Adam,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg_layers = model.config().num_layers;
        if let Some(&bad) = cfg.policy.layers.iter().find(|&&l| l >= cfg_layers) {
            return Err(Error::config(format!("policy layer {bad} outside model of {cfg_layers} layers")));
        }
        Ok(Self {
            opt: Adam::new(cfg.learning_rate),
            model,
            cfg,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    fn dropout_rng(&self, pass: u64) -> ChaCha8Rng {
        rng::stream(self.cfg.seed, &[rng::DROPOUT, self.step, pass])
    }

    /// Forward with masks, loss against gold labels, one optimizer update.
    fn update(&mut self, batch: &Batch, masks: Option<&MaskSet>, stochastic: bool) -> Result<f64> {
        let mut drop_rng = self.dropout_rng(0);
        let mut out = self.model.forward(batch, masks, stochastic.then_some(&mut drop_rng))?;
        let l = loss(&mut out, batch)?;
        let value = out.graph.value(l).item().unwrap_or(f64::NAN);
        let grads = out.graph.backward(l)?;
        let refs: Vec<&_> = out
            .param_vars()
            .iter()
            .map(|&v| grads.get(v).expect("parameter gradient"))
            .collect();
        self.opt.step(self.model.params_mut(), &refs)?;
        self.step += 1;
        Ok(value)
    }

    /// Plain fine-tuning step with hidden dropout.
    pub fn finetune_step(&mut self, batch: &Batch) -> Result<f64> {
        self.update(batch, None, true)
    }

    /// First pass: attribution scores for the policy layers. Leaves the
    /// model untouched.
    pub fn attribution_pass(&self, batch: &Batch) -> Result<Scores> {
        let mut drop_rng = self.dropout_rng(1);
        let stochastic = self.cfg.first_pass_stochastic.then_some(&mut drop_rng);
        let mut out = self.model.forward_with(batch, &ForwardOptions::frozen(), stochastic)?;
        let mut rd = rng::stream(self.cfg.seed, &[rng::RANDOM_ATTRIBUTION, self.step]);
        attribution::attribute(
            &self.model,
            batch,
            &mut out,
            &self.cfg.attribution,
            &self.cfg.policy.layers,
            &mut rd,
        )
    }

    /// Masks for the next update of `batch`.
    pub fn step_masks(&self, batch: &Batch) -> Result<MaskSet> {
        let scores = match self.cfg.policy.mode {
            DropMode::None | DropMode::Random => Scores::new(),
            DropMode::High | DropMode::Low => self.attribution_pass(batch)?,
        };
        build_masks(
            &scores,
            &self.cfg.policy,
            &batch.pad_mask,
            self.model.config().num_heads,
            self.cfg.seed,
            self.step,
        )
    }

    /// Attribution pass, mask construction, masked forward and one update.
    pub fn addrop_step(&mut self, batch: &Batch) -> Result<f64> {
        let masks = self.step_masks(batch)?;
        debug!("step {}: {} positions masked", self.step, masks.dropped());
        self.update(batch, Some(&masks), self.cfg.second_pass_stochastic)
    }

    /// One pass over `train` in a seeded order; returns the mean step loss.
    pub fn run_epoch(&mut self, train: &Dataset, epoch: usize, phase: Phase) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::data("empty training set"));
        }
        let order_seed = rng::derive_seed(self.cfg.seed, &[rng::SHUFFLE, epoch as u64]);
        let batches = train.batches(self.cfg.batch_size, Some(order_seed));
        let mut total = 0.0;
        for chunk in &batches {
            let batch = Batch::from_examples(chunk)?;
            total += match phase {
                Phase::Ft => self.finetune_step(&batch)?,
                Phase::Addrop => self.addrop_step(&batch)?,
            };
        }
        Ok(total / batches.len() as f64)
    }
}

/// Result of a training run: the best-dev checkpoint and every epoch report.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Masked training: alternating plain and masked epochs when
/// `cfg.cross_tuning`, masked epochs only otherwise.
pub fn cross_tune(model: Model, train: &Dataset, dev: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cross = cfg.cross_tuning;
    train_with(model, train, dev, cfg, |e| phase_for(e, cross))
}

/// Plain fine-tuning for every epoch.
pub fn fine_tune(model: Model, train: &Dataset, dev: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train, dev, cfg, |_| Phase::Ft)
}

pub fn train_with(
    model: Model,
    train: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    phase_of: impl Fn(usize) -> Phase,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    if train.task != model.config().task {
        return Err(Error::config(format!("{} data for a {} model", train.task, model.config().task)));
    }
    let kind = cfg.metric_for(train.task)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let phase = phase_of(epoch);
        let train_loss = trainer.run_epoch(train, epoch, phase)?;
        let eval = evaluate(trainer.model(), dev, kind)?;
        let report = EpochReport {
            epoch,
            phase,
            train_loss,
            dev_loss: eval.loss,
            dev_metric: eval.metric,
            metric_name: kind,
            wall_time: start.elapsed().as_secs_f64(),
        };
        debug!(
            "epoch {epoch} {phase}: train {:.4} dev {:.4} {kind} {:.4}",
            report.train_loss, report.dev_loss, report.dev_metric
        );
        reports.push(report);
        match &best {
            Some((_, m, _)) if eval.metric <= *m => stale += 1,
            _ => {
                best = Some((epoch, eval.metric, trainer.model().clone()));
                stale = 0;
            }
        }
        if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_epoch, best_metric, model) = match best {
        Some(b) => b,
        None => (0, f64::NAN, trainer.into_model()),
    };
    Ok(TrainOutcome {
        model,
        reports,
        best_epoch,
        best_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{LabelMode, Method};
    use crate::data::{Example, Label, CLS_ID};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_size: 8,
                head_size: 4,
                ffn_size: 16,
                vocab_size: 12,
                max_len: 8,
                num_classes: 2,
                task: TaskKind::Classify,
                hidden_dropout: 0.1,
            },
            seed,
        )
        .unwrap()
    }

    fn separable() -> Dataset {
        let examples = (0..16)
            .map(|i| {
                let class = i % 2;
                let marker = 4 + class;
                Example {
                    tokens: vec![CLS_ID, marker, 6 + i % 4, marker, 10],
                    label: Label::Class(class),
                }
            })
            .collect();
        Dataset::new(TaskKind::Classify, examples).unwrap()
    }

    #[test]
    fn phase_schedule() {
        let phases: Vec<Phase> = (1..=4).map(|e| phase_for(e, true)).collect();
        assert_eq!(phases, vec![Phase::Ft, Phase::Addrop, Phase::Ft, Phase::Addrop]);
        assert!((1..=4).all(|e| phase_for(e, false) == Phase::Addrop));
    }

    #[test]
    fn none_mode_step_matches_plain_step() {
        let batch = Batch::from_examples(&separable().examples.iter().collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig {
            policy: DiscardPolicy {
                mode: DropMode::None,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut a = Trainer::new(tiny_model(1), cfg.clone()).unwrap();
        let mut b = Trainer::new(tiny_model(1), cfg).unwrap();
        for _ in 0..3 {
            let la = a.addrop_step(&batch).unwrap();
            let lb = b.finetune_step(&batch).unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(a.model().checksum(), b.model().checksum());
    }

    #[test]
    fn attribution_pass_is_pure() {
        let batch = Batch::from_examples(&separable().examples.iter().collect::<Vec<_>>()).unwrap();
        for method in [Method::Ga, Method::Iga, Method::Aa, Method::Rd] {
            let cfg = TrainConfig {
                attribution: AttributionConfig {
                    method,
                    steps: 3,
                    ..Default::default()
                },
                ..Default::default()
            };
            let t = Trainer::new(tiny_model(2), cfg).unwrap();
            let before = t.model().checksum();
            t.attribution_pass(&batch).unwrap();
            assert_eq!(t.model().checksum(), before, "{method}");
        }
    }

    #[test]
    fn addrop_step_reduces_loss_on_separable_batch() {
        let data = separable();
        let batch = Batch::from_examples(&data.examples.iter().collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            second_pass_stochastic: false,
            ..Default::default()
        };
        let mut t = Trainer::new(tiny_model(3), cfg).unwrap();
        let before = evaluate(t.model(), &data, MetricKind::Acc).unwrap().loss;
        t.addrop_step(&batch).unwrap();
        let after = evaluate(t.model(), &data, MetricKind::Acc).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
        assert_eq!(t.steps(), 1);
    }

    #[test]
    fn reports_are_reproducible_and_follow_the_schedule() {
        let data = separable();
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 4,
            attribution: AttributionConfig {
                label_mode: LabelMode::Gold,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = cross_tune(tiny_model(4), &data, &data, &cfg).unwrap();
        let b = cross_tune(tiny_model(4), &data, &data, &cfg).unwrap();
        let strip = |r: &[EpochReport]| -> Vec<(usize, Phase, u64, u64)> {
            r.iter()
                .map(|e| (e.epoch, e.phase, e.train_loss.to_bits(), e.dev_metric.to_bits()))
                .collect()
        };
        assert_eq!(strip(&a.reports), strip(&b.reports));
        let phases: Vec<Phase> = a.reports.iter().map(|r| r.phase).collect();
        assert_eq!(phases, vec![Phase::Ft, Phase::Addrop, Phase::Ft, Phase::Addrop]);
    }

    #[test]
    fn best_checkpoint_is_returned() {
        let data = separable();
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 4,
            learning_rate: 3e-2,
            ..Default::default()
        };
        let out = fine_tune(tiny_model(5), &data, &data, &cfg).unwrap();
        let best = out.reports.iter().map(|r| r.dev_metric).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_metric, best);
        let again = evaluate(&out.model, &data, MetricKind::Acc).unwrap();
        assert_eq!(again.metric, best);
    }

    #[test]
    fn empty_training_set_is_a_data_error() {
        let empty = Dataset::new(TaskKind::Classify, vec![]).unwrap();
        let r = cross_tune(tiny_model(1), &empty, &separable(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn patience_stops_early() {
        let data = separable();
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 16,
            learning_rate: 1e-6,
            early_stop_patience: 2,
            ..Default::default()
        };
        let out = fine_tune(tiny_model(6), &data, &data, &cfg).unwrap();
        assert!(out.reports.len() < 50);
    }
}
