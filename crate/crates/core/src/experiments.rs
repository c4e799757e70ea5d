//! Multi-run drivers: (p, q) grid search and the drop-mode probes that
//! compare dropping high- versus low-attribution positions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionConfig, LabelMode, Method, Scores};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{build_masks, DiscardPolicy, DropMode};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::trainer::{cross_tune, evaluate_with, fine_tune, EpochReport, TrainConfig};

/// 0.1, 0.2, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// One grid run; `p` and `q` are `None` for the plain fine-tuning baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridJob {
    pub p: Option<f64>,
    pub q: Option<f64>,
}

impl GridJob {
    pub const BASELINE: GridJob = GridJob { p: None, q: None };

    pub fn is_baseline(&self) -> bool {
        self.p.is_none()
    }

    /// Stable identifier, e.g. `p0.3_q0.5` or `baseline`.
    pub fn key(&self) -> String {
        match (self.p, self.q) {
            (Some(p), Some(q)) => format!("p{p}_q{q}"),
            _ => "baseline".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub job: GridJob,
    pub seed: u64,
    /// Dev metric of the best-dev checkpoint.
    pub metric: f64,
    pub best_epoch: usize,
}

/// Baseline first, then `p` major, `q` minor.
pub fn grid_jobs(p_grid: &[f64], q_grid: &[f64]) -> Vec<GridJob> {
    let mut jobs = vec![GridJob::BASELINE];
    for &p in p_grid {
        for &q in q_grid {
            jobs.push(GridJob {
                p: Some(p),
                q: Some(q),
            });
        }
    }
    jobs
}

/// Trains one grid cell from a fresh model seeded with `base.seed`.
pub fn run_grid_cell(
    model_cfg: &ModelConfig,
    train: &Dataset,
    dev: &Dataset,
    base: &TrainConfig,
    job: GridJob,
) -> Result<GridCell> {
    let model = Model::new(model_cfg.clone(), base.seed)?;
    let outcome = match (job.p, job.q) {
        (Some(p), Some(q)) => {
            let cfg = TrainConfig {
                policy: DiscardPolicy {
                    p,
                    q,
                    ..base.policy.clone()
                },
                ..base.clone()
            };
            cross_tune(model, train, dev, &cfg)?
        }
        _ => fine_tune(model, train, dev, base)?,
    };
    Ok(GridCell {
        job,
        seed: base.seed,
        metric: outcome.best_metric,
        best_epoch: outcome.best_epoch,
    })
}

/// Runs the baseline and every `(p, q)` cell on a pool of `workers` threads.
/// Rows come back in [`grid_jobs`] order whatever the worker count.
pub fn grid_search(
    model_cfg: &ModelConfig,
    train: &Dataset,
    dev: &Dataset,
    base: &TrainConfig,
    p_grid: &[f64],
    q_grid: &[f64],
    workers: usize,
) -> Result<Vec<GridCell>> {
    if p_grid.is_empty() || q_grid.is_empty() {
        return Err(Error::config("grid search needs non-empty p and q grids"));
    }
    let jobs = grid_jobs(p_grid, q_grid);
    run_pool(workers, || {
        jobs.par_iter()
            .map(|&job| run_grid_cell(model_cfg, train, dev, base, job))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Runs `f` on a dedicated pool of `workers` threads (at least one).
pub fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Population standard deviation and mean.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Training config for a drop-mode probe: gold-label gradient attribution,
/// every epoch masked, and the whole `rate` tail dropped (`q = 1`).
pub fn probe_config(base: &TrainConfig, mode: DropMode, rate: f64, layers: &[usize]) -> TrainConfig {
    TrainConfig {
        policy: DiscardPolicy {
            p: rate,
            q: 1.0,
            mode,
            layers: layers.to_vec(),
        },
        attribution: AttributionConfig {
            method: Method::Ga,
            label_mode: LabelMode::Gold,
            ..base.attribution.clone()
        },
        cross_tuning: false,
        early_stop_patience: 0,
        ..base.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeCurve {
    pub mode: DropMode,
    pub reports: Vec<EpochReport>,
}

/// Trains one model per drop mode from the same initialization and records
/// per-epoch train and dev losses.
pub fn prior_training_curves(
    model_cfg: &ModelConfig,
    train: &Dataset,
    dev: &Dataset,
    base: &TrainConfig,
    modes: &[DropMode],
    rate: f64,
    layers: &[usize],
) -> Result<Vec<ModeCurve>> {
    modes
        .iter()
        .map(|&mode| {
            let cfg = probe_config(base, mode, rate, layers);
            let model = Model::new(model_cfg.clone(), base.seed)?;
            let outcome = cross_tune(model, train, dev, &cfg)?;
            Ok(ModeCurve {
                mode,
                reports: outcome.reports,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: DropMode,
    pub layer: usize,
    pub rate: f64,
    pub dev_loss: f64,
    pub dev_metric: f64,
}

/// Evaluates a trained model on `dev` while dropping the `rate` tail of
/// gold-label gradient attribution in one layer at a time.
pub fn prior_rate_sweep(
    model: &Model,
    dev: &Dataset,
    modes: &[DropMode],
    rates: &[f64],
    layers: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let kind = crate::metrics::MetricKind::default_for(dev.task);
    let heads = model.config().num_heads;
    let mut rows = Vec::new();
    for &mode in modes {
        for &layer in layers {
            if layer >= model.config().num_layers {
                return Err(Error::config(format!("sweep layer {layer} outside model")));
            }
            for &rate in rates {
                let policy = DiscardPolicy {
                    p: rate,
                    q: 1.0,
                    mode,
                    layers: vec![layer],
                };
                let eval = evaluate_with(model, dev, kind, |batch, index| {
                    let scores = match mode {
                        DropMode::High | DropMode::Low => {
                            let mut out = model.forward_with(batch, &ForwardOptions::frozen(), None)?;
                            let obj = attribution::objective(&out, batch, LabelMode::Gold)?;
                            attribution::grad_attribution(&mut out, &obj, &[layer])?
                        }
                        DropMode::Random | DropMode::None => Scores::new(),
                    };
                    build_masks(&scores, &policy, &batch.pad_mask, heads, seed, index as u64).map(Some)
                })?;
                rows.push(SweepRow {
                    mode,
                    layer,
                    rate,
                    dev_loss: eval.loss,
                    dev_metric: eval.metric,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classification, SyntheticSpec, TaskKind};

    fn setup() -> (ModelConfig, crate::data::Splits) {
        let spec = SyntheticSpec {
            num_train: 32,
            num_dev: 32,
            num_test: 8,
            max_len: 10,
            ..SyntheticSpec::overfit_prone(TaskKind::Classify, 3)
        };
        let splits = gen_classification(&spec).unwrap();
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_size: 8,
            head_size: 4,
            ffn_size: 8,
            vocab_size: splits.vocab_size,
            max_len: 16,
            num_classes: 2,
            task: TaskKind::Classify,
            hidden_dropout: 0.1,
        };
        (cfg, splits)
    }

    #[test]
    fn default_grid_has_81_cells_plus_baseline() {
        let g = default_grid();
        assert_eq!(g.len(), 9);
        assert!((g[0] - 0.1).abs() < 1e-12 && (g[8] - 0.9).abs() < 1e-12);
        let jobs = grid_jobs(&g, &g);
        assert_eq!(jobs.len(), 82);
        assert!(jobs[0].is_baseline());
        assert_eq!(jobs[1].key(), "p0.1_q0.1");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (cfg, s) = setup();
        let base = TrainConfig {
            max_epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let grid = [0.3, 0.6];
        let one = grid_search(&cfg, &s.train, &s.dev, &base, &grid, &grid, 1).unwrap();
        let two = grid_search(&cfg, &s.train, &s.dev, &base, &grid, &grid, 2).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.len(), 5);
        assert!(grid_search(&cfg, &s.train, &s.dev, &base, &[], &grid, 1).is_err());
    }

    #[test]
    fn none_curve_equals_plain_fine_tuning() {
        let (cfg, s) = setup();
        let base = TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let curves = prior_training_curves(&cfg, &s.train, &s.dev, &base, &[DropMode::None], 0.3, &[0]).unwrap();
        let plain = fine_tune(Model::new(cfg, base.seed).unwrap(), &s.train, &s.dev, &base).unwrap();
        for (a, b) in curves[0].reports.iter().zip(&plain.reports) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.dev_loss.to_bits(), b.dev_loss.to_bits());
        }
    }

    #[test]
    fn sweep_shape_and_none_invariance() {
        let (cfg, s) = setup();
        let model = Model::new(cfg, 1).unwrap();
        let rates = default_grid();
        let rows = prior_rate_sweep(&model, &s.dev, &[DropMode::None, DropMode::High], &rates, &[0], 0).unwrap();
        assert_eq!(rows.len(), 18);
        let none: Vec<f64> = rows.iter().filter(|r| r.mode == DropMode::None).map(|r| r.dev_metric).collect();
        assert!(none.iter().all(|&m| m == none[0]));
    }

    #[test]
    fn mean_std_of_constants() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
