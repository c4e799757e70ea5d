//! Subcommand implementations. Each returns a JSON summary that also lands
//! in the run manifest.

use std::path::{Path, PathBuf};

use addrop::data::{gen_classification, gen_regression, gen_tagging, load_tsv_splits, Splits, TaskKind};
use addrop::experiments::{grid_jobs, mean_std, prior_rate_sweep, prior_training_curves, run_grid_cell, run_pool, GridCell, GridJob};
use addrop::model::{Model, ModelConfig};
use addrop::trainer::{cross_tune, evaluate, fine_tune, EpochReport, TrainOutcome};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataSource, Procedure, RunConfig, Settings, Split};
use crate::error::CliError;
use crate::output::{atomic_write, csv_text, jsonl_text, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Grid,
    Prior,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Grid => "grid",
            Command::Prior => "prior",
            Command::Eval => "eval",
        }
    }
}

pub struct Invocation {
    pub command: Command,
    pub settings: Settings,
    pub out: PathBuf,
    pub workers: usize,
}

pub const GRID_SCHEMA: &str = "cell,p,q,seed,metric,best_epoch (p and q empty on the baseline row)";
pub const CURVE_SCHEMA: &str = "epoch,phase,train_loss,dev_loss,dev_metric";
pub const SWEEP_SCHEMA: &str = "mode,layer,rate,dev_loss,dev_metric";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: String,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub seed: u64,
    pub metric: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_metric: f64,
}

pub fn run(inv: &Invocation) -> Result<serde_json::Value, CliError> {
    let cfg = inv.settings.resolve()?;
    let mut manifest = RunManifest::new(inv.command.name(), cfg.train.seed, inv.settings.values().clone());
    let config_path = inv.out.join("config.cfg");
    atomic_write(&config_path, inv.settings.to_text().as_bytes())?;
    manifest.artifact("config", &config_path);
    let summary = match inv.command {
        Command::Train => train(&cfg, &inv.out, &mut manifest)?,
        Command::Grid => grid(&cfg, &inv.settings, &inv.out, inv.workers, &mut manifest)?,
        Command::Prior => prior(&cfg, &inv.out, &mut manifest)?,
        Command::Eval => eval(&cfg, &inv.out, &mut manifest)?,
    };
    manifest.finish(&inv.out.join("manifest.json"), summary.clone())?;
    Ok(summary)
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    Ok(match &cfg.data {
        DataSource::Synthetic(spec) => match spec.task {
            TaskKind::Classify => gen_classification(spec)?,
            TaskKind::Tag => gen_tagging(spec)?,
            TaskKind::Regress => gen_regression(spec)?,
        },
        DataSource::Tsv {
            task,
            schema,
            train,
            dev,
            test,
        } => load_tsv_splits(train, dev, test.as_deref(), *schema, *task)?.0,
    })
}

fn model_config(cfg: &RunConfig, splits: &Splits) -> ModelConfig {
    cfg.shape.build(cfg.task(), splits.vocab_size, splits.num_classes)
}

fn train_once(cfg: &RunConfig, splits: &Splits) -> Result<TrainOutcome, CliError> {
    let model = Model::new(model_config(cfg, splits), cfg.train.seed)?;
    Ok(match cfg.procedure {
        Procedure::Addrop => cross_tune(model, &splits.train, &splits.dev, &cfg.train)?,
        Procedure::Finetune => fine_tune(model, &splits.train, &splits.dev, &cfg.train)?,
    })
}

fn train(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<serde_json::Value, CliError> {
    let splits = load_splits(cfg)?;
    let outcome = train_once(cfg, &splits)?;
    let reports = out.join("reports.jsonl");
    atomic_write(&reports, &jsonl_text(&outcome.reports))?;
    manifest.artifact("reports", &reports);
    let checkpoint = out.join("checkpoint.ckpt");
    atomic_write(&checkpoint, outcome.model.to_checkpoint_string().as_bytes())?;
    manifest.artifact("checkpoint", &checkpoint);
    let kind = cfg.train.metric_for(cfg.task())?;
    let test = evaluate(&outcome.model, &splits.test, kind)?;
    info!(
        "best dev {kind} {:.4} at epoch {}; test {:.4}",
        outcome.best_metric, outcome.best_epoch, test.metric
    );
    Ok(json!({
        "metric": kind.to_string(),
        "best_epoch": outcome.best_epoch,
        "best_dev_metric": outcome.best_metric,
        "test_metric": test.metric,
        "test_loss": test.loss,
        "epochs_run": outcome.reports.len(),
    }))
}

/// Settings that reproduce one grid cell through `train`.
fn cell_settings(settings: &Settings, job: GridJob) -> Result<Settings, CliError> {
    let mut s = settings.clone();
    match (job.p, job.q) {
        (Some(p), Some(q)) => {
            s.set("policy.p", &p.to_string(), "grid")?;
            s.set("policy.q", &q.to_string(), "grid")?;
            s.set("train.procedure", "addrop", "grid")?;
        }
        _ => s.set("train.procedure", "finetune", "grid")?,
    }
    Ok(s)
}

/// A cell is complete when its manifest exists and was produced by the same
/// settings.
fn finished_cell(path: &Path, expected: &Settings) -> Option<GridCell> {
    let m = RunManifest::load(path)?;
    if &m.config != expected.values() {
        return None;
    }
    serde_json::from_value(m.summary).ok()
}

fn grid(
    cfg: &RunConfig,
    settings: &Settings,
    out: &Path,
    workers: usize,
    manifest: &mut RunManifest,
) -> Result<serde_json::Value, CliError> {
    let splits = load_splits(cfg)?;
    let mcfg = model_config(cfg, &splits);
    let jobs = grid_jobs(&cfg.grid.p, &cfg.grid.q);
    let cell_path = |job: &GridJob| out.join("cells").join(job.key()).join("manifest.json");
    let mut pending = Vec::new();
    for job in &jobs {
        let s = cell_settings(settings, *job)?;
        if finished_cell(&cell_path(job), &s).is_none() {
            pending.push((*job, s));
        }
    }
    info!("grid: {} cells, {} already complete", jobs.len(), jobs.len() - pending.len());
    run_pool(workers, || {
        pending
            .par_iter()
            .map(|(job, s)| {
                let m = RunManifest::new("grid-cell", cfg.train.seed, s.values().clone());
                let cell = run_grid_cell(&mcfg, &splits.train, &splits.dev, &cfg.train, *job)?;
                info!("cell {}: {:.4}", job.key(), cell.metric);
                m.finish(&cell_path(job), serde_json::to_value(cell).expect("cell serializes"))
            })
            .collect::<Result<Vec<()>, CliError>>()
    })??;
    let mut rows = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let path = cell_path(job);
        let cell = finished_cell(&path, &cell_settings(settings, *job)?)
            .ok_or_else(|| CliError::Internal(format!("cell manifest {} missing after run", path.display())))?;
        rows.push(GridRow {
            cell: job.key(),
            p: job.p,
            q: job.q,
            seed: cell.seed,
            metric: cell.metric,
            best_epoch: cell.best_epoch,
        });
    }
    let csv = out.join("grid.csv");
    atomic_write(&csv, &csv_text(GRID_SCHEMA, &rows)?)?;
    manifest.artifact("grid", &csv);
    manifest.artifact("cells", &out.join("cells"));
    let cells: Vec<&GridRow> = rows.iter().filter(|r| r.p.is_some()).collect();
    let (mean, std) = mean_std(&cells.iter().map(|r| r.metric).collect::<Vec<_>>());
    let best = cells
        .iter()
        .fold(None::<&&GridRow>, |b, r| match b {
            Some(b) if b.metric >= r.metric => Some(b),
            _ => Some(r),
        })
        .map(|r| r.cell.clone());
    Ok(json!({
        "cells": cells.len(),
        "baseline_metric": rows[0].metric,
        "cell_mean": mean,
        "cell_std": std,
        "best_cell": best,
    }))
}

fn prior(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<serde_json::Value, CliError> {
    let splits = load_splits(cfg)?;
    let mcfg = model_config(cfg, &splits);
    let curves = prior_training_curves(
        &mcfg,
        &splits.train,
        &splits.dev,
        &cfg.train,
        &cfg.prior.modes,
        cfg.prior.train_rate,
        &cfg.prior.curve_layers,
    )?;
    let mut finals = serde_json::Map::new();
    for c in &curves {
        let rows: Vec<CurveRow> = c.reports.iter().map(curve_row).collect();
        let path = out.join(format!("curves_{}.csv", c.mode));
        atomic_write(&path, &csv_text(CURVE_SCHEMA, &rows)?)?;
        manifest.artifact(&format!("curves_{}", c.mode), &path);
        if let Some(last) = rows.last() {
            finals.insert(
                c.mode.to_string(),
                json!({"train_loss": last.train_loss, "dev_loss": last.dev_loss}),
            );
        }
    }
    let model = match &cfg.eval.checkpoint {
        Some(p) => Model::load(p)?,
        None => fine_tune(Model::new(mcfg, cfg.train.seed)?, &splits.train, &splits.dev, &cfg.train)?.model,
    };
    let sweep = prior_rate_sweep(
        &model,
        &splits.dev,
        &cfg.prior.modes,
        &cfg.prior.rates,
        &cfg.prior.sweep_layers,
        cfg.train.seed,
    )?;
    let path = out.join("sweep.csv");
    atomic_write(&path, &csv_text(SWEEP_SCHEMA, &sweep)?)?;
    manifest.artifact("sweep", &path);
    Ok(json!({ "final_epoch": finals, "sweep_rows": sweep.len() }))
}

fn curve_row(r: &EpochReport) -> CurveRow {
    CurveRow {
        epoch: r.epoch,
        phase: r.phase.to_string(),
        train_loss: r.train_loss,
        dev_loss: r.dev_loss,
        dev_metric: r.dev_metric,
    }
}

fn eval(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<serde_json::Value, CliError> {
    let path = cfg.eval.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config(crate::config::ConfigError::Invalid {
            key: "eval.checkpoint".into(),
            value: String::new(),
            reason: "eval needs a checkpoint path".into(),
        })
    })?;
    let model = Model::load(path)?;
    let splits = load_splits(cfg)?;
    let data = match cfg.eval.split {
        Split::Dev => &splits.dev,
        Split::Test => &splits.test,
    };
    let kind = cfg.train.metric_for(data.task)?;
    let e = evaluate(&model, data, kind)?;
    let summary = json!({
        "split": match cfg.eval.split { Split::Dev => "dev", Split::Test => "test" },
        "metric": kind.to_string(),
        "value": e.metric,
        "loss": e.loss,
        "undefined": e.undefined,
        "examples": data.len(),
    });
    let result = out.join("eval.json");
    atomic_write(&result, &serde_json::to_vec_pretty(&summary).expect("json"))?;
    manifest.artifact("eval", &result);
    Ok(summary)
}
