//! Line-delimited JSON records and CSV tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::train::{select_best, RunRecord, SweepResult};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One row per (run, epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub lr: f64,
    pub seed: u64,
    pub subset_fraction: f64,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
}

pub fn metrics_rows(records: &[RunRecord]) -> Vec<MetricsRow> {
    records
        .iter()
        .flat_map(|r| {
            r.epochs.iter().map(move |e| MetricsRow {
                strategy: r.strategy.clone(),
                lr: r.lr,
                seed: r.seed,
                subset_fraction: r.subset_fraction,
                epoch: e.epoch,
                train_loss: e.train_loss,
                val_accuracy: e.val_accuracy,
            })
        })
        .collect()
}

/// One row per run, without timing, so that reruns compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummaryRow {
    pub strategy: String,
    pub backbone: String,
    pub lr: f64,
    pub seed: u64,
    pub subset_fraction: f64,
    pub trainable_weights_only: usize,
    pub trainable_all: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
}

pub fn summary_rows(records: &[RunRecord]) -> Vec<RunSummaryRow> {
    records
        .iter()
        .map(|r| RunSummaryRow {
            strategy: r.strategy.clone(),
            backbone: r.backbone.clone(),
            lr: r.lr,
            seed: r.seed,
            subset_fraction: r.subset_fraction,
            trainable_weights_only: r.trainable_weights_only,
            trainable_all: r.trainable_all,
            best_epoch: r.best_epoch,
            best_val_accuracy: r.best_val_accuracy,
            test_accuracy: r.test_accuracy,
            train_accuracy: r.train_accuracy,
        })
        .collect()
}

/// Accuracy against data size, one row per (strategy, fraction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlotRow {
    pub strategy: String,
    pub fraction: f64,
    pub n_seeds: usize,
    pub mean_test_accuracy: f64,
    pub sd_test_accuracy: f64,
    pub mean_gap: f64,
    pub sd_gap: f64,
}

pub fn sweep_plot_rows(sweep: &SweepResult) -> Vec<SweepPlotRow> {
    sweep
        .rows
        .iter()
        .map(|r| SweepPlotRow {
            strategy: r.strategy.clone(),
            fraction: r.fraction,
            n_seeds: r.n_seeds,
            mean_test_accuracy: r.mean_test_accuracy,
            sd_test_accuracy: r.sd_test_accuracy,
            mean_gap: r.mean_gap,
            sd_gap: r.sd_gap,
        })
        .collect()
}

/// Accuracy against trainable parameters, one row per strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyParamsRow {
    pub strategy: String,
    pub trainable_weights_only: usize,
    pub trainable_all: usize,
    pub runs: usize,
    pub lr: f64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Picks each strategy's best-validation run and sorts ascending by
/// trainable parameters. Parameter counts are taken from the records as
/// written, never recounted.
pub fn accuracy_vs_params(records: &[RunRecord]) -> Vec<AccuracyParamsRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.strategy.as_str()) {
            names.push(&r.strategy);
        }
    }
    let mut rows: Vec<AccuracyParamsRow> = names
        .iter()
        .map(|name| {
            let own: Vec<RunRecord> = records.iter().filter(|r| r.strategy == *name).cloned().collect();
            let best = &own[select_best(&own).expect("strategy has runs")];
            AccuracyParamsRow {
                strategy: name.to_string(),
                trainable_weights_only: best.trainable_weights_only,
                trainable_all: best.trainable_all,
                runs: own.len(),
                lr: best.lr,
                best_val_accuracy: best.best_val_accuracy,
                test_accuracy: best.test_accuracy,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.trainable_weights_only, a.trainable_all, &a.strategy).cmp(&(b.trainable_weights_only, b.trainable_all, &b.strategy))
    });
    rows
}
