//! Training loop, learning-rate grid and low-resource sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::Convention;
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{Dataset, Example};
use crate::error::{PetError, Result};
use crate::exec::Execution;
use crate::graph::{BackwardFault, Precision};
use crate::model::{accumulate, attach_head, scale_grads, HeadKind, TaskModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::param::ParamId;
use crate::rng::derive_seed;
use crate::strategy::{apply_strategy, PetStrategy};

pub const DEFAULT_LR_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const DEFAULT_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.25, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub subset_fraction: f64,
    pub precision: Precision,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            epochs: 50,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            subset_fraction: 1.0,
            precision: Precision::F64,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(PetError::config("lr_grid must not be empty"));
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
            return Err(PetError::config(format!("learning rate {lr} must be positive and finite")));
        }
        if self.batch_size == 0 {
            return Err(PetError::config("batch_size must be >= 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(PetError::config(format!("subset_fraction {} outside (0, 1]", self.subset_fraction)));
        }
        Ok(())
    }
}

/// What to train: a backbone with fixed "pretrained" weights and a strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub backbone_name: String,
    pub backbone: BackboneConfig,
    /// Seed of the backbone weights; shared by every strategy and run.
    pub backbone_seed: u64,
    pub strategy: PetStrategy,
}

impl ExperimentSpec {
    /// Backbone, adapters and head for one run. Adapters and head draw from
    /// `seed`, so two strategies trained with the same seed share a head init.
    pub fn build(&self, n_classes: usize, seed: u64) -> Result<TaskModel> {
        let backbone = Backbone::build(self.backbone.clone(), self.backbone_seed)?;
        let model = apply_strategy(backbone, &self.strategy, derive_seed(seed, "adapters"))?;
        attach_head(model, HeadKind::for_strategy(&self.strategy), n_classes, derive_seed(seed, "head"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the epoch-0 evaluation.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub strategy_config: PetStrategy,
    pub backbone: String,
    pub task: crate::data::SyntheticTaskSpec,
    pub train: TrainConfig,
    pub lr: f64,
    pub seed: u64,
    pub subset_fraction: f64,
    pub n_train: usize,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Read once, at the best-validation checkpoint.
    pub test_accuracy: f64,
    /// Accuracy on the (subset) training data at the same checkpoint.
    pub train_accuracy: f64,
    pub trainable_weights_only: usize,
    pub trainable_all: usize,
    pub head_params: usize,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn generalization_gap(&self) -> f64 {
        self.train_accuracy - self.test_accuracy
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        &a == other
    }
}

pub fn accuracy(model: &TaskModel, examples: &[&Example], exec: Execution) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = exec.map(examples, |e| model.predict(&e.wave).map(|p| p == e.label));
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Mean loss and gradient over one batch, evaluated per sample in parallel
/// and reduced in input order.
pub fn batch_gradient(
    model: &TaskModel,
    batch: &[&Example],
    exec: Execution,
    fault: BackwardFault,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let per = exec.map(batch, |e| model.loss_and_grads_with(&e.wave, e.label, fault));
    let mut acc = vec![None; model.params().len()];
    let mut total = 0.0;
    for r in per {
        let (l, g) = r?;
        total += l;
        accumulate(&mut acc, g);
    }
    let k = batch.len().max(1) as f64;
    scale_grads(&mut acc, 1.0 / k);
    Ok((total / k, acc))
}

fn snapshot(model: &TaskModel) -> Vec<(ParamId, Vec<f64>)> {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.tensor.trainable())
        .map(|(id, p)| (id, p.tensor.data().to_vec()))
        .collect()
}

fn restore(model: &mut TaskModel, snap: &[(ParamId, Vec<f64>)]) {
    for (id, values) in snap {
        model.params_mut().get_mut(*id).data_mut().copy_from_slice(values);
    }
}

/// Trains the trainable tensors of `model` at learning rate `lr`, keeps the
/// checkpoint with the best validation accuracy (earliest on ties, epoch 0
/// being the untrained model) and reads test accuracy once at that
/// checkpoint.
pub fn train(model: &mut TaskModel, data: &Dataset, config: &TrainConfig, lr: f64) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let exec = config.execution;
    model.set_precision(config.precision);
    let subset = data.train_subset(config.subset_fraction, derive_seed(config.seed, "subset"))?;
    let val: Vec<&Example> = data.val.iter().collect();
    let test: Vec<&Example> = data.test.iter().collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut opt = Optimizer::new(config.optimizer, lr, model.params().len());

    let val0 = accuracy(model, &val, exec)?;
    let mut epochs = vec![EpochMetrics {
        epoch: 0,
        train_loss: None,
        val_accuracy: val0,
    }];
    let (mut best_epoch, mut best_val, mut best) = (0, val0, snapshot(model));
    let mut order: Vec<&Example> = subset.clone();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let at = |what: &str| format!("{what} at step {step} (epoch {epoch}, lr {lr:e})");
            let (loss, grads) = batch_gradient(model, batch, exec, BackwardFault::None).map_err(|e| match e {
                PetError::Numeric(m) => PetError::Numeric(at(&m)),
                other => other,
            })?;
            let grads_finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !grads_finite {
                return Err(PetError::Numeric(at("non-finite loss or gradient")));
            }
            opt.step(model.params_mut(), &grads);
            loss_sum += loss;
            batches += 1;
        }
        let val_acc = accuracy(model, &val, exec)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: Some(loss_sum / batches.max(1) as f64),
            val_accuracy: val_acc,
        });
        if val_acc > best_val {
            best_epoch = epoch;
            best_val = val_acc;
            best = snapshot(model);
        }
    }
    restore(model, &best);
    let test_accuracy = accuracy(model, &test, exec)?;
    let train_accuracy = accuracy(model, &subset, exec)?;
    let weights = model.param_report(Convention::WeightsOnly);
    let all = model.param_report(Convention::All);
    Ok(RunRecord {
        strategy: model.injected().strategy().name().to_string(),
        strategy_config: model.injected().strategy().clone(),
        backbone: String::new(),
        task: data.spec,
        train: config.clone(),
        lr,
        seed: config.seed,
        subset_fraction: config.subset_fraction,
        n_train: subset.len(),
        epochs,
        best_epoch,
        best_val_accuracy: best_val,
        test_accuracy,
        train_accuracy,
        trainable_weights_only: weights.trainable_total,
        trainable_all: all.trainable_total,
        head_params: all.head,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: usize,
    pub records: Vec<RunRecord>,
}

impl GridResult {
    pub fn best_record(&self) -> &RunRecord {
        &self.records[self.best]
    }
}

/// Index of the record with the highest validation accuracy, preferring the
/// smaller learning rate on ties.
pub fn select_best(records: &[RunRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let rb = &records[b];
                let better = r.best_val_accuracy > rb.best_val_accuracy
                    || (r.best_val_accuracy == rb.best_val_accuracy && r.lr < rb.lr);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

fn run_one(exp: &ExperimentSpec, data: &Dataset, config: &TrainConfig, lr: f64) -> Result<RunRecord> {
    let mut model = exp.build(data.spec.n_classes, config.seed)?;
    let mut record = train(&mut model, data, config, lr)?;
    record.backbone = exp.backbone_name.clone();
    Ok(record)
}

/// One training run per learning rate, each from the same initialization.
pub fn lr_grid_search(exp: &ExperimentSpec, data: &Dataset, config: &TrainConfig) -> Result<GridResult> {
    config.validate()?;
    let results = config.execution.map(&config.lr_grid, |&lr| run_one(exp, data, config, lr));
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let best = select_best(&records).expect("grid is non-empty");
    Ok(GridResult { best, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: String,
    pub fraction: f64,
    pub seed: u64,
    pub grid: GridResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub fraction: f64,
    pub n_seeds: usize,
    pub trainable_weights_only: usize,
    pub mean_test_accuracy: f64,
    pub sd_test_accuracy: f64,
    pub mean_gap: f64,
    pub sd_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, strategy: &str, fraction: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.fraction == fraction)
    }

    /// Best record of every cell, in (strategy, fraction, seed) order.
    pub fn best_records(&self) -> Vec<&RunRecord> {
        self.cells.iter().map(|c| c.grid.best_record()).collect()
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Grid search for every (strategy, fraction, seed) cell. Each cell trains
/// with `seed` as its own training seed; all (cell, lr) jobs are independent
/// and run through `config.execution`.
pub fn low_resource_sweep(
    experiments: &[ExperimentSpec],
    data: &Dataset,
    config: &TrainConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    config.validate()?;
    if experiments.is_empty() || fractions.is_empty() {
        return Err(PetError::config("sweep needs at least one strategy and one fraction"));
    }
    if seeds.len() < 3 {
        return Err(PetError::config(format!("sweep needs at least 3 seeds, got {}", seeds.len())));
    }
    for &f in fractions {
        data.train_subset(f, 0)?;
    }
    let mut jobs = Vec::new();
    for (e, _) in experiments.iter().enumerate() {
        for &fraction in fractions {
            for &seed in seeds {
                for &lr in &config.lr_grid {
                    jobs.push((e, fraction, seed, lr));
                }
            }
        }
    }
    let outcomes = config.execution.map(&jobs, |&(e, fraction, seed, lr)| {
        let cell_config = TrainConfig {
            seed,
            subset_fraction: fraction,
            ..config.clone()
        };
        run_one(&experiments[e], data, &cell_config, lr)
    });
    let records = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let per_cell = config.lr_grid.len();
    let mut cells = Vec::new();
    for (chunk, job) in records.chunks(per_cell).zip(jobs.iter().step_by(per_cell)) {
        let grid = GridResult {
            best: select_best(chunk).expect("grid is non-empty"),
            records: chunk.to_vec(),
        };
        cells.push(SweepCell {
            strategy: experiments[job.0].strategy.name().to_string(),
            fraction: job.1,
            seed: job.2,
            grid,
        });
    }
    let mut rows = Vec::new();
    for exp in experiments {
        let name = exp.strategy.name();
        for &fraction in fractions {
            let bests: Vec<&RunRecord> = cells
                .iter()
                .filter(|c| c.strategy == name && c.fraction == fraction)
                .map(|c| c.grid.best_record())
                .collect();
            let acc: Vec<f64> = bests.iter().map(|r| r.test_accuracy).collect();
            let gap: Vec<f64> = bests.iter().map(|r| r.generalization_gap()).collect();
            let (mean_test_accuracy, sd_test_accuracy) = mean_sd(&acc);
            let (mean_gap, sd_gap) = mean_sd(&gap);
            rows.push(SweepRow {
                strategy: name.to_string(),
                fraction,
                n_seeds: bests.len(),
                trainable_weights_only: bests.first().map_or(0, |r| r.trainable_weights_only),
                mean_test_accuracy,
                sd_test_accuracy,
                mean_gap,
                sd_gap,
            });
        }
    }
    Ok(SweepResult { cells, rows })
}
