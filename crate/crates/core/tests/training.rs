mod common;

use petkit::adapters::HoulsbySpec;
use petkit::data::gen_synthetic_dataset;
use petkit::graph::BackwardFault;
use petkit::train::{batch_gradient, low_resource_sweep, lr_grid_search, ExperimentSpec, TrainConfig};
use petkit::{
    train, BackboneConfig, CnnStrategy, Dataset, Execution, Optimizer, OptimizerKind, PetError, PetStrategy, Precision,
    SyntheticTaskSpec,
};

fn experiment(strategy: PetStrategy) -> ExperimentSpec {
    ExperimentSpec {
        backbone_name: "mini".into(),
        backbone: BackboneConfig::mini(),
        backbone_seed: 0,
        strategy,
    }
}

fn easy_task(n_classes: usize, samples_per_class: usize) -> Dataset {
    gen_synthetic_dataset(&SyntheticTaskSpec {
        n_classes,
        samples_per_class,
        wave_length: 400,
        snr_db: 30.0,
        seed: 0,
    })
    .unwrap()
}

fn adapter_strategies() -> Vec<PetStrategy> {
    let c = BackboneConfig::mini();
    vec![
        PetStrategy::chapter(&c),
        PetStrategy::Houlsby { houlsby: HoulsbySpec::default() },
        PetStrategy::CnnAdapter { cnn: CnnStrategy { top_n: 2, compression: 2, alpha: 1.0 } },
        PetStrategy::WeightedSum { include_conv_tap: true },
        PetStrategy::Frozen,
    ]
}

#[test]
fn hundred_steps_leave_frozen_tensors_untouched() {
    let data = easy_task(4, 20);
    let batch: Vec<_> = data.train.iter().take(2).collect();
    for strategy in adapter_strategies().into_iter().chain([PetStrategy::FineTune]) {
        let mut model = experiment(strategy.clone()).build(4, 1).unwrap();
        let before = model.params().clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, model.params().len());
        for _ in 0..100 {
            let (_, grads) = batch_gradient(&model, &batch, Execution::Sequential, BackwardFault::None).unwrap();
            opt.step(model.params_mut(), &grads);
        }
        let mut backbone_changed = false;
        for ((_, a), (_, b)) in before.iter().zip(model.params().iter()) {
            if !a.tensor.trainable() {
                assert_eq!(a.tensor.data(), b.tensor.data(), "{} moved under {}", a.spec.path, strategy.name());
            }
            if a.spec.component.is_backbone() && a.tensor.data() != b.tensor.data() {
                backbone_changed = true;
            }
        }
        assert_eq!(backbone_changed, strategy.trains_backbone(), "{}", strategy.name());
    }
}

#[test]
fn frozen_baseline_beats_chance_on_easy_four_class_task() {
    let data = easy_task(4, 50);
    let config = TrainConfig {
        epochs: 30,
        lr_grid: vec![1e-3],
        seed: 3,
        ..TrainConfig::default()
    };
    let rec = lr_grid_search(&experiment(PetStrategy::Frozen), &data, &config).unwrap();
    let acc = rec.best_record().test_accuracy;
    assert!(acc > 0.25, "test accuracy {acc}");
}

#[test]
fn zero_epochs_stays_near_chance() {
    let data = easy_task(10, 100);
    let config = TrainConfig {
        epochs: 0,
        lr_grid: vec![1e-3],
        ..TrainConfig::default()
    };
    let mut model = experiment(PetStrategy::chapter(&BackboneConfig::mini())).build(10, 0).unwrap();
    let rec = train(&mut model, &data, &config, 1e-3).unwrap();
    // Binomial(100, 0.1) has standard deviation 0.03; allow four of them.
    assert!(rec.test_accuracy <= 0.1 + 4.0 * 0.03, "{}", rec.test_accuracy);
    assert_eq!(rec.best_epoch, 0);
    assert_eq!(rec.epochs.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let data = easy_task(3, 20);
    let config = TrainConfig {
        epochs: 3,
        lr_grid: vec![1e-3, 1e-4],
        seed: 5,
        ..TrainConfig::default()
    };
    let exp = experiment(PetStrategy::chapter(&BackboneConfig::mini()));
    let a = lr_grid_search(&exp, &data, &config).unwrap();
    let b = lr_grid_search(&exp, &data, &TrainConfig { execution: Execution::Sequential, ..config }).unwrap();
    assert_eq!(a.records.len(), 2);
    for (x, y) in a.records.iter().zip(&b.records) {
        let mut y = y.clone();
        y.train.execution = x.train.execution;
        assert!(x.same_outcome(&y));
    }
}

#[test]
fn adapter_logits_match_frozen_logits_at_step_zero() {
    let data = easy_task(5, 10);
    let frozen = experiment(PetStrategy::Frozen).build(5, 9).unwrap();
    for strategy in adapter_strategies().into_iter().filter(|s| !matches!(s, PetStrategy::WeightedSum { .. })) {
        let m = experiment(strategy).build(5, 9).unwrap();
        for e in data.test.iter().take(5) {
            assert_eq!(m.logits_value(&e.wave).unwrap(), frozen.logits_value(&e.wave).unwrap());
        }
    }
}

#[test]
fn single_learning_rate_grid_returns_that_run() {
    let data = easy_task(3, 10);
    let config = TrainConfig {
        epochs: 2,
        lr_grid: vec![1e-4],
        ..TrainConfig::default()
    };
    let g = lr_grid_search(&experiment(PetStrategy::Frozen), &data, &config).unwrap();
    assert_eq!(g.records.len(), 1);
    assert_eq!(g.best, 0);
    assert_eq!(g.best_record().lr, 1e-4);
}

#[test]
fn learning_rate_blowup_names_step_and_rate() {
    let data = easy_task(3, 10);
    let config = TrainConfig {
        epochs: 3,
        lr_grid: vec![1e308],
        optimizer: OptimizerKind::SgdMomentum,
        ..TrainConfig::default()
    };
    let err = lr_grid_search(&experiment(PetStrategy::Frozen), &data, &config).unwrap_err();
    let PetError::Numeric(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains("step") && msg.contains("1e308"), "{msg}");
}

#[test]
fn thirty_two_bit_mode_trains() {
    let data = easy_task(3, 10);
    let config = TrainConfig {
        epochs: 2,
        lr_grid: vec![1e-3],
        precision: Precision::F32,
        ..TrainConfig::default()
    };
    let g = lr_grid_search(&experiment(PetStrategy::chapter(&BackboneConfig::mini())), &data, &config).unwrap();
    assert!(g.best_record().epochs[1].train_loss.unwrap().is_finite());
}

#[test]
fn sweep_cell_at_full_data_reproduces_grid_search() {
    let data = easy_task(3, 20);
    let config = TrainConfig {
        epochs: 2,
        lr_grid: vec![1e-3, 1e-4],
        ..TrainConfig::default()
    };
    let exps = [experiment(PetStrategy::Frozen), experiment(PetStrategy::chapter(&BackboneConfig::mini()))];
    let seeds = [11, 12, 13];
    let sweep = low_resource_sweep(&exps, &data, &config, &[1.0, 0.5], &seeds).unwrap();
    assert_eq!(sweep.rows.len(), 2 * 2);
    assert_eq!(sweep.cells.len(), 2 * 2 * 3);
    let cell = sweep
        .cells
        .iter()
        .find(|c| c.strategy == "chapter" && c.fraction == 1.0 && c.seed == 12)
        .unwrap();
    let direct = lr_grid_search(&exps[1], &data, &TrainConfig { seed: 12, ..config.clone() }).unwrap();
    assert_eq!(cell.grid.best, direct.best);
    for (a, b) in cell.grid.records.iter().zip(&direct.records) {
        assert!(a.same_outcome(b));
    }
    let row = sweep.row("chapter", 0.5).unwrap();
    assert_eq!(row.n_seeds, 3);
    assert_eq!(sweep.best_records().iter().filter(|r| r.subset_fraction == 0.5).count(), 6);
}

#[test]
fn sweep_rejects_fractions_that_empty_a_class() {
    let data = easy_task(3, 20);
    let exps = [experiment(PetStrategy::Frozen)];
    let err = low_resource_sweep(&exps, &data, &TrainConfig::default(), &[0.01], &[1, 2, 3]).unwrap_err();
    assert!(matches!(err, PetError::Config(_)));
}
