use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use petkit::gradcheck::{check_task_model, perturb_trainable};
use petkit::graph::BackwardFault;
use petkit::report::{accuracy_vs_params, metrics_rows, read_jsonl, summary_rows, sweep_plot_rows, write_csv, write_jsonl};
use petkit::{count_params, gen_synthetic_dataset, HeadKind, ModelLayout, low_resource_sweep, lr_grid_search, Execution, PetError, RunRecord};
use serde::Serialize;
use walkdir::WalkDir;

use crate::config::RunConfigFile;
use crate::{CliError, Command, ConventionArg};

pub fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Params { config, convention, out } => params(&config, convention, out.out),
        Command::Gradcheck {
            config,
            eps,
            tolerance,
            perturb,
            seed,
            corrupt_backward,
            out,
        } => {
            let fault = if corrupt_backward { BackwardFault::GeluSlope } else { BackwardFault::None };
            gradcheck(&config, eps, tolerance, perturb, seed, fault, out.out)
        }
        Command::Train { config, seed, sequential, out } => train(&config, seed, sequential, out.out),
        Command::Sweep { config, seed, sequential, out } => sweep(&config, seed, sequential, out.out),
        Command::Report { run_dir, out } => report(&run_dir, out),
    }
}

/// Creates `<root>/<command>-<unix secs>-<millis>`, adding a suffix on collision.
pub fn fresh_run_dir(root: &Path, command: &str) -> Result<PathBuf, CliError> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    let stem = format!("{command}-{}-{:03}", now.as_secs(), now.subsec_millis());
    std::fs::create_dir_all(root)?;
    for i in 0.. {
        let dir = if i == 0 { root.join(&stem) } else { root.join(format!("{stem}-{i}")) };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn out_root(cli: Option<PathBuf>, file: &RunConfigFile) -> PathBuf {
    cli.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

#[derive(Serialize)]
struct ParamsRow {
    component: String,
    convention: String,
    count: usize,
}

fn params(path: &Path, convention: ConventionArg, out: Option<PathBuf>) -> Result<i32, CliError> {
    let file = RunConfigFile::load(path)?;
    let (name, backbone) = file.backbone()?;
    let strategy = file.strategy(&backbone)?;
    let layout = ModelLayout::plan(&backbone, &strategy)?.with_head(HeadKind::param_specs(backbone.hidden, file.task.n_classes));
    let mut reports = Vec::new();
    for c in convention.conventions() {
        reports.push(count_params(&layout, c));
    }
    let title = format!("{} on {name}", strategy.name());
    let text: String = reports.iter().map(|r| r.to_table(&title)).collect::<Vec<_>>().join("\n");
    let rows: Vec<ParamsRow> = reports
        .iter()
        .flat_map(|r| r.records())
        .map(|(component, c, count)| ParamsRow {
            component,
            convention: c.to_string(),
            count,
        })
        .collect();
    let dir = fresh_run_dir(&out_root(out, &file), "params")?;
    write_csv(&dir.join("params.csv"), &rows)?;
    write_jsonl(&dir.join("params.jsonl"), &reports)?;
    std::fs::write(dir.join("params.txt"), &text)?;
    print!("{text}");
    println!("wrote {}", dir.display());
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckOutput {
    strategy: String,
    backbone: String,
    eps: f64,
    tolerance: f64,
    perturb: f64,
    seed: u64,
    entries_checked: usize,
    max_rel_error: f64,
    worst_path: Option<String>,
    worst_index: Option<usize>,
    worst_analytic: Option<f64>,
    worst_numeric: Option<f64>,
    passed: bool,
}

fn gradcheck(
    path: &Path,
    eps: f64,
    tolerance: f64,
    perturb: f64,
    seed: Option<u64>,
    fault: BackwardFault,
    out: Option<PathBuf>,
) -> Result<i32, CliError> {
    let file = RunConfigFile::load(path)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CliError::Config(format!("--eps must be positive, got {eps}")));
    }
    if !(tolerance >= 0.0) {
        return Err(CliError::Config(format!("--tolerance must be non-negative, got {tolerance}")));
    }
    if !(perturb >= 0.0 && perturb.is_finite()) {
        return Err(CliError::Config(format!("--perturb must be non-negative, got {perturb}")));
    }
    let exp = file.experiment()?;
    let seed = seed.unwrap_or(file.train.seed);
    let data = gen_synthetic_dataset(&file.task)?;
    let mut model = exp.build(file.task.n_classes, seed)?;
    perturb_trainable(model.params_mut(), perturb, seed)?;
    let example = &data.train[0];
    let report = check_task_model(&mut model, &example.wave, example.label, eps, fault)?;
    let passed = report.passes(tolerance);
    let worst = report.worst.as_ref();
    let output = GradcheckOutput {
        strategy: exp.strategy.name().to_string(),
        backbone: exp.backbone_name.clone(),
        eps,
        tolerance,
        perturb,
        seed,
        entries_checked: report.entries_checked,
        max_rel_error: report.max_rel_error,
        worst_path: worst.map(|w| w.path.clone()),
        worst_index: worst.map(|w| w.index),
        worst_analytic: worst.map(|w| w.analytic),
        worst_numeric: worst.map(|w| w.numeric),
        passed,
    };
    let dir = fresh_run_dir(&out_root(out, &file), "gradcheck")?;
    std::fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&output).map_err(PetError::from)?)?;
    println!(
        "{} entries, max relative error {:.3e} (tolerance {tolerance:e})",
        report.entries_checked, report.max_rel_error
    );
    if let Some(w) = worst {
        println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.path, w.index, w.analytic, w.numeric);
    }
    println!("{}", if passed { "PASS" } else { "FAIL" });
    println!("wrote {}", dir.display());
    Ok(if passed { 0 } else { 1 })
}

fn print_records(records: &[&RunRecord]) {
    println!(
        "{:<14} {:>6} {:>8} {:>5} {:>9} {:>9} {:>9} {:>12}",
        "strategy", "frac", "lr", "seed", "val", "test", "train", "trainable"
    );
    for r in records {
        println!(
            "{:<14} {:>6} {:>8.0e} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>12}",
            r.strategy, r.subset_fraction, r.lr, r.seed, r.best_val_accuracy, r.test_accuracy, r.train_accuracy, r.trainable_weights_only
        );
    }
}

fn train(path: &Path, seed: Option<u64>, sequential: bool, out: Option<PathBuf>) -> Result<i32, CliError> {
    let file = RunConfigFile::load(path)?;
    let exp = file.experiment()?;
    let mut config = file.train_config()?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.execution = execution(sequential);
    let data = gen_synthetic_dataset(&file.task)?;
    let started = Instant::now();
    let grid = lr_grid_search(&exp, &data, &config)?;
    let dir = fresh_run_dir(&out_root(out, &file), "train")?;
    write_jsonl(&dir.join("records.jsonl"), &grid.records)?;
    write_csv(&dir.join("metrics.csv"), &metrics_rows(&grid.records))?;
    write_csv(&dir.join("summary.csv"), &summary_rows(&grid.records))?;
    print_records(&grid.records.iter().collect::<Vec<_>>());
    let best = grid.best_record();
    println!(
        "best lr {:e}: val {:.4} test {:.4} ({:.1}s)",
        best.lr,
        best.best_val_accuracy,
        best.test_accuracy,
        started.elapsed().as_secs_f64()
    );
    println!("wrote {}", dir.display());
    Ok(0)
}

fn sweep(path: &Path, seed: Option<u64>, sequential: bool, out: Option<PathBuf>) -> Result<i32, CliError> {
    let file = RunConfigFile::load(path)?;
    let (experiments, section) = file.sweep_experiments()?;
    let mut config = file.train_config()?;
    config.execution = execution(sequential);
    let seeds = match seed {
        Some(s) => vec![s, s + 1, s + 2],
        None => section.seeds.clone(),
    };
    let data = gen_synthetic_dataset(&file.task)?;
    let result = low_resource_sweep(&experiments, &data, &config, &section.fractions, &seeds)?;
    let all: Vec<RunRecord> = result.cells.iter().flat_map(|c| c.grid.records.iter().cloned()).collect();
    let best: Vec<RunRecord> = result.best_records().into_iter().cloned().collect();
    let dir = fresh_run_dir(&out_root(out, &file), "sweep")?;
    write_jsonl(&dir.join("records.jsonl"), &best)?;
    write_jsonl(&dir.join("grid_records.jsonl"), &all)?;
    write_csv(&dir.join("sweep.csv"), &sweep_plot_rows(&result))?;
    println!(
        "{:<14} {:>6} {:>6} {:>10} {:>8} {:>10} {:>8}",
        "strategy", "frac", "seeds", "test", "sd", "gap", "sd"
    );
    for r in &result.rows {
        println!(
            "{:<14} {:>6} {:>6} {:>10.4} {:>8.4} {:>10.4} {:>8.4}",
            r.strategy, r.fraction, r.n_seeds, r.mean_test_accuracy, r.sd_test_accuracy, r.mean_gap, r.sd_gap
        );
    }
    println!("wrote {}", dir.display());
    Ok(0)
}

/// Every `records.jsonl` below `dir`, in sorted path order.
pub fn find_records(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| PetError::Io(e.to_string()))?;
        if entry.file_type().is_file() && entry.file_name() == "records.jsonl" {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

fn report(run_dir: &Path, out: Option<PathBuf>) -> Result<i32, CliError> {
    if !run_dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", run_dir.display())));
    }
    let mut records: Vec<RunRecord> = Vec::new();
    for p in find_records(run_dir)? {
        records.extend(read_jsonl::<RunRecord>(&p)?);
    }
    if records.is_empty() {
        return Err(CliError::Config(format!("no records.jsonl with runs below {}", run_dir.display())));
    }
    let rows = accuracy_vs_params(&records);
    let out = out.unwrap_or_else(|| run_dir.to_path_buf());
    std::fs::create_dir_all(&out)?;
    write_csv(&out.join("consolidated.csv"), &summary_rows(&records))?;
    write_csv(&out.join("accuracy_vs_params.csv"), &rows)?;
    println!("{:<14} {:>12} {:>12} {:>5} {:>9} {:>9}", "strategy", "weights", "all", "runs", "val", "test");
    for r in &rows {
        println!(
            "{:<14} {:>12} {:>12} {:>5} {:>9.4} {:>9.4}",
            r.strategy, r.trainable_weights_only, r.trainable_all, r.runs, r.best_val_accuracy, r.test_accuracy
        );
    }
    println!("{} records; wrote {}", records.len(), out.display());
    Ok(0)
}
