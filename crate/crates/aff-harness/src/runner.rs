//! Experiment execution: the (arm, seed) grid, per-cell training, and
//! deterministic emission of `results.csv` and `report.json`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use aff_core::models::{FusionMode, Model, TaskData};
use aff_core::optim::{evaluate, model_grad_check, train_epoch, OptimizerState};
use aff_core::rng::RngStream;
use aff_core::tensor::ParamStore;

use crate::config::ExperimentConfig;
use crate::{HarnessError, Result};

pub const CSV_HEADER: &str = "arm,seed,epoch,split,loss,accuracy,macro_f1,wall_ms";

/// Training statistics for one epoch of one cell.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Mean attention weight the cell's final model assigns to corrupted and
/// clean sources on the test split. `None` when a side has no members.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRecord {
    pub corrupted_mean: Option<f64>,
    pub clean_mean: Option<f64>,
}

/// Held-out evaluation of one trained cell.
#[derive(Clone, Debug, Serialize)]
pub struct TestRecord {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionRecord>,
}

/// One (arm, seed) cell of the experiment grid. A cell that aborted keeps
/// its completed epochs, carries the error text, and has no test record;
/// the CSV marks it with a NaN test row.
#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: FusionMode,
    pub seed: u64,
    pub train: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TestRecord>,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ArmResult {
    fn new(arm: FusionMode, seed: u64) -> Self {
        Self {
            arm,
            seed,
            train: Vec::new(),
            test: None,
            wall_ms: 0,
            error: None,
        }
    }
}

/// Test-split mean and sample standard deviation over a single arm's
/// completed seeds. Failed cells are excluded; `seeds` counts the rest.
#[derive(Clone, Debug, Serialize)]
pub struct ArmAggregate {
    pub arm: FusionMode,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub results: Vec<ArmResult>,
    pub aggregates: Vec<ArmAggregate>,
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.results.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn aggregate_for(&self, arm: FusionMode) -> Option<&ArmAggregate> {
        self.aggregates.iter().find(|a| a.arm == arm)
    }
}

/// Run the full grid: arms in canonical order (aff, concat, add, mul),
/// seeds ascending, one dataset per seed shared by every arm. Writes
/// `results.csv` and `report.json` into `out_dir` before returning.
/// Cell-level numerical failures are recorded, not propagated.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let mut arms = config.arms.clone();
    arms.sort();
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();

    let mut data = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        data.push(config.task.generate(seed)?);
    }

    let mut results = Vec::with_capacity(arms.len() * seeds.len());
    let total = arms.len() * seeds.len();
    for &arm in &arms {
        for (i, &seed) in seeds.iter().enumerate() {
            let (train, test) = &data[i];
            let result = run_cell(config, arm, seed, train, test);
            match (&result.error, &result.test) {
                (Some(e), _) => eprintln!(
                    "[{}/{}] {} seed {}: FAILED: {e}",
                    results.len() + 1,
                    total,
                    arm.name(),
                    seed
                ),
                (None, Some(t)) => eprintln!(
                    "[{}/{}] {} seed {}: test acc {:.4}, {:.1}s",
                    results.len() + 1,
                    total,
                    arm.name(),
                    seed,
                    t.accuracy,
                    result.wall_ms as f64 / 1000.0
                ),
                (None, None) => {}
            }
            results.push(result);
        }
    }

    let aggregates = aggregate(&arms, &results);
    let report = ExperimentReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        results,
        aggregates,
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.csv"), render_csv(&report.results))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| HarnessError::Config(format!("serializing report: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json + "\n")?;
    Ok(report)
}

/// Train and evaluate one cell, propagating any error to the caller
/// instead of recording it. Backs the `eval` subcommand.
pub fn run_single(config: &ExperimentConfig, arm: FusionMode, seed: u64) -> Result<ArmResult> {
    config.validate()?;
    let (train, test) = config.task.generate(seed)?;
    let started = Instant::now();
    let mut result = ArmResult::new(arm, seed);
    train_and_eval(config, arm, &train, &test, &mut result)?;
    result.wall_ms = started.elapsed().as_millis() as u64;
    Ok(result)
}

/// Finite-difference check of the adaptive arm's analytic gradients on one
/// batch of the configured task (dropout forced off, 20 coordinates, fixed
/// probe seed). Returns the max relative error.
pub fn grad_check(config: &ExperimentConfig) -> Result<f64> {
    config.validate()?;
    let seed = *config.seeds.iter().min().expect("validated nonempty");
    let (train, _) = config.task.generate(seed)?;
    let mut model_cfg = config.model_for(FusionMode::Aff);
    model_cfg.fusion.dropout_p = 0.0;
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed);
    let model = Model::build(&model_cfg, &mut store, &mut rng)?;
    let n = train.len().min(config.train.batch_size);
    let indices: Vec<usize> = (0..n).collect();
    let batch = train.batch(&indices)?;
    let loss_cfg = config.loss_for(FusionMode::Aff);
    let rel = model_grad_check(&model, &mut store, &batch, &loss_cfg, 20, 2024)?;
    Ok(rel)
}

fn run_cell(
    config: &ExperimentConfig,
    arm: FusionMode,
    seed: u64,
    train: &TaskData,
    test: &TaskData,
) -> ArmResult {
    let started = Instant::now();
    let mut result = ArmResult::new(arm, seed);
    if let Err(e) = train_and_eval(config, arm, train, test, &mut result) {
        result.error = Some(e.to_string());
        result.test = None;
    }
    result.wall_ms = started.elapsed().as_millis() as u64;
    result
}

fn train_and_eval(
    config: &ExperimentConfig,
    arm: FusionMode,
    train: &TaskData,
    test: &TaskData,
    out: &mut ArmResult,
) -> Result<()> {
    let model_cfg = config.model_for(arm);
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(out.seed);
    let model = Model::build(&model_cfg, &mut store, &mut rng)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = out.seed;
    let loss_cfg = config.loss_for(arm);
    let mut opt = OptimizerState::new(train_cfg.optimizer, train_cfg.lr);
    for epoch in 0..train_cfg.epochs {
        let stats = train_epoch(&model, &mut store, train, &train_cfg, &loss_cfg, &mut opt, epoch)?;
        out.train.push(EpochRecord {
            epoch,
            loss: stats.loss,
            accuracy: stats.accuracy,
            macro_f1: stats.macro_f1,
        });
    }
    let eval = evaluate(&model, &store, test, train_cfg.batch_size)?;
    out.test = Some(TestRecord {
        loss: eval.loss,
        accuracy: eval.report.accuracy,
        macro_f1: eval.report.macro_f1,
        attention: eval.attention.map(|a| AttentionRecord {
            corrupted_mean: a.corrupted_mean(),
            clean_mean: a.clean_mean(),
        }),
    });
    Ok(())
}

/// Render results as CSV. Every row of a cell carries the cell's total
/// wall-clock; a failed cell contributes its completed epoch rows plus a
/// `NaN,NaN,NaN` test row. All columns except `wall_ms` are deterministic.
pub fn render_csv(results: &[ArmResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        for e in &r.train {
            writeln!(
                out,
                "{},{},{},train,{},{},{},{}",
                r.arm.name(),
                r.seed,
                e.epoch,
                e.loss,
                e.accuracy,
                e.macro_f1,
                r.wall_ms
            )
            .expect("write to string");
        }
        let (loss, acc, f1) = match &r.test {
            Some(t) => (t.loss, t.accuracy, t.macro_f1),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        writeln!(
            out,
            "{},{},-1,test,{},{},{},{}",
            r.arm.name(),
            r.seed,
            loss,
            acc,
            f1,
            r.wall_ms
        )
        .expect("write to string");
    }
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(arms: &[FusionMode], results: &[ArmResult]) -> Vec<ArmAggregate> {
    arms.iter()
        .map(|&arm| {
            let tests: Vec<&TestRecord> = results
                .iter()
                .filter(|r| r.arm == arm)
                .filter_map(|r| r.test.as_ref())
                .collect();
            let acc: Vec<f64> = tests.iter().map(|t| t.accuracy).collect();
            let f1: Vec<f64> = tests.iter().map(|t| t.macro_f1).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
            ArmAggregate {
                arm,
                seeds: tests.len(),
                accuracy_mean,
                accuracy_std,
                macro_f1_mean,
                macro_f1_std,
            }
        })
        .collect()
}
