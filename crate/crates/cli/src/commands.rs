use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use boostnet::budget::{
    adjust_thresholds_non_degrading, calibrate_policy, CostProfile, HoldoutConfidences, PolicyFile,
};
use boostnet::data::{Dataset, Splits};
use boostnet::eval::{anytime_eval, budgeted_batch_eval, write_logit_dump, EvaluationReport, ExitTrace, LogitTable};
use boostnet::model::{build_model, load_checkpoint, save_checkpoint, BackwardOptions, ModelState};
use boostnet::trainer::{self, check_gradients, finite_diff_gradient_check, GradCheckOptions, StepMetrics, TrainEvent};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{create_dir, load_config, load_dump, load_splits, output_dir, resolve_costs, write_csv, write_json};
use crate::{CalibrateArgs, DumpArgs, EvalArgs, GradcheckArgs, SplitName, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_CONFIG_FILE: &str = "run.toml";

/// Trains per `cfg`, writing the checkpoint, metrics stream and effective
/// config into `out`.
pub fn train_run(cfg: &RunConfig, splits: &Splits, out: &Path) -> Result<(ModelState, Vec<StepMetrics>), CliError> {
    create_dir(out)?;
    let model_cfg = cfg.model_config(&splits.train)?;
    let tcfg = cfg.training_config()?;
    let model = build_model(&model_cfg, cfg.seed)?;
    std::fs::write(out.join(RUN_CONFIG_FILE), cfg.to_toml())?;

    let mut metrics_out = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let every = cfg.checkpoint_every;
    let outcome = trainer::train(model, &splits.train, &tcfg, |event| {
        match event {
            TrainEvent::Step(m) => {
                serde_json::to_writer(&mut metrics_out, m)?;
                metrics_out.write_all(b"\n")?;
            }
            TrainEvent::EpochEnd { epoch, model } => {
                if every.is_some_and(|k| (epoch + 1) % k == 0) {
                    save_checkpoint(model, &out.join(format!("checkpoint_epoch{:04}.json", epoch + 1)))?;
                }
            }
        }
        Ok(())
    })?;
    metrics_out.flush()?;
    save_checkpoint(&outcome.model, &out.join(CHECKPOINT_FILE))?;
    Ok((outcome.model, outcome.metrics))
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    let out = output_dir(args.out.as_ref(), &cfg)?;
    let splits = load_splits(&cfg)?;
    let (_, metrics) = train_run(&cfg, &splits, &out)?;
    if let Some(last) = metrics.last() {
        println!(
            "trained {} steps; final per-exit loss {:.4?}; artifacts in {}",
            metrics.len(),
            last.per_exit_loss,
            out.display()
        );
    }
    Ok(())
}

fn pick_split(splits: &Splits, which: SplitName) -> &Dataset {
    match which {
        SplitName::Train => &splits.train,
        SplitName::Holdout => &splits.holdout,
        SplitName::Test => &splits.test,
    }
}

pub fn logits_of(model: &ModelState, data: &Dataset) -> Result<LogitTable, CliError> {
    Ok(LogitTable::from_model(model, &data.features, &data.labels, &data.ids)?)
}

pub fn write_dump(table: &LogitTable, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_logit_dump(table, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn dump_logits(args: &DumpArgs) -> Result<(), CliError> {
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .map(|d| d.join(RUN_CONFIG_FILE))
            .unwrap_or_else(|| PathBuf::from(RUN_CONFIG_FILE)),
    };
    let cfg = load_config(&config_path, args.seed)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let splits = load_splits(&cfg)?;
    let table = logits_of(&model, pick_split(&splits, args.split))?;
    write_dump(&table, &args.out)?;
    println!("wrote {} records to {}", table.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct CalibrationRow {
    tau: f64,
    p: f64,
    expected_avg_cost: f64,
    saturated: bool,
    raw_holdout_accuracy: f64,
    holdout_accuracy: f64,
    inherited_from_tau: Option<f64>,
    file: String,
}

/// Calibrates policies for `budgets` (sorted ascending) and writes one
/// policy file per budget plus `calibration.json`.
pub fn calibrate_budgets(
    holdout_table: &LogitTable,
    budgets: &[f64],
    costs: &CostProfile,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    create_dir(out)?;
    let mut budgets = budgets.to_vec();
    if budgets.iter().any(|b| !b.is_finite()) {
        return Err(CliError::Config("budgets must be finite".into()));
    }
    budgets.sort_by(f64::total_cmp);
    let holdout = HoldoutConfidences::from_table(holdout_table)?;
    let raw = budgets
        .iter()
        .map(|&tau| calibrate_policy(tau, costs, &holdout))
        .collect::<Result<Vec<_>, _>>()?;
    let adjusted = adjust_thresholds_non_degrading(&raw, &holdout)?;
    let mut files = Vec::with_capacity(adjusted.len());
    let mut rows = Vec::with_capacity(adjusted.len());
    for (i, (policy, raw_policy)) in adjusted.into_iter().zip(&raw).enumerate() {
        let name = format!("policy_{i:03}.json");
        let acc = holdout.accuracy(&policy.thresholds);
        rows.push(CalibrationRow {
            tau: policy.tau,
            p: policy.exit_probability,
            expected_avg_cost: policy.expected_avg_cost,
            saturated: policy.saturated,
            raw_holdout_accuracy: holdout.accuracy(&raw_policy.thresholds),
            holdout_accuracy: acc,
            inherited_from_tau: policy.inherited_from_tau,
            file: name.clone(),
        });
        let path = out.join(&name);
        write_json(
            &path,
            &PolicyFile {
                policy,
                cost_profile: costs.clone(),
                holdout_accuracy: Some(acc),
            },
        )?;
        files.push(path);
    }
    write_json(&out.join("calibration.json"), &rows)?;
    Ok(files)
}

pub fn calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let costs = resolve_costs(&args.costs)?;
    let table = load_dump(&args.dump)?;
    let files = calibrate_budgets(&table, &args.budgets, &costs, &args.out)?;
    println!("wrote {} policies to {}", files.len(), args.out.display());
    Ok(())
}

/// One point of curve data. `x` is the exit index for anytime rows and the
/// budget for budgeted rows.
#[derive(Clone, Debug, Serialize)]
pub struct CurveRow {
    pub x: f64,
    pub cost: f64,
    pub accuracy: f64,
}

pub fn anytime_curve(report: &EvaluationReport) -> Vec<CurveRow> {
    match report {
        EvaluationReport::Anytime {
            per_exit_accuracy,
            cumulative_cost,
            ..
        } => per_exit_accuracy
            .iter()
            .zip(cumulative_cost)
            .enumerate()
            .map(|(i, (&accuracy, &cost))| CurveRow {
                x: (i + 1) as f64,
                cost,
                accuracy,
            })
            .collect(),
        EvaluationReport::BudgetedBatch {
            budget,
            accuracy,
            realized_avg_cost,
            ..
        } => vec![CurveRow {
            x: *budget,
            cost: *realized_avg_cost,
            accuracy: *accuracy,
        }],
    }
}

/// Budgeted evaluation of every policy file, in ascending budget order.
pub fn eval_policies(
    table: &LogitTable,
    files: &[PathBuf],
) -> Result<(Vec<EvaluationReport>, Vec<ExitTrace>), CliError> {
    let mut policies = files
        .iter()
        .map(|p| -> Result<PolicyFile, CliError> {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            serde_json::from_reader(f).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    policies.sort_by(|a, b| a.policy.tau.total_cmp(&b.policy.tau));
    let mut reports = Vec::with_capacity(policies.len());
    let mut traces = Vec::new();
    for pf in &policies {
        let (report, t) = budgeted_batch_eval(table, &pf.policy, &pf.cost_profile)?;
        reports.push(report);
        traces.extend(t);
    }
    Ok((reports, traces))
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let table = load_dump(&args.dump)?;
    create_dir(&args.out)?;
    let reports = if args.anytime {
        vec![anytime_eval(&table, &resolve_costs(&args.costs)?)?]
    } else {
        let (reports, traces) = eval_policies(&table, &args.policies)?;
        let mut w = BufWriter::new(File::create(args.out.join("traces.jsonl"))?);
        for t in &traces {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        reports
    };
    let curve: Vec<CurveRow> = reports.iter().flat_map(anytime_curve).collect();
    write_json(&args.out.join("report.json"), &reports)?;
    write_csv(&args.out.join("curve.csv"), &curve)?;
    for row in &curve {
        println!("x={} cost={:.3} accuracy={:.4}", row.x, row.cost, row.accuracy);
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    passed: bool,
    tolerance: f64,
    max_rel_error: f64,
    worst_key: String,
    worst_index: usize,
    analytic: f64,
    numeric: f64,
    num_parameters: usize,
    rescaled_oracle: bool,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    let data = cfg.load_dataset()?;
    let n = args.samples.min(data.len());
    if n == 0 {
        return Err(CliError::Config("gradcheck needs at least one sample".into()));
    }
    let batch = data.subset(&(0..n).collect::<Vec<_>>());
    let model = build_model(&cfg.model_config(&data)?, cfg.seed)?;
    let opts = GradCheckOptions {
        epsilon: args.epsilon,
        ..GradCheckOptions::default()
    };
    let report = if args.corrupt_combine {
        let mut wrong = model.clone();
        let ts: Vec<f64> = model.config().temperatures().iter().map(|t| t + 0.25).collect();
        wrong.set_temperatures(&ts)?;
        let grads = wrong
            .backward(&batch.features, &batch.labels, &BackwardOptions::default())?
            .gradients;
        check_gradients(&model, &grads, &batch.features, &batch.labels, &opts)?
    } else {
        finite_diff_gradient_check(&model, &batch.features, &batch.labels, &opts)?
    };
    let passed = report.passes(args.tolerance);
    let summary = GradcheckSummary {
        passed,
        tolerance: args.tolerance,
        max_rel_error: report.max_rel_error,
        worst_key: report.worst_key,
        worst_index: report.worst_index,
        analytic: report.analytic,
        numeric: report.numeric,
        num_parameters: report.num_parameters,
        rescaled_oracle: report.rescaled_oracle,
    };
    if let Some(path) = &args.out {
        write_json(path, &summary)?;
    }
    println!(
        "gradcheck {}: max relative error {:.3e} (tolerance {:.0e}, {} parameters, worst {}[{}])",
        if passed { "PASS" } else { "FAIL" },
        summary.max_rel_error,
        args.tolerance,
        summary.num_parameters,
        summary.worst_key,
        summary.worst_index
    );
    if passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            summary.max_rel_error, args.tolerance
        )))
    }
}
