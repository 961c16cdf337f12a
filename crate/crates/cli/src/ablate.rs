//! Ablation presets: each setting is a modified copy of the base config,
//! trained and evaluated in turn. Settings run one after another; the
//! per-step work is already parallel.

use std::path::Path;

use boostnet::eval::{anytime_eval, cost_profile_estimate, EvaluationReport};
use serde::Serialize;

use crate::commands::{anytime_curve, calibrate_budgets, eval_policies, logits_of, train_run, write_dump, CurveRow};
use crate::config::{PerExit, RunConfig};
use crate::error::CliError;
use crate::io::{create_dir, load_config, load_splits, output_dir, write_csv, write_json};
use crate::{AblateArgs, Preset};

pub const BATCH_SIZES: [usize; 3] = [16, 64, 256];

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::TemperatureSweep => "temperature-sweep",
            Preset::TrainablePrev => "trainable-prev",
            Preset::RescalingOnoff => "rescaling-onoff",
            Preset::BatchSize => "batch-size",
        }
    }
}

/// Named variants of `base` for a preset.
pub fn settings(preset: Preset, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match preset {
        Preset::TemperatureSweep => [0.0, 0.5, 1.0]
            .into_iter()
            .map(|t| (format!("t={t}"), with(&|c| c.temperature = PerExit::All(t))))
            .collect(),
        Preset::TrainablePrev => [true, false]
            .into_iter()
            .map(|sg| {
                let name = if sg { "stop-gradient" } else { "trainable-prev" };
                (name.to_string(), with(&|c| c.stop_gradient = sg))
            })
            .collect(),
        Preset::RescalingOnoff => [true, false]
            .into_iter()
            .map(|on| {
                let name = if on { "rescaling-on" } else { "rescaling-off" };
                (name.to_string(), with(&|c| c.gradient_rescaling = on))
            })
            .collect(),
        Preset::BatchSize => BATCH_SIZES
            .into_iter()
            .map(|b| (format!("batch={b}"), with(&|c| c.batch_size = b)))
            .collect(),
    }
}

#[derive(Serialize)]
struct SettingResult {
    setting: String,
    final_per_exit_loss: Vec<f64>,
    anytime: EvaluationReport,
    budgeted: Vec<EvaluationReport>,
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    preset: &'static str,
    seed: u64,
    results: &'a [SettingResult],
}

#[derive(Serialize)]
struct AblationRow<'a> {
    setting: &'a str,
    mode: &'static str,
    x: f64,
    cost: f64,
    accuracy: f64,
}

pub fn run(args: &AblateArgs) -> Result<(), CliError> {
    let base = load_config(&args.config, args.seed)?;
    let out = output_dir(args.out.as_ref(), &base)?.join(args.preset.name());
    create_dir(&out)?;
    let splits = load_splits(&base)?;

    let mut results = Vec::new();
    for (name, cfg) in settings(args.preset, &base) {
        cfg.validate()?;
        let dir = out.join(name.replace('=', "_"));
        log::info!("ablation {}: {name}", args.preset.name());
        let (model, metrics) = train_run(&cfg, &splits, &dir)?;
        let costs = cost_profile_estimate(&model)?;
        let test = logits_of(&model, &splits.test)?;
        write_dump(&test, &dir.join("test_logits.jsonl"))?;
        let anytime = anytime_eval(&test, &costs)?;
        let budgeted = match &args.budgets {
            Some(budgets) => {
                let holdout = logits_of(&model, &splits.holdout)?;
                write_dump(&holdout, &dir.join("holdout_logits.jsonl"))?;
                let files = calibrate_budgets(&holdout, budgets, &costs, &dir.join("policies"))?;
                eval_policies(&test, &files)?.0
            }
            None => Vec::new(),
        };
        results.push(SettingResult {
            setting: name,
            final_per_exit_loss: metrics.last().map(|m| m.per_exit_loss.clone()).unwrap_or_default(),
            anytime,
            budgeted,
        });
    }

    write_outputs(&out, args.preset.name(), base.seed, &results)
}

fn write_outputs(out: &Path, preset: &'static str, seed: u64, results: &[SettingResult]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for r in results {
        let mut push = |mode, curve: Vec<CurveRow>| {
            rows.extend(curve.into_iter().map(|c| AblationRow {
                setting: &r.setting,
                mode,
                x: c.x,
                cost: c.cost,
                accuracy: c.accuracy,
            }))
        };
        push("anytime", anytime_curve(&r.anytime));
        push("budgeted", r.budgeted.iter().flat_map(anytime_curve).collect());
        println!("{preset} {}: {}", r.setting, describe(&r.anytime));
    }
    write_csv(&out.join("curve.csv"), &rows)?;
    write_json(&out.join("ablation.json"), &AblationSummary { preset, seed, results })
}

fn describe(report: &EvaluationReport) -> String {
    match report {
        EvaluationReport::Anytime { per_exit_accuracy, .. } => format!("per-exit accuracy {per_exit_accuracy:.4?}"),
        other => format!("{other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::from_toml(
            r#"
schema_version = 1
dataset = "two-moons"
backbone = "mlp"
num_exits = 3
widths = [4, 4, 4]
epochs = 1
batch_size = 8
"#,
        )
        .unwrap()
    }

    #[test]
    fn temperature_sweep_values() {
        let s = settings(Preset::TemperatureSweep, &base());
        let ts: Vec<_> = s.iter().map(|(_, c)| c.temperature.clone()).collect();
        assert_eq!(ts, vec![PerExit::All(0.0), PerExit::All(0.5), PerExit::All(1.0)]);
    }

    #[test]
    fn toggles_flip_one_flag() {
        let s = settings(Preset::TrainablePrev, &base());
        assert_eq!(s.len(), 2);
        assert!(s[0].1.stop_gradient && !s[1].1.stop_gradient);
        assert_eq!(s[0].1.gradient_rescaling, s[1].1.gradient_rescaling);
        let s = settings(Preset::RescalingOnoff, &base());
        assert!(s[0].1.gradient_rescaling && !s[1].1.gradient_rescaling);
    }

    #[test]
    fn batch_sizes() {
        let s = settings(Preset::BatchSize, &base());
        assert_eq!(s.iter().map(|(_, c)| c.batch_size).collect::<Vec<_>>(), BATCH_SIZES);
    }
}
