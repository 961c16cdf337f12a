//! Final-exit accuracy and valid-sample fractions for t in {0, 0.5, 1} on
//! two-moons and the 8x8 digit grid, five seeds each.
//!
//! `cargo run --release -p boostnet-core --example temperature_trend [moons|digits]`

use std::time::Instant;

use boostnet::data::{digit_grid, two_moons, Dataset};
use boostnet::eval::{anytime_eval, cost_profile_estimate, EvaluationReport, LogitTable};
use boostnet::model::{build_model, ModelConfig};
use boostnet::trainer::{train_quiet, TrainingConfig};

fn run(data: &Dataset, widths: &[usize], t: f64, seed: u64, epochs: usize) -> (Vec<f64>, Vec<f64>) {
    let splits = data.split(0.1, 0.3, seed).unwrap();
    let mut cfg = ModelConfig::mlp(data.feature_dim(), widths, data.num_classes).unwrap();
    cfg.set_temperature(t);
    let model = build_model(&cfg, seed).unwrap();
    let tcfg = TrainingConfig {
        epochs,
        batch_size: 64,
        decay_milestones: vec![epochs / 2, epochs * 3 / 4],
        seed,
        ..TrainingConfig::default()
    };
    let out = train_quiet(model, &splits.train, &tcfg).unwrap();
    let table =
        LogitTable::from_model(&out.model, &splits.test.features, &splits.test.labels, &splits.test.ids).unwrap();
    let acc = match anytime_eval(&table, &cost_profile_estimate(&out.model).unwrap()).unwrap() {
        EvaluationReport::Anytime { per_exit_accuracy, .. } => per_exit_accuracy,
        _ => unreachable!(),
    };
    let tail = &out.metrics[out.metrics.len().saturating_sub(100)..];
    let n = widths.len();
    let valid = (0..n)
        .map(|e| tail.iter().map(|m| m.valid_fraction[e]).sum::<f64>() / tail.len() as f64)
        .collect();
    (acc, valid)
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "both".into());
    for (name, make, widths, epochs) in [
        (
            "moons",
            Box::new(|s| two_moons(2000, 0.3, s)) as Box<dyn Fn(u64) -> Dataset>,
            vec![8, 8, 8, 8],
            30,
        ),
        (
            "digits",
            Box::new(|s| digit_grid(3000, 0.4, s)),
            vec![32, 32, 32, 32],
            30,
        ),
    ] {
        if which != "both" && which != name {
            continue;
        }
        for t in [0.0, 0.5, 1.0] {
            let mut mean_last = 0.0;
            let start = Instant::now();
            for seed in 0..5 {
                let data = make(seed);
                let (acc, valid) = run(&data, &widths, t, seed, epochs);
                mean_last += acc[acc.len() - 1] / 5.0;
                println!("{name} t={t} seed={seed} acc={acc:.4?} valid={valid:.3?}");
            }
            println!(
                "{name} t={t} mean final-exit acc {mean_last:.4} ({:.1?})",
                start.elapsed()
            );
        }
    }
}
