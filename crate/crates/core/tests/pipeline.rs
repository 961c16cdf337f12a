use boostnet::budget::{adjust_thresholds_non_degrading, calibrate_policy, HoldoutConfidences};
use boostnet::data::two_moons;
use boostnet::eval::{
    budgeted_batch_eval, collect_exit_gallery, cost_profile_estimate, read_logit_dump, write_logit_dump,
    EvaluationReport, LogitTable,
};
use boostnet::model::{build_model, read_checkpoint, write_checkpoint, ModelConfig};
use boostnet::trainer::{train_quiet, TrainingConfig};

fn run(seed: u64) -> Vec<(f64, f64, f64)> {
    let data = two_moons(600, 0.25, seed);
    let splits = data.split(0.2, 0.2, seed).unwrap();
    let cfg = ModelConfig::mlp(2, &[8, 8, 8], 2).unwrap();
    let tcfg = TrainingConfig {
        epochs: 8,
        batch_size: 32,
        decay_milestones: vec![6],
        seed,
        ..TrainingConfig::default()
    };
    let model = train_quiet(build_model(&cfg, seed).unwrap(), &splits.train, &tcfg)
        .unwrap()
        .model;

    // Checkpoint and logit dump round trips feed the rest of the pipeline.
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let model = read_checkpoint(buf.as_slice()).unwrap();
    let costs = cost_profile_estimate(&model).unwrap();
    let table = |d: &boostnet::data::Dataset| {
        let t = LogitTable::from_model(&model, &d.features, &d.labels, &d.ids).unwrap();
        let mut buf = Vec::new();
        write_logit_dump(&t, &mut buf).unwrap();
        let back = read_logit_dump(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        back
    };
    let holdout_table = table(&splits.holdout);
    let test_table = table(&splits.test);
    let holdout = HoldoutConfidences::from_table(&holdout_table).unwrap();

    let taus: Vec<f64> = [0.2, 0.4, 0.6, 0.8, 1.0]
        .iter()
        .map(|f| costs.costs[0] + f * (costs.total() - costs.costs[0]))
        .collect();
    let raw: Vec<_> = taus
        .iter()
        .map(|&t| calibrate_policy(t, &costs, &holdout).unwrap())
        .collect();
    let adjusted = adjust_thresholds_non_degrading(&raw, &holdout).unwrap();
    let accs: Vec<f64> = adjusted.iter().map(|p| holdout.accuracy(&p.thresholds)).collect();
    assert!(accs.windows(2).all(|w| w[0] <= w[1]));

    adjusted
        .iter()
        .map(|p| {
            let (report, traces) = budgeted_batch_eval(&test_table, p, &costs).unwrap();
            let gallery = collect_exit_gallery(&traces, None);
            assert_eq!(gallery.values().map(Vec::len).sum::<usize>(), test_table.len());
            match report {
                EvaluationReport::BudgetedBatch {
                    budget,
                    accuracy,
                    realized_avg_cost,
                    ..
                } => (budget, accuracy, realized_avg_cost),
                other => panic!("{other:?}"),
            }
        })
        .collect()
}

#[test]
fn pipeline_is_deterministic_and_sane() {
    let a = run(3);
    assert_eq!(a, run(3));
    for (budget, accuracy, cost) in &a {
        assert!(*accuracy > 0.6, "accuracy {accuracy} at budget {budget}");
        assert!(*cost > 0.0);
    }
}
