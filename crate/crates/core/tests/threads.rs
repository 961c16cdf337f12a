//! Results must not depend on the number of worker threads.
#![cfg(feature = "parallel")]

use boostnet::data::digit_grid;
use boostnet::model::{build_model, BackwardOptions, ModelConfig};
use boostnet::trainer::{finite_diff_gradient_check, train_quiet, GradCheckOptions, TrainingConfig};

fn on_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn training_is_identical_across_thread_counts() {
    let data = digit_grid(300, 0.3, 1);
    let cfg = ModelConfig::mlp(64, &[16, 16, 16], 10).unwrap();
    let tcfg = TrainingConfig {
        epochs: 2,
        batch_size: 50,
        decay_milestones: vec![1],
        seed: 1,
        ..TrainingConfig::default()
    };
    let go = || {
        let out = train_quiet(build_model(&cfg, 1).unwrap(), &data, &tcfg).unwrap();
        (out.metrics, out.model)
    };
    let (m1, p1) = on_threads(1, go);
    let (m4, p4) = on_threads(4, go);
    assert_eq!(m1, m4);
    assert_eq!(p1.params(), p4.params());
}

#[test]
fn gradients_are_identical_across_thread_counts() {
    let data = digit_grid(77, 0.3, 2);
    let model = build_model(&ModelConfig::mlp(64, &[8, 8], 10).unwrap(), 2).unwrap();
    let grads = || {
        model
            .backward(&data.features, &data.labels, &BackwardOptions::default())
            .unwrap()
            .gradients
    };
    assert_eq!(on_threads(1, grads), on_threads(3, grads));
    let check = || {
        finite_diff_gradient_check(
            &model,
            &data.features[..5],
            &data.labels[..5],
            &GradCheckOptions::default(),
        )
        .unwrap()
    };
    assert_eq!(on_threads(1, check), on_threads(3, check));
}
