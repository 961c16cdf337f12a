use boostnet::data::digit_grid;
use boostnet::model::{build_model, BackwardOptions, ImageShape, ModelConfig, ParamRole};
use boostnet::trainer::{finite_diff_gradient_check, GradCheckOptions};

fn digits_batch(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = digit_grid(n, 0.3, 12);
    (d.features, d.labels)
}

#[test]
fn cnn_gradcheck_with_rescaling() {
    let shape = ImageShape {
        channels: 1,
        height: 8,
        width: 8,
    };
    let cfg = ModelConfig::cnn(shape, &[3, 4, 4], 3, &[1, 2, 1], 10).unwrap();
    let model = build_model(&cfg, 2).unwrap();
    let (x, y) = digits_batch(6);
    let r = finite_diff_gradient_check(&model, &x, &y, &GradCheckOptions::default()).unwrap();
    assert!(r.passes(1e-5), "{r:?}");
    assert!(r.rescaled_oracle);
}

#[test]
fn cnn_gradcheck_trainable_prev() {
    let shape = ImageShape {
        channels: 1,
        height: 8,
        width: 8,
    };
    let mut cfg = ModelConfig::cnn(shape, &[2, 3], 3, &[2, 1], 10).unwrap();
    cfg.stop_gradient = false;
    cfg.gradient_rescaling = false;
    let model = build_model(&cfg, 5).unwrap();
    let (x, y) = digits_batch(5);
    let r = finite_diff_gradient_check(&model, &x, &y, &GradCheckOptions::default()).unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn mlp_gradcheck_with_weights_and_temperatures() {
    let mut cfg = ModelConfig::mlp(64, &[12, 10, 8], 10).unwrap();
    cfg.set_temperatures(&[0.5, 0.3, 0.9]).unwrap();
    cfg.set_loss_weights(&[0.5, 1.0, 2.0]).unwrap();
    let model = build_model(&cfg, 7).unwrap();
    let (x, y) = digits_batch(10);
    let r = finite_diff_gradient_check(&model, &x, &y, &GradCheckOptions::default()).unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn trainable_prev_changes_earlier_head_gradients() {
    let cfg = ModelConfig::mlp(64, &[8, 8, 8], 10).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    let (x, y) = digits_batch(8);
    let mut trainable = model.clone();
    trainable.set_stop_gradient(false);
    let a = model.backward(&x, &y, &BackwardOptions::default()).unwrap().gradients;
    let b = trainable
        .backward(&x, &y, &BackwardOptions::default())
        .unwrap()
        .gradients;
    let head1 = model
        .params()
        .iter()
        .position(|t| t.role == ParamRole::Head && t.exit == 1)
        .unwrap();
    assert_ne!(a.tensors[head1], b.tensors[head1]);
    // The deepest head sees no later exits, so it is unaffected.
    let last = model.params().iter().rposition(|t| t.role == ParamRole::Head).unwrap();
    assert_eq!(a.tensors[last], b.tensors[last]);
}
