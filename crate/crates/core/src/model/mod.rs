//! Multi-exit backbones and the boosted ensemble over their heads.
//!
//! A model is a chain of blocks. Block `n` transforms block `n-1`'s features
//! and feeds both head `n` and block `n+1`. Head `n` produces raw logits
//! `f_n`; the ensemble logits used for loss, confidence and prediction are
//! `F_n = t_n * F_{n-1} + f_n` with `F_0 = 0`.

mod checkpoint;
mod combine;
mod layers;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};
pub use combine::{
    argmax, boosted_combine, boosted_combine_backward, confidence, cross_entropy, grad_rescale_factors, softmax,
    CombineGrads,
};
pub use layers::ConvGeometry;
pub use network::{BackwardOptions, BackwardPass, BoostedForwardState, Gradients};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_LOSS_WEIGHT: f64 = 1.0;

/// Static description of one exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitSpec {
    /// 1-based exit index.
    pub index: usize,
    /// Weight on `F_{n-1}` when forming `F_n`.
    pub temperature: f64,
    pub loss_weight: f64,
    /// Multiply-adds of block `n` plus head `n`.
    pub block_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backbone family and its per-block widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Backbone {
    /// Block n: affine + tanh. Head n: affine on block n's features.
    #[serde(rename = "multi-exit-mlp")]
    Mlp { input_dim: usize, widths: Vec<usize> },
    /// Block n: zero-padded conv + tanh. Head n: global average pool + affine.
    #[serde(rename = "multi-exit-cnn")]
    Cnn {
        input: ImageShape,
        channels: Vec<usize>,
        kernel_size: usize,
        strides: Vec<usize>,
    },
}

impl Backbone {
    pub fn num_blocks(&self) -> usize {
        match self {
            Backbone::Mlp { widths, .. } => widths.len(),
            Backbone::Cnn { channels, .. } => channels.len(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Backbone::Mlp { input_dim, .. } => *input_dim,
            Backbone::Cnn { input, .. } => input.len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Backbone::Mlp { .. } => "multi-exit-mlp",
            Backbone::Cnn { .. } => "multi-exit-cnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_exits: usize,
    pub backbone: Backbone,
    pub num_classes: usize,
    pub exit_specs: Vec<ExitSpec>,
    pub gradient_rescaling: bool,
    pub stop_gradient: bool,
    /// Control wiring: `F_n = f_n`, every head trained on its own.
    #[serde(default)]
    pub independent_heads: bool,
}

impl ModelConfig {
    /// MLP config with default temperatures and loss weights, costs derived
    /// from layer shapes, rescaling and stop-gradient on.
    pub fn mlp(input_dim: usize, widths: &[usize], num_classes: usize) -> Result<Self> {
        Self::with_backbone(
            Backbone::Mlp {
                input_dim,
                widths: widths.to_vec(),
            },
            num_classes,
        )
    }

    pub fn cnn(
        input: ImageShape,
        channels: &[usize],
        kernel_size: usize,
        strides: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        Self::with_backbone(
            Backbone::Cnn {
                input,
                channels: channels.to_vec(),
                kernel_size,
                strides: strides.to_vec(),
            },
            num_classes,
        )
    }

    pub fn with_backbone(backbone: Backbone, num_classes: usize) -> Result<Self> {
        let n = backbone.num_blocks();
        let mut cfg = ModelConfig {
            num_exits: n,
            backbone,
            num_classes,
            exit_specs: (1..=n)
                .map(|index| ExitSpec {
                    index,
                    temperature: DEFAULT_TEMPERATURE,
                    loss_weight: DEFAULT_LOSS_WEIGHT,
                    block_cost: 0.0,
                })
                .collect(),
            gradient_rescaling: true,
            stop_gradient: true,
            independent_heads: false,
        };
        cfg.validate_structure()?;
        let costs = Topology::new(&cfg)?.block_costs();
        for (spec, c) in cfg.exit_specs.iter_mut().zip(costs) {
            spec.block_cost = c as f64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_temperature(&mut self, t: f64) -> &mut Self {
        self.exit_specs.iter_mut().for_each(|s| s.temperature = t);
        self
    }

    pub fn set_temperatures(&mut self, ts: &[f64]) -> Result<&mut Self> {
        if ts.len() != self.num_exits {
            return Err(Error::config(format!(
                "{} temperatures given for {} exits",
                ts.len(),
                self.num_exits
            )));
        }
        for (s, &t) in self.exit_specs.iter_mut().zip(ts) {
            s.temperature = t;
        }
        Ok(self)
    }

    pub fn set_loss_weights(&mut self, ws: &[f64]) -> Result<&mut Self> {
        if ws.len() != self.num_exits {
            return Err(Error::config(format!(
                "{} loss weights given for {} exits",
                ws.len(),
                self.num_exits
            )));
        }
        for (s, &w) in self.exit_specs.iter_mut().zip(ws) {
            s.loss_weight = w;
        }
        Ok(self)
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.exit_specs.iter().map(|s| s.temperature).collect()
    }

    pub fn loss_weights(&self) -> Vec<f64> {
        self.exit_specs.iter().map(|s| s.loss_weight).collect()
    }

    fn validate_structure(&self) -> Result<()> {
        if self.num_exits == 0 {
            return Err(Error::config("num_exits must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.backbone.num_blocks() != self.num_exits {
            return Err(Error::config(format!(
                "backbone has {} blocks but num_exits is {}",
                self.backbone.num_blocks(),
                self.num_exits
            )));
        }
        if self.exit_specs.len() != self.num_exits {
            return Err(Error::config(format!(
                "{} exit specs for {} exits",
                self.exit_specs.len(),
                self.num_exits
            )));
        }
        match &self.backbone {
            Backbone::Mlp { input_dim, widths } => {
                if *input_dim == 0 || widths.contains(&0) {
                    return Err(Error::config("mlp input_dim and widths must be positive"));
                }
            }
            Backbone::Cnn {
                input,
                channels,
                kernel_size,
                strides,
            } => {
                if input.is_empty() || channels.contains(&0) {
                    return Err(Error::config("cnn input shape and channels must be positive"));
                }
                if *kernel_size == 0 || kernel_size % 2 == 0 {
                    return Err(Error::config("cnn kernel_size must be odd"));
                }
                if strides.len() != channels.len() || strides.contains(&0) {
                    return Err(Error::config("cnn needs one positive stride per block"));
                }
            }
        }
        Ok(())
    }

    /// Checks every invariant, including exit-spec indices and costs.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for (i, s) in self.exit_specs.iter().enumerate() {
            if s.index != i + 1 {
                return Err(Error::config(format!(
                    "exit spec {} has index {}; indices must be 1..=N in order",
                    i + 1,
                    s.index
                )));
            }
            if !(s.temperature.is_finite() && s.temperature >= 0.0) {
                return Err(Error::config(format!("exit {} temperature must be >= 0", s.index)));
            }
            if !(s.loss_weight.is_finite() && s.loss_weight >= 0.0) {
                return Err(Error::config(format!("exit {} loss weight must be >= 0", s.index)));
            }
            if !(s.block_cost.is_finite() && s.block_cost > 0.0) {
                return Err(Error::config(format!("exit {} block cost must be > 0", s.index)));
            }
        }
        Topology::new(self).map(|_| ())
    }
}

/// Whether a tensor belongs to a block's backbone layer or to its head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Block,
    Head,
}

/// A named parameter tensor. `exit` is the 1-based block index that owns it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub key: String,
    pub exit: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum LayerKind {
    Dense { inp: usize, out: usize },
    Conv(ConvGeometry),
}

/// Parameter indices and shapes for one block and its head.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayout {
    pub layer: LayerKind,
    pub layer_w: usize,
    pub layer_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub head_in: usize,
    /// `(channels, positions)` when the head averages a feature map first.
    pub pool: Option<(usize, usize)>,
}

/// Shape-level description derived from a config.
pub(crate) struct Topology {
    pub blocks: Vec<BlockLayout>,
    pub classes: usize,
}

impl Topology {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.num_exits);
        let tensor_base = |n: usize| 4 * n;
        match &cfg.backbone {
            Backbone::Mlp { input_dim, widths } => {
                let mut inp = *input_dim;
                for (n, &w) in widths.iter().enumerate() {
                    let b = tensor_base(n);
                    blocks.push(BlockLayout {
                        layer: LayerKind::Dense { inp, out: w },
                        layer_w: b,
                        layer_b: b + 1,
                        head_w: b + 2,
                        head_b: b + 3,
                        head_in: w,
                        pool: None,
                    });
                    inp = w;
                }
            }
            Backbone::Cnn {
                input,
                channels,
                kernel_size,
                strides,
            } => {
                let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
                for (n, (&oc, &s)) in channels.iter().zip(strides).enumerate() {
                    let geom = ConvGeometry {
                        in_channels: c,
                        in_height: h,
                        in_width: w,
                        out_channels: oc,
                        kernel: *kernel_size,
                        stride: s,
                        padding: kernel_size / 2,
                    };
                    if h + 2 * geom.padding < geom.kernel || w + 2 * geom.padding < geom.kernel {
                        return Err(Error::config(format!("cnn block {} has an empty output", n + 1)));
                    }
                    let b = tensor_base(n);
                    blocks.push(BlockLayout {
                        layer: LayerKind::Conv(geom),
                        layer_w: b,
                        layer_b: b + 1,
                        head_w: b + 2,
                        head_b: b + 3,
                        head_in: oc,
                        pool: Some((oc, geom.out_positions())),
                    });
                    (c, h, w) = (oc, geom.out_height(), geom.out_width());
                }
            }
        }
        Ok(Topology {
            blocks,
            classes: cfg.num_classes,
        })
    }

    /// Per-block multiply-adds: backbone layer plus head affine.
    pub fn block_costs(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| {
                let layer = match &b.layer {
                    LayerKind::Dense { inp, out } => inp * out,
                    LayerKind::Conv(g) => g.mul_adds(),
                };
                layer + b.head_in * self.classes
            })
            .collect()
    }
}

/// Parameters of a built model together with its config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Tensor>,
    pub(crate) blocks: Vec<BlockLayout>,
}

/// Builds a model with LeCun-normal weights and zero biases, deterministic in `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let topo = Topology::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(4 * config.num_exits);
    for (n, b) in topo.blocks.iter().enumerate() {
        let exit = n + 1;
        let (w_shape, fan_in, out) = match &b.layer {
            LayerKind::Dense { inp, out } => (vec![*out, *inp], *inp, *out),
            LayerKind::Conv(g) => (
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
                g.kernel_volume(),
                g.out_channels,
            ),
        };
        params.push(normal_tensor(
            format!("block_{exit}/weight"),
            exit,
            ParamRole::Block,
            w_shape,
            fan_in,
            &mut rng,
        ));
        params.push(zero_tensor(
            format!("block_{exit}/bias"),
            exit,
            ParamRole::Block,
            vec![out],
        ));
        params.push(normal_tensor(
            format!("head_{exit}/weight"),
            exit,
            ParamRole::Head,
            vec![topo.classes, b.head_in],
            b.head_in,
            &mut rng,
        ));
        params.push(zero_tensor(
            format!("head_{exit}/bias"),
            exit,
            ParamRole::Head,
            vec![topo.classes],
        ));
    }
    Ok(ModelState {
        config: config.clone(),
        params,
        blocks: topo.blocks,
    })
}

fn normal_tensor(
    key: String,
    exit: usize,
    role: ParamRole,
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let len = shape.iter().product();
    let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor {
        key,
        exit,
        role,
        shape,
        data: (0..len).map(|_| dist.sample(rng)).collect(),
    }
}

fn zero_tensor(key: String, exit: usize, role: ParamRole, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor {
        key,
        exit,
        role,
        shape,
        data: vec![0.0; len],
    }
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_exits(&self) -> usize {
        self.config.num_exits
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.config.backbone.input_len()
    }

    /// Length of block `exit`'s output feature vector (1-based).
    pub fn feature_len(&self, exit: usize) -> usize {
        match &self.blocks[exit - 1].layer {
            LayerKind::Dense { out, .. } => *out,
            LayerKind::Conv(g) => g.output_len(),
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn param(&self, key: &str) -> Option<&Tensor> {
        self.params.iter().find(|t| t.key == key)
    }

    /// Tensors making up `θ_n`: block `exit`'s layer and head.
    pub fn block_params(&self, exit: usize) -> impl Iterator<Item = &Tensor> {
        self.params.iter().filter(move |t| t.exit == exit)
    }

    /// Per-block multiply-adds from layer shapes.
    pub fn block_mul_adds(&self) -> Vec<usize> {
        Topology {
            blocks: self.blocks.clone(),
            classes: self.config.num_classes,
        }
        .block_costs()
    }

    /// Changes combine-rule / gradient flags without touching parameters.
    pub fn set_gradient_rescaling(&mut self, on: bool) {
        self.config.gradient_rescaling = on;
    }

    pub fn set_stop_gradient(&mut self, on: bool) {
        self.config.stop_gradient = on;
    }

    pub fn set_independent_heads(&mut self, on: bool) {
        self.config.independent_heads = on;
    }

    pub fn set_temperatures(&mut self, ts: &[f64]) -> Result<()> {
        self.config.set_temperatures(ts).map(|_| ())
    }

    /// Swaps in a different config with an identical parameter layout.
    pub fn replace_config(&mut self, config: ModelConfig) -> Result<()> {
        config.validate()?;
        let topo = Topology::new(&config)?;
        if topo.blocks != self.blocks {
            return Err(Error::config("new config changes the parameter layout"));
        }
        self.config = config;
        Ok(())
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = build_model(&config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::config("tensor count does not match config"));
        }
        for (a, b) in template.params.iter().zip(&params) {
            if a.key != b.key || a.shape != b.shape || b.data.len() != a.data.len() {
                return Err(Error::config(format!("tensor {} does not match config", b.key)));
            }
        }
        Ok(ModelState {
            config,
            params,
            blocks: template.blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_exit_model() {
        let cfg = ModelConfig::mlp(2, &[4], 2).unwrap();
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.num_exits(), 1);
        assert_eq!(m.params().len(), 4);
        assert_eq!(m.block_params(1).count(), 4);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::mlp(3, &[5, 4, 3], 3).unwrap();
        assert_eq!(build_model(&cfg, 11).unwrap(), build_model(&cfg, 11).unwrap());
        assert_ne!(build_model(&cfg, 11).unwrap(), build_model(&cfg, 12).unwrap());
    }

    #[test]
    fn parameters_partition_by_block() {
        let cfg = ModelConfig::mlp(3, &[5, 4, 3], 3).unwrap();
        let m = build_model(&cfg, 1).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0;
        for exit in 1..=3 {
            for t in m.block_params(exit) {
                assert!(seen.insert(t.key.clone()), "{} listed twice", t.key);
                let prefix = match t.role {
                    ParamRole::Block => format!("block_{exit}/"),
                    ParamRole::Head => format!("head_{exit}/"),
                };
                assert!(t.key.starts_with(&prefix));
                total += t.data.len();
            }
        }
        assert_eq!(seen.len(), m.params().len());
        assert_eq!(total, m.num_parameters());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig::mlp(2, &[], 2).is_err());
        assert!(ModelConfig::mlp(2, &[3], 1).is_err());
        let mut cfg = ModelConfig::mlp(2, &[3, 3], 2).unwrap();
        cfg.exit_specs.pop();
        assert!(build_model(&cfg, 0).is_err());
        let mut cfg = ModelConfig::mlp(2, &[3, 3], 2).unwrap();
        cfg.exit_specs[1].index = 1;
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::mlp(2, &[3, 3], 2).unwrap();
        cfg.exit_specs[0].block_cost = 0.0;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::cnn(
            ImageShape {
                channels: 1,
                height: 8,
                width: 8
            },
            &[4],
            2,
            &[1],
            3
        )
        .is_err());
    }

    #[test]
    fn defaults_and_derived_costs() {
        let cfg = ModelConfig::mlp(10, &[5, 3], 2).unwrap();
        assert!(cfg
            .exit_specs
            .iter()
            .all(|s| s.temperature == 0.5 && s.loss_weight == 1.0));
        let costs: Vec<f64> = cfg.exit_specs.iter().map(|s| s.block_cost).collect();
        assert_eq!(costs, vec![60.0, 21.0]);
    }

    #[test]
    fn cnn_topology() {
        let shape = ImageShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let cfg = ModelConfig::cnn(shape, &[4, 6], 3, &[1, 2], 10).unwrap();
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.param("block_2/weight").unwrap().shape, vec![6, 4, 3, 3]);
        assert_eq!(m.feature_len(2), 6 * 16);
        // 64 positions * 9 * 4 + 4*10, 16 positions * 36 * 6 + 6*10
        assert_eq!(m.block_mul_adds(), vec![64 * 9 * 4 + 40, 16 * 36 * 6 + 60]);
    }
}
