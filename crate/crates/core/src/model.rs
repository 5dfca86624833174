//! The full capsule classifier: residual backbone, primary capsules, two
//! convolutional capsule layers, and the routed class capsule layer.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::capsule::{
    add_coordinates, conv_capsule_votes, primary_capsules, transform_votes, PoseField,
    TransformBank, VoteField,
};
use crate::loss::MarginSchedule;
use crate::rng::Rng;
use crate::routing::{
    activation_maps_from, dynamic_routing_baseline_full, idr, route_conv_baseline,
    route_conv_idr, HeadActivationMap, RoutingGrad, RoutingMap,
};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite values after layer {layer}")]
    NonFinite { layer: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which routing algorithm links capsule layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingScheme {
    /// Inverted dynamic routing (locations within a head compete).
    Idr,
    /// Bottom-up dynamic routing (children spread over parents).
    Baseline,
}

impl RoutingScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoutingScheme::Idr => "idr",
            RoutingScheme::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "idr" => Some(RoutingScheme::Idr),
            "baseline" => Some(RoutingScheme::Baseline),
            _ => None,
        }
    }
}

/// Every architecture and training hyperparameter. Defaults follow the
/// full-size configuration; `desk()` is the small preset used by the
/// synthetic end-to-end experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub backbone_channels: usize,
    pub projection_channels: usize,
    pub primary_heads: usize,
    pub conv1_heads: usize,
    pub conv2_heads: usize,
    pub pose_dim: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub routing_iters: usize,
    pub classes: usize,
    pub crop_threshold: f64,
    pub drop_threshold: f64,
    pub margin: MarginSchedule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub desk_scale: bool,
    pub routing: RoutingScheme,
    pub stop_gradient_routing: bool,
    pub coordinate_addition: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size configuration: 448 input, 1024-channel backbone, 512
    /// projection channels, 32 heads per capsule layer, 4x4 poses.
    pub fn paper() -> Self {
        ModelConfig {
            input_size: 448,
            backbone_channels: 1024,
            projection_channels: 512,
            primary_heads: 32,
            conv1_heads: 32,
            conv2_heads: 32,
            pose_dim: 16,
            kernel_size: 3,
            stride: 1,
            routing_iters: 3,
            classes: 2,
            crop_threshold: 0.5,
            drop_threshold: 0.3,
            margin: MarginSchedule::default(),
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            seed: 17,
            desk_scale: false,
            routing: RoutingScheme::Idr,
            stop_gradient_routing: true,
            coordinate_addition: true,
        }
    }

    /// Desk-scale preset: 96 input, 64-channel backbone, 8 heads.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 96,
            backbone_channels: 64,
            projection_channels: 64,
            primary_heads: 8,
            conv1_heads: 8,
            conv2_heads: 8,
            desk_scale: true,
            ..Self::paper()
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 24,
            backbone_channels: 16,
            projection_channels: 8,
            primary_heads: 2,
            conv1_heads: 2,
            conv2_heads: 2,
            pose_dim: 4,
            kernel_size: 1,
            batch_size: 2,
            desk_scale: false,
            ..Self::paper()
        }
    }

    /// Backbone channel progression: stem plus three doubling stages ending
    /// at `backbone_channels`.
    pub fn backbone_widths(&self) -> [usize; 4] {
        let bb = self.backbone_channels;
        [bb / 8, bb / 4, bb / 2, bb]
    }

    /// Walk the spatial arithmetic from input to the final capsule grid,
    /// rejecting configs whose chain collapses.
    pub fn shape_chain(&self) -> Result<ShapeChain, ModelError> {
        if self.backbone_channels % 8 != 0 || self.backbone_channels < 8 {
            return Err(ModelError::Config(format!(
                "backbone_channels {} must be a positive multiple of 8",
                self.backbone_channels
            )));
        }
        let root = (self.pose_dim as f64).sqrt().round() as usize;
        if root * root != self.pose_dim || self.pose_dim < 4 {
            return Err(ModelError::Config(format!(
                "pose_dim {} must be a perfect square >= 4",
                self.pose_dim
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config("need at least 2 classes".to_string()));
        }
        if self.kernel_size == 0 || self.stride == 0 || self.routing_iters == 0 {
            return Err(ModelError::Config(
                "kernel_size, stride, and routing_iters must be positive".to_string(),
            ));
        }
        for (name, v) in [
            ("crop_threshold", self.crop_threshold),
            ("drop_threshold", self.drop_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        let halve = |n: usize| (n - 1) / 2 + 1; // 3x3 stride-2 pad-1 (and 1x1 s2 p0)
        if self.input_size < 16 {
            return Err(ModelError::Config(format!(
                "input_size {} too small",
                self.input_size
            )));
        }
        let stem = halve(self.input_size);
        let s1 = halve(stem);
        let s2 = halve(s1);
        let s3 = halve(s2);
        let caps = |g: usize| -> Option<usize> {
            if g >= self.kernel_size {
                Some((g - self.kernel_size) / self.stride + 1)
            } else {
                None
            }
        };
        let chain_err = |grid: usize, layer: &str| {
            ModelError::Config(format!(
                "capsule grid collapses at {layer}: input {} -> stem {stem} -> stages \
                 {s1}/{s2}/{s3} -> grid {grid} with kernel {}",
                self.input_size, self.kernel_size
            ))
        };
        let c1 = caps(s3).ok_or_else(|| chain_err(s3, "conv capsules 1"))?;
        let c2 = caps(c1).ok_or_else(|| chain_err(c1, "conv capsules 2"))?;
        if c2 == 0 {
            return Err(chain_err(c1, "conv capsules 2"));
        }
        Ok(ShapeChain {
            input: self.input_size,
            stem,
            stages: [s1, s2, s3],
            primary_grid: s3,
            conv1_grid: c1,
            conv2_grid: c2,
        })
    }

    /// Shape of the final-layer head activation maps
    /// `[conv2_heads, classes, g, g]`.
    pub fn ham_shape(&self) -> Result<[usize; 4], ModelError> {
        let chain = self.shape_chain()?;
        Ok([
            self.conv2_heads,
            self.classes,
            chain.conv2_grid,
            chain.conv2_grid,
        ])
    }
}

/// Spatial extents from input to the final capsule grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeChain {
    pub input: usize,
    pub stem: usize,
    pub stages: [usize; 3],
    pub primary_grid: usize,
    pub conv1_grid: usize,
    pub conv2_grid: usize,
}

impl std::fmt::Display for ShapeChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} -> stem {} -> stages {}/{}/{} -> capsule grids {} -> {} -> {}",
            self.input,
            self.stem,
            self.stages[0],
            self.stages[1],
            self.stages[2],
            self.primary_grid,
            self.conv1_grid,
            self.conv2_grid
        )
    }
}

/// Named trainable parameter.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnStats<F: Scalar> {
    pub name: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Parameter leaves bound for one training step; gradients accumulate here
/// across however many forward passes share the step.
pub struct Leaves<F: Scalar> {
    pub tensors: Vec<Tensor<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub struct ForwardOutput<F: Scalar> {
    /// Frobenius-norm activations of the class capsules, `[N, classes]`.
    pub activations: Tensor<F>,
    /// Squashed class poses `[N, classes, pose_dim]`.
    pub class_poses: Tensor<F>,
    /// Final-layer head activation maps `[N, heads, classes, g, g]`.
    pub hams: HeadActivationMap<F>,
    pub routing: RoutingMap<F>,
}

struct BnUpdate<F: Scalar> {
    index: usize,
    mean: Vec<F>,
    var: Vec<F>,
}

pub struct Decaps<F: Scalar> {
    pub config: ModelConfig,
    params: Vec<Param<F>>,
    bn_running: Vec<BnStats<F>>,
    forward_passes: AtomicU64,
}

fn glorot<F: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Vec<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| F::cast_from(rng.uniform(-bound, bound))).collect()
}

impl<F: Scalar> Decaps<F> {
    /// Build a model with freshly initialized weights drawn from the
    /// config seed.
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        let chain = config.shape_chain()?;
        let _ = chain;
        let widths = config.backbone_widths();
        let mut rng = Rng::seed_from(config.seed);
        let mut params: Vec<Param<F>> = Vec::new();
        let mut bn_running: Vec<BnStats<F>> = Vec::new();

        let push_conv = |params: &mut Vec<Param<F>>,
                             rng: &mut Rng,
                             name: &str,
                             co: usize,
                             ci: usize,
                             k: usize| {
            let shape = vec![co, ci, k, k];
            let data = glorot(rng, &shape, ci * k * k, co * k * k);
            params.push(Param {
                name: name.to_string(),
                shape,
                data,
            });
        };
        let push_bn = |params: &mut Vec<Param<F>>,
                       bn_running: &mut Vec<BnStats<F>>,
                       name: &str,
                       c: usize| {
            params.push(Param {
                name: format!("{name}.gamma"),
                shape: vec![c],
                data: vec![F::one(); c],
            });
            params.push(Param {
                name: format!("{name}.beta"),
                shape: vec![c],
                data: vec![F::zero(); c],
            });
            bn_running.push(BnStats {
                name: name.to_string(),
                mean: vec![F::zero(); c],
                var: vec![F::one(); c],
            });
        };

        push_conv(&mut params, &mut rng, "stem.conv", widths[0], 1, 3);
        push_bn(&mut params, &mut bn_running, "stem.bn", widths[0]);
        for (i, (&cin, &cout)) in widths.iter().zip(&widths[1..]).enumerate() {
            let stage = format!("stage{}", i + 1);
            push_conv(&mut params, &mut rng, &format!("{stage}.conv1"), cout, cin, 3);
            push_bn(&mut params, &mut bn_running, &format!("{stage}.bn1"), cout);
            push_conv(&mut params, &mut rng, &format!("{stage}.conv2"), cout, cout, 3);
            push_bn(&mut params, &mut bn_running, &format!("{stage}.bn2"), cout);
            push_conv(&mut params, &mut rng, &format!("{stage}.shortcut"), cout, cin, 1);
            push_bn(&mut params, &mut bn_running, &format!("{stage}.bn_sc"), cout);
        }
        let (bb, a) = (config.backbone_channels, config.projection_channels);
        push_conv(&mut params, &mut rng, "proj.weight", a, bb, 1);
        params.push(Param {
            name: "proj.bias".to_string(),
            shape: vec![a],
            data: vec![F::zero(); a],
        });
        let (b_heads, d) = (config.primary_heads, config.pose_dim);
        params.push(Param {
            name: "primary.proj".to_string(),
            shape: vec![a, b_heads * d],
            data: glorot(&mut rng, &[a, b_heads * d], a, b_heads * d),
        });
        let k = config.kernel_size;
        let caps = [
            ("caps1", config.primary_heads, config.conv1_heads),
            ("caps2", config.conv1_heads, config.conv2_heads),
        ];
        for (name, heads, parents) in caps {
            params.push(Param {
                name: format!("{name}.kernel"),
                shape: vec![heads, k, k],
                data: glorot(&mut rng, &[heads, k, k], k * k, 1),
            });
            params.push(Param {
                name: format!("{name}.transform"),
                shape: vec![heads, parents, d, d],
                data: glorot(&mut rng, &[heads, parents, d, d], d, d),
            });
        }
        params.push(Param {
            name: "class.transform".to_string(),
            shape: vec![config.conv2_heads, config.classes, d, d],
            data: glorot(
                &mut rng,
                &[config.conv2_heads, config.classes, d, d],
                d,
                d,
            ),
        });

        Ok(Decaps {
            config,
            params,
            bn_running,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats<F>] {
        &self.bn_running
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats<F>] {
        &mut self.bn_running
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total forward passes since construction (test instrumentation).
    pub fn forward_count(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Bind trainable leaves for one step. Shared across the step's passes
    /// so gradients accumulate.
    pub fn bind(&self) -> Result<Leaves<F>, ModelError> {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::param(p.shape.clone(), p.data.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Leaves { tensors })
    }

    fn bind_const(&self) -> Result<Leaves<F>, ModelError> {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::from_vec(p.shape.clone(), p.data.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Leaves { tensors })
    }

    /// Training forward: batch statistics in batch norm, running stats
    /// updated.
    pub fn forward_train(
        &mut self,
        leaves: &Leaves<F>,
        images: &Tensor<F>,
    ) -> Result<ForwardOutput<F>, ModelError> {
        let (out, updates) = forward_impl(
            &self.config,
            &self.params,
            &leaves.tensors,
            &self.bn_running,
            images,
            Phase::Train,
        )?;
        let mom = F::cast_from(BN_MOMENTUM);
        let keep = F::one() - mom;
        for u in updates {
            let stats = &mut self.bn_running[u.index];
            for (r, b) in stats.mean.iter_mut().zip(&u.mean) {
                *r = keep * *r + mom * *b;
            }
            for (r, b) in stats.var.iter_mut().zip(&u.var) {
                *r = keep * *r + mom * *b;
            }
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Training-mode forward without touching running statistics
    /// (pure function of weights and input; used by gradient checks).
    pub fn forward_train_frozen(
        &self,
        leaves: &Leaves<F>,
        images: &Tensor<F>,
    ) -> Result<ForwardOutput<F>, ModelError> {
        let (out, _) = forward_impl(
            &self.config,
            &self.params,
            &leaves.tensors,
            &self.bn_running,
            images,
            Phase::Train,
        )?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Evaluation forward: running statistics, no gradient graph.
    pub fn forward_eval(&self, images: &Tensor<F>) -> Result<ForwardOutput<F>, ModelError> {
        let leaves = self.bind_const()?;
        let (out, _) = forward_impl(
            &self.config,
            &self.params,
            &leaves.tensors,
            &self.bn_running,
            images,
            Phase::Eval,
        )?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }
}

fn chk<F: Scalar>(t: &Tensor<F>, layer: &str) -> Result<(), ModelError> {
    t.check_finite(layer).map_err(|_| ModelError::NonFinite {
        layer: layer.to_string(),
    })
}

struct LayerCtx<'a, F: Scalar> {
    params: &'a [Param<F>],
    leaves: &'a [Tensor<F>],
    running: &'a [BnStats<F>],
    phase: Phase,
    updates: Vec<BnUpdate<F>>,
}

impl<'a, F: Scalar> LayerCtx<'a, F> {
    fn leaf(&self, name: &str) -> Result<&'a Tensor<F>, ModelError> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.leaves[i])
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }

    fn bn(&mut self, name: &str, x: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let gamma = self.leaf(&format!("{name}.gamma"))?;
        let beta = self.leaf(&format!("{name}.beta"))?;
        match self.phase {
            Phase::Train => {
                let (y, mean, var) = x.batchnorm_train(gamma, beta, BN_EPS)?;
                let index = self
                    .running
                    .iter()
                    .position(|s| s.name == name)
                    .ok_or_else(|| ModelError::Config(format!("missing bn stats {name}")))?;
                self.updates.push(BnUpdate { index, mean, var });
                Ok(y)
            }
            Phase::Eval => {
                let stats = self
                    .running
                    .iter()
                    .find(|s| s.name == name)
                    .ok_or_else(|| ModelError::Config(format!("missing bn stats {name}")))?;
                let c = stats.mean.len();
                let eps = F::cast_from(BN_EPS);
                let gd = gamma.data();
                let bd = beta.data();
                let mut scale = vec![F::zero(); c];
                let mut bias = vec![F::zero(); c];
                for i in 0..c {
                    let inv = F::one() / (stats.var[i] + eps).sqrt();
                    scale[i] = gd[i] * inv;
                    bias[i] = bd[i] - stats.mean[i] * scale[i];
                }
                let scale = Tensor::from_vec(vec![1, c, 1, 1], scale)?;
                let bias = Tensor::from_vec(vec![1, c, 1, 1], bias)?;
                Ok(x.mul(&scale)?.add(&bias)?)
            }
        }
    }
}

fn forward_impl<F: Scalar>(
    config: &ModelConfig,
    params: &[Param<F>],
    leaves: &[Tensor<F>],
    running: &[BnStats<F>],
    images: &Tensor<F>,
    phase: Phase,
) -> Result<(ForwardOutput<F>, Vec<BnUpdate<F>>), ModelError> {
    if images.rank() != 4
        || images.shape()[1] != 1
        || images.shape()[2] != config.input_size
        || images.shape()[3] != config.input_size
    {
        return Err(ModelError::Config(format!(
            "input batch {:?} does not match configured size [N, 1, {}, {}]",
            images.shape(),
            config.input_size,
            config.input_size
        )));
    }
    let mut ctx = LayerCtx {
        params,
        leaves,
        running,
        phase,
        updates: Vec::new(),
    };

    let mut x = images.conv2d(ctx.leaf("stem.conv")?, 2, 1)?;
    x = ctx.bn("stem.bn", &x)?.relu()?;
    chk(&x, "stem")?;

    for i in 1..=3 {
        let stage = format!("stage{i}");
        let mut y = x.conv2d(ctx.leaf(&format!("{stage}.conv1"))?, 2, 1)?;
        y = ctx.bn(&format!("{stage}.bn1"), &y)?.relu()?;
        y = y.conv2d(ctx.leaf(&format!("{stage}.conv2"))?, 1, 1)?;
        y = ctx.bn(&format!("{stage}.bn2"), &y)?;
        let mut sc = x.conv2d(ctx.leaf(&format!("{stage}.shortcut"))?, 2, 0)?;
        sc = ctx.bn(&format!("{stage}.bn_sc"), &sc)?;
        x = y.add(&sc)?.relu()?;
        chk(&x, &stage)?;
    }

    let a = config.projection_channels;
    let bias = ctx.leaf("proj.bias")?.reshape(vec![1, a, 1, 1])?;
    let feats = x
        .conv2d(ctx.leaf("proj.weight")?, 1, 0)?
        .add(&bias)?
        .relu()?;
    chk(&feats, "projection")?;

    let primary = primary_capsules(
        &feats,
        ctx.leaf("primary.proj")?,
        config.primary_heads,
        config.pose_dim,
    )?;
    chk(&primary.poses, "primary_capsules")?;

    let route_conv = |votes: &VoteField<F>| -> Result<PoseField<F>, ModelError> {
        Ok(match config.routing {
            RoutingScheme::Idr => route_conv_idr(votes)?,
            RoutingScheme::Baseline => route_conv_baseline(votes, config.routing_iters)?,
        })
    };

    let caps1_bank = TransformBank::new(ctx.leaf("caps1.transform")?.clone())?;
    let votes1 = conv_capsule_votes(
        &primary,
        ctx.leaf("caps1.kernel")?,
        &caps1_bank,
        config.stride,
    )?;
    let p1 = route_conv(&votes1)?;
    chk(&p1.poses, "conv_caps1")?;

    let caps2_bank = TransformBank::new(ctx.leaf("caps2.transform")?.clone())?;
    let votes2 = conv_capsule_votes(&p1, ctx.leaf("caps2.kernel")?, &caps2_bank, config.stride)?;
    let p2 = route_conv(&votes2)?;
    chk(&p2.poses, "conv_caps2")?;

    let class_bank = TransformBank::new(ctx.leaf("class.transform")?.clone())?;
    let mut class_votes = transform_votes(&p2, &class_bank)?;
    if config.coordinate_addition {
        class_votes = add_coordinates(&class_votes)?;
    }
    let grad_mode = if config.stop_gradient_routing {
        RoutingGrad::StopGradient
    } else {
        RoutingGrad::Differentiate
    };
    let (class_poses, hams, routing) = match config.routing {
        RoutingScheme::Idr => {
            let out = idr(&class_votes, config.routing_iters, grad_mode)?;
            (out.parent_poses, out.ham, out.routing)
        }
        RoutingScheme::Baseline => {
            let out = dynamic_routing_baseline_full(&class_votes, config.routing_iters)?;
            let hams = activation_maps_from(&class_votes, &out.routing)?;
            (out.parent_poses, hams, out.routing)
        }
    };
    chk(&class_poses, "class_capsules")?;
    let activations = class_poses.norm(&[2], false)?;

    Ok((
        ForwardOutput {
            activations,
            class_poses,
            hams,
            routing,
        },
        ctx.updates,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shape_chain() {
        let cfg = ModelConfig::paper();
        let chain = cfg.shape_chain().unwrap();
        assert_eq!(chain.stem, 224);
        assert_eq!(chain.stages, [112, 56, 28]);
        assert_eq!(chain.primary_grid, 28);
        assert_eq!(chain.conv1_grid, 26);
        assert_eq!(chain.conv2_grid, 24);
        assert_eq!(cfg.ham_shape().unwrap(), [32, 2, 24, 24]);
    }

    #[test]
    fn desk_shape_chain() {
        let cfg = ModelConfig::desk();
        let chain = cfg.shape_chain().unwrap();
        assert_eq!(chain.stages, [24, 12, 6]);
        assert_eq!(chain.conv1_grid, 4);
        assert_eq!(chain.conv2_grid, 2);
        assert_eq!(cfg.ham_shape().unwrap(), [8, 2, 2, 2]);
    }

    #[test]
    fn collapsed_chain_reports_extents() {
        let cfg = ModelConfig {
            input_size: 16,
            ..ModelConfig::desk()
        };
        match cfg.shape_chain() {
            Err(ModelError::Config(msg)) => {
                assert!(msg.contains("16"), "{msg}");
                assert!(msg.contains("stem"), "{msg}");
            }
            other => panic!("expected config error, got {:?}", other.map(|c| c.conv2_grid)),
        }
    }

    #[test]
    fn tiny_model_forward_shapes() {
        let cfg = ModelConfig::tiny();
        let chain = cfg.shape_chain().unwrap();
        assert_eq!(chain.stages, [6, 3, 2]);
        assert_eq!(chain.conv2_grid, 2);
        let mut model = Decaps::<f64>::build(cfg.clone()).unwrap();
        let leaves = model.bind().unwrap();
        let images = Tensor::<f64>::zeros(vec![2, 1, 24, 24]);
        let out = model.forward_train(&leaves, &images).unwrap();
        assert_eq!(out.activations.shape(), &[2, 2]);
        assert_eq!(out.class_poses.shape(), &[2, 2, 4]);
        assert_eq!(out.hams.maps.shape(), &[2, 2, 2, 2, 2]);
    }

    #[test]
    fn zero_weight_model_gives_zero_activations() {
        // Linearity: zero weights -> zero votes -> zero activations.
        // Coordinate addition injects constant grid coordinates into the
        // class votes, so the exact-zero claim is checked with it off.
        let cfg = ModelConfig {
            coordinate_addition: false,
            ..ModelConfig::tiny()
        };
        let mut model = Decaps::<f64>::build(cfg).unwrap();
        for p in model.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = crate::rng::Rng::seed_from(3);
        let data: Vec<f64> = (0..2 * 24 * 24).map(|_| rng.next_f64()).collect();
        let images = Tensor::<f64>::from_vec(vec![2, 1, 24, 24], data).unwrap();
        let out = model.forward_eval(&images).unwrap();
        for &a in out.activations.data() {
            assert!(a.abs() < 1e-9);
        }
        // The class votes themselves are zero either way.
        assert!(out.class_poses.data().iter().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn fixed_seed_forward_is_bitwise_reproducible() {
        let cfg = ModelConfig::tiny();
        let model1 = Decaps::<f64>::build(cfg.clone()).unwrap();
        let model2 = Decaps::<f64>::build(cfg).unwrap();
        let mut rng = crate::rng::Rng::seed_from(5);
        let data: Vec<f64> = (0..24 * 24).map(|_| rng.next_f64()).collect();
        let images = Tensor::<f64>::from_vec(vec![1, 1, 24, 24], data).unwrap();
        let a = model1.forward_eval(&images).unwrap();
        let b = model2.forward_eval(&images).unwrap();
        assert_eq!(a.activations.data(), b.activations.data());
        assert_eq!(a.class_poses.data(), b.class_poses.data());
    }

    #[test]
    fn eval_batch_independence_is_exact() {
        let cfg = ModelConfig::tiny();
        let model = Decaps::<f64>::build(cfg).unwrap();
        let mut rng = crate::rng::Rng::seed_from(7);
        let img1: Vec<f64> = (0..24 * 24).map(|_| rng.next_f64()).collect();
        let img2: Vec<f64> = (0..24 * 24).map(|_| rng.next_f64()).collect();
        let mut both = img1.clone();
        both.extend_from_slice(&img2);
        let batch = Tensor::<f64>::from_vec(vec![2, 1, 24, 24], both).unwrap();
        let single1 = Tensor::<f64>::from_vec(vec![1, 1, 24, 24], img1).unwrap();
        let single2 = Tensor::<f64>::from_vec(vec![1, 1, 24, 24], img2).unwrap();
        let joint = model.forward_eval(&batch).unwrap();
        let a = model.forward_eval(&single1).unwrap();
        let b = model.forward_eval(&single2).unwrap();
        let joint_acts = joint.activations.data();
        assert_eq!(&joint_acts[..2], a.activations.data());
        assert_eq!(&joint_acts[2..], b.activations.data());
    }

    #[test]
    fn forward_counter_counts_passes() {
        let cfg = ModelConfig::tiny();
        let mut model = Decaps::<f64>::build(cfg).unwrap();
        let images = Tensor::<f64>::zeros(vec![1, 1, 24, 24]);
        assert_eq!(model.forward_count(), 0);
        let leaves = model.bind().unwrap();
        model.forward_train(&leaves, &images).unwrap();
        model.forward_eval(&images).unwrap();
        assert_eq!(model.forward_count(), 2);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let cfg = ModelConfig::tiny();
        let model = Decaps::<f64>::build(cfg).unwrap();
        let images = Tensor::<f64>::zeros(vec![1, 1, 32, 32]);
        assert!(model.forward_eval(&images).is_err());
    }

    #[test]
    fn baseline_routing_forward_works() {
        let cfg = ModelConfig {
            routing: RoutingScheme::Baseline,
            ..ModelConfig::tiny()
        };
        let mut model = Decaps::<f64>::build(cfg).unwrap();
        let leaves = model.bind().unwrap();
        let images = Tensor::<f64>::full(vec![1, 1, 24, 24], 0.5);
        let out = model.forward_train(&leaves, &images).unwrap();
        assert_eq!(out.hams.maps.shape(), &[1, 2, 2, 2, 2]);
        assert!(out.activations.data().iter().all(|a| a.is_finite()));
    }
}
