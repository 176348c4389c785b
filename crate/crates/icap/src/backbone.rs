//! Desk-scale Inception-ResNet feature extractor.
//!
//! Pipeline: stem conv + max-pool, Inception block A, a spatial reduction,
//! blocks B and C, global average pooling, then dropout. Each Inception block
//! runs parallel convolution branches of differing kernel shapes, channel-
//! concatenates them, projects with a 1×1 conv, and adds a residual shortcut.
//! The projection kernels start at zero, so at init every block is exactly
//! `relu(shortcut(x))`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ParamStore;
use crate::graph::{Graph, Padding, Value};
use crate::tensor::{Tensor, TensorError};

/// One convolution stage inside a branch: a `kh × kw` kernel producing
/// `out_channels`, same padding, stride 1, followed by relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub kh: usize,
    pub kw: usize,
    pub out_channels: usize,
}

/// A parallel branch: an optional leading 3×3 same-padding max pool, then a
/// chain of convolution stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub pool_first: bool,
    pub stages: Vec<ConvStage>,
}

/// Layout of one Inception block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: &'static str,
    pub in_channels: usize,
    /// Total channels after branch concatenation.
    pub concat_channels: usize,
    /// Channels after the 1×1 projection; also the residual width.
    pub out_channels: usize,
    pub branches: Vec<Branch>,
}

impl BlockSpec {
    /// The residual path needs a 1×1 projection when widths differ.
    pub fn needs_shortcut_projection(&self) -> bool {
        self.in_channels != self.out_channels
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let sum: usize = self.branches.iter().map(|b| branch_out_channels(b)).sum();
        if sum != self.concat_channels {
            return Err(TensorError::Config {
                op: "block_spec",
                detail: format!(
                    "{}: branch channels sum to {sum}, declared concat width {}",
                    self.name, self.concat_channels
                ),
            });
        }
        Ok(())
    }

    /// Scalar parameter count of the block's kernels.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for branch in &self.branches {
            let mut ci = self.in_channels;
            for stage in &branch.stages {
                count += stage.out_channels * ci * stage.kh * stage.kw;
                ci = stage.out_channels;
            }
        }
        count += self.out_channels * self.concat_channels; // 1×1 projection
        if self.needs_shortcut_projection() {
            count += self.out_channels * self.in_channels;
        }
        count
    }
}

fn branch_out_channels(branch: &Branch) -> usize {
    branch.stages.last().map(|s| s.out_channels).unwrap_or(0)
}

/// Widths of the fixed stem / A / reduction / B / C stack.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub branch_width: usize,
    pub reduction_channels: usize,
    pub feature_dim: usize,
    pub drop_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            stem_channels: 16,
            branch_width: 8,
            reduction_channels: 16,
            feature_dim: 64,
            drop_rate: 0.80,
        }
    }
}

impl BackboneConfig {
    /// Smallest square input the stem pool and reduction can halve.
    pub const MIN_INPUT_SIDE: usize = 4;

    pub fn block_a(&self) -> BlockSpec {
        let w = self.branch_width;
        BlockSpec {
            name: "block_a",
            in_channels: self.stem_channels,
            concat_channels: 4 * w,
            out_channels: 4 * w,
            branches: vec![
                Branch { pool_first: false, stages: vec![ConvStage { kh: 1, kw: 1, out_channels: w }] },
                Branch {
                    pool_first: false,
                    stages: vec![
                        ConvStage { kh: 1, kw: 1, out_channels: w },
                        ConvStage { kh: 3, kw: 3, out_channels: w },
                    ],
                },
                Branch {
                    pool_first: false,
                    stages: vec![
                        ConvStage { kh: 1, kw: 1, out_channels: w },
                        ConvStage { kh: 3, kw: 3, out_channels: w },
                        ConvStage { kh: 3, kw: 3, out_channels: w },
                    ],
                },
                Branch { pool_first: true, stages: vec![ConvStage { kh: 1, kw: 1, out_channels: w }] },
            ],
        }
    }

    pub fn block_b(&self) -> BlockSpec {
        let w = self.branch_width;
        let in_channels = self.reduction_out_channels();
        BlockSpec {
            name: "block_b",
            in_channels,
            concat_channels: 4 * w,
            out_channels: in_channels,
            branches: vec![
                Branch { pool_first: false, stages: vec![ConvStage { kh: 1, kw: 1, out_channels: w }] },
                Branch {
                    pool_first: false,
                    stages: vec![
                        ConvStage { kh: 1, kw: 1, out_channels: w },
                        ConvStage { kh: 1, kw: 3, out_channels: w },
                        ConvStage { kh: 3, kw: 1, out_channels: w },
                    ],
                },
                Branch {
                    pool_first: false,
                    stages: vec![
                        ConvStage { kh: 1, kw: 1, out_channels: w },
                        ConvStage { kh: 3, kw: 1, out_channels: w },
                        ConvStage { kh: 1, kw: 3, out_channels: w },
                    ],
                },
                Branch { pool_first: true, stages: vec![ConvStage { kh: 1, kw: 1, out_channels: w }] },
            ],
        }
    }

    pub fn block_c(&self) -> BlockSpec {
        let w = self.branch_width;
        BlockSpec {
            name: "block_c",
            in_channels: self.reduction_out_channels(),
            concat_channels: 4 * w,
            out_channels: self.feature_dim,
            branches: vec![
                Branch { pool_first: false, stages: vec![ConvStage { kh: 1, kw: 1, out_channels: w }] },
                Branch {
                    pool_first: false,
                    stages: vec![
                        ConvStage { kh: 1, kw: 1, out_channels: w },
                        ConvStage { kh: 1, kw: 3, out_channels: w },
                    ],
                },
                Branch {
                    pool_first: false,
                    stages: vec![
                        ConvStage { kh: 1, kw: 1, out_channels: w },
                        ConvStage { kh: 3, kw: 1, out_channels: w },
                    ],
                },
                Branch { pool_first: true, stages: vec![ConvStage { kh: 1, kw: 1, out_channels: w }] },
            ],
        }
    }

    pub fn blocks(&self) -> [BlockSpec; 3] {
        [self.block_a(), self.block_b(), self.block_c()]
    }

    /// Channels after the reduction: stride-2 conv output concatenated with
    /// the max-pooled input.
    pub fn reduction_out_channels(&self) -> usize {
        self.block_a().out_channels + self.reduction_channels
    }
}

/// Graph leaves for every parameter of a store, fetched by name.
pub struct BoundParams {
    map: BTreeMap<String, Value>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Self {
        let map = store.iter().map(|(name, t)| (name.clone(), g.leaf(t))).collect();
        BoundParams { map }
    }

    pub fn get(&self, name: &str) -> Result<Value, TensorError> {
        self.map.get(name).copied().ok_or_else(|| TensorError::Config {
            op: "params",
            detail: format!("missing parameter {name:?}"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Value)> {
        self.map.iter().map(|(n, &v)| (n, v))
    }
}

fn glorot_uniform(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent init shape")
}

fn conv_kernel(rng: &mut ChaCha8Rng, co: usize, ci: usize, kh: usize, kw: usize) -> Tensor {
    glorot_uniform(rng, vec![co, ci, kh, kw], ci * kh * kw, co * kh * kw)
}

fn init_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &BlockSpec) {
    for (bi, branch) in spec.branches.iter().enumerate() {
        let mut ci = spec.in_channels;
        for (si, stage) in branch.stages.iter().enumerate() {
            store.insert(
                format!("{}.b{bi}.s{si}", spec.name),
                conv_kernel(rng, stage.out_channels, ci, stage.kh, stage.kw),
            );
            ci = stage.out_channels;
        }
    }
    // zero projection makes the block an identity perturbation at init
    store.insert(
        format!("{}.proj", spec.name),
        Tensor::zeros(vec![spec.out_channels, spec.concat_channels, 1, 1]),
    );
    if spec.needs_shortcut_projection() {
        store.insert(
            format!("{}.shortcut", spec.name),
            conv_kernel(rng, spec.out_channels, spec.in_channels, 1, 1),
        );
    }
}

/// Initialize every backbone kernel, drawing from `rng` in pipeline order
/// (stem, block A, reduction, block B, block C). Kernels use symmetric
/// scaled-uniform values with bound `sqrt(6/(fan_in+fan_out))`; block
/// projection kernels start at zero.
pub fn backbone_init(
    cfg: &BackboneConfig,
    input_hw: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore, TensorError> {
    let (h, w) = input_hw;
    if h < BackboneConfig::MIN_INPUT_SIDE || w < BackboneConfig::MIN_INPUT_SIDE {
        return Err(TensorError::Config {
            op: "backbone_init",
            detail: format!(
                "input {h}x{w} too small for the block stack; minimum is {m}x{m}",
                m = BackboneConfig::MIN_INPUT_SIDE
            ),
        });
    }
    for spec in cfg.blocks() {
        spec.validate()?;
    }
    let mut store = ParamStore::new();
    store.insert("stem.conv", conv_kernel(rng, cfg.stem_channels, cfg.input_channels, 3, 3));
    init_block(&mut store, rng, &cfg.block_a());
    store.insert(
        "reduction.conv",
        conv_kernel(rng, cfg.reduction_channels, cfg.block_a().out_channels, 2, 2),
    );
    init_block(&mut store, rng, &cfg.block_b());
    init_block(&mut store, rng, &cfg.block_c());
    Ok(store)
}

/// [`backbone_init`] with a one-shot seed.
pub fn backbone_init_seeded(
    cfg: &BackboneConfig,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<ParamStore, TensorError> {
    backbone_init(cfg, input_hw, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One Inception block: parallel branches, channel concat, 1×1 projection,
/// residual add, relu.
pub fn inception_block_forward(
    g: &mut Graph,
    x: Value,
    spec: &BlockSpec,
    params: &BoundParams,
) -> Result<Value, TensorError> {
    let run = |g: &mut Graph| -> Result<Value, TensorError> {
        if g.shape(x)[0] != spec.in_channels {
            return Err(TensorError::Shape {
                op: "inception_block",
                detail: format!(
                    "input has {} channels, block expects {}",
                    g.shape(x)[0],
                    spec.in_channels
                ),
            });
        }
        let mut branch_outputs = Vec::with_capacity(spec.branches.len());
        for (bi, branch) in spec.branches.iter().enumerate() {
            let mut cur = x;
            if branch.pool_first {
                cur = g.max_pool2d(cur, 3, 1, Padding::Same)?;
            }
            for (si, _) in branch.stages.iter().enumerate() {
                let kernel = params.get(&format!("{}.b{bi}.s{si}", spec.name))?;
                cur = g.conv2d(cur, kernel, 1, Padding::Same)?;
                cur = g.relu(cur);
            }
            branch_outputs.push(cur);
        }
        let concat = g.concat_channels(&branch_outputs)?;
        let proj = params.get(&format!("{}.proj", spec.name))?;
        let projected = g.conv2d(concat, proj, 1, Padding::Valid)?;
        let shortcut = if spec.needs_shortcut_projection() {
            let k = params.get(&format!("{}.shortcut", spec.name))?;
            g.conv2d(x, k, 1, Padding::Valid)?
        } else {
            x
        };
        let summed = g.add(projected, shortcut)?;
        Ok(g.relu(summed))
    };
    run(g).map_err(|e| e.in_context(spec.name))
}

/// Halve the spatial dims with a parallel stride-2 2×2 conv and stride-2 2×2
/// max pool, channel-concatenated. Odd sides floor: H -> floor(H/2).
pub fn reduction_forward(
    g: &mut Graph,
    x: Value,
    params: &BoundParams,
) -> Result<Value, TensorError> {
    let run = |g: &mut Graph| -> Result<Value, TensorError> {
        let kernel = params.get("reduction.conv")?;
        let conv = g.conv2d(x, kernel, 2, Padding::Valid)?;
        let conv = g.relu(conv);
        let pooled = g.max_pool2d(x, 2, 2, Padding::Valid)?;
        g.concat_channels(&[conv, pooled])
    };
    run(g).map_err(|e| e.in_context("reduction"))
}

/// Full backbone: stem -> A -> reduction -> B -> C -> global average pool ->
/// dropout. Returns the feature vector `h: [feature_dim]`. With
/// `training = false` the pass is deterministic and consumes no randomness.
pub fn backbone_forward(
    g: &mut Graph,
    image: Value,
    cfg: &BackboneConfig,
    params: &BoundParams,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Value, TensorError> {
    let stem = (|g: &mut Graph| -> Result<Value, TensorError> {
        let kernel = params.get("stem.conv")?;
        let conv = g.conv2d(image, kernel, 1, Padding::Same)?;
        let act = g.relu(conv);
        g.max_pool2d(act, 2, 2, Padding::Valid)
    })(g)
    .map_err(|e| e.in_context("stem"))?;

    let a = inception_block_forward(g, stem, &cfg.block_a(), params)?;
    let reduced = reduction_forward(g, a, params)?;
    let b = inception_block_forward(g, reduced, &cfg.block_b(), params)?;
    let c = inception_block_forward(g, b, &cfg.block_c(), params)?;
    let pooled = g.avg_pool_global(c).map_err(|e| e.in_context("avg_pool"))?;
    g.dropout(pooled, cfg.drop_rate, training, rng).map_err(|e| e.in_context("dropout"))
}
