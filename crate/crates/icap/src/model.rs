//! The full classifier: backbone features, primary capsules, routed class
//! capsules, optional self-attention, and the dense softmax head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::self_attention_node;
use crate::backbone::{backbone_forward, backbone_init, BackboneConfig, BoundParams};
use crate::capsule::{primary_capsules_node, routing_nodes, PrimaryCapsSpec, RoutingNodes};
use crate::checkpoint::ParamStore;
use crate::graph::{Graph, Value};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub input_hw: (usize, usize),
    pub n_classes: usize,
    /// Number of primary capsules N; `N · caps_in_dim == feature_dim`.
    pub primary_caps: usize,
    pub caps_in_dim: usize,
    /// Class-capsule dimension d_out.
    pub caps_out_dim: usize,
    pub routing_iters: usize,
    pub attention: bool,
    /// Use the negated-exponent softmax convention in the head.
    pub negative_softmax: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 8 primary capsules of dim 8 over a 64-long
    /// feature vector, 16-dim class capsules, 3 routing iterations.
    pub fn desk(n_classes: usize, input_channels: usize, input_hw: (usize, usize)) -> Self {
        ModelConfig {
            backbone: BackboneConfig { input_channels, ..BackboneConfig::default() },
            input_hw,
            n_classes,
            primary_caps: 8,
            caps_in_dim: 8,
            caps_out_dim: 16,
            routing_iters: 3,
            attention: true,
            negative_softmax: false,
        }
    }

    pub fn primary_spec(&self) -> PrimaryCapsSpec {
        PrimaryCapsSpec { count: self.primary_caps, dim: self.caps_in_dim }
    }

    /// Flattened feature length entering the dense head.
    pub fn head_input_len(&self) -> usize {
        self.n_classes * self.caps_out_dim
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.n_classes < 2 {
            return Err(TensorError::Config {
                op: "model",
                detail: format!("need at least 2 classes, got {}", self.n_classes),
            });
        }
        if self.routing_iters < 1 {
            return Err(TensorError::Config {
                op: "model",
                detail: "routing iterations must be >= 1".into(),
            });
        }
        self.primary_spec().check_features(self.backbone.feature_dim)?;
        if !(0.0..1.0).contains(&self.backbone.drop_rate) {
            return Err(TensorError::Config {
                op: "model",
                detail: format!("drop rate must be in [0, 1), got {}", self.backbone.drop_rate),
            });
        }
        Ok(())
    }
}

/// Handles to the interesting intermediate nodes of one sample's forward pass.
pub struct SampleForward {
    pub features: Value,
    pub primary: Value,
    pub routing: RoutingNodes,
    /// Class-capsule matrix after optional attention, `[J, d_out]`.
    pub attended: Value,
    pub logits: Value,
    /// 1-D probability vector over classes.
    pub probs: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, TensorError> {
        config.validate()?;
        Ok(Model { config })
    }

    /// Draw all parameters in pipeline order: backbone, capsule votes, head.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore, TensorError> {
        let cfg = &self.config;
        let mut store = backbone_init(&cfg.backbone, cfg.input_hw, rng)?;

        let (n, j) = (cfg.primary_caps, cfg.n_classes);
        let (d_out, d_in) = (cfg.caps_out_dim, cfg.caps_in_dim);
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w: Vec<f64> =
            (0..n * j * d_out * d_in).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert("capsule.w", Tensor::new(vec![n, j, d_out, d_in], w)?);

        let f = cfg.head_input_len();
        let bound = (6.0 / (f + cfg.n_classes) as f64).sqrt();
        let wd: Vec<f64> = (0..cfg.n_classes * f).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert("head.w_dense", Tensor::new(vec![cfg.n_classes, f], wd)?);
        Ok(store)
    }

    pub fn init_params_seeded(&self, seed: u64) -> Result<ParamStore, TensorError> {
        self.init_params(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Check that a loaded checkpoint matches this configuration.
    pub fn check_params(&self, store: &ParamStore) -> Result<(), TensorError> {
        let cfg = &self.config;
        let expect = |name: &str, shape: Vec<usize>| -> Result<(), TensorError> {
            let t = store.get(name).ok_or_else(|| TensorError::Config {
                op: "checkpoint",
                detail: format!("missing parameter {name:?}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "checkpoint",
                    detail: format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), shape),
                });
            }
            Ok(())
        };
        expect(
            "capsule.w",
            vec![cfg.primary_caps, cfg.n_classes, cfg.caps_out_dim, cfg.caps_in_dim],
        )?;
        expect("head.w_dense", vec![cfg.n_classes, cfg.head_input_len()])?;
        expect(
            "stem.conv",
            vec![cfg.backbone.stem_channels, cfg.backbone.input_channels, 3, 3],
        )?;
        let reference = self.init_params_seeded(0)?;
        for (name, t) in reference.iter() {
            expect(name, t.shape().to_vec())?;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundParams {
        BoundParams::bind(g, store)
    }

    /// One sample's forward pass. `training` enables dropout, which draws its
    /// mask from `rng`; inference consumes no randomness.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        image: Value,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<SampleForward, TensorError> {
        let cfg = &self.config;
        let features = backbone_forward(g, image, &cfg.backbone, params, training, rng)?;
        let primary = primary_capsules_node(g, features, cfg.primary_spec())
            .map_err(|e| e.in_context("primary_capsules"))?;
        let w = params.get("capsule.w")?;
        let votes = g.capsule_votes(primary, w).map_err(|e| e.in_context("capsule_votes"))?;
        let routing = routing_nodes(g, votes, cfg.routing_iters)
            .map_err(|e| e.in_context("dynamic_routing"))?;
        let attended = if cfg.attention {
            self_attention_node(g, routing.outputs).map_err(|e| e.in_context("self_attention"))?
        } else {
            routing.outputs
        };
        let flat = g.reshape(attended, vec![cfg.head_input_len(), 1])?;
        let w_dense = params.get("head.w_dense")?;
        let logits_col = g.matmul(w_dense, flat).map_err(|e| e.in_context("head"))?;
        let logits = g.reshape(logits_col, vec![cfg.n_classes])?;
        let soft_in = if cfg.negative_softmax {
            let neg = g.scale(logits, -1.0);
            g.reshape(neg, vec![1, cfg.n_classes])?
        } else {
            g.reshape(logits, vec![1, cfg.n_classes])?
        };
        let probs_row = g.softmax_rows(soft_in)?;
        let probs = g.reshape(probs_row, vec![cfg.n_classes])?;
        Ok(SampleForward { features, primary, routing, attended, logits, probs })
    }

    /// Cross-entropy loss node for a sample's forward pass.
    pub fn loss(
        &self,
        g: &mut Graph,
        forward: &SampleForward,
        label: usize,
    ) -> Result<Value, TensorError> {
        g.cross_entropy(forward.probs, label)
    }

    /// Inference: predicted label and class probabilities for one image.
    pub fn predict(
        &self,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<(usize, Vec<f64>), TensorError> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, store);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, &params, image, false, &mut no_rng)?;
        let probs = g.data(fwd.probs).to_vec();
        let label = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok((label, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_channels: 1,
                stem_channels: 4,
                branch_width: 2,
                reduction_channels: 4,
                feature_dim: 16,
                drop_rate: 0.0,
            },
            input_hw: (8, 8),
            n_classes: 3,
            primary_caps: 4,
            caps_in_dim: 4,
            caps_out_dim: 4,
            routing_iters: 3,
            attention: true,
            negative_softmax: false,
        }
    }

    fn test_image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, side, side], (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.primary_caps = 3; // 3 * 4 != 16
        assert!(Model::new(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.routing_iters = 0;
        assert!(Model::new(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.n_classes = 1;
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn forward_shapes_and_probability_sum() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params_seeded(1).unwrap();
        let image = test_image(2, 8);
        let mut g = Graph::new();
        let params = model.bind(&mut g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward(&mut g, &params, &image, false, &mut rng).unwrap();
        assert_eq!(g.shape(fwd.features), &[16]);
        assert_eq!(g.shape(fwd.primary), &[4, 4]);
        assert_eq!(g.shape(fwd.routing.outputs), &[3, 4]);
        assert_eq!(g.shape(fwd.attended), &[3, 4]);
        assert_eq!(g.shape(fwd.logits), &[3]);
        let probs = g.data(fwd.probs);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn attention_toggle_changes_only_the_head_input() {
        let mut cfg = tiny_config();
        cfg.attention = false;
        let model = Model::new(cfg).unwrap();
        let store = model.init_params_seeded(1).unwrap();
        let image = test_image(2, 8);
        let mut g = Graph::new();
        let params = model.bind(&mut g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward(&mut g, &params, &image, false, &mut rng).unwrap();
        assert_eq!(fwd.attended, fwd.routing.outputs);
        // parameters are identical across the ablation
        let with_attn = Model::new(tiny_config()).unwrap().init_params_seeded(1).unwrap();
        assert_eq!(store, with_attn);
    }

    #[test]
    fn predict_is_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params_seeded(9).unwrap();
        let image = test_image(5, 8);
        let (l1, p1) = model.predict(&store, &image).unwrap();
        let (l2, p2) = model.predict(&store, &image).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn checkpoint_shape_check_catches_mismatch() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params_seeded(3).unwrap();
        assert!(model.check_params(&store).is_ok());

        let mut other_cfg = tiny_config();
        other_cfg.n_classes = 4;
        let other = Model::new(other_cfg).unwrap();
        assert!(other.check_params(&store).is_err());
    }

    #[test]
    fn negative_softmax_flag_flips_preference() {
        let mut cfg = tiny_config();
        cfg.negative_softmax = true;
        let neg_model = Model::new(cfg).unwrap();
        let pos_model = Model::new(tiny_config()).unwrap();
        let store = pos_model.init_params_seeded(4).unwrap();
        let image = test_image(6, 8);
        let (_, p_pos) = pos_model.predict(&store, &image).unwrap();
        let (_, p_neg) = neg_model.predict(&store, &image).unwrap();
        // same logits, mirrored ordering
        let mut order_pos: Vec<usize> = (0..3).collect();
        order_pos.sort_by(|&a, &b| p_pos[a].total_cmp(&p_pos[b]));
        let mut order_neg: Vec<usize> = (0..3).collect();
        order_neg.sort_by(|&a, &b| p_neg[b].total_cmp(&p_neg[a]));
        assert_eq!(order_pos, order_neg);
    }
}
