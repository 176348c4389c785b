//! Capsule layer: primary capsules, vote transformation, squash nonlinearity,
//! and dynamic routing by agreement.
//!
//! The routing loop is unrolled onto the computation graph so that gradients
//! flow through the coupling coefficients rather than treating them as
//! constants. The standalone [`dynamic_routing`] runs the same unrolled code
//! on a scratch graph; there is exactly one routing implementation.

use crate::graph::{Graph, Value};
use crate::tensor::{Tensor, TensorError};

/// Vectors with norm at or below this squash to exactly zero.
pub const EPS_NORM: f64 = 1e-12;

/// Squash kernel shared by the pure op and the graph op:
/// `v = (‖z‖²/(1+‖z‖²))·(z/‖z‖)`, zero for ‖z‖ ≤ [`EPS_NORM`].
pub(crate) fn squash_vec(z: &[f64]) -> Vec<f64> {
    let norm_sq: f64 = z.iter().map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm <= EPS_NORM {
        return vec![0.0; z.len()];
    }
    let factor = norm / (1.0 + norm_sq);
    z.iter().map(|&v| v * factor).collect()
}

/// Squash nonlinearity for a single vector. Output keeps the input direction
/// and has norm `‖z‖²/(1+‖z‖²) < 1`.
pub fn squash(z: &[f64]) -> Result<Vec<f64>, TensorError> {
    if let Some(index) = z.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "squash", index });
    }
    Ok(squash_vec(z))
}

/// How a flat feature vector is carved into primary capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimaryCapsSpec {
    /// Number of primary capsules N.
    pub count: usize,
    /// Dimension of each capsule d_in.
    pub dim: usize,
}

impl PrimaryCapsSpec {
    pub fn check_features(&self, feature_len: usize) -> Result<(), TensorError> {
        if self.count == 0 || self.dim == 0 || self.count * self.dim != feature_len {
            return Err(TensorError::Config {
                op: "primary_capsules",
                detail: format!(
                    "feature length {feature_len} does not split into {} capsules of dim {}",
                    self.count, self.dim
                ),
            });
        }
        Ok(())
    }
}

/// Graph form of the primary-capsule layer: reshape a flat feature vector of
/// length `N·d_in` into `[N, d_in]` and squash each capsule.
pub fn primary_capsules_node(
    g: &mut Graph,
    features: Value,
    spec: PrimaryCapsSpec,
) -> Result<Value, TensorError> {
    let len: usize = g.shape(features).iter().product();
    spec.check_features(len)?;
    let rows = g.reshape(features, vec![spec.count, spec.dim])?;
    g.squash_rows(rows)
}

/// Reshape and squash scalar features into vector capsules `u: [N, d_in]`.
pub fn primary_capsules(features: &Tensor, spec: PrimaryCapsSpec) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let f = g.leaf(features);
    let u = primary_capsules_node(&mut g, f, spec)?;
    Ok(g.tensor(u))
}

/// Prediction vectors `t̂[i,j,:] = w[i,j,:,:]·u[i,:]` for `u: [N, d_in]` and
/// vote matrices `w: [N, J, d_out, d_in]`.
pub fn predict_votes(u: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let uv = g.leaf(u);
    let wv = g.leaf(w);
    let t = g.capsule_votes(uv, wv)?;
    Ok(g.tensor(t))
}

/// Graph handles for the tensors produced by one routed capsule layer.
#[derive(Debug, Clone, Copy)]
pub struct RoutingNodes {
    pub votes: Value,
    /// Routing logits b after the final agreement update.
    pub logits: Value,
    /// Couplings c from the final iteration (softmax of logits over j).
    pub couplings: Value,
    /// Pre-activations Z from the final iteration.
    pub pre_activations: Value,
    /// Squashed outputs v from the final iteration.
    pub outputs: Value,
}

/// Unroll dynamic routing onto the graph.
///
/// `b ← 0`; then `iterations` times: `c_i· = softmax_j(b_i·)`,
/// `Z_j = Σ_i c_ij·t̂_ij`, `v_j = squash(Z_j)`, and — except after the final
/// iteration — `b_ij += t̂_ij·v_j`.
pub fn routing_nodes(
    g: &mut Graph,
    votes: Value,
    iterations: usize,
) -> Result<RoutingNodes, TensorError> {
    if iterations < 1 {
        return Err(TensorError::Config {
            op: "dynamic_routing",
            detail: format!("iterations must be >= 1, got {iterations}"),
        });
    }
    let shape = g.shape(votes).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::Shape {
            op: "dynamic_routing",
            detail: format!("expected votes [N, J, d_out], got {shape:?}"),
        });
    }
    let (n, j) = (shape[0], shape[1]);
    let mut logits = g.leaf_zeros(vec![n, j]);
    let mut state = None;
    for iter in 0..iterations {
        let couplings = g.softmax_rows(logits)?;
        let pre_activations = g.route_weighted_sum(couplings, votes)?;
        let outputs = g.squash_rows(pre_activations)?;
        if iter + 1 < iterations {
            let agreement = g.route_agreement(votes, outputs)?;
            logits = g.add(logits, agreement)?;
        }
        state = Some(RoutingNodes { votes, logits, couplings, pre_activations, outputs });
    }
    Ok(state.expect("iterations >= 1"))
}

/// Full state of one routed layer, materialized as tensors.
#[derive(Debug, Clone)]
pub struct RoutingState {
    /// Votes t̂_ij: `[N, J, d_out]`.
    pub votes: Tensor,
    /// Logits b_ij: `[N, J]`.
    pub logits: Tensor,
    /// Couplings c_ij: `[N, J]`; each row is nonnegative and sums to 1.
    pub couplings: Tensor,
    /// Pre-activations Z_j: `[J, d_out]`.
    pub pre_activations: Tensor,
    /// Outputs v_j: `[J, d_out]`; every row has norm < 1.
    pub outputs: Tensor,
}

/// Run dynamic routing over a fixed vote tensor and return the full state.
pub fn dynamic_routing(votes: &Tensor, iterations: usize) -> Result<RoutingState, TensorError> {
    let mut g = Graph::new();
    let v = g.leaf(votes);
    let nodes = routing_nodes(&mut g, v, iterations)?;
    Ok(RoutingState {
        votes: g.tensor(nodes.votes),
        logits: g.tensor(nodes.logits),
        couplings: g.tensor(nodes.couplings),
        pre_activations: g.tensor(nodes.pre_activations),
        outputs: g.tensor(nodes.outputs),
    })
}
