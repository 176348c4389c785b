//! Append-only computation tape with reverse-mode gradients.
//!
//! A [`Graph`] records every forward operation as a node; node inputs always
//! point at earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. All arithmetic is f64 and
//! every loop runs in a fixed order, so identical graphs produce bit-identical
//! gradients.

use rand::Rng;

use crate::capsule::squash_vec;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Spatial padding for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding (negative infinity for max-pooling) sized to preserve
    /// spatial dims at stride 1. Requires odd kernel/window sides.
    Same,
    /// No padding.
    Valid,
}

/// Probabilities below this are clamped before taking the log.
pub const PROB_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul,
    Conv2d { stride: usize, pad_h: usize, pad_w: usize },
    MaxPool2d { argmax: Vec<usize> },
    AvgPoolGlobal,
    ConcatChannels,
    Relu,
    Add,
    Scale(f64),
    /// Element factors: 0 for dropped, 1/(1-p) for kept. Empty means identity.
    Dropout { mask: Vec<f64> },
    Reshape,
    Transpose,
    SumAll,
    SquashRows,
    SoftmaxRows,
    CapsuleVotes,
    RouteWeightedSum,
    RouteAgreement,
    CrossEntropy { label: usize },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

// Shared kernels; the pure per-module functions reuse these so the graph and
// the standalone operations cannot drift apart.

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, data: Vec<f64>) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, inputs, shape, data, grad: None });
        Value(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf node (input or parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec())
    }

    pub fn leaf_zeros(&mut self, shape: Vec<usize>) -> Value {
        let numel: usize = shape.iter().product();
        self.push(Op::Leaf, vec![], shape, vec![0.0; numel])
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Materialize a node as a [`Tensor`], carrying any gradient computed by
    /// [`Graph::backward`] and the originating node id.
    pub fn tensor(&self, v: Value) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone())
            .expect("graph node holds a consistent shape");
        t.grad = node.grad.clone();
        t.node_id = Some(v.0);
        t
    }

    // ── forward operations ──────────────────────────────────────────────

    /// `C[i,j] = Σ_p A[i,p]·B[p,j]` for 2-D operands.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("lhs {sa:?} rhs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(Op::MatMul, vec![a.0, b.0], vec![m, n], data))
    }

    /// Cross-correlation of `[C_in, H, W]` with kernels `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Value,
        kernels: Value,
        stride: usize,
        padding: Padding,
    ) -> Result<Value, TensorError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?} kernels {sk:?}")));
        }
        if sx[0] != sk[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} != kernel channels {} (input {sx:?} kernels {sk:?})", sx[0], sk[1]),
            ));
        }
        if stride < 1 {
            return Err(TensorError::Config { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::Config {
                        op: "conv2d",
                        detail: format!("same padding requires odd kernel sides, got {kh}x{kw}"),
                    });
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
        };
        if kh > h + 2 * pad_h || kw > w + 2 * pad_w {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad_h, w + 2 * pad_w),
            ));
        }
        let ho = (h + 2 * pad_h - kh) / stride + 1;
        let wo = (w + 2 * pad_w - kw) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernels.0].data;
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[(ic * h + iy as usize) * w + ix as usize]
                                    * kd[((oc * ci + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { stride, pad_h, pad_w },
            vec![x.0, kernels.0],
            vec![co, ho, wo],
            out,
        ))
    }

    /// Per-window maximum over `[C, H, W]`. Gradient routes to the first
    /// (row-major) maximal element of each window.
    pub fn max_pool2d(
        &mut self,
        x: Value,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Value, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("max_pool2d", format!("expected [C, H, W], got {sx:?}")));
        }
        if window < 1 || stride < 1 {
            return Err(TensorError::Config {
                op: "max_pool2d",
                detail: "window and stride must be >= 1".into(),
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let pad = match padding {
            Padding::Valid => {
                if window > h || window > w {
                    return Err(shape_err(
                        "max_pool2d",
                        format!("window {window} larger than input {h}x{w}"),
                    ));
                }
                0
            }
            Padding::Same => {
                if window % 2 == 0 {
                    return Err(TensorError::Config {
                        op: "max_pool2d",
                        detail: format!("same padding requires an odd window, got {window}"),
                    });
                }
                (window - 1) / 2
            }
        };
        let ho = (h + 2 * pad - window) / stride + 1;
        let wo = (w + 2 * pad - window) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..window {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x.0], vec![c, ho, wo], out))
    }

    /// Per-channel mean over the spatial dims: `[C, H, W] -> [C]`.
    pub fn avg_pool_global(&mut self, x: Value) -> Result<Value, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("avg_pool_global", format!("expected [C, H, W], got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let plane = h * w;
        let xd = &self.nodes[x.0].data;
        let out: Vec<f64> = (0..c)
            .map(|ch| xd[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Op::AvgPoolGlobal, vec![x.0], vec![c], out))
    }

    /// Channel-axis concatenation of `[C_i, H, W]` tensors, argument order.
    pub fn concat_channels(&mut self, parts: &[Value]) -> Result<Value, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Config {
                op: "concat_channels",
                detail: "at least one part required".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(shape_err("concat_channels", format!("expected [C, H, W], got {first:?}")));
        }
        let (h, w) = (first[1], first[2]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("part {s:?} does not match spatial dims {h}x{w}"),
                ));
            }
            channels += s[0];
        }
        let mut out = Vec::with_capacity(channels * h * w);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            Op::ConcatChannels,
            parts.iter().map(|v| v.0).collect(),
            vec![channels, h, w],
            out,
        ))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu, vec![x.0], shape, data)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", format!("lhs {sa:?} rhs {sb:?}")));
        }
        let shape = sa.to_vec();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add, vec![a.0, b.0], shape, data))
    }

    pub fn scale(&mut self, x: Value, factor: f64) -> Value {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale(factor), vec![x.0], shape, data)
    }

    /// Inverted dropout: while training, each element is zeroed with
    /// probability `drop_prob` and survivors are scaled by `1/(1-drop_prob)`;
    /// at inference the op is an identity and consumes no randomness.
    pub fn dropout(
        &mut self,
        x: Value,
        drop_prob: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Value, TensorError> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(TensorError::Config {
                op: "dropout",
                detail: format!("drop_prob must be in [0, 1), got {drop_prob}"),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        if !training || drop_prob == 0.0 {
            let data = self.nodes[x.0].data.clone();
            return Ok(self.push(Op::Dropout { mask: Vec::new() }, vec![x.0], shape, data));
        }
        let keep_scale = 1.0 / (1.0 - drop_prob);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < drop_prob { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> =
            self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(Op::Dropout { mask }, vec![x.0], shape, data))
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.nodes[x.0].shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Op::Reshape, vec![x.0], shape, data))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Value) -> Result<Value, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![x.0], vec![c, r], out))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: Value) -> Value {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::SumAll, vec![x.0], vec![1], vec![s])
    }

    /// Squash nonlinearity applied to each row of a 2-D tensor.
    pub fn squash_rows(&mut self, x: Value) -> Result<Value, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("squash_rows", format!("expected 2-D, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            out[i * c..(i + 1) * c].copy_from_slice(&squash_vec(row));
        }
        Ok(self.push(Op::SquashRows, vec![x.0], sx, out))
    }

    /// Numerically stable softmax over each row of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Value) -> Result<Value, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("softmax_rows", format!("expected 2-D, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            out[i * c..(i + 1) * c].copy_from_slice(&softmax_row(&xd[i * c..(i + 1) * c]));
        }
        Ok(self.push(Op::SoftmaxRows, vec![x.0], sx, out))
    }

    /// Vote prediction: `t̂[i,j,:] = w[i,j,:,:] · u[i,:]` for capsules
    /// `u: [N, d_in]` and vote matrices `w: [N, J, d_out, d_in]`.
    pub fn capsule_votes(&mut self, u: Value, w: Value) -> Result<Value, TensorError> {
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if su.len() != 2 || sw.len() != 4 || sw[0] != su[0] || sw[3] != su[1] {
            return Err(shape_err("capsule_votes", format!("u {su:?} w {sw:?}")));
        }
        let (n, d_in) = (su[0], su[1]);
        let (j, d_out) = (sw[1], sw[2]);
        let ud = &self.nodes[u.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0; n * j * d_out];
        for i in 0..n {
            for cap in 0..j {
                for a in 0..d_out {
                    let mut acc = 0.0;
                    let w_off = ((i * j + cap) * d_out + a) * d_in;
                    for b in 0..d_in {
                        acc += wd[w_off + b] * ud[i * d_in + b];
                    }
                    out[(i * j + cap) * d_out + a] = acc;
                }
            }
        }
        Ok(self.push(Op::CapsuleVotes, vec![u.0, w.0], vec![n, j, d_out], out))
    }

    /// Coupling-weighted vote sum: `Z[j,:] = Σ_i c[i,j]·t̂[i,j,:]` for
    /// couplings `c: [N, J]` and votes `t̂: [N, J, d]`.
    pub fn route_weighted_sum(&mut self, c: Value, votes: Value) -> Result<Value, TensorError> {
        let (sc, sv) = (self.shape(c).to_vec(), self.shape(votes).to_vec());
        if sc.len() != 2 || sv.len() != 3 || sc[0] != sv[0] || sc[1] != sv[1] {
            return Err(shape_err("route_weighted_sum", format!("c {sc:?} votes {sv:?}")));
        }
        let (n, j, d) = (sv[0], sv[1], sv[2]);
        let cd = &self.nodes[c.0].data;
        let vd = &self.nodes[votes.0].data;
        let mut out = vec![0.0; j * d];
        for i in 0..n {
            for cap in 0..j {
                let w = cd[i * j + cap];
                let v_off = (i * j + cap) * d;
                for a in 0..d {
                    out[cap * d + a] += w * vd[v_off + a];
                }
            }
        }
        Ok(self.push(Op::RouteWeightedSum, vec![c.0, votes.0], vec![j, d], out))
    }

    /// Vote/output agreement: `a[i,j] = t̂[i,j,:]·v[j,:]` for votes
    /// `t̂: [N, J, d]` and capsule outputs `v: [J, d]`.
    pub fn route_agreement(&mut self, votes: Value, v: Value) -> Result<Value, TensorError> {
        let (st, sv) = (self.shape(votes).to_vec(), self.shape(v).to_vec());
        if st.len() != 3 || sv.len() != 2 || st[1] != sv[0] || st[2] != sv[1] {
            return Err(shape_err("route_agreement", format!("votes {st:?} v {sv:?}")));
        }
        let (n, j, d) = (st[0], st[1], st[2]);
        let td = &self.nodes[votes.0].data;
        let vd = &self.nodes[v.0].data;
        let mut out = vec![0.0; n * j];
        for i in 0..n {
            for cap in 0..j {
                let t_off = (i * j + cap) * d;
                let mut acc = 0.0;
                for a in 0..d {
                    acc += td[t_off + a] * vd[cap * d + a];
                }
                out[i * j + cap] = acc;
            }
        }
        Ok(self.push(Op::RouteAgreement, vec![votes.0, v.0], vec![n, j], out))
    }

    /// `-log(max(P[label], 1e-12))` for a 1-D probability vector.
    pub fn cross_entropy(&mut self, probs: Value, label: usize) -> Result<Value, TensorError> {
        let sp = self.shape(probs).to_vec();
        if sp.len() != 1 {
            return Err(shape_err("cross_entropy", format!("expected 1-D probabilities, got {sp:?}")));
        }
        if label >= sp[0] {
            return Err(TensorError::Config {
                op: "cross_entropy",
                detail: format!("label {label} out of range for {} classes", sp[0]),
            });
        }
        let p = self.nodes[probs.0].data[label].max(PROB_CLAMP);
        let loss = -p.ln();
        Ok(self.push(Op::CrossEntropy { label }, vec![probs.0], vec![1], vec![loss]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Fills each node's gradient;
    /// nodes that do not influence the loss keep a zero gradient.
    pub fn backward(&mut self, loss: Value) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let grad = self.nodes[i].grad.clone().unwrap();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    let ad = self.nodes[a].data.clone();
                    let bd = self.nodes[b].data.clone();
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let mut da = vec![0.0; m * k];
                    for ii in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for jj in 0..n {
                                acc += grad[ii * n + jj] * bd[p * n + jj];
                            }
                            da[ii * k + p] = acc;
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for jj in 0..n {
                            let mut acc = 0.0;
                            for ii in 0..m {
                                acc += ad[ii * k + p] * grad[ii * n + jj];
                            }
                            db[p * n + jj] = acc;
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Conv2d { stride, pad_h, pad_w } => {
                    let (stride, pad_h, pad_w) = (*stride, *pad_h, *pad_w);
                    let (x, kern) = (inputs[0], inputs[1]);
                    let (ci, h, w) =
                        (self.nodes[x].shape[0], self.nodes[x].shape[1], self.nodes[x].shape[2]);
                    let (co, kh, kw) = (
                        self.nodes[kern].shape[0],
                        self.nodes[kern].shape[2],
                        self.nodes[kern].shape[3],
                    );
                    let (ho, wo) = (self.nodes[i].shape[1], self.nodes[i].shape[2]);
                    let xd = self.nodes[x].data.clone();
                    let kd = self.nodes[kern].data.clone();
                    let mut dx = vec![0.0; ci * h * w];
                    let mut dk = vec![0.0; co * ci * kh * kw];
                    for oc in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = grad[(oc * ho + oy) * wo + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = (ic * h + iy as usize) * w + ix as usize;
                                            let ki = ((oc * ci + ic) * kh + ky) * kw + kx;
                                            dx[xi] += g * kd[ki];
                                            dk[ki] += g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(kern, &dk);
                }
                Op::MaxPool2d { argmax } => {
                    let x = inputs[0];
                    let mut dx = vec![0.0; self.nodes[x].data.len()];
                    for (o, &idx) in argmax.iter().enumerate() {
                        dx[idx] += grad[o];
                    }
                    self.accumulate(x, &dx);
                }
                Op::AvgPoolGlobal => {
                    let x = inputs[0];
                    let (c, h, w) =
                        (self.nodes[x].shape[0], self.nodes[x].shape[1], self.nodes[x].shape[2]);
                    let plane = h * w;
                    let mut dx = vec![0.0; c * plane];
                    for ch in 0..c {
                        let g = grad[ch] / plane as f64;
                        for p in 0..plane {
                            dx[ch * plane + p] = g;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatChannels => {
                    let mut offset = 0;
                    for &p in &inputs {
                        let len = self.nodes[p].data.len();
                        let slice = grad[offset..offset + len].to_vec();
                        self.accumulate(p, &slice);
                        offset += len;
                    }
                }
                Op::Relu => {
                    let x = inputs[0];
                    let dx: Vec<f64> = self.nodes[x]
                        .data
                        .iter()
                        .zip(&grad)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Add => {
                    self.accumulate(inputs[0], &grad);
                    self.accumulate(inputs[1], &grad);
                }
                Op::Scale(factor) => {
                    let factor = *factor;
                    let dx: Vec<f64> = grad.iter().map(|&g| g * factor).collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Dropout { mask } => {
                    if mask.is_empty() {
                        self.accumulate(inputs[0], &grad);
                    } else {
                        let dx: Vec<f64> = grad.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                        self.accumulate(inputs[0], &dx);
                    }
                }
                Op::Reshape => {
                    self.accumulate(inputs[0], &grad);
                }
                Op::Transpose => {
                    let x = inputs[0];
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let mut dx = vec![0.0; r * c];
                    for ii in 0..c {
                        for jj in 0..r {
                            dx[jj * c + ii] = grad[ii * r + jj];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SumAll => {
                    let x = inputs[0];
                    let dx = vec![grad[0]; self.nodes[x].data.len()];
                    self.accumulate(x, &dx);
                }
                Op::SquashRows => {
                    let x = inputs[0];
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let xd = self.nodes[x].data.clone();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let z = &xd[row * c..(row + 1) * c];
                        let g = &grad[row * c..(row + 1) * c];
                        let norm_sq: f64 = z.iter().map(|v| v * v).sum();
                        let norm = norm_sq.sqrt();
                        if norm <= crate::capsule::EPS_NORM {
                            continue; // squash output clamped to zero; flat locally
                        }
                        // v = z·n/(1+n²):  dv/dz = f(n)·I + z zᵀ·f'(n)/n
                        let f = norm / (1.0 + norm_sq);
                        let fprime_over_n =
                            (1.0 - norm_sq) / (norm * (1.0 + norm_sq) * (1.0 + norm_sq));
                        let zg: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
                        for a in 0..c {
                            dx[row * c + a] = f * g[a] + zg * fprime_over_n * z[a];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxRows => {
                    let x = inputs[0];
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let sd = self.nodes[i].data.clone();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let s = &sd[row * c..(row + 1) * c];
                        let g = &grad[row * c..(row + 1) * c];
                        let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                        for a in 0..c {
                            dx[row * c + a] = s[a] * (g[a] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::CapsuleVotes => {
                    let (u, w) = (inputs[0], inputs[1]);
                    let (n, d_in) = (self.nodes[u].shape[0], self.nodes[u].shape[1]);
                    let (j, d_out) = (self.nodes[w].shape[1], self.nodes[w].shape[2]);
                    let ud = self.nodes[u].data.clone();
                    let wd = self.nodes[w].data.clone();
                    let mut du = vec![0.0; n * d_in];
                    let mut dw = vec![0.0; n * j * d_out * d_in];
                    for ii in 0..n {
                        for cap in 0..j {
                            for a in 0..d_out {
                                let g = grad[(ii * j + cap) * d_out + a];
                                if g == 0.0 {
                                    continue;
                                }
                                let w_off = ((ii * j + cap) * d_out + a) * d_in;
                                for b in 0..d_in {
                                    du[ii * d_in + b] += g * wd[w_off + b];
                                    dw[w_off + b] += g * ud[ii * d_in + b];
                                }
                            }
                        }
                    }
                    self.accumulate(u, &du);
                    self.accumulate(w, &dw);
                }
                Op::RouteWeightedSum => {
                    let (c_in, votes) = (inputs[0], inputs[1]);
                    let (n, j, d) = (
                        self.nodes[votes].shape[0],
                        self.nodes[votes].shape[1],
                        self.nodes[votes].shape[2],
                    );
                    let cd = self.nodes[c_in].data.clone();
                    let vd = self.nodes[votes].data.clone();
                    let mut dc = vec![0.0; n * j];
                    let mut dv = vec![0.0; n * j * d];
                    for ii in 0..n {
                        for cap in 0..j {
                            let v_off = (ii * j + cap) * d;
                            let mut acc = 0.0;
                            for a in 0..d {
                                let g = grad[cap * d + a];
                                acc += vd[v_off + a] * g;
                                dv[v_off + a] = cd[ii * j + cap] * g;
                            }
                            dc[ii * j + cap] = acc;
                        }
                    }
                    self.accumulate(c_in, &dc);
                    self.accumulate(votes, &dv);
                }
                Op::RouteAgreement => {
                    let (votes, v) = (inputs[0], inputs[1]);
                    let (n, j, d) = (
                        self.nodes[votes].shape[0],
                        self.nodes[votes].shape[1],
                        self.nodes[votes].shape[2],
                    );
                    let td = self.nodes[votes].data.clone();
                    let vd = self.nodes[v].data.clone();
                    let mut dt = vec![0.0; n * j * d];
                    let mut dv = vec![0.0; j * d];
                    for ii in 0..n {
                        for cap in 0..j {
                            let g = grad[ii * j + cap];
                            if g == 0.0 {
                                continue;
                            }
                            let t_off = (ii * j + cap) * d;
                            for a in 0..d {
                                dt[t_off + a] += g * vd[cap * d + a];
                                dv[cap * d + a] += g * td[t_off + a];
                            }
                        }
                    }
                    self.accumulate(votes, &dt);
                    self.accumulate(v, &dv);
                }
                Op::CrossEntropy { label } => {
                    let label = *label;
                    let probs = inputs[0];
                    let p = self.nodes[probs].data[label];
                    let mut dp = vec![0.0; self.nodes[probs].data.len()];
                    if p >= PROB_CLAMP {
                        dp[label] = -grad[0] / p;
                    }
                    self.accumulate(probs, &dp);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, contribution: &[f64]) {
        let g = self.nodes[node].grad.as_mut().unwrap();
        debug_assert_eq!(g.len(), contribution.len());
        for (a, b) in g.iter_mut().zip(contribution) {
            *a += b;
        }
    }
}
