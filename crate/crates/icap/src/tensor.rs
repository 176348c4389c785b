//! Dense n-dimensional tensors of 64-bit floats, row-major.

use thiserror::Error;

/// Errors raised by tensor and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{label}: {source}")]
    Context {
        label: String,
        #[source]
        source: Box<TensorError>,
    },
}

impl TensorError {
    /// Wrap an error with a pipeline-stage label (block name, layer name).
    pub fn in_context(self, label: impl Into<String>) -> TensorError {
        TensorError::Context {
            label: label.into(),
            source: Box::new(self),
        }
    }
}

/// A dense tensor. The shape is fixed at creation; `data` is row-major and
/// `grad`, when present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Gradient of some scalar loss with respect to this tensor, filled in
    /// by [`crate::graph::Graph::backward`] via [`crate::graph::Graph::tensor`].
    pub grad: Option<Vec<f64>>,
    /// Handle of the graph node this tensor was materialized from, if any.
    pub node_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None, node_id: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, node_id: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, node_id: None }
    }

    /// 1-D tensor from a flat vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data, grad: None, node_id: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, node_id: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Channel slice `[start, end)` of a `[C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        if self.shape.len() != 3 {
            return Err(TensorError::Shape {
                op: "slice_channels",
                detail: format!("expected [C, H, W], got {:?}", self.shape),
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if start >= end || end > c {
            return Err(TensorError::Shape {
                op: "slice_channels",
                detail: format!("range {start}..{end} out of bounds for {c} channels"),
            });
        }
        let plane = h * w;
        let data = self.data[start * plane..end * plane].to_vec();
        Tensor::new(vec![end - start, h, w], data)
    }
}
