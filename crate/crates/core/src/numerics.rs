//! Dense ReLU feedforward networks with analytic gradients and plain SGD.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `k` stores its weight
//! matrix row-major as `[fan_in][fan_out]` followed by its bias vector, so a
//! batch of inputs `X (n × fan_in)` maps to `X·W + b`. Every hidden layer is
//! followed by a ReLU; the output layer is linear.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden layer widths used by both the policy and the environment model.
pub const DEFAULT_HIDDEN: [usize; 2] = [200, 200];

/// Layer widths of a feedforward network, input first, output last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl Architecture {
    pub fn new(d_in: usize, hidden: &[usize], d_out: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(d_in);
        widths.extend_from_slice(hidden);
        widths.push(d_out);
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    /// `d_in → 200 → 200 → d_out`.
    pub fn mlp(d_in: usize, d_out: usize) -> Result<Self> {
        Self::new(d_in, &DEFAULT_HIDDEN, d_out)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("architecture has at least two widths")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn spans(&self) -> impl Iterator<Item = LayerSpan> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let span = LayerSpan {
                fan_in: w[0],
                fan_out: w[1],
                weight_offset: offset,
                bias_offset: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            span
        })
    }
}

/// Flat parameter vector of a feedforward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Gradient with the same layout as the [`NetworkParams`] it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    arch: Architecture,
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { arch, values })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = Self::zeros(arch);
        let spans: Vec<LayerSpan> = params.arch.spans().collect();
        for span in spans {
            let bound = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
            let weights =
                &mut params.values[span.weight_offset..span.weight_offset + span.fan_in * span.fan_out];
            for w in weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Weight matrix of layer `k` as a `fan_in × fan_out` view.
    pub fn weights(&self, k: usize) -> ArrayView2<'_, f64> {
        let span = self.span(k);
        ArrayView2::from_shape(
            (span.fan_in, span.fan_out),
            &self.values[span.weight_offset..span.bias_offset],
        )
        .expect("layer span matches architecture")
    }

    pub fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let span = self.span(k);
        ArrayView1::from(&self.values[span.bias_offset..span.bias_offset + span.fan_out])
    }

    /// Mutable `(weights, bias)` slices of layer `k`.
    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let span = self.span(k);
        let layer = &mut self.values[span.weight_offset..span.bias_offset + span.fan_out];
        layer.split_at_mut(span.fan_in * span.fan_out)
    }

    fn span(&self, k: usize) -> LayerSpan {
        self.arch
            .spans()
            .nth(k)
            .unwrap_or_else(|| panic!("layer {k} out of range"))
    }
}

impl GradientVector {
    pub fn zeros(arch: Architecture) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                what: "gradient vector",
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, other: &GradientVector, c: f64) -> Result<()> {
        check_arch(&self.arch, &other.arch)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_arch(expected: &Architecture, actual: &Architecture) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what: "network architecture (parameter count)",
            expected: expected.param_count(),
            actual: actual.param_count(),
        });
    }
    Ok(())
}

/// Post-activation outputs of every layer for one batch, kept for the
/// backward pass. `activations[0]` is the input batch and the last entry is
/// the (linear) network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("cache holds the input at least")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Forward pass over a batch of row inputs.
pub fn forward_batch(params: &NetworkParams, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    let arch = params.arch();
    if inputs.ncols() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "network input",
            expected: arch.input_dim(),
            actual: inputs.ncols(),
        });
    }
    let n = inputs.nrows();
    let layers = arch.num_layers();
    let mut activations = Vec::with_capacity(layers + 1);
    activations.push(inputs.to_owned());
    for k in 0..layers {
        let w = params.weights(k);
        let b = params.bias(k);
        let mut z = Array2::from_shape_fn((n, w.ncols()), |(_, j)| b[j]);
        general_mat_mul(1.0, &activations[k], &w, 1.0, &mut z);
        if k + 1 < layers {
            z.mapv_inplace(relu);
        }
        activations.push(z);
    }
    Ok(ForwardCache { activations })
}

/// Gradient of `Σ_rows output·output_grad` with respect to the parameters,
/// summed over the batch held in `cache`.
pub fn backward_batch(
    params: &NetworkParams,
    cache: &ForwardCache,
    output_grads: ArrayView2<'_, f64>,
) -> Result<GradientVector> {
    let arch = params.arch();
    let layers = arch.num_layers();
    if cache.activations.len() != layers + 1 || cache.activations[0].ncols() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "forward cache depth",
            expected: layers + 1,
            actual: cache.activations.len(),
        });
    }
    if output_grads.dim() != cache.output().dim() {
        return Err(Error::DimensionMismatch {
            what: "output gradient",
            expected: cache.output().len(),
            actual: output_grads.len(),
        });
    }
    let mut grad = GradientVector::zeros(arch.clone());
    let spans: Vec<LayerSpan> = arch.spans().collect();
    let mut delta = output_grads.to_owned();
    for k in (0..layers).rev() {
        let span = spans[k];
        let input = &cache.activations[k];
        {
            let (gw, gb) = grad.values[span.weight_offset..span.bias_offset + span.fan_out]
                .split_at_mut(span.fan_in * span.fan_out);
            let mut gw = ndarray::ArrayViewMut2::from_shape((span.fan_in, span.fan_out), gw)
                .expect("layer span matches architecture");
            general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
            let summed = delta.sum_axis(Axis(0));
            gb.copy_from_slice(summed.as_slice().expect("contiguous"));
        }
        if k > 0 {
            let mut prev = Array2::zeros((delta.nrows(), span.fan_in));
            general_mat_mul(1.0, &delta, &params.weights(k).t(), 0.0, &mut prev);
            // ReLU mask; a zero activation (including exactly-zero
            // pre-activation) passes no gradient.
            ndarray::Zip::from(&mut prev)
                .and(input)
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = prev;
        }
    }
    Ok(grad)
}

/// Output of the network for a single input vector.
pub fn forward(params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    let out = forward_batch(params, view)?.into_output();
    Ok(out.into_raw_vec_and_offset().0)
}

/// Gradient of `output(input)·output_grad` with respect to the parameters.
pub fn backward(params: &NetworkParams, input: &[f64], output_grad: &[f64]) -> Result<GradientVector> {
    let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    let cache = forward_batch(params, view)?;
    let og = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("row vector");
    backward_batch(params, &cache, og)
}

/// Loss-descent step `params − lr·grad`.
pub fn sgd_step(params: &NetworkParams, grad: &GradientVector, lr: f64) -> Result<NetworkParams> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grad, lr)?;
    Ok(next)
}

/// In-place variant of [`sgd_step`]; leaves `params` untouched on error.
pub fn sgd_step_in_place(params: &mut NetworkParams, grad: &GradientVector, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    check_arch(&params.arch, &grad.arch)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    for (p, g) in params.values.iter_mut().zip(&grad.values) {
        *p -= lr * g;
    }
    Ok(())
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Row-wise copy of a slice of equally sized vectors into a matrix.
pub(crate) fn stack_rows<const N: usize>(rows: &[[f64; N]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), N), |(i, j)| rows[i][j])
}
