//! Layer descriptions and their forward/backward kernels.

use serde::{Deserialize, Serialize};

use super::tensor::{Shape, Tensor};
use crate::cost::conv_output_shape;
use crate::error::{Error, Result};

/// One layer of a sequential network.
///
/// Serialized with the short field names used in cost tables:
/// `f` filter size, `s` stride, `p` padding, `c_f` output channels and `j`
/// output length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        #[serde(rename = "f")]
        filter: usize,
        #[serde(rename = "s")]
        stride: usize,
        #[serde(rename = "p")]
        padding: usize,
        #[serde(rename = "c_f")]
        out_channels: usize,
    },
    MaxPool {
        #[serde(rename = "f")]
        filter: usize,
        #[serde(rename = "s")]
        stride: usize,
        #[serde(rename = "p", default)]
        padding: usize,
    },
    FullyConnected {
        #[serde(rename = "j")]
        out_features: usize,
    },
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub const fn conv(filter: usize, stride: usize, padding: usize, out_channels: usize) -> Self {
        LayerSpec::Conv {
            filter,
            stride,
            padding,
            out_channels,
        }
    }

    pub const fn max_pool(filter: usize, stride: usize) -> Self {
        LayerSpec::MaxPool {
            filter,
            stride,
            padding: 0,
        }
    }

    pub const fn fully_connected(out_features: usize) -> Self {
        LayerSpec::FullyConnected { out_features }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::FullyConnected { .. } => "fullyconnected",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    /// Activations are fused into the preceding layer when counting depth.
    pub fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Sigmoid)
    }

    /// Filter size and stride for layers that slide a window.
    pub fn window(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv { filter, stride, .. } | LayerSpec::MaxPool { filter, stride, .. } => {
                Some((filter, stride))
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            LayerSpec::Conv {
                filter,
                stride,
                out_channels,
                ..
            } => {
                if filter == 0 || stride == 0 || out_channels == 0 {
                    return bad(format!("conv needs f, s, c_f >= 1, got {self:?}"));
                }
            }
            LayerSpec::MaxPool {
                filter,
                stride,
                padding,
            } => {
                if filter == 0 || stride == 0 {
                    return bad(format!("maxpool needs f, s >= 1, got {self:?}"));
                }
                if padding >= filter {
                    return bad(format!("maxpool padding must be below the filter size, got {self:?}"));
                }
            }
            LayerSpec::FullyConnected { out_features } => {
                if out_features == 0 {
                    return bad("fullyconnected needs j >= 1".into());
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => {}
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Conv {
                filter,
                stride,
                padding,
                out_channels,
            } => {
                let (h, w) = conv_output_shape(input.height, input.width, filter, padding, stride)?;
                Ok(Shape::new(out_channels, h, w))
            }
            LayerSpec::MaxPool {
                filter,
                stride,
                padding,
            } => {
                let (h, w) = conv_output_shape(input.height, input.width, filter, padding, stride)?;
                Ok(Shape::new(input.channels, h, w))
            }
            LayerSpec::FullyConnected { out_features } => Ok(Shape::flat(out_features)),
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input),
        }
    }

    /// Lengths of the weight and bias vectors for an input of `input` shape.
    pub fn param_lens(&self, input: Shape) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                filter,
                out_channels,
                ..
            } => (out_channels * input.channels * filter * filter, out_channels),
            LayerSpec::FullyConnected { out_features } => (out_features * input.len(), out_features),
            _ => (0, 0),
        }
    }

    /// Number of inputs feeding each output unit, used for He initialization.
    pub fn fan_in(&self, input: Shape) -> usize {
        match *self {
            LayerSpec::Conv { filter, .. } => input.channels * filter * filter,
            LayerSpec::FullyConnected { .. } => input.len(),
            _ => 0,
        }
    }
}

/// Largest f64 below one; keeps sigmoid outputs inside the open unit interval.
pub const MAX_PROB: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, MAX_PROB)
}

/// Dot product over four accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `c = a * b + beta * c` for row-major operands given by their strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub filter: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: Shape,
    pub output: Shape,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.input.channels * self.filter * self.filter
    }

    /// Unfolds input patches into a `rows x (out_h * out_w)` matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (f, s, p) = (self.filter, self.stride, self.padding as isize);
        let (ih, iw) = (self.input.height as isize, self.input.width as isize);
        let (oh, ow) = (self.output.height, self.output.width);
        let cols = oh * ow;
        let mut col = vec![0.0; self.rows() * cols];
        for ci in 0..self.input.channels {
            let plane = &input[ci * self.input.plane()..(ci + 1) * self.input.plane()];
            for ky in 0..f {
                for kx in 0..f {
                    let row = (ci * f + ky) * f + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let src = &plane[iy as usize * iw as usize..(iy as usize + 1) * iw as usize];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < iw {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatters a column matrix back onto the input grid, summing overlaps.
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let (f, s, p) = (self.filter, self.stride, self.padding as isize);
        let (ih, iw) = (self.input.height as isize, self.input.width as isize);
        let (oh, ow) = (self.output.height, self.output.width);
        let cols = oh * ow;
        let mut out = vec![0.0; self.input.len()];
        for ci in 0..self.input.channels {
            let plane = &mut out[ci * self.input.plane()..(ci + 1) * self.input.plane()];
            for ky in 0..f {
                for kx in 0..f {
                    let row = (ci * f + ky) * f + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < iw {
                                plane[(iy * iw + ix) as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Output and the unfolded input, which the backward pass reuses.
    pub fn forward(&self, input: &Tensor, weights: &[f64], biases: &[f64]) -> (Tensor, Vec<f64>) {
        let col = self.im2col(input.data());
        let (m, k, n) = (self.output.channels, self.rows(), self.output.plane());
        let mut out = vec![0.0; m * n];
        for (row, b) in out.chunks_exact_mut(n).zip(biases) {
            row.fill(*b);
        }
        gemm(m, k, n, weights, (k, 1), &col, (n, 1), 1.0, &mut out);
        (Tensor::from_raw(self.output, out), col)
    }

    /// Accumulates weight and bias gradients from the unfolded input `col`;
    /// returns the input gradient when `input_grad` is set.
    pub fn backward(
        &self,
        col: &[f64],
        weights: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        input_grad: bool,
    ) -> Option<Tensor> {
        let (m, k, n) = (self.output.channels, self.rows(), self.output.plane());
        for (gb, row) in grad_b.iter_mut().zip(grad_out.chunks_exact(n)) {
            *gb += row.iter().sum::<f64>();
        }
        // dW (m x k) += dOut (m x n) . col^T (n x k)
        gemm(m, n, k, grad_out, (n, 1), col, (1, n), 1.0, grad_w);
        if !input_grad {
            return None;
        }
        // dCol (k x n) = W^T (k x m) . dOut (m x n)
        let mut dcol = vec![0.0; k * n];
        gemm(k, m, n, weights, (1, k), grad_out, (n, 1), 0.0, &mut dcol);
        Some(Tensor::from_raw(self.input, self.col2im(&dcol)))
    }
}

/// Branch-free 2x2 stride-2 pooling without padding, the only window the
/// classifier uses. Ties keep the first maximum in row-major order.
fn max_pool_2x2(geo: &ConvGeometry, data: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let (iw, plane) = (geo.input.width, geo.input.plane());
    let out_shape = geo.output;
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for c in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            let r0 = c * plane + 2 * oy * iw;
            let (top, bottom) = (&data[r0..r0 + iw], &data[r0 + iw..r0 + 2 * iw]);
            for ox in 0..out_shape.width {
                let (a, b) = (top[2 * ox], top[2 * ox + 1]);
                let (c0, d) = (bottom[2 * ox], bottom[2 * ox + 1]);
                let i1 = r0 + 2 * ox + (b > a) as usize;
                let i2 = r0 + iw + 2 * ox + (d > c0) as usize;
                let (m1, m2) = (a.max(b), c0.max(d));
                let lower = (m2 > m1) as usize;
                out.push(m1.max(m2));
                argmax.push((i1 + lower * (i2 - i1)) as u32);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_forward(geo: &ConvGeometry, input: &Tensor) -> (Tensor, Vec<u32>) {
    if (geo.filter, geo.stride, geo.padding) == (2, 2, 0) {
        let (out, argmax) = max_pool_2x2(geo, input.data());
        return (Tensor::from_raw(geo.output, out), argmax);
    }
    let (f, s, p) = (geo.filter, geo.stride, geo.padding as isize);
    let (ih, iw) = (geo.input.height as isize, geo.input.width as isize);
    let out_shape = geo.output;
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = input.data();
    for c in 0..out_shape.channels {
        let base = c * geo.input.plane();
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..f {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= ih {
                        continue;
                    }
                    for kx in 0..f {
                        let ix = (ox * s + kx) as isize - p;
                        if ix < 0 || ix >= iw {
                            continue;
                        }
                        let idx = base + (iy * iw + ix) as usize;
                        // strict comparison keeps the first maximum
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (Tensor::from_raw(out_shape, out), argmax)
}

pub(crate) fn max_pool_backward(input: Shape, argmax: &[u32], grad_out: &[f64]) -> Tensor {
    let mut grad = vec![0.0; input.len()];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad[idx as usize] += g;
    }
    Tensor::from_raw(input, grad)
}

pub(crate) fn fc_forward(input: &Tensor, weights: &[f64], biases: &[f64], out: Shape) -> Tensor {
    let x = input.data();
    let i = x.len();
    let y = biases
        .iter()
        .zip(weights.chunks_exact(i))
        .map(|(b, row)| b + dot(row, x))
        .collect();
    Tensor::from_raw(out, y)
}

pub(crate) fn fc_backward(
    input: &Tensor,
    weights: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    input_grad: bool,
) -> Option<Tensor> {
    let x = input.data();
    let i = x.len();
    for (jdx, &g) in grad_out.iter().enumerate() {
        grad_b[jdx] += g;
        if g != 0.0 {
            for (gw, &xv) in grad_w[jdx * i..(jdx + 1) * i].iter_mut().zip(x) {
                *gw += g * xv;
            }
        }
    }
    if !input_grad {
        return None;
    }
    let mut dx = vec![0.0; i];
    for (row, &g) in weights.chunks_exact(i).zip(grad_out) {
        for (d, &w) in dx.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    Some(Tensor::from_raw(input.shape(), dx))
}

pub(crate) fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_raw(input.shape(), data)
}

pub(crate) fn relu_backward(input: &Tensor, grad_out: &[f64]) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_raw(input.shape(), data)
}

pub(crate) fn sigmoid_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| sigmoid(v)).collect();
    Tensor::from_raw(input.shape(), data)
}

pub(crate) fn sigmoid_backward(output: &Tensor, grad_out: &[f64]) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::from_raw(output.shape(), data)
}
