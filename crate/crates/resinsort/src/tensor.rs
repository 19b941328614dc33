//! Dense tensor engine: forward and backward passes for every layer type the
//! embedding networks use, plus the SGD-with-momentum optimizer.
//!
//! Data layout is row-major height x width x channel throughout; filters are
//! stored as count x kh x kw x in-channels. Everything is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rank-N numeric array with an optional gradient slot of the same
/// shape. The universal carrier for images, feature maps, and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &Tensor) -> Result<()> {
        if delta.shape != self.shape {
            return Err(Error::Shape(format!(
                "grad shape {:?} does not match tensor shape {:?}",
                delta.shape, self.shape
            )));
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (gi, di) in g.iter_mut().zip(&delta.values) {
            *gi += di;
        }
        Ok(())
    }

    /// Scales the gradient slot in place (no-op when absent).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("expected rank-3 tensor, got {s:?}"))),
    }
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, kh, kw, c] => Ok((*n, *kh, *kw, *c)),
        s => Err(Error::Shape(format!("expected rank-4 tensor, got {s:?}"))),
    }
}

/// Output spatial extent of a strided, padded convolution or pooling window.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Convolutional layer: `count` filters of kh x kw x in-channels plus one
/// bias per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(filters: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (n, _, _, _) = dims4(&filters)?;
        if bias.shape() != [n] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match filter count {n}",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        Ok(ConvLayer {
            filters,
            bias,
            stride,
            padding,
        })
    }
}

/// Fully connected layer: weights out x in, bias out.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl FcLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _inp) = match weights.shape() {
            [o, i] => (*o, *i),
            s => {
                return Err(Error::Shape(format!(
                    "fc weights must be rank 2, got {s:?}"
                )))
            }
        };
        if bias.shape() != [out] {
            return Err(Error::Shape(format!(
                "fc bias shape {:?} does not match output count {out}",
                bias.shape()
            )));
        }
        Ok(FcLayer { weights, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// out[i,j,f] = bias[f] + sum over the window of elementwise products.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (h, w, c) = dims3(input)?;
    let (nf, kh, kw, fc) = dims4(&layer.filters)?;
    if fc != c {
        return Err(Error::Shape(format!(
            "filter depth {fc} does not match input depth {c}"
        )));
    }
    let oh = conv_output_extent(h, kh, layer.stride, layer.padding)?;
    let ow = conv_output_extent(w, kw, layer.stride, layer.padding)?;
    let x = input.values();
    let f = layer.filters.values();
    let b = layer.bias.values();
    let mut out = vec![0.0; oh * ow * nf];
    for oi in 0..oh {
        for oj in 0..ow {
            for fi in 0..nf {
                let mut acc = b[fi];
                for ki in 0..kh {
                    let ii = (oi * layer.stride + ki) as isize - layer.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * layer.stride + kj) as isize - layer.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xi = (ii as usize * w + jj as usize) * c;
                        let wi = ((fi * kh + ki) * kw + kj) * c;
                        for kc in 0..c {
                            acc += x[xi + kc] * f[wi + kc];
                        }
                    }
                }
                out[(oi * ow + oj) * nf + fi] = acc;
            }
        }
    }
    Tensor::new(vec![oh, ow, nf], out)
}

/// Gradients of a scalar loss w.r.t. input, filters, and bias under the
/// forward definition above.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, c) = dims3(input)?;
    let (nf, kh, kw, _fc) = dims4(&layer.filters)?;
    let oh = conv_output_extent(h, kh, layer.stride, layer.padding)?;
    let ow = conv_output_extent(w, kw, layer.stride, layer.padding)?;
    if grad_out.shape() != [oh, ow, nf] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match conv output [{oh}, {ow}, {nf}]",
            grad_out.shape()
        )));
    }
    let x = input.values();
    let f = layer.filters.values();
    let go = grad_out.values();
    let mut gx = vec![0.0; x.len()];
    let mut gf = vec![0.0; f.len()];
    let mut gb = vec![0.0; nf];
    for oi in 0..oh {
        for oj in 0..ow {
            for fi in 0..nf {
                let g = go[(oi * ow + oj) * nf + fi];
                if g == 0.0 {
                    continue;
                }
                gb[fi] += g;
                for ki in 0..kh {
                    let ii = (oi * layer.stride + ki) as isize - layer.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * layer.stride + kj) as isize - layer.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xi = (ii as usize * w + jj as usize) * c;
                        let wi = ((fi * kh + ki) * kw + kj) * c;
                        for kc in 0..c {
                            gx[xi + kc] += g * f[wi + kc];
                            gf[wi + kc] += g * x[xi + kc];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(layer.filters.shape().to_vec(), gf)?,
        Tensor::new(vec![nf], gb)?,
    ))
}

/// max(0, x) elementwise.
pub fn relu(input: &Tensor) -> Tensor {
    let values = input.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape.clone(),
        values,
        grad: None,
    }
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu grad shape {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let values = input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape.clone(),
        values,
        grad: None,
    })
}

/// Channelwise window maximum. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element (ties: first index
/// in row-major scan order).
pub fn maxpool_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = dims3(input)?;
    if window == 0 || window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} invalid for input {h}x{w}"
        )));
    }
    let oh = conv_output_extent(h, window, stride, 0)?;
    let ow = conv_output_extent(w, window, stride, 0)?;
    let x = input.values();
    let mut out = vec![0.0; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oi in 0..oh {
        for oj in 0..ow {
            for kc in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ki in 0..window {
                    for kj in 0..window {
                        let ii = oi * stride + ki;
                        let jj = oj * stride + kj;
                        let xi = (ii * w + jj) * c + kc;
                        if x[xi] > best {
                            best = x[xi];
                            best_idx = xi;
                        }
                    }
                }
                let o = (oi * ow + oj) * c + kc;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

/// Routes each output gradient back to its stored argmax position.
pub fn maxpool_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "argmax length {} does not match grad_out length {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec());
    for (&src, &g) in argmax.iter().zip(grad_out.values()) {
        gx.values[src] += g;
    }
    Ok(gx)
}

/// y = W . flatten(x) + b.
pub fn fc_forward(input: &Tensor, layer: &FcLayer) -> Result<Tensor> {
    let n_in = layer.in_features();
    if input.len() != n_in {
        return Err(Error::Shape(format!(
            "fc input length {} does not match weight columns {n_in}",
            input.len()
        )));
    }
    let n_out = layer.out_features();
    let x = input.values();
    let w = layer.weights.values();
    let mut out = layer.bias.values().to_vec();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *out_v += acc;
    }
    Tensor::new(vec![n_out], out)
}

/// Gradients w.r.t. input (reshaped to the forward input's shape), weights,
/// and bias.
pub fn fc_backward(
    input: &Tensor,
    layer: &FcLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n_in = layer.in_features();
    let n_out = layer.out_features();
    if input.len() != n_in {
        return Err(Error::Shape(format!(
            "fc input length {} does not match weight columns {n_in}",
            input.len()
        )));
    }
    if grad_out.len() != n_out {
        return Err(Error::Shape(format!(
            "fc grad_out length {} does not match output count {n_out}",
            grad_out.len()
        )));
    }
    let x = input.values();
    let w = layer.weights.values();
    let go = grad_out.values();
    let mut gx = vec![0.0; n_in];
    let mut gw = vec![0.0; n_in * n_out];
    for o in 0..n_out {
        let g = go[o];
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            gx[i] += g * row[i];
            grow[i] = g * x[i];
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(vec![n_out, n_in], gw)?,
        Tensor::new(vec![n_out], go.to_vec())?,
    ))
}

/// Per-parameter velocity buffers for classical (Polyak) momentum.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn new(learning_rate: f64, momentum: f64, param_sizes: &[usize]) -> Result<Self> {
        if learning_rate < 0.0 {
            return Err(Error::Data("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Data("momentum must lie in [0, 1)".into()));
        }
        Ok(MomentumState {
            learning_rate,
            momentum,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// v <- momentum * v + grad; p <- p - learning_rate * v.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "optimizer saw {} params / {} grads, expected {}",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.len() != v.len() {
                return Err(Error::Shape(format!(
                    "optimizer shape mismatch: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, gv), vv) in p.values_mut().iter_mut().zip(g.values()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

/// Elementwise |a_i - b_i|. A vector, not a scalar: it feeds the Siamese
/// head's fully connected layer.
pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "l1 distance over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "euclidean distance over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Squared Euclidean norm of a - b, the quantity the triplet loss compares.
pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "squared distance over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
