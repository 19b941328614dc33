//! Siamese and triplet embedding network architectures and their losses.
//!
//! A trunk is a stack of conv / relu / max-pool / fully-connected layers
//! ending in a fixed-width embedding. The Siamese model evaluates one shared
//! trunk on both inputs, compares the embeddings componentwise with the L1
//! distance, and maps the distance vector to a single probability through a
//! fully connected head plus sigmoid. The triplet model shares one trunk
//! across anchor, positive, and negative branches and trains with a hinged
//! margin loss on squared Euclidean distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_extent, fc_backward, fc_forward, l1_distance,
    maxpool_backward, maxpool_forward, relu, relu_backward, squared_distance, ConvLayer, FcLayer,
    Tensor,
};

/// Probability floor used when evaluating the cross-entropy loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// One layer of a trunk, by hyperparameters only (weights live in [`Trunk`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Fc {
        out: usize,
    },
}

/// Input extents plus the ordered layer stack of a trunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl TrunkConfig {
    /// Full-size trunk for 105x105x3 inputs: four conv layers (64, 128, 128,
    /// 256 filters with kernels 10, 7, 4, 4), ReLU after each conv, 2x2
    /// stride-2 max-pool after the first three, then a fully connected layer
    /// of `embedding` units.
    pub fn full(embedding: usize) -> Self {
        TrunkConfig {
            input: [105, 105, 3],
            layers: vec![
                LayerSpec::Conv {
                    filters: 64,
                    kernel: 10,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: 128,
                    kernel: 7,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: 128,
                    kernel: 4,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: 256,
                    kernel: 4,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Fc { out: embedding },
            ],
        }
    }

    /// Reduced trunk for 32x32x3 inputs, used for fast runs and gradient
    /// checks.
    pub fn mini(embedding: usize) -> Self {
        TrunkConfig {
            input: [32, 32, 3],
            layers: vec![
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Fc { out: embedding },
            ],
        }
    }

    /// Shape after each layer; errors when consecutive layers do not compose.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<usize> = self.input.to_vec();
        for spec in &self.layers {
            cur = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = spatial(&cur)?;
                    let oh = conv_output_extent(h, kernel, stride, padding)?;
                    let ow = conv_output_extent(w, kernel, stride, padding)?;
                    vec![oh, ow, filters]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { window, stride } => {
                    let (h, w) = spatial(&cur)?;
                    let oh = conv_output_extent(h, window, stride, 0)?;
                    let ow = conv_output_extent(w, window, stride, 0)?;
                    vec![oh, ow, cur[2]]
                }
                LayerSpec::Fc { out } => vec![out],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Length of the final layer output, i.e. the embedding width.
    pub fn output_len(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let last = shapes
            .last()
            .ok_or_else(|| Error::Shape("trunk has no layers".into()))?;
        Ok(last.iter().product())
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w, _c] => Ok((*h, *w)),
        s => Err(Error::Shape(format!(
            "conv/pool needs a rank-3 input, got {s:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { window: usize, stride: usize },
    Fc(FcLayer),
}

/// A trunk with materialized weights. One instance serves every branch of a
/// Siamese or triplet model, so weight sharing is structural.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    layers: Vec<Layer>,
}

/// Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, values).expect("internal init shape")
}

impl Trunk {
    /// Builds a trunk with seeded Glorot-uniform weights and zero biases.
    pub fn init(config: TrunkConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, &mut |shape, fan_in, fan_out, rng_needed| {
            if rng_needed {
                glorot(shape, fan_in, fan_out, rng)
            } else {
                Tensor::zeros(shape)
            }
        })
    }

    /// Builds a trunk with all-zero parameters (checkpoint loading target).
    pub fn zeroed(config: TrunkConfig) -> Result<Self> {
        Self::build(config, &mut |shape, _, _, _| Tensor::zeros(shape))
    }

    fn build(
        config: TrunkConfig,
        make: &mut dyn FnMut(Vec<usize>, usize, usize, bool) -> Tensor,
    ) -> Result<Self> {
        let shapes = config.layer_shapes()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut cur: Vec<usize> = config.input.to_vec();
        for (spec, out_shape) in config.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let depth = cur[2];
                    let fan_in = kernel * kernel * depth;
                    let fan_out = kernel * kernel * filters;
                    Layer::Conv(ConvLayer::new(
                        make(vec![filters, kernel, kernel, depth], fan_in, fan_out, true),
                        make(vec![filters], 0, 0, false),
                        stride,
                        padding,
                    )?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::Fc { out } => {
                    let n_in: usize = cur.iter().product();
                    Layer::Fc(FcLayer::new(
                        make(vec![out, n_in], n_in, out, true),
                        make(vec![out], 0, 0, false),
                    )?)
                }
            };
            layers.push(layer);
            cur = out_shape.clone();
        }
        Ok(Trunk { config, layers })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input
    }

    pub fn embedding_len(&self) -> usize {
        self.config.output_len().expect("validated at build time")
    }

    /// Parameter tensors in declaration order (the checkpoint order).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.filters);
                    out.push(&c.bias);
                }
                Layer::Fc(f) => {
                    out.push(&f.weights);
                    out.push(&f.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.filters);
                    out.push(&mut c.bias);
                }
                Layer::Fc(f) => {
                    out.push(&mut f.weights);
                    out.push(&mut f.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Forward pass retaining per-layer inputs for the backward pass.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, TrunkCache)> {
        if x.shape() != self.config.input {
            return Err(Error::Shape(format!(
                "trunk input shape {:?}, expected {:?}",
                x.shape(),
                self.config.input
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let (next, arg) = match layer {
                Layer::Conv(c) => (conv2d_forward(&cur, c)?, None),
                Layer::Relu => (relu(&cur), None),
                Layer::MaxPool { window, stride } => {
                    let (y, a) = maxpool_forward(&cur, *window, *stride)?;
                    (y, Some(a))
                }
                Layer::Fc(f) => (fc_forward(&cur, f)?, None),
            };
            argmax.push(arg);
            cur = next;
        }
        Ok((cur, TrunkCache { inputs, argmax }))
    }

    /// Embedding only (inference path).
    pub fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0.values().to_vec())
    }

    /// Backpropagates `grad_out` through the cached forward pass. Returns the
    /// gradient w.r.t. the input and per-parameter gradients in the same
    /// order as [`Trunk::params`]. The model itself is not mutated.
    pub fn backward(&self, cache: &TrunkCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut param_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.layers.len()];
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            grad = match layer {
                Layer::Conv(c) => {
                    let (gx, gf, gb) = conv2d_backward(input, c, &grad)?;
                    param_grads[i] = Some((gf, gb));
                    gx
                }
                Layer::Relu => relu_backward(input, &grad)?,
                Layer::MaxPool { .. } => {
                    let arg = cache.argmax[i]
                        .as_ref()
                        .ok_or_else(|| Error::Shape("missing pool cache".into()))?;
                    maxpool_backward(input.shape(), arg, &grad)?
                }
                Layer::Fc(f) => {
                    let (gx, gw, gb) = fc_backward(input, f, &grad)?;
                    param_grads[i] = Some((gw, gb));
                    gx
                }
            };
        }
        let mut flat = Vec::new();
        for pg in param_grads.into_iter().flatten() {
            flat.push(pg.0);
            flat.push(pg.1);
        }
        Ok((grad, flat))
    }
}

/// Activations recorded during [`Trunk::forward`].
#[derive(Debug, Clone)]
pub struct TrunkCache {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

/// Shared trunk plus a fully connected head mapping the L1 distance vector
/// to a single logit.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    pub trunk: Trunk,
    pub head: FcLayer,
}

impl SiameseModel {
    pub fn init(config: TrunkConfig, rng: &mut impl Rng) -> Result<Self> {
        let trunk = Trunk::init(config, rng)?;
        let e = trunk.embedding_len();
        let head = FcLayer::new(glorot(vec![1, e], e, 1, rng), Tensor::zeros(vec![1]))?;
        Ok(SiameseModel { trunk, head })
    }

    pub fn zeroed(config: TrunkConfig) -> Result<Self> {
        let trunk = Trunk::zeroed(config)?;
        let e = trunk.embedding_len();
        let head = FcLayer::new(Tensor::zeros(vec![1, e]), Tensor::zeros(vec![1]))?;
        Ok(SiameseModel { trunk, head })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.push(&self.head.weights);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.push(&mut self.head.weights);
        p.push(&mut self.head.bias);
        p
    }
}

/// Shared trunk producing embeddings compared by the triplet loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletModel {
    pub trunk: Trunk,
    pub margin: f64,
}

impl TripletModel {
    pub fn init(config: TrunkConfig, margin: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(TripletModel {
            trunk: Trunk::init(config, rng)?,
            margin,
        })
    }

    pub fn zeroed(config: TrunkConfig, margin: f64) -> Result<Self> {
        Ok(TripletModel {
            trunk: Trunk::zeroed(config)?,
            margin,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// p = sigmoid(head(l1_distance(trunk(x1), trunk(x2)))). Symmetric in its
/// arguments because the trunk is shared and L1 distance is symmetric.
pub fn siamese_forward(model: &SiameseModel, x1: &Tensor, x2: &Tensor) -> Result<f64> {
    let e1 = model.trunk.embed(x1)?;
    let e2 = model.trunk.embed(x2)?;
    let d = Tensor::from_vec(l1_distance(&e1, &e2)?);
    let logit = fc_forward(&d, &model.head)?;
    Ok(sigmoid(logit.values()[0]))
}

/// Binary cross-entropy with target t = 1 - y, so same-class pairs (y = 0)
/// drive p toward 1. `p` is clamped away from {0, 1} before the logs.
pub fn siamese_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let t = 1.0 - f64::from(y);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Deterministic 128-or-configured-width embedding of one image.
pub fn triplet_embed(model: &TripletModel, x: &Tensor) -> Result<Vec<f64>> {
    model.trunk.embed(x)
}

/// max(0, ||fa - fp||^2 - ||fa - fn||^2 + margin).
pub fn triplet_loss(fa: &[f64], fp: &[f64], fneg: &[f64], margin: f64) -> Result<f64> {
    let d_ap = squared_distance(fa, fp)?;
    let d_an = squared_distance(fa, fneg)?;
    Ok((d_ap - d_an + margin).max(0.0))
}
