//! A small layer library with explicit reverse-mode gradients.
//!
//! Networks are described by a serializable list of [`LayerSpec`]s and own
//! their parameters as a flat list of named [`Param`] arrays. A forward pass
//! can record a [`Trace`], which [`Network::backward`] consumes to produce the
//! gradient with respect to the input and, optionally, every parameter.
//!
//! Everything runs single-threaded in a fixed order, so identical inputs give
//! bitwise-identical outputs and gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Architecture description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square convolution with "same" zero padding (`kernel / 2`).
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    /// Nearest-neighbour 2× upsampling.
    Upsample2,
    GlobalAvgPool,
    /// Fully connected layer over the flattened `c·h·w` features.
    Linear {
        inputs: usize,
        outputs: usize,
    },
    /// `y = x + body(x)`.
    Residual {
        body: Vec<LayerSpec>,
    },
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Per-parameter gradient buffers, index-aligned with [`Network::params`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        weight: usize,
        bias: usize,
    },
    LeakyRelu(f64),
    Upsample2,
    GlobalAvgPool,
    Linear {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    Residual(Vec<Layer>),
}

#[derive(Debug, Clone)]
enum Cache {
    Conv {
        cols: Vec<f64>,
        in_shape: [usize; 4],
        out_hw: (usize, usize),
    },
    LeakyRelu(Tensor),
    Upsample([usize; 4]),
    Pool([usize; 4]),
    Linear(Tensor),
    Residual(Vec<Cache>),
}

/// Intermediate values recorded by [`Network::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
}

/// A feed-forward network built from [`LayerSpec`]s.
#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

impl Network {
    /// Builds the network and initializes parameters from `rng`
    /// (He-uniform weights, zero biases).
    pub fn build<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut params = Vec::new();
        let layers = build_layers(specs, "", &mut params)?;
        for p in params.iter_mut() {
            if p.name.ends_with("weight") {
                let fan_in: usize = p.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in p.value.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Network {
            specs: specs.to_vec(),
            layers,
            params,
        })
    }

    /// Rebuilds a network from its specs and previously saved parameters.
    pub fn from_parts(specs: &[LayerSpec], saved: Vec<Param>) -> Result<Self> {
        let mut params = Vec::new();
        let layers = build_layers(specs, "", &mut params)?;
        if saved.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameter arrays, checkpoint has {}",
                params.len(),
                saved.len()
            )));
        }
        for (expected, got) in params.iter().zip(&saved) {
            if expected.name != got.name
                || expected.shape != got.shape
                || got.value.len() != expected.value.len()
            {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match saved {} {:?}",
                    expected.name, expected.shape, got.name, got.shape
                )));
            }
        }
        Ok(Network {
            specs: specs.to_vec(),
            layers,
            params: saved,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.iter().map(|p| vec![0.0; p.value.len()]).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_layer(layer, &self.params, cur, None);
        }
        cur
    }

    pub fn forward_trace(&self, x: &Tensor) -> (Tensor, Trace) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_layer(layer, &self.params, cur, Some(&mut caches));
        }
        (cur, Trace { caches })
    }

    /// Back-propagates `grad_out` through a recorded forward pass. Parameter
    /// gradients are accumulated into `grads` when given.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, mut grads: Option<&mut Gradients>) -> Tensor {
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            g = backward_layer(layer, cache, &self.params, g, grads.as_deref_mut());
        }
        g
    }
}

fn build_layers(specs: &[LayerSpec], prefix: &str, params: &mut Vec<Param>) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{prefix}{i}");
        let layer = match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if kernel == 0 || kernel % 2 == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                    return Err(Error::Config(format!(
                        "layer {name}: conv needs odd kernel and positive sizes, got {spec:?}"
                    )));
                }
                let weight = push_param(
                    params,
                    format!("{name}.conv.weight"),
                    vec![out_channels, in_channels, kernel, kernel],
                );
                let bias = push_param(params, format!("{name}.conv.bias"), vec![out_channels]);
                Layer::Conv {
                    in_c: in_channels,
                    out_c: out_channels,
                    k: kernel,
                    stride,
                    weight,
                    bias,
                }
            }
            LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(slope),
            LayerSpec::Upsample2 => Layer::Upsample2,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Linear { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Config(format!("layer {name}: empty linear layer")));
                }
                let weight = push_param(params, format!("{name}.linear.weight"), vec![outputs, inputs]);
                let bias = push_param(params, format!("{name}.linear.bias"), vec![outputs]);
                Layer::Linear {
                    inputs,
                    outputs,
                    weight,
                    bias,
                }
            }
            LayerSpec::Residual { ref body } => {
                Layer::Residual(build_layers(body, &format!("{name}.body."), params)?)
            }
        };
        layers.push(layer);
    }
    Ok(layers)
}

fn push_param(params: &mut Vec<Param>, name: String, shape: Vec<usize>) -> usize {
    let len = shape.iter().product();
    params.push(Param {
        name,
        shape,
        value: vec![0.0; len],
    });
    params.len() - 1
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

/// Unfolds all samples into a `(c·k·k) × (n·oh·ow)` column matrix.
fn im2col(x: &Tensor, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape();
    let pad = (k / 2) as isize;
    let cols_per_sample = oh * ow;
    let total_cols = n * cols_per_sample;
    let mut cols = vec![0.0; c * k * k * total_cols];
    let data = x.data();
    for s in 0..n {
        for ci in 0..c {
            let plane = &data[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * total_cols + s * cols_per_sample..][..cols_per_sample];
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], in_shape: [usize; 4], k: usize, stride: usize, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = in_shape;
    let pad = (k / 2) as isize;
    let cols_per_sample = oh * ow;
    let total_cols = n * cols_per_sample;
    let mut out = Tensor::zeros(in_shape);
    let data = out.data_mut();
    for s in 0..n {
        for ci in 0..c {
            let plane = &mut data[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * total_cols + s * cols_per_sample..][..cols_per_sample];
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn forward_layer(layer: &Layer, params: &[Param], x: Tensor, caches: Option<&mut Vec<Cache>>) -> Tensor {
    match *layer {
        Layer::Conv {
            in_c,
            out_c,
            k,
            stride,
            weight,
            bias,
        } => {
            let [n, c, h, w] = x.shape();
            assert_eq!(c, in_c, "conv expects {in_c} input channels, got {c}");
            let (oh, ow) = (conv_out(h, k, stride), conv_out(w, k, stride));
            let cols = im2col(&x, k, stride, oh, ow);
            let total = n * oh * ow;
            let ckk = in_c * k * k;
            let mut y = vec![0.0; out_c * total];
            gemm(
                out_c,
                ckk,
                total,
                1.0,
                (&params[weight].value, ckk as isize, 1),
                (&cols, total as isize, 1),
                0.0,
                &mut y,
            );
            let b = &params[bias].value;
            let mut out = Tensor::zeros([n, out_c, oh, ow]);
            let od = out.data_mut();
            for s in 0..n {
                for o in 0..out_c {
                    let src = &y[o * total + s * oh * ow..][..oh * ow];
                    let dst = &mut od[(s * out_c + o) * oh * ow..][..oh * ow];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + b[o];
                    }
                }
            }
            if let Some(caches) = caches {
                caches.push(Cache::Conv {
                    cols,
                    in_shape: x.shape(),
                    out_hw: (oh, ow),
                });
            }
            out
        }
        Layer::LeakyRelu(slope) => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v *= slope;
                }
            }
            if let Some(caches) = caches {
                caches.push(Cache::LeakyRelu(x));
            }
            out
        }
        Layer::Upsample2 => {
            let [n, c, h, w] = x.shape();
            let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
            let src = x.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dst[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                    }
                }
            }
            if let Some(caches) = caches {
                caches.push(Cache::Upsample(x.shape()));
            }
            out
        }
        Layer::GlobalAvgPool => {
            let [n, c, h, w] = x.shape();
            let hw = (h * w) as f64;
            let mut out = Tensor::zeros([n, c, 1, 1]);
            for p in 0..n * c {
                out.data_mut()[p] = x.data()[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / hw;
            }
            if let Some(caches) = caches {
                caches.push(Cache::Pool(x.shape()));
            }
            out
        }
        Layer::Linear {
            inputs,
            outputs,
            weight,
            bias,
        } => {
            let n = x.n();
            assert_eq!(x.sample_len(), inputs, "linear expects {inputs} features");
            let mut y = vec![0.0; n * outputs];
            for s in 0..n {
                y[s * outputs..(s + 1) * outputs].copy_from_slice(&params[bias].value);
            }
            gemm(
                n,
                inputs,
                outputs,
                1.0,
                (x.data(), inputs as isize, 1),
                (&params[weight].value, 1, inputs as isize),
                1.0,
                &mut y,
            );
            if let Some(caches) = caches {
                caches.push(Cache::Linear(x));
            }
            Tensor::from_vec([n, outputs, 1, 1], y).expect("linear output shape")
        }
        Layer::Residual(ref body) => match caches {
            Some(caches) => {
                let mut inner = Vec::with_capacity(body.len());
                let mut cur = x.clone();
                for l in body {
                    cur = forward_layer(l, params, cur, Some(&mut inner));
                }
                caches.push(Cache::Residual(inner));
                cur.add_assign(&x);
                cur
            }
            None => {
                let mut cur = x.clone();
                for l in body {
                    cur = forward_layer(l, params, cur, None);
                }
                cur.add_assign(&x);
                cur
            }
        },
    }
}

fn backward_layer(
    layer: &Layer,
    cache: &Cache,
    params: &[Param],
    g: Tensor,
    mut grads: Option<&mut Gradients>,
) -> Tensor {
    match (layer, cache) {
        (
            &Layer::Conv {
                in_c,
                out_c,
                k,
                stride,
                weight,
                bias,
            },
            Cache::Conv {
                cols,
                in_shape,
                out_hw: (oh, ow),
            },
        ) => {
            let n = in_shape[0];
            let (oh, ow) = (*oh, *ow);
            let total = n * oh * ow;
            let ckk = in_c * k * k;
            // regroup grad from [n, out_c, oh*ow] into out_c × (n·oh·ow)
            let mut gm = vec![0.0; out_c * total];
            for s in 0..n {
                for o in 0..out_c {
                    gm[o * total + s * oh * ow..][..oh * ow]
                        .copy_from_slice(&g.data()[(s * out_c + o) * oh * ow..][..oh * ow]);
                }
            }
            if let Some(grads) = grads.as_deref_mut() {
                gemm(
                    out_c,
                    total,
                    ckk,
                    1.0,
                    (&gm, total as isize, 1),
                    (cols, 1, total as isize),
                    1.0,
                    &mut grads[weight],
                );
                for o in 0..out_c {
                    grads[bias][o] += gm[o * total..(o + 1) * total].iter().sum::<f64>();
                }
            }
            let mut dcols = vec![0.0; ckk * total];
            gemm(
                ckk,
                out_c,
                total,
                1.0,
                (&params[weight].value, 1, ckk as isize),
                (&gm, total as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, *in_shape, k, stride, oh, ow)
        }
        (&Layer::LeakyRelu(slope), Cache::LeakyRelu(input)) => {
            let mut g = g;
            for (gv, xv) in g.data_mut().iter_mut().zip(input.data()) {
                if *xv < 0.0 {
                    *gv *= slope;
                }
            }
            g
        }
        (Layer::Upsample2, Cache::Upsample(in_shape)) => {
            let [n, c, h, w] = *in_shape;
            let mut out = Tensor::zeros(*in_shape);
            let src = g.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dst[(p * h + i / 2) * w + j / 2] += src[(p * 2 * h + i) * 2 * w + j];
                    }
                }
            }
            out
        }
        (Layer::GlobalAvgPool, Cache::Pool(in_shape)) => {
            let [n, c, h, w] = *in_shape;
            let hw = (h * w) as f64;
            let mut out = Tensor::zeros(*in_shape);
            for p in 0..n * c {
                let v = g.data()[p] / hw;
                out.data_mut()[p * h * w..(p + 1) * h * w].fill(v);
            }
            out
        }
        (
            &Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            },
            Cache::Linear(input),
        ) => {
            let n = input.n();
            if let Some(grads) = grads.as_deref_mut() {
                gemm(
                    outputs,
                    n,
                    inputs,
                    1.0,
                    (g.data(), 1, outputs as isize),
                    (input.data(), inputs as isize, 1),
                    1.0,
                    &mut grads[weight],
                );
                for s in 0..n {
                    for o in 0..outputs {
                        grads[bias][o] += g.data()[s * outputs + o];
                    }
                }
            }
            let mut dx = vec![0.0; n * inputs];
            gemm(
                n,
                outputs,
                inputs,
                1.0,
                (g.data(), outputs as isize, 1),
                (&params[weight].value, inputs as isize, 1),
                0.0,
                &mut dx,
            );
            Tensor::from_vec(input.shape(), dx).expect("linear input shape")
        }
        (Layer::Residual(body), Cache::Residual(inner)) => {
            let mut cur = g.clone();
            for (l, c) in body.iter().zip(inner).rev() {
                cur = backward_layer(l, c, params, cur, grads.as_deref_mut());
            }
            cur.add_assign(&g);
            cur
        }
        _ => unreachable!("trace does not belong to this network"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn test_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
            },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Residual {
                body: vec![
                    LayerSpec::Conv {
                        in_channels: 3,
                        out_channels: 3,
                        kernel: 3,
                        stride: 1,
                    },
                    LayerSpec::LeakyRelu { slope: 0.2 },
                ],
            },
            LayerSpec::Upsample2,
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 2,
                kernel: 1,
                stride: 1,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { inputs: 2, outputs: 2 },
        ]
    }

    // weighted sum of outputs, so every output coordinate matters
    fn probe(out: &Tensor) -> f64 {
        out.data().iter().enumerate().map(|(i, v)| v * (1.0 + i as f64 * 0.37)).sum()
    }

    fn probe_grad(out: &Tensor) -> Tensor {
        let data = (0..out.data().len()).map(|i| 1.0 + i as f64 * 0.37).collect();
        Tensor::from_vec(out.shape(), data).unwrap()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Network::build(&test_specs(), &mut rng).unwrap();
        for p in net.params_mut() {
            for v in p.value.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let x = random_tensor([2, 2, 6, 6], &mut rng);
        let (out, trace) = net.forward_trace(&x);
        let mut grads = net.zero_grads();
        let gx = net.backward(&trace, &probe_grad(&out), Some(&mut grads));

        let h = 1e-6;
        for idx in [0usize, 5, 17, 40, 71] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (probe(&net.forward(&xp)) - probe(&net.forward(&xm))) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "input {idx}");
        }
        for pi in 0..net.params().len() {
            for j in [0usize, 1] {
                if j >= net.params()[pi].value.len() {
                    continue;
                }
                let mut plus = net.clone();
                plus.params_mut()[pi].value[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[j] -= h;
                let fd = (probe(&plus.forward(&x)) - probe(&minus.forward(&x))) / (2.0 * h);
                assert!(
                    (fd - grads[pi][j]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {} [{j}]: fd {fd} vs analytic {}",
                    net.params()[pi].name,
                    grads[pi][j]
                );
            }
        }
    }

    #[test]
    fn traced_and_plain_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::build(&test_specs(), &mut rng).unwrap();
        let x = random_tensor([3, 2, 8, 8], &mut rng);
        assert_eq!(net.forward(&x), net.forward_trace(&x).0);
    }

    #[test]
    fn from_parts_rejects_mismatched_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::build(&test_specs(), &mut rng).unwrap();
        let mut saved = net.params().to_vec();
        saved[0].shape = vec![1];
        assert!(Network::from_parts(&test_specs(), saved).is_err());
        assert!(Network::from_parts(&test_specs(), net.params().to_vec()).is_ok());
    }

    #[test]
    fn even_kernel_is_a_config_error() {
        let spec = [LayerSpec::Conv {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 1,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Network::build(&spec, &mut rng), Err(Error::Config(_))));
    }
}
