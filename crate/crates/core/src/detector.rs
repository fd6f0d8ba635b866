//! The binary forgery classifier and its cross-entropy loss.
//!
//! Label convention: 0 = real, 1 = fake. Logit index 1 is the fake class.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerSpec, Network, Param};
use crate::tensor::Tensor;

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

/// Anything attacks can target: a two-logit model with input gradients.
pub trait Classifier {
    /// Identifier recorded in adversarial-example provenance.
    fn model_id(&self) -> &str;

    /// Two logits per sample.
    fn logits(&self, x: &Tensor) -> Result<Vec<[f64; 2]>>;

    /// Per-sample cross-entropy losses and the gradient of their sum with
    /// respect to the input. Samples do not interact, so row `i` of the
    /// gradient is the gradient of sample `i`'s own loss.
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[u8]) -> Result<(Vec<f64>, Tensor)>;

    fn losses(&self, x: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
        check_labels(labels, x.n())?;
        Ok(self
            .logits(x)?
            .iter()
            .zip(labels)
            .map(|(z, &y)| cross_entropy(*z, y))
            .collect())
    }

    /// Softmax probability of the fake class.
    fn fake_probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.iter().map(|z| fake_prob(*z)).collect())
    }
}

pub fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 (real) or 1 (fake)")));
    }
    Ok(())
}

/// `-log softmax(z)[y]`, computed stably.
pub fn cross_entropy(z: [f64; 2], y: u8) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[y as usize]
}

pub fn fake_prob(z: [f64; 2]) -> f64 {
    1.0 / (1.0 + (z[0] - z[1]).exp())
}

/// `∂CE/∂z = softmax(z) − onehot(y)`.
fn cross_entropy_grad(z: [f64; 2], y: u8) -> [f64; 2] {
    let p1 = fake_prob(z);
    let p = [1.0 - p1, p1];
    let mut g = p;
    g[y as usize] -= 1.0;
    g
}

/// Mean cross-entropy of a batch of logits.
pub fn mean_cross_entropy(logits: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    check_labels(labels, logits.len())?;
    if logits.is_empty() {
        return Err(Error::Validation("loss of an empty batch".into()));
    }
    Ok(logits.iter().zip(labels).map(|(z, &y)| cross_entropy(*z, y)).sum::<f64>() / logits.len() as f64)
}

/// Backbone shape: a stack of conv + LeakyReLU blocks, global average pool,
/// then a linear head with two logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorArch {
    pub in_channels: usize,
    /// Inputs are mapped to `(x - input_mean) / input_std` before the first layer.
    pub input_mean: f64,
    pub input_std: f64,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
}

impl Default for DetectorArch {
    fn default() -> Self {
        DetectorArch {
            in_channels: 3,
            input_mean: 0.5,
            input_std: 0.5,
            widths: vec![8, 16, 32, 32],
            strides: vec![1, 2, 2, 2],
            kernel: 3,
            slope: 0.2,
        }
    }
}

impl DetectorArch {
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if !(self.input_mean.is_finite() && self.input_std.is_finite() && self.input_std > 0.0) {
            return Err(Error::Config(format!(
                "input normalization needs a finite mean and positive std, got {} and {}",
                self.input_mean, self.input_std
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "detector needs matching non-empty widths and strides, got {} and {}",
                self.widths.len(),
                self.strides.len()
            )));
        }
        let mut layers = Vec::new();
        let mut c = self.in_channels;
        for (&w, &s) in self.widths.iter().zip(&self.strides) {
            layers.push(LayerSpec::Conv {
                in_channels: c,
                out_channels: w,
                kernel: self.kernel,
                stride: s,
            });
            layers.push(LayerSpec::LeakyRelu { slope: self.slope });
            c = w;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear { inputs: c, outputs: 2 });
        Ok(layers)
    }
}

/// A trainable two-logit classifier over NCHW batches in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Detector {
    id: String,
    in_channels: usize,
    norm: [f64; 2],
    net: Network,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(id: impl Into<String>, arch: &DetectorArch, rng: &mut R) -> Result<Self> {
        Ok(Detector::from_layers(id, &arch.layers()?, rng)?.with_input_norm(arch.input_mean, arch.input_std))
    }

    /// Builds a detector from an arbitrary backbone. The layer list must take
    /// an image batch and end in exactly two outputs per sample.
    pub fn from_layers<R: Rng + ?Sized>(id: impl Into<String>, layers: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let in_channels = check_backbone(layers)?;
        Ok(Detector {
            id: id.into(),
            in_channels,
            norm: [0.0, 1.0],
            net: Network::build(layers, rng)?,
        })
    }

    pub fn from_parts(id: impl Into<String>, layers: &[LayerSpec], params: Vec<Param>) -> Result<Self> {
        let in_channels = check_backbone(layers)?;
        Ok(Detector {
            id: id.into(),
            in_channels,
            norm: [0.0, 1.0],
            net: Network::from_parts(layers, params)?,
        })
    }

    /// Sets the affine input map `(x - mean) / std`; the identity by default.
    pub fn with_input_norm(mut self, mean: f64, std: f64) -> Self {
        self.norm = [mean, std];
        self
    }

    fn prepare<'a>(&self, x: &'a Tensor) -> Cow<'a, Tensor> {
        let [mean, std] = self.norm;
        if mean == 0.0 && std == 1.0 {
            return Cow::Borrowed(x);
        }
        let mut y = x.clone();
        for v in y.data_mut() {
            *v = (*v - mean) / std;
        }
        Cow::Owned(y)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[Param] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        self.net.params_mut()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "detector expects {} channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        if x.n() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, x: &Tensor, labels: &[u8]) -> Result<f64> {
        mean_cross_entropy(&self.logits(x)?, labels)
    }

    /// Gradient of `weight · mean CE` with respect to every parameter,
    /// accumulated into `grads`. Returns the unweighted mean loss.
    pub fn accumulate_param_grad(&self, x: &Tensor, labels: &[u8], weight: f64, grads: &mut Gradients) -> Result<f64> {
        self.check_input(x)?;
        check_labels(labels, x.n())?;
        let (out, trace) = self.net.forward_trace(&self.prepare(x));
        let logits = to_logits(&out)?;
        let loss = mean_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} in detector {}", self.id)));
        }
        let scale = weight / x.n() as f64;
        let g = logit_grads(&logits, labels, scale);
        self.net.backward(&trace, &g, Some(grads));
        Ok(loss)
    }

    /// Mean loss and its parameter gradient.
    pub fn loss_and_param_grad(&self, x: &Tensor, labels: &[u8]) -> Result<(f64, Gradients)> {
        let mut grads = self.net.zero_grads();
        let loss = self.accumulate_param_grad(x, labels, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Hard predictions at threshold 0.5 on the fake probability.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self.fake_probs(x)?.iter().map(|&p| u8::from(p >= 0.5)).collect())
    }
}

fn check_backbone(layers: &[LayerSpec]) -> Result<usize> {
    let in_channels = match layers.first() {
        Some(LayerSpec::Conv { in_channels, .. }) => *in_channels,
        _ => return Err(Error::Config("backbone must start with a convolution".into())),
    };
    match layers.last() {
        Some(LayerSpec::Linear { outputs: 2, .. }) => Ok(in_channels),
        _ => Err(Error::Config("backbone must end in a linear layer with two outputs".into())),
    }
}

fn to_logits(out: &Tensor) -> Result<Vec<[f64; 2]>> {
    if out.sample_len() != 2 {
        return Err(Error::Shape(format!("model emits {} outputs per sample", out.sample_len())));
    }
    let logits: Vec<[f64; 2]> = out.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(logits)
}

fn logit_grads(logits: &[[f64; 2]], labels: &[u8], scale: f64) -> Tensor {
    let mut data = Vec::with_capacity(2 * logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let g = cross_entropy_grad(*z, y);
        data.push(scale * g[0]);
        data.push(scale * g[1]);
    }
    Tensor::from_vec([logits.len(), 2, 1, 1], data).expect("logit gradient shape")
}

impl Classifier for Detector {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<[f64; 2]>> {
        self.check_input(x)?;
        to_logits(&self.net.forward(&self.prepare(x)))
    }

    fn loss_and_input_grad(&self, x: &Tensor, labels: &[u8]) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        check_labels(labels, x.n())?;
        let (out, trace) = self.net.forward_trace(&self.prepare(x));
        let logits = to_logits(&out)?;
        let losses = logits.iter().zip(labels).map(|(z, &y)| cross_entropy(*z, y)).collect();
        let mut gx = self.net.backward(&trace, &logit_grads(&logits, labels, 1.0), None);
        if self.norm[1] != 1.0 {
            let inv = 1.0 / self.norm[1];
            for v in gx.data_mut() {
                *v *= inv;
            }
        }
        if !gx.is_finite() {
            return Err(Error::Numeric(format!("non-finite input gradient in detector {}", self.id)));
        }
        Ok((losses, gx))
    }
}
