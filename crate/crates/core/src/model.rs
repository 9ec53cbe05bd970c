//! Desk-scale classifiers with hand-written backprop.
//!
//! Parameters live in one flat vector. The ordering is fixed: layers in
//! forward order, and within a layer the weight matrix (row-major,
//! `outputs x inputs`) followed by the bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::vector::UpdateVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Logistic { inputs: usize, classes: usize },
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl Architecture {
    /// `(inputs, outputs)` of each dense layer, in forward order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            Architecture::Logistic { inputs, classes } => vec![(inputs, classes)],
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => vec![(inputs, hidden), (hidden, classes)],
        }
    }

    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::Logistic { inputs, .. } | Architecture::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Logistic { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Flat-vector range of the output layer's weight matrix.
    pub fn output_weight_range(&self) -> std::ops::Range<usize> {
        let (i, o) = *self.layer_shapes().last().unwrap();
        let start = self.param_count() - (i * o + o);
        start..start + i * o
    }

    /// Flat-vector range of the output layer's bias.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let (_, o) = *self.layer_shapes().last().unwrap();
        let end = self.param_count();
        end - o..end
    }

    /// Flat-vector range of the whole output layer (weights then bias).
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        self.output_weight_range().start..self.param_count()
    }

    /// PyTorch-style uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_params(&self, rng: &mut impl Rng) -> UpdateVector {
        let mut out = Vec::with_capacity(self.param_count());
        for (i, o) in self.layer_shapes() {
            let bound = 1.0 / (i as f64).sqrt();
            out.extend((0..i * o + o).map(|_| rng.random_range(-bound..bound)));
        }
        UpdateVector(out)
    }
}

/// One dense layer, the per-layer view of the flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// row-major `outputs x inputs`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn flatten(layers: &[Dense]) -> UpdateVector {
    let mut out = Vec::with_capacity(layers.iter().map(|l| l.weight.len() + l.bias.len()).sum());
    for l in layers {
        out.extend_from_slice(&l.weight);
        out.extend_from_slice(&l.bias);
    }
    UpdateVector(out)
}

pub fn unflatten(arch: &Architecture, flat: &[f64]) -> Result<Vec<Dense>> {
    if flat.len() != arch.param_count() {
        return Err(Error::Dimension {
            expected: arch.param_count(),
            found: flat.len(),
        });
    }
    let mut off = 0;
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(i, o)| {
            let weight = flat[off..off + i * o].to_vec();
            off += i * o;
            let bias = flat[off..off + o].to_vec();
            off += o;
            Dense {
                inputs: i,
                outputs: o,
                weight,
                bias,
            }
        })
        .collect();
    Ok(layers)
}

/// A classifier: architecture plus flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: UpdateVector,
}

impl Model {
    pub fn new(arch: Architecture, params: UpdateVector) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Dimension {
                expected: arch.param_count(),
                found: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        Self {
            arch,
            params: arch.init_params(rng),
        }
    }

    pub fn layers(&self) -> Vec<Dense> {
        unflatten(&self.arch, &self.params).expect("params length checked at construction")
    }

    pub fn from_layers(arch: Architecture, layers: &[Dense]) -> Result<Self> {
        Self::new(arch, flatten(layers))
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits(&self.arch, &self.params, x)
    }

    /// Class probabilities for one sample.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn loss(&self, batch: &Batch) -> f64 {
        loss_and_grad(&self.arch, &self.params, batch, false).0
    }

    /// Mean cross-entropy over the batch and its gradient w.r.t. the flat
    /// parameters.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, Vec<f64>) {
        loss_and_grad(&self.arch, &self.params, batch, true)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let inputs = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * inputs..(k + 1) * inputs];
        *o = b[k] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

pub(crate) fn logits(arch: &Architecture, p: &[f64], x: &[f64]) -> Vec<f64> {
    match *arch {
        Architecture::Logistic { inputs, classes } => {
            let (w, b) = p.split_at(inputs * classes);
            let mut z = vec![0.0; classes];
            dense_forward(w, b, x, &mut z);
            z
        }
        Architecture::Mlp {
            inputs,
            hidden,
            classes,
        } => {
            let (w1, rest) = p.split_at(inputs * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden * classes);
            let mut h = vec![0.0; hidden];
            dense_forward(w1, b1, x, &mut h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut z = vec![0.0; classes];
            dense_forward(w2, b2, &h, &mut z);
            z
        }
    }
}

/// log-sum-exp cross-entropy for one sample; writes `softmax - onehot` into
/// `dz` when requested.
fn xent(z: &[f64], label: usize, dz: Option<&mut [f64]>) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + s.ln();
    if let Some(dz) = dz {
        for (k, d) in dz.iter_mut().enumerate() {
            *d = (z[k] - lse).exp() - if k == label { 1.0 } else { 0.0 };
        }
    }
    lse - z[label]
}

pub(crate) fn loss_and_grad(
    arch: &Architecture,
    p: &[f64],
    batch: &Batch,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let n = batch.len();
    let mut grad = if want_grad {
        vec![0.0; p.len()]
    } else {
        Vec::new()
    };
    if n == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    match *arch {
        Architecture::Logistic { inputs, classes } => {
            let (w, b) = p.split_at(inputs * classes);
            let mut z = vec![0.0; classes];
            let mut dz = vec![0.0; classes];
            for s in 0..n {
                let x = batch.sample(s);
                dense_forward(w, b, x, &mut z);
                if want_grad {
                    loss += xent(&z, batch.labels[s], Some(&mut dz));
                    let (gw, gb) = grad.split_at_mut(inputs * classes);
                    for k in 0..classes {
                        let d = dz[k] * scale;
                        gb[k] += d;
                        for (g, xi) in gw[k * inputs..(k + 1) * inputs].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                } else {
                    loss += xent(&z, batch.labels[s], None);
                }
            }
        }
        Architecture::Mlp {
            inputs,
            hidden,
            classes,
        } => {
            let (w1, rest) = p.split_at(inputs * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden * classes);
            let mut h = vec![0.0; hidden];
            let mut z = vec![0.0; classes];
            let mut dz = vec![0.0; classes];
            let mut dh = vec![0.0; hidden];
            for s in 0..n {
                let x = batch.sample(s);
                dense_forward(w1, b1, x, &mut h);
                h.iter_mut().for_each(|v| *v = v.max(0.0));
                dense_forward(w2, b2, &h, &mut z);
                if !want_grad {
                    loss += xent(&z, batch.labels[s], None);
                    continue;
                }
                loss += xent(&z, batch.labels[s], Some(&mut dz));
                let (gw1, rest) = grad.split_at_mut(inputs * hidden);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden * classes);
                dh.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..classes {
                    let d = dz[k] * scale;
                    gb2[k] += d;
                    let row = k * hidden;
                    for j in 0..hidden {
                        gw2[row + j] += d * h[j];
                        dh[j] += d * w2[row + j];
                    }
                }
                for j in 0..hidden {
                    // ReLU gate
                    if h[j] <= 0.0 {
                        continue;
                    }
                    let d = dh[j];
                    gb1[j] += d;
                    for (g, xi) in gw1[j * inputs..(j + 1) * inputs].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
        }
    }
    (loss * scale, grad)
}
