//! Shared backbone + per-party classifier head.
//!
//! The backbone is a fully connected network `input_dim -> hidden_dims.. ->
//! feature_dim`. Hidden layers apply the configured activation; the output
//! layer is linear. Parameters are laid out layer by layer: the weight
//! matrix (`fan_out x fan_in`, row-major) followed by that layer's biases.
//!
//! The head is a bias-free `num_classes x feature_dim` matrix (row per
//! class). `SoftmaxCe` applies it to raw features. `CosineMargin` normalizes
//! both the embedding and each class row, subtracts the margin from the
//! target-class cosine and multiplies all logits by `scale`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVec;

/// Guards the L2 normalizations in the cosine head: `x / sqrt(|x|^2 + NORM_EPS)`.
const NORM_EPS: f64 = 1e-12;

/// Standard deviation of freshly initialized head weights.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![32],
            feature_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl BackboneSpec {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|d| d[0] * d[1] + d[1])
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("backbone_spec.input_dim", "must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("backbone_spec.feature_dim", "must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "backbone_spec.hidden_dims",
                "every hidden width must be >= 1",
            ));
        }
        Ok(())
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVec {
        let mut values = Vec::with_capacity(self.param_count());
        for d in self.layer_dims().windows(2) {
            let (fan_in, fan_out) = (d[0], d[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            values.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVec::new(values).expect("finite init")
    }

    fn check_theta(&self, theta: &ParamVec) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "backbone expects {} parameters, got {}",
                self.param_count(),
                theta.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLoss {
    SoftmaxCe,
    CosineMargin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub loss: HeadLoss,
    /// Logit scale `s`; only read by `CosineMargin`.
    pub scale: f64,
    /// Additive cosine margin `m`; only read by `CosineMargin`.
    pub margin: f64,
}

impl HeadSpec {
    pub fn softmax(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            loss: HeadLoss::SoftmaxCe,
            scale: 64.0,
            margin: 0.35,
        }
    }

    pub fn param_count(&self) -> usize {
        self.feature_dim * self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::config(
                "head_spec",
                "feature_dim and num_classes must be >= 1",
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(
                "head_spec.scale",
                format!("must be finite and > 0, got {}", self.scale),
            ));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config(
                "head_spec.margin",
                format!("must lie in [0, 1), got {}", self.margin),
            ));
        }
        Ok(())
    }

    /// Seeded Gaussian init with std [`HEAD_INIT_STD`].
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVec {
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        ParamVec::new((0..self.param_count()).map(|_| normal.sample(rng)).collect())
            .expect("finite init")
    }

    fn check_omega(&self, omega: &ParamVec) -> Result<()> {
        if omega.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "head expects {} parameters, got {}",
                self.param_count(),
                omega.len()
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scaled(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    /// Stacks matrices of equal width.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Dimension("vstack width mismatch".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Matrix::new(rows, cols, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

struct LayerView<'a> {
    weights: &'a [f64],
    biases: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

fn layer_views<'a>(spec: &BackboneSpec, theta: &'a [f64]) -> Vec<LayerView<'a>> {
    let mut offset = 0;
    spec.layer_dims()
        .windows(2)
        .map(|d| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let weights = &theta[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let biases = &theta[offset..offset + fan_out];
            offset += fan_out;
            LayerView {
                weights,
                biases,
                fan_in,
                fan_out,
            }
        })
        .collect()
}

/// Runs one sample through the backbone, keeping every layer's output
/// (`acts[0]` is the input, the last entry is the embedding).
fn forward_sample(layers: &[LayerView<'_>], activation: Activation, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let input = &acts[l];
        let out: Vec<f64> = (0..layer.fan_out)
            .map(|o| {
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                let pre = row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + layer.biases[o];
                if l < last {
                    activation.apply(pre)
                } else {
                    pre
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

/// Embeds every row of `inputs`; returns a `batch x feature_dim` matrix.
pub fn forward_features(spec: &BackboneSpec, theta: &ParamVec, inputs: &Matrix) -> Result<Matrix> {
    spec.check_theta(theta)?;
    if inputs.cols() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "inputs have width {}, backbone expects {}",
            inputs.cols(),
            spec.input_dim
        )));
    }
    let layers = layer_views(spec, theta.as_slice());
    let mut data = Vec::with_capacity(inputs.rows() * spec.feature_dim);
    for i in 0..inputs.rows() {
        let mut acts = forward_sample(&layers, spec.activation, inputs.row(i));
        data.append(acts.last_mut().expect("at least one layer"));
    }
    Matrix::new(inputs.rows(), spec.feature_dim, data)
}

fn normalized(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = (x.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Pulls a gradient on `u = x / norm` back to `x`.
fn normalize_backward(u: &[f64], norm: f64, du: &[f64], dx: &mut [f64]) {
    let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    for ((d, ui), dui) in dx.iter_mut().zip(u).zip(du) {
        *d += (dui - ui * dot) / norm;
    }
}

/// Class logits for a single embedding. For the cosine head these are the
/// scaled cosines without margin.
pub fn head_logits(spec: &HeadSpec, omega: &ParamVec, z: &[f64]) -> Result<Vec<f64>> {
    spec.check_omega(omega)?;
    if z.len() != spec.feature_dim {
        return Err(Error::Dimension(format!(
            "embedding width {}, head expects {}",
            z.len(),
            spec.feature_dim
        )));
    }
    let w = omega.as_slice();
    let f = spec.feature_dim;
    Ok(match spec.loss {
        HeadLoss::SoftmaxCe => (0..spec.num_classes)
            .map(|c| dot(&w[c * f..(c + 1) * f], z))
            .collect(),
        HeadLoss::CosineMargin => {
            let (zh, _) = normalized(z);
            (0..spec.num_classes)
                .map(|c| {
                    let (wh, _) = normalized(&w[c * f..(c + 1) * f]);
                    spec.scale * dot(&wh, &zh)
                })
                .collect()
        }
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of `logits` against `label`; writes `softmax - onehot` into `dlogits`.
fn cross_entropy(logits: &[f64], label: usize, dlogits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, l) in dlogits.iter_mut().zip(logits) {
        *d = (l - max).exp();
        sum += *d;
    }
    for d in dlogits.iter_mut() {
        *d /= sum;
    }
    dlogits[label] -= 1.0;
    max + sum.ln() - logits[label]
}

/// Loss of one sample; accumulates `dL/dω` into `grad_omega` and writes
/// `dL/dz` into `dz`.
fn head_loss_backward(
    spec: &HeadSpec,
    w: &[f64],
    z: &[f64],
    label: usize,
    grad_omega: &mut [f64],
    dz: &mut [f64],
) -> f64 {
    let f = spec.feature_dim;
    let c_count = spec.num_classes;
    let mut dlogits = vec![0.0; c_count];
    dz.iter_mut().for_each(|d| *d = 0.0);
    match spec.loss {
        HeadLoss::SoftmaxCe => {
            let logits: Vec<f64> = (0..c_count).map(|c| dot(&w[c * f..(c + 1) * f], z)).collect();
            let loss = cross_entropy(&logits, label, &mut dlogits);
            for c in 0..c_count {
                let row = &w[c * f..(c + 1) * f];
                let g = &mut grad_omega[c * f..(c + 1) * f];
                for j in 0..f {
                    g[j] += dlogits[c] * z[j];
                    dz[j] += dlogits[c] * row[j];
                }
            }
            loss
        }
        HeadLoss::CosineMargin => {
            let (zh, z_norm) = normalized(z);
            let rows: Vec<(Vec<f64>, f64)> =
                (0..c_count).map(|c| normalized(&w[c * f..(c + 1) * f])).collect();
            let logits: Vec<f64> = rows
                .iter()
                .enumerate()
                .map(|(c, (wh, _))| {
                    let m = if c == label { spec.margin } else { 0.0 };
                    spec.scale * (dot(wh, &zh) - m)
                })
                .collect();
            let loss = cross_entropy(&logits, label, &mut dlogits);
            let mut dzh = vec![0.0; f];
            let mut dwh = vec![0.0; f];
            for (c, (wh, w_norm)) in rows.iter().enumerate() {
                let dcos = spec.scale * dlogits[c];
                for j in 0..f {
                    dzh[j] += dcos * wh[j];
                    dwh[j] = dcos * zh[j];
                }
                normalize_backward(wh, *w_norm, &dwh, &mut grad_omega[c * f..(c + 1) * f]);
            }
            normalize_backward(&zh, z_norm, &dzh, dz);
            loss
        }
    }
}

/// Mean loss over a batch together with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    /// Gradient with respect to the backbone parameters.
    pub backbone_grad: ParamVec,
    /// Gradient with respect to the head parameters.
    pub head_grad: ParamVec,
    /// Unaveraged loss of every sample, in batch order.
    pub sample_losses: Vec<f64>,
}

pub fn loss_and_grads(
    b_spec: &BackboneSpec,
    h_spec: &HeadSpec,
    theta: &ParamVec,
    omega: &ParamVec,
    batch: &Batch,
) -> Result<LossGrads> {
    b_spec.check_theta(theta)?;
    h_spec.check_omega(omega)?;
    if h_spec.feature_dim != b_spec.feature_dim {
        return Err(Error::Dimension(format!(
            "head consumes {} features, backbone produces {}",
            h_spec.feature_dim, b_spec.feature_dim
        )));
    }
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.inputs.cols() != b_spec.input_dim {
        return Err(Error::Dimension(format!(
            "batch width {}, backbone expects {}",
            batch.inputs.cols(),
            b_spec.input_dim
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= h_spec.num_classes) {
        return Err(Error::Dimension(format!(
            "label {bad} outside head with {} classes",
            h_spec.num_classes
        )));
    }

    let layers = layer_views(b_spec, theta.as_slice());
    let w = omega.as_slice();
    let mut g_theta = vec![0.0; theta.len()];
    let mut g_omega = vec![0.0; omega.len()];
    let mut sample_losses = Vec::with_capacity(batch.len());
    let mut dz = vec![0.0; b_spec.feature_dim];

    for (i, &label) in batch.labels.iter().enumerate() {
        let acts = forward_sample(&layers, b_spec.activation, batch.inputs.row(i));
        let z = acts.last().expect("embedding");
        sample_losses.push(head_loss_backward(h_spec, w, z, label, &mut g_omega, &mut dz));

        // Walk the layers backwards; `grad` holds dL/d(output of layer l).
        let mut grad = dz.clone();
        let mut offset = g_theta.len();
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            offset -= layer.fan_in * layer.fan_out + layer.fan_out;
            if l + 1 < layers.len() {
                for (g, y) in grad.iter_mut().zip(&acts[l + 1]) {
                    *g *= b_spec.activation.derivative_from_output(*y);
                }
            }
            let input = &acts[l];
            let (gw, gb) = g_theta[offset..offset + layer.fan_in * layer.fan_out + layer.fan_out]
                .split_at_mut(layer.fan_in * layer.fan_out);
            for (o, (&delta, gbo)) in grad.iter().zip(gb.iter_mut()).enumerate() {
                *gbo += delta;
                for (gwi, a) in gw[o * layer.fan_in..(o + 1) * layer.fan_in].iter_mut().zip(input) {
                    *gwi += delta * a;
                }
            }
            if l > 0 {
                let mut below = vec![0.0; layer.fan_in];
                for (&g, row) in grad.iter().zip(layer.weights.chunks_exact(layer.fan_in)) {
                    for (b, wv) in below.iter_mut().zip(row) {
                        *b += g * wv;
                    }
                }
                grad = below;
            }
        }
    }

    let n = batch.len() as f64;
    let loss = sample_losses.iter().sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    g_theta.iter_mut().for_each(|g| *g /= n);
    g_omega.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrads {
        loss,
        backbone_grad: ParamVec::from_computed(g_theta, "backbone gradient")?,
        head_grad: ParamVec::from_computed(g_omega, "head gradient")?,
        sample_losses,
    })
}

/// Largest relative disagreement between `analytic` and a central
/// difference of `f` around `x`:
/// `|a - fd| / max(|a|, |fd|, 1e-8)` over all coordinates.
pub fn max_relative_error<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("fd_step must be > 0, got {step}")));
    }
    Error::check_len(x.len(), analytic.len())?;
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares [`loss_and_grads`] against central differences over every
/// backbone and head coordinate.
pub fn gradient_check(
    b_spec: &BackboneSpec,
    h_spec: &HeadSpec,
    theta: &ParamVec,
    omega: &ParamVec,
    batch: &Batch,
    fd_step: f64,
) -> Result<f64> {
    gradient_check_perturbed(b_spec, h_spec, theta, omega, batch, fd_step, 0.0)
}

/// [`gradient_check`] with `perturbation` added to every analytic gradient
/// entry first; a nonzero value must make the check fail.
pub fn gradient_check_perturbed(
    b_spec: &BackboneSpec,
    h_spec: &HeadSpec,
    theta: &ParamVec,
    omega: &ParamVec,
    batch: &Batch,
    fd_step: f64,
    perturbation: f64,
) -> Result<f64> {
    let grads = loss_and_grads(b_spec, h_spec, theta, omega, batch)?;
    let split = theta.len();
    let x: Vec<f64> = theta.iter().chain(omega.iter()).copied().collect();
    let analytic: Vec<f64> = grads
        .backbone_grad
        .iter()
        .chain(grads.head_grad.iter())
        .map(|g| g + perturbation)
        .collect();
    max_relative_error(
        |p| {
            let t = ParamVec::new(p[..split].to_vec())?;
            let o = ParamVec::new(p[split..].to_vec())?;
            Ok(loss_and_grads(b_spec, h_spec, &t, &o, batch)?.loss)
        },
        &x,
        &analytic,
        fd_step,
    )
}
