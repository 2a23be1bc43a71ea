//! Feed-forward ReLU classifier with explicit gradients and momentum SGD.
//!
//! Parameters live in one flat [`ParamVector`]. Layout, layer by layer from
//! input to output: the weight matrix (`out × in`, row-major) followed by
//! the bias vector (`out`). Logits are `W h + b` of the last layer; hidden
//! layers apply ReLU.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let cfg = Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Widths from input to logits, e.g. `[32, 64, 64, 10]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    /// `(fan_in, fan_out, weight_offset, bias_offset)` for every layer.
    pub fn layers(&self) -> Vec<LayerShape> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

/// All model parameters in the documented flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

const CHECKPOINT_MAGIC: &[u8; 4] = b"FNTD";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Checkpoint encoding: `"FNTD"`, version `u32`, length `u64`, then the
    /// values as `f64`, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.0.len() as u64).to_le_bytes())?;
        for v in &self.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("checkpoint header truncated".into()))?;
        if &header[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic is not FNTD".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != len * 8 {
            return Err(Error::Format(format!(
                "checkpoint declares {len} values but carries {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self(values))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.0.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

/// Momentum buffer; zeroed at the start of every local training session.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: Vec<f64>,
}

impl OptState {
    pub fn zeros(len: usize) -> Self {
        Self {
            velocity: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fan-in uniform weights on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_params(config: &MlpConfig, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
    let mut params = vec![0.0; config.param_count()];
    for layer in config.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut params[layer.weight_offset..layer.bias_offset] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParamVector(params)
}

fn check_params(config: &MlpConfig, params: &ParamVector) -> Result<()> {
    if params.len() != config.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, config implies {}",
            params.len(),
            config.param_count()
        )));
    }
    Ok(())
}

fn affine(params: &[f64], layer: &LayerShape, input: &Matrix) -> Matrix {
    let weights = &params[layer.weight_offset..layer.bias_offset];
    let bias = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
    let mut out = Matrix::zeros(input.rows(), layer.fan_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let o = out.row_mut(r);
        for (j, oj) in o.iter_mut().enumerate() {
            let w = &weights[j * layer.fan_in..(j + 1) * layer.fan_in];
            *oj = bias[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn relu_in_place(m: &mut Matrix) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Layer inputs recorded during the forward pass. `inputs[0]` is the batch,
/// `inputs[l]` the post-activation output of hidden layer `l - 1`.
struct Trace {
    inputs: Vec<Matrix>,
    logits: Matrix,
}

fn forward_trace(config: &MlpConfig, params: &ParamVector, features: &Matrix) -> Result<Trace> {
    check_params(config, params)?;
    if features.cols() != config.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "feature width {} vs input_dim {}",
            features.cols(),
            config.input_dim
        )));
    }
    let layers = config.layers();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut current = features.clone();
    for (l, layer) in layers.iter().enumerate() {
        let mut next = affine(&params.0, layer, &current);
        if l + 1 < layers.len() {
            relu_in_place(&mut next);
        }
        inputs.push(current);
        current = next;
    }
    Ok(Trace {
        inputs,
        logits: current,
    })
}

pub fn forward(config: &MlpConfig, params: &ParamVector, features: &Matrix) -> Result<Matrix> {
    forward_trace(config, params, features).map(|t| t.logits)
}

/// Post-activation outputs of layer `layer` (hidden layers are numbered from
/// 0; `layer == hidden_dims.len()` selects the logits).
pub fn layer_outputs(
    config: &MlpConfig,
    params: &ParamVector,
    features: &Matrix,
    layer: usize,
) -> Result<Matrix> {
    if layer > config.hidden_dims.len() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} does not exist (model has {} hidden layers)",
            config.hidden_dims.len()
        )));
    }
    let mut trace = forward_trace(config, params, features)?;
    if layer == config.hidden_dims.len() {
        Ok(trace.logits)
    } else {
        Ok(trace.inputs.swap_remove(layer + 1))
    }
}

/// Gradient of the batch-mean loss given per-sample logit gradients.
pub fn backward(
    config: &MlpConfig,
    params: &ParamVector,
    batch: &Batch,
    dl_dlogits: &Matrix,
) -> Result<ParamVector> {
    let trace = forward_trace(config, params, &batch.features)?;
    backward_from_trace(config, params, &trace, dl_dlogits)
}

fn backward_from_trace(
    config: &MlpConfig,
    params: &ParamVector,
    trace: &Trace,
    dl_dlogits: &Matrix,
) -> Result<ParamVector> {
    let n = trace.logits.rows();
    if dl_dlogits.rows() != n || dl_dlogits.cols() != config.num_classes {
        return Err(Error::DimensionMismatch(format!(
            "logit gradient is {}x{}, expected {}x{}",
            dl_dlogits.rows(),
            dl_dlogits.cols(),
            n,
            config.num_classes
        )));
    }
    let mut grad = vec![0.0; params.len()];
    if n == 0 {
        return Ok(ParamVector(grad));
    }
    let scale = 1.0 / n as f64;
    let layers = config.layers();
    let mut delta = dl_dlogits.clone();
    for (l, layer) in layers.iter().enumerate().rev() {
        let input = &trace.inputs[l];
        let (gw, rest) = grad[layer.weight_offset..].split_at_mut(layer.fan_in * layer.fan_out);
        let gb = &mut rest[..layer.fan_out];
        for r in 0..n {
            let d = delta.row(r);
            let x = input.row(r);
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                gb[j] += dj * scale;
                let row = &mut gw[j * layer.fan_in..(j + 1) * layer.fan_in];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += dj * xi * scale;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate through W, then through the ReLU that produced `input`.
        let weights = &params.0[layer.weight_offset..layer.bias_offset];
        let mut prev = Matrix::zeros(n, layer.fan_in);
        for r in 0..n {
            let d = delta.row(r);
            let p = prev.row_mut(r);
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let w = &weights[j * layer.fan_in..(j + 1) * layer.fan_in];
                for (pi, &wi) in p.iter_mut().zip(w) {
                    *pi += wi * dj;
                }
            }
            for (pi, &a) in p.iter_mut().zip(input.row(r)) {
                if a <= 0.0 {
                    *pi = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok(ParamVector(grad))
}

/// Forward pass plus a backward pass driven by `loss_grad`, which maps the
/// logits to per-sample logit gradients and a batch-mean loss.
pub fn loss_and_gradient<F>(
    config: &MlpConfig,
    params: &ParamVector,
    batch: &Batch,
    loss_grad: F,
) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&Matrix) -> Result<(f64, Matrix)>,
{
    let trace = forward_trace(config, params, &batch.features)?;
    let (loss, dl) = loss_grad(&trace.logits)?;
    let grad = backward_from_trace(config, params, &trace, &dl)?;
    Ok((loss, grad))
}

/// Momentum SGD with coupled L2 decay:
/// `g = grad + wd * w; v = m * v + g; w = w - lr * v`.
pub fn sgd_momentum_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    state: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) || !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "momentum {momentum} / weight decay {weight_decay}"
        )));
    }
    if grad.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "params {}, grad {}, velocity {}",
            params.len(),
            grad.len(),
            state.velocity.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    for ((w, &g), v) in params.0.iter_mut().zip(&grad.0).zip(&mut state.velocity) {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after SGD step".into()));
    }
    Ok(())
}

/// Exponential per-round decay `lr0 * decay^t`; the default decay is 0.99.
pub fn lr_at_round(lr0: f64, round: usize) -> f64 {
    lr_at_round_with_decay(lr0, 0.99, round)
}

pub fn lr_at_round_with_decay(lr0: f64, decay: f64, round: usize) -> f64 {
    lr0 * decay.powi(round as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MlpConfig {
        MlpConfig::new(3, vec![4], 2).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        let cfg = MlpConfig::new(32, vec![64, 64], 10).unwrap();
        assert_eq!(cfg.param_count(), 32 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
        let layers = cfg.layers();
        assert_eq!(layers[1].weight_offset, 32 * 64 + 64);
        assert!(MlpConfig::new(3, vec![], 1).is_err());
        assert!(MlpConfig::new(3, vec![0], 2).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let cfg = tiny();
        let a = init_params(&cfg, 1);
        assert_eq!(a, init_params(&cfg, 1));
        let b = init_params(&cfg, 2);
        assert_ne!(a, b);
        for layer in cfg.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            assert!(a.0[layer.weight_offset..layer.bias_offset].iter().all(|w| w.abs() <= bound));
            assert!(a.0[layer.bias_offset..layer.bias_offset + layer.fan_out].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = tiny();
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let z = forward(&cfg, &ParamVector::zeros(cfg.param_count()), &x).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let cfg = MlpConfig::new(3, vec![], 3).unwrap();
        let mut p = ParamVector::zeros(cfg.param_count());
        for i in 0..3 {
            p.0[i * 3 + i] = 1.0;
        }
        let x = Matrix::from_vec(1, 3, vec![0.3, -1.2, 7.0]).unwrap();
        assert_eq!(forward(&cfg, &p, &x).unwrap().as_slice(), x.as_slice());
    }

    #[test]
    fn forward_rejects_bad_width() {
        let cfg = tiny();
        let x = Matrix::zeros(1, 4);
        assert!(matches!(
            forward(&cfg, &init_params(&cfg, 0), &x),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let cfg = MlpConfig::new(2, vec![], 2).unwrap();
        let p = init_params(&cfg, 5);
        let x = Matrix::from_vec(1, 2, vec![0.5, -3.0]).unwrap();
        let batch = Batch::new(x, vec![0], 2).unwrap();
        let dl = Matrix::from_vec(1, 2, vec![0.25, -1.0]).unwrap();
        let g = backward(&cfg, &p, &batch, &dl).unwrap();
        assert_eq!(g.0, vec![0.125, -0.75, -0.5, 3.0, 0.25, -1.0]);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_gradient() {
        let cfg = tiny();
        let p = init_params(&cfg, 3);
        let batch = Batch::new(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), vec![1], 2).unwrap();
        let g = backward(&cfg, &p, &batch, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        assert!(backward(&cfg, &p, &batch, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn sgd_single_and_double_step() {
        let mut p = ParamVector(vec![1.0]);
        let mut s = OptState::zeros(1);
        let g = ParamVector(vec![1.0]);
        sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.0, vec![0.9]);
        assert_eq!(s.velocity, vec![1.0]);
        let before = p.0[0];
        sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0).unwrap();
        assert!((before - p.0[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn sgd_no_force_and_bad_input() {
        let mut p = ParamVector(vec![1.0, -2.0]);
        let mut s = OptState::zeros(2);
        sgd_momentum_step(&mut p, &ParamVector::zeros(2), &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0]);
        let nan = ParamVector(vec![f64::NAN, 0.0]);
        assert!(matches!(
            sgd_momentum_step(&mut p, &nan, &mut s, 0.1, 0.9, 0.0),
            Err(Error::NonFinite(_))
        ));
        assert!(sgd_momentum_step(&mut p, &ParamVector::zeros(2), &mut s, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(lr_at_round(0.01, 0), 0.01);
        assert!((lr_at_round(0.01, 1) - 0.0099).abs() < 1e-15);
        assert!((lr_at_round(0.01, 2) - 0.009801).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let p = ParamVector(vec![1.5, -0.25]);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"FNTD");
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(ParamVector::read_from(&bytes[..]).unwrap(), p);
        assert!(ParamVector::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamVector::read_from(&bad[..]).is_err());
    }
}
