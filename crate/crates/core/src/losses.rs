//! Per-sample losses and their logit gradients.
//!
//! Every function takes the student (local) logits `z_l` and, where relevant,
//! the teacher (global) logits `z_g`. Teacher logits are constants: no
//! gradient is returned for them. KL terms are `KL(teacher || student)`.

use crate::error::{Error, Result};
use crate::model::Matrix;

/// Teacher probabilities below this contribute nothing to a KL term.
const KL_PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    FedAvg,
    FedProx,
    FedNtd,
    FedNtdMse,
    Kd,
    KdNtdInterp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedNtd => "fedntd",
            Method::FedNtdMse => "fedntd_mse",
            Method::Kd => "kd",
            Method::KdNtdInterp => "kd_ntd_interp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fedavg" => Method::FedAvg,
            "fedprox" => Method::FedProx,
            "fedntd" => Method::FedNtd,
            "fedntd_mse" => Method::FedNtdMse,
            "kd" => Method::Kd,
            "kd_ntd_interp" => Method::KdNtdInterp,
            _ => return None,
        })
    }

    /// Whether local training needs logits from the frozen global model.
    pub fn needs_teacher(self) -> bool {
        matches!(
            self,
            Method::FedNtd | Method::FedNtdMse | Method::Kd | Method::KdNtdInterp
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    pub tau: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::FedAvg,
            beta: 1.0,
            tau: 1.0,
            mu: 0.1,
            lambda: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta = {}", self.beta)));
        }
        check_tau(self.tau)?;
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::InvalidArgument(format!("mu = {}", self.mu)));
        }
        check_lambda(self.lambda)
    }

    /// Loss and logit gradient for one sample under the configured method.
    /// `z_g` is ignored by methods without a teacher.
    pub fn sample_loss(&self, z_l: &[f64], z_g: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        match self.method {
            Method::FedAvg | Method::FedProx => ce_loss_and_grad(z_l, y),
            Method::FedNtd => fedntd_objective(z_l, z_g, y, self.beta, self.tau),
            Method::FedNtdMse => {
                let (ce, mut g) = ce_loss_and_grad(z_l, y)?;
                if self.beta == 0.0 {
                    return Ok((ce, g));
                }
                let (mse, gm) = ntd_mse_loss_and_grad(z_l, z_g, y)?;
                axpy(&mut g, self.beta, &gm);
                Ok((ce + self.beta * mse, g))
            }
            Method::Kd => kd_objective(z_l, z_g, y, self.beta, self.tau),
            Method::KdNtdInterp => kd_ntd_interp_objective(z_l, z_g, y, self.lambda, self.tau),
        }
    }

    /// Batch-mean loss and the per-sample logit gradient matrix.
    pub fn batch_loss(
        &self,
        logits: &Matrix,
        teacher: Option<&Matrix>,
        labels: &[usize],
    ) -> Result<(f64, Matrix)> {
        let n = logits.rows();
        let c = logits.cols();
        let mut grads = Matrix::zeros(n, c);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z_g = teacher.map(|t| t.row(r)).unwrap_or(&[]);
            let (loss, g) = self.sample_loss(logits.row(r), z_g, y)?;
            total += loss;
            grads.row_mut(r).copy_from_slice(&g);
        }
        let mean = if n == 0 { 0.0 } else { total / n as f64 };
        Ok((mean, grads))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature tau = {tau} must be > 0")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda = {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn check_label(len: usize, y: usize) -> Result<()> {
    if y >= len {
        return Err(Error::InvalidArgument(format!("label {y} outside [0, {len})")));
    }
    Ok(())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "logit vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn check_not_true(len: usize, y: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::InvalidArgument(
            "not-true quantities need at least two classes".into(),
        ));
    }
    check_label(len, y)
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `log softmax(z / tau)` restricted to the indices where `keep` is true;
/// excluded entries are returned as `NaN`.
fn log_softmax_masked(z: &[f64], tau: f64, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = z
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &v)| v / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &v)| (v / tau - max).exp())
        .sum();
    let log_norm = max + sum.ln();
    z.iter()
        .enumerate()
        .map(|(i, &v)| if keep(i) { v / tau - log_norm } else { f64::NAN })
        .collect()
}

/// Temperature softmax with max subtraction.
pub fn softmax_temp(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(log_softmax_masked(z, tau, |_| true)
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Softmax over the classes other than `y`. The entry at `y` is `None`.
pub fn not_true_softmax(z: &[f64], y: usize, tau: f64) -> Result<Vec<Option<f64>>> {
    check_not_true(z.len(), y)?;
    check_tau(tau)?;
    Ok(log_softmax_masked(z, tau, |i| i != y)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (i != y).then(|| v.exp()))
        .collect())
}

/// Cross-entropy against the one-hot label.
pub fn ce_loss_and_grad(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_label(z.len(), y)?;
    let log_q = log_softmax_masked(z, 1.0, |_| true);
    let mut grad: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    grad[y] -= 1.0;
    Ok((-log_q[y], grad))
}

/// KL(teacher || student) over the kept classes at temperature `tau`, and
/// its gradient with respect to the student logits (zero outside `keep`).
fn masked_kl(z_l: &[f64], z_g: &[f64], tau: f64, keep: impl Fn(usize) -> bool + Copy) -> (f64, Vec<f64>) {
    let log_l = log_softmax_masked(z_l, tau, keep);
    let log_g = log_softmax_masked(z_g, tau, keep);
    let mut loss = 0.0;
    let mut grad = vec![0.0; z_l.len()];
    for i in (0..z_l.len()).filter(|&i| keep(i)) {
        let q_g = log_g[i].exp();
        let q_l = log_l[i].exp();
        if q_g >= KL_PROB_FLOOR {
            loss += q_g * (log_g[i] - log_l[i]);
        }
        grad[i] = (q_l - q_g) / tau;
    }
    (loss, grad)
}

/// `KL(q_tau^g || q_tau^l)` over all classes. The `tau^2` factor of the
/// classical distillation objective is applied by [`kd_objective`], not here.
pub fn kd_loss_and_grad(z_l: &[f64], z_g: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_same_len(z_l, z_g)?;
    check_tau(tau)?;
    Ok(masked_kl(z_l, z_g, tau, |_| true))
}

/// Not-true distillation: KL between the not-true softmaxes. The gradient
/// entry at `y` is exactly `0.0`.
pub fn ntd_loss_and_grad(z_l: &[f64], z_g: &[f64], y: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_same_len(z_l, z_g)?;
    check_not_true(z_l.len(), y)?;
    check_tau(tau)?;
    Ok(masked_kl(z_l, z_g, tau, |i| i != y))
}

/// Mean squared logit gap over the not-true classes.
pub fn ntd_mse_loss_and_grad(z_l: &[f64], z_g: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_same_len(z_l, z_g)?;
    check_not_true(z_l.len(), y)?;
    let scale = 1.0 / (z_l.len() - 1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; z_l.len()];
    for i in (0..z_l.len()).filter(|&i| i != y) {
        let d = z_l[i] - z_g[i];
        loss += d * d;
        grad[i] = 2.0 * scale * d;
    }
    Ok((scale * loss, grad))
}

/// `CE + beta * NTD`, with unit CE weight and no `tau^2` factor.
pub fn fedntd_objective(
    z_l: &[f64],
    z_g: &[f64],
    y: usize,
    beta: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta = {beta}")));
    }
    let (ce, mut grad) = ce_loss_and_grad(z_l, y)?;
    if beta == 0.0 {
        return Ok((ce, grad));
    }
    let (ntd, g_ntd) = ntd_loss_and_grad(z_l, z_g, y, tau)?;
    axpy(&mut grad, beta, &g_ntd);
    Ok((ce + beta * ntd, grad))
}

/// Classical distillation `(1 - beta) CE + beta tau^2 KL`.
pub fn kd_objective(
    z_l: &[f64],
    z_g: &[f64],
    y: usize,
    beta: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let (ce, g_ce) = ce_loss_and_grad(z_l, y)?;
    let (kl, g_kl) = kd_loss_and_grad(z_l, z_g, tau)?;
    let w = beta * tau * tau;
    let grad = g_ce
        .iter()
        .zip(&g_kl)
        .map(|(a, b)| (1.0 - beta) * a + w * b)
        .collect();
    Ok(((1.0 - beta) * ce + w * kl, grad))
}

/// `CE + (1 - lambda) KD + lambda NTD`, sliding from full-softmax to
/// not-true distillation as `lambda` goes from 0 to 1.
pub fn kd_ntd_interp_objective(
    z_l: &[f64],
    z_g: &[f64],
    y: usize,
    lambda: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lambda(lambda)?;
    let (ce, mut grad) = ce_loss_and_grad(z_l, y)?;
    let (kd, g_kd) = kd_loss_and_grad(z_l, z_g, tau)?;
    let (ntd, g_ntd) = ntd_loss_and_grad(z_l, z_g, y, tau)?;
    axpy(&mut grad, 1.0 - lambda, &g_kd);
    axpy(&mut grad, lambda, &g_ntd);
    Ok((ce + (1.0 - lambda) * kd + lambda * ntd, grad))
}

/// Proximal term `(mu / 2) ||w - w_g||^2` and its gradient `mu (w - w_g)`.
pub fn fedprox_penalty(w: &[f64], w_g: &[f64], mu: f64) -> Result<(f64, Vec<f64>)> {
    check_same_len(w, w_g)?;
    let mut sq = 0.0;
    let grad = w
        .iter()
        .zip(w_g)
        .map(|(a, b)| {
            let d = a - b;
            sq += d * d;
            mu * d
        })
        .collect();
    Ok((0.5 * mu * sq, grad))
}
