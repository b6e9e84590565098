use std::f64::consts::PI;

use super::mlp::VARIANCE_FLOOR;
use super::tensor::Tensor;
use super::{NdError, Result};

/// Probabilities are clipped to `[eps, 1 - eps]` inside the BCE loss.
pub const BCE_PROB_EPS: f64 = 1e-6;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NdError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over batch and coordinates of the squared difference.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape(pred, target, "mse pred/target")?;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Binary cross entropy, mean over batch and coordinates. Soft labels in
/// `[0, 1]` are allowed.
pub fn loss_bce(prob: &Tensor, label: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape(prob, label, "bce prob/label")?;
    if label.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(NdError::InvalidValue(
            "bce label outside [0, 1]".to_string(),
        ));
    }
    let n = prob.len() as f64;
    let mut grad = Tensor::zeros(prob.shape());
    let mut loss = 0.0;
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(prob.data()).zip(label.data()) {
        let p = p.clamp(BCE_PROB_EPS, 1.0 - BCE_PROB_EPS);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        *g = (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
    }
    Ok((loss / n, grad))
}

/// Diagonal-gaussian negative log-likelihood:
/// `0.5 * sum_coords [(t - mu)^2 / v + ln v + ln 2pi]`, mean over batch.
///
/// Returns `(loss, d/d_mean, d/d_variance)`.
pub fn loss_gaussian_nll(
    mean: &Tensor,
    variance: &Tensor,
    target: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    check_same_shape(mean, variance, "nll mean/variance")?;
    check_same_shape(mean, target, "nll mean/target")?;
    if variance.data().iter().any(|&v| v < VARIANCE_FLOOR * (1.0 - 1e-12)) {
        return Err(NdError::InvalidValue(format!(
            "variance below floor {VARIANCE_FLOOR}"
        )));
    }
    let batch = mean.rows() as f64;
    let mut dmean = Tensor::zeros(mean.shape());
    let mut dvar = Tensor::zeros(mean.shape());
    let mut loss = 0.0;
    let mu = mean.data();
    let var = variance.data();
    let t = target.data();
    {
        let dm = dmean.data_mut();
        let dv = dvar.data_mut();
        for i in 0..mu.len() {
            let d = t[i] - mu[i];
            loss += 0.5 * (d * d / var[i] + var[i].ln() + (2.0 * PI).ln());
            dm[i] = -d / var[i] / batch;
            dv[i] = 0.5 * (1.0 / var[i] - d * d / (var[i] * var[i])) / batch;
        }
    }
    Ok((loss / batch, dmean, dvar))
}

/// KL divergence from `N(mu, exp(log_var))` to `N(0, 1)`:
/// `0.5 * sum (exp(lv) + mu^2 - 1 - lv)`, mean over batch. Always >= 0.
///
/// Returns `(loss, d/d_mu, d/d_log_var)`.
pub fn loss_kl_diag_gaussian(mu: &Tensor, log_var: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    check_same_shape(mu, log_var, "kl mu/log_var")?;
    mu.check_finite("kl mu")?;
    log_var.check_finite("kl log_var")?;
    let batch = mu.rows() as f64;
    let mut dmu = Tensor::zeros(mu.shape());
    let mut dlv = Tensor::zeros(mu.shape());
    let mut loss = 0.0;
    {
        let dm = dmu.data_mut();
        let dl = dlv.data_mut();
        for i in 0..mu.len() {
            let m = mu.data()[i];
            let lv = log_var.data()[i];
            loss += 0.5 * (lv.exp() + m * m - 1.0 - lv);
            dm[i] = m / batch;
            dl[i] = 0.5 * (lv.exp() - 1.0) / batch;
        }
    }
    Ok((loss / batch, dmu, dlv))
}
