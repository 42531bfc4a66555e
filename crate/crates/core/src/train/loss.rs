use super::GanLoss;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Mean adversarial loss of a logit map against a constant `target` (1 real,
/// 0 fake) and its gradient with respect to the logits.
pub fn adversarial_loss<T: Real>(logits: &Tensor<T>, target: f64, kind: GanLoss) -> (f64, Tensor<T>) {
    let n = logits.data().len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut sum = 0.0;
    for (g, &x) in grad.data_mut().iter_mut().zip(logits.data()) {
        let x = x.f64();
        let (l, d) = match kind {
            GanLoss::Bce => {
                // max(x, 0) − x·t + ln(1 + e^−|x|), stable for large |x|
                let l = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
                (l, 1.0 / (1.0 + (-x).exp()) - target)
            }
            GanLoss::Lsgan => ((x - target) * (x - target), 2.0 * (x - target)),
        };
        sum += l;
        *g = T::of(d / n);
    }
    (sum / n, grad)
}

/// Mean absolute difference and its gradient with respect to `pred`.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("L1 of {:?} against {:?}", pred.shape(), target.shape())));
    }
    let n = pred.data().len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p.f64() - t.f64();
        sum += d.abs();
        *g = T::of(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok((sum / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    /// Adversarial term for the generator plus `λ_l1 · l1_term`.
    pub g_loss: f64,
    /// Mean of the real and fake discriminator terms.
    pub d_loss: f64,
    /// Unweighted mean |output − target|.
    pub l1_term: f64,
}

pub fn gan_losses<T: Real>(
    d_real_logits: &Tensor<T>,
    d_fake_logits: &Tensor<T>,
    g_output: &Tensor<T>,
    ct_target: &Tensor<T>,
    lambda_l1: f64,
    kind: GanLoss,
) -> Result<GanLosses> {
    if d_real_logits.shape() != d_fake_logits.shape() {
        return Err(Error::Shape(format!(
            "real logits {:?} vs fake logits {:?}",
            d_real_logits.shape(),
            d_fake_logits.shape()
        )));
    }
    for (name, t) in [("real logits", d_real_logits), ("fake logits", d_fake_logits), ("output", g_output), ("target", ct_target)] {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("{name} passed to the GAN losses")));
        }
    }
    let (l1_term, _) = l1_loss(g_output, ct_target)?;
    let (real, _) = adversarial_loss(d_real_logits, 1.0, kind);
    let (fake, _) = adversarial_loss(d_fake_logits, 0.0, kind);
    let (fool, _) = adversarial_loss(d_fake_logits, 1.0, kind);
    Ok(GanLosses {
        g_loss: fool + lambda_l1 * l1_term,
        d_loss: 0.5 * (real + fake),
        l1_term,
    })
}
