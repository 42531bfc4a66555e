use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerGrad, Real};

/// First and second moments for every parameter tensor, in the order
/// weight 0, bias 0, weight 1, bias 1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(sizes: &[usize]) -> OptimizerState<T> {
        OptimizerState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_layers(layers: &[Conv2d<T>]) -> OptimizerState<T> {
        let sizes: Vec<usize> = layers.iter().flat_map(|l| [l.weight.data().len(), l.bias.len()]).collect();
        OptimizerState::new(&sizes)
    }
}

/// One bias-corrected Adam update of `param` in place. `step` is the
/// 1-based count including this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, cfg: &TrainConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (tc1, tc2) = (T::of(c1), T::of(c2));
    let (tlr, teps) = (T::of(lr), T::of(cfg.eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = tb1 * *m + ob1 * g;
        *v = tb2 * *v + ob2 * g * g;
        let m_hat = *m / tc1;
        let v_hat = *v / tc2;
        *p -= tlr * m_hat / (v_hat.sqrt() + teps);
    }
}

/// Adam step over a network's layers.
pub fn adam_step<T: Real>(
    layers: &mut [Conv2d<T>],
    grads: &[LayerGrad<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != layers.len() || state.m.len() != 2 * layers.len() {
        return Err(Error::Shape(format!(
            "{} layers, {} gradients, {} moment tensors",
            layers.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (l, g)) in layers.iter().zip(grads).enumerate() {
        if l.weight.shape() != g.dw.shape() || l.bias.len() != g.db.len() || state.m[2 * i].len() != g.dw.data().len()
        {
            return Err(Error::Shape(format!("layer {i}: gradient does not match parameters")));
        }
        if let Some(bad) = g.dw.data().iter().chain(&g.db).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of layer {i} contains {bad:?}")));
        }
    }
    state.step += 1;
    let step = state.step;
    for (i, (l, g)) in layers.iter_mut().zip(grads).enumerate() {
        let (mw, rest) = state.m[2 * i..].split_at_mut(1);
        let (vw, vrest) = state.v[2 * i..].split_at_mut(1);
        adam_update(l.weight.data_mut(), g.dw.data(), &mut mw[0], &mut vw[0], step, lr, cfg);
        adam_update(&mut l.bias, &g.db, &mut rest[0], &mut vrest[0], step, lr, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    /// Textbook Adam written independently of `adam_update`.
    fn reference_trajectory(theta0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.5f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = vec![];
        for t in 1..=steps {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t as f64));
            let vh = v / (1.0 - b2.powf(t as f64));
            th -= lr * mh / (vh.sqrt() + eps);
            out.push(th);
        }
        out
    }

    #[test]
    fn matches_reference_on_a_parabola() {
        let cfg = TrainConfig::default();
        let want = reference_trajectory(1.0, 10, 0.1);
        let mut th = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for (t, w) in want.iter().enumerate() {
            let g = [2.0 * th[0]];
            adam_update(&mut th, &g, &mut m, &mut v, t as u64 + 1, 0.1, &cfg);
            assert!((th[0] - w).abs() < 1e-9, "step {t}: {} vs {w}", th[0]);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        for g in [0.3f64, -7.0, 1e-3] {
            let mut th = [0.0f64];
            adam_update(&mut th, &[g], &mut [0.0], &mut [0.0], 1, 2e-4, &cfg);
            // closed form: −lr·g / (|g| + ε)
            assert!((th[0] + 2e-4 * g / (g.abs() + 1e-8)).abs() < 1e-18);
            assert!((th[0] + 2e-4 * g.signum()).abs() < 1e-6);
        }
    }

    fn layer() -> Conv2d<f64> {
        Conv2d {
            weight: Tensor::filled([1, 1, 1, 1], 0.5),
            bias: vec![0.25],
        }
    }

    #[test]
    fn zero_gradient_only_advances_the_counter() {
        let cfg = TrainConfig::default();
        let mut layers = vec![layer()];
        let mut st = OptimizerState::for_layers(&layers);
        let g = LayerGrad {
            dw: Tensor::zeros([1, 1, 1, 1]),
            db: vec![0.0],
        };
        adam_step(&mut layers, &[g], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(layers[0], layer());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn rejects_non_finite_and_mismatched_gradients() {
        let cfg = TrainConfig::default();
        let mut layers = vec![layer()];
        let mut st = OptimizerState::for_layers(&layers);
        let nan = LayerGrad {
            dw: Tensor::filled([1, 1, 1, 1], f64::NAN),
            db: vec![0.0],
        };
        assert!(matches!(adam_step(&mut layers, &[nan], &mut st, 1e-3, &cfg), Err(Error::NonFinite(_))));
        assert_eq!(st.step, 0);
        let wide = LayerGrad {
            dw: Tensor::zeros([2, 1, 1, 1]),
            db: vec![0.0],
        };
        assert!(matches!(adam_step(&mut layers, &[wide], &mut st, 1e-3, &cfg), Err(Error::Shape(_))));
    }
}
