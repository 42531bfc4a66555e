use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::he_conv;
use super::ops::{conv2d_backward, relu, relu_grad, relu_masked, Conv2d};
use super::receptive::RfLayer;
use super::tensor::{Real, Tensor};
use super::LayerGrad;
use crate::error::{Error, Result};

/// Fully convolutional patch critic: `layers` 3×3 conv + ReLU stages, then a
/// 1×1 conv to one logit channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub in_channels: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        DiscriminatorArch {
            in_channels: 4,
            channels: 64,
            layers: 4,
            kernel: 3,
        }
    }
}

impl DiscriminatorArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.layers == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid discriminator: {self:?}")));
        }
        Ok(())
    }

    pub fn rf_layers(&self) -> Vec<RfLayer> {
        let mut seq = vec![RfLayer::Conv { kernel: self.kernel }; self.layers];
        seq.push(RfLayer::Conv { kernel: 1 });
        seq
    }
}

pub struct DiscTape<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

impl<T: Real> DiscTape<T> {
    /// Whether each ReLU input was positive, in forward order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|t| t.data().iter().map(|&v| v > T::zero())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    arch: DiscriminatorArch,
    layers: Vec<Conv2d<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng>(arch: DiscriminatorArch, rng: &mut R) -> Result<Discriminator<T>> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.layers + 1);
        let mut cur = arch.in_channels;
        for _ in 0..arch.layers {
            layers.push(he_conv(arch.channels, cur, arch.kernel, rng));
            cur = arch.channels;
        }
        layers.push(he_conv(1, cur, 1, rng));
        Ok(Discriminator { arch, layers })
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Conv2d<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.layers
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            arch: self.arch,
            layers: self.layers.iter().map(Conv2d::cast).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DiscTape<T>)> {
        self.run(x, None)
    }

    /// Forward pass with the ReLUs following `pattern` (see
    /// [`DiscTape::relu_pattern`]) instead of their inputs' signs.
    pub fn forward_frozen(&self, x: &Tensor<T>, pattern: &[bool]) -> Result<Tensor<T>> {
        Ok(self.run(x, Some(pattern))?.0)
    }

    fn run(&self, x: &Tensor<T>, pattern: Option<&[bool]>) -> Result<(Tensor<T>, DiscTape<T>)> {
        if x.channels() != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {}",
                self.arch.in_channels,
                x.channels()
            )));
        }
        let mut tape = DiscTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.arch.layers),
        };
        let mut h = x.clone();
        let mut used = 0;
        for layer in &self.layers[..self.arch.layers] {
            let z = layer.forward(&h)?;
            let a = match pattern {
                None => relu(&z),
                Some(p) => {
                    let n = z.data().len();
                    let on = p.get(used..used + n).ok_or_else(|| Error::Shape("ReLU pattern too short".into()))?;
                    used += n;
                    relu_masked(&z, on)?
                }
            };
            tape.inputs.push(std::mem::replace(&mut h, a));
            tape.pre.push(z);
        }
        let out = self.layers[self.arch.layers].forward(&h)?;
        tape.inputs.push(h);
        Ok((out, tape))
    }

    /// Gradients for upstream `dy` on the logit map. Parameter gradients are
    /// skipped when `need_params` is false (a generator update only needs the
    /// input gradient).
    pub fn backward(
        &self,
        tape: &DiscTape<T>,
        dy: &Tensor<T>,
        need_params: bool,
        need_dx: bool,
    ) -> Result<(Vec<LayerGrad<T>>, Option<Tensor<T>>)> {
        let last = self.arch.layers;
        let mut grads = Vec::with_capacity(self.layers.len());
        let cg = conv2d_backward(&tape.inputs[last], &self.layers[last].weight, dy, true, need_params)?;
        grads.push(LayerGrad { dw: cg.dw, db: cg.db });
        let mut g = cg.dx.expect("requested");
        let mut dx = None;
        for i in (0..last).rev() {
            g = relu_grad(&tape.pre[i], &g);
            let want_dx = i > 0 || need_dx;
            let cg = conv2d_backward(&tape.inputs[i], &self.layers[i].weight, &g, want_dx, need_params)?;
            grads.push(LayerGrad { dw: cg.dw, db: cg.db });
            if i > 0 {
                g = cg.dx.expect("requested");
            } else {
                dx = cg.dx;
            }
        }
        grads.reverse();
        Ok((grads, dx))
    }
}
