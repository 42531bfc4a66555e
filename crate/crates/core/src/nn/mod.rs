//! Dense tensors with hand-written gradients, the UNet generator and the
//! patch discriminator.

mod checkpoint;
mod discriminator;
mod generator;
mod init;
mod ops;
mod receptive;
mod tensor;

pub use checkpoint::{Checkpoint, TensorEntry, MAGIC};
pub use discriminator::{DiscTape, Discriminator, DiscriminatorArch};
pub use generator::{GenTape, Generator, GeneratorArch};
pub use init::he_conv;
pub use ops::{
    avg_pool2, avg_pool2_grad, conv2d, conv2d_grad, nn_upsample2, nn_upsample2_grad, pixelwise_norm,
    pixelwise_norm_grad, relu, relu_grad, relu_masked, Conv2d, ConvGrads, NormOutput, NORM_EPS,
};
pub use receptive::{
    discriminator_empirical_rf, generator_empirical_rf, nonzero_extent, parse_layers, receptive_field_analytic,
    RfLayer,
};
pub use tensor::{Real, Tensor};

/// Gradient of one convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

impl<T: Real> LayerGrad<T> {
    pub fn all_finite(&self) -> bool {
        self.dw.all_finite() && self.db.iter().all(|v| v.is_finite())
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &LayerGrad<T>) {
        for (a, &b) in self.dw.data_mut().iter_mut().zip(other.dw.data()) {
            *a += b;
        }
        for (a, &b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }
}
