use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::he_conv;
use super::ops::{
    avg_pool2, avg_pool2_grad, conv2d_backward, nn_upsample2, nn_upsample2_grad, pixelwise_norm, pixelwise_norm_grad,
    relu, relu_grad, relu_masked, Conv2d, NormOutput,
};
use super::receptive::RfLayer;
use super::tensor::{Real, Tensor};
use super::LayerGrad;
use crate::error::{Error, Result};

/// UNet layout. Channel width at scale `s` is `base_channels · 2ˢ`.
///
/// Each non-bottom scale runs `encoder_convs` blocks on the way down and
/// `decoder_convs` on the way up; the bottom scale runs `bottleneck_convs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub scales: usize,
    pub encoder_convs: usize,
    pub decoder_convs: usize,
    pub bottleneck_convs: usize,
    pub kernel: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch {
            in_channels: 3,
            out_channels: 1,
            base_channels: 32,
            scales: 4,
            encoder_convs: 2,
            decoder_convs: 2,
            bottleneck_convs: 4,
            kernel: 3,
        }
    }
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.base_channels,
            self.scales,
            self.encoder_convs,
            self.decoder_convs,
            self.bottleneck_convs,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("generator sizes must be positive: {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("generator kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial dims must divide by this.
    pub fn divisor(&self) -> usize {
        1 << (self.scales - 1)
    }

    /// `(out, in, kernel)` of every conv in execution order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let k = self.kernel;
        let mut shapes = vec![(self.base_channels, self.in_channels, 1)];
        let mut cur = self.base_channels;
        for s in 0..self.scales - 1 {
            for _ in 0..self.encoder_convs {
                shapes.push((self.width(s), cur, k));
                cur = self.width(s);
            }
        }
        let bottom = self.scales - 1;
        for _ in 0..self.bottleneck_convs {
            shapes.push((self.width(bottom), cur, k));
            cur = self.width(bottom);
        }
        for s in (0..self.scales - 1).rev() {
            cur += self.width(s);
            for _ in 0..self.decoder_convs {
                shapes.push((self.width(s), cur, k));
                cur = self.width(s);
            }
        }
        shapes.push((self.out_channels, cur, 1));
        shapes
    }

    /// Longest input-to-output path, for the analytic receptive field.
    pub fn rf_layers(&self) -> Vec<RfLayer> {
        let conv = RfLayer::Conv { kernel: self.kernel };
        let mut seq = vec![RfLayer::Conv { kernel: 1 }];
        for _ in 0..self.scales - 1 {
            seq.extend(std::iter::repeat_n(conv, self.encoder_convs));
            seq.push(RfLayer::Pool { size: 2 });
        }
        seq.extend(std::iter::repeat_n(conv, self.bottleneck_convs));
        for _ in 0..self.scales - 1 {
            seq.push(RfLayer::Upsample { factor: 2 });
            seq.extend(std::iter::repeat_n(conv, self.decoder_convs));
        }
        seq.push(RfLayer::Conv { kernel: 1 });
        seq
    }
}

/// Everything backward needs from one forward pass.
pub struct GenTape<T> {
    inputs: Vec<Tensor<T>>,
    norms: Vec<Option<NormOutput<T>>>,
    adapter_pre: Tensor<T>,
}

impl<T: Real> GenTape<T> {
    /// Whether each ReLU input was positive, in forward order. Inputs with
    /// equal patterns lie on the same smooth piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let norms = self.norms.iter().flatten().map(|n| &n.y);
        std::iter::once(&self.adapter_pre)
            .chain(norms)
            .flat_map(|t| t.data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    arch: GeneratorArch,
    layers: Vec<Conv2d<T>>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng>(arch: GeneratorArch, rng: &mut R) -> Result<Generator<T>> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i, k)| he_conv(o, i, k, rng))
            .collect();
        Ok(Generator { arch, layers })
    }

    /// Rebuilds from stored layers, checking they fit `arch`.
    pub fn from_layers(arch: GeneratorArch, layers: Vec<Conv2d<T>>) -> Result<Generator<T>> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        let fits = shapes.len() == layers.len()
            && shapes.iter().zip(&layers).all(|(&(o, i, k), l)| {
                l.weight.shape() == [o, i, k, k] && l.bias.len() == o
            });
        if !fits {
            return Err(Error::Checkpoint("generator parameters do not match the architecture".into()));
        }
        Ok(Generator { arch, layers })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Conv2d<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv2d::param_count).sum()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            arch: self.arch,
            layers: self.layers.iter().map(Conv2d::cast).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = self.arch.divisor();
        if x.channels() != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {}",
                self.arch.in_channels,
                x.channels()
            )));
        }
        if x.height() % d != 0 || x.width() % d != 0 {
            return Err(Error::Shape(format!(
                "generator input {}x{} is not divisible by {d}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GenTape<T>)> {
        self.run(x, None)
    }

    /// Forward pass with every ReLU following `pattern` (as returned by
    /// [`GenTape::relu_pattern`]) instead of its input's sign: the smooth
    /// piece of the network that contains the point the pattern came from.
    pub fn forward_frozen(&self, x: &Tensor<T>, pattern: &[bool]) -> Result<Tensor<T>> {
        let (out, _) = self.run(x, Some(pattern))?;
        Ok(out)
    }

    fn run(&self, x: &Tensor<T>, pattern: Option<&[bool]>) -> Result<(Tensor<T>, GenTape<T>)> {
        self.check_input(x)?;
        let mut used = 0;
        let mut act = |z: &Tensor<T>| -> Result<Tensor<T>> {
            match pattern {
                None => Ok(relu(z)),
                Some(p) => {
                    let n = z.data().len();
                    let on = p.get(used..used + n).ok_or_else(|| Error::Shape("ReLU pattern too short".into()))?;
                    used += n;
                    relu_masked(z, on)
                }
            }
        };
        let a = self.arch;
        let mut tape = GenTape {
            inputs: Vec::with_capacity(self.layers.len()),
            norms: Vec::with_capacity(self.layers.len()),
            adapter_pre: Tensor::zeros([0, 0, 0, 0]),
        };
        let mut li = 0;
        let pre = self.layers[0].forward(x)?;
        let mut h = act(&pre)?;
        tape.inputs.push(x.clone());
        tape.norms.push(None);
        tape.adapter_pre = pre;
        li += 1;

        let mut block = |h: Tensor<T>, tape: &mut GenTape<T>, li: &mut usize| -> Result<Tensor<T>> {
            let z = self.layers[*li].forward(&h)?;
            let n = pixelwise_norm(&z);
            let out = act(&n.y)?;
            tape.inputs.push(h);
            tape.norms.push(Some(n));
            *li += 1;
            Ok(out)
        };

        let mut skips = Vec::with_capacity(a.scales - 1);
        for _ in 0..a.scales - 1 {
            for _ in 0..a.encoder_convs {
                h = block(h, &mut tape, &mut li)?;
            }
            let pooled = avg_pool2(&h)?;
            skips.push(h);
            h = pooled;
        }
        for _ in 0..a.bottleneck_convs {
            h = block(h, &mut tape, &mut li)?;
        }
        for s in (0..a.scales - 1).rev() {
            h = Tensor::concat_channels(&nn_upsample2(&h), &skips[s])?;
            for _ in 0..a.decoder_convs {
                h = block(h, &mut tape, &mut li)?;
            }
        }
        let out = self.layers[li].forward(&h)?;
        tape.inputs.push(h);
        tape.norms.push(None);
        Ok((out, tape))
    }

    /// Parameter gradients (and optionally the input gradient) for upstream
    /// gradient `dy` on the output.
    pub fn backward(&self, tape: &GenTape<T>, dy: &Tensor<T>, need_dx: bool) -> Result<(Vec<LayerGrad<T>>, Option<Tensor<T>>)> {
        let a = self.arch;
        let n_layers = self.layers.len();
        let mut grads: Vec<Option<LayerGrad<T>>> = vec![None; n_layers];
        let mut li = n_layers - 1;

        let g = conv2d_backward(&tape.inputs[li], &self.layers[li].weight, dy, true, true)?;
        grads[li] = Some(LayerGrad { dw: g.dw, db: g.db });
        let mut g = g.dx.expect("requested");

        let mut block_back = |g: Tensor<T>, li: &mut usize| -> Result<Tensor<T>> {
            *li -= 1;
            let norm = tape.norms[*li].as_ref().expect("block layer");
            let g = pixelwise_norm_grad(norm, &relu_grad(&norm.y, &g));
            let cg = conv2d_backward(&tape.inputs[*li], &self.layers[*li].weight, &g, true, true)?;
            grads[*li] = Some(LayerGrad { dw: cg.dw, db: cg.db });
            Ok(cg.dx.expect("requested"))
        };

        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; a.scales - 1];
        for s in 0..a.scales - 1 {
            for _ in 0..a.decoder_convs {
                g = block_back(g, &mut li)?;
            }
            let up_ch = g.channels() - a.width(s);
            let (g_up, g_skip) = g.split_channels(up_ch);
            skip_grads[s] = Some(g_skip);
            g = nn_upsample2_grad(&g_up)?;
        }
        for _ in 0..a.bottleneck_convs {
            g = block_back(g, &mut li)?;
        }
        for s in (0..a.scales - 1).rev() {
            g = avg_pool2_grad(&g);
            let skip = skip_grads[s].take().expect("set above");
            for (v, &w) in g.data_mut().iter_mut().zip(skip.data()) {
                *v += w;
            }
            for _ in 0..a.encoder_convs {
                g = block_back(g, &mut li)?;
            }
        }
        debug_assert_eq!(li, 1);
        let g = relu_grad(&tape.adapter_pre, &g);
        let cg = conv2d_backward(&tape.inputs[0], &self.layers[0].weight, &g, need_dx, true)?;
        grads[0] = Some(LayerGrad { dw: cg.dw, db: cg.db });
        let grads = grads.into_iter().map(|g| g.expect("every layer visited")).collect();
        Ok((grads, cg.dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> GeneratorArch {
        GeneratorArch {
            base_channels: 4,
            scales: 3,
            ..GeneratorArch::default()
        }
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()
    }

    #[test]
    fn layer_widths_double_per_scale() {
        let shapes = GeneratorArch::default().layer_shapes();
        assert_eq!(shapes[0], (32, 3, 1));
        assert_eq!(shapes[1], (32, 32, 3));
        assert_eq!(shapes[3], (64, 32, 3));
        assert_eq!(shapes[5], (128, 64, 3));
        assert_eq!(shapes[7], (256, 128, 3));
        // first decoder conv maps upsampled 256 + skip 128 back to 128
        assert_eq!(shapes[11], (128, 384, 3));
        assert_eq!(*shapes.last().unwrap(), (1, 32, 1));
        assert_eq!(shapes.len(), 1 + 6 + 4 + 6 + 1);
    }

    #[test]
    fn preserves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Generator<f32> = Generator::new(GeneratorArch::default(), &mut rng).unwrap();
        let y = g.forward(&random_input([1, 3, 64, 64], 2)).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 64]);
        assert!(y.all_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Generator<f32> = Generator::new(small_arch(), &mut rng).unwrap();
        assert!(g.forward(&Tensor::zeros([1, 3, 12, 8])).is_ok());
        assert!(matches!(g.forward(&Tensor::zeros([1, 3, 10, 8])), Err(Error::Shape(_))));
        assert!(matches!(g.forward(&Tensor::zeros([1, 2, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let x = random_input([2, 3, 16, 24], 5);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let g: Generator<f32> = Generator::new(small_arch(), &mut rng).unwrap();
            g.forward(&x).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn batch_items_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Generator<f32> = Generator::new(small_arch(), &mut rng).unwrap();
        let x = random_input([3, 3, 8, 16], 4);
        let all = g.forward(&x).unwrap();
        let one = g.forward(&x.slice_batch(1, 2)).unwrap();
        assert_eq!(all.slice_batch(1, 2), one);
    }

    #[test]
    fn from_layers_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Generator<f32> = Generator::new(small_arch(), &mut rng).unwrap();
        assert!(Generator::from_layers(small_arch(), g.layers().to_vec()).is_ok());
        assert!(Generator::from_layers(GeneratorArch::default(), g.layers().to_vec()).is_err());
    }
}
