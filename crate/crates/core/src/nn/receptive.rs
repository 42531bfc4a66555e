use std::fmt;
use std::str::FromStr;

use super::discriminator::Discriminator;
use super::generator::Generator;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One stage of a layer sequence, as seen by the receptive-field recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfLayer {
    /// Stride-1 square convolution.
    Conv { kernel: usize },
    /// Non-overlapping pooling (kernel = stride = `size`).
    Pool { size: usize },
    /// Nearest-neighbour upsampling.
    Upsample { factor: usize },
}

impl fmt::Display for RfLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RfLayer::Conv { kernel } => write!(f, "conv{kernel}"),
            RfLayer::Pool { size } => write!(f, "pool{size}"),
            RfLayer::Upsample { factor } => write!(f, "up{factor}"),
        }
    }
}

impl FromStr for RfLayer {
    type Err = Error;

    /// `conv3`, `pool2`, `up2`.
    fn from_str(s: &str) -> Result<RfLayer> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let (kind, num) = s.split_at(split);
        let n: usize = num
            .parse()
            .map_err(|_| Error::Config(format!("layer {s:?} lacks a size")))?;
        if n == 0 {
            return Err(Error::Config(format!("layer {s:?} has zero size")));
        }
        match kind {
            "conv" if n % 2 == 1 => Ok(RfLayer::Conv { kernel: n }),
            "conv" => Err(Error::Config(format!("conv kernel {n} must be odd"))),
            "pool" => Ok(RfLayer::Pool { size: n }),
            "up" => Ok(RfLayer::Upsample { factor: n }),
            other => Err(Error::Config(format!("unsupported layer kind {other:?}"))),
        }
    }
}

/// Parses a comma-separated sequence such as `conv3,pool2,conv3,up2`.
pub fn parse_layers(spec: &str) -> Result<Vec<RfLayer>> {
    spec.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

/// Receptive-field side length by the jump-and-size recurrence.
///
/// The jump is tracked as a rational (numerator / denominator) so upsampling
/// below the input resolution stays exact.
pub fn receptive_field_analytic(layers: &[RfLayer]) -> Result<usize> {
    // rf and jump in units of 1/den input pixels
    let (mut rf, mut jump, mut den) = (1usize, 1usize, 1usize);
    for layer in layers {
        match *layer {
            RfLayer::Conv { kernel } => rf += (kernel - 1) * jump,
            RfLayer::Pool { size } => {
                rf += (size - 1) * jump;
                jump *= size;
            }
            RfLayer::Upsample { factor } => {
                if jump % factor != 0 {
                    rf *= factor;
                    jump *= factor;
                    den *= factor;
                }
                jump /= factor;
            }
        }
    }
    Ok(rf.div_ceil(den))
}

/// Bounding box (height, width) of the nonzero entries of `grad`, summed over
/// batch and channels.
pub fn nonzero_extent(grad: &Tensor<f64>) -> (usize, usize) {
    let [n, c, h, w] = grad.shape();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if grad.at(b, ch, y, x) != 0.0 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
        }
    }
    if y0 == usize::MAX {
        return (0, 0);
    }
    (y1 - y0 + 1, x1 - x0 + 1)
}

fn one_hot(shape: [usize; 4], y: usize, x: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    t.set(0, 0, y, x, 1.0);
    t
}

fn probe_input(shape: [usize; 4]) -> Tensor<f64> {
    // deterministic, non-degenerate, mostly positive
    let n = shape.iter().product::<usize>();
    let data = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7548776662).fract()).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// Input pixels influencing the output pixel at (`y`, `x`) of a `size×size`
/// generator input, measured by gradient sparsity.
pub fn generator_empirical_rf(g: &Generator<f64>, size: usize, y: usize, x: usize) -> Result<(usize, usize)> {
    let input = probe_input([1, g.arch().in_channels, size, size]);
    let (out, tape) = g.forward_tape(&input)?;
    let (_, dx) = g.backward(&tape, &one_hot(out.shape(), y, x), true)?;
    Ok(nonzero_extent(&dx.expect("requested")))
}

pub fn discriminator_empirical_rf(d: &Discriminator<f64>, size: usize, y: usize, x: usize) -> Result<(usize, usize)> {
    let input = probe_input([1, d.arch().in_channels, size, size]);
    let (out, tape) = d.forward_tape(&input)?;
    let (_, dx) = d.backward(&tape, &one_hot(out.shape(), y, x), false, true)?;
    Ok(nonzero_extent(&dx.expect("requested")))
}
