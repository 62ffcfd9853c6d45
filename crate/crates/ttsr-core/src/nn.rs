//! Layer building blocks: named convolution / linear layers with He-normal
//! initialization, and parameter collection for optimizers and checkpoints.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tensor::{conv, ops, Element, Parameter, Result, Tensor};

/// He-normal fan-in initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal<E: Element>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<E> {
    he_normal_gain(shape, fan_in, 1.0, rng)
}

/// [`he_normal`] with an extra gain on the standard deviation. A small gain
/// (0.1) on the closing conv of residual branches keeps the variance of deep
/// residual stacks near the input variance, instead of doubling per block.
pub fn he_normal_gain<E: Element>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut Rng,
) -> Tensor<E> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            E::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data)
}

pub struct Conv2d<E: Element> {
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::with_gain(name, cin, cout, kernel, stride, pad, 1.0, rng)
    }

    /// Conv layer whose weights are initialized with a damped He scale; used
    /// on residual-branch outputs (see [`he_normal_gain`]).
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = he_normal_gain(&[cout, cin, kernel, kernel], cin * kernel * kernel, gain, rng);
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    /// Conv layer feeding a pixel-shuffle with factor `r`: ICNR init. One
    /// base filter is drawn per output channel and replicated across the r²
    /// shuffle phases, so the upsample starts as nearest-neighbour and the
    /// shuffle introduces no checkerboard pattern at initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new_icnr(
        name: &str,
        cin: usize,
        cout_base: usize,
        r: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let base = he_normal_gain(
            &[cout_base, cin, kernel, kernel],
            cin * kernel * kernel,
            1.0,
            rng,
        );
        let bv = base.to_vec();
        let row = cin * kernel * kernel;
        let mut data = Vec::with_capacity(bv.len() * r * r);
        for ch in 0..cout_base {
            for _ in 0..r * r {
                data.extend_from_slice(&bv[ch * row..(ch + 1) * row]);
            }
        }
        let weight = Tensor::new(&[cout_base * r * r, cin, kernel, kernel], data);
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout_base * r * r])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv::conv2d(x, self.weight.tensor(), self.bias.tensor(), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<Parameter<E>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

pub struct Linear<E: Element> {
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), he_normal(&[cout, cin], cin, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::linear(x, self.weight.tensor(), self.bias.tensor())
    }

    pub fn params(&self) -> Vec<Parameter<E>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Total trainable element count across a parameter list.
pub fn count_params<E: Element>(params: &[Parameter<E>]) -> usize {
    params.iter().map(|p| p.shape().iter().product::<usize>()).sum()
}

/// Random tensor with entries uniform in `(lo, hi)`, for tests and probes.
pub fn uniform<E: Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<E> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| E::from_f64(rng.random_range(lo..hi)))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Stream};

    #[test]
    fn single_conv_param_count() {
        let mut rng = seeded(0, Stream::Init);
        let conv = Conv2d::<f32>::new("c", 3, 64, 3, 1, 1, &mut rng);
        assert_eq!(count_params(&conv.params()), 3 * 64 * 9 + 64);
    }

    #[test]
    fn he_normal_scale_is_plausible() {
        let mut rng = seeded(1, Stream::Init);
        let t = he_normal::<f64>(&[1000], 50, &mut rng);
        let var: f64 = t.data().iter().map(|v| v * v).sum::<f64>() / 1000.0;
        let expect = 2.0 / 50.0;
        assert!((var - expect).abs() < expect * 0.3, "var {var} vs {expect}");
    }
}
