//! Generator and discriminator networks.
//!
//! The generator is a three-stream super-resolution backbone: a shallow
//! feature extractor on the LR input, stacked texture-transfer stages at 1x,
//! 2x and 4x, optional cross-scale feature exchange between the streams, and
//! a merge tail producing the 4x residual image. The discriminator is a
//! plain strided conv stack with two fully connected layers.

use crate::nn::{count_params, Conv2d, Linear};
use crate::rng::Rng;
use crate::tensor::conv::PoolKind;
use crate::tensor::ops;
use crate::tensor::resize::{bicubic_resize, pixel_shuffle};
use crate::tensor::{Element, Parameter, Result, Tensor, TensorError};
use crate::transformer::{Scale, TextureState, TextureTransformer};

/// Fixed magnification of the generator.
pub const UPSCALE: usize = 4;

/// Init gain of residual-branch closing convs (see [`crate::nn::he_normal_gain`]).
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Init gain of convs not followed by a relu: cancels the relu factor of the
/// He scale, i.e. Xavier-style variance preservation on linear paths.
pub const LINEAR_GAIN: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    /// Stream width; 64 in the full model.
    pub base_channels: usize,
    /// Residual blocks per stage: LR trunk, 1x, 2x, 4x.
    pub blocks: [usize; 4],
    /// Texture-transfer scales to enable. The 1x entry also controls whether
    /// relevance is computed at all.
    pub scales: Vec<Scale>,
    /// Cross-scale feature exchange between the streams. When off, the
    /// network is a single stream that upsamples stage by stage.
    pub csfi: bool,
    /// Pooling flavor inside the texture extractor.
    pub pool: PoolKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            blocks: [16, 16, 8, 4],
            scales: Scale::ALL.to_vec(),
            csfi: true,
            pool: PoolKind::Average,
        }
    }
}

impl GeneratorConfig {
    /// Shrunken variant for tests: same topology, fewer channels and blocks.
    pub fn tiny() -> Self {
        GeneratorConfig {
            base_channels: 16,
            blocks: [2, 2, 1, 1],
            ..GeneratorConfig::default()
        }
    }
}

/// `x + conv2(relu(conv1(x)))`, no activation after the skip.
pub struct ResidualBlock<E: Element> {
    conv1: Conv2d<E>,
    conv2: Conv2d<E>,
}

impl<E: Element> ResidualBlock<E> {
    pub fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            // damped init keeps the residual stack near-identity at start
            conv2: Conv2d::with_gain(&format!("{name}.conv2"), channels, channels, 3, 1, 1, RESIDUAL_GAIN, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.conv2.forward(&ops::relu(&self.conv1.forward(x)?))?;
        ops::add(x, &y)
    }

    pub fn params(&self) -> Vec<Parameter<E>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }
}

/// Residual trunk: `x + conv(RB_n(...RB_1(x)))`.
struct Trunk<E: Element> {
    blocks: Vec<ResidualBlock<E>>,
    conv: Conv2d<E>,
}

impl<E: Element> Trunk<E> {
    fn new(name: &str, channels: usize, n_blocks: usize, rng: &mut Rng) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| ResidualBlock::new(&format!("{name}.rb{i}"), channels, rng))
            .collect();
        Trunk {
            blocks,
            conv: Conv2d::with_gain(&format!("{name}.conv"), channels, channels, 3, 1, 1, RESIDUAL_GAIN, rng),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        ops::add(x, &self.conv.forward(&y)?)
    }

    fn params(&self) -> Vec<Parameter<E>> {
        let mut p: Vec<_> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.conv.params());
        p
    }
}

/// 2x sub-pixel upsampler: conv(C, 4C) + pixel shuffle + relu.
struct SubPixelUp<E: Element> {
    conv: Conv2d<E>,
}

impl<E: Element> SubPixelUp<E> {
    fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        SubPixelUp {
            conv: Conv2d::new_icnr(name, channels, channels, 2, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(ops::relu(&pixel_shuffle(&self.conv.forward(x)?, 2)?))
    }

    fn params(&self) -> Vec<Parameter<E>> {
        self.conv.params()
    }
}

/// Cross-stream upsample: bicubic resize then a 1x1 conv.
struct CrossUp<E: Element> {
    conv: Conv2d<E>,
    factor: usize,
}

impl<E: Element> CrossUp<E> {
    fn new(name: &str, channels: usize, factor: usize, rng: &mut Rng) -> Self {
        CrossUp {
            conv: Conv2d::new(name, channels, channels, 1, 1, 0, rng),
            factor,
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.conv.forward(&bicubic_resize(x, self.factor as f64)?)
    }

    fn params(&self) -> Vec<Parameter<E>> {
        self.conv.params()
    }
}

/// Cross-stream downsample: one strided 3x3 conv (stride 2 or 4).
struct CrossDown<E: Element> {
    conv: Conv2d<E>,
}

impl<E: Element> CrossDown<E> {
    fn new(name: &str, channels: usize, factor: usize, rng: &mut Rng) -> Self {
        CrossDown {
            conv: Conv2d::new(name, channels, channels, 3, factor, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.conv.forward(x)
    }

    fn params(&self) -> Vec<Parameter<E>> {
        self.conv.params()
    }
}

/// Two-stream exchange after the 2x stage.
struct Exchange2<E: Element> {
    up12: CrossUp<E>,
    down21: CrossDown<E>,
    merge1: Conv2d<E>,
    merge2: Conv2d<E>,
}

impl<E: Element> Exchange2<E> {
    fn new(name: &str, c: usize, rng: &mut Rng) -> Self {
        Exchange2 {
            up12: CrossUp::new(&format!("{name}.up12"), c, 2, rng),
            down21: CrossDown::new(&format!("{name}.down21"), c, 2, rng),
            merge1: Conv2d::new(&format!("{name}.merge1"), 2 * c, c, 3, 1, 1, rng),
            merge2: Conv2d::new(&format!("{name}.merge2"), 2 * c, c, 3, 1, 1, rng),
        }
    }

    fn forward(&self, f1: &Tensor<E>, f2: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let m1 = ops::relu(&self.merge1.forward(&ops::concat_channels(&[
            f1.clone(),
            self.down21.forward(f2)?,
        ])?)?);
        let m2 = ops::relu(&self.merge2.forward(&ops::concat_channels(&[
            f2.clone(),
            self.up12.forward(f1)?,
        ])?)?);
        Ok((m1, m2))
    }

    fn params(&self) -> Vec<Parameter<E>> {
        let mut p = self.up12.params();
        p.extend(self.down21.params());
        p.extend(self.merge1.params());
        p.extend(self.merge2.params());
        p
    }
}

/// Three-stream exchange after the 4x stage.
struct Exchange3<E: Element> {
    up12: CrossUp<E>,
    up14: CrossUp<E>,
    up24: CrossUp<E>,
    down21: CrossDown<E>,
    down41: CrossDown<E>,
    down42: CrossDown<E>,
    merge1: Conv2d<E>,
    merge2: Conv2d<E>,
    merge4: Conv2d<E>,
}

impl<E: Element> Exchange3<E> {
    fn new(name: &str, c: usize, rng: &mut Rng) -> Self {
        Exchange3 {
            up12: CrossUp::new(&format!("{name}.up12"), c, 2, rng),
            up14: CrossUp::new(&format!("{name}.up14"), c, 4, rng),
            up24: CrossUp::new(&format!("{name}.up24"), c, 2, rng),
            down21: CrossDown::new(&format!("{name}.down21"), c, 2, rng),
            down41: CrossDown::new(&format!("{name}.down41"), c, 4, rng),
            down42: CrossDown::new(&format!("{name}.down42"), c, 2, rng),
            merge1: Conv2d::new(&format!("{name}.merge1"), 3 * c, c, 3, 1, 1, rng),
            merge2: Conv2d::new(&format!("{name}.merge2"), 3 * c, c, 3, 1, 1, rng),
            merge4: Conv2d::new(&format!("{name}.merge4"), 3 * c, c, 3, 1, 1, rng),
        }
    }

    fn forward(
        &self,
        f1: &Tensor<E>,
        f2: &Tensor<E>,
        f4: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let m1 = ops::relu(&self.merge1.forward(&ops::concat_channels(&[
            f1.clone(),
            self.down21.forward(f2)?,
            self.down41.forward(f4)?,
        ])?)?);
        let m2 = ops::relu(&self.merge2.forward(&ops::concat_channels(&[
            f2.clone(),
            self.up12.forward(f1)?,
            self.down42.forward(f4)?,
        ])?)?);
        let m4 = ops::relu(&self.merge4.forward(&ops::concat_channels(&[
            f4.clone(),
            self.up14.forward(f1)?,
            self.up24.forward(f2)?,
        ])?)?);
        Ok((m1, m2, m4))
    }

    fn params(&self) -> Vec<Parameter<E>> {
        let mut p = Vec::new();
        for cu in [&self.up12, &self.up14, &self.up24] {
            p.extend(cu.params());
        }
        for cd in [&self.down21, &self.down41, &self.down42] {
            p.extend(cd.params());
        }
        for m in [&self.merge1, &self.merge2, &self.merge4] {
            p.extend(m.params());
        }
        p
    }
}

/// Multi-stream merge tail: upsample the 1x and 2x streams to 4x, merge, and
/// project to RGB.
struct MergeTail<E: Element> {
    up14: CrossUp<E>,
    up24: CrossUp<E>,
    merge: Conv2d<E>,
    tail1: Conv2d<E>,
    tail2: Conv2d<E>,
}

impl<E: Element> MergeTail<E> {
    fn new(name: &str, c: usize, rng: &mut Rng) -> Self {
        MergeTail {
            up14: CrossUp::new(&format!("{name}.up14"), c, 4, rng),
            up24: CrossUp::new(&format!("{name}.up24"), c, 2, rng),
            merge: Conv2d::new(&format!("{name}.merge"), 3 * c, c, 3, 1, 1, rng),
            // linear tail: variance-preserving init, no relu factor
            tail1: Conv2d::with_gain(&format!("{name}.tail1"), c, c / 2, 3, 1, 1, LINEAR_GAIN, rng),
            tail2: Conv2d::with_gain(&format!("{name}.tail2"), c / 2, 3, 1, 1, 0, LINEAR_GAIN, rng),
        }
    }

    fn forward(&self, f1: &Tensor<E>, f2: &Tensor<E>, f4: &Tensor<E>) -> Result<Tensor<E>> {
        let cat = ops::concat_channels(&[
            f4.clone(),
            self.up14.forward(f1)?,
            self.up24.forward(f2)?,
        ])?;
        let x = ops::relu(&self.merge.forward(&cat)?);
        self.tail2.forward(&self.tail1.forward(&x)?)
    }

    fn params(&self) -> Vec<Parameter<E>> {
        let mut p = self.up14.params();
        p.extend(self.up24.params());
        p.extend(self.merge.params());
        p.extend(self.tail1.params());
        p.extend(self.tail2.params());
        p
    }
}

/// Single-stream tail used when cross-scale exchange is off.
struct PlainTail<E: Element> {
    tail1: Conv2d<E>,
    tail2: Conv2d<E>,
}

impl<E: Element> PlainTail<E> {
    fn new(name: &str, c: usize, rng: &mut Rng) -> Self {
        PlainTail {
            tail1: Conv2d::with_gain(&format!("{name}.tail1"), c, c / 2, 3, 1, 1, LINEAR_GAIN, rng),
            tail2: Conv2d::with_gain(&format!("{name}.tail2"), c / 2, 3, 1, 1, 0, LINEAR_GAIN, rng),
        }
    }

    fn forward(&self, f4: &Tensor<E>) -> Result<Tensor<E>> {
        self.tail2.forward(&self.tail1.forward(f4)?)
    }

    fn params(&self) -> Vec<Parameter<E>> {
        let mut p = self.tail1.params();
        p.extend(self.tail2.params());
        p
    }
}

pub struct GeneratorOutput<E: Element> {
    /// Super-resolved image in network range, `[N, 3, 4H, 4W]`.
    pub sr: Tensor<E>,
    /// Attention state from the smallest-scale transfer, when enabled. The
    /// transferred texture maps inside feed the transferal perceptual loss.
    pub state: Option<TextureState<E>>,
}

pub struct Generator<E: Element> {
    pub config: GeneratorConfig,
    pub transformer: TextureTransformer<E>,
    head: Conv2d<E>,
    trunk0: Trunk<E>,
    trunk1: Trunk<E>,
    up2: SubPixelUp<E>,
    exchange2: Option<Exchange2<E>>,
    trunk2: Trunk<E>,
    trunk2_lr: Option<Trunk<E>>,
    up4: SubPixelUp<E>,
    exchange3: Option<Exchange3<E>>,
    trunk4: Trunk<E>,
    trunk4_lr: Option<Trunk<E>>,
    trunk4_x2: Option<Trunk<E>>,
    merge_tail: Option<MergeTail<E>>,
    plain_tail: Option<PlainTail<E>>,
}

impl<E: Element> Generator<E> {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Self {
        let c = config.base_channels;
        let [b0, b1, b2, b4] = config.blocks;
        let transformer =
            TextureTransformer::new("transformer", c, &config.scales, config.pool, rng);
        let head = Conv2d::with_gain("gen.head", 3, c, 3, 1, 1, LINEAR_GAIN, rng);
        let trunk0 = Trunk::new("gen.trunk0", c, b0, rng);
        let trunk1 = Trunk::new("gen.trunk1", c, b1, rng);
        let up2 = SubPixelUp::new("gen.up2", c, rng);
        let trunk2 = Trunk::new("gen.trunk2", c, b2, rng);
        let up4 = SubPixelUp::new("gen.up4", c, rng);
        let trunk4 = Trunk::new("gen.trunk4", c, b4, rng);
        let (exchange2, trunk2_lr, exchange3, trunk4_lr, trunk4_x2, merge_tail, plain_tail) =
            if config.csfi {
                (
                    Some(Exchange2::new("gen.ex2", c, rng)),
                    Some(Trunk::new("gen.trunk2_lr", c, b2, rng)),
                    Some(Exchange3::new("gen.ex3", c, rng)),
                    Some(Trunk::new("gen.trunk4_lr", c, b4, rng)),
                    Some(Trunk::new("gen.trunk4_x2", c, b4, rng)),
                    Some(MergeTail::new("gen.tail", c, rng)),
                    None,
                )
            } else {
                (None, None, None, None, None, None, Some(PlainTail::new("gen.tail", c, rng)))
            };
        Generator {
            config,
            transformer,
            head,
            trunk0,
            trunk1,
            up2,
            exchange2,
            trunk2,
            trunk2_lr,
            up4,
            exchange3,
            trunk4,
            trunk4_lr,
            trunk4_x2,
            merge_tail,
            plain_tail,
        }
    }

    pub fn params(&self) -> Vec<Parameter<E>> {
        let mut p = self.transformer.params();
        p.extend(self.head.params());
        p.extend(self.trunk0.params());
        p.extend(self.trunk1.params());
        p.extend(self.up2.params());
        if let Some(e) = &self.exchange2 {
            p.extend(e.params());
        }
        p.extend(self.trunk2.params());
        if let Some(t) = &self.trunk2_lr {
            p.extend(t.params());
        }
        p.extend(self.up4.params());
        if let Some(e) = &self.exchange3 {
            p.extend(e.params());
        }
        p.extend(self.trunk4.params());
        if let Some(t) = &self.trunk4_lr {
            p.extend(t.params());
        }
        if let Some(t) = &self.trunk4_x2 {
            p.extend(t.params());
        }
        if let Some(t) = &self.merge_tail {
            p.extend(t.params());
        }
        if let Some(t) = &self.plain_tail {
            p.extend(t.params());
        }
        p
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.params())
    }

    fn scale_enabled(&self, scale: Scale) -> bool {
        self.config.scales.contains(&scale)
    }

    /// Full forward pass. `lr` is the low-resolution input and `ref_img` the
    /// reference, both `[N, 3, h, w]` in network range with extents divisible
    /// by 4; the output is 4x the LR extents.
    pub fn forward(&self, lr: &Tensor<E>, ref_img: &Tensor<E>) -> Result<GeneratorOutput<E>> {
        let ls = lr.shape();
        if ls.len() != 4 || ls[1] != 3 {
            return Err(TensorError::Geometry {
                op: "generator",
                msg: format!("expected LR [N,3,h,w], got {:?}", ls),
            });
        }
        // Q and K share the 4x-degraded frequency band: LR upsampled, and
        // the reference after a 4x down/up round trip.
        let lr_up = bicubic_resize(lr, UPSCALE as f64)?.detach();
        let ref_down_up = bicubic_resize(&bicubic_resize(ref_img, 1.0 / UPSCALE as f64)?, UPSCALE as f64)?
            .detach();

        let state = if self.config.scales.is_empty() {
            None
        } else {
            Some(self.transformer.prepare(&lr_up, &ref_down_up, ref_img)?)
        };

        // 1x trunk
        let f0 = self.trunk0.forward(&self.head.forward(lr)?)?;
        let f1 = match (&state, self.scale_enabled(Scale::X1)) {
            (Some(st), true) => self.transformer.apply(&f0, Scale::X1, st)?,
            _ => f0,
        };
        let s1 = self.trunk1.forward(&f1)?;

        // 2x stage
        let u2 = self.up2.forward(&s1)?;
        let f2 = match (&state, self.scale_enabled(Scale::X2)) {
            (Some(st), true) => self.transformer.apply(&u2, Scale::X2, st)?,
            _ => u2,
        };
        let (s1b, s2) = if let (Some(ex), Some(tlr)) = (&self.exchange2, &self.trunk2_lr) {
            let (m1, m2) = ex.forward(&s1, &f2)?;
            // skips reach back to the pre-exchange features
            (
                ops::add(&s1, &ops::sub(&tlr.forward(&m1)?, &m1)?)?,
                ops::add(&f2, &ops::sub(&self.trunk2.forward(&m2)?, &m2)?)?,
            )
        } else {
            (s1.clone(), self.trunk2.forward(&f2)?)
        };

        // 4x stage
        let u4 = self.up4.forward(&s2)?;
        let f4 = match (&state, self.scale_enabled(Scale::X4)) {
            (Some(st), true) => self.transformer.apply(&u4, Scale::X4, st)?,
            _ => u4,
        };
        let sr = if let (Some(ex), Some(tlr), Some(tx2), Some(tail)) = (
            &self.exchange3,
            &self.trunk4_lr,
            &self.trunk4_x2,
            &self.merge_tail,
        ) {
            let (m1, m2, m4) = ex.forward(&s1b, &s2, &f4)?;
            let o1 = ops::add(&s1b, &ops::sub(&tlr.forward(&m1)?, &m1)?)?;
            let o2 = ops::add(&s2, &ops::sub(&tx2.forward(&m2)?, &m2)?)?;
            let o4 = ops::add(&f4, &ops::sub(&self.trunk4.forward(&m4)?, &m4)?)?;
            tail.forward(&o1, &o2, &o4)?
        } else {
            let o4 = self.trunk4.forward(&f4)?;
            self.plain_tail.as_ref().expect("plain tail").forward(&o4)?
        };
        Ok(GeneratorOutput { sr, state })
    }
}

/// Finite-difference battery over the composed networks in f64: the texture
/// transformer on its own, the full generator, and the discriminator, each
/// checked in parameter space against analytic gradients at sampled
/// coordinates. Complements [`crate::tensor::gradcheck::op_battery`].
pub fn network_gradient_battery(
    seed: u64,
    eps: f64,
    coords_per_param: usize,
) -> Result<Vec<crate::tensor::gradcheck::BatteryEntry>> {
    use crate::nn::uniform;
    use crate::rng::{seeded, Stream};
    use crate::tensor::gradcheck::{param_grad_check, BatteryEntry};
    use crate::transformer::TextureTransformer;

    let mut init = seeded(seed, Stream::Init);
    let mut probe = seeded(seed, Stream::Eval);
    let mut out = Vec::new();

    // transformer in isolation: prepare + apply at every scale
    let tt: TextureTransformer<f64> =
        TextureTransformer::new("tt", 8, &Scale::ALL, PoolKind::Average, &mut init);
    let lr_up = uniform::<f64>(&[1, 3, 16, 16], -0.9, 0.9, &mut init);
    let rdu = uniform::<f64>(&[1, 3, 16, 16], -0.9, 0.9, &mut init);
    let ref_img = uniform::<f64>(&[1, 3, 16, 16], -0.9, 0.9, &mut init);
    let f1 = uniform::<f64>(&[1, 8, 4, 4], -0.9, 0.9, &mut init);
    let f2 = uniform::<f64>(&[1, 8, 8, 8], -0.9, 0.9, &mut init);
    let f4 = uniform::<f64>(&[1, 8, 16, 16], -0.9, 0.9, &mut init);
    let tt_params = tt.params();
    let err = param_grad_check(
        || {
            let st = tt.prepare(&lr_up, &rdu, &ref_img)?;
            let o1 = tt.apply(&f1, Scale::X1, &st)?;
            let o2 = tt.apply(&f2, Scale::X2, &st)?;
            let o4 = tt.apply(&f4, Scale::X4, &st)?;
            Ok(ops::add(
                &ops::mean(&ops::mul(&o1, &o1)?),
                &ops::add(
                    &ops::mean(&ops::mul(&o2, &o2)?),
                    &ops::mean(&ops::mul(&o4, &o4)?),
                )?,
            )?)
        },
        &tt_params,
        eps,
        coords_per_param,
        &mut probe,
    )?;
    out.push(BatteryEntry {
        name: "transformer".to_string(),
        rel_err: err,
    });

    // full generator at 1x3x8x8
    let gen: Generator<f64> = Generator::new(GeneratorConfig::tiny(), &mut init);
    let lr = uniform::<f64>(&[1, 3, 8, 8], -0.9, 0.9, &mut init);
    let rf = uniform::<f64>(&[1, 3, 32, 32], -0.9, 0.9, &mut init);
    let gen_params = gen.params();
    let err = param_grad_check(
        || {
            let o = gen.forward(&lr, &rf)?;
            Ok(ops::mean(&ops::mul(&o.sr, &o.sr)?))
        },
        &gen_params,
        eps,
        coords_per_param,
        &mut probe,
    )?;
    out.push(BatteryEntry {
        name: "generator".to_string(),
        rel_err: err,
    });

    // discriminator
    let disc: Discriminator<f64> = Discriminator::new(
        DiscriminatorConfig {
            input_extent: 32,
            base_channels: 4,
        },
        &mut init,
    );
    let x = uniform::<f64>(&[2, 3, 32, 32], -0.9, 0.9, &mut init);
    let disc_params = disc.params();
    let err = param_grad_check(
        || {
            let y = disc.forward(&x)?;
            Ok(ops::mean(&ops::mul(&y, &y)?))
        },
        &disc_params,
        eps,
        coords_per_param,
        &mut probe,
    )?;
    out.push(BatteryEntry {
        name: "discriminator".to_string(),
        rel_err: err,
    });

    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    /// Training patch extent; fixes the first FC width.
    pub input_extent: usize,
    /// First conv width; doubles every second layer up to 16x.
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            input_extent: 160,
            base_channels: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn fc_in(&self) -> usize {
        let c = self.base_channels * 16;
        let e = self.input_extent / 32;
        c * e * e
    }
}

/// Strided conv stack with leaky-ReLU activations and a two-layer FC head.
pub struct Discriminator<E: Element> {
    pub config: DiscriminatorConfig,
    convs: Vec<Conv2d<E>>,
    fc1: Linear<E>,
    fc2: Linear<E>,
}

impl<E: Element> Discriminator<E> {
    pub fn new(config: DiscriminatorConfig, rng: &mut Rng) -> Self {
        assert_eq!(config.input_extent % 32, 0, "input extent must divide by 32");
        let c = config.base_channels;
        let widths = [
            (3, c, 1),
            (c, c, 2),
            (c, 2 * c, 1),
            (2 * c, 2 * c, 2),
            (2 * c, 4 * c, 1),
            (4 * c, 4 * c, 2),
            (4 * c, 8 * c, 1),
            (8 * c, 8 * c, 2),
            (8 * c, 16 * c, 1),
            (16 * c, 16 * c, 2),
        ];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Conv2d::new(&format!("disc.conv{i}"), cin, cout, 3, stride, 1, rng)
            })
            .collect();
        let fc1 = Linear::new("disc.fc1", config.fc_in(), 1024, rng);
        let fc2 = Linear::new("disc.fc2", 1024, 1, rng);
        Discriminator {
            config,
            convs,
            fc1,
            fc2,
        }
    }

    /// Critic scores `[N, 1]` for images `[N, 3, e, e]`.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.input_extent || s[3] != s[2] {
            return Err(TensorError::Geometry {
                op: "discriminator",
                msg: format!(
                    "expected [N,3,{0},{0}], got {1:?}",
                    self.config.input_extent, s
                ),
            });
        }
        let slope = E::from_f64(0.2);
        let mut y = x.clone();
        for conv in &self.convs {
            y = ops::leaky_relu(&conv.forward(&y)?, slope);
        }
        let n = y.shape()[0];
        let flat = ops::reshape(&y, &[n, self.config.fc_in()])?;
        let h = ops::leaky_relu(&self.fc1.forward(&flat)?, slope);
        self.fc2.forward(&h)
    }

    pub fn params(&self) -> Vec<Parameter<E>> {
        let mut p: Vec<_> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use crate::rng::{seeded, Stream};

    fn rng() -> Rng {
        seeded(0, Stream::Init)
    }

    #[test]
    fn full_generator_param_count_within_budget() {
        let gen = Generator::<f32>::new(GeneratorConfig::default(), &mut rng());
        let n = gen.count_params() as f64;
        let target = 6.42e6;
        assert!(
            (n - target).abs() <= target * 0.05,
            "full model: {n} params vs {target}"
        );
    }

    #[test]
    fn single_stream_param_count_within_budget() {
        let cfg = GeneratorConfig {
            csfi: false,
            ..GeneratorConfig::default()
        };
        let gen = Generator::<f32>::new(cfg, &mut rng());
        let n = gen.count_params() as f64;
        let target = 4.42e6;
        assert!(
            (n - target).abs() <= target * 0.05,
            "single stream: {n} params vs {target}"
        );
    }

    #[test]
    fn discriminator_fc_width_at_training_extent() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.fc_in(), 12800);
    }

    #[test]
    fn generator_output_is_4x() {
        let mut r = rng();
        let gen = Generator::<f32>::new(GeneratorConfig::tiny(), &mut r);
        let lr = uniform::<f32>(&[1, 3, 8, 8], -0.5, 0.5, &mut r);
        let rf = uniform::<f32>(&[1, 3, 32, 32], -0.5, 0.5, &mut r);
        let out = gen.forward(&lr, &rf).unwrap();
        assert_eq!(out.sr.shape(), &[1, 3, 32, 32]);
        assert!(out.state.is_some());
    }

    #[test]
    fn generator_without_transfer_scales_still_runs() {
        let mut r = rng();
        let cfg = GeneratorConfig {
            scales: vec![],
            ..GeneratorConfig::tiny()
        };
        let gen = Generator::<f32>::new(cfg, &mut r);
        let lr = uniform::<f32>(&[1, 3, 8, 8], -0.5, 0.5, &mut r);
        let rf = uniform::<f32>(&[1, 3, 32, 32], -0.5, 0.5, &mut r);
        let out = gen.forward(&lr, &rf).unwrap();
        assert_eq!(out.sr.shape(), &[1, 3, 32, 32]);
        assert!(out.state.is_none());
    }

    #[test]
    fn single_stream_variant_runs() {
        let mut r = rng();
        let cfg = GeneratorConfig {
            csfi: false,
            ..GeneratorConfig::tiny()
        };
        let gen = Generator::<f32>::new(cfg, &mut r);
        let lr = uniform::<f32>(&[1, 3, 8, 8], -0.5, 0.5, &mut r);
        let rf = uniform::<f32>(&[1, 3, 32, 32], -0.5, 0.5, &mut r);
        assert_eq!(gen.forward(&lr, &rf).unwrap().sr.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn network_battery_meets_tolerance() {
        for e in network_gradient_battery(11, 1e-5, 1).unwrap() {
            assert!(e.rel_err < 1e-5, "{}: rel err {}", e.name, e.rel_err);
        }
    }

    #[test]
    fn gradient_reaches_every_generator_parameter() {
        let mut r = rng();
        let gen = Generator::<f32>::new(GeneratorConfig::tiny(), &mut r);
        let lr = uniform::<f32>(&[1, 3, 8, 8], -0.5, 0.5, &mut r);
        let rf = uniform::<f32>(&[1, 3, 32, 32], -0.5, 0.5, &mut r);
        let out = gen.forward(&lr, &rf).unwrap();
        let loss = ops::mean(&ops::mul(&out.sr, &out.sr).unwrap());
        loss.backward().unwrap();
        for p in gen.params() {
            let g = p.grad();
            assert!(
                g.iter().any(|v| *v != 0.0),
                "no gradient reached {}",
                p.name()
            );
        }
    }

    #[test]
    fn discriminator_shapes_and_gradients() {
        let mut r = rng();
        let cfg = DiscriminatorConfig {
            input_extent: 32,
            base_channels: 4,
        };
        let disc = Discriminator::<f32>::new(cfg, &mut r);
        let x = uniform::<f32>(&[2, 3, 32, 32], -1.0, 1.0, &mut r);
        let y = disc.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        ops::mean(&y).backward().unwrap();
        for p in disc.params() {
            assert!(p.grad().iter().any(|v| *v != 0.0), "dead param {}", p.name());
        }
    }

    #[test]
    fn discriminator_rejects_wrong_extent() {
        let mut r = rng();
        let disc = Discriminator::<f32>::new(
            DiscriminatorConfig {
                input_extent: 32,
                base_channels: 4,
            },
            &mut r,
        );
        assert!(disc.forward(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }

    #[test]
    fn ablation_param_counts_are_monotone() {
        let mut counts = Vec::new();
        for (csfi, n_scales) in [(false, 1), (false, 3), (true, 3)] {
            let cfg = GeneratorConfig {
                csfi,
                scales: Scale::ALL[..n_scales].to_vec(),
                ..GeneratorConfig::default()
            };
            counts.push(Generator::<f32>::new(cfg, &mut rng()).count_params());
        }
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }
}
