//! Training losses: L1 reconstruction, WGAN-GP adversarial terms, and the
//! two perceptual terms (feature-space similarity against a frozen extractor
//! plug, and similarity against the transferred texture).

use crate::network::Discriminator;
use crate::rng::Rng;
use crate::tensor::conv::{conv2d, pool2x2, PoolKind};
use crate::tensor::ops;
use crate::tensor::{Element, Parameter, Result, Tensor, TensorError};
use crate::transformer::Lte;
use rand::Rng as _;

/// A differentiable scalar critic: anything usable inside the adversarial
/// losses. Implemented by [`Discriminator`] and by small analytic critics in
/// tests.
pub trait Critic<E: Element> {
    /// Scores `[N, 1]` for a batch of images.
    fn score(&self, x: &Tensor<E>) -> Result<Tensor<E>>;
    fn params(&self) -> Vec<Parameter<E>>;
}

impl<E: Element> Critic<E> for Discriminator<E> {
    fn score(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.forward(x)
    }
    fn params(&self) -> Vec<Parameter<E>> {
        Discriminator::params(self)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub per: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            adv: 1e-3,
            per: 1e-2,
            gp: 10.0,
        }
    }
}

/// Step width of the directional probe inside the gradient penalty.
pub const GP_PROBE_DELTA: f64 = 1e-3;

/// Mean absolute error.
pub fn rec_loss<E: Element>(sr: &Tensor<E>, hr: &Tensor<E>) -> Result<Tensor<E>> {
    if sr.shape() != hr.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "rec_loss",
            lhs: sr.shape().to_vec(),
            rhs: hr.shape().to_vec(),
        });
    }
    Ok(ops::mean(&ops::abs(&ops::sub(sr, hr)?)))
}

/// Mean squared error, normalized over every element.
pub fn mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d = ops::sub(a, b)?;
    Ok(ops::mean(&ops::mul(&d, &d)?))
}

/// Frozen feature extractor standing in for a pretrained perceptual network.
/// The default is a randomly initialized copy of the texture-extractor
/// architecture with plain (non-gradient) weights; real weights may be
/// installed from a checkpoint. `Identity` degrades the perceptual loss to a
/// normalized image-space MSE.
pub enum FeatureExtractorPlug<E: Element> {
    Identity,
    Frozen(FrozenLte<E>),
}

impl<E: Element> FeatureExtractorPlug<E> {
    pub fn frozen_random(seed: u64) -> Self {
        let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Init);
        let lte = Lte::<E>::new("plug", PoolKind::Average, &mut rng);
        FeatureExtractorPlug::Frozen(FrozenLte::from_lte(&lte))
    }

    /// Deepest-level features of an image, or the image itself for `Identity`.
    pub fn features(&self, img: &Tensor<E>) -> Result<Tensor<E>> {
        match self {
            FeatureExtractorPlug::Identity => Ok(img.clone()),
            FeatureExtractorPlug::Frozen(lte) => lte.level3(img),
        }
    }
}

/// Texture-extractor weights detached from the autodiff graph: forward
/// passes propagate gradient to the image only, never to these weights.
pub struct FrozenLte<E: Element> {
    weights: Vec<Tensor<E>>,
    biases: Vec<Tensor<E>>,
    pool: PoolKind,
}

impl<E: Element> FrozenLte<E> {
    pub fn from_lte(lte: &Lte<E>) -> Self {
        let params = lte.params();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in &params {
            if p.name().ends_with(".weight") {
                weights.push(p.tensor().detach());
            } else {
                biases.push(p.tensor().detach());
            }
        }
        assert_eq!(weights.len(), 5);
        FrozenLte {
            weights,
            biases,
            pool: PoolKind::Average,
        }
    }

    fn level3(&self, img: &Tensor<E>) -> Result<Tensor<E>> {
        let c = |i: usize, x: &Tensor<E>| -> Result<Tensor<E>> {
            Ok(ops::relu(&conv2d(x, &self.weights[i], &self.biases[i], 1, 1)?))
        };
        let l0 = c(0, img)?;
        let p1 = pool2x2(&c(1, &l0)?, self.pool)?;
        let l3 = c(2, &p1)?;
        let p2 = pool2x2(&c(3, &l3)?, self.pool)?;
        c(4, &p2)
    }
}

/// Eq.-13-style feature similarity between the output and ground truth.
pub fn perceptual_loss<E: Element>(
    sr: &Tensor<E>,
    hr: &Tensor<E>,
    plug: &FeatureExtractorPlug<E>,
) -> Result<Tensor<E>> {
    mse(&plug.features(sr)?, &plug.features(hr)?)
}

/// Feature similarity between the output and the transferred texture at the
/// smallest-scale level. `lte` is the live, trainable extractor, so gradient
/// reaches both the image and the extractor weights.
pub fn transferal_perceptual_loss<E: Element>(
    sr: &Tensor<E>,
    t_level3: &Tensor<E>,
    lte: &Lte<E>,
) -> Result<Tensor<E>> {
    mse(&lte.forward(sr)?.level3, t_level3)
}

fn critic_mean<E: Element>(disc: &dyn Critic<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let y = disc.score(x)?;
    if y.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("critic output"));
    }
    Ok(ops::mean(&y))
}

/// Gradient penalty at interpolates `x̂ = ε·real + (1−ε)·fake`, ε uniform per
/// batch item. The gradient norm enters through a central-difference probe
/// along the (detached) unit gradient direction, which keeps the whole term
/// first-order differentiable in the critic parameters:
/// `probe_i = (D(x̂_i + δĝ_i) − D(x̂_i − δĝ_i)) / 2δ`, penalty = mean((probe−1)²).
/// For a linear critic the probe equals the gradient norm exactly; an all-zero
/// gradient field yields ĝ = 0 and penalty 1.
///
/// Side effect: the critic's parameter gradients are cleared (the internal
/// direction pass would otherwise leave spurious accumulations). Compute the
/// penalty before any other backward pass of the step.
pub fn gradient_penalty<E: Element>(
    disc: &dyn Critic<E>,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    rng: &mut Rng,
) -> Result<Tensor<E>> {
    let n = real.shape()[0];
    let eps: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    gradient_penalty_with_eps(disc, real, fake, &eps)
}

/// [`gradient_penalty`] with explicit per-item mixing coefficients.
pub fn gradient_penalty_with_eps<E: Element>(
    disc: &dyn Critic<E>,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    eps: &[f64],
) -> Result<Tensor<E>> {
    if real.shape() != fake.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gradient_penalty",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    let shape = real.shape().to_vec();
    let n = shape[0];
    let item = shape[1..].iter().product::<usize>();
    assert_eq!(eps.len(), n);

    let (rv, fv) = (real.to_vec(), fake.to_vec());
    let mut mix = vec![E::zero(); n * item];
    for b in 0..n {
        let e = E::from_f64(eps[b]);
        let one_m = E::from_f64(1.0 - eps[b]);
        for i in 0..item {
            mix[b * item + i] = e * rv[b * item + i] + one_m * fv[b * item + i];
        }
    }

    // direction pass: ∇_x̂ D(x̂), detached
    let x_hat = Tensor::new_with_grad(&shape, mix.clone());
    let y = ops::sum(&disc.score(&x_hat)?);
    y.backward()?;
    let g = x_hat.grad();
    for p in disc.params() {
        p.zero_grad();
    }

    let mut plus = mix.clone();
    let mut minus = mix;
    let delta = GP_PROBE_DELTA;
    for b in 0..n {
        let gi = &g[b * item..(b + 1) * item];
        let norm = gi.iter().map(|v| v.into_f64() * v.into_f64()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue; // ĝ = 0: probe collapses to 0, contributing (0-1)² = 1
        }
        for i in 0..item {
            let step = E::from_f64(delta * gi[i].into_f64() / norm);
            plus[b * item + i] = plus[b * item + i] + step;
            minus[b * item + i] = minus[b * item + i] - step;
        }
    }

    let y_plus = disc.score(&Tensor::new(&shape, plus))?;
    let y_minus = disc.score(&Tensor::new(&shape, minus))?;
    let probe = ops::mul_scalar(&ops::sub(&y_plus, &y_minus)?, E::from_f64(0.5 / delta));
    let dev = ops::add_scalar(&probe, E::from_f64(-1.0));
    let pen = ops::mean(&ops::mul(&dev, &dev)?);
    if !pen.item().is_finite() {
        return Err(TensorError::NonFinite("gradient penalty"));
    }
    Ok(pen)
}

/// Critic objective: `mean D(fake) − mean D(real) + λ_gp · penalty`.
pub fn d_loss<E: Element>(
    disc: &dyn Critic<E>,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    lambda_gp: f64,
    rng: &mut Rng,
) -> Result<Tensor<E>> {
    // penalty first: its direction pass clears critic gradients
    let pen = gradient_penalty(disc, real, fake, rng)?;
    let gap = ops::sub(&critic_mean(disc, fake)?, &critic_mean(disc, real)?)?;
    ops::add(&gap, &ops::mul_scalar(&pen, E::from_f64(lambda_gp)))
}

/// Generator adversarial objective: `−mean D(fake)`.
pub fn g_adv_loss<E: Element>(disc: &dyn Critic<E>, fake: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(ops::neg(&critic_mean(disc, fake)?))
}

/// Weighted sum of the three generator loss components. Warm-up zeroes the
/// adversarial and perceptual weights.
pub fn overall_loss<E: Element>(
    rec: &Tensor<E>,
    adv: &Tensor<E>,
    per: &Tensor<E>,
    weights: &LossWeights,
    warm_up: bool,
) -> Result<Tensor<E>> {
    let (w_adv, w_per) = if warm_up { (0.0, 0.0) } else { (weights.adv, weights.per) };
    let mut total = ops::mul_scalar(rec, E::from_f64(weights.rec));
    if w_adv != 0.0 {
        total = ops::add(&total, &ops::mul_scalar(adv, E::from_f64(w_adv)))?;
    }
    if w_per != 0.0 {
        total = ops::add(&total, &ops::mul_scalar(per, E::from_f64(w_per)))?;
    }
    Ok(total)
}
