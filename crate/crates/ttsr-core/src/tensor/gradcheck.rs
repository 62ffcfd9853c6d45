//! Central finite-difference gradient checker.

use rand::prelude::*;

use super::{Element, Result, Tensor, TensorError};

/// Compare the analytic gradient of `f` at `x` against central differences,
/// elementwise, and return the worst relative error. Denominators are floored
/// at 1e-8.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Tensor<E>,
{
    let n = x.numel();
    grad_check_coords(f, x, eps, &(0..n).collect::<Vec<_>>())
}

/// [`grad_check`] restricted to `max_coords` randomly sampled coordinates.
/// Used for whole-network checks where exhaustive probing is too slow.
pub fn grad_check_sampled<E, F>(
    f: F,
    x: &Tensor<E>,
    eps: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Tensor<E>,
{
    let n = x.numel();
    if n <= max_coords {
        return grad_check(f, x, eps);
    }
    let mut coords: Vec<usize> = (0..n).collect();
    coords.shuffle(rng);
    coords.truncate(max_coords);
    grad_check_coords(f, x, eps, &coords)
}

fn grad_check_coords<E, F>(f: F, x: &Tensor<E>, eps: f64, coords: &[usize]) -> Result<f64>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Tensor<E>,
{
    let base = x.to_vec();
    let leaf = Tensor::new_with_grad(x.shape(), base.clone());
    let out = f(&leaf);
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite("grad_check objective"));
    }
    out.backward()?;
    let analytic = leaf.grad();

    let eval = |data: Vec<E>| -> Result<f64> {
        let v = f(&Tensor::new(x.shape(), data)).item().into_f64();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] = plus[i] + E::from_f64(eps);
        let mut minus = base.clone();
        minus[i] = minus[i] - E::from_f64(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i].into_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Finite-difference check of analytic parameter gradients for an arbitrary
/// scalar objective. Re-runs `loss` with each sampled parameter coordinate
/// perturbed by ±eps and compares against the gradients accumulated by one
/// `backward` call. Returns the worst relative error.
pub fn param_grad_check<E, F>(
    mut loss: F,
    params: &[super::Parameter<E>],
    eps: f64,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    E: Element,
    F: FnMut() -> Result<Tensor<E>>,
{
    for p in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<E>> = params.iter().map(|p| p.grad()).collect();
    for p in params {
        p.zero_grad();
    }

    // Coordinates whose gradient is far below the model's gradient scale are
    // judged in absolute terms: their FD quotient is dominated by f64
    // evaluation noise of the loss, not by gradient information.
    let gscale = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, v| m.max(v.into_f64().abs()));
    let floor = (1e-3 * gscale).max(1e-8);

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.tensor().to_vec();
        let n = base.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > coords_per_param {
            coords.shuffle(rng);
            coords.truncate(coords_per_param);
        }
        for &c in &coords {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[c] = E::from_f64(base[c].into_f64() + delta);
                p.set_data(d);
                let v = loss()?.item().into_f64();
                if !v.is_finite() {
                    return Err(TensorError::NonFinite("param_grad_check objective"));
                }
                Ok(v)
            };
            let plus = probe(eps);
            let minus = probe(-eps);
            p.set_data(base.clone());
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][c].into_f64();
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// One entry of the finite-difference battery: an op (or network) name and
/// its worst observed relative error.
#[derive(Debug, Clone)]
pub struct BatteryEntry {
    pub name: String,
    pub rel_err: f64,
}

fn away_from_zero(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
    use rand::Rng as _;
    let data = (0..shape.iter().product())
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Finite-difference battery over every differentiable tensor op, in f64.
/// Inputs avoid activation kinks and argmax ties so central differences are
/// valid. Returns one worst-relative-error entry per op (and per
/// differentiated argument for multi-input ops).
pub fn op_battery(seed: u64, eps: f64) -> Result<Vec<BatteryEntry>> {
    use crate::tensor::conv::{conv2d, pool2x2, PatchGeometry, PoolKind};
    use crate::tensor::ops;
    use crate::tensor::patch::{fold, gather_columns, unfold, IndexMap};
    use crate::tensor::resize::{
        bicubic_resize, nearest_upsample, pixel_shuffle, space_to_depth,
    };

    let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Init);
    let mut out = Vec::new();
    let mut push = |name: &str, err: Result<f64>| -> Result<()> {
        out.push(BatteryEntry {
            name: name.to_string(),
            rel_err: err?,
        });
        Ok(())
    };

    // a fixed random projection makes every output coordinate matter
    let weigh = |t: &Tensor<f64>, w: &Tensor<f64>| -> Tensor<f64> {
        ops::sum(&ops::mul(t, w).expect("projection shapes"))
    };

    let a = away_from_zero(&[2, 3, 4], &mut rng);
    let b = away_from_zero(&[2, 3, 4], &mut rng);
    let w = away_from_zero(&[2, 3, 4], &mut rng);
    push("add", grad_check(|x| weigh(&ops::add(x, &b).unwrap(), &w), &a, eps))?;
    push("sub", grad_check(|x| weigh(&ops::sub(&b, x).unwrap(), &w), &a, eps))?;
    push("mul.lhs", grad_check(|x| weigh(&ops::mul(x, &b).unwrap(), &w), &a, eps))?;
    push("mul.rhs", grad_check(|x| weigh(&ops::mul(&b, x).unwrap(), &w), &a, eps))?;
    push("neg", grad_check(|x| weigh(&ops::neg(x), &w), &a, eps))?;
    push("add_scalar", grad_check(|x| weigh(&ops::add_scalar(x, 0.7), &w), &a, eps))?;
    push("mul_scalar", grad_check(|x| weigh(&ops::mul_scalar(x, -1.3), &w), &a, eps))?;
    push("abs", grad_check(|x| weigh(&ops::abs(x), &w), &a, eps))?;
    push("relu", grad_check(|x| weigh(&ops::relu(x), &w), &a, eps))?;
    push(
        "leaky_relu",
        grad_check(|x| weigh(&ops::leaky_relu(x, 0.2), &w), &a, eps),
    )?;
    push("sum", grad_check(|x| ops::sum(x), &a, eps))?;
    push("mean", grad_check(|x| ops::mean(x), &a, eps))?;
    push(
        "reshape",
        grad_check(|x| weigh(&ops::reshape(&ops::reshape(x, &[6, 4]).unwrap(), &[2, 3, 4]).unwrap(), &w), &a, eps),
    )?;

    let img = away_from_zero(&[2, 3, 6, 6], &mut rng);
    let img2 = away_from_zero(&[2, 2, 6, 6], &mut rng);
    let wcat = away_from_zero(&[2, 5, 6, 6], &mut rng);
    push(
        "concat_channels.first",
        grad_check(|x| weigh(&ops::concat_channels(&[x.clone(), img2.clone()]).unwrap(), &wcat), &img, eps),
    )?;
    push(
        "concat_channels.second",
        grad_check(|x| weigh(&ops::concat_channels(&[img.clone(), x.clone()]).unwrap(), &wcat), &img2, eps),
    )?;

    let s = away_from_zero(&[2, 1, 6, 6], &mut rng);
    let wimg = away_from_zero(&[2, 3, 6, 6], &mut rng);
    push(
        "mul_channel_broadcast.features",
        grad_check(|x| weigh(&ops::mul_channel_broadcast(x, &s).unwrap(), &wimg), &img, eps),
    )?;
    push(
        "mul_channel_broadcast.gate",
        grad_check(|x| weigh(&ops::mul_channel_broadcast(&img, x).unwrap(), &wimg), &s, eps),
    )?;

    let xm = away_from_zero(&[3, 4], &mut rng);
    let wm = away_from_zero(&[2, 4], &mut rng);
    let bm = away_from_zero(&[2], &mut rng);
    let wout = away_from_zero(&[3, 2], &mut rng);
    push(
        "linear.x",
        grad_check(|x| weigh(&ops::linear(x, &wm, &bm).unwrap(), &wout), &xm, eps),
    )?;
    push(
        "linear.w",
        grad_check(|x| weigh(&ops::linear(&xm, x, &bm).unwrap(), &wout), &wm, eps),
    )?;
    push(
        "linear.b",
        grad_check(|x| weigh(&ops::linear(&xm, &wm, x).unwrap(), &wout), &bm, eps),
    )?;

    let ba = away_from_zero(&[2, 3, 4], &mut rng);
    let bb = away_from_zero(&[2, 4, 5], &mut rng);
    let wbm = away_from_zero(&[2, 3, 5], &mut rng);
    push(
        "bmm.lhs",
        grad_check(|x| weigh(&ops::bmm(x, &bb).unwrap(), &wbm), &ba, eps),
    )?;
    push(
        "bmm.rhs",
        grad_check(|x| weigh(&ops::bmm(&ba, x).unwrap(), &wbm), &bb, eps),
    )?;
    let wtr = away_from_zero(&[2, 4, 3], &mut rng);
    push(
        "transpose_12",
        grad_check(|x| weigh(&ops::transpose_12(x).unwrap(), &wtr), &ba, eps),
    )?;
    push(
        "normalize_columns",
        grad_check(|x| weigh(&ops::normalize_columns(x, 1e-12).unwrap(), &wbm.clone()), &away_from_zero(&[2, 3, 5], &mut rng), eps),
    )?;

    // max over a last dim with well-separated entries
    let mx = {
        let mut d = Vec::new();
        use rand::Rng as _;
        for _ in 0..2 * 3 {
            for j in 0..4 {
                d.push(j as f64 + rng.random_range(-0.3..0.3));
            }
        }
        Tensor::new(&[2, 3, 4], d)
    };
    let wmx = away_from_zero(&[2, 3], &mut rng);
    push(
        "max_last_dim",
        grad_check(|x| weigh(&ops::max_last_dim(x).unwrap().0, &wmx), &mx, eps),
    )?;

    let cw = away_from_zero(&[2, 3, 3, 3], &mut rng);
    let cb = away_from_zero(&[2], &mut rng);
    let wcv = away_from_zero(&[2, 2, 3, 3], &mut rng);
    push(
        "conv2d.x",
        grad_check(|x| weigh(&conv2d(x, &cw, &cb, 2, 1).unwrap(), &wcv), &img, eps),
    )?;
    push(
        "conv2d.w",
        grad_check(|x| weigh(&conv2d(&img, x, &cb, 2, 1).unwrap(), &wcv), &cw, eps),
    )?;
    push(
        "conv2d.b",
        grad_check(|x| weigh(&conv2d(&img, &cw, x, 2, 1).unwrap(), &wcv), &cb, eps),
    )?;

    let wpool = away_from_zero(&[2, 3, 3, 3], &mut rng);
    push(
        "pool2x2.avg",
        grad_check(|x| weigh(&pool2x2(x, PoolKind::Average).unwrap(), &wpool), &img, eps),
    )?;
    // max pool with strictly ordered cells so the argmax never moves
    let pm = {
        let mut d: Vec<f64> = (0..2 * 3 * 36).map(|i| (i % 97) as f64 * 0.1).collect();
        use rand::Rng as _;
        for v in d.iter_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        Tensor::new(&[2, 3, 6, 6], d)
    };
    push(
        "pool2x2.max",
        grad_check(|x| weigh(&pool2x2(x, PoolKind::Max).unwrap(), &wpool), &pm, eps),
    )?;

    let geo = PatchGeometry::new(3, 1, 1);
    let wuf = {
        let u = unfold(&img, geo)?;
        away_from_zero(u.shape(), &mut rng)
    };
    push(
        "unfold",
        grad_check(|x| weigh(&unfold(x, geo).unwrap(), &wuf), &img, eps),
    )?;
    let cols = away_from_zero(wuf.shape(), &mut rng);
    let wfold = away_from_zero(&[2, 3, 6, 6], &mut rng);
    push(
        "fold.sum",
        grad_check(|x| weigh(&fold(x, (6, 6), geo, false).unwrap(), &wfold), &cols, eps),
    )?;
    push(
        "fold.avg",
        grad_check(|x| weigh(&fold(x, (6, 6), geo, true).unwrap(), &wfold), &cols, eps),
    )?;
    let idx = IndexMap::new(2, 36, {
        use rand::Rng as _;
        (0..72).map(|_| rng.random_range(0..36)).collect()
    });
    let wg = away_from_zero(cols.shape(), &mut rng);
    push(
        "gather_columns",
        grad_check(|x| weigh(&gather_columns(x, &idx).unwrap(), &wg), &cols, eps),
    )?;

    let ps_in = away_from_zero(&[2, 8, 3, 3], &mut rng);
    let wps = away_from_zero(&[2, 2, 6, 6], &mut rng);
    push(
        "pixel_shuffle",
        grad_check(|x| weigh(&pixel_shuffle(x, 2).unwrap(), &wps), &ps_in, eps),
    )?;
    let wsd = away_from_zero(&[2, 12, 3, 3], &mut rng);
    push(
        "space_to_depth",
        grad_check(|x| weigh(&space_to_depth(x, 2).unwrap(), &wsd), &img, eps),
    )?;
    let wnu = away_from_zero(&[2, 3, 12, 12], &mut rng);
    push(
        "nearest_upsample",
        grad_check(|x| weigh(&nearest_upsample(x, 2).unwrap(), &wnu), &img, eps),
    )?;
    let wbi = away_from_zero(&[2, 3, 12, 12], &mut rng);
    push(
        "bicubic_resize",
        grad_check(|x| weigh(&bicubic_resize(x, 2.0).unwrap(), &wbi), &img, eps),
    )?;

    Ok(out)
}
