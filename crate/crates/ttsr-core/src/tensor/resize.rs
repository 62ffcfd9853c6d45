//! Bicubic resampling (Keys kernel, a = -0.5, edge clamp), pixel shuffle and
//! nearest-neighbor upsampling. All are linear maps, so backward is the
//! transposed scatter with the same weights.

use super::{Element, Result, Tensor, TensorError};

const KEYS_A: f64 = -0.5;

fn keys_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (KEYS_A + 2.0) * t * t * t - (KEYS_A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        KEYS_A * t * t * t - 5.0 * KEYS_A * t * t + 8.0 * KEYS_A * t - 4.0 * KEYS_A
    } else {
        0.0
    }
}

/// Per-output-sample taps: four clamped source indices and their weights.
/// Center-aligned grid: src = (dst + 0.5) * in/out - 0.5.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = (i as f64 + 0.5) * ratio - 0.5;
            let base = s.floor();
            let t = s - base;
            let mut idx = [0usize; 4];
            let mut wgt = [0f64; 4];
            for tap in 0..4 {
                let src = base as isize + tap as isize - 1;
                idx[tap] = src.clamp(0, n_in as isize - 1) as usize;
                wgt[tap] = keys_weight(t - (tap as f64 - 1.0));
            }
            (idx, wgt)
        })
        .collect()
}

/// Bicubic resize of `[N, C, H, W]` by `scale`; output extents are
/// `floor(extent * scale)`. Scale 1 is a bitwise identity.
pub fn bicubic_resize<E: Element>(x: &Tensor<E>, scale: f64) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Geometry {
            op: "bicubic_resize",
            msg: format!("expected 4-d tensor, got {:?}", s),
        });
    }
    if scale <= 0.0 {
        return Err(TensorError::Geometry {
            op: "bicubic_resize",
            msg: format!("scale {} must be positive", scale),
        });
    }
    let (h, w) = (s[2], s[3]);
    let oh = (h as f64 * scale).floor() as usize;
    let ow = (w as f64 * scale).floor() as usize;
    bicubic_resize_to(x, (oh, ow))
}

/// Bicubic resize to explicit output extents.
pub fn bicubic_resize_to<E: Element>(x: &Tensor<E>, out_hw: (usize, usize)) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Geometry {
            op: "bicubic_resize",
            msg: format!("expected 4-d tensor, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Geometry {
            op: "bicubic_resize",
            msg: "zero output extent".into(),
        });
    }
    let row_taps = cubic_taps(h, oh);
    let col_taps = cubic_taps(w, ow);
    let xv = x.to_vec();

    // horizontal pass (f64 intermediate), then vertical
    let planes = n * c;
    let mut mid = vec![0.0f64; planes * h * ow];
    for p in 0..planes {
        for y in 0..h {
            let src = &xv[p * h * w + y * w..p * h * w + (y + 1) * w];
            for (ox, (idx, wgt)) in col_taps.iter().enumerate() {
                let mut acc = 0.0;
                for tap in 0..4 {
                    acc += wgt[tap] * src[idx[tap]].into_f64();
                }
                mid[p * h * ow + y * ow + ox] = acc;
            }
        }
    }
    let mut data = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        for (oy, (idx, wgt)) in row_taps.iter().enumerate() {
            for ox in 0..ow {
                let mut acc = 0.0;
                for tap in 0..4 {
                    acc += wgt[tap] * mid[p * h * ow + idx[tap] * ow + ox];
                }
                data[p * oh * ow + oy * ow + ox] = E::from_f64(acc);
            }
        }
    }

    let row_taps_b = row_taps;
    let col_taps_b = col_taps;
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        data,
        "bicubic_resize",
        vec![x.clone()],
        Box::new(move |g, parents| {
            // transpose: vertical gather becomes scatter, then horizontal
            let mut mid = vec![0.0f64; planes * h * ow];
            for p in 0..planes {
                for (oy, (idx, wgt)) in row_taps_b.iter().enumerate() {
                    for ox in 0..ow {
                        let gv = g[p * oh * ow + oy * ow + ox].into_f64();
                        for tap in 0..4 {
                            mid[p * h * ow + idx[tap] * ow + ox] += wgt[tap] * gv;
                        }
                    }
                }
            }
            let mut dx = vec![0.0f64; planes * h * w];
            for p in 0..planes {
                for y in 0..h {
                    for (ox, (idx, wgt)) in col_taps_b.iter().enumerate() {
                        let gv = mid[p * h * ow + y * ow + ox];
                        for tap in 0..4 {
                            dx[p * h * w + y * w + idx[tap]] += wgt[tap] * gv;
                        }
                    }
                }
            }
            let dx: Vec<E> = dx.iter().map(|v| E::from_f64(*v)).collect();
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

/// Sub-pixel rearrangement `[N, C*r^2, H, W] -> [N, C, r*H, r*W]`.
pub fn pixel_shuffle<E: Element>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 || s[1] % (r * r) != 0 {
        return Err(TensorError::Geometry {
            op: "pixel_shuffle",
            msg: format!("channels {:?} not divisible by r^2 = {}", s.get(1), r * r),
        });
    }
    let (n, cr2, h, w) = (s[0], s[1], s[2], s[3]);
    let c = cr2 / (r * r);
    let (oh, ow) = (r * h, r * w);
    let xv = x.to_vec();
    let mut data = vec![E::zero(); n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src_c = ch * r * r + (oy % r) * r + (ox % r);
                    data[((b * c + ch) * oh + oy) * ow + ox] =
                        xv[((b * cr2 + src_c) * h + oy / r) * w + ox / r];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        data,
        "pixel_shuffle",
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![E::zero(); n * cr2 * h * w];
            for b in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src_c = ch * r * r + (oy % r) * r + (ox % r);
                            dx[((b * cr2 + src_c) * h + oy / r) * w + ox / r] =
                                g[((b * c + ch) * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

/// Inverse of [`pixel_shuffle`]: `[N, C, r*H, r*W] -> [N, C*r^2, H, W]`.
pub fn space_to_depth<E: Element>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % r != 0 || s[3] % r != 0 {
        return Err(TensorError::Geometry {
            op: "space_to_depth",
            msg: format!("extents {:?} not divisible by r = {}", s, r),
        });
    }
    let (n, c, ih, iw) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (ih / r, iw / r);
    let cr2 = c * r * r;
    let xv = x.to_vec();
    let mut data = vec![E::zero(); n * cr2 * h * w];
    for b in 0..n {
        for ch in 0..c {
            for iy in 0..ih {
                for ix in 0..iw {
                    let dst_c = ch * r * r + (iy % r) * r + (ix % r);
                    data[((b * cr2 + dst_c) * h + iy / r) * w + ix / r] =
                        xv[((b * c + ch) * ih + iy) * iw + ix];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, cr2, h, w],
        data,
        "space_to_depth",
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![E::zero(); n * c * ih * iw];
            for b in 0..n {
                for ch in 0..c {
                    for iy in 0..ih {
                        for ix in 0..iw {
                            let dst_c = ch * r * r + (iy % r) * r + (ix % r);
                            dx[((b * c + ch) * ih + iy) * iw + ix] =
                                g[((b * cr2 + dst_c) * h + iy / r) * w + ix / r];
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn nearest_upsample<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 || factor == 0 {
        return Err(TensorError::Geometry {
            op: "nearest_upsample",
            msg: format!("bad input: shape {:?}, factor {}", s, factor),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let xv = x.to_vec();
    let mut data = vec![E::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                data[p * oh * ow + oy * ow + ox] = xv[p * h * w + (oy / factor) * w + ox / factor];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        data,
        "nearest_upsample",
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![E::zero(); n * c * h * w];
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dst = p * h * w + (oy / factor) * w + ox / factor;
                        dx[dst] = dx[dst] + g[p * oh * ow + oy * ow + ox];
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::ops;
    use rand::prelude::*;

    #[test]
    fn constant_image_stays_constant() {
        let c = 0.37;
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], c);
        for scale in [0.25, 0.5, 2.0, 4.0, 1.5] {
            let y = bicubic_resize(&x, scale).unwrap();
            for v in y.to_vec() {
                assert!((v - c).abs() < 1e-12, "scale {scale}: {v} != {c}");
            }
        }
    }

    #[test]
    fn scale_one_is_bitwise_identity() {
        let mut rng = StdRng::seed_from_u64(2);
        let xv: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[1, 3, 5, 7], xv.clone());
        let y = bicubic_resize(&x, 1.0).unwrap();
        assert_eq!(y.to_vec(), xv);
    }

    #[test]
    fn linear_ramp_upscales_linearly() {
        // cubic interpolation reproduces linear functions exactly (interior)
        let w = 8;
        let xv: Vec<f64> = (0..w).map(|i| i as f64).collect();
        let x = Tensor::new(&[1, 1, 1, w], xv);
        let y = bicubic_resize_to(&x, (1, 2 * w)).unwrap();
        let yv = y.to_vec();
        for ox in 4..2 * w - 4 {
            let expect = (ox as f64 + 0.5) * 0.5 - 0.5;
            assert!((yv[ox] - expect).abs() < 1e-5, "at {ox}: {} vs {expect}", yv[ox]);
        }
    }

    #[test]
    fn zero_output_extent_errors() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(bicubic_resize(&x, 0.1).is_err());
    }

    #[test]
    fn bicubic_gradcheck() {
        let mut rng = StdRng::seed_from_u64(23);
        let x = Tensor::<f64>::new(&[1, 2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let err = grad_check(
            |x| {
                let y = bicubic_resize(x, 2.0).unwrap();
                ops::sum(&ops::mul(&y, &y).unwrap())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn pixel_shuffle_minimal_case() {
        let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        let xv: Vec<f64> = (0..8 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[1, 8, 3, 3], xv.clone());
        let y = space_to_depth(&pixel_shuffle(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(y.to_vec(), xv);
    }

    #[test]
    fn pixel_shuffle_matches_index_arithmetic() {
        let mut rng = StdRng::seed_from_u64(9);
        let (c, r, h, w) = (2usize, 2usize, 3usize, 4usize);
        let xv: Vec<f64> = (0..c * r * r * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = pixel_shuffle(&Tensor::new(&[1, c * r * r, h, w], xv.clone()), r).unwrap();
        let yv = y.to_vec();
        for ch in 0..c {
            for oy in 0..r * h {
                for ox in 0..r * w {
                    let src_c = ch * r * r + (oy % r) * r + (ox % r);
                    let expect = xv[((src_c) * h + oy / r) * w + ox / r];
                    assert_eq!(yv[(ch * r * h + oy) * r * w + ox], expect);
                }
            }
        }
    }

    #[test]
    fn channel_divisibility_violation_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn nearest_upsample_repeats_and_backward_sums() {
        let x = Tensor::<f64>::new_with_grad(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let y = nearest_upsample(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        ops::sum(&y).backward().unwrap();
        assert_eq!(x.grad(), vec![4.0, 4.0]);
    }
}
