//! 2-d convolution (im2col + GEMM) and 2x2 pooling.

use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::{Element, Result, Tensor, TensorError};

/// Sliding-window geometry shared by conv2d, unfold and fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        PatchGeometry { kernel, stride, pad }
    }

    /// Number of sliding positions along an extent, requiring exact division.
    pub fn out_extent(&self, extent: usize, op: &'static str) -> Result<usize> {
        let padded = extent + 2 * self.pad;
        if padded < self.kernel {
            return Err(TensorError::Geometry {
                op,
                msg: format!("kernel {} larger than padded extent {}", self.kernel, padded),
            });
        }
        let span = padded - self.kernel;
        if span % self.stride != 0 {
            return Err(TensorError::Geometry {
                op,
                msg: format!(
                    "extent {} with kernel {}, stride {}, pad {} does not tile exactly",
                    extent, self.kernel, self.stride, self.pad
                ),
            });
        }
        Ok(span / self.stride + 1)
    }

    /// Number of sliding positions with standard floor semantics; trailing
    /// input that does not fill a full stride is dropped. Used by conv2d,
    /// where no fold round trip has to hold.
    pub fn conv_out_extent(&self, extent: usize, op: &'static str) -> Result<usize> {
        let padded = extent + 2 * self.pad;
        if padded < self.kernel {
            return Err(TensorError::Geometry {
                op,
                msg: format!("kernel {} larger than padded extent {}", self.kernel, padded),
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Extract sliding k x k patches of one image `[C, H, W]` into columns
/// `[C*k*k, L]` (row-major, channel-first within a column).
pub(crate) fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    geo: PatchGeometry,
    lh: usize,
    lw: usize,
) -> Vec<E> {
    let (k, stride, pad) = (geo.kernel, geo.stride, geo.pad);
    let l = lh * lw;
    let mut cols = vec![E::zero(); c * k * k * l];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oy in 0..lh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..lw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * l + oy * lw + ox] =
                            x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back into an image; exact adjoint of [`im2col`].
pub(crate) fn col2im<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    geo: PatchGeometry,
    lh: usize,
    lw: usize,
) -> Vec<E> {
    let (k, stride, pad) = (geo.kernel, geo.stride, geo.pad);
    let l = lh * lw;
    let mut out = vec![E::zero(); c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oy in 0..lh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..lw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (ch * h + iy as usize) * w + ix as usize;
                        out[dst] = out[dst] + cols[row * l + oy * lw + ox];
                    }
                }
            }
        }
    }
    out
}

/// 2-d convolution of `x: [N, Cin, H, W]` with `w: [Cout, Cin, k, k]` and
/// bias `[Cout]`. Zero padding, floor output extents.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::Geometry {
            op: "conv2d",
            msg: format!("bad ranks: x {:?}, w {:?}", xs, ws),
        });
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    if ws[1] != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    if k % 2 == 0 {
        return Err(TensorError::Geometry {
            op: "conv2d",
            msg: format!("kernel size {} must be odd", k),
        });
    }
    if bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: vec![cout],
            rhs: bias.shape().to_vec(),
        });
    }
    let geo = PatchGeometry::new(k, stride, pad);
    let oh = geo.conv_out_extent(h, "conv2d")?;
    let ow = geo.conv_out_extent(w, "conv2d")?;
    let l = oh * ow;
    let ckk = cin * k * k;

    let xv = x.to_vec();
    let wv = weight.to_vec();
    let bv = bias.to_vec();
    let mut data = vec![E::zero(); n * cout * l];
    for b in 0..n {
        let cols = im2col(&xv[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, geo, oh, ow);
        let o = gemm_nn(&wv, &cols, cout, ckk, l);
        let dst = &mut data[b * cout * l..(b + 1) * cout * l];
        dst.copy_from_slice(&o);
        for co in 0..cout {
            for i in 0..l {
                dst[co * l + i] = dst[co * l + i] + bv[co];
            }
        }
    }

    Ok(Tensor::from_op(
        vec![n, cout, oh, ow],
        data,
        "conv2d",
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let need_x = parents[0].requires_grad();
            let need_w = parents[1].requires_grad();
            let need_b = parents[2].requires_grad();
            let mut dx = if need_x { vec![E::zero(); n * cin * h * w] } else { Vec::new() };
            let mut dw64 = if need_w { vec![0.0f64; cout * ckk] } else { Vec::new() };
            for b in 0..n {
                let gout = &g[b * cout * l..(b + 1) * cout * l];
                if need_w {
                    let cols =
                        im2col(&xv[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, geo, oh, ow);
                    let d = gemm_nt(gout, &cols, cout, l, ckk);
                    for (acc, v) in dw64.iter_mut().zip(&d) {
                        *acc += v.into_f64();
                    }
                }
                if need_x {
                    let dcols = gemm_tn(&wv, gout, ckk, cout, l);
                    let dimg = col2im(&dcols, cin, h, w, geo, oh, ow);
                    dx[b * cin * h * w..(b + 1) * cin * h * w].copy_from_slice(&dimg);
                }
            }
            if need_x {
                parents[0].accumulate_grad(&dx);
            }
            if need_w {
                let dw: Vec<E> = dw64.iter().map(|v| E::from_f64(*v)).collect();
                parents[1].accumulate_grad(&dw);
            }
            if need_b {
                let mut db = vec![0.0f64; cout];
                for b in 0..n {
                    for co in 0..cout {
                        for i in 0..l {
                            db[co] += g[(b * cout + co) * l + i].into_f64();
                        }
                    }
                }
                let db: Vec<E> = db.iter().map(|v| E::from_f64(*v)).collect();
                parents[2].accumulate_grad(&db);
            }
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolKind {
    Average,
    Max,
}

/// 2x2 pooling with stride 2. A trailing odd row/column is truncated.
pub fn pool2x2<E: Element>(x: &Tensor<E>, kind: PoolKind) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Geometry {
            op: "pool2x2",
            msg: format!("expected 4-d tensor, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(TensorError::Geometry {
            op: "pool2x2",
            msg: format!("extents {}x{} too small", h, w),
        });
    }
    let xv = x.to_vec();
    let mut data = vec![E::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; if kind == PoolKind::Max { n * c * oh * ow } else { 0 }];
    for img in 0..n * c {
        let src = &xv[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = [
                    (2 * oy) * w + 2 * ox,
                    (2 * oy) * w + 2 * ox + 1,
                    (2 * oy + 1) * w + 2 * ox,
                    (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let out_i = img * oh * ow + oy * ow + ox;
                match kind {
                    PoolKind::Average => {
                        let s: f64 = idx.iter().map(|&i| src[i].into_f64()).sum();
                        data[out_i] = E::from_f64(s / 4.0);
                    }
                    PoolKind::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        data[out_i] = src[best];
                        argmax[out_i] = img * h * w + best;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        data,
        "pool2x2",
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![E::zero(); n * c * h * w];
            match kind {
                PoolKind::Average => {
                    let quarter = E::from_f64(0.25);
                    for img in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[img * oh * ow + oy * ow + ox] * quarter;
                                let base = img * h * w;
                                dx[base + (2 * oy) * w + 2 * ox] = dx[base + (2 * oy) * w + 2 * ox] + gv;
                                dx[base + (2 * oy) * w + 2 * ox + 1] =
                                    dx[base + (2 * oy) * w + 2 * ox + 1] + gv;
                                dx[base + (2 * oy + 1) * w + 2 * ox] =
                                    dx[base + (2 * oy + 1) * w + 2 * ox] + gv;
                                dx[base + (2 * oy + 1) * w + 2 * ox + 1] =
                                    dx[base + (2 * oy + 1) * w + 2 * ox + 1] + gv;
                            }
                        }
                    }
                }
                PoolKind::Max => {
                    for (out_i, &src_i) in argmax.iter().enumerate() {
                        dx[src_i] = dx[src_i] + g[out_i];
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    ))
}
