//! Elementwise ops, reductions, matrix products and shape plumbing.
//!
//! Every op builds the output eagerly and registers a backward closure that
//! scatter-adds into grad-enabled parents. Inner products accumulate in f64
//! regardless of the tensor dtype.

use rayon::prelude::*;

use super::{Element, Result, Tensor, TensorError};

const PAR_THRESHOLD: usize = 1 << 14;

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x + *y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            for p in parents {
                if p.requires_grad() {
                    p.accumulate_grad(g);
                }
            }
        }),
    ))
}

pub fn sub<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x - *y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        "sub",
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            if parents[0].requires_grad() {
                parents[0].accumulate_grad(g);
            }
            if parents[1].requires_grad() {
                let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                parents[1].accumulate_grad(&neg);
            }
        }),
    ))
}

pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x * *y)
        .collect();
    let (av, bv) = (a.to_vec(), b.to_vec());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                let d: Vec<E> = g.iter().zip(&bv).map(|(gv, y)| *gv * *y).collect();
                parents[0].accumulate_grad(&d);
            }
            if parents[1].requires_grad() {
                let d: Vec<E> = g.iter().zip(&av).map(|(gv, x)| *gv * *x).collect();
                parents[1].accumulate_grad(&d);
            }
        }),
    ))
}

pub fn neg<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let data = a.data().iter().map(|x| -*x).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "neg",
        vec![a.clone()],
        Box::new(|g, parents| {
            let d: Vec<E> = g.iter().map(|v| -*v).collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn add_scalar<E: Element>(a: &Tensor<E>, c: E) -> Tensor<E> {
    let data = a.data().iter().map(|x| *x + c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "add_scalar",
        vec![a.clone()],
        Box::new(|g, parents| parents[0].accumulate_grad(g)),
    )
}

pub fn mul_scalar<E: Element>(a: &Tensor<E>, c: E) -> Tensor<E> {
    let data = a.data().iter().map(|x| *x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "mul_scalar",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let d: Vec<E> = g.iter().map(|v| *v * c).collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

/// |x|, with subgradient 0 at exactly zero.
pub fn abs<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let av = a.to_vec();
    let data = av.iter().map(|x| x.abs()).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "abs",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let d: Vec<E> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| {
                    if *x > E::zero() {
                        *gv
                    } else if *x < E::zero() {
                        -*gv
                    } else {
                        E::zero()
                    }
                })
                .collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn relu<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let av = a.to_vec();
    let data = av
        .iter()
        .map(|x| if *x > E::zero() { *x } else { E::zero() })
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "relu",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let d: Vec<E> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| if *x > E::zero() { *gv } else { E::zero() })
                .collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn leaky_relu<E: Element>(a: &Tensor<E>, slope: E) -> Tensor<E> {
    let av = a.to_vec();
    let data = av
        .iter()
        .map(|x| if *x > E::zero() { *x } else { *x * slope })
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "leaky_relu",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let d: Vec<E> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| if *x > E::zero() { *gv } else { *gv * slope })
                .collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn sum<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let total: f64 = a.data().iter().map(|v| v.into_f64()).sum();
    Tensor::from_op(
        vec![1],
        vec![E::from_f64(total)],
        "sum",
        vec![a.clone()],
        Box::new(|g, parents| {
            let d = vec![g[0]; parents[0].numel()];
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn mean<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let n = a.numel();
    let total: f64 = a.data().iter().map(|v| v.into_f64()).sum();
    Tensor::from_op(
        vec![1],
        vec![E::from_f64(total / n as f64)],
        "mean",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let scale = E::from_f64(g[0].into_f64() / n as f64);
            let d = vec![scale; n];
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn reshape<E: Element>(a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(TensorError::Geometry {
            op: "reshape",
            msg: format!("cannot view {:?} as {:?}", a.shape(), shape),
        });
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        a.to_vec(),
        "reshape",
        vec![a.clone()],
        Box::new(|g, parents| parents[0].accumulate_grad(g)),
    ))
}

/// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<E: Element>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    assert!(!parts.is_empty());
    let first = parts[0].shape();
    if first.len() != 4 {
        return Err(TensorError::Geometry {
            op: "concat_channels",
            msg: format!("expected 4-d tensors, got {:?}", first),
        });
    }
    let (n, h, w) = (first[0], first[2], first[3]);
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
        channels.push(s[1]);
    }
    let c_total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = vec![E::zero(); n * c_total * plane];
    for b in 0..n {
        let mut c_off = 0;
        for (p, &c) in parts.iter().zip(&channels) {
            let src = p.data();
            let src = &src[b * c * plane..(b + 1) * c * plane];
            let dst = &mut data[(b * c_total + c_off) * plane..(b * c_total + c_off + c) * plane];
            dst.copy_from_slice(src);
            c_off += c;
        }
    }
    let channels_b = channels.clone();
    Ok(Tensor::from_op(
        vec![n, c_total, h, w],
        data,
        "concat_channels",
        parts.to_vec(),
        Box::new(move |g, parents| {
            for b in 0..n {
                let mut c_off = 0;
                for (p, &c) in parents.iter().zip(&channels_b) {
                    if p.requires_grad() {
                        let mut d = vec![E::zero(); p.numel()];
                        d[b * c * plane..(b + 1) * c * plane].copy_from_slice(
                            &g[(b * c_total + c_off) * plane..(b * c_total + c_off + c) * plane],
                        );
                        p.accumulate_grad(&d);
                    }
                    c_off += c;
                }
            }
        }),
    ))
}

/// Elementwise multiply of `x: [N, C, H, W]` by a single-channel gate
/// `s: [N, 1, H, W]`, broadcast over channels.
pub fn mul_channel_broadcast<E: Element>(x: &Tensor<E>, s: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ss = s.shape();
    if xs.len() != 4 || ss.len() != 4 || ss[1] != 1 || xs[0] != ss[0] || xs[2] != ss[2] || xs[3] != ss[3]
    {
        return Err(TensorError::ShapeMismatch {
            op: "mul_channel_broadcast",
            lhs: xs.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plane = h * w;
    let xv = x.to_vec();
    let sv = s.to_vec();
    let mut data = vec![E::zero(); xv.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..plane {
                data[(b * c + ch) * plane + i] = xv[(b * c + ch) * plane + i] * sv[b * plane + i];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        data,
        "mul_channel_broadcast",
        vec![x.clone(), s.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut d = vec![E::zero(); xv.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..plane {
                            d[(b * c + ch) * plane + i] =
                                g[(b * c + ch) * plane + i] * sv[b * plane + i];
                        }
                    }
                }
                parents[0].accumulate_grad(&d);
            }
            if parents[1].requires_grad() {
                let mut d = vec![E::zero(); n * plane];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..plane {
                            d[b * plane + i] =
                                d[b * plane + i] + g[(b * c + ch) * plane + i] * xv[(b * c + ch) * plane + i];
                        }
                    }
                }
                parents[1].accumulate_grad(&d);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// GEMM kernels (f64 accumulation, row-parallel)
// ---------------------------------------------------------------------------

/// out[m,n] = a[m,k] * b[k,n], row-major. Operands are widened to f64 once
/// up front so the inner loop is a pure f64 axpy the compiler can vectorize.
pub(crate) fn gemm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let af: Vec<f64> = a.iter().map(|v| v.into_f64()).collect();
    let bf: Vec<f64> = b.iter().map(|v| v.into_f64()).collect();
    let mut out = vec![E::zero(); m * n];
    let body = |(i, row): (usize, &mut [E])| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            let av = af[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bf[kk * n..(kk + 1) * n];
            for (ac, bv) in acc.iter_mut().zip(brow) {
                *ac += av * *bv;
            }
        }
        for j in 0..n {
            row[j] = E::from_f64(acc[j]);
        }
    };
    if m * k * n > PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// out[m,n] = a[m,k] * b[n,k]^T (b stored row-major as [n,k]).
pub(crate) fn gemm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let af: Vec<f64> = a.iter().map(|v| v.into_f64()).collect();
    let bf: Vec<f64> = b.iter().map(|v| v.into_f64()).collect();
    let mut out = vec![E::zero(); m * n];
    let body = |(i, row): (usize, &mut [E])| {
        let arow = &af[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bf[j * k..(j + 1) * k];
            let acc: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            row[j] = E::from_f64(acc);
        }
    };
    if m * k * n > PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// out[m,n] = a[k,m]^T * b[k,n] (a stored row-major as [k,m]).
pub(crate) fn gemm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let af: Vec<f64> = a.iter().map(|v| v.into_f64()).collect();
    let bf: Vec<f64> = b.iter().map(|v| v.into_f64()).collect();
    let mut out = vec![E::zero(); m * n];
    let body = |(i, row): (usize, &mut [E])| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            let av = af[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &bf[kk * n..(kk + 1) * n];
            for (ac, bv) in acc.iter_mut().zip(brow) {
                *ac += av * *bv;
            }
        }
        for j in 0..n {
            row[j] = E::from_f64(acc[j]);
        }
    };
    if m * k * n > PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// Fully-connected layer: `x [N, In] * w [Out, In]^T + b [Out] -> [N, Out]`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.shape() != [ws[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    let xv = x.to_vec();
    let wv = w.to_vec();
    let bv = b.to_vec();
    let mut data = gemm_nt(&xv, &wv, n, cin, cout);
    for row in 0..n {
        for j in 0..cout {
            data[row * cout + j] = data[row * cout + j] + bv[j];
        }
    }
    Ok(Tensor::from_op(
        vec![n, cout],
        data,
        "linear",
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                let dx = gemm_nn(g, &wv, n, cout, cin);
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].requires_grad() {
                let dw = gemm_tn(g, &xv, cout, n, cin);
                parents[1].accumulate_grad(&dw);
            }
            if parents[2].requires_grad() {
                let mut db = vec![0.0f64; cout];
                for row in 0..n {
                    for j in 0..cout {
                        db[j] += g[row * cout + j].into_f64();
                    }
                }
                let db: Vec<E> = db.iter().map(|v| E::from_f64(*v)).collect();
                parents[2].accumulate_grad(&db);
            }
        }),
    ))
}

/// Batched matrix product `[N, A, K] x [N, K, B] -> [N, A, B]`.
pub fn bmm<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (n, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
    let av = a.to_vec();
    let bv = b.to_vec();
    let mut data = vec![E::zero(); n * m * p];
    for i in 0..n {
        let o = gemm_nn(&av[i * m * k..(i + 1) * m * k], &bv[i * k * p..(i + 1) * k * p], m, k, p);
        data[i * m * p..(i + 1) * m * p].copy_from_slice(&o);
    }
    Ok(Tensor::from_op(
        vec![n, m, p],
        data,
        "bmm",
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            // dA = dC * B^T ; dB = A^T * dC
            if parents[0].requires_grad() {
                let mut d = vec![E::zero(); n * m * k];
                for i in 0..n {
                    let o = gemm_nt(
                        &g[i * m * p..(i + 1) * m * p],
                        &bv[i * k * p..(i + 1) * k * p],
                        m,
                        p,
                        k,
                    );
                    d[i * m * k..(i + 1) * m * k].copy_from_slice(&o);
                }
                parents[0].accumulate_grad(&d);
            }
            if parents[1].requires_grad() {
                let mut d = vec![E::zero(); n * k * p];
                for i in 0..n {
                    let o = gemm_tn(
                        &av[i * m * k..(i + 1) * m * k],
                        &g[i * m * p..(i + 1) * m * p],
                        k,
                        m,
                        p,
                    );
                    d[i * k * p..(i + 1) * k * p].copy_from_slice(&o);
                }
                parents[1].accumulate_grad(&d);
            }
        }),
    ))
}

/// `[N, A, B] -> [N, B, A]`.
pub fn transpose_12<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(TensorError::Geometry {
            op: "transpose_12",
            msg: format!("expected 3-d tensor, got {:?}", s),
        });
    }
    let (n, r, c) = (s[0], s[1], s[2]);
    let av = a.data();
    let mut data = vec![E::zero(); av.len()];
    for i in 0..n {
        for rr in 0..r {
            for cc in 0..c {
                data[i * r * c + cc * r + rr] = av[i * r * c + rr * c + cc];
            }
        }
    }
    drop(av);
    Ok(Tensor::from_op(
        vec![n, c, r],
        data,
        "transpose_12",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let mut d = vec![E::zero(); g.len()];
            for i in 0..n {
                for cc in 0..c {
                    for rr in 0..r {
                        d[i * r * c + rr * c + cc] = g[i * r * c + cc * r + rr];
                    }
                }
            }
            parents[0].accumulate_grad(&d);
        }),
    ))
}

/// Normalize each column of `[N, D, L]` to unit Euclidean norm.
/// Columns with norm below `eps` map to zero (and get zero gradient).
pub fn normalize_columns<E: Element>(a: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(TensorError::Geometry {
            op: "normalize_columns",
            msg: format!("expected 3-d tensor, got {:?}", s),
        });
    }
    let (n, d, l) = (s[0], s[1], s[2]);
    let av = a.to_vec();
    let mut norms = vec![0.0f64; n * l];
    for i in 0..n {
        for row in 0..d {
            for col in 0..l {
                let v = av[(i * d + row) * l + col].into_f64();
                norms[i * l + col] += v * v;
            }
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt();
    }
    let mut data = vec![E::zero(); av.len()];
    for i in 0..n {
        for row in 0..d {
            for col in 0..l {
                let nr = norms[i * l + col];
                if nr >= eps {
                    data[(i * d + row) * l + col] =
                        E::from_f64(av[(i * d + row) * l + col].into_f64() / nr);
                }
            }
        }
    }
    let out_copy = data.clone();
    Ok(Tensor::from_op(
        vec![n, d, l],
        data,
        "normalize_columns",
        vec![a.clone()],
        Box::new(move |g, parents| {
            if !parents[0].requires_grad() {
                return;
            }
            // dx = (dy - y * <y, dy>) / ||x|| per column.
            let mut dx = vec![E::zero(); g.len()];
            for i in 0..n {
                for col in 0..l {
                    let nr = norms[i * l + col];
                    if nr < eps {
                        continue;
                    }
                    let mut dot = 0.0f64;
                    for row in 0..d {
                        let idx = (i * d + row) * l + col;
                        dot += out_copy[idx].into_f64() * g[idx].into_f64();
                    }
                    for row in 0..d {
                        let idx = (i * d + row) * l + col;
                        dx[idx] = E::from_f64(
                            (g[idx].into_f64() - out_copy[idx].into_f64() * dot) / nr,
                        );
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

/// Row-wise max over the last axis of `[N, A, B]`: returns values `[N, A]`
/// and argmax indices (ties break to the smallest index). The gradient of a
/// value routes to its argmax entry only.
pub fn max_last_dim<E: Element>(a: &Tensor<E>) -> Result<(Tensor<E>, Vec<usize>)> {
    let s = a.shape();
    if s.len() != 3 || s[2] == 0 {
        return Err(TensorError::Geometry {
            op: "max_last_dim",
            msg: format!("expected non-empty 3-d tensor, got {:?}", s),
        });
    }
    let (n, rows, cols) = (s[0], s[1], s[2]);
    let av = a.data();
    let mut vals = vec![E::zero(); n * rows];
    let mut idxs = vec![0usize; n * rows];
    for i in 0..n * rows {
        let row = &av[i * cols..(i + 1) * cols];
        let mut best = row[0];
        let mut best_j = 0usize;
        for (j, v) in row.iter().enumerate().skip(1) {
            if *v > best {
                best = *v;
                best_j = j;
            }
        }
        vals[i] = best;
        idxs[i] = best_j;
    }
    drop(av);
    let idx_copy = idxs.clone();
    let t = Tensor::from_op(
        vec![n, rows],
        vals,
        "max_last_dim",
        vec![a.clone()],
        Box::new(move |g, parents| {
            let mut d = vec![E::zero(); n * rows * cols];
            for i in 0..n * rows {
                d[i * cols + idx_copy[i]] = g[i];
            }
            parents[0].accumulate_grad(&d);
        }),
    );
    Ok((t, idxs))
}
