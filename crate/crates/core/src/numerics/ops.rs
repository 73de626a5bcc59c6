//! Forward kernels over plain tensors.
//!
//! Every sum runs sequentially in ascending index order so results are
//! bit-stable. The [`Tape`](super::Tape) reuses these kernels for its
//! forward pass and pairs each with a hand-written adjoint.

use crate::error::{dim_err, Error, Result};

use super::Tensor;

pub(crate) fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(dim_err!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        ));
    }
    Ok(())
}

/// Same-padded, stride-1 2-D convolution of `[C_in,H,W]` by
/// `[C_out,C_in,k,k]` with odd `k`.
pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (ci, h, w, co, k) = conv_dims(input, kernel)?;
    let mut out = vec![0.0; co * h * w];
    conv2d_into(input.data(), kernel.data(), &mut out, ci, h, w, co, k);
    Tensor::new(&[co, h, w], out)
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
) -> Result<(usize, usize, usize, usize, usize)> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernel.shape();
    if ks[1] != ci {
        return Err(dim_err!(
            "conv2d: kernel expects {} input channels, input has {ci}",
            ks[1]
        ));
    }
    if ks[2] != ks[3] || ks[2].is_multiple_of(2) {
        return Err(dim_err!("conv2d: kernel must be square and odd, got {ks:?}"));
    }
    Ok((ci, h, w, ks[0], ks[2]))
}

/// Valid output range along one axis for kernel tap `t` with padding `pad`.
#[inline]
fn tap_range(t: usize, pad: usize, len: usize) -> (usize, usize) {
    // out index o reads input index o + t - pad
    let lo = pad.saturating_sub(t);
    let hi = (len + pad).saturating_sub(t).min(len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_into(
    x: &[f64],
    kern: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
) {
    let pad = k / 2;
    for o in 0..co {
        let out_c = &mut out[o * h * w..(o + 1) * h * w];
        for c in 0..ci {
            let in_c = &x[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                let (y0, y1) = tap_range(kh, pad, h);
                for kw in 0..k {
                    let wv = kern[((o * ci + c) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(kw, pad, w);
                    for y in y0..y1 {
                        let iy = y + kh - pad;
                        let orow = &mut out_c[y * w + x0..y * w + x1];
                        let irow = &in_c[iy * w + x0 + kw - pad..iy * w + x1 + kw - pad];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoints of [`conv2d`] with respect to the input and the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    kern: &[f64],
    g: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
) {
    let pad = k / 2;
    if let Some(dx) = dx {
        for o in 0..co {
            let g_c = &g[o * h * w..(o + 1) * h * w];
            for c in 0..ci {
                let dx_c = &mut dx[c * h * w..(c + 1) * h * w];
                for kh in 0..k {
                    let (y0, y1) = tap_range(kh, pad, h);
                    for kw in 0..k {
                        let wv = kern[((o * ci + c) * k + kh) * k + kw];
                        let (x0, x1) = tap_range(kw, pad, w);
                        for y in y0..y1 {
                            let iy = y + kh - pad;
                            let grow = &g_c[y * w + x0..y * w + x1];
                            let drow =
                                &mut dx_c[iy * w + x0 + kw - pad..iy * w + x1 + kw - pad];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for o in 0..co {
            let g_c = &g[o * h * w..(o + 1) * h * w];
            for c in 0..ci {
                let in_c = &x[c * h * w..(c + 1) * h * w];
                for kh in 0..k {
                    let (y0, y1) = tap_range(kh, pad, h);
                    for kw in 0..k {
                        let (x0, x1) = tap_range(kw, pad, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y + kh - pad;
                            let grow = &g_c[y * w + x0..y * w + x1];
                            let irow = &in_c[iy * w + x0 + kw - pad..iy * w + x1 + kw - pad];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                        }
                        dk[((o * ci + c) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
}

/// `[M,K] x [K,N] -> [M,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, kk, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, kk, n);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    if a.shape()[1] != b.shape()[0] {
        return Err(dim_err!(
            "matmul: inner dimensions differ ({:?} x {:?})",
            a.shape(),
            b.shape()
        ));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// `out += a · b`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ · b` for `a: [m,k]`, `b: [m,n]`, giving `[k,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| d[(idx % m) * n + idx / m]))
}

/// Numerically stable softmax of a 1-D tensor (max subtracted first).
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    expect_rank(v, 1, "softmax")?;
    non_finite_guard(v, "softmax")?;
    let mut out = v.data().to_vec();
    softmax_row(&mut out);
    Tensor::new(v.shape(), out)
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn non_finite_guard(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(())
}

/// Per-channel spatial mean of `[C,H,W]`.
pub fn global_avg_pool(f: &Tensor) -> Result<Tensor> {
    expect_rank(f, 3, "global_avg_pool")?;
    let c = f.shape()[0];
    let hw = f.shape()[1] * f.shape()[2];
    let d = f.data();
    Ok(Tensor::from_fn(&[c], |ch| {
        d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64
    }))
}

/// Concatenate `[C_p,H,W]` parts along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_channels: no parts".into()))?;
    expect_rank(first, 3, "concat_channels")?;
    let spatial = &first.shape()[1..];
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        expect_rank(p, 3, "concat_channels")?;
        if &p.shape()[1..] != spatial {
            return Err(dim_err!(
                "concat_channels: spatial dims {:?} vs {:?}",
                &p.shape()[1..],
                spatial
            ));
        }
        channels += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[channels, spatial[0], spatial[1]], data)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    expect_rank(t, 3, "split_channels")?;
    let total: usize = sizes.iter().sum();
    if total != t.shape()[0] {
        return Err(dim_err!(
            "split_channels: sizes {sizes:?} do not sum to {}",
            t.shape()[0]
        ));
    }
    let plane = t.shape()[1] * t.shape()[2];
    let mut start = 0;
    sizes
        .iter()
        .map(|&c| {
            let part = Tensor::new(
                &[c, t.shape()[1], t.shape()[2]],
                t.data()[start * plane..(start + c) * plane].to_vec(),
            );
            start += c;
            part
        })
        .collect()
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.len() as f64)
}

/// Mean of absolute elementwise differences.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "l1")?;
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}
