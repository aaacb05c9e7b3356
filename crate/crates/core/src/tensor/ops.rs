//! Differentiable operations over [`Tensor`].
//!
//! Elementwise binaries broadcast a 1-element tensor against any shape.
//! Matrix ops interpret shapes as `[rows, cols]`; convolution uses
//! `[channels, height, width]` inputs and `[out, in, kh, kw]` kernels.
//! Shape violations are programming errors and panic.

use super::Tensor;
use crate::error::{CoreError, Result};

fn ew_binary(
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(f64, f64) -> f64,
    da: impl Fn(f64, f64) -> f64 + 'static,
    db: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let (an, bn) = (a.numel(), b.numel());
    assert!(
        a.shape() == b.shape() || an == 1 || bn == 1,
        "elementwise op needs equal shapes or a scalar side: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let n = an.max(bn);
    let shape = if an >= bn { a.shape().to_vec() } else { b.shape().to_vec() };
    let av = a.values();
    let bv = b.values();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = av[if an == 1 { 0 } else { i }];
        let y = bv[if bn == 1 { 0 } else { i }];
        out.push(fwd(x, y));
    }
    drop(av);
    drop(bv);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(&shape, out, &[a, b], move |g, _| {
        let av = ac.values();
        let bv = bc.values();
        if ac.requires_grad() {
            ac.accum_grad(|ga| {
                if an == 1 {
                    let x = av[0];
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += g[i] * da(x, bv[if bn == 1 { 0 } else { i }]);
                    }
                    ga[0] += acc;
                } else {
                    for i in 0..n {
                        ga[i] += g[i] * da(av[i], bv[if bn == 1 { 0 } else { i }]);
                    }
                }
            });
        }
        if bc.requires_grad() {
            bc.accum_grad(|gb| {
                if bn == 1 {
                    let y = bv[0];
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += g[i] * db(av[if an == 1 { 0 } else { i }], y);
                    }
                    gb[0] += acc;
                } else {
                    for i in 0..n {
                        gb[i] += g[i] * db(av[if an == 1 { 0 } else { i }], bv[i]);
                    }
                }
            });
        }
    })
}

fn ew_unary(
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    // derivative as a function of (input, output)
    dx: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let out: Vec<f64> = x.values().iter().map(|&v| fwd(v)).collect();
    let xc = x.clone();
    Tensor::from_op(x.shape(), out, &[x], move |g, outv| {
        let xv = xc.values();
        xc.accum_grad(|gx| {
            for i in 0..g.len() {
                gx[i] += g[i] * dx(xv[i], outv[i]);
            }
        });
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    ew_binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    ew_binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    ew_binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    ew_binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
}

/// Elementwise max; ties route the gradient to `a`.
pub fn maximum(a: &Tensor, b: &Tensor) -> Tensor {
    ew_binary(
        a,
        b,
        |x, y| x.max(y),
        |x, y| if x >= y { 1.0 } else { 0.0 },
        |x, y| if x >= y { 0.0 } else { 1.0 },
    )
}

/// Elementwise min; ties route the gradient to `a`.
pub fn minimum(a: &Tensor, b: &Tensor) -> Tensor {
    ew_binary(
        a,
        b,
        |x, y| x.min(y),
        |x, y| if x <= y { 1.0 } else { 0.0 },
        |x, y| if x <= y { 0.0 } else { 1.0 },
    )
}

pub fn neg(x: &Tensor) -> Tensor {
    mul_scalar(x, -1.0)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    ew_unary(x, |v| v + c, |_, _| 1.0)
}

pub fn mul_scalar(x: &Tensor, c: f64) -> Tensor {
    ew_unary(x, move |v| v * c, move |_, _| c)
}

pub fn exp(x: &Tensor) -> Tensor {
    ew_unary(x, f64::exp, |_, y| y)
}

/// Square root with subgradient 0 at the origin so a downstream clamp can
/// guard zero rows without producing NaN.
pub fn sqrt(x: &Tensor) -> Tensor {
    ew_unary(x, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
}

pub fn clamp_min(x: &Tensor, c: f64) -> Tensor {
    ew_unary(x, move |v| v.max(c), move |v, _| if v > c { 1.0 } else { 0.0 })
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    ew_unary(x, sigmoid_scalar, |_, y| y * (1.0 - y))
}

pub fn silu(x: &Tensor) -> Tensor {
    ew_unary(
        x,
        |v| v * sigmoid_scalar(v),
        |v, _| {
            let s = sigmoid_scalar(v);
            s * (1.0 + v * (1.0 - s))
        },
    )
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus(x: &Tensor) -> Tensor {
    ew_unary(x, softplus_scalar, |v, _| sigmoid_scalar(v))
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.values().iter().sum();
    let xc = x.clone();
    Tensor::from_op(&[1], vec![s], &[x], move |g, _| {
        let g0 = g[0];
        xc.accum_grad(|gx| gx.iter_mut().for_each(|v| *v += g0));
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    mul_scalar(&sum_all(x), 1.0 / n)
}

/// Row sums of an `[r, c]` matrix, producing `[r]`.
pub fn row_sums(x: &Tensor) -> Tensor {
    let [r, c] = dims2(x);
    let xv = x.values();
    let out: Vec<f64> = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
    drop(xv);
    let xc = x.clone();
    Tensor::from_op(&[r], out, &[x], move |g, _| {
        xc.accum_grad(|gx| {
            for i in 0..r {
                let gi = g[i];
                for v in &mut gx[i * c..(i + 1) * c] {
                    *v += gi;
                }
            }
        });
    })
}

/// `x[r,c] + b[c]` broadcast over rows.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let [r, c] = dims2(x);
    assert_eq!(b.numel(), c, "bias length must match columns");
    let xv = x.values();
    let bv = b.values();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(xv[i * c + j] + bv[j]);
        }
    }
    drop(xv);
    drop(bv);
    let (xc, bc) = (x.clone(), b.clone());
    Tensor::from_op(&[r, c], out, &[x, b], move |g, _| {
        xc.accum_grad(|gx| {
            for (gv, gi) in gx.iter_mut().zip(g.iter()) {
                *gv += gi;
            }
        });
        bc.accum_grad(|gb| {
            for i in 0..r {
                for j in 0..c {
                    gb[j] += g[i * c + j];
                }
            }
        });
    })
}

/// `x[r,c] - m[r]` broadcast over columns.
pub fn sub_col(x: &Tensor, m: &Tensor) -> Tensor {
    let [r, c] = dims2(x);
    assert_eq!(m.numel(), r, "column vector length must match rows");
    let xv = x.values();
    let mv = m.values();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(xv[i * c + j] - mv[i]);
        }
    }
    drop(xv);
    drop(mv);
    let (xc, mc) = (x.clone(), m.clone());
    Tensor::from_op(&[r, c], out, &[x, m], move |g, _| {
        xc.accum_grad(|gx| {
            for (gv, gi) in gx.iter_mut().zip(g.iter()) {
                *gv += gi;
            }
        });
        mc.accum_grad(|gm| {
            for i in 0..r {
                let s: f64 = g[i * c..(i + 1) * c].iter().sum();
                gm[i] -= s;
            }
        });
    })
}

/// `x[r,c] / d[r]` broadcast over columns.
pub fn div_col(x: &Tensor, d: &Tensor) -> Tensor {
    let [r, c] = dims2(x);
    assert_eq!(d.numel(), r, "column vector length must match rows");
    let xv = x.values();
    let dv = d.values();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(xv[i * c + j] / dv[i]);
        }
    }
    drop(xv);
    drop(dv);
    let (xc, dc) = (x.clone(), d.clone());
    Tensor::from_op(&[r, c], out, &[x, d], move |g, _| {
        let dv = dc.values();
        if xc.requires_grad() {
            xc.accum_grad(|gx| {
                for i in 0..r {
                    let inv = 1.0 / dv[i];
                    for j in 0..c {
                        gx[i * c + j] += g[i * c + j] * inv;
                    }
                }
            });
        }
        if dc.requires_grad() {
            let xv = xc.values();
            dc.accum_grad(|gd| {
                for i in 0..r {
                    let inv2 = 1.0 / (dv[i] * dv[i]);
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += g[i * c + j] * xv[i * c + j];
                    }
                    gd[i] -= acc * inv2;
                }
            });
        }
    })
}

/// Standard matrix product `a[m,k] * b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let [m, k] = dims2(a);
    let [k2, n] = dims2(b);
    assert_eq!(k, k2, "inner dimensions must agree");
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &av[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &bv[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += aik * b_row[j];
            }
        }
    }
    drop(av);
    drop(bv);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(&[m, n], out, &[a, b], move |g, _| {
        if ac.requires_grad() {
            let bv = bc.values();
            ac.accum_grad(|ga| {
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let b_row = &bv[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g_row[j] * b_row[j];
                        }
                        ga[i * k + kk] += acc;
                    }
                }
            });
        }
        if bc.requires_grad() {
            let av = ac.values();
            bc.accum_grad(|gb| {
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    let a_row = &av[i * k..(i + 1) * k];
                    for (kk, &aik) in a_row.iter().enumerate() {
                        let gb_row = &mut gb[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            gb_row[j] += aik * g_row[j];
                        }
                    }
                }
            });
        }
    })
}

/// `a[m,k] * b[n,k]^T`, i.e. pairwise dot products of rows.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let [m, k] = dims2(a);
    let [n, k2] = dims2(b);
    assert_eq!(k, k2, "row widths must agree");
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &av[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &bv[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            out[i * n + j] = acc;
        }
    }
    drop(av);
    drop(bv);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(&[m, n], out, &[a, b], move |g, _| {
        if ac.requires_grad() {
            let bv = bc.values();
            ac.accum_grad(|ga| {
                for i in 0..m {
                    let ga_row = &mut ga[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let b_row = &bv[j * k..(j + 1) * k];
                        for kk in 0..k {
                            ga_row[kk] += gij * b_row[kk];
                        }
                    }
                }
            });
        }
        if bc.requires_grad() {
            let av = ac.values();
            bc.accum_grad(|gb| {
                for i in 0..m {
                    let a_row = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let gb_row = &mut gb[j * k..(j + 1) * k];
                        for kk in 0..k {
                            gb_row[kk] += gij * a_row[kk];
                        }
                    }
                }
            });
        }
    })
}

/// Direct 2-D convolution of `x[ci,h,w]` with `w[co,ci,kh,kw]` plus bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.shape().len(), 3, "conv input must be [c,h,w]");
    assert_eq!(w.shape().len(), 4, "conv kernel must be [co,ci,kh,kw]");
    let (ci, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, wci, "kernel input channels must match input");
    assert_eq!(b.numel(), co, "bias must have one entry per output channel");
    assert!(h + 2 * pad >= kh && iw + 2 * pad >= kw);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;

    // Valid output-column range for a given kernel column.
    let ox_range = |kx: usize| -> (usize, usize) {
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
        let hi_num = iw + pad;
        if hi_num <= kx {
            return (0, 0);
        }
        let hi = ((hi_num - kx - 1) / stride + 1).min(ow);
        (lo.min(hi), hi)
    };

    let xv = x.values();
    let wv = w.values();
    let bv = b.values();
    let mut out = vec![0.0; co * oh * ow];
    for c_out in 0..co {
        let plane = &mut out[c_out * oh * ow..(c_out + 1) * oh * ow];
        plane.fill(bv[c_out]);
        for c_in in 0..ci {
            let x_plane = &xv[c_in * h * iw..(c_in + 1) * h * iw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = wv[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    let (lo, hi) = ox_range(kx);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * iw..(iy as usize + 1) * iw];
                        let o_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            let ix = ox * stride + kx - pad;
                            o_row[ox] += wgt * x_row[ix];
                        }
                    }
                }
            }
        }
    }
    drop(xv);
    drop(wv);
    drop(bv);

    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(&[co, oh, ow], out, &[x, w, b], move |g, _| {
        bc.accum_grad(|gb| {
            for c_out in 0..co {
                gb[c_out] += g[c_out * oh * ow..(c_out + 1) * oh * ow].iter().sum::<f64>();
            }
        });
        let need_gx = xc.requires_grad();
        let need_gw = wc.requires_grad();
        if !need_gx && !need_gw {
            return;
        }
        let xv = xc.values();
        let wv = wc.values();
        let mut gx = if need_gx { vec![0.0; ci * h * iw] } else { Vec::new() };
        let mut gw = if need_gw { vec![0.0; co * ci * kh * kw] } else { Vec::new() };
        for c_out in 0..co {
            let g_plane = &g[c_out * oh * ow..(c_out + 1) * oh * ow];
            for c_in in 0..ci {
                let x_plane = &xv[c_in * h * iw..(c_in + 1) * h * iw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                        let wgt = wv[widx];
                        let (lo, hi) = ox_range(kx);
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_off = iy as usize * iw;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            if need_gw {
                                let x_row = &x_plane[row_off..row_off + iw];
                                for ox in lo..hi {
                                    wacc += g_row[ox] * x_row[ox * stride + kx - pad];
                                }
                            }
                            if need_gx {
                                let gx_row =
                                    &mut gx[c_in * h * iw + row_off..c_in * h * iw + row_off + iw];
                                for ox in lo..hi {
                                    gx_row[ox * stride + kx - pad] += g_row[ox] * wgt;
                                }
                            }
                        }
                        if need_gw {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
        drop(xv);
        drop(wv);
        if need_gx {
            xc.accum_grad(|dst| {
                for (d, s) in dst.iter_mut().zip(gx.iter()) {
                    *d += s;
                }
            });
        }
        if need_gw {
            wc.accum_grad(|dst| {
                for (d, s) in dst.iter_mut().zip(gw.iter()) {
                    *d += s;
                }
            });
        }
    })
}

/// Reinterpret `[c,h,w]` feature maps as `[h*w, c]` cell rows.
pub fn chw_to_cells(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 3, "expected [c,h,w]");
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cells = h * w;
    let xv = x.values();
    let mut out = vec![0.0; cells * c];
    for ch in 0..c {
        for cell in 0..cells {
            out[cell * c + ch] = xv[ch * cells + cell];
        }
    }
    drop(xv);
    let xc = x.clone();
    Tensor::from_op(&[cells, c], out, &[x], move |g, _| {
        xc.accum_grad(|gx| {
            for ch in 0..c {
                for cell in 0..cells {
                    gx[ch * cells + cell] += g[cell * c + ch];
                }
            }
        });
    })
}

/// Row gather: `out[i,:] = x[idx[i],:]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let [r, c] = dims2(x);
    for &i in idx {
        assert!(i < r, "gather index {i} out of range {r}");
    }
    let xv = x.values();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&xv[i * c..(i + 1) * c]);
    }
    drop(xv);
    let xc = x.clone();
    let idx: Vec<usize> = idx.to_vec();
    Tensor::from_op(&[idx.len(), c], out, &[x], move |g, _| {
        xc.accum_grad(|gx| {
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[i * c + j] += g[k * c + j];
                }
            }
        });
    })
}

/// Vertical concatenation of matrices with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let c = dims2(parts[0])[1];
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let [r, pc] = dims2(p);
        assert_eq!(pc, c, "column counts must agree");
        rows += r;
        out.extend_from_slice(&p.values());
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Tensor::from_op(&[rows, c], out, parts, move |g, _| {
        let mut off = 0;
        for p in &owned {
            let n = p.numel();
            p.accum_grad(|gp| {
                for (d, s) in gp.iter_mut().zip(&g[off..off + n]) {
                    *d += s;
                }
            });
            off += n;
        }
    })
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let r = dims2(parts[0])[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let [pr, pc] = dims2(p);
            assert_eq!(pr, r, "row counts must agree");
            pc
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; r * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pv = p.values();
        for i in 0..r {
            out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Tensor::from_op(&[r, total], out, parts, move |g, _| {
        let mut off = 0;
        for (p, &w) in owned.iter().zip(&widths) {
            p.accum_grad(|gp| {
                for i in 0..r {
                    for j in 0..w {
                        gp[i * w + j] += g[i * total + off + j];
                    }
                }
            });
            off += w;
        }
    })
}

/// Column slice `x[:, start..start+len]`.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let [r, c] = dims2(x);
    assert!(start + len <= c, "column slice out of range");
    let xv = x.values();
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
    }
    drop(xv);
    let xc = x.clone();
    Tensor::from_op(&[r, len], out, &[x], move |g, _| {
        xc.accum_grad(|gx| {
            for i in 0..r {
                for j in 0..len {
                    gx[i * c + start + j] += g[i * len + j];
                }
            }
        });
    })
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(shape.iter().product::<usize>(), x.numel());
    let out = x.to_vec();
    let xc = x.clone();
    Tensor::from_op(shape, out, &[x], move |g, _| {
        xc.accum_grad(|gx| {
            for (d, s) in gx.iter_mut().zip(g.iter()) {
                *d += s;
            }
        });
    })
}

/// Numerically stable softmax over each row of `[r, c]`.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let [r, c] = dims2(x);
    assert!(c > 0);
    let xv = x.values();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &xv[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        for j in 0..c {
            out[i * c + j] /= s;
        }
    }
    drop(xv);
    let xc = x.clone();
    Tensor::from_op(&[r, c], out, &[x], move |g, outv| {
        xc.accum_grad(|gx| {
            for i in 0..r {
                let y = &outv[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] += y[j] * (gr[j] - dot);
                }
            }
        });
    })
}

/// Smooth L1 distance applied elementwise between two same-shape tensors.
pub fn smooth_l1_t(a: &Tensor, b: &Tensor, delta: f64) -> Tensor {
    assert!(delta > 0.0, "delta must be positive");
    ew_binary(
        a,
        b,
        move |x, y| smooth_l1(x, y, delta),
        move |x, y| {
            let d = x - y;
            if d.abs() < delta {
                d / delta
            } else {
                d.signum()
            }
        },
        move |x, y| {
            let d = x - y;
            if d.abs() < delta {
                -d / delta
            } else {
                -d.signum()
            }
        },
    )
}

/// Smooth L1 (Huber-style) scalar loss:
/// `0.5(a-b)^2/delta` inside the `delta` band, `|a-b| - 0.5 delta` outside.
pub fn smooth_l1(a: f64, b: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "delta must be positive");
    let d = (a - b).abs();
    if d < delta {
        0.5 * d * d / delta
    } else {
        d - 0.5 * delta
    }
}

/// Elementwise binary cross-entropy on logits against constant targets,
/// in the stable `max(l,0) - l*y + ln(1+exp(-|l|))` form.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64]) -> Tensor {
    assert_eq!(logits.numel(), targets.len());
    let lv = logits.values();
    let out: Vec<f64> = lv
        .iter()
        .zip(targets.iter())
        .map(|(&l, &y)| l.max(0.0) - l * y + (-l.abs()).exp().ln_1p())
        .collect();
    drop(lv);
    let lc = logits.clone();
    let targets: Vec<f64> = targets.to_vec();
    Tensor::from_op(logits.shape(), out, &[logits], move |g, _| {
        let lv = lc.values();
        lc.accum_grad(|gl| {
            for i in 0..g.len() {
                gl[i] += g[i] * (sigmoid_scalar(lv[i]) - targets[i]);
            }
        });
    })
}

/// Row-wise L2 normalization with an epsilon guard: rows with norm below
/// `eps` are scaled by `1/eps` instead of their own norm.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    assert!(eps > 0.0, "eps must be positive");
    if !x.is_finite() {
        return Err(CoreError::NonFinite {
            context: "l2_normalize_rows input".into(),
        });
    }
    let sq = mul(x, x);
    let norms = sqrt(&row_sums(&sq));
    let denom = clamp_min(&norms, eps);
    Ok(div_col(x, &denom))
}

fn dims2(x: &Tensor) -> [usize; 2] {
    assert_eq!(x.shape().len(), 2, "expected a matrix, got {:?}", x.shape());
    [x.shape()[0], x.shape()[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, "ops-test", &[]);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn l2_normalize_examples() {
        let m = Tensor::new(&[1, 2], vec![3.0, 4.0]);
        let out = l2_normalize_rows(&m, 1e-12).unwrap();
        let v = out.to_vec();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);

        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(l2_normalize_rows(&eye, 1e-12).unwrap().to_vec(), vec![1.0, 0.0, 0.0, 1.0]);

        let zero = Tensor::new(&[1, 2], vec![0.0, 0.0]);
        assert_eq!(l2_normalize_rows(&zero, 1e-12).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_non_finite() {
        let m = Tensor::new(&[1, 2], vec![f64::NAN, 1.0]);
        assert!(l2_normalize_rows(&m, 1e-12).is_err());
    }

    #[test]
    fn l2_normalize_unit_norm_rows() {
        let m = rand_tensor(&[5, 7], 3);
        let out = l2_normalize_rows(&m, 1e-12).unwrap();
        let v = out.to_vec();
        for i in 0..5 {
            let n: f64 = v[i * 7..(i + 1) * 7].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn smooth_l1_branches() {
        assert!((smooth_l1(0.5, 0.0, 1.0) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(2.0, 0.0, 1.0) - 1.5).abs() < 1e-15);
        assert_eq!(smooth_l1(3.25, 3.25, 1.0), 0.0);
        // continuity at the knee
        let just_in = smooth_l1(1.0 - 1e-9, 0.0, 1.0);
        let just_out = smooth_l1(1.0 + 1e-9, 0.0, 1.0);
        assert!((just_in - 0.5).abs() < 1e-8 && (just_out - 0.5).abs() < 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rand_tensor(&[4, 9], 11);
        let y = softmax_rows(&x);
        let v = y.to_vec();
        for i in 0..4 {
            let s: f64 = v[i * 9..(i + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_checks_elementwise_and_reductions() {
        let x = rand_tensor(&[6], 21);
        for (name, f) in [
            ("mul", (|t: &Tensor| Ok(sum_all(&mul(t, t)))) as fn(&Tensor) -> crate::error::Result<Tensor>),
            ("silu", |t| Ok(sum_all(&silu(t)))),
            ("sigmoid", |t| Ok(sum_all(&sigmoid(t)))),
            ("softplus", |t| Ok(sum_all(&softplus(t)))),
            ("exp", |t| Ok(sum_all(&exp(t)))),
            ("mean", |t| Ok(mean_all(&mul(t, t)))),
        ] {
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} grad error {err}");
        }
    }

    #[test]
    fn grad_checks_matrix_ops() {
        let x = rand_tensor(&[3, 4], 31);
        let w = rand_tensor(&[5, 4], 32);
        let err = grad_check(
            |t| Ok(sum_all(&mul(&matmul_nt(t, &w), &matmul_nt(t, &w)))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul_nt grad error {err}");

        let b = rand_tensor(&[4, 2], 33);
        let err = grad_check(|t| Ok(sum_all(&mul(&matmul(t, &b), &matmul(t, &b)))), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "matmul grad error {err}");

        // weight-side gradient
        let werr = grad_check(
            |t| Ok(sum_all(&mul(&matmul_nt(&x, t), &matmul_nt(&x, t)))),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(werr < 1e-6, "matmul_nt weight grad error {werr}");
    }

    #[test]
    fn grad_checks_structural_ops() {
        let x = rand_tensor(&[4, 3], 41);
        let err = grad_check(
            |t| {
                let g = gather_rows(t, &[0, 2, 2]);
                let s = slice_cols(&g, 1, 2);
                Ok(sum_all(&mul(&s, &s)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gather/slice grad error {err}");

        let err = grad_check(
            |t| {
                let c = concat_rows(&[t, t]);
                let d = concat_cols(&[&c, &c]);
                Ok(mean_all(&mul(&d, &d)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "concat grad error {err}");

        let x3 = rand_tensor(&[2, 3, 4], 42);
        let err = grad_check(
            |t| {
                let cells = chw_to_cells(t);
                Ok(sum_all(&mul(&cells, &cells)))
            },
            &x3,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "chw_to_cells grad error {err}");
    }

    #[test]
    fn grad_checks_broadcast_ops() {
        let x = rand_tensor(&[3, 5], 51);
        let b = rand_tensor(&[5], 52);
        let m = rand_tensor(&[3], 53);
        let err = grad_check(
            |t| {
                let y = add_bias(t, &b);
                let z = sub_col(&y, &m);
                let d = clamp_min(&sqrt(&clamp_min(&row_sums(&mul(&z, &z)), 1e-9)), 1e-6);
                Ok(sum_all(&div_col(&z, &d)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "broadcast chain grad error {err}");

        let berr = grad_check(|t| Ok(sum_all(&mul(&add_bias(&x, t), &add_bias(&x, t)))), &b, 1e-5).unwrap();
        assert!(berr < 1e-6, "bias grad error {berr}");
    }

    #[test]
    fn grad_checks_softmax_and_losses() {
        let x = rand_tensor(&[3, 6], 61);
        let err = grad_check(
            |t| {
                let p = softmax_rows(t);
                Ok(sum_all(&mul(&p, &p)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax grad error {err}");

        let targets = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let l = rand_tensor(&[6], 62);
        let err = grad_check(|t| Ok(mean_all(&bce_with_logits(t, &targets))), &l, 1e-5).unwrap();
        assert!(err < 1e-6, "bce grad error {err}");

        let a = rand_tensor(&[6], 63);
        let err = grad_check(|t| Ok(sum_all(&smooth_l1_t(t, &a, 0.7))), &l, 1e-5).unwrap();
        assert!(err < 1e-6, "smooth l1 grad error {err}");
    }

    #[test]
    fn grad_checks_l2_normalize() {
        let x = rand_tensor(&[4, 5], 71);
        let w = rand_tensor(&[4, 5], 72);
        let err = grad_check(
            |t| {
                let n = l2_normalize_rows(t, 1e-12)?;
                Ok(sum_all(&mul(&n, &w)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "l2_normalize grad error {err}");
    }

    #[test]
    fn grad_checks_conv2d() {
        let x = rand_tensor(&[2, 6, 6], 81);
        let w = rand_tensor(&[3, 2, 3, 3], 82);
        let b = rand_tensor(&[3], 83);
        for stride in [1, 2] {
            let err = grad_check(
                |t| {
                    let y = conv2d(t, &w, &b, stride, 1);
                    Ok(sum_all(&mul(&y, &y)))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "conv input grad error {err} at stride {stride}");

            let err = grad_check(
                |t| {
                    let y = conv2d(&x, t, &b, stride, 1);
                    Ok(sum_all(&mul(&y, &y)))
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "conv weight grad error {err} at stride {stride}");

            let err = grad_check(
                |t| {
                    let y = conv2d(&x, &w, t, stride, 1);
                    Ok(sum_all(&mul(&y, &y)))
                },
                &b,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "conv bias grad error {err} at stride {stride}");
        }
    }

    #[test]
    fn conv2d_shape_stride2_pad1() {
        let x = Tensor::new(&[1, 64, 64], vec![0.5; 64 * 64]);
        let w = Tensor::new(&[4, 1, 3, 3], vec![0.1; 36]);
        let b = Tensor::zeros(&[4]);
        let y = conv2d(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[4, 32, 32]);
        assert!(y.is_finite());
    }

    #[test]
    fn min_max_tie_and_clamp_subgradients() {
        // maximum ties route to the first argument
        let a = Tensor::param(&[2], vec![1.0, 2.0]);
        let b = Tensor::param(&[2], vec![1.0, 5.0]);
        let y = sum_all(&maximum(&a, &b));
        y.backward();
        assert_eq!(a.grad().unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0, 1.0]);

        let x = Tensor::param(&[3], vec![-1.0, 0.0, 1.0]);
        let y = sum_all(&clamp_min(&x, 0.0));
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn forward_determinism() {
        let x = rand_tensor(&[2, 8, 8], 91);
        let w = rand_tensor(&[3, 2, 3, 3], 92);
        let b = rand_tensor(&[3], 93);
        let y1 = conv2d(&x, &w, &b, 2, 1).to_vec();
        let y2 = conv2d(&x, &w, &b, 2, 1).to_vec();
        let bits1: Vec<u64> = y1.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = y2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }
}
