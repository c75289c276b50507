//! Raw f64 compute kernels shared by the tape's forward and backward passes.
//!
//! Everything here is plain slice arithmetic with no knowledge of the graph.

/// C[m,n] += A[m,k] @ B[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// out[cols, rows] = transpose of a[rows, cols]
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Left-pad `shape` with 1s to `ndim` entries.
pub fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Broadcast output shape for two operand shapes, unit-extent expansion only.
/// Returns `None` when the shapes do not conform.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let pa = pad_shape(a, ndim);
    let pb = pad_shape(b, ndim);
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        out[d] = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides, with stride 0 on broadcast (extent-1) dims relative to `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let padded = pad_shape(shape, ndim);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_apply(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        // fast path: no index arithmetic
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; ndim];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for d in (0..ndim).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by adding over
/// broadcast dimensions. Inverse of unit-extent broadcasting.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let st = broadcast_strides(target_shape, grad_shape);
    let ndim = grad_shape.len();
    let mut coords = vec![0usize; ndim];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * grad_shape[d];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderMode {
    Clamp,
    Zero,
}

/// Bilinear sample of `featmap` [C,H,W] at continuous pixel coords (u, v) = (col, row).
/// Returns per-channel values plus the d/du and d/dv of each channel value.
pub fn bilinear_at(
    featmap: &[f64],
    c: usize,
    h: usize,
    w: usize,
    u: f64,
    v: f64,
    border: BorderMode,
    out: &mut [f64],
    du: &mut [f64],
    dv: &mut [f64],
) {
    debug_assert_eq!(featmap.len(), c * h * w);
    let (uu, vv, live_u, live_v) = match border {
        BorderMode::Clamp => {
            let cu = u.clamp(0.0, (w - 1) as f64);
            let cv = v.clamp(0.0, (h - 1) as f64);
            (cu, cv, cu == u, cv == v)
        }
        BorderMode::Zero => (u, v, true, true),
    };
    let x0 = uu.floor();
    let y0 = vv.floor();
    let wx = uu - x0;
    let wy = vv - y0;
    let x0i = x0 as isize;
    let y0i = y0 as isize;
    let fetch = |ci: usize, yi: isize, xi: isize| -> f64 {
        match border {
            BorderMode::Clamp => {
                let yc = yi.clamp(0, h as isize - 1) as usize;
                let xc = xi.clamp(0, w as isize - 1) as usize;
                featmap[ci * h * w + yc * w + xc]
            }
            BorderMode::Zero => {
                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                    0.0
                } else {
                    featmap[ci * h * w + yi as usize * w + xi as usize]
                }
            }
        }
    };
    for ci in 0..c {
        let f00 = fetch(ci, y0i, x0i);
        let f01 = fetch(ci, y0i, x0i + 1);
        let f10 = fetch(ci, y0i + 1, x0i);
        let f11 = fetch(ci, y0i + 1, x0i + 1);
        out[ci] = f00 * (1.0 - wx) * (1.0 - wy) + f01 * wx * (1.0 - wy) + f10 * (1.0 - wx) * wy
            + f11 * wx * wy;
        du[ci] = if live_u {
            (f01 - f00) * (1.0 - wy) + (f11 - f10) * wy
        } else {
            0.0
        };
        dv[ci] = if live_v {
            (f10 - f00) * (1.0 - wx) + (f11 - f01) * wx
        } else {
            0.0
        };
    }
}

/// Scatter-add the bilinear corner weights of one sample into a featmap gradient.
pub fn bilinear_scatter(
    gfeat: &mut [f64],
    gout_row: &[f64],
    c: usize,
    h: usize,
    w: usize,
    u: f64,
    v: f64,
    border: BorderMode,
) {
    let (uu, vv) = match border {
        BorderMode::Clamp => (u.clamp(0.0, (w - 1) as f64), v.clamp(0.0, (h - 1) as f64)),
        BorderMode::Zero => (u, v),
    };
    let x0 = uu.floor();
    let y0 = vv.floor();
    let wx = uu - x0;
    let wy = vv - y0;
    let x0i = x0 as isize;
    let y0i = y0 as isize;
    let mut add = |ci: usize, yi: isize, xi: isize, wgt: f64| match border {
        BorderMode::Clamp => {
            let yc = yi.clamp(0, h as isize - 1) as usize;
            let xc = xi.clamp(0, w as isize - 1) as usize;
            gfeat[ci * h * w + yc * w + xc] += wgt;
        }
        BorderMode::Zero => {
            if !(yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize) {
                gfeat[ci * h * w + yi as usize * w + xi as usize] += wgt;
            }
        }
    };
    for ci in 0..c {
        let g = gout_row[ci];
        add(ci, y0i, x0i, g * (1.0 - wx) * (1.0 - wy));
        add(ci, y0i, x0i + 1, g * wx * (1.0 - wy));
        add(ci, y0i + 1, x0i, g * (1.0 - wx) * wy);
        add(ci, y0i + 1, x0i + 1, g * wx * wy);
    }
}

/// Direct 2D convolution. input [Cin,H,W], weight [Cout,Cin,KH,KW] -> [Cout,Hout,Wout].
pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * hout * wout];
    for oc in 0..cout {
        let out_map = &mut out[oc * hout * wout..(oc + 1) * hout * wout];
        for ic in 0..cin {
            let in_map = &input[ic * h * w..(ic + 1) * h * w];
            let w_base = ((oc * cin) + ic) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[w_base + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..hout {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_map[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_map[oy * wout..(oy + 1) * wout];
                        for ox in 0..wout {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[ox] += wv * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (out, hout, wout)
}

/// Gradients of conv2d w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    gout: &[f64],
    input: &[f64],
    weight: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ginput: &mut [f64],
    gweight: &mut [f64],
) {
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (w + 2 * pad - kw) / stride + 1;
    for oc in 0..cout {
        let g_map = &gout[oc * hout * wout..(oc + 1) * hout * wout];
        for ic in 0..cin {
            let in_map = &input[ic * h * w..(ic + 1) * h * w];
            let gi_map = &mut ginput[ic * h * w..(ic + 1) * h * w];
            let w_base = ((oc * cin) + ic) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[w_base + ky * kw + kx];
                    let mut gw = 0.0;
                    for oy in 0..hout {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_off = iy as usize * w;
                        let g_row = &g_map[oy * wout..(oy + 1) * wout];
                        for ox in 0..wout {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = g_row[ox];
                            gw += g * in_map[row_off + ix as usize];
                            gi_map[row_off + ix as usize] += g * wv;
                        }
                    }
                    gweight[w_base + ky * kw + kx] += gw;
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(matmul(&eye, &a, 3, 3, 3), a);
    }

    #[test]
    fn broadcast_bias_row() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![10.0, 20.0];
        let shape = broadcast_shape(&[2, 2], &[2]).unwrap();
        assert_eq!(shape, vec![2, 2]);
        let out = broadcast_apply(&a, &[2, 2], &b, &[2], &shape, |x, y| x + y);
        assert_eq!(out, vec![11.0, 22.0, 13.0, 24.0]);
        let red = reduce_to_shape(&[1.0, 1.0, 1.0, 1.0], &[2, 2], &[2]);
        assert_eq!(red, vec![2.0, 2.0]);
    }

    #[test]
    fn bilinear_integer_and_center() {
        // 1-channel 2x2 map
        let fm = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0];
        let mut du = [0.0];
        let mut dv = [0.0];
        bilinear_at(&fm, 1, 2, 2, 1.0, 0.0, BorderMode::Clamp, &mut out, &mut du, &mut dv);
        assert_eq!(out[0], 2.0);
        bilinear_at(&fm, 1, 2, 2, 0.5, 0.5, BorderMode::Clamp, &mut out, &mut du, &mut dv);
        assert_eq!(out[0], 2.5);
    }
}
