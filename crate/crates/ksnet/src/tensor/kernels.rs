//! Forward/backward kernel pairs behind the tape.
//!
//! Accumulation order is fixed for every output element (channel-major,
//! then row, then column over the contributing taps) so repeated runs are
//! bit-identical. Loops are arranged so the innermost dimension walks
//! contiguous memory of the output wherever possible.

use super::{Scalar, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Strided convolution with kernel size equal to stride (patch embedding).
/// x: (B, C, H, W), w: (D, C, P, P), b: (D) -> (B, D, H/P, W/P)
pub fn patch_conv_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (bs, c_in, h, wd) = dims4(x);
    let (d_out, _, p, _) = dims4(w);
    let (ho, wo) = (h / p, wd / p);
    let xs = x.as_slice();
    let ws = w.as_slice();
    let mut out = Tensor::zeros(&[bs, d_out, ho, wo]);
    let os = out.as_mut_slice();
    for n in 0..bs {
        for d in 0..d_out {
            let plane = &mut os[(n * d_out + d) * ho * wo..(n * d_out + d + 1) * ho * wo];
            plane.fill(b.as_slice()[d]);
            for c in 0..c_in {
                let xplane = &xs[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
                for pp in 0..p {
                    for q in 0..p {
                        let wv = ws[((d * c_in + c) * p + pp) * p + q];
                        for i in 0..ho {
                            let xrow = &xplane[(i * p + pp) * wd..(i * p + pp + 1) * wd];
                            let orow = &mut plane[i * wo..(i + 1) * wo];
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * xrow[j * p + q];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn patch_conv_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    needs: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bs, c_in, h, wd) = dims4(x);
    let (d_out, _, p, _) = dims4(w);
    let (ho, wo) = (h / p, wd / p);
    let dys = dy.as_slice();
    let ws = w.as_slice();
    let xs = x.as_slice();

    let dx = needs.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.as_mut_slice();
        for n in 0..bs {
            for d in 0..d_out {
                let dplane = &dys[(n * d_out + d) * ho * wo..(n * d_out + d + 1) * ho * wo];
                for c in 0..c_in {
                    let xoff = (n * c_in + c) * h * wd;
                    for pp in 0..p {
                        for q in 0..p {
                            let wv = ws[((d * c_in + c) * p + pp) * p + q];
                            for i in 0..ho {
                                let drow = &dplane[i * wo..(i + 1) * wo];
                                let xrow = &mut dxs[xoff + (i * p + pp) * wd..xoff + (i * p + pp + 1) * wd];
                                for (j, &g) in drow.iter().enumerate() {
                                    xrow[j * p + q] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    let dw = needs.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        let dws = dw.as_mut_slice();
        for d in 0..d_out {
            for c in 0..c_in {
                for pp in 0..p {
                    for q in 0..p {
                        let mut acc = F::ZERO;
                        for n in 0..bs {
                            let dplane = &dys[(n * d_out + d) * ho * wo..(n * d_out + d + 1) * ho * wo];
                            let xoff = (n * c_in + c) * h * wd;
                            for i in 0..ho {
                                let drow = &dplane[i * wo..(i + 1) * wo];
                                let xrow = &xs[xoff + (i * p + pp) * wd..xoff + (i * p + pp + 1) * wd];
                                for (j, &g) in drow.iter().enumerate() {
                                    acc += g * xrow[j * p + q];
                                }
                            }
                        }
                        dws[((d * c_in + c) * p + pp) * p + q] = acc;
                    }
                }
            }
        }
        dw
    });

    let db = needs.2.then(|| channel_sum(dy, d_out));
    (dx, dw, db)
}

/// Depthwise convolution with same padding.
/// x: (B, C, H, W), w: (C, K, K), b: (C) -> (B, C, H, W)
pub fn depthwise_conv_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (bs, c_in, h, wd) = dims4(x);
    let k = w.shape()[1];
    let pb = (k - 1) / 2;
    let xs = x.as_slice();
    let ws = w.as_slice();
    let mut out = Tensor::zeros(x.shape());
    let os = out.as_mut_slice();
    for n in 0..bs {
        for c in 0..c_in {
            let xplane = &xs[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
            let oplane = &mut os[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
            oplane.fill(b.as_slice()[c]);
            for p in 0..k {
                for q in 0..k {
                    let wv = ws[(c * k + p) * k + q];
                    // out[i][j] += wv * x[i + p - pb][j + q - pb]
                    let (i_lo, i_hi) = tap_range(h, p, pb);
                    let (j_lo, j_hi) = tap_range(wd, q, pb);
                    for i in i_lo..i_hi {
                        let si = i + p - pb;
                        let xrow = &xplane[si * wd..(si + 1) * wd];
                        let orow = &mut oplane[i * wd..(i + 1) * wd];
                        for j in j_lo..j_hi {
                            orow[j] += wv * xrow[j + q - pb];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn depthwise_conv_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    needs: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bs, c_in, h, wd) = dims4(x);
    let k = w.shape()[1];
    let pb = (k - 1) / 2;
    let dys = dy.as_slice();
    let ws = w.as_slice();
    let xs = x.as_slice();

    let dx = needs.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.as_mut_slice();
        for n in 0..bs {
            for c in 0..c_in {
                let dplane = &dys[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
                let xplane = &mut dxs[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
                for p in 0..k {
                    for q in 0..k {
                        let wv = ws[(c * k + p) * k + q];
                        let (i_lo, i_hi) = tap_range(h, p, pb);
                        let (j_lo, j_hi) = tap_range(wd, q, pb);
                        for i in i_lo..i_hi {
                            let si = i + p - pb;
                            let drow = &dplane[i * wd..(i + 1) * wd];
                            let xrow = &mut xplane[si * wd..(si + 1) * wd];
                            for j in j_lo..j_hi {
                                xrow[j + q - pb] += wv * drow[j];
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    let dw = needs.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        let dws = dw.as_mut_slice();
        for c in 0..c_in {
            for p in 0..k {
                for q in 0..k {
                    let mut acc = F::ZERO;
                    let (i_lo, i_hi) = tap_range(h, p, pb);
                    let (j_lo, j_hi) = tap_range(wd, q, pb);
                    for n in 0..bs {
                        let dplane = &dys[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
                        let xplane = &xs[(n * c_in + c) * h * wd..(n * c_in + c + 1) * h * wd];
                        for i in i_lo..i_hi {
                            let si = i + p - pb;
                            let drow = &dplane[i * wd..(i + 1) * wd];
                            let xrow = &xplane[si * wd..(si + 1) * wd];
                            for j in j_lo..j_hi {
                                acc += drow[j] * xrow[j + q - pb];
                            }
                        }
                    }
                    dws[(c * k + p) * k + q] = acc;
                }
            }
        }
        dw
    });

    let db = needs.2.then(|| channel_sum(dy, c_in));
    (dx, dw, db)
}

/// 1x1 convolution. x: (B, C, H, W), w: (D, C), b: (D) -> (B, D, H, W)
pub fn pointwise_conv_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (bs, c_in, h, wd) = dims4(x);
    let d_out = w.shape()[0];
    let hw = h * wd;
    let xs = x.as_slice();
    let ws = w.as_slice();
    let mut out = Tensor::zeros(&[bs, d_out, h, wd]);
    let os = out.as_mut_slice();
    for n in 0..bs {
        for d in 0..d_out {
            let plane = &mut os[(n * d_out + d) * hw..(n * d_out + d + 1) * hw];
            plane.fill(b.as_slice()[d]);
            for c in 0..c_in {
                let wv = ws[d * c_in + c];
                let xplane = &xs[(n * c_in + c) * hw..(n * c_in + c + 1) * hw];
                for (o, &xv) in plane.iter_mut().zip(xplane) {
                    *o += wv * xv;
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn pointwise_conv_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    needs: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bs, c_in, h, wd) = dims4(x);
    let d_out = w.shape()[0];
    let hw = h * wd;
    let dys = dy.as_slice();
    let ws = w.as_slice();
    let xs = x.as_slice();

    let dx = needs.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.as_mut_slice();
        for n in 0..bs {
            for c in 0..c_in {
                let xplane = &mut dxs[(n * c_in + c) * hw..(n * c_in + c + 1) * hw];
                for d in 0..d_out {
                    let wv = ws[d * c_in + c];
                    let dplane = &dys[(n * d_out + d) * hw..(n * d_out + d + 1) * hw];
                    for (o, &g) in xplane.iter_mut().zip(dplane) {
                        *o += wv * g;
                    }
                }
            }
        }
        dx
    });

    let dw = needs.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        let dws = dw.as_mut_slice();
        for d in 0..d_out {
            for c in 0..c_in {
                let mut acc = F::ZERO;
                for n in 0..bs {
                    let dplane = &dys[(n * d_out + d) * hw..(n * d_out + d + 1) * hw];
                    let xplane = &xs[(n * c_in + c) * hw..(n * c_in + c + 1) * hw];
                    for (&g, &xv) in dplane.iter().zip(xplane) {
                        acc += g * xv;
                    }
                }
                dws[d * c_in + c] = acc;
            }
        }
        dw
    });

    let db = needs.2.then(|| channel_sum(dy, d_out));
    (dx, dw, db)
}

/// GELU with the exact Gaussian CDF: `x * Phi(x)`. Evaluated in f64 for
/// both element types so the two precisions sit on the same curve.
pub fn gelu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| {
        let xf = v.to_f64();
        F::from_f64(xf * 0.5 * (1.0 + libm::erf(xf * INV_SQRT_2)))
    })
}

pub fn gelu_backward<F: Scalar>(dy: &Tensor<F>, x: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x.shape());
    for ((o, &g), &xv) in dx
        .as_mut_slice()
        .iter_mut()
        .zip(dy.as_slice())
        .zip(x.as_slice())
    {
        let xf = xv.to_f64();
        let phi_cdf = 0.5 * (1.0 + libm::erf(xf * INV_SQRT_2));
        let phi_pdf = (-0.5 * xf * xf).exp() * INV_SQRT_2PI;
        *o = g * F::from_f64(phi_cdf + xf * phi_pdf);
    }
    dx
}

/// y = x + r (residual addition), same shape.
pub fn add_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Global average pool. x: (B, C, H, W) -> (B, C)
pub fn global_avg_pool_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (bs, c_in, h, wd) = dims4(x);
    let hw = h * wd;
    let inv = F::from_f64(1.0 / hw as f64);
    let xs = x.as_slice();
    let mut out = Tensor::zeros(&[bs, c_in]);
    let os = out.as_mut_slice();
    for n in 0..bs {
        for c in 0..c_in {
            let plane = &xs[(n * c_in + c) * hw..(n * c_in + c + 1) * hw];
            let mut acc = F::ZERO;
            for &v in plane {
                acc += v;
            }
            os[n * c_in + c] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &Tensor<F>, x_shape: &[usize]) -> Tensor<F> {
    let (bs, c_in, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let hw = h * wd;
    let inv = F::from_f64(1.0 / hw as f64);
    let dys = dy.as_slice();
    let mut dx = Tensor::zeros(x_shape);
    let dxs = dx.as_mut_slice();
    for n in 0..bs {
        for c in 0..c_in {
            let g = dys[n * c_in + c] * inv;
            dxs[(n * c_in + c) * hw..(n * c_in + c + 1) * hw].fill(g);
        }
    }
    dx
}

/// Fully connected layer. x: (B, D), w: (C, D), b: (C) -> (B, C)
pub fn affine_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (bs, d_in) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[0];
    let xs = x.as_slice();
    let ws = w.as_slice();
    let mut out = Tensor::zeros(&[bs, c_out]);
    let os = out.as_mut_slice();
    for n in 0..bs {
        let xrow = &xs[n * d_in..(n + 1) * d_in];
        let orow = &mut os[n * c_out..(n + 1) * c_out];
        for (k, o) in orow.iter_mut().enumerate() {
            let wrow = &ws[k * d_in..(k + 1) * d_in];
            let mut acc = b.as_slice()[k];
            for (&wv, &xv) in wrow.iter().zip(xrow) {
                acc += wv * xv;
            }
            *o = acc;
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn affine_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    needs: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bs, d_in) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[0];
    let dys = dy.as_slice();
    let ws = w.as_slice();
    let xs = x.as_slice();

    let dx = needs.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.as_mut_slice();
        for n in 0..bs {
            let drow = &dys[n * c_out..(n + 1) * c_out];
            let xrow = &mut dxs[n * d_in..(n + 1) * d_in];
            for (k, &g) in drow.iter().enumerate() {
                let wrow = &ws[k * d_in..(k + 1) * d_in];
                for (o, &wv) in xrow.iter_mut().zip(wrow) {
                    *o += g * wv;
                }
            }
        }
        dx
    });

    let dw = needs.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        let dws = dw.as_mut_slice();
        for n in 0..bs {
            let drow = &dys[n * c_out..(n + 1) * c_out];
            let xrow = &xs[n * d_in..(n + 1) * d_in];
            for (k, &g) in drow.iter().enumerate() {
                let wrow = &mut dws[k * d_in..(k + 1) * d_in];
                for (o, &xv) in wrow.iter_mut().zip(xrow) {
                    *o += g * xv;
                }
            }
        }
        dw
    });

    let db = needs.2.then(|| {
        let mut db = Tensor::zeros(&[c_out]);
        let dbs = db.as_mut_slice();
        for n in 0..bs {
            for (k, o) in dbs.iter_mut().enumerate() {
                *o += dys[n * c_out + k];
            }
        }
        db
    });

    (dx, dw, db)
}

pub struct BatchStats<F: Scalar> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
    pub inv_std: Tensor<F>,
}

/// Per-channel statistics over (B, H, W) with biased variance.
pub fn batch_stats<F: Scalar>(x: &Tensor<F>, eps: f64) -> BatchStats<F> {
    let (bs, c_in, h, wd) = dims4(x);
    let hw = h * wd;
    let n = (bs * hw) as f64;
    let xs = x.as_slice();
    let mut mean = Tensor::zeros(&[c_in]);
    let mut var = Tensor::zeros(&[c_in]);
    let mut inv_std = Tensor::zeros(&[c_in]);
    for c in 0..c_in {
        let mut acc = F::ZERO;
        for b in 0..bs {
            let plane = &xs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            for &v in plane {
                acc += v;
            }
        }
        let m = acc * F::from_f64(1.0 / n);
        mean.as_mut_slice()[c] = m;
        let mut acc2 = F::ZERO;
        for b in 0..bs {
            let plane = &xs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            for &v in plane {
                let d = v - m;
                acc2 += d * d;
            }
        }
        let v = acc2 * F::from_f64(1.0 / n);
        var.as_mut_slice()[c] = v;
        inv_std.as_mut_slice()[c] = F::ONE / (v + F::from_f64(eps)).sqrt();
    }
    BatchStats { mean, var, inv_std }
}

/// Normalize with given per-channel mean and inverse std, then scale/shift.
pub fn batch_norm_apply<F: Scalar>(
    x: &Tensor<F>,
    mean: &Tensor<F>,
    inv_std: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Tensor<F> {
    let (bs, c_in, h, wd) = dims4(x);
    let hw = h * wd;
    let xs = x.as_slice();
    let mut out = Tensor::zeros(x.shape());
    let os = out.as_mut_slice();
    for b in 0..bs {
        for c in 0..c_in {
            let g = gamma.as_slice()[c] * inv_std.as_slice()[c];
            let sh = beta.as_slice()[c] - gamma.as_slice()[c] * inv_std.as_slice()[c] * mean.as_slice()[c];
            let xplane = &xs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            let oplane = &mut os[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            for (o, &v) in oplane.iter_mut().zip(xplane) {
                *o = g * v + sh;
            }
        }
    }
    out
}

/// Backward through batch statistics (training mode).
#[allow(clippy::type_complexity)]
pub fn batch_norm_train_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    mean: &Tensor<F>,
    inv_std: &Tensor<F>,
    gamma: &Tensor<F>,
    needs: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bs, c_in, h, wd) = dims4(x);
    let hw = h * wd;
    let n = F::from_f64((bs * hw) as f64);
    let dys = dy.as_slice();
    let xs = x.as_slice();

    // per-channel sums: s1 = sum(dy), s2 = sum(dy * xhat)
    let mut s1 = vec![F::ZERO; c_in];
    let mut s2 = vec![F::ZERO; c_in];
    for b in 0..bs {
        for c in 0..c_in {
            let m = mean.as_slice()[c];
            let istd = inv_std.as_slice()[c];
            let dplane = &dys[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            let xplane = &xs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
            for (&g, &v) in dplane.iter().zip(xplane) {
                s1[c] += g;
                s2[c] += g * (v - m) * istd;
            }
        }
    }

    let dx = needs.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.as_mut_slice();
        for b in 0..bs {
            for c in 0..c_in {
                let m = mean.as_slice()[c];
                let istd = inv_std.as_slice()[c];
                let g_scale = gamma.as_slice()[c] * istd;
                let mean_dy = s1[c] / n;
                let mean_dyxh = s2[c] / n;
                let dplane = &dys[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                let xplane = &xs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                let oplane = &mut dxs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                for ((o, &g), &v) in oplane.iter_mut().zip(dplane).zip(xplane) {
                    let xhat = (v - m) * istd;
                    *o = g_scale * (g - mean_dy - xhat * mean_dyxh);
                }
            }
        }
        dx
    });

    let dgamma = needs.1.then(|| Tensor::from_vec(&[c_in], s2.clone()).expect("sized"));
    let dbeta = needs.2.then(|| Tensor::from_vec(&[c_in], s1.clone()).expect("sized"));
    (dx, dgamma, dbeta)
}

/// Backward with fixed (running) statistics: the normalization is affine.
#[allow(clippy::type_complexity)]
pub fn batch_norm_eval_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    mean: &Tensor<F>,
    inv_std: &Tensor<F>,
    gamma: &Tensor<F>,
    needs: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bs, c_in, h, wd) = dims4(x);
    let hw = h * wd;
    let dys = dy.as_slice();
    let xs = x.as_slice();

    let dx = needs.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.as_mut_slice();
        for b in 0..bs {
            for c in 0..c_in {
                let g_scale = gamma.as_slice()[c] * inv_std.as_slice()[c];
                let dplane = &dys[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                let oplane = &mut dxs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                for (o, &g) in oplane.iter_mut().zip(dplane) {
                    *o = g_scale * g;
                }
            }
        }
        dx
    });

    let dgamma = needs.1.then(|| {
        let mut dg = Tensor::zeros(&[c_in]);
        let dgs = dg.as_mut_slice();
        for b in 0..bs {
            for c in 0..c_in {
                let m = mean.as_slice()[c];
                let istd = inv_std.as_slice()[c];
                let dplane = &dys[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                let xplane = &xs[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                for (&g, &v) in dplane.iter().zip(xplane) {
                    dgs[c] += g * (v - m) * istd;
                }
            }
        }
        dg
    });

    let dbeta = needs.2.then(|| channel_sum(dy, c_in));
    (dx, dgamma, dbeta)
}

pub struct SoftmaxCe<F: Scalar> {
    pub loss: F,
    pub probs: Tensor<F>,
}

/// Mean softmax cross-entropy over the batch, numerically stabilized.
pub fn softmax_cross_entropy_forward<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> SoftmaxCe<F> {
    let (bs, c) = (logits.shape()[0], logits.shape()[1]);
    let ls = logits.as_slice();
    let mut probs = Tensor::zeros(logits.shape());
    let ps = probs.as_mut_slice();
    let mut total = F::ZERO;
    for n in 0..bs {
        let row = &ls[n * c..(n + 1) * c];
        let mut m = row[0];
        for &v in row {
            m = m.maximum(v);
        }
        let mut denom = F::ZERO;
        for (k, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            ps[n * c + k] = e;
            denom += e;
        }
        let inv = F::ONE / denom;
        for k in 0..c {
            ps[n * c + k] *= inv;
        }
        let lse = denom.ln() + m;
        total += lse - row[labels[n]];
    }
    SoftmaxCe {
        loss: total * F::from_f64(1.0 / bs as f64),
        probs,
    }
}

pub fn softmax_cross_entropy_backward<F: Scalar>(
    upstream: F,
    probs: &Tensor<F>,
    labels: &[usize],
) -> Tensor<F> {
    let (bs, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream * F::from_f64(1.0 / bs as f64);
    let mut dl = probs.clone();
    let ds = dl.as_mut_slice();
    for (n, &y) in labels.iter().enumerate() {
        ds[n * c + y] -= F::ONE;
    }
    for v in ds.iter_mut() {
        *v *= scale;
    }
    dl
}

fn channel_sum<F: Scalar>(dy: &Tensor<F>, channels: usize) -> Tensor<F> {
    // dy is (B, C, H, W) or (B, C); sum everything except the channel dim.
    let shape = dy.shape();
    let (bs, hw) = match shape.len() {
        2 => (shape[0], 1),
        4 => (shape[0], shape[2] * shape[3]),
        _ => unreachable!("channel_sum on rank {}", shape.len()),
    };
    let dys = dy.as_slice();
    let mut out = Tensor::zeros(&[channels]);
    let os = out.as_mut_slice();
    for b in 0..bs {
        for (c, o) in os.iter_mut().enumerate() {
            let plane = &dys[(b * channels + c) * hw..(b * channels + c + 1) * hw];
            for &v in plane {
                *o += v;
            }
        }
    }
    out
}

fn dims4<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn tap_range(extent: usize, tap: usize, pad: usize) -> (usize, usize) {
    // valid output indices i such that 0 <= i + tap - pad < extent
    let lo = pad.saturating_sub(tap);
    let hi = (extent + pad - tap).min(extent);
    (lo, hi.max(lo))
}
