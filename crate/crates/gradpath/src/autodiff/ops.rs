//! Numeric kernels: direct-loop convolution, pooled linear projection, and
//! their vector-Jacobian products. All f64, no vectorization tricks;
//! verification fidelity over speed.

use super::value::Value;

/// Half-open range of output columns whose kernel tap `kx` stays inside
/// the image, for same padding `p` and the given stride.
fn valid_ox(kx: usize, p: usize, stride: usize, wd: usize, wo: usize) -> (usize, usize) {
    // need 0 <= ox*stride + kx - p < wd
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(stride) };
    let hi_excl = if wd + p > kx {
        ((wd + p - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Same-padded square convolution. `w` is laid out `(c_out, c_in, k, k)`.
pub fn conv2d(x: &Value, w: &[f64], c_out: usize, k: usize, stride: usize) -> Value {
    let [n, c_in, h, wd] = x.shape;
    let p = (k - 1) / 2;
    let ho = (h + 2 * p - k) / stride + 1;
    let wo = (wd + 2 * p - k) / stride + 1;
    debug_assert_eq!(w.len(), c_out * c_in * k * k);
    let mut y = Value::zeros([n, c_out, ho, wo]);
    let plane_in = h * wd;
    let plane_out = ho * wo;
    for b in 0..n {
        for co in 0..c_out {
            let out = &mut y.data[(b * c_out + co) * plane_out..(b * c_out + co + 1) * plane_out];
            for ci in 0..c_in {
                let xin = &x.data[(b * c_in + ci) * plane_in..(b * c_in + ci + 1) * plane_in];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * c_in + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_ox(kx, p, stride, wd, wo);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_in = iy as usize * wd;
                            let row_out = oy * wo;
                            if stride == 1 {
                                let src = &xin[row_in + lo + kx - p..row_in + hi + kx - p];
                                let dst = &mut out[row_out + lo..row_out + hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in lo..hi {
                                    out[row_out + ox] += wv * xin[row_in + ox * stride + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of conv2d output w.r.t. its input.
pub fn conv2d_vjp_input(
    gy: &Value,
    w: &[f64],
    x_shape: [usize; 4],
    k: usize,
    stride: usize,
) -> Value {
    let [n, c_in, h, wd] = x_shape;
    let [_, c_out, ho, wo] = gy.shape;
    let p = (k - 1) / 2;
    let mut gx = Value::zeros(x_shape);
    let plane_in = h * wd;
    let plane_out = ho * wo;
    for b in 0..n {
        for co in 0..c_out {
            let gyp = &gy.data[(b * c_out + co) * plane_out..(b * c_out + co + 1) * plane_out];
            for ci in 0..c_in {
                let gxp =
                    &mut gx.data[(b * c_in + ci) * plane_in..(b * c_in + ci + 1) * plane_in];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * c_in + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_ox(kx, p, stride, wd, wo);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_in = iy as usize * wd;
                            let row_out = oy * wo;
                            if stride == 1 {
                                let src = &gyp[row_out + lo..row_out + hi];
                                let dst = &mut gxp[row_in + lo + kx - p..row_in + hi + kx - p];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in lo..hi {
                                    gxp[row_in + ox * stride + kx - p] += wv * gyp[row_out + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of conv2d output w.r.t. its weights.
pub fn conv2d_vjp_weights(gy: &Value, x: &Value, c_out: usize, k: usize, stride: usize) -> Vec<f64> {
    let [n, c_in, h, wd] = x.shape;
    let [_, _, ho, wo] = gy.shape;
    let p = (k - 1) / 2;
    let mut gw = vec![0.0; c_out * c_in * k * k];
    let plane_in = h * wd;
    let plane_out = ho * wo;
    for b in 0..n {
        for co in 0..c_out {
            let gyp = &gy.data[(b * c_out + co) * plane_out..(b * c_out + co + 1) * plane_out];
            for ci in 0..c_in {
                let xin = &x.data[(b * c_in + ci) * plane_in..(b * c_in + ci + 1) * plane_in];
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = valid_ox(kx, p, stride, wd, wo);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_in = iy as usize * wd;
                            let row_out = oy * wo;
                            if stride == 1 {
                                let a = &gyp[row_out + lo..row_out + hi];
                                let b = &xin[row_in + lo + kx - p..row_in + hi + kx - p];
                                for (ga, xb) in a.iter().zip(b) {
                                    acc += ga * xb;
                                }
                            } else {
                                for ox in lo..hi {
                                    acc += gyp[row_out + ox] * xin[row_in + ox * stride + kx - p];
                                }
                            }
                        }
                        gw[((co * c_in + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Global average pool then linear projection; `w` is `(c_out, c_in)`.
/// Output shape is `(n, c_out, 1, 1)`.
pub fn fc(x: &Value, w: &[f64], c_out: usize) -> Value {
    let [n, c_in, h, wd] = x.shape;
    let area = (h * wd) as f64;
    let mut y = Value::zeros([n, c_out, 1, 1]);
    for b in 0..n {
        let pooled: Vec<f64> = (0..c_in)
            .map(|c| {
                let mut s = 0.0;
                for yy in 0..h {
                    for xx in 0..wd {
                        s += x.get(b, c, yy, xx);
                    }
                }
                s / area
            })
            .collect();
        for co in 0..c_out {
            let mut acc = 0.0;
            for (ci, p) in pooled.iter().enumerate() {
                acc += w[co * c_in + ci] * p;
            }
            y.set(b, co, 0, 0, acc);
        }
    }
    y
}

pub fn fc_vjp_input(gy: &Value, w: &[f64], x_shape: [usize; 4]) -> Value {
    let [n, c_in, h, wd] = x_shape;
    let [_, c_out, _, _] = gy.shape;
    let area = (h * wd) as f64;
    let mut gx = Value::zeros(x_shape);
    for b in 0..n {
        for ci in 0..c_in {
            let mut gp = 0.0;
            for co in 0..c_out {
                gp += gy.get(b, co, 0, 0) * w[co * c_in + ci];
            }
            let per_pixel = gp / area;
            for yy in 0..h {
                for xx in 0..wd {
                    gx.set(b, ci, yy, xx, per_pixel);
                }
            }
        }
    }
    gx
}

pub fn fc_vjp_weights(gy: &Value, x: &Value, c_out: usize) -> Vec<f64> {
    let [n, c_in, h, wd] = x.shape;
    let area = (h * wd) as f64;
    let mut gw = vec![0.0; c_out * c_in];
    for b in 0..n {
        let pooled: Vec<f64> = (0..c_in)
            .map(|c| {
                let mut s = 0.0;
                for yy in 0..h {
                    for xx in 0..wd {
                        s += x.get(b, c, yy, xx);
                    }
                }
                s / area
            })
            .collect();
        for co in 0..c_out {
            let g = gy.get(b, co, 0, 0);
            for (ci, p) in pooled.iter().enumerate() {
                gw[co * c_in + ci] += g * p;
            }
        }
    }
    gw
}

pub fn tanh_inplace(x: &mut Value) {
    for v in x.data.iter_mut() {
        *v = v.tanh();
    }
}

/// Upstream gradient through tanh, given the forward *output* `y`.
pub fn tanh_vjp(gy: &Value, y: &Value) -> Value {
    let mut gx = gy.clone();
    for (g, &yv) in gx.data.iter_mut().zip(&y.data) {
        *g *= 1.0 - yv * yv;
    }
    gx
}

/// Softmax cross-entropy over globally pooled logits. Returns the scalar
/// loss and its gradient w.r.t. the (unpooled) input.
pub fn cross_entropy(x: &Value, labels: &[usize]) -> (f64, Value) {
    let [n, c, h, w] = x.shape;
    assert_eq!(labels.len(), n, "one label per batch row");
    let area = (h * w) as f64;
    let mut loss = 0.0;
    let mut gx = Value::zeros(x.shape);
    for b in 0..n {
        let logits: Vec<f64> = (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        s += x.get(b, ch, yy, xx);
                    }
                }
                s / area
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[labels[b]] / sum).ln();
        for ch in 0..c {
            let softmax = exps[ch] / sum;
            let dlogit = (softmax - if ch == labels[b] { 1.0 } else { 0.0 }) / n as f64;
            let per_pixel = dlogit / area;
            for yy in 0..h {
                for xx in 0..w {
                    gx.set(b, ch, yy, xx, per_pixel);
                }
            }
        }
    }
    (loss / n as f64, gx)
}

/// Mean of all elements, used as a label-free scalar loss.
pub fn mean_activation(x: &Value) -> (f64, Value) {
    let numel = x.numel() as f64;
    let loss = x.data.iter().sum::<f64>() / numel;
    let mut gx = x.clone();
    gx.data.fill(1.0 / numel);
    (loss, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 on a single channel
        let x = Value::from_data([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(&x, &[1.0], 1, 1, 1);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_stride_two_halves_spatial() {
        let x = Value::zeros([1, 2, 8, 8]);
        let w = vec![0.0; 3 * 2 * 3 * 3];
        let y = conv2d(&x, &w, 3, 3, 2);
        assert_eq!(y.shape, [1, 3, 4, 4]);
    }

    #[test]
    fn conv_vjps_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Value::from_data([2, 3, 5, 5], (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let gy = Value::from_data([2, 2, 5, 5], (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let loss = |x: &Value, w: &[f64]| -> f64 {
            let y = conv2d(x, w, 2, 3, 1);
            y.data.iter().zip(&gy.data).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        let gx = conv2d_vjp_input(&gy, &w, x.shape, 3, 1);
        for i in (0..x.numel()).step_by(17) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
            assert!((fd - gx.data[i]).abs() < 1e-6, "input grad {i}: {fd} vs {}", gx.data[i]);
        }
        let gw = conv2d_vjp_weights(&gy, &x, 2, 3, 1);
        for i in (0..w.len()).step_by(5) {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-6, "weight grad {i}: {fd} vs {}", gw[i]);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let x = Value::from_data([2, 3, 1, 1], vec![0.3, -0.2, 0.9, -1.0, 0.4, 0.1]);
        let labels = vec![2usize, 1];
        let (_, g) = cross_entropy(&x, &labels);
        let eps = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (cross_entropy(&xp, &labels).0 - cross_entropy(&xm, &labels).0) / (2.0 * eps);
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }
}
