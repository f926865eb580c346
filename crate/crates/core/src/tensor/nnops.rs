use super::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::shape_ops::split_axis;
use super::{shape_err, Result, Tensor, TensorError};
use std::sync::Arc;

pub const LAYER_NORM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

fn strided_rows(outer: usize, len: usize, inner: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, inner)))
}

impl Tensor {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("softmax", &self.shape, axis)?;
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = vec![0.0; self.numel()];
        for (base, step) in strided_rows(outer, len, inner) {
            let max = (0..len)
                .map(|k| self.data[base + k * step])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (self.data[base + k * step] - max).exp();
                out[base + k * step] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * step] /= total;
            }
        }
        let y = Arc::new(out.clone());
        Tensor::record(self.shape.clone(), out, &[self], move |g| {
            let mut gx = vec![0.0; y.len()];
            for (base, step) in strided_rows(outer, len, inner) {
                let dot: f64 = (0..len)
                    .map(|k| g[base + k * step] * y[base + k * step])
                    .sum();
                for k in 0..len {
                    let j = base + k * step;
                    gx[j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("log_softmax", &self.shape, axis)?;
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let mut out = vec![0.0; self.numel()];
        for (base, step) in strided_rows(outer, len, inner) {
            let max = (0..len)
                .map(|k| self.data[base + k * step])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..len)
                    .map(|k| (self.data[base + k * step] - max).exp())
                    .sum::<f64>()
                    .ln();
            for k in 0..len {
                out[base + k * step] = self.data[base + k * step] - lse;
            }
        }
        let y = Arc::new(out.clone());
        Tensor::record(self.shape.clone(), out, &[self], move |g| {
            let mut gx = vec![0.0; y.len()];
            for (base, step) in strided_rows(outer, len, inner) {
                let gsum: f64 = (0..len).map(|k| g[base + k * step]).sum();
                for k in 0..len {
                    let j = base + k * step;
                    gx[j] = g[j] - y[j].exp() * gsum;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = *self
            .shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", &self.shape, gamma.shape()))?;
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(shape_err("layer_norm", &self.shape, gamma.shape()));
        }
        let rows = self.numel() / d.max(1);
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let h = (x[k] - mean) * is;
                xhat[r * d + k] = h;
                out[r * d + k] = h * gamma.data[k] + beta.data[k];
            }
        }
        let xhat = Arc::new(xhat);
        let gam = gamma.data_arc();
        let (tx, tg, tb) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        Tensor::record(self.shape.clone(), out, &[self, gamma, beta], move |g| {
            let mut gx = vec![0.0; if tx { rows * d } else { 0 }];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                for k in 0..d {
                    gg[k] += gr[k] * hr[k];
                    gb[k] += gr[k];
                }
                if tx {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for k in 0..d {
                        let dh = gr[k] * gam[k];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[k];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for k in 0..d {
                        let dh = gr[k] * gam[k];
                        gx[r * d + k] = inv_std[r] * (dh - mean_dh - hr[k] * mean_dh_h);
                    }
                }
            }
            vec![tx.then_some(gx), tg.then_some(gg), tb.then_some(gb)]
        })
    }

    /// 2-D convolution of a `[C×H×W]` input with `[O×C×kh×kw]` weights and `[O]` bias.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let (&[c, h, w], &[o, c2, kh, kw]) = (&self.shape[..], &weight.shape[..]) else {
            return Err(shape_err("conv2d", &self.shape, &weight.shape));
        };
        if c != c2 || bias.shape != [o] || spec.stride == 0 {
            return Err(shape_err("conv2d", &self.shape, &weight.shape));
        }
        let (s, p) = (spec.stride, spec.padding);
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(shape_err("conv2d", &self.shape, &weight.shape));
        }
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let ckk = c * kh * kw;
        let npix = oh * ow;
        // im2col: rows index (channel, ky, kx), columns index output pixels
        let mut cols = vec![0.0; ckk * npix];
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row * npix + oy * ow + ox] =
                                self.data[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; o * npix];
        for oc in 0..o {
            out[oc * npix..(oc + 1) * npix].fill(bias.data[oc]);
        }
        gemm_acc(&weight.data, &cols, &mut out, o, ckk, npix);
        let cols = Arc::new(cols);
        let wt = weight.data_arc();
        let (tx, tw, tb) = (self.is_tracked(), weight.is_tracked(), bias.is_tracked());
        Tensor::record(vec![o, oh, ow], out, &[self, weight, bias], move |g| {
            let gw = tw.then(|| {
                let mut gw = vec![0.0; o * ckk];
                gemm_nt_acc(g, &cols, &mut gw, o, npix, ckk);
                gw
            });
            let gb = tb.then(|| {
                (0..o)
                    .map(|oc| g[oc * npix..(oc + 1) * npix].iter().sum())
                    .collect()
            });
            let gx = tx.then(|| {
                let mut gcols = vec![0.0; ckk * npix];
                gemm_tn_acc(&wt, g, &mut gcols, o, ckk, npix);
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let row = (ci * kh + ky) * kw + kx;
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gx[(ci * h + iy as usize) * w + ix as usize] +=
                                        gcols[row * npix + oy * ow + ox];
                                }
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, gw, gb]
        })
    }

    /// Bilinear sampling of a `[C×H×W]` map at pixel coordinates.
    ///
    /// `xs` and `ys` share a shape `S`; the result has shape `[C, S...]`.
    /// Output at point `(x, y)` is `Σ_{m,n} U[n][m]·max(0,1-|x-m|)·max(0,1-|y-n|)`
    /// over in-bounds lattice points only, so samples off the map fade to zero.
    /// Gradients flow to the map and to both coordinate tensors.
    pub fn bilinear_sample(&self, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = &self.shape[..] else {
            return Err(shape_err("bilinear_sample", &self.shape, &xs.shape));
        };
        if xs.shape != ys.shape {
            return Err(shape_err("bilinear_sample", &xs.shape, &ys.shape));
        }
        let npts = xs.numel();
        let mut taps = Vec::with_capacity(npts);
        for k in 0..npts {
            taps.push(Taps::new(xs.data[k], ys.data[k], w, h));
        }
        let mut out = vec![0.0; c * npts];
        for ch in 0..c {
            let u = &self.data[ch * h * w..(ch + 1) * h * w];
            for (k, t) in taps.iter().enumerate() {
                out[ch * npts + k] = t.value(u, w);
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&xs.shape);
        let taps = Arc::new(taps);
        let umap = self.data_arc();
        let (tu, tx, ty) = (self.is_tracked(), xs.is_tracked(), ys.is_tracked());
        Tensor::record(shape, out, &[self, xs, ys], move |g| {
            let mut gu = vec![0.0; if tu { c * h * w } else { 0 }];
            let mut gx = vec![0.0; npts];
            let mut gy = vec![0.0; npts];
            for ch in 0..c {
                let u = &umap[ch * h * w..(ch + 1) * h * w];
                for (k, t) in taps.iter().enumerate() {
                    let gk = g[ch * npts + k];
                    if gk == 0.0 {
                        continue;
                    }
                    if tu {
                        t.scatter(&mut gu[ch * h * w..(ch + 1) * h * w], w, gk);
                    }
                    let (dx, dy) = t.coord_grad(u, w);
                    gx[k] += gk * dx;
                    gy[k] += gk * dy;
                }
            }
            vec![tu.then_some(gu), tx.then_some(gx), ty.then_some(gy)]
        })
    }
}

/// The (up to) four lattice neighbours of one sample point.
struct Taps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    // validity of x0, x0+1, y0, y0+1
    vx: [bool; 2],
    vy: [bool; 2],
}

impl Taps {
    fn new(x: f64, y: f64, w: usize, h: usize) -> Taps {
        if !x.is_finite() || !y.is_finite() {
            return Taps {
                x0: 0,
                y0: 0,
                fx: 0.0,
                fy: 0.0,
                vx: [false; 2],
                vy: [false; 2],
            };
        }
        let xf = x.floor();
        let yf = y.floor();
        let (x0, y0) = (xf as isize, yf as isize);
        let inside = |v: isize, n: usize| v >= 0 && v < n as isize;
        Taps {
            x0,
            y0,
            fx: x - xf,
            fy: y - yf,
            vx: [inside(x0, w), inside(x0 + 1, w)],
            vy: [inside(y0, h), inside(y0 + 1, h)],
        }
    }

    fn corners(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        // (dx, dy, weight_x, weight_y) for each valid corner
        (0..2).flat_map(move |dy| {
            (0..2).filter_map(move |dx| {
                if !(self.vx[dx] && self.vy[dy]) {
                    return None;
                }
                let wx = if dx == 0 { 1.0 - self.fx } else { self.fx };
                let wy = if dy == 0 { 1.0 - self.fy } else { self.fy };
                Some((dx, dy, wx, wy))
            })
        })
    }

    fn index(&self, dx: usize, dy: usize, w: usize) -> usize {
        (self.y0 + dy as isize) as usize * w + (self.x0 + dx as isize) as usize
    }

    fn value(&self, u: &[f64], w: usize) -> f64 {
        self.corners()
            .map(|(dx, dy, wx, wy)| u[self.index(dx, dy, w)] * wx * wy)
            .sum()
    }

    fn scatter(&self, gu: &mut [f64], w: usize, g: f64) {
        for (dx, dy, wx, wy) in self.corners() {
            gu[self.index(dx, dy, w)] += g * wx * wy;
        }
    }

    fn coord_grad(&self, u: &[f64], w: usize) -> (f64, f64) {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (dx, dy, wx, wy) in self.corners() {
            let v = u[self.index(dx, dy, w)];
            let sx = if dx == 0 { -1.0 } else { 1.0 };
            let sy = if dy == 0 { -1.0 } else { 1.0 };
            gx += v * sx * wy;
            gy += v * sy * wx;
        }
        (gx, gy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let y = Tensor::vector(&[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = Tensor::vector(&[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_reference_values() {
        // e^k / (e + e^2 + e^3), evaluated to 16 digits independently
        let reference = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        let y = Tensor::vector(&[1.0, 2.0, 3.0]).softmax(0).unwrap();
        for (a, b) in y.data().iter().zip(reference) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = Tensor::vector(&[0.0, f64::NAN]).softmax(0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "softmax" });
    }

    #[test]
    fn softmax_on_leading_axis() {
        let x = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let x: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::new(&[4, d], x).unwrap();
        let y = x
            .layer_norm(&Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]))
            .unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-7);
            assert!((var - 1.0).abs() <= 1e-6, "{var}");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::vector(&[0.5]);
        let y = x
            .conv2d(&w, &b, Conv2dSpec { stride: 1, padding: 0 })
            .unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn conv_output_extent() {
        let x = Tensor::zeros(&[3, 64, 64]);
        let w = Tensor::zeros(&[8, 3, 3, 3]);
        let y = x
            .conv2d(&w, &Tensor::zeros(&[8]), Conv2dSpec { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[8, 32, 32]);
    }

    #[test]
    fn bilinear_on_lattice_and_midpoint() {
        let u = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = u
            .bilinear_sample(&Tensor::vector(&[1.0, 0.5]), &Tensor::vector(&[1.0, 0.5]))
            .unwrap();
        assert_eq!(v.data(), &[3.0, 1.5]);
    }

    #[test]
    fn bilinear_outside_is_zero() {
        let u = Tensor::full(&[1, 2, 2], 1.0);
        let v = u
            .bilinear_sample(&Tensor::vector(&[-1.5, 5.0, -0.5]), &Tensor::vector(&[0.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 0.5]);
    }
}
