//! Raw forward/backward kernels on `C x H x W` buffers.

use crate::mocomp::bilinear_taps;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in range.
    #[inline]
    fn valid_cols(&self, kx: usize, wo: usize) -> (usize, usize) {
        valid_range(kx, self.pad, self.stride, self.w, wo)
    }

    #[inline]
    fn valid_rows(&self, ky: usize, ho: usize) -> (usize, usize) {
        valid_range(ky, self.pad, self.stride, self.h, ho)
    }
}

#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // o * stride + k - pad in [0, n_in)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n_in + pad > k { ((n_in + pad - k - 1) / stride + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unrolls input patches into a `[c_in * k * k, ho * wo]` matrix, zero padded.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut col = vec![0.0; g.c_in * g.k * g.k * plane_out];
    for ci in 0..g.c_in {
        let src = &input[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_rows(ky, ho);
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[r * plane_out..(r + 1) * plane_out];
                let (ox0, ox1) = g.valid_cols(kx, wo);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let row_in = &src[iy * g.w..(iy + 1) * g.w];
                    let row_out = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        row_out[ox0..ox1].copy_from_slice(&row_in[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            row_out[ox] = row_in[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back onto the input planes.
fn col2im(g: &ConvGeom, col: &[f64], grad_in: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    for ci in 0..g.c_in {
        let dst = &mut grad_in[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_rows(ky, ho);
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &col[r * plane_out..(r + 1) * plane_out];
                let (ox0, ox1) = g.valid_cols(kx, wo);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let row_in = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let row_c = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        for (i, c) in row_in[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&row_c[ox0..ox1]) {
                            *i += c;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            row_in[ox * g.stride + kx - g.pad] += row_c[ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with four independent partial sums so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cross-correlation. `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane_out = ho * wo;
    let rows = g.c_in * g.k * g.k;
    let col = im2col(g, input);
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let dst = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for (r, &wv) in weight[co * rows..(co + 1) * rows].iter().enumerate() {
            if wv != 0.0 {
                axpy(dst, wv, &col[r * plane_out..(r + 1) * plane_out]);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let plane_out = ho * wo;
    let rows = g.c_in * g.k * g.k;
    if let Some(gb) = grad_b {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * plane_out..(co + 1) * plane_out].iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_w {
        let col = im2col(g, input);
        for co in 0..g.c_out {
            let go = &grad_out[co * plane_out..(co + 1) * plane_out];
            for r in 0..rows {
                gw[co * rows + r] += dot(go, &col[r * plane_out..(r + 1) * plane_out]);
            }
        }
    }
    if let Some(gi) = grad_in {
        let mut col = vec![0.0; rows * plane_out];
        for co in 0..g.c_out {
            let go = &grad_out[co * plane_out..(co + 1) * plane_out];
            for (r, &wv) in weight[co * rows..(co + 1) * rows].iter().enumerate() {
                if wv != 0.0 {
                    axpy(&mut col[r * plane_out..(r + 1) * plane_out], wv, go);
                }
            }
        }
        col2im(g, &col, gi);
    }
}

/// Backward warp of `channels x h x w` features by a `2 x h x w` flow.
pub fn warp_forward(feat: &[f64], channels: usize, h: usize, w: usize, flow: &[f64]) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; channels * n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if let Some(taps) = bilinear_taps(w, h, x as f64 + flow[p], y as f64 + flow[n + p]) {
                for c in 0..channels {
                    let src = &feat[c * n..(c + 1) * n];
                    out[c * n + p] = taps[0].1 * src[taps[0].0]
                        + taps[1].1 * src[taps[1].0]
                        + taps[2].1 * src[taps[2].0]
                        + taps[3].1 * src[taps[3].0];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn warp_backward(
    feat: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    flow: &[f64],
    grad_out: &[f64],
    grad_feat: Option<&mut [f64]>,
    grad_flow: Option<&mut [f64]>,
) {
    let n = h * w;
    if let Some(gf) = grad_feat {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if let Some(taps) = bilinear_taps(w, h, x as f64 + flow[p], y as f64 + flow[n + p]) {
                    for c in 0..channels {
                        let go = grad_out[c * n + p];
                        if go == 0.0 {
                            continue;
                        }
                        for &(i, wt) in &taps {
                            gf[c * n + i] += wt * go;
                        }
                    }
                }
            }
        }
    }
    if let Some(gflow) = grad_flow {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = x as f64 + flow[p];
                let sy = y as f64 + flow[n + p];
                let Some(taps) = bilinear_taps(w, h, sx, sy) else { continue };
                let fx = sx - sx.floor().min((w - 1) as f64);
                let fy = sy - sy.floor().min((h - 1) as f64);
                // d(weight)/dx and d(weight)/dy for the four taps.
                let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
                let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
                let (mut gx, mut gy) = (0.0, 0.0);
                for c in 0..channels {
                    let go = grad_out[c * n + p];
                    if go == 0.0 {
                        continue;
                    }
                    let src = &feat[c * n..(c + 1) * n];
                    let mut sxv = 0.0;
                    let mut syv = 0.0;
                    for k in 0..4 {
                        let v = src[taps[k].0];
                        sxv += dwx[k] * v;
                        syv += dwy[k] * v;
                    }
                    gx += go * sxv;
                    gy += go * syv;
                }
                gflow[p] += gx;
                gflow[n + p] += gy;
            }
        }
    }
}

/// Separable bilinear resampling table along one axis (half-pixel centers,
/// clamped at the borders).
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMap {
    pub n_in: usize,
    pub taps: Vec<(usize, usize, f64)>,
}

impl AxisMap {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        AxisMap { n_in, taps }
    }

    pub fn n_out(&self) -> usize {
        self.taps.len()
    }
}

pub fn resize_forward(input: &[f64], channels: usize, ym: &AxisMap, xm: &AxisMap, scale: f64) -> Vec<f64> {
    let (hi, wi) = (ym.n_in, xm.n_in);
    let (ho, wo) = (ym.n_out(), xm.n_out());
    let mut out = vec![0.0; channels * ho * wo];
    for c in 0..channels {
        let src = &input[c * hi * wi..(c + 1) * hi * wi];
        for (oy, &(y0, y1, fy)) in ym.taps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xm.taps.iter().enumerate() {
                let top = src[y0 * wi + x0] * (1.0 - fx) + src[y0 * wi + x1] * fx;
                let bot = src[y1 * wi + x0] * (1.0 - fx) + src[y1 * wi + x1] * fx;
                out[(c * ho + oy) * wo + ox] = scale * (top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn resize_backward(grad_out: &[f64], channels: usize, ym: &AxisMap, xm: &AxisMap, scale: f64, grad_in: &mut [f64]) {
    let (hi, wi) = (ym.n_in, xm.n_in);
    let (ho, wo) = (ym.n_out(), xm.n_out());
    for c in 0..channels {
        let dst = &mut grad_in[c * hi * wi..(c + 1) * hi * wi];
        for (oy, &(y0, y1, fy)) in ym.taps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xm.taps.iter().enumerate() {
                let g = scale * grad_out[(c * ho + oy) * wo + ox];
                if g == 0.0 {
                    continue;
                }
                dst[y0 * wi + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * wi + x1] += g * (1.0 - fy) * fx;
                dst[y1 * wi + x0] += g * fy * (1.0 - fx);
                dst[y1 * wi + x1] += g * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution used as an independent oracle.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.c_out * ho * wo];
        for co in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                                let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                                if iy < 0 || ix < 0 || iy >= g.h as i64 || ix >= g.w as i64 {
                                    continue;
                                }
                                s += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(h, w, k, stride, pad) in &[(7, 5, 3, 1, 1), (8, 8, 3, 2, 1), (5, 6, 1, 1, 0), (9, 7, 3, 2, 0)] {
            let g = ConvGeom { c_in: 3, h, w, c_out: 2, k, stride, pad };
            let x = pseudo(3 * h * w, 1);
            let wt = pseudo(2 * 3 * k * k, 2);
            let b = vec![0.25, -0.5];
            let got = conv2d_forward(&g, &x, &wt, Some(&b));
            let want = naive(&g, &x, &wt, &b);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_doubles_constant_and_scales() {
        let ym = AxisMap::new(3, 6);
        let xm = AxisMap::new(4, 8);
        let out = resize_forward(&[1.5; 12], 1, &ym, &xm, 2.0);
        assert!(out.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
