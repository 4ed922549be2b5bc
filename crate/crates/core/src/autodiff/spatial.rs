//! Raw forward and transposed kernels for the spatial primitives.
//!
//! Everything here works on flat row-major buffers; the tape wraps these
//! with shape checks and adjoint bookkeeping.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Fixed (non-differentiated) 2D filter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    /// Column and row factors when `weights` is their outer product.
    factors: Option<(Vec<f64>, Vec<f64>)>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Arc<Self>> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols {
            return Err(Error::InvalidShape {
                op: "kernel",
                shape: vec![rows, cols, weights.len()],
            });
        }
        Ok(Arc::new(Kernel {
            rows,
            cols,
            weights,
            factors: None,
        }))
    }

    /// Outer product `column ⊗ row`. Convolution with a separable kernel runs
    /// as two 1D passes.
    pub fn separable(column: Vec<f64>, row: Vec<f64>) -> Result<Arc<Self>> {
        if column.is_empty() || row.is_empty() {
            return Err(Error::InvalidShape {
                op: "kernel",
                shape: vec![column.len(), row.len()],
            });
        }
        let weights = column
            .iter()
            .flat_map(|c| row.iter().map(move |r| c * r))
            .collect();
        Ok(Arc::new(Kernel {
            rows: column.len(),
            cols: row.len(),
            weights,
            factors: Some((column, row)),
        }))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Anchor `(⌈kh/2⌉−1, ⌈kw/2⌉−1)`: output `(i, j)` reads input
    /// `(i + u − anchor_row, j + v − anchor_col)` for kernel tap `(u, v)`.
    pub fn anchor(&self) -> (usize, usize) {
        (self.rows.div_ceil(2) - 1, self.cols.div_ceil(2) - 1)
    }
}

/// Zero-padded "same" correlation of an `h × w` buffer.
pub(crate) fn correlate(src: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let (ay, ax) = k.anchor();
    match &k.factors {
        Some((col, row)) => {
            let tmp = correlate_axis(src, h, w, row, ax, Axis::Cols);
            correlate_axis(&tmp, h, w, col, ay, Axis::Rows)
        }
        None => {
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k.rows {
                        let Some(y) = (i + u).checked_sub(ay).filter(|&y| y < h) else {
                            continue;
                        };
                        for v in 0..k.cols {
                            let Some(x) = (j + v).checked_sub(ax).filter(|&x| x < w) else {
                                continue;
                            };
                            acc += k.at(u, v) * src[y * w + x];
                        }
                    }
                    out[i * w + j] = acc;
                }
            }
            out
        }
    }
}

/// Adjoint of [`correlate`]: scatters each output adjoint back through the taps.
pub(crate) fn correlate_transpose(grad: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let (ay, ax) = k.anchor();
    match &k.factors {
        Some((col, row)) => {
            let tmp = correlate_axis_transpose(grad, h, w, col, ay, Axis::Rows);
            correlate_axis_transpose(&tmp, h, w, row, ax, Axis::Cols)
        }
        None => {
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let g = grad[i * w + j];
                    if g == 0.0 {
                        continue;
                    }
                    for u in 0..k.rows {
                        let Some(y) = (i + u).checked_sub(ay).filter(|&y| y < h) else {
                            continue;
                        };
                        for v in 0..k.cols {
                            let Some(x) = (j + v).checked_sub(ax).filter(|&x| x < w) else {
                                continue;
                            };
                            out[y * w + x] += k.at(u, v) * g;
                        }
                    }
                }
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

/// Taps `t` with `pos + t − anchor` inside `0..extent`.
fn valid_taps(pos: usize, extent: usize, taps: usize, anchor: usize) -> std::ops::Range<usize> {
    let lo = anchor.saturating_sub(pos);
    let hi = taps.min((extent + anchor).saturating_sub(pos));
    lo..hi.max(lo)
}

fn correlate_axis(src: &[f64], h: usize, w: usize, taps: &[f64], anchor: usize, axis: Axis) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    match axis {
        Axis::Cols => {
            for (row_in, row_out) in src.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                for (j, o) in row_out.iter_mut().enumerate() {
                    *o = valid_taps(j, w, taps.len(), anchor)
                        .map(|t| taps[t] * row_in[j + t - anchor])
                        .sum();
                }
            }
        }
        Axis::Rows => {
            for (i, row_out) in out.chunks_exact_mut(w).enumerate() {
                for t in valid_taps(i, h, taps.len(), anchor) {
                    let p = i + t - anchor;
                    let wt = taps[t];
                    for (o, &v) in row_out.iter_mut().zip(&src[p * w..(p + 1) * w]) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

fn correlate_axis_transpose(
    grad: &[f64],
    h: usize,
    w: usize,
    taps: &[f64],
    anchor: usize,
    axis: Axis,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    match axis {
        Axis::Cols => {
            for (row_g, row_out) in grad.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                for (j, &g) in row_g.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for t in valid_taps(j, w, taps.len(), anchor) {
                        row_out[j + t - anchor] += taps[t] * g;
                    }
                }
            }
        }
        Axis::Rows => {
            for (i, row_g) in grad.chunks_exact(w).enumerate() {
                for t in valid_taps(i, h, taps.len(), anchor) {
                    let p = i + t - anchor;
                    let wt = taps[t];
                    for (o, &g) in out[p * w..(p + 1) * w].iter_mut().zip(row_g) {
                        *o += wt * g;
                    }
                }
            }
        }
    }
    out
}

/// Per-axis interpolation table for center-aligned bilinear resizing:
/// `(lower index, upper index, upper weight)` for every output position.
pub(crate) fn resize_taps(src_extent: usize, dst_extent: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src_extent as f64 / dst_extent as f64;
    (0..dst_extent)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_extent - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_extent - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub(crate) fn resize(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let ry = resize_taps(h, nh);
    let rx = resize_taps(w, nw);
    let mut out = Vec::with_capacity(nh * nw);
    for &(y0, y1, fy) in &ry {
        for &(x0, x1, fx) in &rx {
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bottom = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

pub(crate) fn resize_transpose(grad: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let ry = resize_taps(h, nh);
    let rx = resize_taps(w, nw);
    let mut out = vec![0.0; h * w];
    for (i, &(y0, y1, fy)) in ry.iter().enumerate() {
        for (j, &(x0, x1, fx)) in rx.iter().enumerate() {
            let g = grad[i * nw + j];
            out[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
            out[y0 * w + x1] += (1.0 - fy) * fx * g;
            out[y1 * w + x0] += fy * (1.0 - fx) * g;
            out[y1 * w + x1] += fy * fx * g;
        }
    }
    out
}

/// One bilinear sample of a warped image together with its sensitivities.
pub(crate) struct WarpSample {
    /// Integer corner `(row, col)` and fractional offsets.
    pub y0: i64,
    pub x0: i64,
    pub fy: f64,
    pub fx: f64,
    /// d(sample)/d(pose) for `[tx, ty, r_degrees, log_scale]`, excluding the
    /// image-gradient factor: d(src_x)/d(pose) and d(src_y)/d(pose).
    pub dsx: [f64; 4],
    pub dsy: [f64; 4],
}

/// Source sampling location for every output pixel of a similarity warp.
///
/// Output pixel `p` (relative to the output center) reads the source at
/// `c_src + e^{−σ} R(−r) (p − t)`.
pub(crate) fn warp_samples(
    pose: [f64; 4],
    src_shape: (usize, usize),
    dst_shape: (usize, usize),
) -> Vec<WarpSample> {
    let [tx, ty, r_deg, sigma] = pose;
    let rad = r_deg.rem_euclid(360.0).to_radians();
    let (sn, cs) = rad.sin_cos();
    let s = (-sigma).exp();
    let (h, w) = src_shape;
    let (nh, nw) = dst_shape;
    let (cy_src, cx_src) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cy_dst, cx_dst) = ((nh as f64 - 1.0) / 2.0, (nw as f64 - 1.0) / 2.0);
    let deg = std::f64::consts::PI / 180.0;
    let mut out = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        for j in 0..nw {
            let dx = j as f64 - cx_dst - tx;
            let dy = i as f64 - cy_dst - ty;
            let qx = s * (cs * dx + sn * dy);
            let qy = s * (-sn * dx + cs * dy);
            let sx = cx_src + qx;
            let sy = cy_src + qy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            out.push(WarpSample {
                y0: y0 as i64,
                x0: x0 as i64,
                fy: sy - y0,
                fx: sx - x0,
                dsx: [-s * cs, -s * sn, qy * deg, -qx],
                dsy: [s * sn, -s * cs, -qx * deg, -qy],
            });
        }
    }
    out
}

#[inline]
fn pixel(src: &[f64], h: usize, w: usize, y: i64, x: i64) -> f64 {
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        0.0
    } else {
        src[y as usize * w + x as usize]
    }
}

/// Bilinear value and its spatial derivatives `(v, dv/dx, dv/dy)`.
pub(crate) fn sample(src: &[f64], h: usize, w: usize, s: &WarpSample) -> (f64, f64, f64) {
    let a = pixel(src, h, w, s.y0, s.x0);
    let b = pixel(src, h, w, s.y0, s.x0 + 1);
    let c = pixel(src, h, w, s.y0 + 1, s.x0);
    let d = pixel(src, h, w, s.y0 + 1, s.x0 + 1);
    let top = a + s.fx * (b - a);
    let bottom = c + s.fx * (d - c);
    let value = top + s.fy * (bottom - top);
    let ddx = (1.0 - s.fy) * (b - a) + s.fy * (d - c);
    let ddy = bottom - top;
    (value, ddx, ddy)
}

/// Scatters `g` into the four bilinear neighbours (dropping out-of-bounds ones).
pub(crate) fn sample_transpose(out: &mut [f64], h: usize, w: usize, s: &WarpSample, g: f64) {
    let taps = [
        (s.y0, s.x0, (1.0 - s.fy) * (1.0 - s.fx)),
        (s.y0, s.x0 + 1, (1.0 - s.fy) * s.fx),
        (s.y0 + 1, s.x0, s.fy * (1.0 - s.fx)),
        (s.y0 + 1, s.x0 + 1, s.fy * s.fx),
    ];
    for (y, x, wt) in taps {
        if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
            out[y as usize * w + x as usize] += wt * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(k: &Kernel) -> Arc<Kernel> {
        Kernel::new(k.rows(), k.cols(), k.weights().to_vec()).unwrap()
    }

    #[test]
    fn separable_matches_direct() {
        let k = Kernel::separable(vec![0.25, 0.75, 0.75, 0.25], vec![1.0, -2.0, 0.5]).unwrap();
        let d = direct(&k);
        let (h, w) = (7, 9);
        let src: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let a = correlate(&src, h, w, &k);
        let b = correlate(&src, h, w, &d);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = correlate_transpose(&src, h, w, &k);
        let bt = correlate_transpose(&src, h, w, &d);
        for (x, y) in at.iter().zip(&bt) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <K x, y> == <x, K^T y>
        let k = Kernel::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let (h, w) = (5, 6);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.91).cos()).collect();
        let kx = correlate(&x, h, w, &k);
        let kty = correlate_transpose(&y, h, w, &k);
        let lhs: f64 = kx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&kty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn anchor_convention() {
        assert_eq!(Kernel::new(1, 3, vec![0.0; 3]).unwrap().anchor(), (0, 1));
        assert_eq!(Kernel::new(16, 16, vec![0.0; 256]).unwrap().anchor(), (7, 7));
        assert_eq!(Kernel::new(1, 1, vec![1.0]).unwrap().anchor(), (0, 0));
    }

    #[test]
    fn resize_taps_clamp_edges() {
        let t = resize_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.0));
    }
}
