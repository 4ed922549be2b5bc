//! The HOG descriptor as a composition of differentiable tape primitives.
//!
//! Pipeline: gray conversion, `[-1, 0, 1]` derivative masks, gradient
//! magnitude and orientation, per-bin orientation filters (circular linear
//! interpolation between neighbouring bin centers), tent-filter convolution
//! followed by sampling at the cell centers (bilinear spatial voting), and a
//! single global contrast normalization over the whole grid.
//!
//! [`reference::hog_reference`] computes the same descriptor with a direct
//! per-pixel voting loop and serves as the oracle for the filter-based form.

pub mod reference;

use std::sync::Arc;

use crate::autodiff::{Kernel, Tape, Var};
use crate::error::{Error, Result};
use crate::io::Image;
use crate::tensor::Tensor;

/// Luminance weights for R, G, B.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Guards the square-root adjoint where both derivatives vanish.
pub const MAGNITUDE_DELTA: f64 = 1e-12;

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Orientations folded into `[0, 180)`.
    Unsigned,
    /// Orientations kept in `[0, 360)`.
    Signed,
}

impl Orientation {
    pub fn range(self) -> f64 {
        match self {
            Orientation::Unsigned => 180.0,
            Orientation::Signed => 360.0,
        }
    }
}

/// How the global norm enters the normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStyle {
    /// `v / sqrt(‖v‖ + ε)`
    Paper,
    /// `v / sqrt(‖v‖² + ε)`
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HogConfig {
    /// Cell side in pixels; even and at least 2.
    pub cell: usize,
    pub bins: usize,
    pub orientation: Orientation,
    pub epsilon: f64,
    pub normalize: bool,
    pub norm_style: NormStyle,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            cell: 8,
            bins: 9,
            orientation: Orientation::Unsigned,
            epsilon: 1e-4,
            normalize: true,
            norm_style: NormStyle::Paper,
        }
    }
}

impl HogConfig {
    /// Signed orientations with 18 bins.
    pub fn signed() -> Self {
        HogConfig {
            bins: 18,
            orientation: Orientation::Signed,
            ..Self::default()
        }
    }

    pub fn with_cell(mut self, cell: usize) -> Self {
        self.cell = cell;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell < 2 || self.cell % 2 != 0 {
            return Err(Error::config(format!(
                "cell size must be even and >= 2, got {}",
                self.cell
            )));
        }
        if self.bins < 2 {
            return Err(Error::config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }

    /// Cell grid `(rows, cols)` for an image of `height × width`.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if height < 3 || width < 3 {
            return Err(Error::config(format!("image {height}x{width} too small")));
        }
        if height % self.cell != 0 || width % self.cell != 0 {
            return Err(Error::config(format!(
                "image {height}x{width} not divisible by cell size {}",
                self.cell
            )));
        }
        Ok((height / self.cell, width / self.cell))
    }

    /// Bin centers `b · R / B` in degrees.
    pub fn bin_centers(&self) -> Vec<f64> {
        let r = self.orientation.range();
        (0..self.bins).map(|b| b as f64 * r / self.bins as f64).collect()
    }
}

/// Cell grid of orientation histograms, shape `(rows, cols, bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HogDescriptor {
    pub grid: Tensor,
    pub config: HogConfig,
}

impl HogDescriptor {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.grid.shape();
        (s[0], s[1], s[2])
    }

    pub fn norm(&self) -> f64 {
        self.grid.norm()
    }

    pub fn dot(&self, other: &HogDescriptor) -> f64 {
        self.grid.dot(&other.grid)
    }
}

/// Weighted sum of the three channels of an `(h, w, 3)` node.
pub fn to_gray(tape: &mut Tape, img: Var) -> Result<Var> {
    let shape = tape.value(img).shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::InvalidShape { op: "to_gray", shape });
    }
    let mut acc: Option<Var> = None;
    for (c, &w) in GRAY_WEIGHTS.iter().enumerate() {
        let ch = tape.channel(img, c)?;
        let term = tape.scale(ch, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three channels"))
}

fn derivative_kernels() -> (Arc<Kernel>, Arc<Kernel>) {
    let dx = Kernel::new(1, 3, vec![-1.0, 0.0, 1.0]).expect("valid kernel");
    let dy = Kernel::new(3, 1, vec![-1.0, 0.0, 1.0]).expect("valid kernel");
    (dx, dy)
}

fn border_masks(h: usize, w: usize) -> (Tensor, Tensor) {
    let mut mx = Tensor::full(&[h, w], 1.0);
    let mut my = Tensor::full(&[h, w], 1.0);
    for i in 0..h {
        mx.data_mut()[i * w] = 0.0;
        mx.data_mut()[i * w + w - 1] = 0.0;
    }
    for j in 0..w {
        my.data_mut()[j] = 0.0;
        my.data_mut()[(h - 1) * w + j] = 0.0;
    }
    (mx, my)
}

/// Gradient magnitude `sqrt(Gx² + Gy² + δ²)` and orientation in degrees,
/// folded into the configured range.
pub fn gradients(tape: &mut Tape, gray: Var, cfg: &HogConfig) -> Result<(Var, Var)> {
    let (h, w) = tape.value(gray).dims2()?;
    if h < 3 || w < 3 {
        return Err(Error::config(format!("image {h}x{w} too small for gradients")));
    }
    let (kx, ky) = derivative_kernels();
    let gx = tape.conv2d_same(gray, &kx)?;
    let gy = tape.conv2d_same(gray, &ky)?;
    // The centered difference needs both neighbours; border rows/columns
    // along the derivative direction get zero gradient.
    let (mx, my) = border_masks(h, w);
    let mx = tape.input(mx);
    let my = tape.input(my);
    let gx = tape.mul(gx, mx)?;
    let gy = tape.mul(gy, my)?;
    let gx2 = tape.pow2(gx)?;
    let gy2 = tape.pow2(gy)?;
    let sum = tape.add(gx2, gy2)?;
    let guarded = tape.add_scalar(sum, MAGNITUDE_DELTA * MAGNITUDE_DELTA)?;
    let mag = tape.sqrt(guarded)?;
    let angle = tape.atan2(gy, gx)?;
    let theta = tape.wrap(angle, cfg.orientation.range())?;
    Ok((mag, theta))
}

/// One `mag ⊙ f_b(theta)` node per bin, where
/// `f_b(θ) = clip(1 − d(θ, μ_b) · B / R, 0, 1)` and `d` is the circular
/// distance. The circular distance is realized by adding the shifted copy
/// `θ − μ_b ∓ R` for the bins whose support wraps around.
pub fn orientation_filters(tape: &mut Tape, mag: Var, theta: Var, cfg: &HogConfig) -> Result<Vec<Var>> {
    if tape.value(mag).shape() != tape.value(theta).shape() {
        return Err(Error::ShapeMismatch {
            op: "orientation_filters",
            lhs: tape.value(mag).shape().to_vec(),
            rhs: tape.value(theta).shape().to_vec(),
        });
    }
    let range = cfg.orientation.range();
    let width = range / cfg.bins as f64;
    let mut out = Vec::with_capacity(cfg.bins);
    for mu in cfg.bin_centers() {
        let mut shifts = vec![mu];
        if mu < width {
            shifts.push(mu + range);
        }
        if mu > range - width {
            shifts.push(mu - range);
        }
        let mut weight: Option<Var> = None;
        for shift in shifts {
            let d = tape.add_scalar(theta, -shift)?;
            let d = tape.abs(d)?;
            let lin = tape.affine(d, -1.0 / width, 1.0)?;
            let term = tape.clip(lin, 0.0, 1.0)?;
            weight = Some(match weight {
                Some(w) => tape.add(w, term)?,
                None => term,
            });
        }
        out.push(tape.mul(mag, weight.expect("at least one term"))?);
    }
    Ok(out)
}

/// 1D tent `t(k) = 1 − |k + 0.5 − c| / c` for `k = 0..2c`.
pub fn tent_weights(cell: usize) -> Vec<f64> {
    let c = cell as f64;
    (0..2 * cell).map(|k| 1.0 - (k as f64 + 0.5 - c).abs() / c).collect()
}

/// `2c × 2c` separable bilinear voting kernel `t ⊗ t`.
pub fn make_spatial_kernel(cell: usize) -> Result<Arc<Kernel>> {
    if cell < 2 || cell % 2 != 0 {
        return Err(Error::config(format!("cell size must be even and >= 2, got {cell}")));
    }
    let t = tent_weights(cell);
    Kernel::separable(t.clone(), t)
}

/// Sampling positions of the cell centers in the tent-filtered maps.
///
/// With the kernel anchored at `c − 1`, output index `r` weighs pixel `p` by
/// `1 − |p − (r + 0.5)| / c`, so `r = i·c + c/2 − 1` centers the tent on
/// cell `i`'s midpoint `i·c + (c − 1)/2`.
pub fn cell_centers(cells: usize, cell: usize) -> Vec<usize> {
    (0..cells).map(|i| i * cell + cell / 2 - 1).collect()
}

/// Convolves every orientation channel with the tent kernel, samples the
/// cell centers and stacks the bins into a `(rows, cols, B)` grid.
pub fn spatial_binning(tape: &mut Tape, channels: &[Var], cfg: &HogConfig) -> Result<Var> {
    let first = *channels
        .first()
        .ok_or_else(|| Error::config("no orientation channels"))?;
    let (h, w) = tape.value(first).dims2()?;
    let (rows, cols) = cfg.grid(h, w)?;
    let kernel = make_spatial_kernel(cfg.cell)?;
    let rr = cell_centers(rows, cfg.cell);
    let cc = cell_centers(cols, cfg.cell);
    let mut cells = Vec::with_capacity(channels.len());
    for &ch in channels {
        let filtered = tape.conv2d_same(ch, &kernel)?;
        cells.push(tape.subsample(filtered, &rr, &cc)?);
    }
    tape.stack(&cells)
}

/// Global normalization `v / sqrt(‖v‖ + ε)` (or `‖v‖²` for [`NormStyle::Squared`]).
pub fn normalize(tape: &mut Tape, v: Var, cfg: &HogConfig) -> Result<Var> {
    let n = tape.l2norm(v)?;
    let n = match cfg.norm_style {
        NormStyle::Paper => n,
        NormStyle::Squared => tape.pow2(n)?,
    };
    let shifted = tape.add_scalar(n, cfg.epsilon)?;
    let denom = tape.sqrt(shifted)?;
    tape.div(v, denom)
}

/// Full descriptor of a `(h, w)` or `(h, w, 3)` image node.
pub fn hog_forward(tape: &mut Tape, img: Var, cfg: &HogConfig) -> Result<Var> {
    cfg.validate()?;
    let gray = match tape.value(img).shape().len() {
        2 => img,
        _ => to_gray(tape, img)?,
    };
    let (h, w) = tape.value(gray).dims2()?;
    cfg.grid(h, w)?;
    let (mag, theta) = gradients(tape, gray, cfg)?;
    let channels = orientation_filters(tape, mag, theta, cfg)?;
    let v = spatial_binning(tape, &channels, cfg)?;
    if cfg.normalize {
        normalize(tape, v, cfg)
    } else {
        Ok(v)
    }
}

/// Runs [`hog_forward`] on a fresh tape.
pub fn extract(img: &Image, cfg: &HogConfig) -> Result<HogDescriptor> {
    extract_tensor(&img.to_tensor(), cfg)
}

pub fn extract_tensor(img: &Tensor, cfg: &HogConfig) -> Result<HogDescriptor> {
    let mut tape = Tape::new();
    let x = tape.input(img.clone());
    let v = hog_forward(&mut tape, x, cfg)?;
    Ok(HogDescriptor {
        grid: tape.value(v).clone(),
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval<F: FnOnce(&mut Tape, Var) -> Result<Var>>(input: Tensor, f: F) -> Tensor {
        let mut t = Tape::new();
        let x = t.input(input);
        let y = f(&mut t, x).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn gray_weights() {
        let px = |r, g, b| {
            let v = eval(Tensor::new(&[1, 1, 3], vec![r, g, b]).unwrap(), |t, x| to_gray(t, x));
            v.item()
        };
        assert_eq!(px(1.0, 0.0, 0.0), 0.299);
        assert_eq!(px(0.0, 0.0, 0.0), 0.0);
        assert!((px(0.5, 0.5, 0.5) - 0.5).abs() < 1e-15);
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2, 2]));
        assert!(to_gray(&mut t, x).is_err());
    }

    #[test]
    fn gradients_of_ramps() {
        let (h, w) = (6, 8);
        let ramp = Tensor::new(&[h, w], (0..h * w).map(|i| (i % w) as f64 / w as f64).collect()).unwrap();
        let cfg = HogConfig::default();
        let mut t = Tape::new();
        let x = t.input(ramp);
        let (mag, theta) = gradients(&mut t, x, &cfg).unwrap();
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                assert!((t.value(mag).at2(i, j) - 2.0 / w as f64).abs() < 1e-12);
                assert_eq!(t.value(theta).at2(i, j), 0.0);
            }
        }
        let vramp = Tensor::new(&[h, w], (0..h * w).map(|i| (i / w) as f64 / h as f64).collect()).unwrap();
        let x = t.input(vramp);
        let (_, theta) = gradients(&mut t, x, &cfg).unwrap();
        assert!((t.value(theta).at2(2, 3) - 90.0).abs() < 1e-12);

        let x = t.input(Tensor::full(&[5, 5], 0.3));
        let (mag, theta) = gradients(&mut t, x, &cfg).unwrap();
        assert!(t.value(mag).data().iter().all(|&m| m <= MAGNITUDE_DELTA));
        assert!(t.value(theta).data().iter().all(|&v| v == 0.0));

        let x = t.input(Tensor::zeros(&[2, 5]));
        assert!(gradients(&mut t, x, &cfg).is_err());
    }

    fn filter_weights(theta: f64, cfg: &HogConfig) -> Vec<f64> {
        let mut t = Tape::new();
        let mag = t.input(Tensor::full(&[1, 1], 1.0));
        let th = t.input(Tensor::full(&[1, 1], theta));
        let f = orientation_filters(&mut t, mag, th, cfg).unwrap();
        f.iter().map(|&v| t.value(v).item()).collect()
    }

    #[test]
    fn orientation_filter_examples() {
        let cfg = HogConfig::default();
        let w = filter_weights(40.0, &cfg);
        assert_eq!(w[2], 1.0);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
        let w = filter_weights(10.0, &cfg);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = filter_weights(175.0, &cfg);
        assert!((w[0] - 0.75).abs() < 1e-15);
        assert!((w[8] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn tent_examples() {
        assert_eq!(tent_weights(2), vec![0.25, 0.75, 0.75, 0.25]);
        for c in [2, 4, 6, 8, 16] {
            let t = tent_weights(c);
            assert!((t.iter().sum::<f64>() - c as f64).abs() < 1e-12);
            let k = make_spatial_kernel(c).unwrap();
            assert!((k.sum() - (c * c) as f64).abs() < 1e-9);
            let peak = 1.0 - 1.0 / (2.0 * c as f64);
            assert!((k.weights().iter().cloned().fold(0.0, f64::max) - peak * peak).abs() < 1e-12);
        }
        assert!(make_spatial_kernel(3).is_err());
    }

    #[test]
    fn conv_of_ones_with_tent_has_kernel_mass_inside() {
        let k = make_spatial_kernel(8).unwrap();
        let out = eval(Tensor::full(&[32, 32], 1.0), |t, x| t.conv2d_same(x, &k));
        for i in 8..24 {
            for j in 8..24 {
                assert!((out.at2(i, j) - 64.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binning_of_constant_channel() {
        let cfg = HogConfig::default();
        let mut t = Tape::new();
        let ones = t.input(Tensor::full(&[32, 32], 1.0));
        let zeros = t.input(Tensor::zeros(&[32, 32]));
        let grid = spatial_binning(&mut t, &[ones, zeros], &cfg).unwrap();
        let v = t.value(grid);
        assert_eq!(v.shape(), &[4, 4, 2]);
        for i in 1..3 {
            for j in 1..3 {
                assert!((v.data()[(i * 4 + j) * 2] - 64.0).abs() < 1e-12);
                assert_eq!(v.data()[(i * 4 + j) * 2 + 1], 0.0);
            }
        }
    }

    #[test]
    fn normalize_identity() {
        let cfg = HogConfig::default();
        let v = Tensor::new(&[1, 2, 2], vec![0.3, 1.2, 0.0, 2.0]).unwrap();
        let n = v.norm();
        let out = eval(v, |t, x| normalize(t, x, &cfg));
        assert!((out.norm() - n / (n + cfg.epsilon).sqrt()).abs() < 1e-12);
        let z = eval(Tensor::zeros(&[1, 1, 3]), |t, x| normalize(t, x, &cfg));
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn descriptor_shape_and_constant_image() {
        let cfg = HogConfig::default();
        let img = Image::gray(128, 128, vec![0.5; 128 * 128]).unwrap();
        let d = extract(&img, &cfg).unwrap();
        assert_eq!(d.dims(), (16, 16, 9));
        assert_eq!(d.grid.len(), 2304);
        assert!(d.grid.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rejects_indivisible_extent() {
        let img = Image::gray(20, 16, vec![0.5; 320]).unwrap();
        assert!(matches!(extract(&img, &HogConfig::default()), Err(Error::Config(_))));
    }
}
