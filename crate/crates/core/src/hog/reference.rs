//! Direct per-pixel HOG voting loop, kept independent of the tape.

use super::{luminance, HogConfig, HogDescriptor, NormStyle, MAGNITUDE_DELTA};
use crate::autodiff::atan2_deg;
use crate::error::Result;
use crate::io::Image;
use crate::tensor::Tensor;

/// Unnormalized or normalized descriptor computed by explicit voting: every
/// pixel splits its gradient magnitude between its two circularly adjacent
/// orientation bins and its (up to) four nearest cell centers, with linear
/// weights along each axis.
pub fn hog_reference(img: &Image, cfg: &HogConfig) -> Result<HogDescriptor> {
    let (h, w) = (img.height(), img.width());
    let (rows, cols) = cfg.grid(h, w)?;
    let gray: Vec<f64> = if img.channels() == 3 {
        img.data()
            .chunks_exact(3)
            .map(|p| luminance(p[0], p[1], p[2]))
            .collect()
    } else {
        img.data().to_vec()
    };
    let at = |y: usize, x: usize| gray[y * w + x];

    let bins = cfg.bins;
    let range = cfg.orientation.range();
    let c = cfg.cell as f64;
    let mut hist = vec![0.0; rows * cols * bins];

    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 || x == w - 1 { 0.0 } else { at(y, x + 1) - at(y, x - 1) };
            let gy = if y == 0 || y == h - 1 { 0.0 } else { at(y + 1, x) - at(y - 1, x) };
            let mag = (gx * gx + gy * gy + MAGNITUDE_DELTA * MAGNITUDE_DELTA).sqrt();
            let mut theta = atan2_deg(gy, gx).rem_euclid(range);
            if theta >= range {
                theta = 0.0;
            }

            // orientation: linear split between floor(pos) and the next bin
            let pos = theta * bins as f64 / range;
            let lower = pos.floor();
            let frac = pos - lower;
            let b0 = (lower as usize) % bins;
            let b1 = (b0 + 1) % bins;

            // space: cell i is centered at i·c + (c − 1)/2
            let fy = (y as f64 + 0.5) / c - 0.5;
            let fx = (x as f64 + 0.5) / c - 0.5;
            let (cy, cx) = (fy.floor(), fx.floor());
            let (wy, wx) = (fy - cy, fx - cx);

            for (dy, wy) in [(0i64, 1.0 - wy), (1, wy)] {
                let row = cy as i64 + dy;
                if row < 0 || row >= rows as i64 {
                    continue;
                }
                for (dx, wx) in [(0i64, 1.0 - wx), (1, wx)] {
                    let col = cx as i64 + dx;
                    if col < 0 || col >= cols as i64 {
                        continue;
                    }
                    let cell = (row as usize * cols + col as usize) * bins;
                    let vote = mag * wy * wx;
                    hist[cell + b0] += vote * (1.0 - frac);
                    hist[cell + b1] += vote * frac;
                }
            }
        }
    }

    if cfg.normalize {
        let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = match cfg.norm_style {
            NormStyle::Paper => norm,
            NormStyle::Squared => norm * norm,
        };
        let scale = 1.0 / (n + cfg.epsilon).sqrt();
        hist.iter_mut().for_each(|v| *v *= scale);
    }

    Ok(HogDescriptor {
        grid: Tensor::new(&[rows, cols, bins], hist)?,
        config: *cfg,
    })
}

/// Total weight a pixel at `pos` (0-based, along one axis) sends to all cells.
pub fn spatial_vote_mass(pos: usize, cell: usize, cells: usize) -> f64 {
    let c = cell as f64;
    (0..cells)
        .map(|i| {
            let center = i as f64 * c + (c - 1.0) / 2.0;
            (1.0 - (pos as f64 - center).abs() / c).max(0.0)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_zero() {
        let img = Image::gray(16, 16, vec![0.7; 256]).unwrap();
        let d = hog_reference(&img, &HogConfig::default()).unwrap();
        assert!(d.grid.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn interior_vote_mass_is_one() {
        for &c in &[2usize, 4, 8] {
            let cells = 6;
            let first = c / 2;
            let last = (cells - 1) * c + c / 2 - 1;
            for p in first..=last {
                assert!((spatial_vote_mass(p, c, cells) - 1.0).abs() < 1e-12);
            }
        }
    }
}
