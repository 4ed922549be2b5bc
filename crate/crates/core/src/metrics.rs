//! Reconstruction quality metrics: Pearson cross-correlation, histogram
//! mutual information, and SSIM.

use crate::error::{Error, Result};
use crate::io::Image;

pub const DEFAULT_MI_BINS: usize = 32;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// Pearson (zero-mean) correlation.
    pub cross_correlation: f64,
    /// `Σab / sqrt(Σa² Σb²)` without mean removal.
    pub cross_correlation_raw: f64,
    /// Bits.
    pub mutual_information: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            cross_correlation: avg(|r| r.cross_correlation),
            cross_correlation_raw: avg(|r| r.cross_correlation_raw),
            mutual_information: avg(|r| r.mutual_information),
            ssim: avg(|r| r.ssim),
        })
    }
}

fn gray_pair<'a>(a: &'a Image, b: &'a Image) -> Result<(std::borrow::Cow<'a, [f64]>, std::borrow::Cow<'a, [f64]>)> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let g = |img: &'a Image| -> std::borrow::Cow<'a, [f64]> {
        if img.channels() == 1 {
            img.data().into()
        } else {
            img.to_gray().data().to_vec().into()
        }
    };
    Ok((g(a), g(b)))
}

/// Evaluates all metrics on a pair of images (RGB inputs are converted to gray).
pub fn evaluate(a: &Image, b: &Image, mi_bins: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        cross_correlation: cross_correlation(a, b)?,
        cross_correlation_raw: cross_correlation_raw(a, b)?,
        mutual_information: mutual_information(a, b, mi_bins)?,
        ssim: ssim(a, b)?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation of pixel intensities. When either image is constant
/// the result is 1 if both are the same constant and 0 otherwise.
pub fn cross_correlation(a: &Image, b: &Image) -> Result<f64> {
    let (a, b) = gray_pair(a, b)?;
    let (ma, mb) = (mean(&a), mean(&b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let n = a.len() as f64;
    let (sa, sb) = ((va / n).sqrt(), (vb / n).sqrt());
    if sa < 1e-12 || sb < 1e-12 {
        let same = sa < 1e-12 && sb < 1e-12 && (ma - mb).abs() < 1e-12;
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cross_correlation_raw(a: &Image, b: &Image) -> Result<f64> {
    let (a, b) = gray_pair(a, b)?;
    let ab: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return Ok(if aa == bb { 1.0 } else { 0.0 });
    }
    Ok(ab / (aa * bb).sqrt())
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Shannon entropy (bits) of the intensity histogram with `bins` uniform bins over [0, 1].
pub fn entropy(a: &Image, bins: usize) -> f64 {
    let g = a.to_gray();
    let mut hist = vec![0usize; bins.max(1)];
    for &v in g.data() {
        hist[bin_of(v, bins.max(1))] += 1;
    }
    let n = g.data().len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mutual information (bits) of the joint `bins × bins` intensity histogram.
pub fn mutual_information(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::config("mutual information needs at least one bin"));
    }
    let (a, b) = gray_pair(a, b)?;
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (x, y) in a.iter().zip(b.iter()) {
        let (i, j) = (bin_of(*x, bins), bin_of(*y, bins));
        joint[i * bins + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            let px = pa[i] as f64 / n;
            let py = pb[j] as f64 / n;
            mi += pxy * (pxy / (px * py)).log2();
        }
    }
    Ok(mi.max(0.0))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h − k + 1) × (w − k + 1)`.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|t| win[t] * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| win[t] * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5),
/// with K1 = 0.01, K2 = 0.03 and dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (a, b) = gray_pair(a, b)?;
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&a, h, w, &win);
    let mu_b = filter_valid(&b, h, w, &win);
    let e_aa = filter_valid(&aa, h, w, &win);
    let e_bb = filter_valid(&bb, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::gray(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn smooth(w: usize, h: usize) -> Image {
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                0.5 + 0.3 * (x * 0.2).sin() * (y * 0.15).cos()
            })
            .collect();
        Image::gray(w, h, data).unwrap()
    }

    fn map(img: &Image, f: impl Fn(f64) -> f64) -> Image {
        Image::gray(img.width(), img.height(), img.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    #[test]
    fn cross_correlation_examples() {
        let i = smooth(32, 32);
        assert!((cross_correlation(&i, &i).unwrap() - 1.0).abs() < 1e-12);
        let neg = map(&i, |v| 1.0 - v);
        assert!((cross_correlation(&i, &neg).unwrap() + 1.0).abs() < 1e-12);
        let shifted = map(&i, |v| v + 0.1);
        assert!((cross_correlation(&i, &shifted).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::gray(32, 32, vec![0.5; 1024]).unwrap();
        assert_eq!(cross_correlation(&c, &c).unwrap(), 1.0);
        assert_eq!(cross_correlation(&i, &c).unwrap(), 0.0);
    }

    #[test]
    fn mutual_information_examples() {
        let i = noise(32, 32, 1);
        let h = entropy(&i, 32);
        assert!((mutual_information(&i, &i, 32).unwrap() - h).abs() < 1e-12);
        let c = Image::gray(32, 32, vec![0.3; 1024]).unwrap();
        assert_eq!(mutual_information(&i, &c, 32).unwrap(), 0.0);
        let j = noise(32, 32, 2);
        let ab = mutual_information(&i, &j, 32).unwrap();
        let ba = mutual_information(&j, &i, 32).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let i = smooth(40, 40);
        assert!((ssim(&i, &i).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::gray(16, 16, vec![0.5; 256]).unwrap();
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let mut last = 1.0;
        for (k, amp) in [0.01, 0.05, 0.1].iter().enumerate() {
            let n = noise(40, 40, 10 + k as u64);
            let noisy = Image::gray(
                40,
                40,
                i.data().iter().zip(n.data()).map(|(v, r)| (v + amp * (2.0 * r - 1.0)).clamp(0.0, 1.0)).collect(),
            )
            .unwrap();
            let s = ssim(&i, &noisy).unwrap();
            assert!(s < last);
            last = s;
        }
        let small = Image::gray(10, 10, vec![0.0; 100]).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let a = noise(16, 16, 1);
        let b = noise(16, 12, 1);
        assert!(evaluate(&a, &b, 32).is_err());
    }
}
