use dhog::align::{synthesize_patch, Pose2D};
use dhog::hog::{self, orientation_filters, spatial_binning};
use dhog::metrics;
use dhog::preimage::{self, OptimizerConfig};
use dhog::{HogConfig, Image, Orientation, Tape, Tensor};
use proptest::prelude::*;

fn orientation_mass(theta: &[f64], cfg: &HogConfig) -> Vec<f64> {
    let n = theta.len();
    let mut tape = Tape::new();
    let mag = tape.input(Tensor::new(&[1, n], vec![1.0; n]).unwrap());
    let th = tape.input(Tensor::new(&[1, n], theta.to_vec()).unwrap());
    let channels = orientation_filters(&mut tape, mag, th, cfg).unwrap();
    let mut total = vec![0.0; n];
    for ch in channels {
        for (t, v) in total.iter_mut().zip(tape.value(ch).data()) {
            *t += v;
        }
    }
    total
}

/// Total descriptor mass produced by a unit impulse at `(y, x)`.
fn spatial_mass(h: usize, w: usize, y: usize, x: usize, cfg: &HogConfig) -> f64 {
    let mut data = vec![0.0; h * w];
    data[y * w + x] = 1.0;
    let mut tape = Tape::new();
    let ch = tape.input(Tensor::new(&[h, w], data).unwrap());
    let grid = spatial_binning(&mut tape, &[ch], cfg).unwrap();
    tape.value(grid).data().iter().sum()
}

fn image(w: usize, h: usize, data: Vec<f64>) -> Image {
    Image::gray(w, h, data).unwrap()
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn orientation_weights_sum_to_one(theta in 0.0..180.0f64, signed in any::<bool>(), bins in 2usize..24) {
        let mut cfg = if signed { HogConfig::signed() } else { HogConfig::default() };
        cfg.bins = bins;
        let theta = if cfg.orientation == Orientation::Signed { theta * 2.0 } else { theta };
        let mass = orientation_mass(&[theta], &cfg)[0];
        prop_assert!((mass - 1.0).abs() < 1e-12, "mass {mass}");
    }

    #[test]
    fn interior_spatial_mass_is_one(half in 1usize..5, dy in 0usize..64, dx in 0usize..64) {
        let cell = 2 * half;
        let cfg = HogConfig::default().with_cell(cell);
        let (h, w) = (4 * cell, 5 * cell);
        // interior: between the first and last cell centers
        let y = cell / 2 + dy % (3 * cell);
        let x = cell / 2 + dx % (4 * cell);
        prop_assert!((spatial_mass(h, w, y, x, &cfg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric(a in pixels(16 * 16), b in pixels(16 * 16)) {
        let (a, b) = (image(16, 16, a), image(16, 16, b));
        let ab = metrics::evaluate(&a, &b, 32).unwrap();
        let ba = metrics::evaluate(&b, &a, 32).unwrap();
        prop_assert!((ab.cross_correlation - ba.cross_correlation).abs() < 1e-12);
        prop_assert!((ab.cross_correlation_raw - ba.cross_correlation_raw).abs() < 1e-12);
        prop_assert!((ab.mutual_information - ba.mutual_information).abs() < 1e-12);
        prop_assert!((ab.ssim - ba.ssim).abs() < 1e-12);
    }

    #[test]
    fn self_metrics_are_maximal(a in pixels(16 * 16)) {
        let a = image(16, 16, a);
        prop_assert!((metrics::cross_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_is_periodic(tx in -4.0..4.0f64, ty in -4.0..4.0f64, r in -180.0..180.0f64, sigma in -0.3..0.3f64, k in -2i32..=2) {
        let tpl = image(24, 24, (0..576).map(|i| ((i * 37) % 101) as f64 / 100.0).collect());
        let a = synthesize_patch(&tpl, Pose2D::new(tx, ty, r, sigma), (16, 16)).unwrap();
        let b = synthesize_patch(&tpl, Pose2D::new(tx, ty, r + 360.0 * k as f64, sigma), (16, 16)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn descent_keeps_pixels_in_range(start in pixels(16 * 16), target in pixels(16 * 16), step in 1e-3..1.0f64) {
        let cfg = HogConfig::default().with_cell(4);
        let target = hog::extract(&image(16, 16, target), &cfg).unwrap();
        let opt = OptimizerConfig { step, max_iters: 5, ..OptimizerConfig::default() };
        let start = Tensor::new(&[16, 16], start).unwrap();
        let out = preimage::minimize(&start, &target, &cfg, 0.1, &opt, 1).unwrap();
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn returns_the_best_iterate() {
    let cfg = HogConfig::default().with_cell(4);
    let src: Vec<f64> = (0..256).map(|i| ((i % 16) as f64 / 15.0).powi(2)).collect();
    let target = hog::extract(&image(16, 16, src), &cfg).unwrap();
    let start = preimage::initial_image(preimage::Init::Noise { seed: 3 }, 16, 16);
    // large step so that some iterations overshoot
    let opt = OptimizerConfig { step: 0.5, max_iters: 40, ..OptimizerConfig::default() };
    let out = preimage::minimize(&start, &target, &cfg, 0.02, &opt, 1).unwrap();
    let best = out.trace.iter().map(|r| r.e).fold(f64::INFINITY, f64::min);

    let mut tape = Tape::new();
    let x = tape.input(out.image.clone());
    let nodes = preimage::objective(&mut tape, x, &target, &cfg, 0.02).unwrap();
    assert_eq!(tape.value(nodes.total).item(), best);
}
