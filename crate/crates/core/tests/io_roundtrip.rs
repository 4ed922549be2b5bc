use dhog::io::{self, decode_descriptor, decode_image, encode_descriptor, encode_png, quantize};
use dhog::{hog, Error, HogConfig, Image};
use proptest::prelude::*;

fn gradient_image(w: usize, h: usize, channels: usize) -> Image {
    let data = (0..w * h * channels).map(|i| (i % 251) as f64 / 250.0).collect();
    Image::new(w, h, channels, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn png_round_trip_is_quantized(w in 1usize..20, h in 1usize..20, color in any::<bool>(), seed in any::<u64>()) {
        let channels = if color { 3 } else { 1 };
        let data: Vec<f64> = (0..w * h * channels)
            .map(|i| ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 40) as f64 / (1u64 << 24) as f64)
            .collect();
        let img = Image::new(w, h, channels, data).unwrap();
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        prop_assert_eq!((back.width(), back.height(), back.channels()), (w, h, channels));
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert_eq!(quantize(*a) as f64 / 255.0, *b);
        }
    }

    #[test]
    fn descriptor_round_trip_is_exact(cells_y in 1usize..5, cells_x in 1usize..5, signed in any::<bool>()) {
        let cfg = if signed { HogConfig::signed() } else { HogConfig::default() }.with_cell(4);
        let img = gradient_image(4 * cells_x, 4 * cells_y, 1);
        let d = hog::extract(&img, &cfg).unwrap();
        let back = decode_descriptor(&encode_descriptor(&d)).unwrap();
        prop_assert_eq!(back.dims(), d.dims());
        prop_assert_eq!((back.config.cell, back.config.orientation), (d.config.cell, d.config.orientation));
        for (a, b) in d.grid.data().iter().zip(back.grid.data()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_image(24, 16, 3);
    let path = dir.path().join("a.png");
    io::save_image(&img, &path).unwrap();
    let back = io::load_image(&path).unwrap();
    assert_eq!(back.channels(), 3);

    let d = hog::extract(&back, &HogConfig::default()).unwrap();
    let dpath = dir.path().join("a.ghog");
    io::write_descriptor(&d, &dpath).unwrap();
    assert_eq!(io::read_descriptor(&dpath).unwrap().grid, io::decode_descriptor(&encode_descriptor(&d)).unwrap().grid);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 2, "atomic writes leave no temporaries");
}

#[test]
fn corrupt_descriptors_are_rejected() {
    let d = hog::extract(&gradient_image(16, 16, 1), &HogConfig::default()).unwrap();
    let bytes = encode_descriptor(&d);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_descriptor(&bad), Err(Error::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(matches!(decode_descriptor(&bad), Err(Error::VersionMismatch(_))));

    assert!(matches!(decode_descriptor(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
}
