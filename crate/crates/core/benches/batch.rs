use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dhog::align::{self, AlignOptions, AlignmentProblem, Pose2D};
use dhog::{hog, io, metrics, parallel, HogConfig, Image};

fn suite() -> Vec<Image> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/suite");
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .expect("suite directory")
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths.iter().map(|p| io::load_image(p).unwrap().to_gray()).collect()
}

// threads = 1 is the sequential path; 0 uses one rayon worker per core.
const MODES: [(&str, usize); 2] = [("serial", 1), ("parallel", 0)];

fn batch_extract(c: &mut Criterion) {
    let images = suite();
    let cfg = HogConfig::default();
    let mut group = c.benchmark_group("batch_extract");
    group.sample_size(10);
    for (name, threads) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| parallel::map(&images, t, |img| hog::extract(img, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn suite_metrics(c: &mut Criterion) {
    let images = suite();
    let pairs: Vec<(&Image, &Image)> = images.iter().zip(images.iter().rev()).collect();
    let mut group = c.benchmark_group("suite_metrics");
    group.sample_size(10);
    for (name, threads) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| parallel::map(&pairs, t, |(x, y)| metrics::evaluate(x, y, 32).unwrap()))
        });
    }
    group.finish();
}

fn pose_restarts(c: &mut Criterion) {
    let template = suite().swap_remove(2);
    let patch = align::synthesize_patch(&template, Pose2D::new(2.0, -1.0, 20.0, 0.05), (64, 64)).unwrap();
    let problem = AlignmentProblem::new(&template, &patch, HogConfig::default(), 4).unwrap();
    let mut group = c.benchmark_group("pose_restarts");
    group.sample_size(10);
    for (name, threads) in MODES {
        let opts = AlignOptions { max_iters: 15, threads, ..AlignOptions::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, o| {
            b.iter(|| align::estimate_pose(&problem, o))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_extract, suite_metrics, pose_restarts);
criterion_main!(benches);
