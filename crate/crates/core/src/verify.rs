//! Gradient-check suites over the primitives, the HOG map, the
//! reconstruction objective and the pose similarity.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{self, AlignmentProblem, Pose2D};
use crate::autodiff::{gradcheck, GradcheckOptions, GradcheckReport, Kernel, Tape, Var};
use crate::error::{Error, Result};
use crate::hog::{self, HogConfig, HogDescriptor};
use crate::io::Image;
use crate::preimage;
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Pose coordinates are probed with this fraction of the configured step.
/// A pose change moves every warp sample at once, so a full-size step would
/// push some sample across a bilinear cell edge on almost every probe.
pub const POSE_STEP_FACTOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Primitives,
    Hog,
    Objective,
    Pose,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] = [CheckTarget::Primitives, CheckTarget::Hog, CheckTarget::Objective, CheckTarget::Pose];
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(CheckTarget::Primitives),
            "hog" => Ok(CheckTarget::Hog),
            "objective" => Ok(CheckTarget::Objective),
            "pose" => Ok(CheckTarget::Pose),
            other => Err(Error::config(format!("unknown gradcheck target {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Random instances per composite target.
    pub trials: usize,
    pub step: f64,
    /// Coordinates probed per instance.
    pub coords: usize,
    pub seed: u64,
    /// See [`GradcheckOptions::analytic_scale`].
    pub analytic_scale: f64,
    /// Image extent of the composite targets.
    pub size: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            trials: 3,
            step: 1e-5,
            coords: 64,
            seed: 0,
            analytic_scale: 1.0,
            size: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradcheckReport,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADCHECK_TOL) && self.report.checked > 0
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Random image with structure at several scales, in `[0.05, 0.95]`.
pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let coarse = uniform(rng, &[size / 8, size / 8], 0.0, 1.0);
    let fine = uniform(rng, &[size, size], -1.0, 1.0);
    let mut tape = Tape::new();
    let c = tape.input(coarse);
    let up = tape.resize_bilinear(c, size, size).expect("valid extents");
    let mut out = tape.value(up).clone();
    for (o, f) in out.data_mut().iter_mut().zip(fine.data()) {
        *o = (0.15 + 0.7 * *o + 0.1 * f).clamp(0.05, 0.95);
    }
    out
}

type Builder = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Contracts a node with fixed weights so any shape becomes a scalar.
fn contract(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.input(weights.clone());
    tape.dot(v, w)
}

fn with_weights<F>(shape: &[usize], rng: &mut ChaCha8Rng, op: F) -> Builder
where
    F: Fn(&mut Tape, Var) -> Result<Var> + 'static,
{
    let w = uniform(rng, shape, -1.0, 1.0);
    Box::new(move |t, x| {
        let y = op(t, x)?;
        contract(t, y, &w)
    })
}

/// Rows 0 and 1 of a `(2, n)` input as two `(1, n)` operands.
fn split(t: &mut Tape, x: Var, n: usize) -> Result<(Var, Var)> {
    let cols: Vec<usize> = (0..n).collect();
    Ok((t.subsample(x, &[0], &cols)?, t.subsample(x, &[1], &cols)?))
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, Tensor, Builder)>> {
    let n = 12;
    let pair = |rng: &mut ChaCha8Rng| uniform(rng, &[2, n], -1.0, 1.0);
    let k3 = Kernel::new(3, 3, uniform(rng, &[9], -1.0, 1.0).into_data())?;
    let k4 = Kernel::new(4, 4, uniform(rng, &[16], -1.0, 1.0).into_data())?;
    let ks = Kernel::separable(uniform(rng, &[4], 0.0, 1.0).into_data(), uniform(rng, &[6], 0.0, 1.0).into_data())?;
    let conv = |k: Arc<Kernel>, rng: &mut ChaCha8Rng| with_weights(&[7, 8], rng, move |t, x| t.conv2d_same(x, &k));
    let pose = Pose2D::new(0.7, -0.4, 23.0, 0.12).to_tensor();
    let image = uniform(rng, &[12, 12], 0.0, 1.0);

    let cases: Vec<(&'static str, Tensor, Builder)> = vec![
        ("pow2", uniform(rng, &[3, 4], -1.0, 1.0), with_weights(&[3, 4], rng, |t, x| t.pow2(x))),
        ("sqrt", uniform(rng, &[3, 4], 0.5, 1.5), with_weights(&[3, 4], rng, |t, x| t.sqrt(x))),
        ("abs", uniform(rng, &[3, 4], -1.0, 1.0), with_weights(&[3, 4], rng, |t, x| t.abs(x))),
        ("clip", uniform(rng, &[3, 4], -1.0, 1.0), with_weights(&[3, 4], rng, |t, x| t.clip(x, -0.5, 0.5))),
        ("wrap", uniform(rng, &[3, 4], -400.0, 400.0), with_weights(&[3, 4], rng, |t, x| t.wrap(x, 180.0))),
        ("affine", uniform(rng, &[3, 4], -1.0, 1.0), with_weights(&[3, 4], rng, |t, x| t.affine(x, -2.5, 0.3))),
        ("add", pair(rng), with_weights(&[1, n], rng, move |t, x| {
            let (a, b) = split(t, x, n)?;
            t.add(a, b)
        })),
        ("sub", pair(rng), with_weights(&[1, n], rng, move |t, x| {
            let (a, b) = split(t, x, n)?;
            t.sub(a, b)
        })),
        ("mul", pair(rng), with_weights(&[1, n], rng, move |t, x| {
            let (a, b) = split(t, x, n)?;
            t.mul(a, b)
        })),
        ("div", pair(rng), with_weights(&[1, n], rng, move |t, x| {
            let (a, b) = split(t, x, n)?;
            let b = t.affine(b, 1.0, 3.0)?;
            t.div(a, b)
        })),
        ("div_scalar", uniform(rng, &[3, 4], -1.0, 1.0), with_weights(&[3, 4], rng, |t, x| {
            let n = t.l2norm(x)?;
            t.div(x, n)
        })),
        ("atan2", pair(rng), with_weights(&[1, n], rng, move |t, x| {
            let (a, b) = split(t, x, n)?;
            t.atan2(a, b)
        })),
        ("conv2d_same_3x3", uniform(rng, &[7, 8], -1.0, 1.0), conv(k3, rng)),
        ("conv2d_same_4x4", uniform(rng, &[7, 8], -1.0, 1.0), conv(k4, rng)),
        ("conv2d_same_separable", uniform(rng, &[7, 8], -1.0, 1.0), conv(ks, rng)),
        ("subsample", uniform(rng, &[6, 7], -1.0, 1.0), with_weights(&[2, 3], rng, |t, x| t.subsample(x, &[1, 4], &[0, 3, 6]))),
        ("resize_bilinear", uniform(rng, &[6, 7], -1.0, 1.0), with_weights(&[9, 5], rng, |t, x| t.resize_bilinear(x, 9, 5))),
        ("warp_bilinear_image", image.clone(), {
            let pose = pose.clone();
            with_weights(&[8, 8], rng, move |t, x| {
                let p = t.input(pose.clone());
                t.warp_bilinear(x, p, 8, 8)
            })
        }),
        ("warp_bilinear_pose", pose, {
            let image = image.clone();
            with_weights(&[8, 8], rng, move |t, x| {
                let img = t.input(image.clone());
                t.warp_bilinear(img, x, 8, 8)
            })
        }),
        ("channel_stack", uniform(rng, &[4, 5, 3], -1.0, 1.0), with_weights(&[4, 5, 2], rng, |t, x| {
            let a = t.channel(x, 2)?;
            let b = t.channel(x, 0)?;
            let b = t.pow2(b)?;
            t.stack(&[a, b])
        })),
        ("sum", uniform(rng, &[3, 4], -1.0, 1.0), Box::new(|t: &mut Tape, x: Var| {
            let y = t.pow2(x)?;
            t.sum(y)
        })),
        ("dot", uniform(rng, &[3, 4], -1.0, 1.0), Box::new(|t: &mut Tape, x: Var| {
            let y = t.affine(x, 2.0, 1.0)?;
            t.dot(x, y)
        })),
        ("l2norm", uniform(rng, &[3, 4], -1.0, 1.0), Box::new(|t: &mut Tape, x: Var| t.l2norm(x))),
    ];
    Ok(cases)
}

fn gc_options(opts: &CheckOptions, seed: u64, step: f64) -> GradcheckOptions {
    GradcheckOptions {
        step,
        coords: opts.coords,
        seed,
        analytic_scale: opts.analytic_scale,
    }
}

/// Runs one suite; every entry carries its own report.
pub fn run(target: CheckTarget, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    if opts.trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    if opts.size < 16 || opts.size % 8 != 0 {
        return Err(Error::config("check image size must be a multiple of 8, at least 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    match target {
        CheckTarget::Primitives => {
            for (i, (name, x, f)) in primitive_cases(&mut rng)?.into_iter().enumerate() {
                let report = gradcheck(f, &x, &gc_options(opts, opts.seed + i as u64, opts.step))?;
                out.push(CheckResult {
                    name: name.to_string(),
                    report,
                });
            }
        }
        CheckTarget::Hog => {
            for trial in 0..opts.trials {
                for (label, cfg) in [("unsigned", HogConfig::default()), ("signed", HogConfig::signed())] {
                    let x = random_image(&mut rng, opts.size);
                    let w = uniform(&mut rng, &hog_shape(&cfg, opts.size), -1.0, 1.0);
                    let f = move |t: &mut Tape, x: Var| {
                        let phi = hog::hog_forward(t, x, &cfg)?;
                        contract(t, phi, &w)
                    };
                    let report = gradcheck(f, &x, &gc_options(opts, opts.seed + trial as u64, opts.step))?;
                    out.push(CheckResult {
                        name: format!("hog_{label}[{trial}]"),
                        report,
                    });
                }
            }
        }
        CheckTarget::Objective => {
            for trial in 0..opts.trials {
                let cfg = HogConfig::default();
                let source = random_image(&mut rng, opts.size);
                let target = hog::extract_tensor(&source, &cfg)?;
                let x = random_image(&mut rng, opts.size);
                // At ξ = 1e2 the smoothness sum dwarfs the net gradient and
                // rounding swamps any central difference.
                for xi in [1e-2, 1e-1] {
                    let target: HogDescriptor = target.clone();
                    let f = move |t: &mut Tape, x: Var| Ok(preimage::objective(t, x, &target, &cfg, xi)?.total);
                    let report = gradcheck(f, &x, &gc_options(opts, opts.seed + trial as u64, opts.step))?;
                    out.push(CheckResult {
                        name: format!("objective_xi{xi:e}[{trial}]"),
                        report,
                    });
                }
            }
        }
        CheckTarget::Pose => {
            let cfg = HogConfig::default();
            let template = Image::from_tensor(&random_image(&mut rng, opts.size))?;
            let patch_extent = opts.size / 2;
            let patch = align::synthesize_patch(&template, Pose2D::IDENTITY, (patch_extent, patch_extent))?;
            let problem = Arc::new(AlignmentProblem::new(&template, &patch, cfg, 1)?);
            for trial in 0..opts.trials {
                let pose = Pose2D::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-180.0..180.0),
                    rng.gen_range(-0.15..0.15),
                );
                let problem = problem.clone();
                let f = move |t: &mut Tape, p: Var| {
                    let img = t.input(problem.template.to_tensor());
                    align::similarity(t, img, p, &problem)
                };
                let report = gradcheck(
                    f,
                    &pose.to_tensor(),
                    &gc_options(opts, opts.seed + trial as u64, opts.step * POSE_STEP_FACTOR),
                )?;
                out.push(CheckResult {
                    name: format!("pose[{trial}]"),
                    report,
                });
            }
        }
    }
    Ok(out)
}

fn hog_shape(cfg: &HogConfig, size: usize) -> Vec<usize> {
    vec![size / cfg.cell, size / cfg.cell, cfg.bins]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let results = run(CheckTarget::Primitives, &CheckOptions::default()).unwrap();
        for r in &results {
            assert!(r.passes(), "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn injected_fault_fails() {
        let opts = CheckOptions {
            analytic_scale: 1.01,
            ..Default::default()
        };
        let results = run(CheckTarget::Primitives, &opts).unwrap();
        assert!(results.iter().any(|r| !r.passes()));
    }

    #[test]
    fn parses_targets() {
        assert_eq!("pose".parse::<CheckTarget>().unwrap(), CheckTarget::Pose);
        assert!("everything".parse::<CheckTarget>().is_err());
    }
}
