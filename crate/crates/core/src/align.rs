//! Pose alignment by maximizing HOG similarity.
//!
//! A template image is warped by a 2D similarity transform, described, and
//! compared with the descriptor of an observed patch by dot product. The
//! pose is found by momentum gradient ascent from several rotations.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hog::{self, HogConfig, HogDescriptor};
use crate::io::Image;
use crate::parallel;
use crate::tensor::Tensor;

/// Translation in pixels, rotation in degrees and log-scale (`scale = e^σ`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2D {
    pub tx: f64,
    pub ty: f64,
    pub r: f64,
    pub sigma: f64,
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D {
        tx: 0.0,
        ty: 0.0,
        r: 0.0,
        sigma: 0.0,
    };

    pub fn new(tx: f64, ty: f64, r: f64, sigma: f64) -> Self {
        Pose2D { tx, ty, r, sigma }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.r, self.sigma]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Pose2D::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_tensor(self) -> Tensor {
        Tensor::from_vec(self.to_array().to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Same pose with `r` folded into `[0, 360)`.
    pub fn canonical(self) -> Self {
        let r = self.r.rem_euclid(360.0);
        Pose2D {
            r: if r >= 360.0 { 0.0 } else { r },
            ..self
        }
    }

    pub fn get(&self, p: PoseParam) -> f64 {
        self.to_array()[p as usize]
    }

    pub fn with(self, p: PoseParam, value: f64) -> Self {
        let mut a = self.to_array();
        a[p as usize] = value;
        Pose2D::from_array(a)
    }
}

/// Smallest absolute difference between two angles in degrees.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseParam {
    Tx = 0,
    Ty = 1,
    R = 2,
    Sigma = 3,
}

impl std::str::FromStr for PoseParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tx" => Ok(PoseParam::Tx),
            "ty" => Ok(PoseParam::Ty),
            "r" => Ok(PoseParam::R),
            "sigma" | "σ" => Ok(PoseParam::Sigma),
            other => Err(Error::config(format!("unknown pose parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentProblem {
    /// Grayscale template the warp samples from.
    pub template: Image,
    /// Descriptor of the observed patch.
    pub target: HogDescriptor,
    pub config: HogConfig,
    /// Patch extents `(height, width)`.
    pub patch: (usize, usize),
    pub restarts: usize,
    /// Initial pose the restarts are spread around.
    pub seed_pose: Pose2D,
}

impl AlignmentProblem {
    /// Problem whose target is the descriptor of `patch`.
    pub fn new(template: &Image, patch: &Image, config: HogConfig, restarts: usize) -> Result<Self> {
        let target = hog::extract(patch, &config)?;
        let problem = AlignmentProblem {
            template: template.to_gray(),
            target,
            config,
            patch: (patch.height(), patch.width()),
            restarts,
            seed_pose: Pose2D::IDENTITY,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (rows, cols) = self.config.grid(self.patch.0, self.patch.1)?;
        if self.target.dims() != (rows, cols, self.config.bins) {
            return Err(Error::config(format!(
                "target descriptor {:?} does not match a {}x{} patch",
                self.target.dims(),
                self.patch.0,
                self.patch.1
            )));
        }
        if self.restarts == 0 {
            return Err(Error::config("at least one restart is required"));
        }
        if !self.seed_pose.is_finite() {
            return Err(Error::config("seed pose must be finite"));
        }
        Ok(())
    }

    /// Characteristic radius used to put the four parameters on a common
    /// pixel-displacement scale.
    fn radius(&self) -> f64 {
        self.patch.0.min(self.patch.1) as f64 / 2.0
    }

    /// Pixel displacement per unit of each parameter.
    fn units(&self) -> [f64; 4] {
        let r = self.radius();
        [1.0, 1.0, r * PI / 180.0, r]
    }
}

/// Records `S = φ(warp(template, pose)) · target` on the tape.
pub fn similarity(tape: &mut Tape, template: Var, pose: Var, problem: &AlignmentProblem) -> Result<Var> {
    let warped = tape.warp_bilinear(template, pose, problem.patch.0, problem.patch.1)?;
    let phi = hog::hog_forward(tape, warped, &problem.config)?;
    let target = tape.input(problem.target.grid.clone());
    tape.dot(phi, target)
}

/// `S` and `dS/dpose` at `pose`.
pub fn evaluate(problem: &AlignmentProblem, pose: Pose2D) -> Result<(f64, [f64; 4])> {
    let mut tape = Tape::new();
    let template = tape.input(problem.template.to_tensor());
    let p = tape.input(pose.to_tensor());
    let s = similarity(&mut tape, template, p, problem)?;
    tape.backward(s)?;
    let g = tape.grad(p).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; 4]);
    Ok((tape.value(s).item(), [g[0], g[1], g[2], g[3]]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub s: f64,
    pub ds: f64,
}

/// `S` and its analytic derivative along one parameter, others fixed at `base`.
pub fn sweep(problem: &AlignmentProblem, param: PoseParam, base: Pose2D, grid: &[f64], threads: usize) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    parallel::map(grid, threads, |&value| {
        let (s, g) = evaluate(problem, base.with(param, value))?;
        Ok(SweepRow {
            value,
            s,
            ds: g[param as usize],
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignOptions {
    /// Ascent step in pixel-displacement units per unit of normalized gradient.
    pub step: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Iterations on `(tx, ty, r)` per block.
    pub pose_block: usize,
    /// Iterations on `σ` alone following every pose block.
    pub scale_block: usize,
    /// Largest update per iteration, in pixel-displacement units.
    pub max_step: f64,
    /// Stop when the best S improved by less than this fraction over
    /// `window_cycles` full block cycles.
    pub tol: f64,
    pub window_cycles: usize,
    pub threads: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            step: 12.0,
            momentum: 0.9,
            max_iters: 150,
            pose_block: 10,
            scale_block: 5,
            max_step: 1.0,
            tol: 1e-7,
            window_cycles: 3,
            threads: 1,
        }
    }
}

impl AlignOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.max_step > 0.0) {
            return Err(Error::config("step sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.pose_block == 0 {
            return Err(Error::config("pose block must be at least one iteration"));
        }
        if !(self.tol > 0.0) || self.window_cycles == 0 {
            return Err(Error::config("tolerance and window must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignTraceRow {
    pub iteration: usize,
    pub s: f64,
    pub pose: Pose2D,
}

#[derive(Debug, Clone)]
pub struct RestartResult {
    pub start: Pose2D,
    pub best: Pose2D,
    pub best_s: f64,
    pub trace: Vec<AlignTraceRow>,
    /// Left the finite, bounded pose region.
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: Pose2D,
    pub s: f64,
    pub restart: usize,
    pub restarts: Vec<RestartResult>,
}

/// Starting poses: rotations spread evenly over 360° around the seed pose.
pub fn restart_poses(problem: &AlignmentProblem) -> Vec<Pose2D> {
    let n = problem.restarts;
    (0..n)
        .map(|k| Pose2D {
            r: problem.seed_pose.r + k as f64 * 360.0 / n as f64,
            ..problem.seed_pose
        })
        .collect()
}

fn in_bounds(problem: &AlignmentProblem, p: &Pose2D) -> bool {
    let limit = problem.patch.0.max(problem.patch.1) as f64;
    p.is_finite() && p.tx.abs() <= limit && p.ty.abs() <= limit && p.sigma.abs() <= 3.0
}

/// Momentum ascent from one start. Updates alternate between blocks on
/// `(tx, ty, r)` and blocks on `σ` alone.
pub fn ascend(problem: &AlignmentProblem, start: Pose2D, opts: &AlignOptions) -> Result<RestartResult> {
    let units = problem.units();
    let scale = problem.target.dot(&problem.target).max(f64::MIN_POSITIVE);
    let cycle = opts.pose_block + opts.scale_block;
    let window = cycle * opts.window_cycles;
    let mut pose = start;
    let mut velocity = [0.0; 4];
    let mut best = (f64::NEG_INFINITY, start);
    let mut best_values = Vec::new();
    let mut trace = Vec::new();
    let mut diverged = false;

    for k in 0..=opts.max_iters {
        let (s, g) = match evaluate(problem, pose) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(AlignTraceRow {
            iteration: k,
            s,
            pose: pose.canonical(),
        });
        if s > best.0 {
            best = (s, pose);
        }
        best_values.push(best.0);
        if k == opts.max_iters {
            break;
        }
        if best_values.len() > window {
            let then = best_values[best_values.len() - 1 - window];
            if (best.0 - then).abs() <= opts.tol * then.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let in_scale_block = k % cycle >= opts.pose_block;
        let active = |i: usize| if in_scale_block { i == 3 } else { i < 3 };
        // gradient with respect to pixel-displacement units, S normalized
        let mut delta = [0.0; 4];
        for i in 0..4 {
            if active(i) {
                velocity[i] = opts.momentum * velocity[i] + opts.step * g[i] / (units[i] * scale);
                delta[i] = velocity[i];
            }
        }
        let len = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if len > opts.max_step {
            let f = opts.max_step / len;
            for i in 0..4 {
                if active(i) {
                    velocity[i] *= f;
                    delta[i] *= f;
                }
            }
        }
        let mut next = pose.to_array();
        for i in 0..4 {
            next[i] += delta[i] / units[i];
        }
        pose = Pose2D::from_array(next);
        if !in_bounds(problem, &pose) {
            diverged = true;
            break;
        }
    }
    Ok(RestartResult {
        start,
        best: best.1.canonical(),
        best_s: best.0,
        trace,
        diverged,
    })
}

/// Runs every restart and returns the one with the highest best S; exact
/// ties go to the lowest restart index.
pub fn estimate_pose(problem: &AlignmentProblem, opts: &AlignOptions) -> Result<PoseEstimate> {
    problem.validate()?;
    opts.validate()?;
    let starts = restart_poses(problem);
    let results: Vec<RestartResult> = parallel::map(&starts, opts.threads, |&start| ascend(problem, start, opts))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut winner: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if r.diverged && !r.best_s.is_finite() {
            continue;
        }
        if winner.map_or(true, |w| r.best_s > results[w].best_s) {
            winner = Some(i);
        }
    }
    let all_diverged = results.iter().all(|r| r.diverged);
    match winner {
        Some(w) if !all_diverged => Ok(PoseEstimate {
            pose: results[w].best,
            s: results[w].best_s,
            restart: w,
            restarts: results,
        }),
        _ => Err(Error::AllRestartsDiverged(starts.len())),
    }
}

/// Target patch: `template` warped by `pose` into `patch` extents.
pub fn synthesize_patch(template: &Image, pose: Pose2D, patch: (usize, usize)) -> Result<Image> {
    let mut tape = Tape::new();
    let t = tape.input(template.to_gray().to_tensor());
    let p = tape.input(pose.to_tensor());
    let w = tape.warp_bilinear(t, p, patch.0, patch.1)?;
    Image::from_tensor(tape.value(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(n: usize) -> Image {
        let c = (n as f64 - 1.0) / 2.0;
        let data = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 - c, (i / n) as f64 - c);
                let blob = (-((x - 8.0).powi(2) + (y + 5.0).powi(2)) / 60.0).exp();
                let bar = if (x + 0.5 * y).abs() < 3.0 && y > -10.0 { 0.4 } else { 0.0 };
                (0.2 + 0.6 * blob + bar).clamp(0.0, 1.0)
            })
            .collect();
        Image::gray(n, n, data).unwrap()
    }

    fn problem() -> AlignmentProblem {
        let t = template(64);
        let patch = synthesize_patch(&t, Pose2D::IDENTITY, (32, 32)).unwrap();
        AlignmentProblem::new(&t, &patch, HogConfig::default().with_cell(4), 4).unwrap()
    }

    #[test]
    fn canonical_folds_rotation() {
        assert_eq!(Pose2D::new(0.0, 0.0, -90.0, 0.0).canonical().r, 270.0);
        assert_eq!(Pose2D::new(0.0, 0.0, 720.0, 0.0).canonical().r, 0.0);
        assert!((angle_distance(359.0, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_periodic_in_rotation() {
        let p = problem();
        let (a, _) = evaluate(&p, Pose2D::new(1.0, -0.5, 30.0, 0.05)).unwrap();
        let (b, _) = evaluate(&p, Pose2D::new(1.0, -0.5, 390.0, 0.05)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_template_has_zero_similarity() {
        let t = Image::gray(64, 64, vec![0.5; 64 * 64]).unwrap();
        let mut p = problem();
        p.template = t;
        let (s, _) = evaluate(&p, Pose2D::new(2.0, 1.0, 40.0, 0.1)).unwrap();
        // only the magnitude guard δ contributes
        assert!(s.abs() < 1e-6, "{s}");
    }

    #[test]
    fn restarts_are_evenly_spaced() {
        let mut p = problem();
        p.restarts = 8;
        let r: Vec<f64> = restart_poses(&p).iter().map(|q| q.r).collect();
        assert_eq!(r, vec![0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]);
    }

    #[test]
    fn best_so_far_is_monotone() {
        let p = problem();
        let res = ascend(&p, Pose2D::new(2.0, 1.0, 10.0, 0.0), &AlignOptions::default()).unwrap();
        let mut best = f64::NEG_INFINITY;
        for row in &res.trace {
            best = best.max(row.s);
        }
        assert_eq!(best, res.best_s);
        assert!(res.best_s >= res.trace[0].s);
    }

    #[test]
    fn rejects_bad_problem() {
        let mut p = problem();
        p.restarts = 0;
        assert!(p.validate().is_err());
        let mut p = problem();
        p.patch = (30, 32);
        assert!(p.validate().is_err());
        assert!(sweep(&problem(), PoseParam::R, Pose2D::IDENTITY, &[], 1).is_err());
    }
}
