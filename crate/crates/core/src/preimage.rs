//! Image reconstruction from HOG descriptors.
//!
//! The estimate `Î` minimizes
//!
//! ```text
//! E(Î) = ‖φ(Î) − φ(I)‖ + ξ Σ_{p~q} sqrt((i_p − i_q)² + δ²)
//! ```
//!
//! over 4-neighbour pairs `p~q`, either directly at full resolution or along
//! a coarse-to-fine ladder of scales `s ∈ {64, 16, 4, 1}`. At scale `s` the
//! estimate has `1/√s` of the full extents and the HOG cell shrinks by the
//! same factor, so the cell grid keeps the shape of the full-resolution
//! target.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hog::{self, HogConfig, HogDescriptor};
use crate::io::Image;
use crate::tensor::Tensor;

/// Smoothing of the absolute difference in the smoothness prior.
pub const SMOOTH_DELTA: f64 = 1e-9;

/// Scale ladder of the multi-scale schedules, coarsest first.
pub const SCALES: [u32; 4] = [64, 16, 4, 1];

/// E exceeding this multiple of its initial value aborts the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Single,
    MultiScale,
    MultiScaleMore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    MidGray,
    /// Uniform noise in `[0.4, 0.6]`.
    Noise { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MomentumGd,
    Dogleg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Momentum-GD step size η.
    pub step: f64,
    /// Momentum β.
    pub momentum: f64,
    /// Iteration cap per stage.
    pub max_iters: usize,
    /// Stop when the best E improved by less than this fraction over
    /// `window` iterations.
    pub tol: f64,
    pub window: usize,
    /// Decay ξ linearly to zero over the iteration cap.
    pub xi_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::MomentumGd,
            step: 1e-3,
            momentum: 0.9,
            max_iters: 300,
            tol: 1e-6,
            window: 10,
            xi_decay: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::config("step size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("convergence window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    /// Target descriptors keyed by scale factor `s`; `Single` and
    /// `MultiScale` use only `s = 1`.
    pub targets: BTreeMap<u32, HogDescriptor>,
    /// Full-resolution descriptor configuration.
    pub config: HogConfig,
    /// Smoothness weight ξ.
    pub xi: f64,
    pub schedule: Schedule,
    pub init: Init,
}

impl ReconstructionProblem {
    /// Single-scale problem for one target, using the target's configuration.
    pub fn new(target: HogDescriptor, xi: f64, schedule: Schedule, init: Init) -> Self {
        let config = target.config;
        let mut targets = BTreeMap::new();
        targets.insert(1, target);
        ReconstructionProblem {
            targets,
            config,
            xi,
            schedule,
            init,
        }
    }

    /// Full-resolution `(height, width)` implied by the `s = 1` target.
    pub fn extents(&self) -> Result<(usize, usize)> {
        let t = self
            .targets
            .get(&1)
            .ok_or_else(|| Error::config("missing full-resolution target (s = 1)"))?;
        let (rows, cols, _) = t.dims();
        Ok((rows * self.config.cell, cols * self.config.cell))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Scale factor `s` of the stage.
    pub stage: u32,
    pub e: f64,
    pub feature: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Image,
    pub trace: Vec<TraceRow>,
    /// Final estimate of every stage, coarsest first.
    pub stages: Vec<(u32, Image)>,
}

/// One rung of the scale ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub scale: u32,
    /// `√s`: the linear downsampling factor.
    pub factor: usize,
    pub cell: usize,
    pub height: usize,
    pub width: usize,
}

/// Stages for a full-resolution `height × width` image with cell size `cell`.
/// Rungs whose cell size `cell/√s` would be below 2, odd, or fractional are
/// skipped; the full-resolution rung is always present.
pub fn stage_plan(cell: usize, height: usize, width: usize, schedule: Schedule) -> Vec<Stage> {
    let scales: &[u32] = match schedule {
        Schedule::Single => &[1],
        _ => &SCALES,
    };
    scales
        .iter()
        .filter_map(|&s| {
            let f = (s as f64).sqrt() as usize;
            let ok = s == 1
                || (cell % f == 0 && cell / f >= 2 && (cell / f) % 2 == 0 && height % f == 0 && width % f == 0);
            ok.then(|| Stage {
                scale: s,
                factor: f,
                cell: cell / f,
                height: height / f,
                width: width / f,
            })
        })
        .collect()
}

/// Handles to the pieces of the objective recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub total: Var,
    pub feature: Var,
    pub smoothness: Var,
}

/// Neighbour differences `(right − left, below − above)` of a 2D node.
fn neighbour_differences(tape: &mut Tape, img: Var) -> Result<(Var, Var)> {
    let (h, w) = tape.value(img).dims2()?;
    let rows: Vec<usize> = (0..h).collect();
    let cols: Vec<usize> = (0..w).collect();
    let left = tape.subsample(img, &rows, &cols[..w - 1])?;
    let right = tape.subsample(img, &rows, &cols[1..])?;
    let up = tape.subsample(img, &rows[..h - 1], &cols)?;
    let down = tape.subsample(img, &rows[1..], &cols)?;
    Ok((tape.sub(right, left)?, tape.sub(down, up)?))
}

/// Records `E = ‖φ(img) − target‖ + ξ · Σ sqrt(d² + δ²)` on the tape.
pub fn objective(
    tape: &mut Tape,
    img: Var,
    target: &HogDescriptor,
    cfg: &HogConfig,
    xi: f64,
) -> Result<ObjectiveNodes> {
    let phi = hog::hog_forward(tape, img, cfg)?;
    if tape.value(phi).shape() != target.grid.shape() {
        return Err(Error::config(format!(
            "descriptor grid {:?} does not match target {:?}",
            tape.value(phi).shape(),
            target.grid.shape()
        )));
    }
    let t = tape.input(target.grid.clone());
    let diff = tape.sub(phi, t)?;
    let feature = tape.l2norm(diff)?;

    let (dx, dy) = neighbour_differences(tape, img)?;
    let mut parts = Vec::with_capacity(2);
    for d in [dx, dy] {
        let sq = tape.pow2(d)?;
        let sm = tape.add_scalar(sq, SMOOTH_DELTA * SMOOTH_DELTA)?;
        let abs = tape.sqrt(sm)?;
        parts.push(tape.sum(abs)?);
    }
    let smoothness = tape.add(parts[0], parts[1])?;
    let weighted = tape.scale(smoothness, xi)?;
    let total = tape.add(feature, weighted)?;
    Ok(ObjectiveNodes {
        total,
        feature,
        smoothness,
    })
}

struct Evaluation {
    row: (f64, f64, f64),
    grad: Tensor,
}

fn evaluate(x: &Tensor, target: &HogDescriptor, cfg: &HogConfig, xi: f64) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let img = tape.input(x.clone());
    let nodes = objective(&mut tape, img, target, cfg, xi)?;
    tape.backward(nodes.total)?;
    let grad = tape.grad(img).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok(Evaluation {
        row: (
            tape.value(nodes.total).item(),
            tape.value(nodes.feature).item(),
            tape.value(nodes.smoothness).item(),
        ),
        grad,
    })
}

/// Result of one [`minimize`] call.
#[derive(Debug, Clone)]
pub struct Minimized {
    /// Best iterate seen.
    pub image: Tensor,
    pub trace: Vec<TraceRow>,
}

fn clamp_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Minimizes E from `start` (a 2D tensor) against `target` using `cfg`.
pub fn minimize(
    start: &Tensor,
    target: &HogDescriptor,
    cfg: &HogConfig,
    xi: f64,
    opt: &OptimizerConfig,
    stage: u32,
) -> Result<Minimized> {
    opt.validate()?;
    if !(xi >= 0.0) {
        return Err(Error::config("smoothness weight must be non-negative"));
    }
    match opt.method {
        Method::MomentumGd => momentum_gd(start, target, cfg, xi, opt, stage),
        Method::Dogleg => dogleg(start, target, cfg, xi, opt, stage),
    }
}

fn xi_at(xi: f64, opt: &OptimizerConfig, k: usize) -> f64 {
    if opt.xi_decay && opt.max_iters > 0 {
        xi * (1.0 - k as f64 / opt.max_iters as f64)
    } else {
        xi
    }
}

/// Relative improvement of the best value over the last `window` entries.
fn stalled(best: &[f64], opt: &OptimizerConfig) -> bool {
    let k = best.len();
    if k <= opt.window {
        return false;
    }
    let then = best[k - 1 - opt.window];
    let now = best[k - 1];
    then <= 0.0 || (then - now) / then < opt.tol
}

fn momentum_gd(
    start: &Tensor,
    target: &HogDescriptor,
    cfg: &HogConfig,
    xi: f64,
    opt: &OptimizerConfig,
    stage: u32,
) -> Result<Minimized> {
    let mut x = start.clone();
    clamp_unit(&mut x);
    let mut velocity = Tensor::zeros(x.shape());
    let mut trace = Vec::new();
    let mut best_values = Vec::new();
    let mut best = (f64::INFINITY, x.clone());
    let mut initial = None;

    for k in 0..=opt.max_iters {
        let eval = evaluate(&x, target, cfg, xi_at(xi, opt, k))?;
        let (e, feature, smoothness) = eval.row;
        trace.push(TraceRow {
            iteration: k,
            stage,
            e,
            feature,
            smoothness,
        });
        let initial = *initial.get_or_insert(e);
        if e > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                iteration: k,
                value: e,
                initial,
            });
        }
        if e < best.0 {
            best = (e, x.clone());
        }
        best_values.push(best.0);
        if k == opt.max_iters || eval.grad.norm() == 0.0 || stalled(&best_values, opt) {
            break;
        }
        for (v, g) in velocity.data_mut().iter_mut().zip(eval.grad.data()) {
            *v = opt.momentum * *v - opt.step * g;
        }
        x.add_assign(&velocity);
        clamp_unit(&mut x);
    }
    Ok(Minimized {
        image: best.1,
        trace,
    })
}

/// Residual-vector view of the objective for the trust-region solver:
/// feature residuals `φ(Î) − φ(I)` and smoothness residuals
/// `√ξ · (i_p − i_q)`.
struct ResidualTape {
    tape: Tape,
    input: Var,
    residuals: Vec<Var>,
    objective: ObjectiveNodes,
}

impl ResidualTape {
    fn build(x: &Tensor, target: &HogDescriptor, cfg: &HogConfig, xi: f64) -> Result<Self> {
        let mut tape = Tape::new();
        let input = tape.input(x.clone());
        let objective = objective(&mut tape, input, target, cfg, xi)?;
        let phi = hog::hog_forward(&mut tape, input, cfg)?;
        let t = tape.input(target.grid.clone());
        let feat = tape.sub(phi, t)?;
        let (dx, dy) = neighbour_differences(&mut tape, input)?;
        let rx = tape.scale(dx, xi.sqrt())?;
        let ry = tape.scale(dy, xi.sqrt())?;
        Ok(ResidualTape {
            tape,
            input,
            residuals: vec![feat, rx, ry],
            objective,
        })
    }

    fn values(&self) -> Vec<Tensor> {
        self.residuals.iter().map(|&r| self.tape.value(r).clone()).collect()
    }

    fn cost(&self) -> f64 {
        0.5 * self.values().iter().map(|t| t.dot(t)).sum::<f64>()
    }

    fn e_row(&self) -> (f64, f64, f64) {
        let v = |n: Var| self.tape.value(n).item();
        (v(self.objective.total), v(self.objective.feature), v(self.objective.smoothness))
    }

    /// `J p`
    fn jvp(&self, p: &Tensor) -> Result<Vec<Tensor>> {
        let tangents = self.tape.jvp(&[(self.input, p)])?;
        Ok(self
            .residuals
            .iter()
            .map(|r| {
                tangents[r.index()]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(*r).shape()))
            })
            .collect())
    }

    /// `Jᵀ u`
    fn vjp(&mut self, u: &[Tensor]) -> Result<Tensor> {
        let seeds: Vec<(Var, Tensor)> = self.residuals.iter().copied().zip(u.iter().cloned()).collect();
        self.tape.vjp(&seeds)?;
        Ok(self
            .tape
            .grad(self.input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.tape.value(self.input).shape())))
    }
}

fn sq_norm(parts: &[Tensor]) -> f64 {
    parts.iter().map(|t| t.dot(t)).sum()
}

/// Solves `(JᵀJ) p = −g` approximately with conjugate gradients.
fn gauss_newton_step(rt: &mut ResidualTape, g: &Tensor, max_iters: usize) -> Result<Tensor> {
    let mut p = Tensor::zeros(g.shape());
    let mut r = g.map(|v| -v);
    let mut d = r.clone();
    let mut rr = r.dot(&r);
    let stop = 1e-10 * rr.max(f64::MIN_POSITIVE);
    for _ in 0..max_iters {
        if rr <= stop {
            break;
        }
        let jd = rt.jvp(&d)?;
        let ad = rt.vjp(&jd)?;
        let dad = d.dot(&ad);
        if dad <= 0.0 {
            break;
        }
        let alpha = rr / dad;
        p.axpy(alpha, &d);
        r.axpy(-alpha, &ad);
        let rr_new = r.dot(&r);
        let beta = rr_new / rr;
        rr = rr_new;
        d = {
            let mut nd = r.clone();
            nd.axpy(beta, &d);
            nd
        };
    }
    Ok(p)
}

fn dogleg(
    start: &Tensor,
    target: &HogDescriptor,
    cfg: &HogConfig,
    xi: f64,
    opt: &OptimizerConfig,
    stage: u32,
) -> Result<Minimized> {
    let mut x = start.clone();
    clamp_unit(&mut x);
    let mut rt = ResidualTape::build(&x, target, cfg, xi_at(xi, opt, 0))?;
    let mut cost = rt.cost();
    let mut row = rt.e_row();
    let initial = row.0;
    let mut radius = 0.1 * (x.len() as f64).sqrt();
    let mut trace = Vec::new();
    let mut best_values = Vec::new();

    for k in 0..=opt.max_iters {
        trace.push(TraceRow {
            iteration: k,
            stage,
            e: row.0,
            feature: row.1,
            smoothness: row.2,
        });
        best_values.push(row.0);
        if k == opt.max_iters || stalled(&best_values, opt) || radius < 1e-12 {
            break;
        }
        let r = rt.values();
        let g = rt.vjp(&r)?;
        let gnorm = g.norm();
        if gnorm == 0.0 {
            break;
        }
        let jg = rt.jvp(&g)?;
        let jg2 = sq_norm(&jg);
        let sd_len = if jg2 > 0.0 { gnorm * gnorm / jg2 } else { radius / gnorm };
        let p_sd = g.map(|v| -sd_len * v);
        let p_gn = gauss_newton_step(&mut rt, &g, 30)?;

        let step = {
            let (gn_norm, sd_norm) = (p_gn.norm(), p_sd.norm());
            if gn_norm <= radius {
                p_gn
            } else if sd_norm >= radius {
                p_sd.map(|v| v * radius / sd_norm)
            } else {
                // p_sd + τ (p_gn − p_sd) with ‖·‖ = radius
                let mut diff = p_gn.clone();
                diff.axpy(-1.0, &p_sd);
                let a = diff.dot(&diff);
                let b = 2.0 * p_sd.dot(&diff);
                let c = sd_norm * sd_norm - radius * radius;
                let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
                let mut p = p_sd.clone();
                p.axpy(tau, &diff);
                p
            }
        };
        let jp = rt.jvp(&step)?;
        let predicted = -(g.dot(&step) + 0.5 * sq_norm(&jp));

        let mut candidate = x.clone();
        candidate.add_assign(&step);
        clamp_unit(&mut candidate);
        let next = ResidualTape::build(&candidate, target, cfg, xi_at(xi, opt, k + 1))?;
        let next_cost = next.cost();
        let next_row = next.e_row();
        if next_row.0 > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                iteration: k + 1,
                value: next_row.0,
                initial,
            });
        }
        let rho = if predicted > 0.0 {
            (cost - next_cost) / predicted
        } else {
            -1.0
        };
        let step_norm = step.norm();
        if rho > 0.75 {
            radius = radius.max(2.0 * step_norm);
        } else if rho < 0.25 {
            radius = 0.25 * step_norm.min(radius);
        }
        // Accepted steps must also keep E from increasing.
        if rho > 0.0 && next_row.0 <= row.0 {
            x = candidate;
            rt = next;
            cost = next_cost;
            row = next_row;
        }
    }
    Ok(Minimized { image: x, trace })
}

/// Initial estimate of the given extents.
pub fn initial_image(init: Init, height: usize, width: usize) -> Tensor {
    match init {
        Init::MidGray => Tensor::full(&[height, width], 0.5),
        Init::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..height * width).map(|_| rng.gen_range(0.4..=0.6)).collect();
            Tensor::new(&[height, width], data).expect("shape matches data")
        }
    }
}

fn upsample(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let r = tape.resize_bilinear(v, height, width)?;
    Ok(tape.value(r).clone())
}

/// Halves both extents by averaging 2×2 blocks (a center-aligned bilinear
/// resize by exactly one half).
pub fn halve(img: &Image) -> Result<Image> {
    let g = img.to_gray();
    let mut tape = Tape::new();
    let v = tape.input(g.to_tensor());
    let r = tape.resize_bilinear(v, g.height() / 2, g.width() / 2)?;
    Image::from_tensor(tape.value(r))
}

/// Per-scale descriptors `φ(I_{1/s})` of `img` for every rung of the
/// multi-scale ladder, each extracted with that rung's cell size.
pub fn per_scale_targets(img: &Image, cfg: &HogConfig) -> Result<BTreeMap<u32, HogDescriptor>> {
    let gray = img.to_gray();
    let plan = stage_plan(cfg.cell, gray.height(), gray.width(), Schedule::MultiScaleMore);
    let mut pyramid = vec![(1usize, gray)];
    let max_factor = plan.iter().map(|s| s.factor).max().unwrap_or(1);
    while pyramid.last().unwrap().0 < max_factor {
        let (f, im) = pyramid.last().unwrap();
        let next = halve(im)?;
        pyramid.push((f * 2, next));
    }
    let mut out = BTreeMap::new();
    for stage in plan {
        let im = &pyramid
            .iter()
            .find(|(f, _)| *f == stage.factor)
            .expect("pyramid covers every factor")
            .1;
        let stage_cfg = cfg.with_cell(stage.cell);
        out.insert(stage.scale, hog::extract(im, &stage_cfg)?);
    }
    Ok(out)
}

/// Runs the problem's schedule.
pub fn reconstruct(problem: &ReconstructionProblem, opt: &OptimizerConfig) -> Result<Reconstruction> {
    opt.validate()?;
    problem.config.validate()?;
    let (height, width) = problem.extents()?;
    let plan = stage_plan(problem.config.cell, height, width, problem.schedule);
    let full_target = &problem.targets[&1];

    let mut trace = Vec::new();
    let mut stages = Vec::new();
    let mut x: Option<Tensor> = None;
    for stage in &plan {
        let start = match x.take() {
            None => initial_image(problem.init, stage.height, stage.width),
            Some(prev) => upsample(&prev, stage.height, stage.width)?,
        };
        let cfg = problem.config.with_cell(stage.cell);
        let target = match problem.schedule {
            Schedule::MultiScaleMore => problem
                .targets
                .get(&stage.scale)
                .ok_or_else(|| Error::config(format!("missing target for scale s = {}", stage.scale)))?,
            _ => full_target,
        };
        let result = minimize(&start, target, &cfg, problem.xi, opt, stage.scale)?;
        trace.extend(result.trace);
        stages.push((stage.scale, Image::from_tensor(&result.image)?));
        x = Some(result.image);
    }
    let image = Image::from_tensor(&x.expect("plan always contains s = 1"))?;
    Ok(Reconstruction {
        image,
        trace,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(n: usize) -> Image {
        let data = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                (0.5 + 0.35 * (x * 0.3).sin() * (y * 0.21).cos()).clamp(0.0, 1.0)
            })
            .collect();
        Image::gray(n, n, data).unwrap()
    }

    #[test]
    fn stage_plan_skips_degenerate_cells() {
        let plan = stage_plan(8, 128, 128, Schedule::MultiScale);
        let got: Vec<(u32, usize, usize)> = plan.iter().map(|s| (s.scale, s.height, s.cell)).collect();
        assert_eq!(got, vec![(16, 32, 2), (4, 64, 4), (1, 128, 8)]);
        assert_eq!(stage_plan(8, 128, 128, Schedule::Single).len(), 1);
        let plan4 = stage_plan(4, 64, 64, Schedule::MultiScale);
        assert_eq!(plan4.iter().map(|s| s.scale).collect::<Vec<_>>(), vec![4, 1]);
    }

    #[test]
    fn objective_at_source_with_no_smoothness_is_zero() {
        let img = pattern(32);
        let cfg = HogConfig::default();
        let target = hog::extract(&img, &cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(img.to_tensor());
        let nodes = objective(&mut tape, x, &target, &cfg, 0.0).unwrap();
        assert!(tape.value(nodes.total).item() < 1e-12);
    }

    #[test]
    fn objective_of_constant_estimate_is_target_norm() {
        let img = pattern(32);
        let cfg = HogConfig::default();
        let target = hog::extract(&img, &cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[32, 32], 0.5));
        let nodes = objective(&mut tape, x, &target, &cfg, 100.0).unwrap();
        let e = tape.value(nodes.total).item();
        let pairs = (2 * 32 * 31) as f64;
        let expected = target.norm() + 100.0 * pairs * SMOOTH_DELTA;
        assert!((e - expected).abs() < 1e-6, "{e} vs {expected}");
    }

    #[test]
    fn objective_rejects_grid_mismatch() {
        let img = pattern(32);
        let target = hog::extract(&img, &HogConfig::default()).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[16, 16], 0.5));
        assert!(objective(&mut tape, x, &target, &HogConfig::default(), 1.0).is_err());
    }

    #[test]
    fn zero_iterations_return_init() {
        let img = pattern(32);
        let cfg = HogConfig::default();
        let target = hog::extract(&img, &cfg).unwrap();
        let opt = OptimizerConfig {
            max_iters: 0,
            ..Default::default()
        };
        let init = initial_image(Init::Noise { seed: 3 }, 32, 32);
        let out = minimize(&init, &target, &cfg, 1.0, &opt, 1).unwrap();
        assert_eq!(out.image, init);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn fixed_point_returns_immediately() {
        let img = pattern(32);
        let cfg = HogConfig::default();
        let target = hog::extract(&img, &cfg).unwrap();
        let out = minimize(&img.to_tensor(), &target, &cfg, 0.0, &OptimizerConfig::default(), 1).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert!(out.trace[0].e < 1e-12);
        assert_eq!(out.image, img.to_tensor());
    }

    #[test]
    fn invalid_optimizer_config() {
        let bad = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            step: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noise_init_range_and_determinism() {
        let a = initial_image(Init::Noise { seed: 9 }, 16, 16);
        let b = initial_image(Init::Noise { seed: 9 }, 16, 16);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.4..=0.6).contains(v)));
    }

    #[test]
    fn per_scale_targets_match_stage_grid() {
        let img = pattern(64);
        let targets = per_scale_targets(&img, &HogConfig::default()).unwrap();
        assert_eq!(targets.keys().copied().collect::<Vec<_>>(), vec![1, 4, 16]);
        for d in targets.values() {
            assert_eq!(d.dims(), (8, 8, 9));
        }
    }
}
