//! Finite-difference verification of backward-pass adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Number of randomly chosen coordinates to probe (all if the input is smaller).
    pub coords: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1 is a deliberate fault, used as a negative control.
    pub analytic_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            coords: 64,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e−8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation moved a non-smooth primitive
    /// into another piece.
    pub excluded: usize,
    /// Worst coordinate with its analytic and numeric derivative.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central difference `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let fp = f(&probe);
            probe[i] = x[i] - h;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

struct Eval {
    value: f64,
    signature: u64,
}

fn evaluate<F>(f: &F, x: Tensor) -> Result<(Tape, Var, Var, Eval)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.input(x);
    let out = f(&mut tape, input)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let eval = Eval {
        value: v.item(),
        signature: tape.kink_signature(),
    };
    Ok((tape, input, out, eval))
}

/// Compares the backward-pass gradient of the scalar graph built by `f`
/// against central differences on a random subset of coordinates of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::config("gradcheck step must be positive"));
    }
    let (mut tape, input, out, base) = evaluate(&f, x.clone())?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<usize> = if n <= opts.coords {
        (0..n).collect()
    } else {
        sample(&mut rng, n, opts.coords).into_vec()
    };
    coords.sort_unstable();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
    };
    let h = opts.step;
    for i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (.., ep) = evaluate(&f, plus)?;
        let (.., em) = evaluate(&f, minus)?;
        if ep.signature != base.signature || em.signature != base.signature {
            report.excluded += 1;
            continue;
        }
        let numeric = (ep.value - em.value) / (2.0 * h);
        let a = analytic.data()[i] * opts.analytic_scale;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, a, numeric));
        }
    }
    Ok(report)
}
