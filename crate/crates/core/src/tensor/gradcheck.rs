use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps elements whose true
/// gradient is (near) zero from dividing rounding noise by nothing.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub const REL_FLOOR: f64 = 1e-4;

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, None, |_, _| {})
}

/// Like [`grad_check`], but with at most `per_input.0` randomly chosen
/// elements per input (seeded by `per_input.1`). `tamper` may modify each
/// analytic gradient before comparison; the audit harness uses it to prove a
/// corrupted gradient is caught.
pub fn grad_check_sampled<F, H>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: Option<(usize, u64)>,
    tamper: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    H: Fn(usize, &mut Vec<f64>),
{
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = t.to_vec();
                    d[at] += delta;
                    tape.param(Tensor::from_parts(t.shape().to_vec(), d))
                } else {
                    tape.param(t.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut rng = per_input.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let mut analytic = grads.wrt(var).to_vec();
        tamper(i, &mut analytic);
        let n = input.numel();
        let elems: Vec<usize> = match (per_input, rng.as_mut()) {
            (Some((count, _)), Some(rng)) if count < n => sample(rng, n, count).into_vec(),
            _ => (0..n).collect(),
        };
        for at in elems {
            let numeric = (eval(i, at, eps)? - eval(i, at, -eps)?) / (2.0 * eps);
            let err = rel_error(analytic[at], numeric, REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, at));
                report.analytic = analytic[at];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
