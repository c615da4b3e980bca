use super::{AdjointFault, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    /// max |analytic − numeric| / max(1, |analytic|) over all coordinates.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// First coordinate whose perturbed evaluation was non-finite.
    pub non_finite: Option<(usize, usize)>,
    pub coords_checked: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }
}

/// Gradient check of a scalar function of several tensors.
///
/// `fault` is applied to the analytic pass only.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    fault: Option<AdjointFault>,
) -> Result<GradCheckOutcome>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let tape = match fault {
        Some(fault) => Tape::with_adjoint_fault(fault),
        None => Tape::new(),
    };
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| tape.grad(v)).collect();
    drop(leaves);

    // A perturbed evaluation that fails (e.g. leaves a log's domain) counts as non-finite.
    let eval = |probe: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vars).map_or(f64::NAN, |v| v.item())
    };

    let mut outcome = GradCheckOutcome {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            outcome.coords_checked += 1;

            if !plus.is_finite() || !minus.is_finite() || !grad.data()[j].is_finite() {
                outcome.non_finite.get_or_insert((i, j));
                outcome.max_rel_error = f64::INFINITY;
                outcome.worst = Some((i, j));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > outcome.max_rel_error {
                outcome.max_rel_error = rel;
                outcome.worst = Some((i, j));
            }
        }
    }
    Ok(outcome)
}

/// Single-input form of [`check_gradients`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckOutcome>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(x), step, None)
}
