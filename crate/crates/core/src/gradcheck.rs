//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Tensor, Var};

/// Threshold above which a single coordinate is reported as a suspected
/// non-differentiable point.
pub const KINK_THRESHOLD: f64 = 1e-3;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero compare in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose error exceeded [`KINK_THRESHOLD`].
    pub flagged: Vec<(usize, usize, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fixed pseudo-random projection weights used to reduce non-scalar outputs.
fn projection(n: usize) -> Vec<f64> {
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            2.0 * ((s >> 11) as f64 / (1u64 << 53) as f64) - 1.0
        })
        .collect()
}

fn scalar_output(op: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars);
    tape.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum()
}

/// Compares tape gradients of `op` against central differences for every
/// element of every input.
pub fn finite_diff_gradient_check(
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    eps: f64,
) -> GradCheckReport {
    let picks: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    finite_diff_gradient_check_at(op, inputs, eps, &picks)
}

/// Same as [`finite_diff_gradient_check`] restricted to the listed
/// `(input, element)` coordinates.
pub fn finite_diff_gradient_check_at(
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    eps: f64,
    picks: &[(usize, usize)],
) -> GradCheckReport {
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let weights = projection(tape.value(out).len());
    let w = tape.constant(Tensor::new(tape.value(out).shape(), weights.clone()));
    let prod = tape.mul(out, w);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);

    let mut report = GradCheckReport::default();
    for &(k, i) in picks {
        let analytic = grads.get(vars[k]).map_or(0.0, |g| g.data()[i]);
        let mut plus = inputs.to_vec();
        plus[k].data_mut()[i] += eps;
        let mut minus = inputs.to_vec();
        minus[k].data_mut()[i] -= eps;
        let numeric = (scalar_output(op, &plus, &weights) - scalar_output(op, &minus, &weights))
            / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > KINK_THRESHOLD {
            report.flagged.push((k, i, err));
        }
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((k, i));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_op_has_no_error() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 4.0]);
        let report = finite_diff_gradient_check(&|_, xs| xs[0], &[x], 1e-4);
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert!(report.flagged.is_empty());
    }

    #[test]
    fn kink_is_reported_not_raised() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]);
        let report = finite_diff_gradient_check(&|t, xs| t.clamp_min(xs[0], 0.0), &[x], 1e-4);
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].1, 0);
    }
}
