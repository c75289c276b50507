//! Central finite-difference gradient checking.
//!
//! The numeric side re-runs the user-supplied graph builder with perturbed
//! leaf values, so it exercises only forward evaluation; the analytic side is
//! one backward pass. Agreement between the two validates the backward rules.

use crate::autodiff::tape::{Tape, Tensor};

/// Relative error with an absolute floor so near-zero gradients compare as
/// absolute differences instead of blowing up the ratio.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Check analytic gradients of `build` (a scalar-valued graph over the given
/// leaf inputs) against central finite differences with step `h`.
pub fn check_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, build: F) -> GradCheckReport
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    // analytic
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(data.clone(), shape).expect("leaf"))
        .collect();
    let loss = build(&tape, &leaves);
    assert_eq!(loss.numel(), 1, "gradcheck loss must be scalar");
    tape.backward(&loss).expect("backward");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let t = Tape::new();
        let ls: Vec<Tensor> = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), data)| t.leaf(data.clone(), shape).expect("leaf"))
            .collect();
        build(&t, &ls).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    for (ii, (_, base)) in inputs.iter().enumerate() {
        for ei in 0..base.len() {
            let orig = values[ii][ei];
            values[ii][ei] = orig + h;
            let up = eval(&values);
            values[ii][ei] = orig - h;
            let down = eval(&values);
            values[ii][ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[ii][ei], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ii, ei);
                report.analytic = analytic[ii][ei];
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Panics with a diagnostic when the worst relative error exceeds `tol`.
pub fn assert_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, tol: f64, build: F)
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    let report = check_gradients(inputs, h, build);
    assert!(
        report.max_rel_err < tol,
        "gradient check failed: rel err {:.3e} at input {} element {} (analytic {:.9e}, numeric {:.9e})",
        report.max_rel_err,
        report.worst.0,
        report.worst.1,
        report.analytic,
        report.numeric,
    );
}
