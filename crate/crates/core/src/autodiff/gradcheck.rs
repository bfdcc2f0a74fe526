//! Central finite-difference oracle for tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Value of a scalar function together with the ReLU pattern it was
/// evaluated on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub kink_signature: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_discrepancy: f64,
    /// Coordinate where `max_discrepancy` occurred.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose `x +- h` probes crossed a ReLU kink.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the backward-pass gradient of `f` at `x` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// `f` builds a scalar on the given tape from the leaf holding `x`.
/// Coordinates where either probe changes the ReLU activation pattern are
/// skipped, since the function is not differentiable across the kink.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Usage(format!("finite difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let loss = f(&mut tape, leaf)?;
    let base_sig = tape.kink_signature();
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let probe = |point: Tensor| -> Result<Probe> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point);
        let out = f(&mut tape, leaf)?;
        let value = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::Usage("finite_diff_check needs a scalar function".into()))?;
        Ok(Probe {
            value,
            kink_signature: tape.kink_signature(),
        })
    };

    let mut report = FiniteDiffReport {
        max_discrepancy: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        tolerance: tol,
        passed: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (p, m) = (probe(plus)?, probe(minus)?);
        if p.kink_signature != base_sig || m.kink_signature != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (p.value - m.value) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let d = (a - numeric).abs() / denom;
        report.checked += 1;
        if !(d <= report.max_discrepancy) {
            report.max_discrepancy = d;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_discrepancy <= tol;
    Ok(report)
}
