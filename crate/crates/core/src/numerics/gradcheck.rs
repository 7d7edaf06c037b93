//! Finite-difference verification of tape gradients.
//!
//! The same closure builds the scalar loss for both paths: once on a tape
//! for analytic gradients, then twice per parameter entry at θ±ε for the
//! central difference. The closure must be deterministic in its inputs
//! (fix any stochastic choices, e.g. dropout masks, outside it).

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Relative-error floor: differences below this scale are compared
/// absolutely, so exact-zero gradients do not fail on rounding noise.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct WorstEntry {
    /// Which parameter tensor.
    pub param: usize,
    /// Flat index within that tensor.
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check analytic gradients of `f` against central finite differences
/// (f(θ+ε) − f(θ−ε)) / 2ε for every entry of every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter and must return the
/// scalar loss recorded on that tape.
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Domain {
            op: "check_gradients",
            msg: format!("eps must lie in [1e-6, 1e-4], got {eps:e}"),
        });
    }

    let record = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.value().is_scalar() {
            return Err(Error::Validation {
                op: "check_gradients",
                msg: format!(
                    "f must return a scalar, got shape {:?}",
                    loss.value().shape()
                ),
            });
        }
        if !loss.value().item().is_finite() {
            return Err(Error::Numeric {
                context: "check_gradients".into(),
                msg: format!("f evaluated to a non-finite value: {}", loss.value().item()),
            });
        }
        Ok((tape, vars, loss))
    };

    // Analytic pass.
    let (tape, vars, loss) = record(params)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt_or_zeros(v)).collect();
    drop((tape, vars, loss));

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
        tol,
    };

    let mut values: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for entry in 0..param.numel() {
            let theta = param.data()[entry];
            values[pi] = param.with_entry(entry, theta + eps);
            let f_plus = record(&values)?.2.value().item();
            values[pi] = param.with_entry(entry, theta - eps);
            let f_minus = record(&values)?.2.value().item();
            values[pi] = param.clone();

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi].data()[entry];
            let err = rel_err(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some(WorstEntry {
                    param: pi,
                    entry,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
