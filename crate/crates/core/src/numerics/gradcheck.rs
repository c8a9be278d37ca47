use crate::error::{CafeError, Result};

use super::precision::{with_precision, Precision};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of a finite-difference check of one scalar-valued function.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

const FD_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients of `f` against central finite
/// differences, element by element, in 64-bit mode.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    with_precision(Precision::F64, || {
        // analytic gradients
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(CafeError::shape(format!(
                "grad_check: f must be scalar-valued, got {:?}",
                tape.value(out).shape()
            )));
        }
        tape.value(out).check_finite("grad_check output")?;
        tape.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        for (i, g) in analytic.iter().enumerate() {
            g.check_finite(&format!("analytic gradient of input {i}"))?;
        }

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            let v = tape.value(out).item();
            if !v.is_finite() {
                return Err(CafeError::numeric(
                    "non-finite value during finite-difference evaluation",
                ));
            }
            Ok(v)
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: (0, 0),
            tol,
        };
        for i in 0..inputs.len() {
            for j in 0..inputs[i].numel() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + FD_STEP;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - FD_STEP;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let a = analytic[i].data()[j];
                let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-6);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (i, j);
                }
            }
        }
        Ok(report)
    })
}
