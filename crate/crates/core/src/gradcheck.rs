//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the loss; it shares no code with the
//! backward rules it audits. Discrete decisions made during the base pass are
//! recorded and replayed for every probe (see [`crate::tensor::freeze`]), so
//! both sides differentiate the same piecewise-smooth function.

use crate::error::Result;
use crate::tensor::{freeze, no_grad, Tensor};

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; when both norms
    /// fall below [`ABS_FLOOR`] the absolute difference norm is reported.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

pub const ABS_FLOOR: f64 = 1e-10;

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.rel_error < tol)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < ABS_FLOOR {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compares backward-pass gradients of `loss` against central differences
/// with the given `step` for every named parameter.
pub fn check_gradients<F>(params: &[(String, Tensor)], loss: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let (base, decisions) = freeze::record(&loss);
    base?.backward()?;

    let mut report = GradCheckReport { params: Vec::with_capacity(params.len()) };
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let original = p.to_vec();
        let mut numeric = Vec::with_capacity(original.len());
        let mut probe = original.clone();
        for j in 0..original.len() {
            probe[j] = original[j] + step;
            p.set_values(&probe)?;
            let plus = no_grad(|| freeze::replay(&decisions, &loss))?.item();
            probe[j] = original[j] - step;
            p.set_values(&probe)?;
            let minus = no_grad(|| freeze::replay(&decisions, &loss))?.item();
            probe[j] = original[j];
            numeric.push((plus - minus) / (2.0 * step));
        }
        p.set_values(&original)?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        report.params.push(ParamCheck {
            name: name.clone(),
            analytic_norm: norm(&analytic),
            numeric_norm: norm(&numeric),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_corrupted_rules() {
        let w = Tensor::parameter(&[2, 2], vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        let x = Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let loss = || Ok(x.matmul(&w)?.sigmoid().sum_all());
        let report = check_gradients(&params, loss, 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");

        let _fault = crate::tensor::fault::inject(crate::tensor::Op::Sigmoid);
        let report = check_gradients(&params, loss, 1e-5).unwrap();
        assert!(report.max_rel_error() > 0.1);
    }

    #[test]
    fn straight_through_unit_checks_under_replay() {
        let s = Tensor::parameter(&[3], vec![0.2, 0.5, 0.9]).unwrap();
        let g = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let params = vec![("s".to_string(), s.clone())];
        let report = check_gradients(&params, || Ok(s.hard_unit().mul(&g)?.sum_all()), 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }
}
