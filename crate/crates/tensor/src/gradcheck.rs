//! Central finite-difference verification of tape gradients, run on the
//! f64 shadow type.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so gradients that are both
    /// essentially zero compare as equal.
    pub abs_floor: f64,
    /// Upper bound on checked elements per input; `None` checks all.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Elements whose finite differences only agreed at a reduced step, or
    /// that sit exactly on a non-differentiable point; excluded from
    /// `max_rel_error`.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.inputs.iter().map(|r| r.kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.rel_tol
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(false))).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

fn selected(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < numel => (0..m).map(|i| i * numel / m + (numel / m) / 2).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences for every input tensor flagged `requires_grad`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let selection: Vec<Option<Vec<usize>>> = inputs
        .iter()
        .map(|t| t.requires_grad().then(|| selected(t.numel(), config.max_elements)))
        .collect();
    numeric_check(inputs, &analytic, &selection, |xs| evaluate(&f, xs), config)
}

/// Central-difference check of `analytic` gradients of any scalar function
/// of several tensors. `selection[k]` lists the elements of input `k` to
/// check; `None` skips the input. The step shrinks tenfold up to twice
/// before an element counts as failing.
pub fn numeric_check<E>(inputs: &[Tensor<f64>], analytic: &[Vec<f64>], selection: &[Option<Vec<usize>>], mut eval: E, config: GradCheckConfig) -> Result<GradCheckReport>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let base = eval(inputs)?;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let Some(indices) = selection.get(k).and_then(Option::as_ref) else {
            continue;
        };
        let mut report = InputReport {
            checked: 0,
            max_rel_error: 0.0,
            worst_index: None,
            kinks: 0,
        };
        for &idx in indices {
            let original = input.data()[idx];
            let mut resolved = None;
            let mut first_err = 0.0;
            let mut one_sided_gap = 0.0;
            for (attempt, h) in [config.step, config.step * 1e-1, config.step * 1e-2].into_iter().enumerate() {
                work[k].data_mut()[idx] = original + h;
                let plus = eval(&work)?;
                work[k].data_mut()[idx] = original - h;
                let minus = eval(&work)?;
                work[k].data_mut()[idx] = original;
                let forward = (plus - base) / h;
                let backward = (base - minus) / h;
                let err = rel_error(analytic[k][idx], 0.5 * (forward + backward), config.abs_floor);
                if attempt == 0 {
                    first_err = err;
                }
                one_sided_gap = rel_error(forward, backward, config.abs_floor);
                if err < config.rel_tol {
                    resolved = Some((attempt, err));
                    break;
                }
            }
            report.checked += 1;
            let err = match resolved {
                Some((0, e)) => e,
                Some((_, e)) => {
                    report.kinks += 1;
                    e
                }
                // not differentiable here: one-sided slopes disagree at every step
                None if one_sided_gap > config.rel_tol => {
                    report.kinks += 1;
                    continue;
                }
                None => first_err,
            };
            if report.worst_index.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(idx);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        rel_tol: config.rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_at_exact_zero_is_flagged_not_failed() {
        let x = Tensor::zeros(&[4]).with_requires_grad(true);
        let report = grad_check(
            &[x],
            |tape, v| {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.kinks(), 4);
        assert!(report.passed());
    }

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap().with_requires_grad(true);
        let report = grad_check(
            &[x],
            |tape, v| {
                let s = tape.sigmoid(v[0]);
                let sq = tape.mul(s, s)?;
                Ok(tape.sum(sq))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.kinks(), 0);
    }
}
