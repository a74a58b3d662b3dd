//! Central finite-difference verification of reverse-mode gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Finite-difference comparison settings.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Magnitude below which errors are measured against `floor` instead of the
    /// gradient itself, so exact zeros compare cleanly.
    pub floor: f64,
    /// Check at most this many evenly strided coordinates per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            floor: 1e-4,
            max_per_input: None,
        }
    }
}

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub worst: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let out = f(inputs)?;
    if out.numel() != 1 {
        return Err(Error::dim(format!(
            "grad check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

impl GradCheck {
    pub fn with_eps(eps: f64) -> Self {
        GradCheck {
            eps,
            ..Default::default()
        }
    }

    pub fn sampled(mut self, max_per_input: usize) -> Self {
        self.max_per_input = Some(max_per_input);
        self
    }

    /// Compares the reverse-mode gradient of `f` at `inputs` with central differences.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let params: Vec<Tensor> = inputs.iter().map(Tensor::as_param).collect();
        let value = f(&params)?;
        if value.numel() != 1 || !value.item().is_finite() {
            return Err(Error::Numeric(format!(
                "function value {:?} is not a finite scalar",
                value.data()
            )));
        }
        let grads = value.backward()?;
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| grads.get_or_zeros(p)).collect();

        let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
        let mut report = GradCheckReport {
            worst: 0.0,
            input: 0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for (which, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let step = match self.max_per_input {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for index in (0..n).step_by(step) {
                let mut data = input.to_vec();
                data[index] += self.eps;
                probe[which] = Tensor::new(input.shape(), data.clone())?;
                let plus = eval(&f, &probe)?;
                data[index] -= 2.0 * self.eps;
                probe[which] = Tensor::new(input.shape(), data)?;
                let minus = eval(&f, &probe)?;
                probe[which] = input.detach();

                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[which][index];
                let scale = a.abs().max(numeric.abs()).max(self.floor);
                let err = (a - numeric).abs() / scale;
                report.checked += 1;
                if err > report.worst || report.checked == 1 {
                    report = GradCheckReport {
                        worst: err,
                        input: which,
                        index,
                        analytic: a,
                        numeric,
                        checked: report.checked,
                    };
                }
            }
        }
        Ok(report)
    }
}

/// Worst relative error between reverse-mode and central-difference gradients.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(GradCheck::with_eps(eps).run(f, inputs)?.worst)
}
