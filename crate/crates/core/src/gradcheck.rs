//! Central finite-difference check of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Largest relative deviation between tape and numeric gradients.
    pub max_rel_deviation: f64,
    /// `(input, flat element)` where the largest deviation occurred.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Checks `f` at `x`. See [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), step, tol)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, one entry at a time.
///
/// The deviation for an entry is `|a − n| / max(|a|, |n|, floor)` where
/// `floor = max(1e-3 · max|n|, 1e-7)`. The floor stops entries whose true
/// gradient is zero from turning rounding noise into a failure.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0 && tol > 0.0) {
        return Err(Error::contract(format!(
            "grad_check needs step > 0 and tol > 0, got {step} / {tol}"
        )));
    }
    let leaves: Vec<Tensor> = inputs.iter().map(|x| x.detach().into_leaf()).collect();
    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; l.numel()])
        })
        .collect();

    let constants: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for (i, x) in constants.iter().enumerate() {
        let mut col = Vec::with_capacity(x.numel());
        for k in 0..x.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = x.to_vec();
                data[k] += delta;
                let mut args = constants.clone();
                args[i] = Tensor::new(x.shape(), data)?;
                f(&args)?.item()
            };
            col.push((eval(step)? - eval(-step)?) / (2.0 * step));
        }
        numeric.push(col);
    }

    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-7);
    let mut worst = None;
    let mut max_dev = 0.0f64;
    let mut checked = 0;
    for (i, (a_col, n_col)) in analytic.iter().zip(&numeric).enumerate() {
        for (k, (a, n)) in a_col.iter().zip(n_col).enumerate() {
            let dev = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            checked += 1;
            if dev > max_dev || worst.is_none() {
                max_dev = max_dev.max(dev);
                worst = Some((i, k));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_deviation: max_dev,
        worst,
        checked,
        tol,
        pass: max_dev < tol,
    })
}
