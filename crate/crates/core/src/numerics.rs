//! Numerically stable elementary functions and the central-difference
//! gradient oracle used by the test suites.

use crate::error::{Error, Result};

/// ln(2π) / 2
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log Σ exp(v_k)` with a max shift. `-inf` entries are allowed as long as
/// at least one entry is finite.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })
        .ok_or(Error::EmptyReduction)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn gaussian_log_pdf(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveScale(sigma));
    }
    let z = (y - mu) / sigma;
    Ok(-HALF_LN_2PI - sigma.ln() - 0.5 * z * z)
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Logistic function in the branch-stable form.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central differences `(f(p + e) - f(p - e)) / 2e`, one coordinate at a time.
pub fn finite_diff_gradient<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    central_differences(f, params, &[eps]).map(|mut d| d.remove(0))
}

/// Richardson extrapolation of two central differences,
/// `(4 D(h/2) - D(h)) / 3`, which cancels the `h^2` truncation term. The
/// larger admissible step keeps roundoff well below what plain central
/// differences reach on gradient components near 1e-7.
pub fn extrapolated_diff_gradient<F>(f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Config(format!("step {h} outside [1e-6, 1e-2]")));
    }
    let d = central_differences(f, params, &[h, h / 2.0])?;
    Ok(d[0]
        .iter()
        .zip(&d[1])
        .map(|(coarse, fine)| (4.0 * fine - coarse) / 3.0)
        .collect())
}

fn central_differences<F>(mut f: F, params: &[f64], steps: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut out = vec![Vec::with_capacity(params.len()); steps.len()];
    for i in 0..p.len() {
        let orig = p[i];
        for (grad, &eps) in out.iter_mut().zip(steps) {
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteEvaluation { coordinate: i });
            }
            grad.push((plus - minus) / (2.0 * eps));
        }
    }
    Ok(out)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
