//! Central finite-difference gradient checking.
//!
//! The checker never calls a backward closure to obtain its reference
//! values: every reference derivative comes from two forward evaluations of
//! the objective with one input element displaced by `±step`.

use rand::Rng as _;

use super::Tensor;
use crate::error::Result;
use crate::rng::seeded;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so that gradients that
/// are zero up to rounding compare absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Uniform values in [-1, 1) for an input of the given shape.
pub fn random_values(shape: &[usize], seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    (
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Checks every input element. See [`check_gradients_with`].
pub fn check_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_gradients_with(inputs, DEFAULT_STEP, None, f)
}

/// Compares the backward pass of `Σ wᵢ·f(x)ᵢ` (fixed pseudo-random weights in
/// [0.5, 1.5]) against central differences. When `max_per_input` is set,
/// only that many evenly strided elements of each input are probed.
pub fn check_gradients_with<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    step: f64,
    max_per_input: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s.clone(), d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    let mut rng = seeded(0x5eed);
    let weights: Vec<f64> = (0..out.numel())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let w = Tensor::new(out.shape().to_vec(), weights.clone())?;
    out.mul(&w)?.sum().backward()?;

    let objective = |vals: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let ts = vals
            .iter()
            .map(|(s, d)| Tensor::new(s.clone(), d.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&ts)?;
        Ok(y.data().iter().zip(&weights).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .map(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let stride = max_per_input.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for j in (0..n).step_by(stride) {
            let orig = probe[i].1[j];
            probe[i].1[j] = orig + step;
            let plus = objective(&probe)?;
            probe[i].1[j] = orig - step;
            let minus = objective(&probe)?;
            probe[i].1[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // Forward computes x², backward claims x.
        let inputs = vec![random_values(&[5], 3)];
        let report = check_gradients(&inputs, |x| {
            let data = x[0].data().iter().map(|v| v * v).collect();
            Tensor::from_op(vec![5], data, vec![x[0].clone()], |ctx| {
                let x = ctx.parents[0].data();
                vec![Some(ctx.grad.iter().zip(x).map(|(g, x)| g * x).collect())]
            })
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
