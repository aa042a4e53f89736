use super::quaternion::{conjugate, mul, Quat};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn to_quat<T: Real>(d: &[T]) -> Quat {
    [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()]
}

/// Differentiable `Π(q̂ · q⁻¹)` for `[4]` tensors.
///
/// `Π` is invariant to positive scaling of its argument, so `q⁻¹` may be
/// replaced by the conjugate without changing the value for any nonzero
/// `q`. The gradient at the zero-rotation point is defined as zero.
pub fn quaternion_distance_tensor<T: Real>(q: &Tensor<T>, qhat: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape() != [4] || qhat.shape() != [4] {
        return Err(Error::shape(
            "quaternion_distance",
            format!(
                "expected [4] tensors, got {:?} and {:?}",
                q.shape(),
                qhat.shape()
            ),
        ));
    }
    let b = conjugate(&to_quat(q.data()));
    let a = to_quat(qhat.data());
    let r = mul(&a, &b);
    let s = (r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
    let value = s.atan2(r[0].abs());
    Tensor::from_op(
        vec![1],
        vec![T::lit(value)],
        vec![q.clone(), qhat.clone()],
        move |ctx| {
            let g = ctx.grad[0].as_f64();
            let w = r[0].abs();
            let denom = s * s + w * w;
            let mut gr = [0.0; 4];
            if denom > 0.0 && s > 0.0 {
                // d/ds atan2(s, w) = w / (s² + w²); d/dw = -s / (s² + w²)
                let ds = g * w / denom;
                for i in 1..4 {
                    gr[i] = ds * r[i] / s;
                }
                gr[0] = if r[0] == 0.0 {
                    0.0
                } else {
                    -g * s / denom * r[0].signum()
                };
            }
            // r = a ⊗ b  =>  ∂/∂a = gr ⊗ b̄,  ∂/∂b = ā ⊗ gr,  b = q̄
            let ga = mul(&gr, &conjugate(&b));
            let gq = conjugate(&mul(&conjugate(&a), &gr));
            let lift = |v: Quat| Some(v.iter().map(|x| T::lit(*x)).collect());
            vec![lift(gq), lift(ga)]
        },
    )
}
