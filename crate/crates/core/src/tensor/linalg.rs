use super::ops::column_sums;
use super::{Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(),
            false,
            other.data(),
            false,
            &mut data,
            false,
        );
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga = ctx.needs(0).then(|| {
                    let mut g = vec![T::zero(); m * k];
                    T::gemm(m, n, k, ctx.grad, false, b, true, &mut g, false);
                    g
                });
                let gb = ctx.needs(1).then(|| {
                    let mut g = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a, true, ctx.grad, false, &mut g, false);
                    g
                });
                vec![ga, gb]
            },
        )
    }

    /// `[M, K] x [N, K]ᵀ -> [M, N]`, the score product of attention.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul_nt")?;
        let (n, k2) = other.as_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(),
            false,
            other.data(),
            true,
            &mut data,
            false,
        );
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga = ctx.needs(0).then(|| {
                    let mut g = vec![T::zero(); m * k];
                    T::gemm(m, n, k, ctx.grad, false, b, false, &mut g, false);
                    g
                });
                let gb = ctx.needs(1).then(|| {
                    let mut g = vec![T::zero(); n * k];
                    T::gemm(n, m, k, ctx.grad, true, a, false, &mut g, false);
                    g
                });
                vec![ga, gb]
            },
        )
    }

    /// Affine map over the last dimension: `[.., Din] -> [.., Dout]`.
    pub fn linear(&self, weight: &Self, bias: &Self) -> Result<Self> {
        let din = *self.shape().last().expect("non-empty shape");
        let (wi, dout) = weight.as_matrix("linear")?;
        if wi != din {
            return Err(Error::shape(
                "linear",
                format!(
                    "input trailing dimension {din} vs weight {:?}",
                    weight.shape()
                ),
            ));
        }
        if bias.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs output width {dout}", bias.shape()),
            ));
        }
        let rows = self.numel() / din;
        let mut data: Vec<T> = bias
            .data()
            .iter()
            .copied()
            .cycle()
            .take(rows * dout)
            .collect();
        T::gemm(
            rows,
            din,
            dout,
            self.data(),
            false,
            weight.data(),
            false,
            &mut data,
            true,
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("non-empty") = dout;
        let parents = vec![self.clone(), weight.clone(), bias.clone()];
        Tensor::from_op(shape, data, parents, move |ctx| {
            let x = ctx.parents[0].data();
            let w = ctx.parents[1].data();
            let gx = ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, ctx.grad, false, w, true, &mut g, false);
                g
            });
            let gw = ctx.needs(1).then(|| {
                let mut g = vec![T::zero(); din * dout];
                T::gemm(din, rows, dout, x, true, ctx.grad, false, &mut g, false);
                g
            });
            let gb = ctx.needs(2).then(|| column_sums(ctx.grad, dout));
            vec![gx, gw, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_gradients, random_values};
    use super::*;

    #[test]
    fn identity_weight_returns_input() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(vec![3, 3], eye).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        assert_eq!(x.linear(&w, &b).unwrap().data(), x.data());
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let x = Tensor::<f64>::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let w = Tensor::zeros(vec![3, 2]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
        let y = x.linear(&w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().chunks(2).all(|r| r == [0.25, -4.0]));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let w = Tensor::zeros(vec![4, 2]).unwrap();
        let b = Tensor::zeros(vec![2]).unwrap();
        assert!(x.linear(&w, &b).is_err());
        assert!(x.matmul(&w).is_err());
        assert!(x.matmul_nt(&w).is_err());
    }

    #[test]
    fn linear_gradient() {
        let inputs = vec![
            random_values(&[2, 3, 4], 1),
            random_values(&[4, 5], 2),
            random_values(&[5], 3),
        ];
        let r = check_gradients(&inputs, |x| x[0].linear(&x[1], &x[2])).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn matmul_gradients() {
        let inputs = vec![
            random_values(&[3, 4], 4),
            random_values(&[4, 2], 5),
            random_values(&[5, 2], 6),
        ];
        let r = check_gradients(&inputs, |x| {
            let ab = x[0].matmul(&x[1])?;
            ab.matmul_nt(&x[2])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
