use super::{Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    /// `max(x, slope·x)` for `slope < 1`. The derivative at exactly zero is
    /// taken from the positive branch (1).
    pub fn leaky_relu(&self, slope: T) -> Self {
        let data = self
            .data()
            .iter()
            .map(|&x| if x >= T::zero() { x } else { x * slope })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| {
                let x = ctx.parents[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= T::zero() { *g } else { *g * slope })
                    .collect();
                vec![Some(g)]
            },
        )
        .expect("shape unchanged")
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - m).exp();
                    y[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    y[idx(j)] = y[idx(j)] / z;
                }
            }
        }
        Tensor::from_op(shape.to_vec(), y, vec![self.clone()], move |ctx| {
            let y = ctx.output;
            let mut g = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..n).map(|j| ctx.grad[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        g[idx(j)] = y[idx(j)] * (ctx.grad[idx(j)] - dot);
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let d = *self.shape().last().expect("non-empty shape");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs trailing dimension {d}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / d;
        let dn = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            xhat.extend(row.iter().map(|v| (*v - mean) * s));
        }
        let gm = gamma.data();
        let bt = beta.data();
        let data = xhat
            .chunks_exact(d)
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| *v * gm[j] + bt[j]))
            .collect();
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        Tensor::from_op(self.shape().to_vec(), data, parents, move |ctx| {
            let gm = ctx.parents[1].data();
            let mut gx = vec![T::zero(); rows * d];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for r in 0..rows {
                let g = &ctx.grad[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for j in 0..d {
                    ggamma[j] += g[j] * xh[j];
                    gbeta[j] += g[j];
                    let dxh = g[j] * gm[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[j];
                }
                let scale = inv_std[r] / dn;
                for j in 0..d {
                    let dxh = g[j] * gm[j];
                    gx[r * d + j] = scale * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        })
    }

    /// Scales every slice along the last dimension to unit Euclidean norm.
    /// Slices with zero norm are rejected; callers that can meet one must
    /// check beforehand.
    pub fn l2_normalize(&self) -> Result<Self> {
        let d = *self.shape().last().expect("non-empty shape");
        let mut norms = Vec::with_capacity(self.numel() / d);
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n <= T::zero() {
                return Err(Error::invalid("l2_normalize of a zero vector"));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| *v / n));
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| {
                let mut g = Vec::with_capacity(ctx.grad.len());
                for ((gy, y), n) in ctx
                    .grad
                    .chunks_exact(d)
                    .zip(ctx.output.chunks_exact(d))
                    .zip(&norms)
                {
                    let dot: T = gy.iter().zip(y).map(|(a, b)| *a * *b).sum();
                    g.extend(gy.iter().zip(y).map(|(gv, yv)| (*gv - *yv * dot) / *n));
                }
                vec![Some(g)]
            },
        )
    }

    /// Summed smooth-L1 (Huber with threshold 1) between `self` and `target`:
    /// `0.5·e²` where `|e| < 1`, else `|e| − 0.5`.
    pub fn smooth_l1(&self, target: &Self) -> Result<Self> {
        if self.shape() != target.shape() {
            return Err(Error::shape(
                "smooth_l1",
                format!(
                    "prediction {:?} vs target {:?}",
                    self.shape(),
                    target.shape()
                ),
            ));
        }
        let half = T::lit(0.5);
        let errs: Vec<T> = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| *p - *t)
            .collect();
        let total = errs
            .iter()
            .map(|&e| {
                if e.abs() < T::one() {
                    half * e * e
                } else {
                    e.abs() - half
                }
            })
            .sum();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone(), target.clone()],
            move |ctx| {
                let g0 = ctx.grad[0];
                let d: Vec<T> = errs
                    .iter()
                    .map(|&e| g0 * if e.abs() < T::one() { e } else { e.signum() })
                    .collect();
                let neg = ctx.needs(1).then(|| d.iter().map(|v| -*v).collect());
                vec![Some(d), neg]
            },
        )
    }
}
