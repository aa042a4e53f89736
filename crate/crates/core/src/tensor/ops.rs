use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a + *b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())],
        )
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a - *b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|g| -*g).collect()),
                ]
            },
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a * *b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga = ctx
                    .needs(0)
                    .then(|| ctx.grad.iter().zip(b).map(|(g, b)| *g * *b).collect());
                let gb = ctx
                    .needs(1)
                    .then(|| ctx.grad.iter().zip(a).map(|(g, a)| *g * *a).collect());
                vec![ga, gb]
            },
        )
    }

    pub fn scale(&self, factor: T) -> Self {
        let data = self.data().iter().map(|v| *v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.iter().map(|g| *g * factor).collect())],
        )
        .expect("shape unchanged")
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Self {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
        .expect("scalar shape")
    }

    pub fn mean(&self) -> Self {
        self.sum().scale(T::one() / T::lit(self.numel() as f64))
    }

    /// Adds a `[C]` bias to every position of a `[.., C]` tensor.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let c = *self.shape().last().expect("non-empty shape");
        if bias.shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!(
                    "bias {:?} does not match trailing dimension of {:?}",
                    bias.shape(),
                    self.shape()
                ),
            ));
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| *x + *b))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |ctx| {
                let gb = ctx.needs(1).then(|| column_sums(ctx.grad, c));
                vec![Some(ctx.grad.to_vec()), gb]
            },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(shape, self.data().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Concatenates tensors along their last dimension. Leading dimensions
    /// must agree.
    pub fn concat_last(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last needs at least one tensor"))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (l, w) = p.shape().split_at(p.shape().len() - 1);
            if l != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("leading dimensions {:?} vs {:?}", l, lead),
                ));
            }
            widths.push(w[0]);
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_op(shape, data, parts.to_vec(), move |ctx| {
            let mut out: Vec<Vec<T>> = widths
                .iter()
                .map(|w| Vec::with_capacity(rows * w))
                .collect();
            for row in ctx.grad.chunks_exact(total) {
                let mut off = 0;
                for (o, &w) in out.iter_mut().zip(&widths) {
                    o.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            out.into_iter().map(Some).collect()
        })
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Self> {
        let c = *self.shape().last().expect("non-empty shape");
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_last",
                format!("range {start}..{end} outside trailing dimension {c}"),
            ));
        }
        let w = end - start;
        let data = self
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("non-empty") = w;
        Tensor::from_op(shape, data, vec![self.clone()], move |ctx| {
            let rows = ctx.grad.len() / w;
            let mut g = vec![T::zero(); rows * c];
            for (dst, src) in g.chunks_exact_mut(c).zip(ctx.grad.chunks_exact(w)) {
                dst[start..end].copy_from_slice(src);
            }
            vec![Some(g)]
        })
    }

    /// Mean over the rows of a `[N, D]` tensor, giving `[1, D]`.
    pub fn mean_rows(&self) -> Result<Self> {
        let (n, d) = self.as_matrix("mean_rows")?;
        let inv = T::one() / T::lit(n as f64);
        let data = column_sums(self.data(), d)
            .into_iter()
            .map(|s| s * inv)
            .collect();
        Tensor::from_op(vec![1, d], data, vec![self.clone()], move |ctx| {
            let g: Vec<T> = (0..n)
                .flat_map(|_| ctx.grad.iter().map(|g| *g * inv))
                .collect();
            vec![Some(g)]
        })
    }

    /// Transpose of a `[M, N]` tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let data = transpose_buf(self.data(), m, n);
        Tensor::from_op(vec![n, m], data, vec![self.clone()], move |ctx| {
            vec![Some(transpose_buf(ctx.grad, n, m))]
        })
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", self.shape()),
            )),
        }
    }
}

pub(crate) fn column_sums<T: Real>(data: &[T], c: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for row in data.chunks_exact(c) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
    }
    acc
}

fn transpose_buf<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}
