//! 2D convolution over `[H, W, C]` tensors via im2col and a single GEMM.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution: `floor((n + 2·padding − k) / stride) + 1`.
pub fn conv_output_size(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Input pixel read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

fn im2col<T: Real>(input: &[T], g: &Geometry) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.ho * g.wo * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = &input[(iy * g.w + ix) * g.cin..][..g.cin];
                        row[(ky * g.k + kx) * g.cin..][..g.cin].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let patch = g.patch();
    let mut out = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let dst = &mut out[(iy * g.w + ix) * g.cin..][..g.cin];
                        let src = &row[(ky * g.k + kx) * g.cin..][..g.cin];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                    }
                }
            }
        }
    }
    out
}

impl<T: Real> Tensor<T> {
    /// Cross-correlation of an `[H, W, Cin]` input with a `[k, k, Cin, Cout]`
    /// kernel, zero padded, without bias.
    pub fn conv2d(&self, kernel: &Self, stride: usize, padding: usize) -> Result<Self> {
        let [h, w, cin] = *self.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [H, W, C], got {:?}", self.shape()),
            ));
        };
        let [k, k2, kc, cout] = *kernel.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [k, k, Cin, Cout], got {:?}", kernel.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {k}x{k2}"),
            ));
        }
        if kc != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kc}"),
            ));
        }
        let (Some(ho), Some(wo)) = (
            conv_output_size(h, k, stride, padding),
            conv_output_size(w, k, stride, padding),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input too small for kernel {k} with padding {padding} (stride {stride})"),
            ));
        };
        let g = Geometry {
            h,
            w,
            cin,
            k,
            stride,
            padding,
            ho,
            wo,
        };
        let patch = g.patch();
        let rows = ho * wo;
        let cols = im2col(self.data(), &g);
        let mut data = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            patch,
            cout,
            &cols,
            false,
            kernel.data(),
            false,
            &mut data,
            false,
        );
        Tensor::from_op(
            vec![ho, wo, cout],
            data,
            vec![self.clone(), kernel.clone()],
            move |ctx| {
                let kern = ctx.parents[1].data();
                let gk = ctx.needs(1).then(|| {
                    let mut gk = vec![T::zero(); patch * cout];
                    T::gemm(
                        patch, rows, cout, &cols, true, ctx.grad, false, &mut gk, false,
                    );
                    gk
                });
                let gx = ctx.needs(0).then(|| {
                    let mut gcols = vec![T::zero(); rows * patch];
                    T::gemm(
                        rows, cout, patch, ctx.grad, false, kern, true, &mut gcols, false,
                    );
                    col2im(&gcols, &g)
                });
                vec![gx, gk]
            },
        )
    }
}
