//! Forward and adjoint kernels for the layer primitives.
//!
//! These are plain functions over [`Tensor`]s. The [`Tape`](crate::tape::Tape)
//! records applications of them and calls the adjoints during the reverse pass.
//!
//! Convolution is cross-correlation (the kernel is not flipped), lowered to
//! GEMM through an im2col buffer per example.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. With `trans_a` the buffer `a` is
/// stored as `k x m`; likewise `trans_b` means `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one cross-correlation: input `[C,H,W]`, kernel `[F,C,kh,kw]`,
/// output `[F,Ho,Wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Geometry for a forward convolution over an `h x w` input.
    pub fn forward(
        op: &'static str,
        (channels, h, w): (usize, usize, usize),
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel_shape.len() != 4 {
            return Err(Error::shape(
                op,
                format!("kernel must be [F,C,kh,kw], got {:?}", kernel_shape),
            ));
        }
        let (filters, kc, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kc != channels {
            return Err(Error::shape(
                op,
                format!("channel dimension: input has {channels}, kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape(op, "kernel spatial size must be positive"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(
                op,
                format!("height: kernel {kh} exceeds padded input {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(
                op,
                format!("width: kernel {kw} exceeds padded input {}", w + 2 * padding),
            ));
        }
        Ok(ConvGeometry {
            channels,
            height: h,
            width: w,
            filters,
            kh,
            kw,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the forward convolution whose adjoint maps an
    /// `[F, ho, wo]` input back to `[C, H, W]`, with
    /// `H = (ho - 1) * stride - 2 * padding + kh`.
    pub fn transposed(
        op: &'static str,
        (filters, ho, wo): (usize, usize, usize),
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel_shape.len() != 4 {
            return Err(Error::shape(
                op,
                format!("kernel must be [F,C,kh,kw], got {:?}", kernel_shape),
            ));
        }
        let (kf, channels, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kf != filters {
            return Err(Error::shape(
                op,
                format!("channel dimension: input has {filters}, kernel expects {kf}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        if ho == 0 || wo == 0 {
            return Err(Error::shape(op, "input spatial size must be positive"));
        }
        let h = ((ho - 1) * stride + kh)
            .checked_sub(2 * padding)
            .filter(|&h| h > 0)
            .ok_or_else(|| Error::shape(op, format!("height: padding {padding} too large")))?;
        let w = ((wo - 1) * stride + kw)
            .checked_sub(2 * padding)
            .filter(|&w| w > 0)
            .ok_or_else(|| Error::shape(op, format!("width: padding {padding} too large")))?;
        let g = ConvGeometry::forward(op, (channels, h, w), kernel_shape, stride, padding)?;
        debug_assert_eq!((g.out_height, g.out_width), (ho, wo));
        Ok(g)
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Lowers one `[C,H,W]` image to a `[C*kh*kw, Ho*Wo]` patch matrix.
fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let drow = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix into an image.
fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    let srow = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: &Tensor, len: usize) -> Result<()> {
    if bias.shape() != [len] {
        return Err(Error::shape(
            op,
            format!("bias must be [{len}], got {:?}", bias.shape()),
        ));
    }
    Ok(())
}

fn image_dims(op: &'static str, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *input.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("input must be [N,C,H,W], got {s:?}"))),
    }
}

/// Cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`, giving `[N,F,H',W']`
/// where `H' = (H + 2*padding - kh) / stride + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (n, c, h, w) = image_dims(OP, input)?;
    let g = ConvGeometry::forward(OP, (c, h, w), kernel.shape(), stride, padding)?;
    check_bias(OP, bias, g.filters)?;
    let (pl, ol) = (g.patch_len(), g.out_len());
    let mut out = Tensor::zeros([n, g.filters, g.out_height, g.out_width]);
    let mut cols = vec![0.0; pl * ol];
    for i in 0..n {
        im2col(&g, input.row(i), &mut cols);
        let dst = &mut out.data_mut()[i * g.filters * ol..(i + 1) * g.filters * ol];
        for (f, chunk) in dst.chunks_mut(ol).enumerate() {
            chunk.fill(bias.data()[f]);
        }
        gemm(g.filters, pl, ol, kernel.data(), false, &cols, false, dst, 1.0);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    const OP: &str = "conv2d";
    let (n, c, h, w) = image_dims(OP, input)?;
    let g = ConvGeometry::forward(OP, (c, h, w), kernel.shape(), stride, padding)?;
    let (pl, ol) = (g.patch_len(), g.out_len());
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros([g.filters]);
    let mut cols = vec![0.0; pl * ol];
    let mut d_cols = vec![0.0; pl * ol];
    for i in 0..n {
        let dy = grad_out.row(i);
        for (f, chunk) in dy.chunks(ol).enumerate() {
            d_bias.data_mut()[f] += chunk.iter().sum::<f64>();
        }
        im2col(&g, input.row(i), &mut cols);
        gemm(g.filters, ol, pl, dy, false, &cols, true, d_kernel.data_mut(), 1.0);
        gemm(pl, g.filters, ol, kernel.data(), true, dy, false, &mut d_cols, 0.0);
        let in_len = g.in_len();
        col2im(&g, &d_cols, &mut d_input.data_mut()[i * in_len..(i + 1) * in_len]);
    }
    Ok((d_input, d_kernel, d_bias))
}

/// Adjoint of [`conv2d`] with the same kernel: maps `[N,F,H',W']` to
/// `[N,C,H,W]` with `H = (H' - 1)*stride - 2*padding + kh`, then adds `bias[C]`.
///
/// For zero bias, `<conv2d(x), y> == <x, transposed_conv2d(y)>`.
pub fn transposed_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "transposed_conv2d";
    let (n, f, ho, wo) = image_dims(OP, input)?;
    let g = ConvGeometry::transposed(OP, (f, ho, wo), kernel.shape(), stride, padding)?;
    check_bias(OP, bias, g.channels)?;
    let (pl, ol, il) = (g.patch_len(), g.out_len(), g.in_len());
    let hw = g.height * g.width;
    let mut out = Tensor::zeros([n, g.channels, g.height, g.width]);
    let mut cols = vec![0.0; pl * ol];
    for i in 0..n {
        gemm(pl, f, ol, kernel.data(), true, input.row(i), false, &mut cols, 0.0);
        let dst = &mut out.data_mut()[i * il..(i + 1) * il];
        for (c, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data()[c]);
        }
        col2im(&g, &cols, dst);
    }
    Ok(out)
}

/// Gradients of [`transposed_conv2d`] with respect to input, kernel and bias.
pub(crate) fn transposed_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    const OP: &str = "transposed_conv2d";
    let (n, f, ho, wo) = image_dims(OP, input)?;
    let g = ConvGeometry::transposed(OP, (f, ho, wo), kernel.shape(), stride, padding)?;
    let (pl, ol) = (g.patch_len(), g.out_len());
    let hw = g.height * g.width;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros([g.channels]);
    let mut cols = vec![0.0; pl * ol];
    for i in 0..n {
        let dy = grad_out.row(i);
        for (c, chunk) in dy.chunks(hw).enumerate() {
            d_bias.data_mut()[c] += chunk.iter().sum::<f64>();
        }
        im2col(&g, dy, &mut cols);
        let dx = &mut d_input.data_mut()[i * f * ol..(i + 1) * f * ol];
        gemm(f, pl, ol, kernel.data(), false, &cols, false, dx, 0.0);
        gemm(f, ol, pl, input.row(i), false, &cols, true, d_kernel.data_mut(), 1.0);
    }
    Ok((d_input, d_kernel, d_bias))
}

/// Affine map `[N,D] x [D,M] + [M] -> [N,M]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "dense";
    let (n, d) = match *input.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape(OP, format!("input must be [N,D], got {s:?}"))),
    };
    let m = match *weight.shape() {
        [wd, m] if wd == d => m,
        ref s => {
            return Err(Error::shape(
                OP,
                format!("inner dimension: input has D={d}, weight is {s:?}"),
            ))
        }
    };
    check_bias(OP, bias, m)?;
    let mut out = Tensor::zeros([n, m]);
    for row in out.data_mut().chunks_mut(m.max(1)) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, d, m, input.data(), false, weight.data(), false, out.data_mut(), 1.0);
    Ok(out)
}

pub(crate) fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (input.dim(0), input.dim(1));
    let m = weight.dim(1);
    let mut d_input = Tensor::zeros([n, d]);
    let mut d_weight = Tensor::zeros([d, m]);
    let mut d_bias = Tensor::zeros([m]);
    gemm(n, m, d, grad_out.data(), false, weight.data(), true, d_input.data_mut(), 0.0);
    gemm(d, n, m, input.data(), true, grad_out.data(), false, d_weight.data_mut(), 0.0);
    for row in grad_out.data().chunks(m.max(1)) {
        for (b, g) in d_bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    (d_input, d_weight, d_bias)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn leaky_relu(t: &Tensor, slope: f64) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}
