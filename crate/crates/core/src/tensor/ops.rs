use super::Tensor;
use crate::error::{Error, Result};

/// `c = a * b` (or `c += a * b`) for row/column-strided matrices.
///
/// Dimensions are `m x k` times `k x n`. Summation order depends only on the
/// dimensions and the CPU feature set, so results are reproducible run to run.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last =
        |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len() && last(k, n, b_strides) < b.len());
    }
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::Shape(format!(
            "{what} must be a matrix, got shape {s:?}"
        ))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
    Tensor::new([m, n], out)
}

/// Returns `(dA, dB) = (dY * B^T, A^T * dY)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 || grad_out.shape() != [m, n] {
        return Err(Error::Shape(format!(
            "matmul backward: {m}x{k} * {k2}x{n} with upstream {:?}",
            grad_out.shape()
        )));
    }
    let mut da = vec![0.0; m * k];
    gemm(
        m,
        n,
        k,
        grad_out.data(),
        (n, 1),
        b.data(),
        (1, n),
        &mut da,
        false,
    );
    let mut db = vec![0.0; k * n];
    gemm(
        k,
        m,
        n,
        a.data(),
        (1, k),
        grad_out.data(),
        (n, 1),
        &mut db,
        false,
    );
    Ok((Tensor::new([m, k], da)?, Tensor::new([k, n], db)?))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = matrix_dims(x, "softmax input")?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n.max(1)) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Given the softmax output `y` and upstream `g`, per row
/// `dx_i = y_i * (g_i - sum_j y_j g_j)`.
pub fn softmax_rows_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (_, n) = matrix_dims(y, "softmax output")?;
    if grad_out.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "softmax backward: output {:?} vs upstream {:?}",
            y.shape(),
            grad_out.shape()
        )));
    }
    let mut dx = vec![0.0; y.numel()];
    for ((d, yr), gr) in dx
        .chunks_exact_mut(n.max(1))
        .zip(y.data().chunks_exact(n.max(1)))
        .zip(grad_out.data().chunks_exact(n.max(1)))
    {
        softmax_backward_row(yr, gr, d);
    }
    Tensor::new(y.shape().to_vec(), dx)
}

pub(crate) fn softmax_backward_row(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Passes the upstream gradient where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu backward: input {:?} vs upstream {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Target size, in elements, of the im2col buffer for one chunk of samples.
/// Keeping it cache-sized matters more than giving the GEMM wide matrices.
const COLS_BUDGET: usize = 1 << 16;

/// What `conv2d_backward` needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvContext {
    input_shape: Vec<usize>,
    geom: ConvGeometry,
    input: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    ksize: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    out_channels: usize,
}

impl ConvGeometry {
    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn rows(&self) -> usize {
        self.in_channels * self.ksize * self.ksize
    }

    /// Samples per chunk.
    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kj).min(self.out_w);
        let hi = (self.in_w + self.padding)
            .saturating_sub(kj)
            .min(self.out_w)
            .max(lo);
        (lo, hi)
    }

    /// Fill `cols` (`rows x (count * plane)`) for samples `first..first + count`.
    fn im2col(&self, x: &[f64], first: usize, count: usize, cols: &mut [f64]) {
        let (k, pad, plane) = (self.ksize, self.padding, self.plane());
        let ncols = count * plane;
        cols[..self.rows() * ncols].fill(0.0);
        for ci in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let (lo, hi) = self.valid_cols(kj);
                    for s in 0..count {
                        let src = &x[((first + s) * self.in_channels + ci) * self.in_plane()..]
                            [..self.in_plane()];
                        let dst = &mut cols[row * ncols + s * plane..][..plane];
                        for oy in 0..self.out_h {
                            let iy = oy + ki;
                            if iy < pad || iy - pad >= self.in_h || lo == hi {
                                continue;
                            }
                            let src_row = &src[(iy - pad) * self.in_w..][..self.in_w];
                            dst[oy * self.out_w + lo..oy * self.out_w + hi]
                                .copy_from_slice(&src_row[lo + kj - pad..hi + kj - pad]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `dcols` back onto the input gradient of samples `first..first + count`.
    fn col2im(&self, dcols: &[f64], first: usize, count: usize, dx: &mut [f64]) {
        let (k, pad, plane) = (self.ksize, self.padding, self.plane());
        let ncols = count * plane;
        for ci in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let (lo, hi) = self.valid_cols(kj);
                    for s in 0..count {
                        let src = &dcols[row * ncols + s * plane..][..plane];
                        let dst = &mut dx
                            [((first + s) * self.in_channels + ci) * self.in_plane()..]
                            [..self.in_plane()];
                        for oy in 0..self.out_h {
                            let iy = oy + ki;
                            if iy < pad || iy - pad >= self.in_h || lo == hi {
                                continue;
                            }
                            let dst_row = &mut dst[(iy - pad) * self.in_w..][..self.in_w];
                            let src_row = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                            for (d, v) in dst_row[lo + kj - pad..hi + kj - pad]
                                .iter_mut()
                                .zip(src_row)
                            {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl ConvContext {
    pub fn input_shape(&self) -> Vec<usize> {
        self.input_shape.clone()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let g = &self.geom;
        if self.input_shape.len() == 3 {
            vec![g.out_channels, g.out_h, g.out_w]
        } else {
            vec![g.batch, g.out_channels, g.out_h, g.out_w]
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller asked not to propagate into the input.
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Stride-1 cross-correlation (no kernel flip) plus per-channel bias.
///
/// `input` is `C_in x H x W` or batched `N x C_in x H x W`; `kernel` is
/// `C_out x C_in x k x k`. Out-of-range taps read zero.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    conv2d_forward(input, kernel, bias, padding).map(|(out, _)| out)
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
) -> Result<(Tensor, ConvContext)> {
    let (batch, in_channels, in_h, in_w) = match *input.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        ref s => {
            return Err(Error::Shape(format!(
                "conv2d input must be CxHxW or NxCxHxW, got {s:?}"
            )))
        }
    };
    let (out_channels, k_in, kh, kw) = match *kernel.shape() {
        [o, i, kh, kw] => (o, i, kh, kw),
        ref s => {
            return Err(Error::Shape(format!(
                "conv2d kernel must be 4-D, got {s:?}"
            )))
        }
    };
    if k_in != in_channels {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {in_channels}, kernel expects {k_in}"
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!(
            "conv2d kernel must be square, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [out_channels] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?}, expected [{out_channels}]",
            bias.shape()
        )));
    }
    let k = kh;
    if in_h + 2 * padding < k || in_w + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv2d kernel {k} larger than padded input {in_h}x{in_w}"
        )));
    }
    let g = ConvGeometry {
        batch,
        in_channels,
        in_h,
        in_w,
        ksize: k,
        padding,
        out_h: in_h + 2 * padding + 1 - k,
        out_w: in_w + 2 * padding + 1 - k,
        out_channels,
    };
    let (plane, nrows, chunk) = (g.plane(), g.rows(), g.chunk());

    let x = input.data();
    let mut cols = vec![0.0; nrows * chunk * plane];
    let mut prod = vec![0.0; out_channels * chunk * plane];
    let mut out = vec![0.0; batch * out_channels * plane];
    let mut first = 0;
    while first < batch {
        let count = chunk.min(batch - first);
        let ncols = count * plane;
        g.im2col(x, first, count, &mut cols);
        gemm(
            out_channels,
            nrows,
            ncols,
            kernel.data(),
            (nrows, 1),
            &cols,
            (ncols, 1),
            &mut prod,
            false,
        );
        for s in 0..count {
            for co in 0..out_channels {
                let b = bias.data()[co];
                let src = &prod[co * ncols + s * plane..][..plane];
                let dst = &mut out[((first + s) * out_channels + co) * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        first += count;
    }

    let ctx = ConvContext {
        input_shape: input.shape().to_vec(),
        geom: g,
        input: x.to_vec(),
    };
    Ok((Tensor::new(ctx.output_shape(), out)?, ctx))
}

/// Vector-Jacobian products of `conv2d` with respect to its input, kernel and bias.
pub fn conv2d_backward(
    ctx: &ConvContext,
    kernel: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    if grad_out.shape() != ctx.output_shape().as_slice() {
        return Err(Error::Usage(format!(
            "conv2d backward: upstream gradient {:?} does not match the forward output {:?}",
            grad_out.shape(),
            ctx.output_shape()
        )));
    }
    let g = ctx.geom;
    let k = g.ksize;
    if kernel.shape() != [g.out_channels, g.in_channels, k, k] {
        return Err(Error::Usage(format!(
            "conv2d backward: kernel {:?} differs from the forward kernel",
            kernel.shape()
        )));
    }
    let (plane, nrows, chunk, c_out) = (g.plane(), g.rows(), g.chunk(), g.out_channels);
    let grad = grad_out.data();

    let mut bias = vec![0.0; c_out];
    for (i, row) in grad.chunks_exact(plane.max(1)).enumerate() {
        bias[i % c_out] += row.iter().sum::<f64>();
    }

    let mut cols = vec![0.0; nrows * chunk * plane];
    let mut gmat = vec![0.0; c_out * chunk * plane];
    let mut dcols = if need_input {
        vec![0.0; nrows * chunk * plane]
    } else {
        Vec::new()
    };
    let mut dk = vec![0.0; c_out * nrows];
    let mut dx = if need_input {
        vec![0.0; g.batch * g.in_channels * g.in_plane()]
    } else {
        Vec::new()
    };
    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let ncols = count * plane;
        // Upstream gradient of this chunk as a C_out x (count * H' * W') matrix.
        for s in 0..count {
            for co in 0..c_out {
                gmat[co * ncols + s * plane..][..plane]
                    .copy_from_slice(&grad[((first + s) * c_out + co) * plane..][..plane]);
            }
        }
        g.im2col(&ctx.input, first, count, &mut cols);
        gemm(
            c_out,
            ncols,
            nrows,
            &gmat,
            (ncols, 1),
            &cols,
            (1, ncols),
            &mut dk,
            first > 0,
        );
        if need_input {
            gemm(
                nrows,
                c_out,
                ncols,
                kernel.data(),
                (1, nrows),
                &gmat,
                (ncols, 1),
                &mut dcols,
                false,
            );
            g.col2im(&dcols, first, count, &mut dx);
        }
        first += count;
    }

    let input = if need_input {
        Some(Tensor::new(ctx.input_shape.clone(), dx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::new([c_out], bias)?,
    })
}
