//! Forward and backward kernels for the primitive tensor operations.
//!
//! These are plain functions on [`Tensor`]s. The [`crate::tape`] module
//! records which kernel produced which node and calls the matching backward
//! kernel during the reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `c = a·b + beta·c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.0.len() as isize >= span(m, k, a.1, a.2));
    assert!(b.0.len() as isize >= span(k, n, b.1, b.2));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err!("{op} expects a 2-D tensor, got {:?}", t.shape())),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, (a.data(), k as isize, 1), (b.data(), n as isize, 1), 0.0, &mut out);
    Tensor::checked(vec![m, n], out, "matmul")
}

/// Gradients of `a·b` with respect to `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, (grad.data(), n as isize, 1), (b.data(), 1, n as isize), 0.0, &mut da);
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, (a.data(), 1, k as isize), (grad.data(), n as isize, 1), 0.0, &mut db);
    (
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::checked(a.shape().to_vec(), data, "add")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::checked(a.shape().to_vec(), data, "mul")
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    Tensor::checked(a.shape().to_vec(), a.data().iter().map(|x| x * s).collect(), "scale")
}

/// Adds `bias[j]` to column `j` of a 2-D tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "add_bias")?;
    if bias.numel() != n {
        return Err(shape_err!("bias of {} values for {n} columns", bias.numel()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::checked(vec![m, n], out, "add_bias")
}

pub fn add_bias_backward(grad: &Tensor, bias_shape: &[usize]) -> Tensor {
    let n = grad.shape()[1];
    let mut db = vec![0.0; n];
    for row in grad.data().chunks_exact(n) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Tensor::from_parts(bias_shape.to_vec(), db)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn sigmoid_backward(out: &Tensor, grad: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_parts(out.shape().to_vec(), data)
}

pub fn sum(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    Tensor::checked(vec![1], vec![s], "sum")
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
    Tensor::checked(vec![1], vec![s], "mean")
}

/// Geometry of a 2-D convolution over an `[N, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = match *x {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input must be 3-D or 4-D, got {x:?}")),
        };
        let [c_out, kc, kh, kw] = *k else {
            return Err(shape_err!("conv2d kernel must be 4-D, got {k:?}"));
        };
        if kc != c_in {
            return Err(shape_err!("conv2d kernel expects {kc} channels, input has {c_in}"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if pad >= kh.max(kw) {
            return Err(Error::InvalidArgument(format!(
                "conv2d padding {pad} must be smaller than the kernel"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 3 {
            vec![self.c_out, self.oh, self.ow]
        } else {
            vec![self.batch, self.c_out, self.oh, self.ow]
        }
    }

    /// Visits every (patch row, output position, input offset) triple that
    /// lands inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let l = self.out_len();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * l + oy * self.ow + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }
}

/// Cross-correlation of `x` (`[C,H,W]` or `[N,C,H,W]`) with `kernel`
/// (`[C_out,C_in,KH,KW]`), plus an optional per-output-channel bias.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(shape_err!("conv2d bias has {} values for {} channels", b.numel(), g.c_out));
        }
    }
    let (pk, l) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; pk * l];
    let mut out = vec![0.0; g.batch * g.c_out * l];
    for n in 0..g.batch {
        g.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let o = &mut out[n * g.c_out * l..(n + 1) * g.c_out * l];
        if let Some(b) = bias {
            for (chan, bv) in o.chunks_exact_mut(l).zip(b.data()) {
                chan.fill(*bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.c_out, pk, l, (kernel.data(), pk as isize, 1), (&cols, l as isize, 1), beta, o);
    }
    Tensor::checked(g.out_shape(x.ndim()), out, "conv2d")
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`. The input
/// gradient is skipped when `need_input` is false.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    let (pk, l) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; pk * l];
    let mut dk = vec![0.0; g.c_out * pk];
    let mut db = vec![0.0; g.c_out];
    let mut dx = if need_input { vec![0.0; x.numel()] } else { Vec::new() };
    for n in 0..g.batch {
        let gn = &grad.data()[n * g.c_out * l..(n + 1) * g.c_out * l];
        for (d, chan) in db.iter_mut().zip(gn.chunks_exact(l)) {
            *d += chan.iter().sum::<f64>();
        }
        g.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(g.c_out, l, pk, (gn, l as isize, 1), (&cols, 1, l as isize), 1.0, &mut dk);
        if need_input {
            gemm(pk, g.c_out, l, (kernel.data(), 1, pk as isize), (gn, l as isize, 1), 0.0, &mut cols);
            g.col2im(&cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok((
        need_input.then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.c_out], db),
    ))
}

/// 2x2, stride-2 max pooling over `[N,C,H,W]`. Odd trailing rows/columns
/// are dropped. Returns the output and the flat input index of each maximum
/// (first occurrence wins ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(shape_err!("max_pool2 expects [N,C,H,W], got {:?}", x.shape()));
    };
    if h < 2 || w < 2 {
        return Err(shape_err!("max_pool2 needs at least 2x2 spatial input, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Tensor {
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        dx[i] += g;
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Spatial mean of each channel: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *x.shape() else {
        return Err(shape_err!("global_avg_pool expects [N,C,H,W], got {:?}", x.shape()));
    };
    let area = (h * w) as f64;
    let data = x.data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / area).collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let area: usize = input_shape[2..].iter().product();
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in grad.data() {
        dx.extend(std::iter::repeat(g / area as f64).take(area));
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Standardises each column of an `[N,D]` tensor over the batch dimension
/// using population variance plus `eps`. Returns the output and the
/// per-column `1/sqrt(var + eps)`.
pub fn batch_norm(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = dims2(x, "batch_norm")?;
    let xd = x.data();
    let mut mean = vec![0.0; d];
    for row in xd.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in xd.chunks_exact(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(n * d);
    for row in xd.chunks_exact(d) {
        for j in 0..d {
            out.push((row[j] - mean[j]) * inv_std[j]);
        }
    }
    Ok((Tensor::checked(vec![n, d], out, "batch_norm")?, inv_std))
}

/// Backward of [`batch_norm`] given its output `normed`.
pub fn batch_norm_backward(normed: &Tensor, inv_std: &[f64], grad: &Tensor) -> Tensor {
    let (n, d) = (normed.shape()[0], normed.shape()[1]);
    let (xh, g) = (normed.data(), grad.data());
    let mut mean_g = vec![0.0; d];
    let mut mean_gx = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean_g[j] += g[i * d + j];
            mean_gx[j] += g[i * d + j] * xh[i * d + j];
        }
    }
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let k = i * d + j;
            dx[k] = inv_std[j] * (g[k] - mean_g[j] / n as f64 - xh[k] * mean_gx[j] / n as f64);
        }
    }
    Tensor::from_parts(vec![n, d], dx)
}

/// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`,
/// evaluated in the numerically stable logit form.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(shape_err!("bce: {} logits vs {} targets", logits.len(), targets.len()));
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    let loss = total / logits.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("bce_with_logits".into()));
    }
    Ok(loss)
}

pub fn bce_with_logits_grad(logits: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid_scalar(z) - y) / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let ones = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        assert!(matches!(matmul(&a, &a.reshape(&[1, 4]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(&[7, 5], |i| ((i * 37) % 11) as f64 - 5.0).unwrap();
        let b = Tensor::from_fn(&[5, 3], |i| ((i * 13) % 7) as f64 * 0.5).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn conv_hand_cases() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap().data(), x.data());

        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let out = conv2d(&ones, &k, None, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(conv2d(&x, &k, None, 0, 0), Err(Error::InvalidArgument(_))));
        let big = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &big, None, 1, 0), Err(Error::InvalidArgument(_))));
        let wrong_c = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(matches!(conv2d(&x, &wrong_c, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_direct_sum_with_stride_and_pad() {
        let x = Tensor::from_fn(&[2, 2, 5, 6], |i| ((i * 7) % 13) as f64 - 6.0).unwrap();
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 9) as f64 * 0.25 - 1.0).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let (stride, pad) = (2, 1);
        let out = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
        let (oh, ow) = (3, 3);
        assert_eq!(out.shape(), &[2, 3, oh, ow]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                        acc += x.at(&[n, c, iy as usize, ix as usize])
                                            * k.at(&[o, c, ki, kj]);
                                    }
                                }
                            }
                        }
                        assert!((out.at(&[n, o, oy, ox]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0]).unwrap();
        let (out, arg) = max_pool2(&x).unwrap();
        assert_eq!(out.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn bce_is_zero_for_confident_correct_predictions() {
        let loss = bce_with_logits(&[40.0, -40.0], &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-15);
    }
}
