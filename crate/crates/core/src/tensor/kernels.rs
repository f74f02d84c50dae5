//! Forward and backward kernels on raw row-major buffers.
//!
//! These know nothing about graphs; [`Var`](super::Var) wires them together.
//! Batch-level work is split per image (or per channel) through
//! [`crate::parallel`], and every reduction across images is summed in a fixed
//! group order so parallel and sequential runs agree bit for bit.

use super::{window_output_len, Element, Result, TensorError};
use crate::parallel::{for_each_chunk, map_range};

/// Images per partial sum when reducing kernel gradients over a batch.
const REDUCE_GROUP: usize = 4;

/// Resolved sizes of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = input;
        let [out_channels, k_in, kernel_h, kernel_w] = kernel;
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if in_channels != k_in {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d",
                input: in_channels,
                kernel: k_in,
            });
        }
        let too_large = || TensorError::WindowTooLarge {
            op: "conv2d",
            window: (kernel_h, kernel_w),
            padded: (in_h + 2 * pad, in_w + 2 * pad),
        };
        let out_h = window_output_len(in_h, kernel_h, stride, pad).ok_or_else(too_large)?;
        let out_w = window_output_len(in_w, kernel_w, stride, pad).ok_or_else(too_large)?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_image(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// 1×1, stride 1, no padding: the input image already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

fn im2col<T: Element>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let src = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    img.iter_mut().for_each(|v| *v = T::zero());
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dst = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[iy as usize * g.in_w + ix as usize] =
                                dst[iy as usize * g.in_w + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// im2col + GEMM convolution. `input` is NCHW, `kernel` OIHW.
pub fn conv2d_forward<T: Element>(input: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let (ckk, plane) = (g.patch_len(), g.out_plane());
    for_each_chunk(&mut out, g.out_image(), |n, out_img| {
        let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
        if g.is_pointwise() {
            T::gemm(
                g.out_channels,
                ckk,
                plane,
                kernel,
                (ckk as isize, 1),
                img,
                (plane as isize, 1),
                out_img,
                false,
            );
        } else {
            let mut cols = vec![T::zero(); ckk * plane];
            im2col(img, g, &mut cols);
            T::gemm(
                g.out_channels,
                ckk,
                plane,
                kernel,
                (ckk as isize, 1),
                &cols,
                (plane as isize, 1),
                out_img,
                false,
            );
        }
        if let Some(b) = bias {
            for (o, row) in out_img.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    });
    out
}

/// Reference convolution: a direct sliding-window loop.
pub fn conv2d_direct<T: Element>(input: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias.map_or(T::zero(), |b| b[o]);
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kj in 0..g.kernel_w {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                let x = input[((n * g.in_channels + c) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                let w = kernel[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                acc = acc + x * w;
                            }
                        }
                    }
                    out[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (ckk, plane) = (g.patch_len(), g.out_plane());
    let (need_input, need_kernel, need_bias) = need;

    let input_grad = need_input.then(|| {
        let mut dx = vec![T::zero(); g.batch * g.in_image()];
        for_each_chunk(&mut dx, g.in_image(), |n, dx_img| {
            let dy = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
            // kernelᵀ (ckk×O) · dy (O×plane)
            if g.is_pointwise() {
                T::gemm(
                    ckk,
                    g.out_channels,
                    plane,
                    kernel,
                    (1, ckk as isize),
                    dy,
                    (plane as isize, 1),
                    dx_img,
                    false,
                );
            } else {
                let mut dcols = vec![T::zero(); ckk * plane];
                T::gemm(
                    ckk,
                    g.out_channels,
                    plane,
                    kernel,
                    (1, ckk as isize),
                    dy,
                    (plane as isize, 1),
                    &mut dcols,
                    false,
                );
                col2im(&dcols, g, dx_img);
            }
        });
        dx
    });

    let kernel_grad = need_kernel.then(|| {
        let groups = g.batch.div_ceil(REDUCE_GROUP);
        let partials = map_range(groups, |grp| {
            let mut acc = vec![T::zero(); g.out_channels * ckk];
            let mut cols = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); ckk * plane]
            };
            for n in grp * REDUCE_GROUP..((grp + 1) * REDUCE_GROUP).min(g.batch) {
                let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
                let dy = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
                let cols_ref: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(img, g, &mut cols);
                    &cols
                };
                // dy (O×plane) · colsᵀ (plane×ckk)
                T::gemm(
                    g.out_channels,
                    plane,
                    ckk,
                    dy,
                    (plane as isize, 1),
                    cols_ref,
                    (1, plane as isize),
                    &mut acc,
                    true,
                );
            }
            acc
        });
        sum_in_order(partials, g.out_channels * ckk)
    });

    let bias_grad = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (o, d) in db.iter_mut().enumerate() {
                let start = n * g.out_image() + o * plane;
                *d = *d + grad_out[start..start + plane].iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

fn sum_in_order<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![T::zero(); len]);
    for p in iter {
        total.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
    }
    total
}

/// Resolved sizes of a max-pool window over NCHW planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: [usize; 4], window: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, in_h, in_w] = input;
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                reason: "window and stride must be positive".into(),
            });
        }
        // Otherwise a window could lie entirely in the padding.
        if 2 * pad > window {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                reason: format!("padding {pad} exceeds half the window {window}"),
            });
        }
        let too_large = || TensorError::WindowTooLarge {
            op: "max_pool2d",
            window: (window, window),
            padded: (in_h + 2 * pad, in_w + 2 * pad),
        };
        let out_h = window_output_len(in_h, window, stride, pad).ok_or_else(too_large)?;
        let out_w = window_output_len(in_w, window, stride, pad).ok_or_else(too_large)?;
        Ok(PoolGeometry {
            planes: n * c,
            in_h,
            in_w,
            window,
            stride,
            pad,
            out_h,
            out_w,
        })
    }
}

/// Max pooling; also returns, per output, the flat input offset of the
/// winning element (first maximum in row-major window order).
pub fn max_pool2d_forward<T: Element>(input: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let per_plane = map_range(g.planes, |p| {
        let src = &input[p * in_plane..(p + 1) * in_plane];
        let mut vals = Vec::with_capacity(out_plane);
        let mut idx = Vec::with_capacity(out_plane);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                for ki in 0..g.window {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kj in 0..g.window {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let at = iy as usize * g.in_w + ix as usize;
                        if best_at == usize::MAX || src[at] > best {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                vals.push(best);
                idx.push(p * in_plane + best_at);
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(g.planes * out_plane);
    let mut argmax = Vec::with_capacity(g.planes * out_plane);
    for (v, i) in per_plane {
        out.extend(v);
        argmax.extend(i);
    }
    (out, argmax)
}

pub fn max_pool2d_backward<T: Element>(grad_out: &[T], argmax: &[usize], g: &PoolGeometry) -> Vec<T> {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut dx = vec![T::zero(); g.planes * in_plane];
    for_each_chunk(&mut dx, in_plane, |p, plane| {
        let base = p * in_plane;
        for i in p * out_plane..(p + 1) * out_plane {
            let at = argmax[i] - base;
            plane[at] = plane[at] + grad_out[i];
        }
    });
    dx
}

pub fn global_avg_pool_forward<T: Element>(input: &[T], planes: usize, plane: usize) -> Vec<T> {
    let denom = T::from_usize(plane).unwrap();
    (0..planes)
        .map(|p| input[p * plane..(p + 1) * plane].iter().copied().sum::<T>() / denom)
        .collect()
}

pub fn global_avg_pool_backward<T: Element>(grad_out: &[T], plane: usize) -> Vec<T> {
    let denom = T::from_usize(plane).unwrap();
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, plane))
        .collect()
}

/// Per-channel results of a batch-norm forward pass.
pub struct BatchNormForward<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased (n−1) variance, the quantity blended into running statistics.
    pub batch_var: Vec<T>,
}

/// Batch normalization with batch statistics over N×H×W for each channel.
pub fn batch_norm_train<T: Element>(
    input: &[T],
    dims: [usize; 4],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<BatchNormForward<T>> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(TensorError::SingleValueBatch);
    }
    let m = T::from_usize(count).unwrap();
    let stats = map_range(c, |ch| {
        let values = (0..n).flat_map(|b| input[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied());
        let mean = values.clone().sum::<T>() / m;
        let sq = values.map(|x| (x - mean) * (x - mean)).sum::<T>();
        (mean, sq / m, sq / (m - T::one()))
    });
    let batch_mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let inv_std: Vec<T> = stats.iter().map(|s| T::one() / (s.1 + eps).sqrt()).collect();
    let batch_var: Vec<T> = stats.iter().map(|s| s.2).collect();
    let (output, normalized) = normalize(input, dims, &batch_mean, &inv_std, gamma, beta);
    Ok(BatchNormForward {
        output,
        normalized,
        inv_std,
        batch_mean,
        batch_var,
    })
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<T: Element>(
    input: &[T],
    dims: [usize; 4],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (output, normalized) = normalize(input, dims, running_mean, &inv_std, gamma, beta);
    (output, normalized, inv_std)
}

fn normalize<T: Element>(
    input: &[T],
    dims: [usize; 4],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let [_, c, h, w] = dims;
    let plane = h * w;
    let mut normalized = vec![T::zero(); input.len()];
    for_each_chunk(&mut normalized, plane, |p, out| {
        let ch = p % c;
        let src = &input[p * plane..(p + 1) * plane];
        for (o, &x) in out.iter_mut().zip(src) {
            *o = (x - mean[ch]) * inv_std[ch];
        }
    });
    let mut output = vec![T::zero(); input.len()];
    for_each_chunk(&mut output, plane, |p, out| {
        let ch = p % c;
        let src = &normalized[p * plane..(p + 1) * plane];
        for (o, &xh) in out.iter_mut().zip(src) {
            *o = gamma[ch] * xh + beta[ch];
        }
    });
    (output, normalized)
}

/// Per-channel Σdy and Σdy·x̂ (the gradients of beta and gamma).
pub fn batch_norm_param_grads<T: Element>(grad_out: &[T], normalized: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let sums = map_range(c, |ch| {
        let mut dgamma = T::zero();
        let mut dbeta = T::zero();
        for b in 0..n {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (&dy, &xh) in grad_out[range.clone()].iter().zip(&normalized[range]) {
                dgamma = dgamma + dy * xh;
                dbeta = dbeta + dy;
            }
        }
        (dgamma, dbeta)
    });
    sums.into_iter().unzip()
}

/// Input gradient when statistics came from the batch itself.
pub fn batch_norm_train_input_grad<T: Element>(
    grad_out: &[T],
    normalized: &[T],
    dims: [usize; 4],
    gamma: &[T],
    inv_std: &[T],
    dgamma: &[T],
    dbeta: &[T],
) -> Vec<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let m = T::from_usize(n * plane).unwrap();
    let mut dx = vec![T::zero(); grad_out.len()];
    for_each_chunk(&mut dx, plane, |p, out| {
        let ch = p % c;
        let scale = gamma[ch] * inv_std[ch] / m;
        let range = p * plane..(p + 1) * plane;
        for ((o, &dy), &xh) in out.iter_mut().zip(&grad_out[range.clone()]).zip(&normalized[range]) {
            *o = scale * (m * dy - dbeta[ch] - xh * dgamma[ch]);
        }
    });
    dx
}

/// Input gradient when statistics were fixed constants.
pub fn batch_norm_eval_input_grad<T: Element>(grad_out: &[T], dims: [usize; 4], gamma: &[T], inv_std: &[T]) -> Vec<T> {
    let [_, c, h, w] = dims;
    let plane = h * w;
    let mut dx = vec![T::zero(); grad_out.len()];
    for_each_chunk(&mut dx, plane, |p, out| {
        let ch = p % c;
        let scale = gamma[ch] * inv_std[ch];
        for (o, &dy) in out.iter_mut().zip(&grad_out[p * plane..(p + 1) * plane]) {
            *o = scale * dy;
        }
    });
    dx
}

/// `input (N×D) · weight (D×K) + bias`.
pub fn affine_forward<T: Element>(input: &[T], weight: &[T], bias: &[T], n: usize, d: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    T::gemm(
        n,
        d,
        k,
        input,
        (d as isize, 1),
        weight,
        (k as isize, 1),
        &mut out,
        false,
    );
    for row in out.chunks_mut(k) {
        row.iter_mut().zip(bias).for_each(|(o, &b)| *o = *o + b);
    }
    out
}

pub fn affine_input_grad<T: Element>(grad_out: &[T], weight: &[T], n: usize, d: usize, k: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * d];
    T::gemm(
        n,
        k,
        d,
        grad_out,
        (k as isize, 1),
        weight,
        (1, k as isize),
        &mut dx,
        false,
    );
    dx
}

pub fn affine_weight_grad<T: Element>(input: &[T], grad_out: &[T], n: usize, d: usize, k: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); d * k];
    T::gemm(
        d,
        n,
        k,
        input,
        (1, d as isize),
        grad_out,
        (k as isize, 1),
        &mut dw,
        false,
    );
    dw
}

pub fn affine_bias_grad<T: Element>(grad_out: &[T], k: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k];
    for row in grad_out.chunks(k) {
        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
    }
    db
}

/// Row-wise softmax (max-subtracted) and the mean negative log-likelihood of
/// the targets.
pub fn softmax_cross_entropy<T: Element>(logits: &[T], targets: &[usize], k: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for ((row, out), &t) in logits.chunks(k).zip(probs.chunks_mut(k)).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - max).exp();
            denom = denom + *o;
        }
        out.iter_mut().for_each(|p| *p = *p / denom);
        total = total + (denom.ln() - (row[t] - max));
    }
    (total / T::from_usize(targets.len()).unwrap(), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn gemm_path_matches_direct_loop() {
        let mut s = 7u64;
        for &(n, c, h, w, o, k, stride, pad) in &[
            (2, 3, 9, 7, 4, 3, 1, 1),
            (1, 2, 11, 11, 3, 7, 2, 3),
            (3, 4, 5, 6, 2, 1, 1, 0),
            (2, 2, 8, 8, 5, 1, 2, 0),
            (1, 1, 4, 4, 1, 4, 3, 2),
        ] {
            let g = ConvGeometry::new([n, c, h, w], [o, c, k, k], stride, pad).unwrap();
            let x: Vec<f64> = (0..n * c * h * w).map(|_| lcg(&mut s)).collect();
            let kern: Vec<f64> = (0..o * c * k * k).map(|_| lcg(&mut s)).collect();
            let b: Vec<f64> = (0..o).map(|_| lcg(&mut s)).collect();
            let fast = conv2d_forward(&x, &kern, Some(&b), &g);
            let slow = conv2d_direct(&x, &kern, Some(&b), &g);
            for (a, r) in fast.iter().zip(&slow) {
                assert!((a - r).abs() <= 1e-12 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn max_pool_first_maximum_wins_ties() {
        let g = PoolGeometry::new([1, 1, 2, 2], 2, 2, 0).unwrap();
        let (out, idx) = max_pool2d_forward(&[5.0f64, 5.0, 1.0, 5.0], &g);
        assert_eq!(out, vec![5.0]);
        assert_eq!(idx, vec![0]);
        let dx = max_pool2d_backward(&[2.0f64], &idx, &g);
        assert_eq!(dx, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_padding_beyond_half_window() {
        assert!(PoolGeometry::new([1, 1, 4, 4], 2, 1, 2).is_err());
        assert!(matches!(
            PoolGeometry::new([1, 1, 1, 1], 3, 1, 0),
            Err(TensorError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn batch_norm_hand_example() {
        let eps = 1e-5f64;
        let f = batch_norm_train(&[-1.0, 1.0], [2, 1, 1, 1], &[1.0], &[0.0], eps).unwrap();
        let want = 1.0 / (1.0 + eps).sqrt();
        assert!((f.output[0] + want).abs() < 1e-15);
        assert!((f.output[1] - want).abs() < 1e-15);
        assert_eq!(f.batch_mean, vec![0.0]);
        assert_eq!(f.batch_var, vec![2.0]);
        assert!(matches!(
            batch_norm_train(&[3.0f64], [1, 1, 1, 1], &[1.0], &[0.0], eps),
            Err(TensorError::SingleValueBatch)
        ));
    }
}
