//! Forward and backward kernels, free of any tape bookkeeping.
//!
//! Batch items are processed in parallel where it pays off; every
//! cross-item reduction is then summed in ascending item order so the
//! result does not depend on the thread count.

use rayon::prelude::*;

use super::{BatchNormState, ConvSpec, Mode, Result, Tensor, TensorError};

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// `c = a·b` (`beta = 0`) or `c += a·b` (`beta = 1`) on raw strided buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents above bound every strided access
    // matrixmultiply performs, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c_in * self.spec.kernel_h * self.spec.kernel_w
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        let s = &self.spec;
        s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.pad_h == 0 && s.pad_w == 0
    }

    /// Unfolds one image into a `[C·kh·kw, H'·W']` patch matrix.
    fn im2col(&self, image: &[f64], col: &mut [f64]) {
        let s = &self.spec;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..s.kernel_h {
                for kj in 0..s.kernel_w {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * s.stride + ki) as isize - s.pad_h as isize;
                        let out_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kj) as isize - s.pad_w as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch gradients back.
    fn col2im(&self, col: &[f64], image: &mut [f64]) {
        let s = &self.spec;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..s.kernel_h {
                for kj in 0..s.kernel_w {
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * s.stride + ki) as isize - s.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * s.stride + kj) as isize - s.pad_w as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<(usize, ConvGeom)> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    if weights.shape() != spec.weight_shape() {
        return Err(shape_err(
            "conv2d",
            format!(
                "weight shape {:?} does not match spec {:?}",
                weights.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if c != spec.in_channels {
        return Err(shape_err(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => {}
        (None, false) => {}
        (b, _) => {
            return Err(shape_err(
                "conv2d",
                format!(
                    "bias {:?} inconsistent with has_bias={} and {} output channels",
                    b.map(Tensor::shape),
                    spec.has_bias,
                    spec.out_channels
                ),
            ))
        }
    }
    let (h_out, w_out) = spec.output_hw(h, w)?;
    Ok((
        n,
        ConvGeom {
            c_in: c,
            h,
            w,
            h_out,
            w_out,
            spec: *spec,
        },
    ))
}

/// Cross-correlation of `input[N,Cin,H,W]` with `weights[Cout,Cin,kh,kw]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, g) = conv_geom(input, weights, bias, spec)?;
    let c_out = spec.out_channels;
    let p = g.positions();
    let k = g.cols();
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; n * c_out * p];
    out.par_chunks_mut(c_out * p).enumerate().for_each(|(i, dst)| {
        let image = &input.data()[i * in_len..(i + 1) * in_len];
        let mut scratch;
        let col: &[f64] = if g.is_pointwise() {
            image
        } else {
            scratch = vec![0.0; k * p];
            g.im2col(image, &mut scratch);
            &scratch
        };
        gemm(c_out, k, p, weights.data(), (k, 1), col, (p, 1), 0.0, dst);
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new(vec![n, c_out, g.h_out, g.w_out], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let (n, g) = conv_geom(input, weights, None, &spec.with_bias(false))?;
    let c_out = spec.out_channels;
    let p = g.positions();
    let k = g.cols();
    let in_len = g.c_in * g.h * g.w;
    if grad_out.shape() != [n, c_out, g.h_out, g.w_out] {
        return Err(shape_err(
            "conv2d backward",
            format!("gradient shape {:?} does not match output", grad_out.shape()),
        ));
    }
    let per_item: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let image = &input.data()[i * in_len..(i + 1) * in_len];
            let dy = &grad_out.data()[i * c_out * p..(i + 1) * c_out * p];
            let mut scratch;
            let col: &[f64] = if g.is_pointwise() {
                image
            } else {
                scratch = vec![0.0; k * p];
                g.im2col(image, &mut scratch);
                &scratch
            };
            let mut dw = vec![0.0; c_out * k];
            gemm(c_out, p, k, dy, (p, 1), col, (1, p), 0.0, &mut dw);
            let dx = need_input.then(|| {
                let mut dcol = vec![0.0; k * p];
                gemm(k, c_out, p, weights.data(), (1, k), dy, (p, 1), 0.0, &mut dcol);
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![0.0; in_len];
                    g.col2im(&dcol, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![0.0; c_out * k];
    let mut dx = need_input.then(|| Vec::with_capacity(n * in_len));
    for (item_dw, item_dx) in per_item {
        dw.iter_mut().zip(&item_dw).for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(part)) = (dx.as_mut(), item_dx) {
            acc.extend_from_slice(&part);
        }
    }
    let bias = spec.has_bias.then(|| {
        let mut db = vec![0.0; c_out];
        for item in grad_out.data().chunks(c_out * p) {
            for (acc, row) in db.iter_mut().zip(item.chunks(p)) {
                *acc += row.iter().sum::<f64>();
            }
        }
        Tensor::new(vec![c_out], db).expect("bias length")
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        weights: Tensor::new(weights.shape().to_vec(), dw)?,
        bias,
    })
}

fn pool_out(op: &'static str, size: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(TensorError::Config {
            op,
            detail: "window and stride must be positive".into(),
        });
    }
    if size + 2 * pad < window {
        return Err(TensorError::Config {
            op,
            detail: format!("window {window} larger than input extent {size} (+{pad} padding)"),
        });
    }
    Ok((size + 2 * pad - window) / stride + 1)
}

/// Max pooling without padding. Returns the output and, per output
/// element, the flat input index that won (first in row-major order on ties).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    let ho = pool_out("maxpool2d", h, window, stride, 0)?;
    let wo = pool_out("maxpool2d", w, window, stride, 0)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[idx] += g;
    }
    dx
}

/// Average pooling with zero padding; padded cells are excluded from the divisor.
pub fn avgpool2d(input: &Tensor, window: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("avgpool2d")?;
    let ho = pool_out("avgpool2d", h, window, stride, pad)?;
    let wo = pool_out("avgpool2d", w, window, stride, pad)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let (y0, y1) = window_range(oy, stride, pad, window, h);
            for ox in 0..wo {
                let (x0, x1) = window_range(ox, stride, pad, window, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += x[base + y * w + x0..base + y * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

fn window_range(o: usize, stride: usize, pad: usize, window: usize, size: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + window as isize).min(size as isize)) as usize;
    (lo, hi)
}

pub fn avgpool2d_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err("avgpool2d backward", format!("{input_shape:?}"))),
    };
    let (_, _, ho, wo) = grad_out.dims4("avgpool2d backward")?;
    let mut dx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let (y0, y1) = window_range(oy, stride, pad, window, h);
            for ox in 0..wo {
                let (x0, x1) = window_range(ox, stride, pad, window, w);
                let share = g[plane * ho * wo + oy * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    d[base + y * w + x0..base + y * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avgpool")?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avgpool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(input_shape.to_vec(), data).expect("pool gradient length")
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(0.0))
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > 0.0 {
            grad_out.data()[i]
        } else {
            0.0
        }
    })
}

/// Values cached by a batchnorm forward pass for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Biased per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel normalization of `[N,C,H,W]`.
///
/// Train mode normalizes with the (biased) batch statistics and folds them
/// into `state` as `running = momentum·running + (1 − momentum)·batch`.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    let (out, cache, stats) = batchnorm_forward(input, gamma, beta, state, mode)?;
    if let Some(stats) = stats {
        state.update(&stats);
    }
    Ok((out, cache))
}

/// Like [`batchnorm`] but leaves `state` untouched and hands back the
/// batch statistics (train mode) for the caller to fold in.
pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache, Option<BatchStats>)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
        return Err(shape_err(
            "batchnorm",
            format!(
                "{c} channels but gamma {:?}, beta {:?}, state {}",
                gamma.shape(),
                beta.shape(),
                state.channels()
            ),
        ));
    }
    let hw = h * w;
    let count = n * hw;
    let x = input.data();
    let stats = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(TensorError::DegenerateBatch(count));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let plane = || (0..n).flat_map(|i| x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
                let m = plane().sum::<f64>() / count as f64;
                mean[ch] = m;
                var[ch] = plane().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
            }
            Some(BatchStats { mean, var })
        }
        Mode::Eval => None,
    };
    let (mean, var) = match &stats {
        Some(s) => (&s.mean, &s.var),
        None => (&state.running_mean, &state.running_var),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for j in off..off + hw {
                let xh = (x[j] - mean[ch]) * inv_std[ch];
                normalized[j] = xh;
                out[j] = g * xh + b;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache {
            normalized,
            inv_std,
            mode,
        },
        stats,
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward(cache: &BatchNormCache, gamma: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let shape = grad_out.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = &cache.normalized;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dgamma[ch] += dy[j] * xh[j];
                dbeta[ch] += dy[j];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let g = gamma.data()[ch];
            let s = cache.inv_std[ch];
            for j in off..off + hw {
                dx[j] = match cache.mode {
                    Mode::Eval => dy[j] * g * s,
                    Mode::Train => g * s * (dy[j] - dbeta[ch] / count - xh[j] * dgamma[ch] / count),
                };
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), dx).expect("same shape"),
        Tensor::new(vec![c], dgamma).expect("channels"),
        Tensor::new(vec![c], dbeta).expect("channels"),
    )
}

/// Concatenates `[N,Ci,H,W]` tensors along the channel axis, in order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err("concat_channels", "no inputs".into()))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total_c = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4("concat_channels")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(shape_err(
                "concat_channels",
                format!("input {:?} does not share N,H,W with {:?}", t.shape(), first.shape()),
            ));
        }
        total_c += tc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for i in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[i * c * hw..(i + 1) * c * hw]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Channels `[start, end)` of a `[N,C,H,W]` tensor.
pub fn slice_channels(input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("slice_channels")?;
    if start >= end || end > c {
        return Err(shape_err(
            "slice_channels",
            format!("range {start}..{end} invalid for {c} channels"),
        ));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (end - start) * hw);
    for i in 0..n {
        out.extend_from_slice(&input.data()[(i * c + start) * hw..(i * c + end) * hw]);
    }
    Tensor::new(vec![n, end - start, h, w], out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `trunk + scale·branch`.
pub fn residual_add_scaled(trunk: &Tensor, branch: &Tensor, scale: f64) -> Result<Tensor> {
    same_shape("residual_add_scaled", trunk, branch)?;
    Ok(Tensor::from_fn(trunk.shape(), |i| {
        trunk.data()[i] + scale * branch.data()[i]
    }))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    residual_add_scaled(a, b, 1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]))
}

/// `input[N,F] · weightsᵀ + bias` with `weights[K,F]`, `bias[K]`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f) = input.dims2("linear")?;
    let (k, wf) = weights.dims2("linear")?;
    if wf != f || bias.shape() != [k] {
        return Err(shape_err(
            "linear",
            format!(
                "input {:?}, weights {:?}, bias {:?}",
                input.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = vec![0.0; n * k];
    for row in out.chunks_mut(k) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, f, k, input.data(), (f, 1), weights.data(), (1, f), 1.0, &mut out);
    Tensor::new(vec![n, k], out)
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn linear_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let k = weights.shape()[0];
    let dy = grad_out.data();
    let mut dx = vec![0.0; n * f];
    gemm(n, k, f, dy, (k, 1), weights.data(), (f, 1), 0.0, &mut dx);
    let mut dw = vec![0.0; k * f];
    gemm(k, n, f, dy, (1, k), input.data(), (f, 1), 0.0, &mut dw);
    let mut db = vec![0.0; k];
    for row in dy.chunks(k) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    (
        Tensor::new(vec![n, f], dx).expect("shape"),
        Tensor::new(vec![k, f], dw).expect("shape"),
        Tensor::new(vec![k], db).expect("shape"),
    )
}

/// Row-wise softmax of `[N,K]` logits, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss together with the probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(TensorError::Label { row, label, classes: k });
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_z - row[label];
    }
    Ok((loss / n as f64, probs))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad_loss: f64) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = grad_loss / n as f64;
    let mut d = probs.data().to_vec();
    for (row, &label) in d.chunks_mut(k).zip(labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(probs.shape().to_vec(), d).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::valid(1, 1, 2, 1)).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), [4.0; 4]);
    }

    #[test]
    fn conv_diagonal_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &w, None, &ConvSpec::valid(1, 1, 2, 1)).unwrap();
        assert_eq!(y.data(), [5.0]);
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f64 * 0.37).sin() * 1e3);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, None, &ConvSpec::valid(1, 1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, &ConvSpec::valid(1, 1, 3, 1)),
            Err(TensorError::Shape { .. })
        ));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, None, &ConvSpec::valid(2, 1, 5, 1)),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn conv_padding_and_stride() {
        // 3×3 ones kernel over a 3×3 ones image with pad 1, stride 2: corners see 4 ones.
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let spec = ConvSpec::valid(1, 1, 3, 2).with_padding(1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), [4.0; 4]);
    }

    #[test]
    fn maxpool_examples() {
        let (y, _) = maxpool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(y.data(), [4.0]);

        let x = t(&[1, 1, 2, 2], &[1.0, 5.0, 5.0, 2.0]);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), [5.0]);
        let dx = maxpool2d_backward(x.shape(), &arg, &t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(dx.data(), [0.0, 1.0, 0.0, 0.0]);

        let x = Tensor::full(&[1, 1, 4, 4], 3.0);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), [3.0; 4]);
        assert_eq!(arg, [0, 2, 8, 10]);

        assert!(matches!(
            maxpool2d(&Tensor::zeros(&[1, 1, 2, 2]), 3, 1),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn global_avgpool_examples() {
        let y = global_avgpool(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), [2.5]);
        let y = global_avgpool(&t(&[1, 2, 1, 2], &[1.0, 3.0, 0.0, 8.0])).unwrap();
        assert_eq!(y.shape(), [1, 2]);
        assert_eq!(y.data(), [2.0, 4.0]);
        let y = global_avgpool(&Tensor::full(&[2, 3, 5, 5], -1.5)).unwrap();
        assert!(y.data().iter().all(|&v| (v + 1.5).abs() < 1e-15));
    }

    #[test]
    fn avgpool_same_excludes_padding() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = avgpool2d(&x, 3, 1, 1).unwrap();
        // Every 3×3 window covers the full 2×2 image.
        assert_eq!(y.data(), [2.5; 4]);
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), [0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_examples() {
        let ones = Tensor::full(&[1], 1.0);
        let zeros = Tensor::zeros(&[1]);

        let x = t(&[1, 1, 1, 2], &[0.0, 2.0]);
        let mut state = BatchNormState::new(1);
        state.eps = 0.0;
        let (y, _) = batchnorm(&x, &ones, &zeros, &mut state, Mode::Train).unwrap();
        assert_eq!(y.data(), [-1.0, 1.0]);

        let x = Tensor::full(&[2, 1, 2, 2], 7.0);
        let mut state = BatchNormState::new(1);
        let (y, _) = batchnorm(&x, &ones, &zeros, &mut state, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta = t(&[2], &[0.5, -2.0]);
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let mut state = BatchNormState::new(2);
        let (y, _) = batchnorm(&x, &Tensor::zeros(&[2]), &beta, &mut state, Mode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 4) % 2]);
        }

        let mut state = BatchNormState::new(1);
        assert_eq!(
            batchnorm(&Tensor::zeros(&[1, 1, 1, 1]), &ones, &zeros, &mut state, Mode::Train).unwrap_err(),
            TensorError::DegenerateBatch(1)
        );
        // Eval mode accepts a single value.
        assert!(batchnorm(&Tensor::zeros(&[1, 1, 1, 1]), &ones, &zeros, &mut state, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let x = t(&[1, 1, 1, 2], &[0.0, 2.0]);
        let mut state = BatchNormState::new(1);
        batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut state,
            Mode::Train,
        )
        .unwrap();
        assert!((state.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((state.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_fn(&[2, 2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 1, 3], |i| -(i as f64));
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), [2, 5, 1, 3]);
        assert_eq!(slice_channels(&ab, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&ab, 2, 5).unwrap(), b);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);

        let x = t(&[1, 2, 1, 1], &[1.0, 2.0]);
        let y = t(&[1, 2, 1, 1], &[3.0, 4.0]);
        assert_eq!(concat_channels(&[&x, &y]).unwrap().data(), [1.0, 2.0, 3.0, 4.0]);

        let bad = Tensor::zeros(&[2, 1, 2, 3]);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn residual_examples() {
        let trunk = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0);
        let branch = Tensor::from_fn(&[1, 2, 2, 2], |i| (i * i) as f64);
        assert_eq!(residual_add_scaled(&trunk, &branch, 0.0).unwrap(), trunk);
        let neg = Tensor::from_fn(trunk.shape(), |i| -trunk.data()[i]);
        assert!(residual_add_scaled(&trunk, &neg, 1.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let y = residual_add_scaled(&t(&[1], &[1.0]), &t(&[1], &[2.0]), 0.1).unwrap();
        assert!((y.data()[0] - 1.2).abs() < 1e-15);
        assert!(residual_add_scaled(&trunk, &Tensor::zeros(&[1, 2, 2, 1]), 1.0).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        let y = linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), [3.0, 2.0]);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap().data(), x.data());

        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let y = linear(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &Tensor::zeros(&[3, 2]), &b).unwrap();
        assert_eq!(y.data(), [0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), &b).is_err());
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let (loss, p) = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(p.data(), [0.5, 0.5]);

        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[1000.0, 0.0]), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);

        // −ln(e²/(e¹+e²)) = ln(1 + e⁻¹)
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[1.0, 2.0]), &[1]).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.3132617).abs() < 1e-7);

        assert!(matches!(
            softmax_cross_entropy(&t(&[1, 2], &[1.0, 2.0]), &[2]),
            Err(TensorError::Label {
                row: 0,
                label: 2,
                classes: 2
            })
        ));
    }
}
