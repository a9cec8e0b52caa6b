//! Raw forward and backward kernels over row-major buffers.
//!
//! Callers validate shapes. Every reduction accumulates in `f64` in a fixed
//! ascending order, so a zero input channel contributes exact zeros and a
//! graph with that channel physically removed produces bit-identical sums.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one sample `[C, H, W]` into `[C*k*k, Ho*Wo]` columns.
fn im2col(g: &Conv2dGeom, input: &[f32], cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let chan = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize] as f64
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*k*k, Ho*Wo]` columns back onto a `[C, H, W]` accumulator.
fn col2im(g: &Conv2dGeom, cols: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let chan = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            chan[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let mut out = vec![0.0f32; g.batch * g.out_channels * plane];
    let mut cols = vec![0.0f64; klen * plane];
    let mut acc = vec![0.0f64; plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        for co in 0..g.out_channels {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let wrow = &weight[co * klen..(co + 1) * klen];
            for (kk, &w) in wrow.iter().enumerate() {
                let w = w as f64;
                let col = &cols[kk * plane..(kk + 1) * plane];
                for (a, &c) in acc.iter_mut().zip(col) {
                    *a += w * c;
                }
            }
            let b = bias.map_or(0.0, |b| b[co] as f64);
            let dst = &mut out[(n * g.out_channels + co) * plane..(n * g.out_channels + co + 1) * plane];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = (a + b) as f32;
            }
        }
    }
    out
}

pub struct Conv2dGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    g: &Conv2dGeom,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Conv2dGrads {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let mut cols = vec![0.0f64; klen * plane];
    let mut dcols = vec![0.0f64; klen * plane];
    let mut gw = if need_weight { vec![0.0f64; g.out_channels * klen] } else { Vec::new() };
    let mut gin = if need_input { vec![0.0f32; g.batch * in_len] } else { Vec::new() };
    let mut gin_acc = vec![0.0f64; if need_input { in_len } else { 0 }];
    let mut dy = vec![0.0f64; plane];

    for n in 0..g.batch {
        if need_weight {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        }
        if need_input {
            dcols.iter_mut().for_each(|v| *v = 0.0);
        }
        for co in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + co) * plane..(n * g.out_channels + co + 1) * plane];
            for (d, &s) in dy.iter_mut().zip(src) {
                *d = s as f64;
            }
            if need_weight {
                let row = &mut gw[co * klen..(co + 1) * klen];
                for (kk, r) in row.iter_mut().enumerate() {
                    let col = &cols[kk * plane..(kk + 1) * plane];
                    *r += col.iter().zip(&dy).map(|(c, d)| c * d).sum::<f64>();
                }
            }
            if need_input {
                let wrow = &weight[co * klen..(co + 1) * klen];
                for (kk, &w) in wrow.iter().enumerate() {
                    let w = w as f64;
                    let dc = &mut dcols[kk * plane..(kk + 1) * plane];
                    for (c, &d) in dc.iter_mut().zip(&dy) {
                        *c += w * d;
                    }
                }
            }
        }
        if need_input {
            gin_acc.iter_mut().for_each(|v| *v = 0.0);
            col2im(g, &dcols, &mut gin_acc);
            for (d, &a) in gin[n * in_len..(n + 1) * in_len].iter_mut().zip(&gin_acc) {
                *d = a as f32;
            }
        }
    }

    let bias = need_bias.then(|| {
        (0..g.out_channels)
            .map(|co| {
                let mut s = 0.0f64;
                for n in 0..g.batch {
                    let base = (n * g.out_channels + co) * plane;
                    s += grad_out[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                s as f32
            })
            .collect()
    });

    Conv2dGrads {
        input: need_input.then_some(gin),
        weight: need_weight.then(|| gw.into_iter().map(|v| v as f32).collect()),
        bias,
    }
}

/// `y[n, o] = sum_i x[n, i] * w[o, i] + b[o]`.
pub fn linear_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, batch: usize, inp: usize, out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; batch * out];
    for n in 0..batch {
        let xr = &x[n * inp..(n + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = 0.0f64;
            for (a, b) in xr.iter().zip(wr) {
                acc += *a as f64 * *b as f64;
            }
            y[n * out + o] = (acc + b.map_or(0.0, |b| b[o] as f64)) as f32;
        }
    }
    y
}

pub struct LinearGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    batch: usize,
    inp: usize,
    out: usize,
    need: (bool, bool, bool),
) -> LinearGrads {
    let input = need.0.then(|| {
        let mut dx = vec![0.0f32; batch * inp];
        for n in 0..batch {
            for i in 0..inp {
                let mut acc = 0.0f64;
                for o in 0..out {
                    acc += dy[n * out + o] as f64 * w[o * inp + i] as f64;
                }
                dx[n * inp + i] = acc as f32;
            }
        }
        dx
    });
    let weight = need.1.then(|| {
        let mut dw = vec![0.0f32; out * inp];
        for o in 0..out {
            for i in 0..inp {
                let mut acc = 0.0f64;
                for n in 0..batch {
                    acc += dy[n * out + o] as f64 * x[n * inp + i] as f64;
                }
                dw[o * inp + i] = acc as f32;
            }
        }
        dw
    });
    let bias = need.2.then(|| {
        (0..out)
            .map(|o| (0..batch).map(|n| dy[n * out + o] as f64).sum::<f64>() as f32)
            .collect()
    });
    LinearGrads { input, weight, bias }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

/// Max pooling without padding. Returns outputs and the flat argmax of
/// each window; ties resolve to the first index in row-major window order.
pub fn maxpool_forward(g: &PoolGeom, x: &[f32]) -> (Vec<f32>, Vec<usize>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(g.batch * g.channels * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.batch * g.channels {
        let base = plane * g.height * g.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + oy * g.stride * g.width + ox * g.stride;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let i = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(input_len: usize, argmax: &[usize], dy: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f64; input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g as f64;
    }
    dx.into_iter().map(|v| v as f32).collect()
}

/// `[N, C, H*W] -> [N, C]` mean.
pub fn gap_forward(x: &[f32], planes: usize, plane: usize) -> Vec<f32> {
    (0..planes)
        .map(|p| {
            let s: f64 = x[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).sum();
            (s / plane as f64) as f32
        })
        .collect()
}

pub fn gap_backward(dy: &[f32], plane: usize) -> Vec<f32> {
    let mut dx = Vec::with_capacity(dy.len() * plane);
    for &g in dy {
        let v = (g as f64 / plane as f64) as f32;
        dx.extend(std::iter::repeat_n(v, plane));
    }
    dx
}

/// Per-channel batch statistics over `[N, C, P]`: `(mean, biased variance)`.
pub fn channel_moments(x: &[f32], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            s += x[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            q += x[base..base + plane].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = q / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply(
    x: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f32],
    beta: &[f32],
) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * plane;
            let (mu, is, ga, be) = (mean[c], inv_std[c], gamma[c] as f64, beta[c] as f64);
            for (d, &s) in y[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *d = (ga * (s as f64 - mu) * is + be) as f32;
            }
        }
    }
    y
}

pub struct BatchNormGrads {
    pub input: Option<Vec<f32>>,
    pub gamma: Option<Vec<f32>>,
    pub beta: Option<Vec<f32>>,
}

/// Backward of batchnorm. With `batch_stats` the mean/variance are functions
/// of the input (training mode); otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f32],
    batch_stats: bool,
    need: (bool, bool, bool),
) -> BatchNormGrads {
    let m = (batch * plane) as f64;
    let mut sum_dy = vec![0.0f64; channels];
    let mut sum_dy_xhat = vec![0.0f64; channels];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * plane;
            for i in base..base + plane {
                let g = dy[i] as f64;
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * (x[i] as f64 - mean[c]) * inv_std[c];
            }
        }
    }
    let input = need.0.then(|| {
        let mut dx = vec![0.0f32; x.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let scale = gamma[c] as f64 * inv_std[c];
                for i in base..base + plane {
                    let g = dy[i] as f64;
                    dx[i] = if batch_stats {
                        let xhat = (x[i] as f64 - mean[c]) * inv_std[c];
                        scale * (g - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m)
                    } else {
                        scale * g
                    } as f32;
                }
            }
        }
        dx
    });
    BatchNormGrads {
        input,
        gamma: need.1.then(|| sum_dy_xhat.iter().map(|&v| v as f32).collect()),
        beta: need.2.then(|| sum_dy.iter().map(|&v| v as f32).collect()),
    }
}

/// Concatenates `[N, C_i, P]` blocks along the channel axis.
pub fn concat_channels(parts: &[(&[f32], usize)], batch: usize, plane: usize) -> Vec<f32> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(batch * total * plane);
    for n in 0..batch {
        for &(data, c) in parts {
            out.extend_from_slice(&data[n * c * plane..(n + 1) * c * plane]);
        }
    }
    out
}

/// Splits a concatenated gradient back into per-input parts.
pub fn split_channels(dy: &[f32], sizes: &[usize], batch: usize, plane: usize) -> Vec<Vec<f32>> {
    let total: usize = sizes.iter().sum();
    let mut parts: Vec<Vec<f32>> = sizes.iter().map(|c| Vec::with_capacity(batch * c * plane)).collect();
    for n in 0..batch {
        let mut off = n * total * plane;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&dy[off..off + c * plane]);
            off += c * plane;
        }
    }
    parts
}

/// `y[n, c, p] = x[n, c, p] * scale[c]`.
pub fn channel_mul(x: &[f32], scale: &[f32], batch: usize, plane: usize) -> Vec<f32> {
    let channels = scale.len();
    let mut y = Vec::with_capacity(x.len());
    for n in 0..batch {
        for (c, &s) in scale.iter().enumerate() {
            let base = (n * channels + c) * plane;
            y.extend(x[base..base + plane].iter().map(|&v| v * s));
        }
    }
    y
}

/// Gradient of `channel_mul` w.r.t. the per-channel scale.
pub fn channel_mul_scale_grad(x: &[f32], dy: &[f32], channels: usize, batch: usize, plane: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| {
            let mut s = 0.0f64;
            for n in 0..batch {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    s += x[i] as f64 * dy[i] as f64;
                }
            }
            s as f32
        })
        .collect()
}

/// Row-wise softmax of `[rows, cols]`.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        y.extend(row.iter().map(|&v| ((v as f64 - max).exp() / z) as f32));
    }
    y
}

/// `log(sum(exp(row)))` evaluated stably in `f64`.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}
