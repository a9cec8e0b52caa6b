//! Finite-difference gradient checking for the tape primitives.
//!
//! The numeric side runs on small `f64` reference implementations written
//! directly from each operator's definition; they share no code with the
//! kernels, so a check compares two independent routes. Central differences
//! use the fourth-order stencil with step `h = 2^-10`; a power-of-two step
//! keeps the perturbed inputs exact and makes linear ops difference exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormMode, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1.0 / 1024.0;
const MAX_RESAMPLES: usize = 200;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Identity,
    Conv2d { stride: usize, padding: usize },
    Linear,
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm(BatchNormMode),
    Add,
    Concat,
    ChannelMul,
    Softmax,
    Sigmoid,
    Sum,
    CrossEntropy,
}

impl GradOp {
    /// Every primitive with a small representative set of input shapes.
    pub fn catalog() -> Vec<(GradOp, Vec<Vec<usize>>)> {
        use GradOp::*;
        vec![
            (Identity, vec![vec![2, 3]]),
            (Conv2d { stride: 1, padding: 1 }, vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3]]),
            (Conv2d { stride: 2, padding: 0 }, vec![vec![1, 2, 6, 5], vec![3, 2, 2, 2]]),
            (Linear, vec![vec![3, 5], vec![4, 5]]),
            (Relu, vec![vec![2, 3, 3, 3]]),
            (MaxPool { kernel: 2, stride: 2 }, vec![vec![2, 2, 4, 4]]),
            (GlobalAvgPool, vec![vec![2, 3, 3, 4]]),
            (BatchNorm(BatchNormMode::Train), vec![vec![3, 2, 3, 3]]),
            (BatchNorm(BatchNormMode::Inference), vec![vec![3, 2, 3, 3]]),
            (Add, vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2]]),
            (Concat, vec![vec![2, 2, 3, 3], vec![2, 3, 3, 3]]),
            (ChannelMul, vec![vec![2, 3, 2, 3], vec![3]]),
            (Softmax, vec![vec![3, 5]]),
            (Sigmoid, vec![vec![2, 7]]),
            (Sum, vec![vec![3, 4]]),
            (CrossEntropy, vec![vec![4, 3]]),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    /// Number of times the sample point was redrawn to avoid a kink.
    pub resamples: usize,
    /// False if no kink-free point was found within the retry cap.
    pub kink_free: bool,
}

struct Problem {
    /// Differentiable inputs.
    inputs: Vec<Tensor>,
    /// Running mean / variance for inference batchnorm.
    running: Option<(Vec<f32>, Vec<f32>)>,
    labels: Vec<usize>,
}

pub fn grad_check(op: GradOp, shapes: &[Vec<usize>], seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resamples = 0;
    let problem = loop {
        let p = sample(op, shapes, &mut rng)?;
        if !near_kink(op, &p) {
            break Some(p);
        }
        resamples += 1;
        if resamples >= MAX_RESAMPLES {
            break None;
        }
    };
    let Some(problem) = problem else {
        return Ok(GradCheckReport {
            max_relative_error: f64::NAN,
            resamples,
            kink_free: false,
        });
    };

    // Analytic route: the tape, in f32.
    let mut tape = Tape::new();
    let vars = problem
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = apply_tape(op, &mut tape, &vars, &problem)?;
    let out_shape = tape.value(out).shape().to_vec();
    let cotangent = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);
    let grads = tape.backward_from(out, cotangent.clone())?;

    // Numeric route: f64 reference forward, projected on the same cotangent.
    let base: Vec<Vec<f64>> = problem
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let r: Vec<f64> = cotangent.data().iter().map(|&v| v as f64).collect();
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::Backward(format!("no gradient for input {k}")))?;
        for j in 0..base[k].len() {
            let eval = |delta: f64| {
                let mut xs = base.clone();
                xs[k][j] += delta;
                reference(op, &problem, &xs)
            };
            let (p2, p1, m1, m2) = (eval(2.0 * STEP), eval(STEP), eval(-STEP), eval(-2.0 * STEP));
            let mut numeric = 0.0;
            for i in 0..r.len() {
                let d = -p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i];
                numeric += r[i] * d;
            }
            numeric /= 12.0 * STEP;
            let a = analytic.data()[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        resamples,
        kink_free: true,
    })
}

fn sample(op: GradOp, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<Problem> {
    let want = match op {
        GradOp::Conv2d { .. } | GradOp::Linear | GradOp::Add | GradOp::ChannelMul => 2,
        GradOp::Concat => shapes.len().max(1),
        _ => 1,
    };
    if shapes.len() != want {
        return Err(Error::InvalidParams(format!(
            "{op:?} takes {want} input shapes, got {}",
            shapes.len()
        )));
    }
    let mut inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, rng)).collect();
    let mut running = None;
    let mut labels = Vec::new();
    match op {
        GradOp::Conv2d { .. } | GradOp::Linear => {
            let out = shapes[1][0];
            inputs.push(Tensor::uniform(&[out], -1.0, 1.0, rng));
        }
        GradOp::BatchNorm(mode) => {
            let c = shapes[0][1];
            inputs.push(Tensor::uniform(&[c], 0.5, 1.5, rng));
            inputs.push(Tensor::uniform(&[c], -0.5, 0.5, rng));
            if mode == BatchNormMode::Inference {
                let mean = (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect();
                let var = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
                running = Some((mean, var));
            }
        }
        GradOp::CrossEntropy => {
            let (n, c) = (shapes[0][0], shapes[0][1]);
            labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
        }
        _ => {}
    }
    Ok(Problem {
        inputs,
        running,
        labels,
    })
}

/// True when a perturbation of up to `2h` could cross a non-differentiable
/// point (relu at zero, a max-pool window changing its winner).
fn near_kink(op: GradOp, p: &Problem) -> bool {
    let margin = 3.0 * STEP as f32;
    match op {
        GradOp::Relu => p.inputs[0].data().iter().any(|v| v.abs() < margin),
        GradOp::MaxPool { kernel, stride } => {
            let s = p.inputs[0].shape();
            let (h, w) = (s[2], s[3]);
            let x = p.inputs[0].data();
            for plane in 0..s[0] * s[1] {
                for oy in 0..(h - kernel) / stride + 1 {
                    for ox in 0..(w - kernel) / stride + 1 {
                        let mut vals: Vec<f32> = (0..kernel * kernel)
                            .map(|i| x[plane * h * w + (oy * stride + i / kernel) * w + ox * stride + i % kernel])
                            .collect();
                        vals.sort_by(|a, b| b.total_cmp(a));
                        if vals.len() > 1 && vals[0] - vals[1] < 2.0 * margin {
                            return true;
                        }
                    }
                }
            }
            false
        }
        _ => false,
    }
}

fn apply_tape(op: GradOp, tape: &mut Tape, v: &[super::Var], p: &Problem) -> Result<super::Var> {
    match op {
        GradOp::Identity => Ok(v[0]),
        GradOp::Conv2d { stride, padding } => tape.conv2d(v[0], v[1], Some(v[2]), stride, padding),
        GradOp::Linear => tape.linear(v[0], v[1], Some(v[2])),
        GradOp::Relu => tape.relu(v[0]),
        GradOp::MaxPool { kernel, stride } => tape.max_pool(v[0], kernel, stride),
        GradOp::GlobalAvgPool => tape.global_avg_pool(v[0]),
        GradOp::BatchNorm(mode) => {
            let c = p.inputs[0].shape()[1];
            let (m, s) = p.running.clone().unwrap_or((vec![0.0; c], vec![1.0; c]));
            Ok(tape.batch_norm(v[0], v[1], v[2], (&m, &s), BN_EPS as f32, mode)?.0)
        }
        GradOp::Add => tape.add(v[0], v[1]),
        GradOp::Concat => tape.concat(v),
        GradOp::ChannelMul => tape.channel_mul(v[0], v[1]),
        GradOp::Softmax => tape.softmax(v[0]),
        GradOp::Sigmoid => tape.sigmoid(v[0]),
        GradOp::Sum => tape.sum(v[0]),
        GradOp::CrossEntropy => tape.cross_entropy(v[0], &p.labels),
    }
}

/// Straight-from-definition `f64` forward of each primitive.
fn reference(op: GradOp, p: &Problem, xs: &[Vec<f64>]) -> Vec<f64> {
    let shape = p.inputs[0].shape();
    match op {
        GradOp::Identity => xs[0].clone(),
        GradOp::Conv2d { stride, padding } => {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let ws = p.inputs[1].shape();
            let (co, k) = (ws[0], ws[2]);
            let ho = (h + 2 * padding - k) / stride + 1;
            let wo = (w + 2 * padding - k) / stride + 1;
            let mut y = Vec::with_capacity(n * co * ho * wo);
            for b in 0..n {
                for o in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut s = xs[2][o];
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xv = xs[0][((b * c + ci) * h + iy as usize) * w + ix as usize];
                                        s += xv * xs[1][((o * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                            y.push(s);
                        }
                    }
                }
            }
            y
        }
        GradOp::Linear => {
            let (n, i) = (shape[0], shape[1]);
            let o = p.inputs[1].shape()[0];
            let mut y = Vec::with_capacity(n * o);
            for b in 0..n {
                for r in 0..o {
                    y.push(xs[2][r] + (0..i).map(|j| xs[0][b * i + j] * xs[1][r * i + j]).sum::<f64>());
                }
            }
            y
        }
        GradOp::Relu => xs[0].iter().map(|&v| v.max(0.0)).collect(),
        GradOp::MaxPool { kernel, stride } => {
            let (h, w) = (shape[2], shape[3]);
            let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            let mut y = Vec::new();
            for plane in 0..shape[0] * shape[1] {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut m = f64::NEG_INFINITY;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                m = m.max(xs[0][plane * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                            }
                        }
                        y.push(m);
                    }
                }
            }
            y
        }
        GradOp::GlobalAvgPool => {
            let plane = shape[2] * shape[3];
            xs[0].chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
        }
        GradOp::BatchNorm(mode) => {
            let (n, c) = (shape[0], shape[1]);
            let plane: usize = shape[2..].iter().product();
            let mut y = vec![0.0; xs[0].len()];
            for ch in 0..c {
                let idx = |b: usize, i: usize| (b * c + ch) * plane + i;
                let (mean, var) = match (mode, &p.running) {
                    (BatchNormMode::Inference, Some((m, v))) => (m[ch] as f64, v[ch] as f64),
                    _ => {
                        let m = (n * plane) as f64;
                        let mean = (0..n).flat_map(|b| (0..plane).map(move |i| (b, i))).map(|(b, i)| xs[0][idx(b, i)]).sum::<f64>() / m;
                        let var = (0..n)
                            .flat_map(|b| (0..plane).map(move |i| (b, i)))
                            .map(|(b, i)| (xs[0][idx(b, i)] - mean).powi(2))
                            .sum::<f64>()
                            / m;
                        (mean, var)
                    }
                };
                for b in 0..n {
                    for i in 0..plane {
                        y[idx(b, i)] = xs[1][ch] * (xs[0][idx(b, i)] - mean) / (var + BN_EPS).sqrt() + xs[2][ch];
                    }
                }
            }
            y
        }
        GradOp::Add => xs[0].iter().zip(&xs[1]).map(|(a, b)| a + b).collect(),
        GradOp::Concat => {
            let n = shape[0];
            let mut y = Vec::new();
            for b in 0..n {
                for x in xs {
                    let per = x.len() / n;
                    y.extend_from_slice(&x[b * per..(b + 1) * per]);
                }
            }
            y
        }
        GradOp::ChannelMul => {
            let c = shape[1];
            let plane: usize = shape[2..].iter().product();
            xs[0].iter().enumerate().map(|(i, &v)| v * xs[1][(i / plane) % c]).collect()
        }
        GradOp::Softmax => {
            let cols = shape[1];
            xs[0]
                .chunks(cols)
                .flat_map(|row| {
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
                })
                .collect()
        }
        GradOp::Sigmoid => xs[0].iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        GradOp::Sum => vec![xs[0].iter().sum()],
        GradOp::CrossEntropy => {
            let cols = shape[1];
            let total: f64 = xs[0]
                .chunks(cols)
                .zip(&p.labels)
                .map(|(row, &l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
                .sum();
            vec![total / shape[0] as f64]
        }
    }
}
