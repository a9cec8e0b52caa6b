//! Optimizers, supervised training, and bottleneck training.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{BatchNormMode, Tape};
use crate::bottleneck::Bottlenecks;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{flops_loss, FlopsModel};
use crate::graph::{ForwardConfig, Graph, ParamRef};
use crate::kendall::{kendall_tau_distance, ranking};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamRef, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, lr: f64, key: &ParamRef, param: &mut Tensor, grad: &Tensor) {
        let v = self
            .velocity
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; param.numel()]);
        let (m, wd) = (self.momentum as f32, self.weight_decay as f32);
        for ((w, &g), vel) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            let g = g + wd * *w;
            *vel = m * *vel + g;
            *w -= lr as f32 * *vel;
        }
    }
}

/// Cosine annealing from `base` at epoch 0 to 0 at `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| crate::mask::argmax(row) == Some(l))
        .count()
}

/// Top-1 accuracy in percent, batchnorm in inference mode. `gates` must be
/// given for instrumented graphs.
pub fn evaluate(g: &Graph, gates: Option<&Bottlenecks>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParams("cannot evaluate on an empty dataset".into()));
    }
    let mut hits = 0;
    for idx in data.batches(batch_size, None) {
        let (x, y) = data.batch(&idx);
        let logits = match gates {
            Some(b) => b.predict(g, &x)?,
            None => g.predict(&x)?,
        };
        hits += correct(&logits, &y);
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// One SGD epoch; returns mean loss, accuracy, and the first batch's loss.
fn sgd_epoch(g: &mut Graph, data: &Dataset, sgd: &mut Sgd, lr: f64, batch_size: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let (mut loss_sum, mut hits, mut first) = (0.0, 0, f64::NAN);
    for (b, idx) in data.batches(batch_size, Some(seed)).into_iter().enumerate() {
        let (x, y) = data.batch(&idx);
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let out = g.forward(&mut tape, xv, &ForwardConfig::TRAIN)?;
        let loss = tape.cross_entropy(out.logits, &y)?;
        let l = tape.value(loss).item() as f64;
        if b == 0 {
            first = l;
        }
        loss_sum += l * idx.len() as f64;
        hits += correct(tape.value(out.logits), &y);
        let mut grads = tape.backward(loss)?;
        for (r, v) in &out.params {
            if let Some(gr) = grads.take(*v) {
                sgd.step(lr, r, g.param_mut(r)?, &gr);
            }
        }
        g.update_running_stats(&out.moments)?;
    }
    Ok((loss_sum / data.len() as f64, 100.0 * hits as f64 / data.len() as f64, first))
}

/// Trains all parameters with SGD and a cosine schedule.
pub fn pretrain(g: &mut Graph, train: &Dataset, val: &Dataset, cfg: &SgdConfig) -> Result<Vec<EpochStats>> {
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let (loss, acc, _) = sgd_epoch(g, train, &mut sgd, lr, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        curve.push(EpochStats {
            epoch,
            lr,
            train_loss: loss,
            train_accuracy: acc,
            val_accuracy: evaluate(g, None, val, 256)?,
        });
    }
    Ok(curve)
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// Parameters from the epoch with the best validation accuracy.
    pub best: Graph,
    pub best_accuracy: f64,
    pub curve: Vec<EpochStats>,
}

/// SGD finetuning keeping the best-validation weights. Aborts when the
/// epoch loss exceeds ten times the initial loss for three epochs in a row.
pub fn finetune(g: &Graph, train: &Dataset, val: &Dataset, cfg: &SgdConfig) -> Result<FinetuneResult> {
    let mut cur = g.clone();
    let mut best = g.clone();
    let mut best_accuracy = evaluate(g, None, val, 256)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut initial = f64::NAN;
    let mut bad = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let (loss, acc, first) = sgd_epoch(&mut cur, train, &mut sgd, lr, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))
            .or_else(|e| match e {
                Error::NonFinite { .. } => Ok((f64::INFINITY, 0.0, initial)),
                e => Err(e),
            })?;
        if epoch == 0 {
            initial = first;
        }
        if loss.is_nan() || initial.is_nan() || loss > 10.0 * initial {
            bad += 1;
            if bad >= 3 {
                return Err(Error::Diverged { epoch, loss, initial });
            }
        } else {
            bad = 0;
        }
        let val_accuracy = if loss.is_finite() { evaluate(&cur, None, val, 256)? } else { 0.0 };
        if val_accuracy > best_accuracy {
            best_accuracy = val_accuracy;
            best = cur.clone();
        }
        curve.push(EpochStats {
            epoch,
            lr,
            train_loss: loss,
            train_accuracy: acc,
            val_accuracy,
        });
    }
    Ok(FinetuneResult {
        best,
        best_accuracy,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BottleneckConfig {
    /// Number of batches `k`.
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub target_flops: f64,
    /// Ranking snapshot period.
    pub snapshot_every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub ce: f64,
    pub flops_loss: f64,
    pub flops: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BottleneckTrace {
    pub iterations: Vec<IterationRecord>,
    /// `(iteration, distance to the previous snapshot)`.
    pub kendall: Vec<(usize, f64)>,
}

fn global_ranking(gates: &Bottlenecks) -> Vec<usize> {
    ranking(&gates.lambdas().concat())
}

/// Trains only the gates on the first `iters` batches, with the model
/// frozen and batchnorm in inference mode.
pub fn train_bottlenecks(
    g: &Graph,
    gates: &mut Bottlenecks,
    data: &Dataset,
    model: &FlopsModel,
    cfg: &BottleneckConfig,
) -> Result<BottleneckTrace> {
    if cfg.iters == 0 || cfg.beta.is_nan() || cfg.beta < 0.0 || cfg.batch_size == 0 {
        return Err(Error::InvalidParams("need iters >= 1, beta >= 0 and a positive batch size".into()));
    }
    if gates.is_pseudo_pruned() {
        return Err(Error::Bottleneck("gates are pseudo-pruned".into()));
    }
    let max = model.max_flops();
    flops_loss(max, cfg.target_flops, max)?;
    let mut adam = Adam::new(cfg.lr);
    let mut trace = BottleneckTrace::default();
    let mut prev_rank: Option<Vec<usize>> = None;
    let mut batches = Vec::new();
    let mut epoch = 0;
    for it in 0..cfg.iters {
        if batches.is_empty() {
            batches = data.batches(cfg.batch_size, Some(cfg.seed.wrapping_add(epoch)));
            batches.reverse();
            epoch += 1;
        }
        let idx = batches.pop().expect("non-empty");
        let (x, y) = data.batch(&idx);
        let mut tape = Tape::new();
        let (psi, lambda) = gates.record(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let fcfg = ForwardConfig {
            bn_mode: BatchNormMode::Inference,
            train_params: false,
            gates: Some(&lambda),
        };
        let non_finite = |ce: f64, lg: f64| Error::NonFiniteLoss {
            iteration: it,
            ce,
            flops_loss: lg,
        };
        let out = g.forward(&mut tape, xv, &fcfg).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite(f64::NAN, f64::NAN),
            e => e,
        })?;
        let gv = model.record(&mut tape, &lambda)?;
        let flops = tape.value(gv).item() as f64;
        let (lg, dlg) = flops_loss(flops, cfg.target_flops, max)?;
        let ce = tape.cross_entropy(out.logits, &y).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite(f64::NAN, lg),
            e => e,
        })?;
        let ce_val = tape.value(ce).item() as f64;
        if !ce_val.is_finite() || !lg.is_finite() {
            return Err(non_finite(ce_val, lg));
        }
        let total = tape.scalar_fn(&[ce, gv], ce_val + cfg.beta * lg, vec![1.0, cfg.beta * dlg])?;
        let mut grads = tape.backward(total)?;
        let gpsi: Vec<Tensor> = psi
            .iter()
            .zip(gates.psi())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adam.step(gates.psi_mut(), &gpsi);
        trace.iterations.push(IterationRecord {
            iteration: it + 1,
            ce: ce_val,
            flops_loss: lg,
            flops,
        });
        let done = it + 1;
        if cfg.snapshot_every > 0 && (done % cfg.snapshot_every == 0 || done == cfg.iters) {
            let r = global_ranking(gates);
            if let Some(p) = &prev_rank {
                if r.len() >= 2 {
                    trace.kendall.push((done, kendall_tau_distance(p, &r)?));
                }
            }
            prev_rank = Some(r);
        }
    }
    Ok(trace)
}
