//! The end-to-end prune pipeline and its configuration and report.

use std::time::Instant;

use serde::Serialize;

use crate::ablation::{ablation_mask, DpdcProfile, Strategy};
use crate::bottleneck::{self, Bottlenecks, LAMBDA_INIT};
use crate::data::Dataset;
use crate::error::{Result, StageExt};
use crate::flops::{exact_flops, FlopsModel};
use crate::graph::{identify_groups, GroupAnalysis, Graph};
use crate::mask::{MaskSearchParams, PruningMask};
use crate::prune::prune;
use crate::train::{evaluate, finetune, train_bottlenecks, BottleneckConfig, BottleneckTrace, EpochStats, SgdConfig};

/// Bottleneck training and finetuning hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Bottleneck training batches (`k`).
    pub iters: usize,
    pub batch_size: usize,
    /// Bottleneck learning rate.
    pub lr: f64,
    /// Weight of the FLOPs loss.
    pub beta: f64,
    pub finetune: SgdConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings used for CIFAR-10 at full scale.
    pub fn cifar10() -> Self {
        TrainConfig {
            iters: 200,
            batch_size: 64,
            lr: 0.6,
            beta: 5.5,
            finetune: SgdConfig {
                epochs: 200,
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 2e-3,
                batch_size: 64,
                seed: 0,
            },
            seed: 0,
        }
    }

    /// Settings used for ImageNet at full scale.
    pub fn imagenet() -> Self {
        TrainConfig {
            iters: 3000,
            lr: 0.4,
            beta: 13.0,
            ..Self::cifar10()
        }
    }

    /// Desk-scale settings for the tiny models on MNIST.
    pub fn desk() -> Self {
        TrainConfig {
            iters: 200,
            batch_size: 64,
            lr: 0.6,
            beta: 5.5,
            finetune: SgdConfig {
                epochs: 5,
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 64,
                seed: 0,
            },
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "cifar10" => Some(Self::cifar10()),
            "imagenet" => Some(Self::imagenet()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneConfig {
    /// `T_F / M_F`.
    pub target_ratio: f64,
    /// `ε / M_F`.
    pub epsilon_ratio: f64,
    pub max_search_iters: usize,
    pub strategy: Strategy,
    pub profile: Option<DpdcProfile>,
    pub lambda_init: f32,
    pub snapshot_every: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target_ratio: 0.5,
            epsilon_ratio: 0.02,
            max_search_iters: MaskSearchParams::DEFAULT_MAX_ITERS,
            strategy: Strategy::Autobot,
            profile: None,
            lambda_init: LAMBDA_INIT,
            snapshot_every: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageTime {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub arch: String,
    pub train_config: TrainConfig,
    pub prune_config: PruneConfig,
    pub baseline_accuracy: f64,
    pub trace: BottleneckTrace,
    pub mask: PruningMask,
    pub max_flops: f64,
    pub target_flops: f64,
    pub achieved_flops: f64,
    pub achieved_ratio: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub accuracy_before_finetune: f64,
    pub accuracy_after_finetune: f64,
    pub finetune_curve: Vec<EpochStats>,
    pub wall_clock: Vec<StageTime>,
}

pub struct PipelineOutput {
    pub report: RunReport,
    /// Pruned graph before finetuning.
    pub pruned: Graph,
    /// Best finetuned graph.
    pub finetuned: Graph,
    pub gates: Bottlenecks,
}

/// Gates trained on a model, with what is needed to turn them into masks.
pub struct TrainedGates {
    pub analysis: GroupAnalysis,
    pub flops: FlopsModel,
    pub search: MaskSearchParams,
    pub gates: Bottlenecks,
    pub trace: BottleneckTrace,
}

struct Clock(Vec<StageTime>, Instant);

impl Clock {
    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.0.push(StageTime {
            stage,
            seconds: (now - self.1).as_secs_f64(),
        });
        self.1 = now;
    }
}

/// Injects gates into `model` and trains them on the first `iters`
/// batches of `train`.
pub fn train_gates(model: &Graph, train: &Dataset, tcfg: &TrainConfig, pcfg: &PruneConfig) -> Result<TrainedGates> {
    let analysis = identify_groups(model).stage("analyze")?;
    let flops = FlopsModel::new(model, &analysis).stage("analyze")?;
    let mut search = MaskSearchParams::from_ratios(&flops, pcfg.target_ratio, pcfg.epsilon_ratio).stage("analyze")?;
    search.max_iters = pcfg.max_search_iters;
    let (instrumented, mut gates) = bottleneck::inject(model, &analysis, pcfg.lambda_init).stage("inject")?;
    let bcfg = BottleneckConfig {
        iters: tcfg.iters,
        batch_size: tcfg.batch_size,
        lr: tcfg.lr,
        beta: tcfg.beta,
        target_flops: search.target_flops,
        snapshot_every: pcfg.snapshot_every,
        seed: tcfg.seed,
    };
    let trace = train_bottlenecks(&instrumented, &mut gates, train, &flops, &bcfg).stage("train_bottlenecks")?;
    Ok(TrainedGates {
        analysis,
        flops,
        search,
        gates,
        trace,
    })
}

impl TrainedGates {
    pub fn mask(&self, strategy: Strategy, profile: Option<&DpdcProfile>, seed: u64) -> Result<PruningMask> {
        ablation_mask(strategy, &self.gates.lambdas(), &self.flops, &self.search, profile, seed).stage("mask")
    }

    /// Physically pruned copy of `model` carrying the mask as metadata.
    pub fn apply(&self, model: &Graph, mask: &PruningMask) -> Result<Graph> {
        mask.validate(self.analysis.channel_counts().as_slice()).stage("prune")?;
        let mut pruned = prune(model, &self.analysis, &mask.keep()).stage("prune")?;
        pruned.meta = serde_json::to_value(mask).map_err(crate::Error::from).stage("prune")?;
        Ok(pruned)
    }
}

/// Inject, train gates, search a mask, remove gates, prune, evaluate,
/// finetune, evaluate.
pub fn run_pipeline(model: &Graph, train: &Dataset, val: &Dataset, tcfg: &TrainConfig, pcfg: &PruneConfig) -> Result<PipelineOutput> {
    let mut clock = Clock(Vec::new(), Instant::now());
    let baseline_accuracy = evaluate(model, None, val, 256).stage("evaluate_baseline")?;
    clock.lap("evaluate_baseline");
    let trained = train_gates(model, train, tcfg, pcfg)?;
    clock.lap("train_bottlenecks");
    let mask = trained.mask(pcfg.strategy, pcfg.profile.as_ref(), tcfg.seed)?;
    clock.lap("mask");
    // Gates are dropped, not folded into the weights, before pruning.
    let pruned = trained.apply(model, &mask)?;
    clock.lap("prune");
    let accuracy_before_finetune = evaluate(&pruned, None, val, 256).stage("evaluate_pruned")?;
    clock.lap("evaluate_pruned");
    let ft = finetune(&pruned, train, val, &tcfg.finetune).stage("finetune")?;
    clock.lap("finetune");
    let max_flops = trained.flops.max_flops();
    let report = RunReport {
        arch: model.arch.clone(),
        train_config: tcfg.clone(),
        prune_config: pcfg.clone(),
        baseline_accuracy,
        trace: trained.trace,
        target_flops: mask.target_flops,
        achieved_flops: exact_flops(&pruned) as f64,
        achieved_ratio: exact_flops(&pruned) as f64 / max_flops,
        mask,
        max_flops,
        params_before: model.param_count(),
        params_after: pruned.param_count(),
        accuracy_before_finetune,
        accuracy_after_finetune: ft.best_accuracy,
        finetune_curve: ft.curve,
        wall_clock: clock.0,
    };
    Ok(PipelineOutput {
        report,
        pruned,
        finetuned: ft.best,
        gates: trained.gates,
    })
}
