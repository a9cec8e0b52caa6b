use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autobot_core::ablation::{DpdcProfile, Strategy};
use autobot_core::checkpoint::Checkpoint;
use autobot_core::data::{load_dataset, Dataset, DatasetKind, Split};
use autobot_core::flops::{exact_flops, FlopsModel, VGG16_CIFAR_REFERENCE};
use autobot_core::graph::{identify_groups, zoo, Graph};
use autobot_core::pipeline::{run_pipeline, train_gates, PruneConfig, TrainConfig};
use autobot_core::train::{evaluate, finetune, pretrain, SgdConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "autobot", version, about = "FLOPs-constrained channel pruning with trainable bottlenecks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a zoo model from scratch.
    Pretrain(PretrainArgs),
    /// Run the full pipeline on a trained checkpoint.
    Prune(PruneArgs),
    /// Finetune a (pruned) checkpoint.
    Finetune(FinetuneArgs),
    /// Report test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Print per-operator and total FLOPs of a checkpoint or zoo model.
    Flops(FlopsArgs),
    /// Compare channel-selection strategies at the same FLOPs target.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// `mnist`, `cifar10-subset` or `cifar10-subset:<fraction>`.
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Use only the first N training items.
    #[arg(long)]
    train_limit: Option<usize>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let kind: DatasetKind = self.dataset.parse()?;
        let mut train = load_dataset(kind, &self.data_dir, Split::Train, seed)?;
        if let Some(n) = self.train_limit {
            train = train.take(n);
        }
        let test = load_dataset(kind, &self.data_dir, Split::Test, seed)?;
        Ok((train, test))
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Architecture: vgg_tiny, res_tiny, branch_tiny.
    #[arg(long, default_value = "vgg_tiny")]
    model: String,
    /// Comma-separated channel widths (architecture default if omitted).
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.abot")]
    out: PathBuf,
}

#[derive(Args)]
struct GateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Hyper-parameter preset: desk, cifar10, imagenet.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 0.5)]
    target_flops_ratio: f64,
    #[arg(long, default_value_t = 0.02)]
    epsilon_ratio: f64,
    #[arg(long)]
    beta: Option<f64>,
    /// Bottleneck learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Bottleneck training batches.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep-ratio profile (JSON) for the dpdc strategy.
    #[arg(long)]
    profile: Option<PathBuf>,
}

impl GateArgs {
    fn configs(&self, strategy: Strategy) -> Result<(TrainConfig, PruneConfig)> {
        let mut t = TrainConfig::preset(&self.preset).with_context(|| format!("unknown preset `{}`", self.preset))?;
        if let Some(v) = self.beta {
            t.beta = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.iters {
            t.iters = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
            t.finetune.batch_size = v;
        }
        t.seed = self.seed;
        t.finetune.seed = self.seed;
        let profile = self.profile.as_deref().map(DpdcProfile::load).transpose()?;
        let p = PruneConfig {
            target_ratio: self.target_flops_ratio,
            epsilon_ratio: self.epsilon_ratio,
            strategy,
            profile,
            ..PruneConfig::default()
        };
        Ok((t, p))
    }
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    gate: GateArgs,
    /// autobot, random, reverse, spdc, dpdc.
    #[arg(long, default_value = "autobot")]
    strategy: String,
    /// Finetuning epochs (preset default if omitted).
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for report and checkpoints.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "finetuned.abot")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct FlopsArgs {
    /// Checkpoint path or zoo architecture name.
    #[arg(long)]
    model: String,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Input as CxHxW for zoo models (3x32x32 for vgg16_cifar, else 1x28x28).
    #[arg(long)]
    input: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    gate: GateArgs,
    /// Strategy to run, or `all`.
    #[arg(long, default_value = "all")]
    strategy: String,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_graph(path: &Path) -> Result<Graph> {
    let ck = Checkpoint::load(path)?;
    if ck.graph.is_instrumented() {
        bail!("{} holds an instrumented graph", path.display());
    }
    Ok(ck.graph)
}

fn print(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let (train, test) = a.data.load(a.seed)?;
    let widths = match a.widths {
        Some(w) => w,
        None => zoo::default_widths(&a.model)?,
    };
    let s = train.item_shape();
    let mut g = zoo::build(&a.model, &widths, train.num_classes(), s, a.seed)?;
    let cfg = SgdConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let curve = pretrain(&mut g, &train, &test, &cfg)?;
    Checkpoint::new(g).save(&a.out)?;
    print(&json!({ "checkpoint": a.out, "curve": curve }))
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    let (mut tcfg, pcfg) = a.gate.configs(strategy)?;
    if let Some(e) = a.epochs {
        tcfg.finetune.epochs = e;
    }
    let model = load_graph(&a.gate.model)?;
    let (train, test) = a.gate.data.load(a.gate.seed)?;
    let out = run_pipeline(&model, &train, &test, &tcfg, &pcfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    Checkpoint::new(out.pruned).save(&a.out.join("pruned.abot"))?;
    let mut finetuned = out.finetuned;
    finetuned.meta = serde_json::to_value(&out.report.mask)?;
    Checkpoint::new(finetuned).save(&a.out.join("finetuned.abot"))?;
    std::fs::write(a.out.join("mask.json"), out.report.mask.to_json()?)?;
    let report = serde_json::to_value(&out.report)?;
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    print(&json!({
        "out": a.out,
        "baseline_accuracy": out.report.baseline_accuracy,
        "accuracy_before_finetune": out.report.accuracy_before_finetune,
        "accuracy_after_finetune": out.report.accuracy_after_finetune,
        "achieved_ratio": out.report.achieved_ratio,
        "met_epsilon": out.report.mask.met_epsilon,
        "params_before": out.report.params_before,
        "params_after": out.report.params_after,
    }))
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let g = load_graph(&a.model)?;
    let (train, test) = a.data.load(a.seed)?;
    let cfg = SgdConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let ft = finetune(&g, &train, &test, &cfg)?;
    Checkpoint::new(ft.best).save(&a.out)?;
    print(&json!({ "checkpoint": a.out, "best_accuracy": ft.best_accuracy, "curve": ft.curve }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let g = load_graph(&a.model)?;
    let (_, test) = a.data.load(0)?;
    let acc = evaluate(&g, None, &test, 256)?;
    print(&json!({
        "accuracy": acc,
        "items": test.len(),
        "flops": exact_flops(&g),
        "params": g.param_count(),
    }))
}

fn parse_input(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s.split('x').map(str::parse).collect::<Result<_, _>>()?;
    match dims[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => bail!("input must look like 3x32x32"),
    }
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let path = Path::new(&a.model);
    let g = if path.is_file() {
        Checkpoint::load(path)?.graph
    } else {
        let default_input = if a.model == "vgg16_cifar" { "3x32x32" } else { "1x28x28" };
        let input = parse_input(a.input.as_deref().unwrap_or(default_input))?;
        let widths = match a.widths {
            Some(w) => w,
            None => zoo::default_widths(&a.model)?,
        };
        zoo::build(&a.model, &widths, 10, input, 0)?
    };
    let analysis = identify_groups(&g)?;
    let model = FlopsModel::new(&g, &analysis)?;
    let full: Vec<f64> = model.channels().iter().map(|&c| c as f64).collect();
    let per_op = model.breakdown(&full)?;
    let mut by_kind = std::collections::BTreeMap::<&str, f64>::new();
    for (_, kind, f) in &per_op {
        *by_kind.entry(kind).or_default() += f;
    }
    let total = exact_flops(&g);
    let mut report = json!({
        "arch": g.arch,
        "total_flops": total,
        "params": g.param_count(),
        "by_kind": by_kind,
        "operators": per_op.iter().map(|(n, k, f)| json!({"name": n, "op": k, "flops": f})).collect::<Vec<_>>(),
    });
    if g.arch == "vgg16_cifar" && g.input_shape() == [3, 32, 32] {
        report["reference_flops"] = json!(VGG16_CIFAR_REFERENCE);
        report["deviation_percent"] = json!(100.0 * (total as f64 - VGG16_CIFAR_REFERENCE) / VGG16_CIFAR_REFERENCE);
    }
    print(&report)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let strategies: Vec<Strategy> = if a.strategy == "all" {
        Strategy::ALL.to_vec()
    } else {
        vec![a.strategy.parse()?]
    };
    let (tcfg, pcfg) = a.gate.configs(Strategy::Autobot)?;
    let model = load_graph(&a.gate.model)?;
    let (train, test) = a.gate.data.load(a.gate.seed)?;
    let baseline = evaluate(&model, None, &test, 256)?;
    let trained = train_gates(&model, &train, &tcfg, &pcfg)?;
    let mut rows = Vec::new();
    for s in strategies {
        if s == Strategy::Dpdc && pcfg.profile.is_none() {
            rows.push(json!({"strategy": s.to_string(), "skipped": "no --profile given"}));
            continue;
        }
        let mask = trained.mask(s, pcfg.profile.as_ref(), a.gate.seed)?;
        let pruned = trained.apply(&model, &mask)?;
        rows.push(json!({
            "strategy": s.to_string(),
            "accuracy_before_finetune": evaluate(&pruned, None, &test, 256)?,
            "achieved_flops": exact_flops(&pruned),
            "achieved_ratio": exact_flops(&pruned) as f64 / trained.flops.max_flops(),
            "met_epsilon": mask.met_epsilon,
            "kept_per_group": mask.kept_counts(),
        }));
    }
    let report = json!({
        "baseline_accuracy": baseline,
        "max_flops": trained.flops.max_flops(),
        "target_flops": trained.search.target_flops,
        "epsilon": trained.search.epsilon,
        "kendall": trained.trace.kendall,
        "strategies": rows,
    });
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    print(&report)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Flops(a) => cmd_flops(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}
