use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "litedet", version, about = "Cost analysis, forward passes, box losses and pruning for detector graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-layer parameter and MAC report.
    Analyze(AnalyzeArgs),
    /// Run a forward pass and dump outputs as T4F0 tensors.
    Forward(ForwardArgs),
    /// Evaluate box losses for a CSV of prediction/ground-truth pairs.
    Loss(LossArgs),
    /// Compare analytic loss gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Prune channels to a target MAC speed-up.
    Prune(PruneArgs),
    /// Delta table between two cost reports.
    Compare(CompareArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Table,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    InnerMpdiou,
    Iou,
    Ciou,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Corners {
    #[default]
    Inner,
    Original,
}

/// Graph plus weights, either loaded or initialized from a seed.
#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// LDW0 weights file; seeded initialization when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// `NxCxHxW`; the graph's declared input shape when absent.
    #[arg(long)]
    pub input_shape: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// T4F0 input tensor; a seeded random input when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub input_shape: Option<String>,
    /// Directory for `<output>.t4f0` dumps.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Node ids to dump in addition to the graph outputs.
    #[arg(long = "node")]
    pub nodes: Vec<String>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct LossArgs {
    /// CSV with header `pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h`.
    #[arg(long)]
    pub boxes: PathBuf,
    #[arg(long)]
    pub img_w: f64,
    #[arg(long)]
    pub img_h: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    #[arg(long, value_enum, default_value_t)]
    pub kind: LossKind,
    #[arg(long, value_enum, default_value_t)]
    pub corners: Corners,
    /// Append the loss gradient with respect to the prediction.
    #[arg(long)]
    pub grad: bool,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Scale the analytic gradient to check that the harness notices.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub target_speedup: f64,
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
    /// Node ids whose channels are never removed.
    #[arg(long = "protect")]
    pub protect: Vec<String>,
    #[arg(long)]
    pub out_graph: Option<PathBuf>,
    #[arg(long)]
    pub out_weights: Option<PathBuf>,
    #[arg(long)]
    pub out_plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}
