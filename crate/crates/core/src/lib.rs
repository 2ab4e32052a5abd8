//! Inference-only toolkit for lightweight detector engineering.

pub mod blocks;
pub mod cost;
pub mod error;
pub mod graph;
pub mod loss;
pub mod prune;
pub mod tensor;

pub use cost::{compare_reports, graph_cost, CostReport, ReportDelta};
pub use error::{Error, Result};
pub use graph::{forward_graph, init_weights, ModelGraph, Rng, WeightStore};
pub use loss::{inner_mpdiou, inner_mpdiou_loss_grad, BoxCwh, CornerMode, LossContext};
pub use prune::{apply_prune, search_speedup, select_channels, PrunePlan, Pruner};
pub use tensor::{ConvParams, Tensor4};
