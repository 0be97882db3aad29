//! Block permutation parameters, the sparse forward pass, the cosine
//! objective, training and folding.

mod fold;
mod forward;
mod loss;
mod model;
mod params;
mod train;

pub use fold::{fold_and_export, FoldedModel, PermutationSidecar, SidecarEntry};
pub use forward::{
    effective_weight, forward_sparse, hard_mask, HardEval, Objective, ObjectiveLayer, PruneSpec,
    SparseForward,
};
pub use loss::{loss_cosine, loss_cosine_pullback};
pub use model::{Activation, Layer, Model, Trace};
pub use params::{init_params, BlockLayout, BlockPermutationParams, INIT_STD};
pub use train::{
    train, train_objective, train_problem, LayerSelection, Mode, PermutationSolution, Problem,
    TrainConfig, TrainOutcome,
};
