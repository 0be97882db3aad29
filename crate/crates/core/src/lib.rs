//! Learnable channel permutation for N:M semi-structured pruning.
//!
//! The crate relaxes block-wise channel permutations with Sinkhorn
//! normalization, hardens them with a linear sum assignment solver, selects
//! N:M masks from permuted importance scores and trains the permutation
//! logits end to end with straight-through gradients. Learned permutations
//! are folded into the stored weights and exported in a compressed N:M
//! layout.
//!
//! Module map:
//!
//! * [`numerics`]: dense matrices, deterministic RNG, AdamW.
//! * [`graddiff`]: fixed-pipeline reverse-mode tape and finite-difference checks.
//! * [`sinkhorn`]: soft permutations and the temperature schedule.
//! * [`assignment`]: permutation indices and the Hungarian solver.
//! * [`sparsity`]: importance metrics, hard/soft N:M masks, the compressed codec.
//! * [`permlearn`]: block parameters, the sparse forward pass, training, folding.
//! * [`reference`]: heuristic channel permutation, exhaustive partition oracle.
//! * [`pipeline`]: tensor containers, reports, CLI commands, fixtures, benchmark.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod error;
pub mod graddiff;
pub mod numerics;
pub mod permlearn;
pub mod pipeline;
pub mod reference;
pub mod sinkhorn;
pub mod sparsity;

pub use assignment::{dense_permutation, exhaustive_lsa, solve_lsa, Assignment, PermutationIndices};
pub use error::{Error, Result};
pub use numerics::{adamw_step, softmax, AdamWConfig, AdamWState, Matrix, Real, Rng};
pub use sinkhorn::{sinkhorn_normalize, soft_permutation, SoftPermutation, TemperatureSchedule};
pub use sparsity::{
    magnitude_scores, nm_mask, retained_score, soft_mask, wanda_scores, CompressedNm,
    ImportanceScores, Metric, NmConfig, SoftMask, SparsityMask,
};
