//! Importance metrics, N:M masks and the compressed N:M codec.

mod codec;
mod mask;
mod scores;

pub use codec::{compress_nm, decompress_nm, CompressedNm, CODEC_MAGIC, CODEC_VERSION};
pub(crate) use mask::group_softmax;
pub use mask::{
    check_nm_mask, check_nm_weights, nm_mask, retained_score, soft_mask, soft_mask_pullback,
    NmConfig, SoftMask, SparsityMask,
};
pub use scores::{magnitude_scores, wanda_scores, ImportanceMetric, ImportanceScores, Metric};
