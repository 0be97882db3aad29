use serde::{Deserialize, Serialize};

use crate::assignment::PermutationIndices;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};
use crate::sparsity::NmConfig;

/// Standard deviation of the initial permutation logits.
pub const INIT_STD: f64 = 0.01;

/// Contiguous partition of `[0, c_in)` into permutation blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    c_in: usize,
    starts: Vec<usize>,
}

impl BlockLayout {
    /// Uniform blocks of `block_size`; the last block is ragged when
    /// `block_size` does not divide `c_in`.
    pub fn uniform(c_in: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || c_in == 0 {
            return Err(Error::Config("block size and channel count must be positive".into()));
        }
        if block_size > c_in {
            return Err(Error::Config(format!(
                "block size {block_size} exceeds the {c_in} input channels"
            )));
        }
        Ok(BlockLayout {
            c_in,
            starts: (0..c_in).step_by(block_size).collect(),
        })
    }

    pub fn from_starts(c_in: usize, starts: Vec<usize>) -> Result<Self> {
        if starts.first() != Some(&0) {
            return Err(Error::Config("block boundaries must start at 0".into()));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) || starts.last().is_none_or(|&s| s >= c_in) {
            return Err(Error::Config(format!(
                "block boundaries {starts:?} must increase strictly within [0, {c_in})"
            )));
        }
        Ok(BlockLayout { c_in, starts })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn num_blocks(&self) -> usize {
        self.starts.len()
    }

    /// `(start, len)` of every block.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().enumerate().map(move |(i, &s)| {
            let end = self.starts.get(i + 1).copied().unwrap_or(self.c_in);
            (s, end - s)
        })
    }

    pub fn block_of(&self, channel: usize) -> usize {
        self.starts.partition_point(|&s| s <= channel) - 1
    }

    /// Every block must split into whole N:M groups.
    pub fn check_groups(&self, cfg: NmConfig) -> Result<()> {
        for (start, len) in self.blocks() {
            if len % cfg.group != 0 {
                return Err(Error::Config(format!(
                    "group {} must divide block size {len} (block at {start})",
                    cfg.group
                )));
            }
        }
        Ok(())
    }

    /// `Σ Bᵢ²`.
    pub fn param_count(&self) -> usize {
        self.blocks().map(|(_, len)| len * len).sum()
    }

    /// Does `perm` keep every channel inside its own block?
    pub fn confines(&self, perm: &PermutationIndices) -> bool {
        perm.len() == self.c_in
            && perm
                .as_slice()
                .iter()
                .enumerate()
                .all(|(j, &src)| self.block_of(j) == self.block_of(src))
    }

    /// Global permutation from per-block local permutations.
    pub fn assemble(&self, local: &[PermutationIndices]) -> Result<PermutationIndices> {
        if local.len() != self.num_blocks() {
            return Err(Error::dim(
                "BlockLayout::assemble",
                format!("{} local permutations for {} blocks", local.len(), self.num_blocks()),
            ));
        }
        let mut perm = Vec::with_capacity(self.c_in);
        for ((start, len), p) in self.blocks().zip(local) {
            if p.len() != len {
                return Err(Error::dim(
                    "BlockLayout::assemble",
                    format!("local permutation of length {} for block of {len}", p.len()),
                ));
            }
            perm.extend(p.as_slice().iter().map(|&i| start + i));
        }
        PermutationIndices::new(perm)
    }

    /// Per-block local permutations; fails if `perm` crosses blocks.
    pub fn split(&self, perm: &PermutationIndices) -> Result<Vec<PermutationIndices>> {
        if !self.confines(perm) {
            return Err(Error::InvalidPermutation("permutation crosses block boundaries".into()));
        }
        self.blocks()
            .map(|(start, len)| {
                PermutationIndices::new(
                    perm.as_slice()[start..start + len].iter().map(|&i| i - start).collect(),
                )
            })
            .collect()
    }
}

/// Learnable logits `W_P^i`, one square matrix per block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPermutationParams<T> {
    layout: BlockLayout,
    blocks: Vec<Matrix<T>>,
}

impl<T: Real> BlockPermutationParams<T> {
    pub fn new(layout: BlockLayout, blocks: Vec<Matrix<T>>) -> Result<Self> {
        if blocks.len() != layout.num_blocks()
            || blocks
                .iter()
                .zip(layout.blocks())
                .any(|(b, (_, len))| b.shape() != (len, len))
        {
            return Err(Error::dim(
                "BlockPermutationParams::new",
                "block matrices do not match the layout",
            ));
        }
        Ok(BlockPermutationParams { layout, blocks })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[Matrix<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.as_slice().len()).sum()
    }
}

/// Small Gaussian logits (σ = [`INIT_STD`]) for every block.
pub fn init_params<T: Real>(
    c_in: usize,
    block_size: usize,
    rng: &mut Rng,
) -> Result<BlockPermutationParams<T>> {
    let layout = BlockLayout::uniform(c_in, block_size)?;
    let blocks = layout
        .blocks()
        .map(|(_, len)| rng.gaussian_matrix(len, len, INIT_STD))
        .collect();
    BlockPermutationParams::new(layout, blocks)
}
