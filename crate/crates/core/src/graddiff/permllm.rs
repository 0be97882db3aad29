use std::any::Any;
use std::ops::Range;

use super::{Stage, StageAdjoint};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::permlearn::{loss_cosine, loss_cosine_pullback, Activation, BlockLayout};
use crate::sparsity::ImportanceScores;

/// Block-diagonal right multiplication `X · diag(P_b)`.
fn times_block_diag<T: Real>(
    x: &Matrix<T>,
    layout: &BlockLayout,
    blocks: &[Matrix<T>],
    transpose: bool,
) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for ((start, len), p) in layout.blocks().zip(blocks) {
        let xb = x.column_block(start, len);
        let yb = if transpose { xb.matmul_nt(p)? } else { xb.matmul(p)? };
        out.set_column_block(start, &yb);
    }
    Ok(out)
}

/// `Ŝ = S · P_B`, appended to the value list.
///
/// The pullback adds `S_bᵀ · adj(Ŝ)_b` into each block's adjoint when the
/// score path is enabled; otherwise the score adjoint is dropped.
pub struct ScorePermute<T> {
    scores: ImportanceScores<T>,
    layout: BlockLayout,
    block_offset: usize,
    propagate: bool,
}

impl<T: Real> ScorePermute<T> {
    pub fn new(
        scores: ImportanceScores<T>,
        layout: BlockLayout,
        block_offset: usize,
        propagate: bool,
    ) -> Result<Self> {
        if scores.matrix().cols() != layout.c_in() {
            return Err(Error::dim(
                "ScorePermute::new",
                format!("scores have {} columns, layout covers {}", scores.matrix().cols(), layout.c_in()),
            ));
        }
        Ok(ScorePermute {
            scores,
            layout,
            block_offset,
            propagate,
        })
    }

    fn range(&self) -> Range<usize> {
        self.block_offset..self.block_offset + self.layout.num_blocks()
    }
}

impl<T: Real> Stage<T> for ScorePermute<T> {
    fn name(&self) -> &str {
        "score-permute"
    }

    fn check_input(&self, shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        let r = self.range();
        if shapes.len() < r.end {
            return Err(format!("expected permutation blocks {r:?}, got {} items", shapes.len()));
        }
        for (shape, (_, len)) in shapes[r].iter().zip(self.layout.blocks()) {
            if *shape != (len, len) {
                return Err(format!("block shape {shape:?}, expected {len}x{len}"));
            }
        }
        Ok(())
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let s_hat = times_block_diag(self.scores.matrix(), &self.layout, &input[self.range()], false)?;
        let mut out = input.to_vec();
        out.push(s_hat);
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let (adj_s_hat, rest) = adjoint
            .split_last()
            .ok_or_else(|| Error::Config("score-permute received an empty adjoint".into()))?;
        let mut out = rest.to_vec();
        if self.propagate {
            let s = self.scores.matrix();
            for (b, (start, len)) in self.layout.blocks().enumerate() {
                let g = s
                    .column_block(start, len)
                    .matmul_tn(&adj_s_hat.column_block(start, len))?;
                out[self.block_offset + b].add_assign(&g)?;
            }
        }
        Ok(StageAdjoint::input_only(out))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Where a pruned layer finds its permutation blocks and mask in the value
/// list.
#[derive(Clone, Debug)]
pub struct PrunedSlot {
    pub block_range: Range<usize>,
    pub layout: BlockLayout,
    pub mask_index: usize,
}

#[derive(Clone, Debug)]
pub struct ChainLayerSpec<T> {
    pub weight: Matrix<T>,
    pub activation: Activation,
    pub pruned: Option<PrunedSlot>,
}

struct LayerCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    /// `(A = W·P, B = M ⊙ A, W_eff = B·Pᵀ)` for pruned layers.
    pruned: Option<(Matrix<T>, Matrix<T>, Matrix<T>)>,
}

/// Forward inputs and per-layer intermediates.
type ChainCache<T> = (Vec<Matrix<T>>, Vec<LayerCache<T>>);

/// Forward pass of a chain of linear layers whose pruned members use the
/// effective weight `W_eff = (M ⊙ (W·P)) · Pᵀ`, consuming
/// `[P blocks…, masks…]` and producing `[Ỹ]`.
pub struct ChainForward<T> {
    input: Matrix<T>,
    layers: Vec<ChainLayerSpec<T>>,
    cache: Option<ChainCache<T>>,
}

impl<T: Real> ChainForward<T> {
    pub fn new(input: Matrix<T>, layers: Vec<ChainLayerSpec<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("ChainForward::new"));
        }
        let mut width = input.cols();
        for l in &layers {
            if l.weight.cols() != width {
                return Err(Error::dim(
                    "ChainForward::new",
                    format!("layer expects {} inputs, receives {width}", l.weight.cols()),
                ));
            }
            if let Some(slot) = &l.pruned {
                if slot.layout.c_in() != width || slot.block_range.len() != slot.layout.num_blocks() {
                    return Err(Error::dim("ChainForward::new", "pruned slot does not match its layer"));
                }
            }
            width = l.weight.rows();
        }
        Ok(ChainForward {
            input,
            layers,
            cache: None,
        })
    }

    fn effective(
        spec: &ChainLayerSpec<T>,
        slot: &PrunedSlot,
        items: &[Matrix<T>],
    ) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        let blocks = &items[slot.block_range.clone()];
        let a = times_block_diag(&spec.weight, &slot.layout, blocks, false)?;
        let b = items[slot.mask_index].hadamard(&a)?;
        let w_eff = times_block_diag(&b, &slot.layout, blocks, true)?;
        Ok((a, b, w_eff))
    }
}

impl<T: Real> Stage<T> for ChainForward<T> {
    fn name(&self) -> &str {
        "chain-forward"
    }

    fn check_input(&self, shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        for spec in &self.layers {
            let Some(slot) = &spec.pruned else { continue };
            if slot.block_range.end > shapes.len() || slot.mask_index >= shapes.len() {
                return Err(format!("value list of {} items is too short", shapes.len()));
            }
            if shapes[slot.mask_index] != spec.weight.shape() {
                return Err(format!(
                    "mask shape {:?} vs weight {:?}",
                    shapes[slot.mask_index],
                    spec.weight.shape()
                ));
            }
        }
        Ok(())
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = self.input.clone();
        for spec in &self.layers {
            let pruned = match &spec.pruned {
                Some(slot) => Some(Self::effective(spec, slot, input)?),
                None => None,
            };
            let w = pruned.as_ref().map_or(&spec.weight, |(_, _, w_eff)| w_eff);
            let pre = h.matmul_nt(w)?;
            let next = spec.activation.apply(&pre);
            caches.push(LayerCache {
                input: h,
                pre,
                pruned,
            });
            h = next;
        }
        self.cache = Some((input.to_vec(), caches));
        Ok(vec![h])
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let (items, caches) = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let mut out: Vec<Matrix<T>> = items.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let mut g = adjoint[0].clone();
        for (spec, c) in self.layers.iter().zip(caches).rev() {
            let g_pre = spec.activation.pullback(&g, &c.pre)?;
            let w = c.pruned.as_ref().map_or(&spec.weight, |(_, _, w_eff)| w_eff);
            if let (Some(slot), Some((a, b, _))) = (&spec.pruned, &c.pruned) {
                let g_w = g_pre.matmul_tn(&c.input)?;
                let mask = &items[slot.mask_index];
                for (k, (start, len)) in slot.layout.blocks().enumerate() {
                    let p = &items[slot.block_range.start + k];
                    let g_w_b = g_w.column_block(start, len);
                    let g_b = g_w_b.matmul(p)?;
                    let g_a = g_b.hadamard(&mask.column_block(start, len))?;
                    let mut adj_p = g_w_b.matmul_tn(&b.column_block(start, len))?;
                    adj_p.add_assign(&spec.weight.column_block(start, len).matmul_tn(&g_a)?)?;
                    out[slot.block_range.start + k].add_assign(&adj_p)?;
                    let mut adj_m = out[slot.mask_index].column_block(start, len);
                    adj_m.add_assign(&g_b.hadamard(&a.column_block(start, len))?)?;
                    out[slot.mask_index].set_column_block(start, &adj_m);
                }
            }
            g = g_pre.matmul(w)?;
        }
        Ok(StageAdjoint::input_only(out))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `[Ỹ] ↦ [[mean(1 − cos(y, ỹ))]]`.
pub struct CosineLoss<T> {
    target: Matrix<T>,
    prediction: Option<Matrix<T>>,
}

impl<T: Real> CosineLoss<T> {
    pub fn new(target: Matrix<T>) -> Self {
        CosineLoss {
            target,
            prediction: None,
        }
    }
}

impl<T: Real> Stage<T> for CosineLoss<T> {
    fn name(&self) -> &str {
        "cosine-loss"
    }

    fn check_input(&self, shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        match shapes {
            [s] if *s == self.target.shape() => Ok(()),
            _ => Err(format!("expected one {:?} prediction, got {shapes:?}", self.target.shape())),
        }
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let loss = loss_cosine(&self.target, &input[0])?;
        self.prediction = Some(input[0].clone());
        Ok(vec![Matrix::filled(1, 1, loss)])
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let pred = self.prediction.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let g = loss_cosine_pullback(&self.target, pred)?.scale(adjoint[0][(0, 0)]);
        Ok(StageAdjoint::input_only(vec![g]))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
