use crate::assignment::{solve_lsa, PermutationIndices};
use crate::error::{Error, Result};
use crate::graddiff::{
    ChainForward, ChainLayerSpec, ColNorm, CosineLoss, Exp, GroupSoftmax, Harden, MaskSte,
    PrunedSlot, RowNorm, Scale, ScorePermute, Tape,
};
use crate::numerics::{Matrix, Real};
use crate::sinkhorn::soft_permutation;
use crate::sparsity::{check_nm_mask, nm_mask, retained_score, ImportanceScores, NmConfig, SparsityMask};

use super::loss::loss_cosine;
use super::model::Activation;
use super::params::{BlockLayout, BlockPermutationParams};

/// Mask chosen by the permuted scores `S·P`, in permuted column order.
pub fn hard_mask<T: Real>(
    scores: &ImportanceScores<T>,
    perm: &PermutationIndices,
    cfg: NmConfig,
) -> Result<SparsityMask<T>> {
    nm_mask(&scores.permuted(perm)?, cfg)
}

/// `(M ⊙ (W·P))·Pᵀ`, i.e. the masked weight back in original column order.
pub fn effective_weight<T: Real>(
    w: &Matrix<T>,
    perm: &PermutationIndices,
    mask: &SparsityMask<T>,
) -> Result<Matrix<T>> {
    w.masked(&mask.matrix().gather_columns(&perm.inverse())?)
}

/// One step of the sparse forward pass with hard permutation and mask.
#[derive(Clone, Debug)]
pub struct SparseForward<T> {
    pub y_tilde: Matrix<T>,
    pub permutation: PermutationIndices,
    pub mask: SparsityMask<T>,
    /// Soft permutation of every block before hardening.
    pub soft_blocks: Vec<Matrix<T>>,
}

/// Soft permutation per block, hardened by assignment, then masked by the
/// permuted scores and applied to `x`.
pub fn forward_sparse<T: Real>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    params: &BlockPermutationParams<T>,
    tau: f64,
    sinkhorn_iters: usize,
    cfg: NmConfig,
    scores: &ImportanceScores<T>,
) -> Result<SparseForward<T>> {
    let layout = params.layout();
    if w.cols() != layout.c_in() || x.cols() != w.cols() || scores.matrix().shape() != w.shape() {
        return Err(Error::dim(
            "forward_sparse",
            format!(
                "weight {:?}, input {:?}, scores {:?}, {} permuted channels",
                w.shape(),
                x.shape(),
                scores.matrix().shape(),
                layout.c_in()
            ),
        ));
    }
    layout.check_groups(cfg)?;
    let soft_blocks = params
        .blocks()
        .iter()
        .map(|b| soft_permutation(b, tau, sinkhorn_iters).map(|p| p.into_matrix()))
        .collect::<Result<Vec<_>>>()?;
    let local = soft_blocks
        .iter()
        .map(|p| solve_lsa(p).map(|a| a.perm))
        .collect::<Result<Vec<_>>>()?;
    let permutation = layout.assemble(&local)?;
    let mask = hard_mask(scores, &permutation, cfg)?;
    let y_tilde = x.matmul_nt(&effective_weight(w, &permutation, &mask)?)?;
    Ok(SparseForward {
        y_tilde,
        permutation,
        mask,
        soft_blocks,
    })
}

/// Pruning data attached to one layer of an [`Objective`].
#[derive(Clone, Debug)]
pub struct PruneSpec<T> {
    pub scores: ImportanceScores<T>,
    pub layout: BlockLayout,
}

#[derive(Clone, Debug)]
pub struct ObjectiveLayer<T> {
    pub weight: Matrix<T>,
    pub activation: Activation,
    pub prune: Option<PruneSpec<T>>,
}

/// A reconstruction problem: run `input` through a chain of layers, some
/// of them pruned under learned permutations, and compare with `target`
/// by cosine loss.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub input: Matrix<T>,
    pub target: Matrix<T>,
    pub layers: Vec<ObjectiveLayer<T>>,
    pub cfg: NmConfig,
}

/// Hard (permutation + mask) evaluation of an [`Objective`].
#[derive(Clone, Debug)]
pub struct HardEval<T> {
    pub loss: T,
    /// One mask per pruned layer, in permuted column order.
    pub masks: Vec<SparsityMask<T>>,
    pub retained: Vec<T>,
}

impl<T: Real> Objective<T> {
    /// One pruned layer without activation; the target is the dense output.
    pub fn single_layer(
        w: Matrix<T>,
        x: Matrix<T>,
        scores: ImportanceScores<T>,
        layout: BlockLayout,
        cfg: NmConfig,
    ) -> Result<Self> {
        let target = x.matmul_nt(&w)?;
        let obj = Objective {
            input: x,
            target,
            layers: vec![ObjectiveLayer {
                weight: w,
                activation: Activation::Identity,
                prune: Some(PruneSpec { scores, layout }),
            }],
            cfg,
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input.cols();
        for l in &self.layers {
            if l.weight.cols() != width {
                return Err(Error::dim(
                    "Objective",
                    format!("layer expects {} inputs, receives {width}", l.weight.cols()),
                ));
            }
            if let Some(p) = &l.prune {
                if p.scores.matrix().shape() != l.weight.shape() || p.layout.c_in() != width {
                    return Err(Error::dim("Objective", "scores or layout do not match the weight"));
                }
                self.cfg.check_divides(width, "the input channel count")?;
                p.layout.check_groups(self.cfg)?;
            }
            width = l.weight.rows();
        }
        if self.target.shape() != (self.input.rows(), width) {
            return Err(Error::dim(
                "Objective",
                format!("target {:?} vs output ({}, {width})", self.target.shape(), self.input.rows()),
            ));
        }
        Ok(())
    }

    pub fn pruned(&self) -> impl Iterator<Item = &PruneSpec<T>> {
        self.layers.iter().filter_map(|l| l.prune.as_ref())
    }

    pub fn layouts(&self) -> Vec<BlockLayout> {
        self.pruned().map(|p| p.layout.clone()).collect()
    }

    pub fn identity_perms(&self) -> Vec<PermutationIndices> {
        self.pruned()
            .map(|p| PermutationIndices::identity(p.layout.c_in()))
            .collect()
    }

    /// Output of the chain with hard masks under `perms` (one per pruned
    /// layer), plus those masks and their retained scores.
    #[allow(clippy::type_complexity)]
    pub fn output(&self, perms: &[PermutationIndices]) -> Result<(Matrix<T>, Vec<SparsityMask<T>>, Vec<T>)> {
        if perms.len() != self.pruned().count() {
            return Err(Error::dim(
                "Objective::output",
                format!("{} permutations for {} pruned layers", perms.len(), self.pruned().count()),
            ));
        }
        let mut masks = Vec::with_capacity(perms.len());
        let mut retained = Vec::with_capacity(perms.len());
        let mut perm_iter = perms.iter();
        let mut h = self.input.clone();
        for l in &self.layers {
            let pre = match &l.prune {
                Some(p) => {
                    let perm = perm_iter.next().expect("counted above");
                    if !p.layout.confines(perm) {
                        return Err(Error::InvalidPermutation(
                            "permutation crosses block boundaries".into(),
                        ));
                    }
                    let permuted = p.scores.permuted(perm)?;
                    let mask = nm_mask(&permuted, self.cfg)?;
                    debug_assert!(check_nm_mask(mask.matrix(), self.cfg).is_ok());
                    retained.push(retained_score(&permuted, &mask)?);
                    let pre = h.matmul_nt(&effective_weight(&l.weight, perm, &mask)?)?;
                    masks.push(mask);
                    pre
                }
                None => h.matmul_nt(&l.weight)?,
            };
            h = l.activation.apply(&pre);
        }
        Ok((h, masks, retained))
    }

    pub fn evaluate(&self, perms: &[PermutationIndices]) -> Result<HardEval<T>> {
        let (out, masks, retained) = self.output(perms)?;
        Ok(HardEval {
            loss: loss_cosine(&self.target, &out)?,
            masks,
            retained,
        })
    }

    /// The differentiable pipeline from permutation logits (all pruned
    /// layers' blocks, concatenated) to the scalar loss.
    ///
    /// With `hard` the tape hardens permutations and masks with
    /// straight-through stages; without it the tape is the fully soft
    /// surrogate used for gradient checks.
    pub fn tape(&self, tau: f64, sinkhorn_iters: usize, score_gradient: bool, hard: bool) -> Result<Tape<T>> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let total_blocks: usize = self.pruned().map(|p| p.layout.num_blocks()).sum();
        let mut tape = Tape::new();
        tape.push(Scale::new(T::of(1.0 / tau)));
        if sinkhorn_iters > 0 {
            tape.push(Exp::shifted());
        } else {
            tape.push(Exp::unshifted());
        }
        for _ in 0..sinkhorn_iters {
            tape.push(RowNorm::new()).push(ColNorm::new());
        }
        if hard {
            tape.push(Harden::new());
        }
        let mut specs = Vec::with_capacity(self.layers.len());
        let (mut offset, mut k) = (0, 0);
        for l in &self.layers {
            let pruned = match &l.prune {
                Some(p) => {
                    let n = p.layout.num_blocks();
                    tape.push(ScorePermute::new(p.scores.clone(), p.layout.clone(), offset, score_gradient)?);
                    tape.push(GroupSoftmax::new(self.cfg));
                    if hard {
                        tape.push(MaskSte::new(self.cfg));
                    }
                    let slot = PrunedSlot {
                        block_range: offset..offset + n,
                        layout: p.layout.clone(),
                        mask_index: total_blocks + k,
                    };
                    offset += n;
                    k += 1;
                    Some(slot)
                }
                None => None,
            };
            specs.push(ChainLayerSpec {
                weight: l.weight.clone(),
                activation: l.activation,
                pruned,
            });
        }
        tape.push(ChainForward::new(self.input.clone(), specs)?);
        tape.push(CosineLoss::new(self.target.clone()));
        Ok(tape)
    }

    /// Splits the hardened per-block permutations of a forward tape into
    /// one global permutation per pruned layer.
    pub fn hardened(&self, tape: &Tape<T>) -> Result<Vec<PermutationIndices>> {
        let harden = tape
            .find::<Harden>()
            .ok_or_else(|| Error::Config("tape has no hardening stage".into()))?;
        let local = harden.permutations();
        let mut out = Vec::new();
        let mut offset = 0;
        for p in self.pruned() {
            let n = p.layout.num_blocks();
            let blocks = local
                .get(offset..offset + n)
                .ok_or(Error::BackwardBeforeForward)?;
            out.push(p.layout.assemble(blocks)?);
            offset += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::dense_permutation;
    use crate::graddiff::finite_diff_check;
    use crate::numerics::Rng;
    use crate::permlearn::params::init_params;
    use crate::sparsity::{magnitude_scores, wanda_scores};

    fn toy(seed: u64) -> Objective<f64> {
        let mut rng = Rng::new(seed);
        let w = rng.gaussian_matrix::<f64>(4, 8, 1.0);
        let x = rng.gaussian_matrix::<f64>(16, 8, 1.0);
        let s = wanda_scores(&w, &x).unwrap();
        Objective::single_layer(w, x, s, BlockLayout::uniform(8, 8).unwrap(), NmConfig::new(2, 4).unwrap())
            .unwrap()
    }

    #[test]
    fn dense_permutation_oracle() {
        let w = Matrix::<f64>::from_f64(1, 4, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let x = Matrix::<f64>::from_f64(1, 4, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let cfg = NmConfig::new(2, 4).unwrap();
        let scores = magnitude_scores(&w).unwrap();
        let layout = BlockLayout::uniform(4, 4).unwrap();
        let mut rng = Rng::new(0);
        for _ in 0..24 {
            let perm = rng.permutation(4);
            let mask = hard_mask(&scores, &perm, cfg).unwrap();
            let p = dense_permutation::<f64>(&perm);
            // (M ⊙ (W·P))·Pᵀ applied to x, with explicit dense products
            let w_eff = mask.matrix().hadamard(&w.matmul(&p).unwrap()).unwrap().matmul_nt(&p).unwrap();
            let dense = x.matmul_nt(&w_eff).unwrap();
            let fast = x.matmul_nt(&effective_weight(&w, &perm, &mask).unwrap()).unwrap();
            assert_eq!(dense, fast);
            let y = fast[(0, 0)];
            assert!(y == 0.0 || y == 1.0);
        }
        let params = BlockPermutationParams::new(layout, vec![Matrix::identity(4).scale(50.0)]).unwrap();
        let f = forward_sparse(&w, &x, &params, 1.0, 5, cfg, &scores).unwrap();
        assert!(f.permutation.is_identity());
        assert_eq!(f.y_tilde[(0, 0)], 1.0);
    }

    #[test]
    fn identity_forcing_params_cancel_permutation() {
        let mut rng = Rng::new(1);
        let w = rng.gaussian_matrix::<f64>(4, 8, 1.0);
        let x = rng.gaussian_matrix::<f64>(6, 8, 1.0);
        let layout = BlockLayout::uniform(8, 8).unwrap();
        let p = Matrix::identity(8).scale(30.0);
        let params = BlockPermutationParams::new(layout.clone(), vec![p]).unwrap();
        let f = forward_sparse(&w, &x, &params, 0.5, 5, NmConfig::new(2, 4).unwrap(), &magnitude_scores(&w).unwrap())
            .unwrap();
        assert!(f.permutation.is_identity());
        // dense path: without a mask the permute/unpermute pair cancels
        let perm = rng.permutation(8);
        let w_perm = w.gather_columns(&perm).unwrap();
        let back = w_perm.gather_columns(&perm.inverse()).unwrap();
        let y = x.matmul_nt(&back).unwrap();
        let dense = x.matmul_nt(&w).unwrap();
        assert!(y.max_abs_diff(&dense) <= 1e-5 * dense.frobenius_norm());
    }

    #[test]
    fn intra_group_shuffles_leave_loss_unchanged() {
        let obj = toy(3);
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let base = rng.permutation(8);
            let mut shuffled = base.as_slice().to_vec();
            for g in shuffled.chunks_mut(4) {
                rng.shuffle(g);
            }
            let shuffled = PermutationIndices::new(shuffled).unwrap();
            let a = obj.evaluate(&[base]).unwrap().loss;
            let b = obj.evaluate(&[shuffled]).unwrap().loss;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn hard_tape_loss_matches_evaluation() {
        let obj = toy(5);
        let mut rng = Rng::new(6);
        let params = init_params::<f64>(8, 8, &mut rng).unwrap();
        let mut tape = obj.tape(0.3, 5, true, true).unwrap();
        let out = tape.run_forward(params.blocks().to_vec()).unwrap();
        let perms = obj.hardened(&tape).unwrap();
        let eval = obj.evaluate(&perms).unwrap();
        assert!((out[0][(0, 0)] - eval.loss).abs() < 1e-14);
        let f = forward_sparse(
            &obj.layers[0].weight,
            &obj.input,
            &params,
            0.3,
            5,
            obj.cfg,
            &obj.layers[0].prune.as_ref().unwrap().scores,
        )
        .unwrap();
        assert_eq!(f.permutation, perms[0]);
    }

    #[test]
    fn soft_surrogate_gradient() {
        let obj = toy(7);
        let mut rng = Rng::new(8);
        let point = vec![rng.gaussian_matrix::<f64>(8, 8, 1.0)];
        let mut tape = obj.tape(1.0, 5, true, false).unwrap();
        let check = finite_diff_check(&mut tape, &point, 1e-5).unwrap();
        assert!(check.max_rel_error <= 1e-4, "{check:?}");
    }

    #[test]
    fn straight_through_tape_refuses_finite_differences() {
        let obj = toy(9);
        let mut tape = obj.tape(1.0, 5, true, true).unwrap();
        assert!(finite_diff_check(&mut tape, &[Matrix::zeros(8, 8)], 1e-5).is_err());
    }
}
