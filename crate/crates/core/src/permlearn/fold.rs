use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::PermutationIndices;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::sparsity::{check_nm_mask, check_nm_weights, compress_nm, CompressedNm, NmConfig};

use super::model::Model;
use super::train::PermutationSolution;

/// Sidecar entry for one pruned layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub block_boundaries: Vec<usize>,
    pub perm: Vec<usize>,
    /// The layer has no predecessor to absorb the permutation, so inputs
    /// must be gathered with `perm` at inference time.
    pub first_layer_input_gather: bool,
}

/// Layer name to permutation record.
pub type PermutationSidecar = BTreeMap<String, SidecarEntry>;

/// Model with permutations folded into its weights.
#[derive(Clone, Debug)]
pub struct FoldedModel<T> {
    pub model: Model<T>,
    /// Gather applied to the model input before the first layer.
    pub input_gather: Option<PermutationIndices>,
    /// Compressed weights of every pruned layer, in model order.
    pub compressed: Vec<(String, CompressedNm)>,
    pub sidecar: PermutationSidecar,
}

impl<T: Real> FoldedModel<T> {
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.input_gather {
            Some(p) => self.model.forward(&x.gather_columns(p)?),
            None => self.model.forward(x),
        }
    }
}

/// Bakes learned permutations into the stored weights.
///
/// A pruned layer's weight becomes `M ⊙ (W·P)` (columns in permuted order,
/// N:M-valid). Its input channels are then in permuted order, so the
/// producing layer's rows are gathered with the same permutation; for the
/// first layer the gather is recorded on the model input instead.
pub fn fold_and_export<T: Real>(
    model: &Model<T>,
    solutions: &[PermutationSolution<T>],
    cfg: NmConfig,
) -> Result<FoldedModel<T>> {
    let mut layers = model.layers().to_vec();
    let mut input_gather = None;
    let mut sidecar = PermutationSidecar::new();
    let mut pruned = vec![false; layers.len()];
    let mut row_gathers = Vec::with_capacity(solutions.len());
    for sol in solutions {
        let l = model
            .index_of(&sol.layer)
            .ok_or_else(|| Error::Config(format!("solution for unknown layer `{}`", sol.layer)))?;
        let w = &layers[l].weight;
        if sol.permutation.len() != w.cols() || sol.mask.matrix().shape() != w.shape() {
            return Err(Error::dim(
                "fold_and_export",
                format!("solution for `{}` does not match weight {:?}", sol.layer, w.shape()),
            ));
        }
        if !sol.layout.confines(&sol.permutation) {
            return Err(Error::InvalidPermutation(format!(
                "permutation of `{}` crosses block boundaries",
                sol.layer
            )));
        }
        check_nm_mask(sol.mask.matrix(), cfg)?;
        if std::mem::replace(&mut pruned[l], true) {
            return Err(Error::Config(format!("two solutions for layer `{}`", sol.layer)));
        }
        layers[l].weight = sol.mask.apply(&w.gather_columns(&sol.permutation)?)?;
        row_gathers.push((l, &sol.permutation));
        sidecar.insert(
            sol.layer.clone(),
            SidecarEntry {
                block_boundaries: sol.layout.starts().to_vec(),
                perm: sol.permutation.as_slice().to_vec(),
                first_layer_input_gather: l == 0,
            },
        );
    }
    // rows move only after every mask has been applied in original row order
    for (l, perm) in row_gathers {
        if l == 0 {
            input_gather = Some(perm.clone());
        } else {
            layers[l - 1].weight = layers[l - 1].weight.gather_rows(perm)?;
        }
    }
    let mut compressed = Vec::new();
    for (layer, _) in layers.iter().zip(&pruned).filter(|(_, &p)| p) {
        check_nm_weights(&layer.weight, cfg)?;
        compressed.push((layer.name.clone(), compress_nm(&layer.weight.cast::<f32>(), cfg)?));
    }
    Ok(FoldedModel {
        model: Model::new(layers)?,
        input_gather,
        compressed,
        sidecar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::permlearn::{train, Activation, Layer, Mode, Problem, TrainConfig};
    use crate::sparsity::decompress_nm;

    fn two_layer(rng: &mut Rng) -> (Model<f64>, Matrix<f64>) {
        let model = Model::new(vec![
            Layer::new("fc1", rng.gaussian_matrix::<f64>(8, 16, 1.0), Activation::Relu),
            Layer::new("fc2", rng.gaussian_matrix::<f64>(4, 8, 1.0), Activation::Identity),
        ])
        .unwrap();
        (model, rng.gaussian_matrix(24, 16, 1.0))
    }

    #[test]
    fn folded_output_matches_training_forward() {
        let mut rng = Rng::new(21);
        let (model, x) = two_layer(&mut rng);
        let cfg = NmConfig::new(2, 4).unwrap();
        let tcfg = TrainConfig {
            steps: 8,
            block_size: 8,
            learning_rate: 5e-2,
            mode: Mode::Endtoend,
            ..TrainConfig::default()
        };
        let sols = train(&model, &x, &tcfg, cfg).unwrap();
        let folded = fold_and_export(&model, &sols, cfg).unwrap();

        let problem = Problem::new(&model, &x, &tcfg, cfg).unwrap();
        let perms: Vec<_> = sols.iter().map(|s| s.permutation.clone()).collect();
        let (expect, _, _) = problem.model_objective().output(&perms).unwrap();
        let got = folded.forward(&x).unwrap();
        assert!(got.max_abs_diff(&expect) <= 1e-10 * expect.frobenius_norm());

        assert!(folded.sidecar["fc1"].first_layer_input_gather);
        assert!(!folded.sidecar["fc2"].first_layer_input_gather);
        for layer in folded.model.layers() {
            check_nm_weights(&layer.weight, cfg).unwrap();
        }
        for (name, c) in &folded.compressed {
            let w = &folded.model.layers()[folded.model.index_of(name).unwrap()].weight;
            assert_eq!(&decompress_nm(c).unwrap(), &w.cast::<f32>());
        }
    }

    #[test]
    fn identity_fold_only_masks() {
        let mut rng = Rng::new(22);
        let (model, x) = two_layer(&mut rng);
        let cfg = NmConfig::new(2, 4).unwrap();
        let tcfg = TrainConfig {
            steps: 0,
            block_size: 8,
            ..TrainConfig::default()
        };
        let sols = train(&model, &x, &tcfg, cfg).unwrap();
        let folded = fold_and_export(&model, &sols, cfg).unwrap();
        for (sol, layer) in sols.iter().zip(folded.model.layers()) {
            assert!(sol.permutation.is_identity());
            let orig = &model.layers()[model.index_of(&sol.layer).unwrap()].weight;
            assert_eq!(layer.weight, sol.mask.apply(orig).unwrap());
        }
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let mut rng = Rng::new(23);
        let (model, x) = two_layer(&mut rng);
        let cfg = NmConfig::new(2, 4).unwrap();
        let tcfg = TrainConfig {
            steps: 0,
            block_size: 8,
            ..TrainConfig::default()
        };
        let mut sols = train(&model, &x, &tcfg, cfg).unwrap();
        sols[0].layer = "nope".into();
        assert!(fold_and_export(&model, &sols, cfg).is_err());
    }
}
