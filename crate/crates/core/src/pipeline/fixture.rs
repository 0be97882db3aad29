use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::permlearn::{Activation, Layer, Model};
use crate::reference::search_fig1;

use super::container::{save_calibration, save_model, TensorContainer, CALIBRATION_TENSOR};

/// Default calibration shape: 128 samples.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 128;
/// Attempts the counterexample search makes before giving up.
pub const FIG1_MAX_ATTEMPTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    /// Chain of Gaussian layers `dims[0] → dims[1] → …`, ReLU between
    /// layers, identity on the last.
    Mlp { dims: Vec<usize> },
    /// Gaussian calibration activations.
    Calibration { samples: usize, features: usize },
    /// One-layer 4×8 model plus calibration where the score-maximizing
    /// permutation loses to the identity.
    Fig1Search,
}

/// Writes the fixture container(s) to `out` and returns the written paths.
pub fn generate_fixture(kind: &FixtureKind, seed: u64, out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = Rng::new(seed);
    let blob = match kind {
        FixtureKind::Mlp { dims } => {
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::Config(format!("mlp needs at least two positive dims, got {dims:?}")));
            }
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| {
                    let act = if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
                    let std = 1.0 / (d[0] as f64).sqrt();
                    Layer::new(format!("fc{}", i + 1), rng.gaussian_matrix::<f32>(d[1], d[0], std), act)
                })
                .collect();
            save_model(&Model::new(layers)?, out)?
        }
        FixtureKind::Calibration { samples, features } => {
            if *samples == 0 || *features == 0 {
                return Err(Error::Config("calibration needs positive samples and features".into()));
            }
            save_calibration(&rng.gaussian_matrix::<f32>(*samples, *features, 1.0), out)?
        }
        FixtureKind::Fig1Search => {
            let inst = search_fig1(seed, FIG1_MAX_ATTEMPTS)?;
            log::info!("counterexample found after {} attempts", inst.attempts);
            let model = Model::new(vec![Layer::new("fc", inst.weight.cast::<f32>(), Activation::Identity)])?;
            let mut c = TensorContainer::from_model(&model)?;
            c.insert(CALIBRATION_TENSOR, inst.calibration.cast())?;
            c.save(out)?
        }
    };
    Ok(vec![out.to_path_buf(), blob])
}
