use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assignment::PermutationIndices;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::permlearn::{fold_and_export, train_problem, LayerSelection, Mode, Model, Problem, TrainConfig};
use crate::reference::oracle_objective;
use crate::sparsity::{check_nm_mask, Metric, NmConfig};

use super::container::{load_calibration, load_model, save_model};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Everything a prune or compare run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: PathBuf,
    pub calib: PathBuf,
    pub nm: NmConfig,
    pub metric: Metric,
    pub block_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub sinkhorn_iters: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub mode: Mode,
    pub partial_layers: LayerSelection,
    pub seed: u64,
    pub precision: Precision,
}

impl RunConfig {
    /// Run defaults for the given inputs.
    pub fn new(model: impl Into<PathBuf>, calib: impl Into<PathBuf>) -> Self {
        let t = TrainConfig::default();
        RunConfig {
            model: model.into(),
            calib: calib.into(),
            nm: NmConfig::new(2, 4).expect("2:4 is valid"),
            metric: t.metric,
            block_size: t.block_size,
            steps: t.steps,
            lr: t.learning_rate,
            sinkhorn_iters: t.sinkhorn_iters,
            tau_start: t.tau_start,
            tau_end: t.tau_end,
            mode: t.mode,
            partial_layers: t.partial_layers,
            seed: t.seed,
            precision: Precision::F32,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            steps: self.steps,
            sinkhorn_iters: self.sinkhorn_iters,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            block_size: self.block_size,
            metric: self.metric,
            mode: self.mode,
            seed: self.seed,
            partial_layers: self.partial_layers.clone(),
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub c_out: usize,
    pub c_in: usize,
    pub block_boundaries: Vec<usize>,
    pub identity_loss: f64,
    pub heuristic_cp_loss: f64,
    pub permllm_loss: f64,
    pub oracle_loss: Option<f64>,
    pub oracle_evaluated: Option<u64>,
    pub identity_retained: f64,
    pub heuristic_cp_retained: f64,
    pub permllm_retained: f64,
    pub oracle_retained: Option<f64>,
    pub mask_density: f64,
    pub mask_valid: bool,
    pub permutation: Vec<usize>,
    pub best_step: Option<usize>,
    pub diagnostic: Option<String>,
}

/// Losses of the whole model against its dense output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLosses {
    pub identity: f64,
    pub heuristic_cp: f64,
    pub permllm: f64,
    pub oracle_layerwise: Option<f64>,
}

/// Per-layer losses are layer-local (dense layer input, dense
/// pre-activation target) for every method, so columns are comparable in
/// both modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub mode: Mode,
    pub layers: Vec<LayerReport>,
    pub model_loss: ModelLosses,
    pub wall_clock_seconds: f64,
}

impl Report {
    /// Copy with timing fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Report {
        Report {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Files written by [`cli_prune`].
#[derive(Clone, Debug)]
pub struct PruneArtifacts {
    pub report: Report,
    pub report_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub model_path: PathBuf,
    pub compressed_paths: Vec<PathBuf>,
}

struct Evaluated<T> {
    report: Report,
    folded: Option<crate::permlearn::FoldedModel<T>>,
}

fn run_generic<T: Real>(cfg: &RunConfig, command: &str, with_oracle: bool, fold: bool) -> Result<Evaluated<T>> {
    let start = Instant::now();
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let model: Model<T> = load_model(&cfg.model)?;
    let calib: Matrix<T> = load_calibration(&cfg.calib)?;
    let problem = Problem::new(&model, &calib, &tcfg, cfg.nm)?;
    let solutions = train_problem(&problem, &tcfg)?;
    let heuristic = problem.heuristic_perms()?;
    let identity = problem.identity_perms();
    let learned: Vec<PermutationIndices> = solutions.iter().map(|s| s.permutation.clone()).collect();

    let mut layers = Vec::with_capacity(solutions.len());
    let mut oracle_perms = Some(Vec::new());
    for (k, sol) in solutions.iter().enumerate() {
        let obj = problem.layer_objective(k);
        let id = obj.evaluate(std::slice::from_ref(&identity[k]))?;
        let heur = obj.evaluate(std::slice::from_ref(&heuristic[k]))?;
        let mine = obj.evaluate(std::slice::from_ref(&learned[k]))?;
        let oracle = if with_oracle {
            match oracle_objective(&obj) {
                Ok(res) => Some(res),
                Err(Error::TooLarge(msg)) => {
                    log::info!("oracle skipped for `{}`: {msg}", sol.layer);
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let oracle_retained = match &oracle {
            Some(res) => Some(obj.evaluate(&res.best_permutations)?.retained[0].to_f64()),
            None => None,
        };
        match (&mut oracle_perms, &oracle) {
            (Some(v), Some(res)) => v.push(res.best_permutations[0].clone()),
            _ => oracle_perms = None,
        }
        let mask = mine.masks[0].matrix();
        layers.push(LayerReport {
            name: sol.layer.clone(),
            c_out: mask.rows(),
            c_in: mask.cols(),
            block_boundaries: sol.layout.starts().to_vec(),
            identity_loss: id.loss.to_f64(),
            heuristic_cp_loss: heur.loss.to_f64(),
            permllm_loss: mine.loss.to_f64(),
            oracle_loss: oracle.as_ref().map(|r| r.best_loss),
            oracle_evaluated: oracle.as_ref().map(|r| r.evaluated_count),
            identity_retained: id.retained[0].to_f64(),
            heuristic_cp_retained: heur.retained[0].to_f64(),
            permllm_retained: mine.retained[0].to_f64(),
            oracle_retained,
            mask_density: mine.masks[0].density(),
            mask_valid: check_nm_mask(mask, cfg.nm).is_ok() && mine.masks[0].density() == cfg.nm.density(),
            permutation: sol.permutation.as_slice().to_vec(),
            best_step: sol.best_step,
            diagnostic: sol.diagnostic.clone(),
        });
    }

    let whole = problem.model_objective();
    let model_loss = ModelLosses {
        identity: whole.evaluate(&identity)?.loss.to_f64(),
        heuristic_cp: whole.evaluate(&heuristic)?.loss.to_f64(),
        permllm: whole.evaluate(&learned)?.loss.to_f64(),
        oracle_layerwise: match &oracle_perms {
            Some(p) if with_oracle => Some(whole.evaluate(p)?.loss.to_f64()),
            _ => None,
        },
    };
    let folded = if fold {
        Some(fold_and_export(&model, &solutions, cfg.nm)?)
    } else {
        None
    };
    Ok(Evaluated {
        report: Report {
            report_version: REPORT_VERSION,
            command: command.into(),
            config: cfg.clone(),
            seed: cfg.seed,
            mode: cfg.mode,
            layers,
            model_loss,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
        folded,
    })
}

/// Trains permutations, folds them into the model and writes
/// `report.json`, `permutations.json`, `pruned.json`/`pruned.bin` and one
/// `<layer>.pnmc` per pruned layer into `out`.
pub fn cli_prune(cfg: &RunConfig, out: impl AsRef<Path>) -> Result<PruneArtifacts> {
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    match cfg.precision {
        Precision::F32 => prune_generic::<f32>(cfg, out),
        Precision::F64 => prune_generic::<f64>(cfg, out),
    }
}

fn prune_generic<T: Real>(cfg: &RunConfig, out: &Path) -> Result<PruneArtifacts> {
    let Evaluated { report, folded } = run_generic::<T>(cfg, "prune", false, true)?;
    let folded = folded.expect("fold requested");
    let report_path = out.join("report.json");
    report.write_to(&report_path)?;
    let sidecar_path = out.join("permutations.json");
    fs::write(&sidecar_path, serde_json::to_string_pretty(&folded.sidecar)?)?;
    let model_path = out.join("pruned.json");
    save_model(&folded.model, &model_path)?;
    let mut compressed_paths = Vec::new();
    for (name, c) in &folded.compressed {
        let p = out.join(format!("{name}.pnmc"));
        c.write_to(&p)?;
        compressed_paths.push(p);
    }
    Ok(PruneArtifacts {
        report,
        report_path,
        sidecar_path,
        model_path,
        compressed_paths,
    })
}

/// Evaluates identity, heuristic, learned and (where enumerable) oracle
/// permutations on the same model and seed.
pub fn cli_compare(cfg: &RunConfig) -> Result<Report> {
    let r = match cfg.precision {
        Precision::F32 => run_generic::<f32>(cfg, "compare", true, false)?.report,
        Precision::F64 => run_generic::<f64>(cfg, "compare", true, false)?.report,
    };
    Ok(r)
}
