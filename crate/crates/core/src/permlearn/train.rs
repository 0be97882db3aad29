use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_lsa, PermutationIndices};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, Matrix, Real, Rng};
use crate::reference::heuristic_cp;
use crate::sinkhorn::{perturb_with_gumbel, soft_permutation, TemperatureSchedule};
use crate::sparsity::{ImportanceMetric, ImportanceScores, Metric, NmConfig, SparsityMask};

use super::forward::{Objective, ObjectiveLayer, PruneSpec};
use super::model::{Activation, Model, Trace};
use super::params::{BlockLayout, INIT_STD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Each pruned layer reconstructs its own dense pre-activation output
    /// from the dense input it sees.
    #[default]
    Layerwise,
    /// All pruned layers train jointly against the dense model output.
    Endtoend,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Layerwise => "layerwise",
            Mode::Endtoend => "endtoend",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(Mode::Layerwise),
            "endtoend" | "end-to-end" => Ok(Mode::Endtoend),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Which layers get pruned.
///
/// Parsed from `all`, `last:K` or a comma-separated list of layer names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    #[default]
    All,
    Last(usize),
    Names(Vec<String>),
}

impl LayerSelection {
    /// Indices of the selected layers, in model order.
    pub fn resolve<T: Real>(&self, model: &Model<T>) -> Result<Vec<usize>> {
        let n = model.layers().len();
        let picked = match self {
            LayerSelection::All => (0..n).collect(),
            LayerSelection::Last(k) => {
                if *k == 0 || *k > n {
                    return Err(Error::Config(format!("cannot select the last {k} of {n} layers")));
                }
                (n - k..n).collect()
            }
            LayerSelection::Names(names) => {
                let mut idx = names
                    .iter()
                    .map(|name| {
                        model
                            .index_of(name)
                            .ok_or_else(|| Error::Config(format!("no layer named `{name}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                idx.sort_unstable();
                idx.dedup();
                idx
            }
        };
        Ok(picked)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Last(k) => write!(f, "last:{k}"),
            LayerSelection::Names(n) => f.write_str(&n.join(",")),
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "all" {
            return Ok(LayerSelection::All);
        }
        if let Some(k) = s.strip_prefix("last:") {
            return k
                .parse()
                .map(LayerSelection::Last)
                .map_err(|_| Error::Config(format!("bad layer count in `{s}`")));
        }
        Ok(LayerSelection::Names(
            s.split(',').map(|n| n.trim().to_string()).filter(|n| !n.is_empty()).collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub sinkhorn_iters: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub block_size: usize,
    pub metric: Metric,
    pub mode: Mode,
    pub seed: u64,
    pub partial_layers: LayerSelection,
    /// Propagate gradient through the permuted scores into the mask.
    pub score_gradient: bool,
    /// Scale of Gumbel noise added to the logits each step.
    pub gumbel_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 50,
            sinkhorn_iters: 5,
            tau_start: 1.0,
            tau_end: 0.1,
            block_size: 64,
            metric: Metric::Wanda,
            mode: Mode::Layerwise,
            seed: 0,
            partial_layers: LayerSelection::All,
            score_gradient: true,
            gumbel_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("at least one Sinkhorn iteration is required".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        if !(self.gumbel_noise >= 0.0 && self.gumbel_noise.is_finite()) {
            return Err(Error::Config("gumbel noise scale must be non-negative".into()));
        }
        self.schedule()?;
        Ok(())
    }

    /// Linear decay reaching `tau_end` at the last optimizer step.
    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        TemperatureSchedule::new(self.tau_start, self.tau_end, self.steps.saturating_sub(1).max(1))
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }
}

/// Dense reference pass plus everything the pruning methods share.
#[derive(Clone, Debug)]
pub struct Problem<T> {
    pub model: Model<T>,
    pub calibration: Matrix<T>,
    pub cfg: NmConfig,
    pub trace: Trace<T>,
    /// Model indices of the pruned layers, ascending.
    pub pruned: Vec<usize>,
    pub scores: Vec<ImportanceScores<T>>,
    pub layouts: Vec<BlockLayout>,
}

impl<T: Real> Problem<T> {
    pub fn new(model: &Model<T>, calibration: &Matrix<T>, tcfg: &TrainConfig, cfg: NmConfig) -> Result<Self> {
        if calibration.cols() != model.input_dim() {
            return Err(Error::dim(
                "Problem::new",
                format!(
                    "calibration has {} features, model expects {}",
                    calibration.cols(),
                    model.input_dim()
                ),
            ));
        }
        let trace = model.trace(calibration)?;
        let pruned = tcfg.partial_layers.resolve(model)?;
        if pruned.is_empty() {
            return Err(Error::Config("no layers selected for pruning".into()));
        }
        let mut scores = Vec::with_capacity(pruned.len());
        let mut layouts = Vec::with_capacity(pruned.len());
        for &l in &pruned {
            let layer = &model.layers()[l];
            cfg.check_divides(layer.c_in(), &format!("the input width of `{}`", layer.name))?;
            let layout = BlockLayout::uniform(layer.c_in(), tcfg.block_size.min(layer.c_in()))?;
            layout.check_groups(cfg)?;
            scores.push(tcfg.metric.scores(&layer.weight, &trace.inputs[l])?);
            layouts.push(layout);
        }
        Ok(Problem {
            model: model.clone(),
            calibration: calibration.clone(),
            cfg,
            trace,
            pruned,
            scores,
            layouts,
        })
    }

    pub fn layer_name(&self, k: usize) -> &str {
        &self.model.layers()[self.pruned[k]].name
    }

    /// Layer-local problem for the `k`-th pruned layer: dense input, dense
    /// pre-activation target.
    pub fn layer_objective(&self, k: usize) -> Objective<T> {
        let l = self.pruned[k];
        Objective {
            input: self.trace.inputs[l].clone(),
            target: self.trace.pre[l].clone(),
            layers: vec![ObjectiveLayer {
                weight: self.model.layers()[l].weight.clone(),
                activation: Activation::Identity,
                prune: Some(PruneSpec {
                    scores: self.scores[k].clone(),
                    layout: self.layouts[k].clone(),
                }),
            }],
            cfg: self.cfg,
        }
    }

    /// Whole-model problem against the dense model output.
    pub fn model_objective(&self) -> Objective<T> {
        let layers = self
            .model
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| ObjectiveLayer {
                weight: layer.weight.clone(),
                activation: layer.activation,
                prune: self.pruned.iter().position(|&p| p == l).map(|k| PruneSpec {
                    scores: self.scores[k].clone(),
                    layout: self.layouts[k].clone(),
                }),
            })
            .collect();
        Objective {
            input: self.calibration.clone(),
            target: self.trace.output.clone(),
            layers,
            cfg: self.cfg,
        }
    }

    pub fn identity_perms(&self) -> Vec<PermutationIndices> {
        self.layouts
            .iter()
            .map(|l| PermutationIndices::identity(l.c_in()))
            .collect()
    }

    pub fn heuristic_perms(&self) -> Result<Vec<PermutationIndices>> {
        self.scores
            .iter()
            .zip(&self.layouts)
            .map(|(s, l)| heuristic_cp(s, self.cfg, l))
            .collect()
    }
}

/// Result of optimizing one [`Objective`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// One permutation per pruned layer of the objective.
    pub perms: Vec<PermutationIndices>,
    pub loss: T,
    pub identity_loss: T,
    /// Step whose hardened permutation was kept; `None` means identity.
    pub best_step: Option<usize>,
    /// Hard loss after every optimizer step.
    pub history: Vec<f64>,
    pub diagnostic: Option<String>,
}

/// Hardened permutation of every pruned layer for the given logits.
fn harden_logits<T: Real>(
    obj: &Objective<T>,
    logits: &[Matrix<T>],
    tau: f64,
    iters: usize,
) -> Result<Vec<PermutationIndices>> {
    let mut blocks = logits.iter();
    obj.pruned()
        .map(|p| {
            let local = p
                .layout
                .blocks()
                .map(|_| {
                    let b = blocks.next().expect("one logit block per layout block");
                    solve_lsa(soft_permutation(b, tau, iters)?.entries()).map(|a| a.perm)
                })
                .collect::<Result<Vec<_>>>()?;
            p.layout.assemble(&local)
        })
        .collect()
}

/// Learns block permutations for every pruned layer of `obj`.
///
/// The identity permutation seeds the best-so-far solution; every hardened
/// candidate seen during training (and the final parameters) competes by
/// hard loss. A non-finite loss or failed step stops training and keeps the
/// last good solution.
pub fn train_objective<T: Real>(obj: &Objective<T>, tcfg: &TrainConfig, rng: &mut Rng) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    obj.validate()?;
    let schedule = tcfg.schedule()?;
    let mut params: Vec<Matrix<T>> = obj
        .pruned()
        .flat_map(|p| p.layout.blocks().map(|(_, len)| (len, len)).collect::<Vec<_>>())
        .map(|(r, c)| rng.gaussian_matrix(r, c, INIT_STD))
        .collect();
    let mut state = AdamWState::new(&params);
    let adam = tcfg.adamw();

    let identity = obj.identity_perms();
    let identity_loss = obj.evaluate(&identity)?.loss;
    let mut best = TrainOutcome {
        perms: identity,
        loss: identity_loss,
        identity_loss,
        best_step: None,
        history: Vec::with_capacity(tcfg.steps),
        diagnostic: None,
    };
    let consider = |best: &mut TrainOutcome<T>, perms: Vec<PermutationIndices>, step: usize| -> Result<Option<T>> {
        let loss = obj.evaluate(&perms)?.loss;
        if !loss.is_finite() {
            return Ok(None);
        }
        if loss < best.loss {
            best.loss = loss;
            best.perms = perms;
            best.best_step = Some(step);
        }
        Ok(Some(loss))
    };

    for step in 0..tcfg.steps {
        let tau = schedule.tau_at(step);
        let mut tape = obj.tape(tau, tcfg.sinkhorn_iters, tcfg.score_gradient, true)?;
        let input = if tcfg.gumbel_noise > 0.0 {
            params
                .iter()
                .map(|p| perturb_with_gumbel(p, rng, tcfg.gumbel_noise))
                .collect()
        } else {
            params.clone()
        };
        let out = match tape.run_forward(input) {
            Ok(out) => out,
            Err(e) => {
                best.diagnostic = Some(Error::Diverged { step, detail: e.to_string() }.to_string());
                break;
            }
        };
        let perms = obj.hardened(&tape)?;
        match consider(&mut best, perms, step)? {
            Some(loss) => best.history.push(loss.to_f64()),
            None => {
                best.diagnostic = Some(
                    Error::Diverged {
                        step,
                        detail: "non-finite hard loss".into(),
                    }
                    .to_string(),
                );
                break;
            }
        }
        if !out[0][(0, 0)].is_finite() {
            best.diagnostic = Some(
                Error::Diverged {
                    step,
                    detail: "non-finite training loss".into(),
                }
                .to_string(),
            );
            break;
        }
        let step_result = tape
            .run_backward(vec![Matrix::filled(1, 1, T::one())])
            .and_then(|b| adamw_step(&mut params, &b.input_adjoint, &mut state, &adam));
        if let Err(e) = step_result {
            best.diagnostic = Some(Error::Diverged { step, detail: e.to_string() }.to_string());
            break;
        }
    }
    if tcfg.steps > 0 && best.diagnostic.is_none() {
        let tau = schedule.tau_at(schedule.total_steps);
        match harden_logits(obj, &params, tau, tcfg.sinkhorn_iters) {
            Ok(perms) => {
                consider(&mut best, perms, tcfg.steps)?;
            }
            Err(e) => best.diagnostic = Some(e.to_string()),
        }
    }
    if let Some(d) = &best.diagnostic {
        log::warn!("{d}; keeping the best solution found so far");
    }
    Ok(best)
}

/// Learned permutation and mask of one layer, with its comparators.
#[derive(Clone, Debug)]
pub struct PermutationSolution<T> {
    pub layer: String,
    pub layout: BlockLayout,
    pub permutation: PermutationIndices,
    /// Hard mask in permuted column order.
    pub mask: SparsityMask<T>,
    /// Hard loss of the objective this layer was trained under.
    pub achieved_loss: f64,
    pub retained_score: f64,
    pub identity_loss: f64,
    pub identity_retained: f64,
    pub heuristic_loss: f64,
    pub heuristic_retained: f64,
    pub best_step: Option<usize>,
    pub diagnostic: Option<String>,
}

/// Trains permutations for the selected layers of `model`.
///
/// Layerwise mode optimizes every pruned layer independently (in parallel);
/// end-to-end mode optimizes all of them jointly against the model output.
pub fn train<T: Real>(
    model: &Model<T>,
    calibration: &Matrix<T>,
    tcfg: &TrainConfig,
    cfg: NmConfig,
) -> Result<Vec<PermutationSolution<T>>> {
    tcfg.validate()?;
    let problem = Problem::new(model, calibration, tcfg, cfg)?;
    train_problem(&problem, tcfg)
}

pub fn train_problem<T: Real>(problem: &Problem<T>, tcfg: &TrainConfig) -> Result<Vec<PermutationSolution<T>>> {
    let root = Rng::new(tcfg.seed);
    let heuristic = problem.heuristic_perms()?;
    // (objective, pruned-layer indices it covers, outcome)
    let units: Vec<(Objective<T>, Vec<usize>)> = match tcfg.mode {
        Mode::Layerwise => (0..problem.pruned.len())
            .map(|k| (problem.layer_objective(k), vec![k]))
            .collect(),
        Mode::Endtoend => vec![(problem.model_objective(), (0..problem.pruned.len()).collect())],
    };
    let outcomes = units
        .par_iter()
        .map(|(obj, ks)| {
            let mut rng = root.fork(ks[0] as u64);
            train_objective(obj, tcfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut solutions = Vec::with_capacity(problem.pruned.len());
    for ((obj, ks), outcome) in units.iter().zip(outcomes) {
        let learned = obj.evaluate(&outcome.perms)?;
        let ident = obj.evaluate(&obj.identity_perms())?;
        let heur_perms: Vec<_> = ks.iter().map(|&k| heuristic[k].clone()).collect();
        let heur = obj.evaluate(&heur_perms)?;
        for (i, &k) in ks.iter().enumerate() {
            solutions.push(PermutationSolution {
                layer: problem.layer_name(k).to_string(),
                layout: problem.layouts[k].clone(),
                permutation: outcome.perms[i].clone(),
                mask: learned.masks[i].clone(),
                achieved_loss: learned.loss.to_f64(),
                retained_score: learned.retained[i].to_f64(),
                identity_loss: ident.loss.to_f64(),
                identity_retained: ident.retained[i].to_f64(),
                heuristic_loss: heur.loss.to_f64(),
                heuristic_retained: heur.retained[i].to_f64(),
                best_step: outcome.best_step,
                diagnostic: outcome.diagnostic.clone(),
            });
        }
    }
    Ok(solutions)
}
