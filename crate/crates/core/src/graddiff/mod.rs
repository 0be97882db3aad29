//! Fixed-pipeline reverse-mode differentiation.
//!
//! A [`Tape`] is an ordered list of [`Stage`]s. Every value flowing between
//! stages is a list of matrices (one per permutation block, plus whatever a
//! stage appends). Each stage caches what its pullback needs during
//! `forward`; `run_backward` walks the stages in reverse.
//!
//! Stages are either exact (analytic Jacobian) or straight-through: the
//! latter do something non-differentiable in `forward` and hand the
//! adjoint back unchanged.

mod permllm;
mod stages;

use std::any::Any;

pub use permllm::{ChainForward, ChainLayerSpec, CosineLoss, PrunedSlot, ScorePermute};
pub use stages::{ColNorm, Dot, Exp, GroupSoftmax, Harden, Linear, MaskSte, RowNorm, RowSoftmax, Scale};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Differentiation {
    Exact,
    StraightThrough,
}

/// Adjoints a stage returns from its pullback.
#[derive(Clone, Debug, Default)]
pub struct StageAdjoint<T> {
    pub input: Vec<Matrix<T>>,
    /// Adjoints of parameters the stage owns, if any.
    pub params: Vec<Matrix<T>>,
}

impl<T> StageAdjoint<T> {
    pub fn input_only(input: Vec<Matrix<T>>) -> Self {
        StageAdjoint {
            input,
            params: Vec::new(),
        }
    }
}

pub trait Stage<T: Real>: Send {
    fn name(&self) -> &str;

    fn differentiation(&self) -> Differentiation {
        Differentiation::Exact
    }

    /// Describes why `shapes` cannot feed this stage.
    fn check_input(&self, _shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        Ok(())
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>>;

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>>;

    fn as_any(&self) -> &dyn Any;
}

#[derive(Clone, Debug)]
pub struct Backward<T> {
    pub input_adjoint: Vec<Matrix<T>>,
    /// `(stage name, parameter adjoints)` for stages that own parameters.
    pub param_adjoints: Vec<(String, Vec<Matrix<T>>)>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    stages: Vec<Box<dyn Stage<T>>>,
    input_shapes: Vec<Vec<(usize, usize)>>,
    output_shapes: Option<Vec<(usize, usize)>>,
}

fn shapes<T: Real>(v: &[Matrix<T>]) -> Vec<(usize, usize)> {
    v.iter().map(Matrix::shape).collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            stages: Vec::new(),
            input_shapes: Vec::new(),
            output_shapes: None,
        }
    }

    pub fn push(&mut self, stage: impl Stage<T> + 'static) -> &mut Self {
        self.stages.push(Box::new(stage));
        self.output_shapes = None;
        self
    }

    pub fn with(mut self, stage: impl Stage<T> + 'static) -> Self {
        self.push(stage);
        self
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name()).collect()
    }

    pub fn is_fully_exact(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.differentiation() == Differentiation::Exact)
    }

    /// First stage of concrete type `S`.
    pub fn find<S: 'static>(&self) -> Option<&S> {
        self.stages.iter().find_map(|s| s.as_any().downcast_ref::<S>())
    }

    pub fn run_forward(&mut self, input: Vec<Matrix<T>>) -> Result<Vec<Matrix<T>>> {
        self.output_shapes = None;
        self.input_shapes.clear();
        let mut value = input;
        let mut prev = "input".to_string();
        for stage in self.stages.iter_mut() {
            let in_shapes = shapes(&value);
            if let Err(detail) = stage.check_input(&in_shapes) {
                return Err(Error::StageMismatch {
                    from: prev,
                    to: stage.name().to_string(),
                    detail,
                });
            }
            value = stage.forward(&value)?;
            self.input_shapes.push(in_shapes);
            prev = stage.name().to_string();
        }
        self.output_shapes = Some(shapes(&value));
        Ok(value)
    }

    pub fn run_backward(&mut self, output_adjoint: Vec<Matrix<T>>) -> Result<Backward<T>> {
        let out_shapes = self.output_shapes.as_ref().ok_or(Error::BackwardBeforeForward)?;
        if &shapes(&output_adjoint) != out_shapes {
            return Err(Error::dim(
                "run_backward",
                format!("adjoint shapes {:?} vs output {:?}", shapes(&output_adjoint), out_shapes),
            ));
        }
        let mut adjoint = output_adjoint;
        let mut param_adjoints = Vec::new();
        for (stage, in_shapes) in self.stages.iter_mut().zip(&self.input_shapes).rev() {
            let StageAdjoint { input, params } = stage.pullback(&adjoint)?;
            if &shapes(&input) != in_shapes {
                return Err(Error::dim(
                    "run_backward",
                    format!(
                        "stage `{}` returned adjoint shapes {:?} for input {:?}",
                        stage.name(),
                        shapes(&input),
                        in_shapes
                    ),
                ));
            }
            if !params.is_empty() {
                param_adjoints.push((stage.name().to_string(), params));
            }
            adjoint = input;
        }
        param_adjoints.reverse();
        Ok(Backward {
            input_adjoint: adjoint,
            param_adjoints,
        })
    }
}

/// Outcome of a finite-difference probe.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over coordinates of `|analytic − numeric| / (|numeric| + 1e-12)`.
    pub max_rel_error: f64,
    pub worst_coordinate: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn scalar_output<T: Real>(out: &[Matrix<T>]) -> Result<T> {
    match out {
        [m] if m.shape() == (1, 1) => Ok(m[(0, 0)]),
        _ => Err(Error::dim(
            "finite_diff_check",
            format!("pipeline must produce one 1x1 value, got {:?}", shapes(out)),
        )),
    }
}

/// Compares the tape's analytic gradient with central differences at
/// `point`. The tape must be fully exact (straight-through stages are
/// replaced by their soft counterparts before checking).
pub fn finite_diff_check<T: Real>(
    tape: &mut Tape<T>,
    point: &[Matrix<T>],
    epsilon: f64,
) -> Result<GradCheck> {
    if !tape.is_fully_exact() {
        return Err(Error::Config(
            "finite differences need the fully soft pipeline; found a straight-through stage".into(),
        ));
    }
    let out = tape.run_forward(point.to_vec())?;
    scalar_output(&out)?;
    let grads = tape
        .run_backward(vec![Matrix::filled(1, 1, T::one())])?
        .input_adjoint;

    let eps = T::of(epsilon);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_coordinate: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (item, grad) in grads.iter().enumerate() {
        for idx in 0..grad.as_slice().len() {
            let probe = |delta: T, tape: &mut Tape<T>| -> Result<f64> {
                let mut p = point.to_vec();
                p[item].as_mut_slice()[idx] = p[item].as_slice()[idx] + delta;
                let v = scalar_output(&tape.run_forward(p)?)?.to_f64();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("probe of item {item}, index {idx}")));
                }
                Ok(v)
            };
            let numeric = (probe(eps, tape)? - probe(-eps, tape)?) / (2.0 * epsilon);
            let analytic = grad.as_slice()[idx].to_f64();
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of item {item}, index {idx}")));
            }
            report.coordinates += 1;
            if report.coordinates == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coordinate = (item, idx);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn scalar(x: f64) -> Vec<Matrix<f64>> {
        vec![Matrix::from_f64(1, 1, &[x]).unwrap()]
    }

    #[test]
    fn empty_tape_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = vec![Matrix::from_f64(2, 2, &[1., 2., 3., 4.]).unwrap()];
        assert_eq!(tape.run_forward(x.clone()).unwrap(), x);
        let g = tape.run_backward(x.clone()).unwrap();
        assert_eq!(g.input_adjoint, x);
    }

    #[test]
    fn linear_stage_is_matmul() {
        let a = Matrix::<f64>::from_f64(2, 2, &[1., 2., 3., 4.]).unwrap();
        let x = Matrix::from_f64(2, 1, &[5., 6.]).unwrap();
        let mut tape = Tape::new().with(Linear::new("A", a.clone()));
        let y = tape.run_forward(vec![x.clone()]).unwrap();
        assert_eq!(y[0], a.matmul(&x).unwrap());
        let g = tape.run_backward(vec![Matrix::filled(2, 1, 1.0)]).unwrap();
        assert_eq!(g.input_adjoint[0].as_slice(), &[4., 6.]);
        assert_eq!(g.param_adjoints[0].0, "A");
        assert_eq!(g.param_adjoints[0].1[0].as_slice(), &[5., 6., 5., 6.]);
    }

    #[test]
    fn scale_exp_chain() {
        let mut tape = Tape::new().with(Scale::new(2.0)).with(Exp::unshifted());
        assert_eq!(tape.run_forward(scalar(0.0)).unwrap(), scalar(1.0));
        let g = tape.run_backward(scalar(1.0)).unwrap();
        assert_eq!(g.input_adjoint, scalar(2.0));
    }

    #[test]
    fn scaling_scales_adjoint() {
        let mut tape = Tape::new().with(Scale::new(-3.5));
        tape.run_forward(scalar(1.0)).unwrap();
        assert_eq!(tape.run_backward(scalar(2.0)).unwrap().input_adjoint, scalar(-7.0));
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut tape = Tape::<f64>::new().with(Scale::new(1.0));
        assert!(matches!(tape.run_backward(scalar(1.0)), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn mismatch_names_both_stages() {
        let a = Matrix::<f64>::identity(3);
        let mut tape = Tape::new()
            .with(Scale::new(1.0))
            .with(Linear::new("proj", a));
        let err = tape
            .run_forward(vec![Matrix::zeros(2, 1)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("scale") && err.contains("proj"), "{err}");
    }

    #[test]
    fn straight_through_is_identity_on_adjoints() {
        let mut rng = Rng::new(4);
        let p = rng.uniform_matrix::<f64>(5, 5);
        let mut tape = Tape::new().with(Harden::new());
        tape.run_forward(vec![p]).unwrap();
        let adj = vec![rng.gaussian_matrix::<f64>(5, 5, 1.0)];
        let back = tape.run_backward(adj.clone()).unwrap();
        assert_eq!(back.input_adjoint, adj);
    }

    #[test]
    fn finite_difference_linear() {
        let mut tape = Tape::new().with(Scale::new(3.0));
        let r = finite_diff_check(&mut tape, &scalar(0.7), 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn finite_difference_softmax_dot() {
        let mut rng = Rng::new(12);
        for _ in 0..100 {
            let x = rng.gaussian_matrix::<f64>(1, 6, 1.0);
            let w = rng.gaussian_matrix::<f64>(1, 6, 1.0);
            let mut tape = Tape::new().with(RowSoftmax::new()).with(Dot::new(w));
            let r = finite_diff_check(&mut tape, &[x], 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn finite_difference_refuses_ste() {
        let mut tape = Tape::<f64>::new().with(Harden::new());
        assert!(finite_diff_check(&mut tape, &[Matrix::identity(2)], 1e-5).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_matrix::<f64>(4, 4, 1.0);
        let build = || {
            Tape::new()
                .with(Scale::new(2.0))
                .with(Exp::shifted())
                .with(RowNorm::new())
                .with(ColNorm::new())
        };
        let a = build().run_forward(vec![x.clone()]).unwrap();
        let b = build().run_forward(vec![x]).unwrap();
        assert_eq!(a, b);
    }
}
