use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Elementwise activation applied to a layer's output. Both commute with
/// channel permutations, which is what makes folding valid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, m: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Identity => m.clone(),
            Activation::Relu => m.map(|x| x.max(T::zero())),
        }
    }

    /// `g ⊙ act'(pre)`.
    pub fn pullback<T: Real>(self, adjoint: &Matrix<T>, pre: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Activation::Identity => Ok(adjoint.clone()),
            Activation::Relu => {
                adjoint.hadamard(&pre.map(|x| if x > T::zero() { T::one() } else { T::zero() }))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// A linear layer `y = act(x · Wᵀ)` with `W` of shape `C_out × C_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub weight: Matrix<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn new(name: impl Into<String>, weight: Matrix<T>, activation: Activation) -> Self {
        Layer {
            name: name.into(),
            weight,
            activation,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn c_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Chain of linear layers; layer 0 reads the model input and layer `l`
/// reads the output of layer `l − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
}

/// Per-layer dense activations from one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Input to each layer.
    pub inputs: Vec<Matrix<T>>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Matrix<T>>,
    pub output: Matrix<T>,
}

impl<T: Real> Model<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("Model::new"));
        }
        for w in layers.windows(2) {
            if w[1].c_in() != w[0].c_out() {
                return Err(Error::dim(
                    "Model::new",
                    format!(
                        "layer `{}` expects {} inputs but `{}` produces {}",
                        w[1].name,
                        w[1].c_in(),
                        w[0].name,
                        w[0].c_out()
                    ),
                ));
            }
        }
        let mut names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate layer name `{}`", w[0])));
        }
        Ok(Model { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].c_in()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::new(l.name.clone(), l.weight.cast(), l.activation))
                .collect(),
        }
    }

    pub fn trace(&self, x: &Matrix<T>) -> Result<Trace<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let p = h.matmul_nt(&layer.weight)?;
            let next = layer.activation.apply(&p);
            inputs.push(h);
            pre.push(p);
            h = next;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(
                "Model::forward",
                format!("input has {} features, model expects {}", x.cols(), self.input_dim()),
            ));
        }
        Ok(self.trace(x)?.output)
    }
}
