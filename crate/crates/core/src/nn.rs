//! Dense layers shared by the dynamics net and the classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => Ok(x),
        }
    }
}

/// Samples `rows * cols` weights from `uniform(-bound, bound)`.
pub(crate) fn uniform_tensor(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Affine map `x W + b` with `W: (in, out)` and `b: (1, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_width: usize,
    pub output_width: usize,
}

impl Linear {
    /// Weights from `uniform(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_width: usize,
        output_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_width == 0 || output_width == 0 {
            return Err(Error::contract(format!(
                "layer `{name}` needs positive widths, got {input_width} -> {output_width}"
            )));
        }
        let bound = 1.0 / (input_width as f64).sqrt();
        let weight = params.insert(
            format!("{name}.weight"),
            uniform_tensor(rng, input_width, output_width, bound),
        );
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[1, output_width]));
        Ok(Linear {
            weight,
            bias,
            input_width,
            output_width,
        })
    }

    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(vars[self.weight.0])?.add(vars[self.bias.0])
    }

    pub fn param_count(&self) -> usize {
        (self.input_width + 1) * self.output_width
    }
}
