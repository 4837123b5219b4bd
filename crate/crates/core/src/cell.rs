//! Single-step recurrent updates: vanilla tanh, GRU and LSTM.
//!
//! All kinds keep their weights as three tensors: `w_x: (in, g*hid)`,
//! `w_h: (hid, g*hid)` and `bias: (1, g*hid)` where `g` is the gate count.
//! Gate blocks are laid out column-wise in the order listed on [`CellKind`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::uniform_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// `h = tanh(x W_x + h W_h + b)`.
    #[default]
    Vanilla,
    /// Gates `[update, reset, candidate]`.
    Gru,
    /// Gates `[input, forget, cell, output]`.
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// Trainable scalars of one cell.
pub fn param_count(kind: CellKind, input_width: usize, hidden_width: usize) -> Result<usize> {
    if input_width == 0 || hidden_width == 0 {
        return Err(Error::contract(format!(
            "{kind:?} cell needs positive widths, got input {input_width}, hidden {hidden_width}"
        )));
    }
    Ok(kind.gates() * (input_width + hidden_width + 1) * hidden_width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub input_width: usize,
    pub hidden_width: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CellOutput<'t> {
    pub h: Var<'t>,
    /// LSTM cell state.
    pub c: Option<Var<'t>>,
}

impl CellParams {
    /// Weights from `uniform(-k, k)` with `k = 1/sqrt(hidden)`; zero biases
    /// except the LSTM forget gate, which starts at one.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        kind: CellKind,
        input_width: usize,
        hidden_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        param_count(kind, input_width, hidden_width)?;
        let g = kind.gates() * hidden_width;
        let k = 1.0 / (hidden_width as f64).sqrt();
        let w_x = params.insert(
            format!("{name}.w_x"),
            uniform_tensor(rng, input_width, g, k),
        );
        let w_h = params.insert(
            format!("{name}.w_h"),
            uniform_tensor(rng, hidden_width, g, k),
        );
        let mut b = Tensor::zeros(&[1, g]);
        if kind == CellKind::Lstm {
            b.data_mut()[hidden_width..2 * hidden_width]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
        let bias = params.insert(format!("{name}.bias"), b);
        Ok(CellParams {
            kind,
            input_width,
            hidden_width,
            w_x,
            w_h,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kind.gates() * (self.input_width + self.hidden_width + 1) * self.hidden_width
    }

    fn check_width(&self, v: Var<'_>, width: usize) -> Result<()> {
        let shape = v.shape();
        if shape.len() == 2 && shape[1] == width {
            Ok(())
        } else {
            Err(Error::Dimension {
                op: "cell_step",
                lhs: shape,
                rhs: vec![width],
            })
        }
    }

    /// One recurrent update from `h_prev` with input `x`.
    pub fn step<'t>(
        &self,
        vars: &[Var<'t>],
        h_prev: Var<'t>,
        x: Var<'t>,
        c_prev: Option<Var<'t>>,
    ) -> Result<CellOutput<'t>> {
        self.check_width(x, self.input_width)?;
        self.check_width(h_prev, self.hidden_width)?;
        let hid = self.hidden_width;
        let (w_x, w_h, bias) = (vars[self.w_x.0], vars[self.w_h.0], vars[self.bias.0]);
        let xw = x.matmul(w_x)?.add(bias)?;
        match self.kind {
            CellKind::Vanilla => {
                if c_prev.is_some() {
                    return Err(Error::contract("vanilla cell takes no cell state"));
                }
                let h = xw.add(h_prev.matmul(w_h)?)?.tanh()?;
                Ok(CellOutput { h, c: None })
            }
            CellKind::Gru => {
                if c_prev.is_some() {
                    return Err(Error::contract("GRU cell takes no cell state"));
                }
                let hw = h_prev.matmul(w_h.cols(0, 2 * hid)?)?;
                let gates = xw.cols(0, 2 * hid)?.add(hw)?.sigmoid()?;
                let z = gates.cols(0, hid)?;
                let r = gates.cols(hid, 2 * hid)?;
                let n = xw
                    .cols(2 * hid, 3 * hid)?
                    .add(r.mul(h_prev)?.matmul(w_h.cols(2 * hid, 3 * hid)?)?)?
                    .tanh()?;
                // h = h_prev + z * (n - h_prev)
                let h = h_prev.add(z.mul(n.sub(h_prev)?)?)?;
                Ok(CellOutput { h, c: None })
            }
            CellKind::Lstm => {
                let c_prev = c_prev.ok_or_else(|| Error::contract("LSTM cell requires c_prev"))?;
                self.check_width(c_prev, hid)?;
                let pre = xw.add(h_prev.matmul(w_h)?)?;
                let i = pre.cols(0, hid)?.sigmoid()?;
                let f = pre.cols(hid, 2 * hid)?.sigmoid()?;
                let g = pre.cols(2 * hid, 3 * hid)?.tanh()?;
                let o = pre.cols(3 * hid, 4 * hid)?.sigmoid()?;
                let c = f.mul(c_prev)?.add(i.mul(g)?)?;
                let h = o.mul(c.tanh()?)?;
                Ok(CellOutput { h, c: Some(c) })
            }
        }
    }

    pub fn zero_state<'t>(
        &self,
        tape: &'t crate::autodiff::Tape,
        rows: usize,
    ) -> (Var<'t>, Option<Var<'t>>) {
        let h = tape.constant(Tensor::zeros(&[rows, self.hidden_width]));
        let c = (self.kind == CellKind::Lstm)
            .then(|| tape.constant(Tensor::zeros(&[rows, self.hidden_width])));
        (h, c)
    }
}
