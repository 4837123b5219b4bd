//! Sequence classifiers: RNODE, Bi-RNODE and the discrete baselines.
//!
//! RNODE evolves its hidden state through the ODE over the gap preceding each
//! post, folds the post in with a recurrent cell, and classifies every
//! position with a small head network. Bi-RNODE runs a second, independently
//! parameterized RNODE over the reversed sequence on the reversed time axis
//! `t'_i = t_N - t_{N-i}` and aggregates both hidden states per post.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::cell::{CellKind, CellParams};
use crate::data::TimedSequence;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};
use crate::ode::{ode_solve, DynamicsNet, SolverConfig, TimeChannel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "rnode")]
    Rnode,
    #[serde(rename = "birnode")]
    BiRnode,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "gru")]
    Gru,
    #[serde(rename = "bilstm")]
    BiLstm,
    #[serde(rename = "bigru")]
    BiGru,
    #[serde(rename = "lstm-timegap")]
    LstmTimeGap,
    #[serde(rename = "majority")]
    Majority,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::Rnode,
        Arch::BiRnode,
        Arch::Lstm,
        Arch::Gru,
        Arch::BiLstm,
        Arch::BiGru,
        Arch::LstmTimeGap,
        Arch::Majority,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rnode => "rnode",
            Arch::BiRnode => "birnode",
            Arch::Lstm => "lstm",
            Arch::Gru => "gru",
            Arch::BiLstm => "bilstm",
            Arch::BiGru => "bigru",
            Arch::LstmTimeGap => "lstm-timegap",
            Arch::Majority => "majority",
        }
    }

    pub fn is_bidirectional(self) -> bool {
        matches!(self, Arch::BiRnode | Arch::BiLstm | Arch::BiGru)
    }

    pub fn is_ode(self) -> bool {
        matches!(self, Arch::Rnode | Arch::BiRnode)
    }

    /// Whether the model reads timestamps at all.
    pub fn uses_time(self) -> bool {
        matches!(self, Arch::Rnode | Arch::BiRnode | Arch::LstmTimeGap)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == key || (key == "lstmtimegap" && *a == Arch::LstmTimeGap))
            .ok_or_else(|| Error::validation("model.arch", format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Concat,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub input_width: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
    /// Hidden layer widths of the dynamics net; `None` means one layer of `hidden_width`.
    pub dynamics_layers: Option<Vec<usize>>,
    pub dynamics_activation: Activation,
    pub solver: SolverConfig,
    pub aggregation: Aggregation,
    pub time_channel: TimeChannel,
    /// Recurrent cell used inside RNODE blocks.
    pub cell: CellKind,
    /// Width of the head's hidden layer; `None` means `hidden_width`.
    pub head_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Rnode,
            input_width: 1,
            hidden_width: 64,
            num_classes: 2,
            dynamics_layers: None,
            dynamics_activation: Activation::Tanh,
            solver: SolverConfig::default(),
            aggregation: Aggregation::Concat,
            time_channel: TimeChannel::Absolute,
            cell: CellKind::Vanilla,
            head_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn new(arch: Arch, input_width: usize, hidden_width: usize, num_classes: usize) -> Self {
        ModelConfig {
            arch,
            input_width,
            hidden_width,
            num_classes,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(
                "model.num_classes",
                "at least two classes are required",
            ));
        }
        if self.input_width == 0 {
            return Err(Error::validation("model.input_width", "must be positive"));
        }
        if self.hidden_width == 0 {
            return Err(Error::validation("model.hidden_width", "must be positive"));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::validation("model.head_hidden", "must be positive"));
        }
        if let Some(layers) = &self.dynamics_layers {
            if layers.contains(&0) {
                return Err(Error::validation(
                    "model.dynamics_layers",
                    "widths must be positive",
                ));
            }
        }
        if self.arch.is_ode() && self.cell == CellKind::Lstm {
            return Err(Error::validation(
                "model.cell",
                "RNODE blocks support the vanilla and gru cells",
            ));
        }
        self.solver.validate()
    }

    fn dynamics_widths(&self) -> Vec<usize> {
        self.dynamics_layers
            .clone()
            .unwrap_or_else(|| vec![self.hidden_width])
    }

    fn head_input_width(&self) -> usize {
        if self.arch.is_bidirectional() && self.aggregation == Aggregation::Concat {
            2 * self.hidden_width
        } else {
            self.hidden_width
        }
    }
}

/// Per-position hidden states, aligned with the input posts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    pub forward: Vec<Vec<f64>>,
    /// Backward-direction states re-aligned so index `i` belongs to post `i`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backward: Option<Vec<Vec<f64>>>,
}

/// Classification head: `tanh` hidden layer followed by a linear map to logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    fn new(
        params: &mut ParamSet,
        input: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Head {
            hidden: Linear::new(params, "head.0", input, hidden, rng)?,
            out: Linear::new(params, "head.1", hidden, classes, rng)?,
        })
    }

    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(vars, x)?.tanh()?;
        self.out.forward(vars, h)
    }
}

/// One continuous-time recurrent block (dynamics net plus cell).
#[derive(Clone, Debug, PartialEq)]
pub struct OdeBlock {
    pub dynamics: DynamicsNet,
    pub cell: CellParams,
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Ode {
        fwd: OdeBlock,
        bwd: Option<OdeBlock>,
        head: Head,
    },
    Recurrent {
        fwd: CellParams,
        bwd: Option<CellParams>,
        head: Head,
        time_gap: bool,
    },
    Majority,
}

/// Dropout applied to the head input during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub struct Forward<'t> {
    /// Logits of shape `(posts, classes)`.
    pub logits: Var<'t>,
    pub trace: HiddenTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
    majority_class: usize,
}

impl Model {
    /// Builds a freshly initialized model; parameters depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let layout = match c.arch {
            Arch::Rnode | Arch::BiRnode => {
                let mut block = |params: &mut ParamSet, prefix: &str| -> Result<OdeBlock> {
                    Ok(OdeBlock {
                        dynamics: DynamicsNet::new(
                            params,
                            &format!("{prefix}.dynamics"),
                            c.hidden_width,
                            &c.dynamics_widths(),
                            c.dynamics_activation,
                            c.time_channel,
                            &mut rng,
                        )?,
                        cell: CellParams::new(
                            params,
                            &format!("{prefix}.cell"),
                            c.cell,
                            c.input_width,
                            c.hidden_width,
                            &mut rng,
                        )?,
                    })
                };
                let fwd = block(&mut params, "fwd")?;
                let bwd = if c.arch == Arch::BiRnode {
                    Some(block(&mut params, "bwd")?)
                } else {
                    None
                };
                let head = Head::new(
                    &mut params,
                    c.head_input_width(),
                    c.head_hidden.unwrap_or(c.hidden_width),
                    c.num_classes,
                    &mut rng,
                )?;
                Layout::Ode { fwd, bwd, head }
            }
            Arch::Lstm | Arch::Gru | Arch::BiLstm | Arch::BiGru | Arch::LstmTimeGap => {
                let kind = match c.arch {
                    Arch::Gru | Arch::BiGru => CellKind::Gru,
                    _ => CellKind::Lstm,
                };
                let time_gap = c.arch == Arch::LstmTimeGap;
                let input = c.input_width + usize::from(time_gap);
                let fwd = CellParams::new(
                    &mut params,
                    "fwd.cell",
                    kind,
                    input,
                    c.hidden_width,
                    &mut rng,
                )?;
                let bwd = if c.arch.is_bidirectional() {
                    Some(CellParams::new(
                        &mut params,
                        "bwd.cell",
                        kind,
                        input,
                        c.hidden_width,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                let head = Head::new(
                    &mut params,
                    c.head_input_width(),
                    c.head_hidden.unwrap_or(c.hidden_width),
                    c.num_classes,
                    &mut rng,
                )?;
                Layout::Recurrent {
                    fwd,
                    bwd,
                    head,
                    time_gap,
                }
            }
            Arch::Majority => Layout::Majority,
        };
        Ok(Model {
            config,
            params,
            layout,
            majority_class: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn majority_class(&self) -> usize {
        self.majority_class
    }

    pub fn set_majority_class(&mut self, class: usize) -> Result<()> {
        if class >= self.config.num_classes {
            return Err(Error::validation(
                "majority_class",
                format!("class {class} out of range"),
            ));
        }
        self.majority_class = class;
        Ok(())
    }

    /// Most frequent label (lowest index on ties).
    pub fn fit_majority(&mut self, train: &[TimedSequence]) -> Result<()> {
        let mut counts = vec![0usize; self.config.num_classes];
        for p in train.iter().flat_map(|s| s.posts.iter()) {
            *counts
                .get_mut(p.y)
                .ok_or_else(|| Error::validation("y", format!("label {} out of range", p.y)))? += 1;
        }
        let best = counts
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (c, &n)| if n > acc.1 { (c, n) } else { acc })
            .0;
        self.majority_class = best;
        Ok(())
    }

    pub fn ode_blocks(&self) -> Vec<&OdeBlock> {
        match &self.layout {
            Layout::Ode { fwd, bwd, .. } => std::iter::once(fwd).chain(bwd.as_ref()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn cells(&self) -> Vec<&CellParams> {
        match &self.layout {
            Layout::Ode { fwd, bwd, .. } => std::iter::once(&fwd.cell)
                .chain(bwd.as_ref().map(|b| &b.cell))
                .collect(),
            Layout::Recurrent { fwd, bwd, .. } => {
                std::iter::once(fwd).chain(bwd.as_ref()).collect()
            }
            Layout::Majority => Vec::new(),
        }
    }

    pub fn head(&self) -> Option<&Head> {
        match &self.layout {
            Layout::Ode { head, .. } | Layout::Recurrent { head, .. } => Some(head),
            Layout::Majority => None,
        }
    }

    /// Makes every dynamics net identically zero.
    pub fn zero_dynamics(&mut self) {
        let nets: Vec<DynamicsNet> = self
            .ode_blocks()
            .iter()
            .map(|b| b.dynamics.clone())
            .collect();
        for net in nets {
            net.zero(&mut self.params);
        }
    }

    /// Full forward pass over one sequence.
    ///
    /// `vars` must come from `self.params().bind(tape)`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        seq: &TimedSequence,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Forward<'t>> {
        seq.check_times()?;
        if seq.is_empty() {
            return Err(Error::contract(format!(
                "sequence `{}` has no posts",
                seq.event_id
            )));
        }
        if let Some(w) = seq.feature_width() {
            if w != self.config.input_width {
                return Err(Error::Dimension {
                    op: "forward",
                    lhs: vec![seq.len(), w],
                    rhs: vec![self.config.input_width],
                });
            }
        }
        let n = seq.len();
        let (states, trace, head) = match &self.layout {
            Layout::Majority => {
                let mut logits = Tensor::zeros(&[n, self.config.num_classes]);
                for i in 0..n {
                    logits.data_mut()[i * self.config.num_classes + self.majority_class] = 1.0;
                }
                return Ok(Forward {
                    logits: tape.constant(logits),
                    trace: HiddenTrace::default(),
                });
            }
            Layout::Ode { fwd, bwd, head } => {
                let xs = features(tape, seq, false);
                let times = seq.times();
                let hf = run_ode_block(fwd, vars, &xs, &times, &self.config.solver)?;
                let hb = match bwd {
                    Some(b) => {
                        let xr: Vec<Var<'t>> = xs.iter().rev().copied().collect();
                        let mut h = run_ode_block(
                            b,
                            vars,
                            &xr,
                            &reversed_times(&times),
                            &self.config.solver,
                        )?;
                        h.reverse();
                        Some(h)
                    }
                    None => None,
                };
                let (states, trace) = self.aggregate(hf, hb)?;
                (states, trace, head)
            }
            Layout::Recurrent {
                fwd,
                bwd,
                head,
                time_gap,
            } => {
                let xs = features(tape, seq, *time_gap);
                let hf = run_cell(fwd, vars, &xs)?;
                let hb = match bwd {
                    Some(b) => {
                        let xr: Vec<Var<'t>> = xs.iter().rev().copied().collect();
                        let mut h = run_cell(b, vars, &xr)?;
                        h.reverse();
                        Some(h)
                    }
                    None => None,
                };
                let (states, trace) = self.aggregate(hf, hb)?;
                (states, trace, head)
            }
        };
        let mut input = Var::concat(&states, 0)?;
        if let Some(Dropout { rate, rng }) = dropout {
            if rate > 0.0 {
                let keep = 1.0 - rate;
                let shape = input.shape();
                let mask: Vec<f64> = (0..input.numel())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                input = input.mul(tape.constant(Tensor::new(shape, mask)?))?;
            }
        }
        let logits = head.forward(vars, input)?;
        Ok(Forward { logits, trace })
    }

    fn aggregate<'t>(
        &self,
        hf: Vec<Var<'t>>,
        hb: Option<Vec<Var<'t>>>,
    ) -> Result<(Vec<Var<'t>>, HiddenTrace)> {
        let trace = HiddenTrace {
            forward: hf.iter().map(Var::data).collect(),
            backward: hb.as_ref().map(|b| b.iter().map(Var::data).collect()),
        };
        let states = match hb {
            None => hf,
            Some(hb) => hf
                .into_iter()
                .zip(hb)
                .map(|(f, b)| match self.config.aggregation {
                    Aggregation::Concat => Var::concat(&[f, b], 1),
                    Aggregation::Average => f.add(b)?.scale(0.5),
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok((states, trace))
    }

    /// Forward pass without gradients, returning per-position class probabilities.
    pub fn predict_proba(&self, seq: &TimedSequence) -> Result<(Vec<Vec<f64>>, HiddenTrace)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = self
            .params
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let out = self.forward(&tape, &vars, seq, None)?;
        let probs = out.logits.softmax()?.value();
        let c = self.config.num_classes;
        Ok((
            probs.data().chunks(c).map(<[f64]>::to_vec).collect(),
            out.trace,
        ))
    }
}

/// Feature rows `(1, width)`, optionally extended with the preceding gap.
fn features<'t>(tape: &'t Tape, seq: &TimedSequence, with_gap: bool) -> Vec<Var<'t>> {
    let gaps = seq.gaps();
    seq.posts
        .iter()
        .zip(gaps)
        .map(|(p, g)| {
            let mut row = p.x.clone();
            if with_gap {
                row.push(g);
            }
            tape.constant(Tensor::row(&row))
        })
        .collect()
}

/// Reversed time axis: with `t_0 = 0`, `t'_i = t_N - t_{N-i}` for `i = 1..=N`.
pub fn reversed_times(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let at = |k: usize| if k == 0 { 0.0 } else { times[k - 1] };
    (1..=n).map(|i| at(n) - at(n - i)).collect()
}

/// RNODE recursion from `h(0) = 0` at `t_0 = 0`; returns `h(t_i)` for each post.
pub fn run_ode_block<'t>(
    block: &OdeBlock,
    vars: &[Var<'t>],
    xs: &[Var<'t>],
    times: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<Var<'t>>> {
    let tape = match xs.first() {
        Some(x) => x.tape(),
        None => return Ok(Vec::new()),
    };
    let mut h = tape.constant(Tensor::zeros(&[1, block.cell.hidden_width]));
    let mut t_prev = 0.0;
    let mut out = Vec::with_capacity(xs.len());
    for (&x, &t) in xs.iter().zip(times) {
        let f = block.dynamics.bind(vars, t - t_prev);
        let evolved = ode_solve(&f, h, t_prev, t, solver)?;
        h = block.cell.step(vars, evolved, x, None)?.h;
        out.push(h);
        t_prev = t;
    }
    Ok(out)
}

/// Discrete unrolling that ignores timestamps.
pub fn run_cell<'t>(cell: &CellParams, vars: &[Var<'t>], xs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let tape = match xs.first() {
        Some(x) => x.tape(),
        None => return Ok(Vec::new()),
    };
    let (mut h, mut c) = cell.zero_state(tape, 1);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let step = cell.step(vars, h, x, c)?;
        h = step.h;
        c = step.c;
        out.push(h);
    }
    Ok(out)
}
