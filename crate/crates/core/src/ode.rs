//! Differentiable integration of `dh/dt = f(h, t)` between observation times.
//!
//! Every stage evaluation is recorded on the caller's tape, so gradients of
//! anything computed from the solution reach both the initial state and the
//! parameters of `f` (discretize-then-optimize).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    #[default]
    Euler,
    Rk4,
    Dopri5,
}

/// What the dynamics net sees as its time input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeChannel {
    /// Absolute normalized time of the stage being evaluated.
    #[default]
    Absolute,
    /// Length of the interval being integrated.
    Gap,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps_per_unit_time: usize,
    pub min_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_adaptive_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Euler,
            steps_per_unit_time: 20,
            min_steps: 1,
            rtol: 1e-3,
            atol: 1e-4,
            max_adaptive_steps: 1000,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: SolverMethod, steps_per_unit_time: usize) -> Self {
        SolverConfig {
            method,
            steps_per_unit_time,
            ..SolverConfig::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: SolverMethod::Dopri5,
            rtol,
            atol,
            ..SolverConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(
                    format!("solver.{name}"),
                    format!("must be positive, got {v}"),
                ))
            }
        };
        positive("rtol", self.rtol)?;
        positive("atol", self.atol)?;
        positive("steps_per_unit_time", self.steps_per_unit_time as f64)?;
        positive("min_steps", self.min_steps as f64)?;
        positive("max_adaptive_steps", self.max_adaptive_steps as f64)
    }

    /// Fixed-step count for an interval of length `gap`; zero for an empty interval.
    pub fn fixed_step_count(&self, gap: f64) -> usize {
        if gap <= 0.0 {
            return 0;
        }
        let raw = (gap * self.steps_per_unit_time as f64).ceil() as usize;
        raw.max(self.min_steps)
    }
}

/// Right-hand side of the ODE.
pub trait Dynamics<'t> {
    fn eval(&self, h: Var<'t>, t: f64) -> Result<Var<'t>>;
}

impl<'t, F> Dynamics<'t> for F
where
    F: Fn(Var<'t>, f64) -> Result<Var<'t>>,
{
    fn eval(&self, h: Var<'t>, t: f64) -> Result<Var<'t>> {
        self(h, t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
}

pub fn ode_solve<'t>(
    f: &impl Dynamics<'t>,
    h0: Var<'t>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Var<'t>> {
    ode_solve_with_stats(f, h0, t0, t1, cfg).map(|(h, _)| h)
}

/// [`ode_solve`] that also reports how many steps were taken.
pub fn ode_solve_with_stats<'t>(
    f: &impl Dynamics<'t>,
    h0: Var<'t>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Var<'t>, SolveStats)> {
    if !(t1 >= t0) {
        return Err(Error::TimeOrder { t0, t1 });
    }
    if t1 == t0 {
        return Ok((h0, SolveStats::default()));
    }
    match cfg.method {
        SolverMethod::Euler | SolverMethod::Rk4 => {
            let n = cfg.fixed_step_count(t1 - t0);
            let dt = (t1 - t0) / n as f64;
            let mut h = h0;
            for i in 0..n {
                let t = t0 + i as f64 * dt;
                h = match cfg.method {
                    SolverMethod::Euler => euler_step(f, h, t, dt)?,
                    _ => rk4_step(f, h, t, dt)?,
                };
            }
            Ok((
                h,
                SolveStats {
                    accepted: n,
                    rejected: 0,
                },
            ))
        }
        SolverMethod::Dopri5 => dopri5_solve(f, h0, t0, t1, cfg),
    }
}

fn check_finite(v: Var<'_>, what: &str, t: f64) -> Result<()> {
    if v.with_value(|x| x.data().iter().all(|d| d.is_finite())) {
        Ok(())
    } else {
        Err(Error::NumericalBlowup(format!(
            "non-finite {what} at t = {t}"
        )))
    }
}

/// `h + dt * sum(coef * k)`, skipping zero coefficients.
fn combine<'t>(h: Var<'t>, dt: f64, terms: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let mut acc = h;
    for &(c, k) in terms {
        if c != 0.0 {
            acc = acc.add(k.scale(c * dt)?)?;
        }
    }
    Ok(acc)
}

pub fn euler_step<'t>(f: &impl Dynamics<'t>, h: Var<'t>, t: f64, dt: f64) -> Result<Var<'t>> {
    let k = f.eval(h, t)?;
    h.add(k.scale(dt)?)
}

pub fn rk4_step<'t>(f: &impl Dynamics<'t>, h: Var<'t>, t: f64, dt: f64) -> Result<Var<'t>> {
    let k1 = f.eval(h, t)?;
    let k2 = f.eval(combine(h, dt, &[(0.5, k1)])?, t + 0.5 * dt)?;
    let k3 = f.eval(combine(h, dt, &[(0.5, k2)])?, t + 0.5 * dt)?;
    let k4 = f.eval(combine(h, dt, &[(1.0, k3)])?, t + dt)?;
    combine(
        h,
        dt,
        &[
            (1.0 / 6.0, k1),
            (1.0 / 3.0, k2),
            (1.0 / 3.0, k3),
            (1.0 / 6.0, k4),
        ],
    )
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

#[derive(Clone, Copy, Debug)]
pub struct Dopri5Step<'t> {
    /// Fifth-order solution when accepted, the input state otherwise.
    pub h_next: Var<'t>,
    pub dt_next: f64,
    pub accepted: bool,
    /// Scaled error norm; the step is accepted iff it is at most one.
    pub error_ratio: f64,
}

pub fn dopri5_step<'t>(
    f: &impl Dynamics<'t>,
    h: Var<'t>,
    t: f64,
    dt: f64,
    rtol: f64,
    atol: f64,
) -> Result<Dopri5Step<'t>> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!(
            "dopri5 step size must be positive, got {dt}"
        )));
    }
    let mut ks: Vec<Var<'t>> = Vec::with_capacity(7);
    ks.push(f.eval(h, t)?);
    check_finite(ks[0], "stage 1", t)?;
    for (stage, row) in DP_A.iter().enumerate() {
        let terms: Vec<(f64, Var<'t>)> = row.iter().copied().zip(ks.iter().copied()).collect();
        let y = combine(h, dt, &terms)?;
        let ts = t + DP_C[stage + 1] * dt;
        let k = f.eval(y, ts)?;
        check_finite(k, &format!("stage {}", stage + 2), ts)?;
        ks.push(k);
    }
    // The last row of DP_A is the fifth-order solution (first-same-as-last).
    let terms: Vec<(f64, Var<'t>)> = DP_B5.iter().copied().zip(ks.iter().copied()).collect();
    let h5 = combine(h, dt, &terms)?;

    let k_values: Vec<Tensor> = ks.iter().map(Var::value).collect();
    let h_value = h.value();
    let mut error_ratio: f64 = 0.0;
    for (i, &hi) in h_value.data().iter().enumerate() {
        let diff: f64 = (0..7)
            .map(|j| (DP_B5[j] - DP_B4[j]) * k_values[j].data()[i])
            .sum::<f64>()
            * dt;
        let scale = atol + rtol * hi.abs();
        error_ratio = error_ratio.max(diff.abs() / scale);
    }
    if !error_ratio.is_finite() {
        return Err(Error::NumericalBlowup(format!(
            "non-finite error estimate at t = {t}"
        )));
    }
    let accepted = error_ratio <= 1.0;
    let factor = if error_ratio == 0.0 {
        MAX_FACTOR
    } else {
        (SAFETY * error_ratio.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
    };
    Ok(Dopri5Step {
        h_next: if accepted { h5 } else { h },
        dt_next: dt * factor,
        accepted,
        error_ratio,
    })
}

fn dopri5_solve<'t>(
    f: &impl Dynamics<'t>,
    h0: Var<'t>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Var<'t>, SolveStats)> {
    let mut stats = SolveStats::default();
    let mut h = h0;
    let mut t = t0;
    let mut dt = t1 - t0;
    let tiny = 1e-14 * t1.abs().max(1.0);
    while t < t1 {
        if stats.accepted + stats.rejected >= cfg.max_adaptive_steps || dt < tiny {
            return Err(Error::NonConvergence {
                t0,
                t1,
                steps: stats.accepted + stats.rejected,
            });
        }
        let last = t + dt >= t1 - tiny;
        let step_dt = if last { t1 - t } else { dt };
        let step = dopri5_step(f, h, t, step_dt, cfg.rtol, cfg.atol)?;
        if step.accepted {
            stats.accepted += 1;
            h = step.h_next;
            t = if last { t1 } else { t + step_dt };
        } else {
            stats.rejected += 1;
        }
        dt = step.dt_next;
    }
    Ok((h, stats))
}

/// Feed-forward network `f(h, t)` driving the hidden state between posts.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsNet {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub hidden_width: usize,
    pub time_channel: TimeChannel,
}

impl DynamicsNet {
    /// Builds `hidden (+1) -> widths... -> hidden` with `activation` between layers.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        hidden_width: usize,
        layer_widths: &[usize],
        activation: Activation,
        time_channel: TimeChannel,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input_width = hidden_width + usize::from(time_channel != TimeChannel::None);
        let mut widths = vec![input_width];
        widths.extend_from_slice(layer_widths);
        widths.push(hidden_width);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicsNet {
            layers,
            activation,
            hidden_width,
            time_channel,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    /// Zeroes every weight and bias so that `f` is identically zero.
    pub fn zero(&self, params: &mut ParamSet) {
        for layer in &self.layers {
            for id in [layer.weight, layer.bias] {
                params
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
    }

    /// Binds the net to parameter vars for integrating an interval of length `gap`.
    pub fn bind<'a, 't>(&'a self, vars: &'a [Var<'t>], gap: f64) -> BoundDynamics<'a, 't> {
        BoundDynamics {
            net: self,
            vars,
            gap,
        }
    }
}

pub struct BoundDynamics<'a, 't> {
    net: &'a DynamicsNet,
    vars: &'a [Var<'t>],
    gap: f64,
}

impl<'t> Dynamics<'t> for BoundDynamics<'_, 't> {
    fn eval(&self, h: Var<'t>, t: f64) -> Result<Var<'t>> {
        let tape = h.tape();
        let rows = h.with_value(Tensor::rows);
        let channel = match self.net.time_channel {
            TimeChannel::Absolute => Some(t),
            TimeChannel::Gap => Some(self.gap),
            TimeChannel::None => None,
        };
        let mut z = match channel {
            Some(v) => Var::concat(&[h, tape.constant(Tensor::filled(&[rows, 1], v))], 1)?,
            None => h,
        };
        let last = self.net.layers.len() - 1;
        for (i, layer) in self.net.layers.iter().enumerate() {
            z = layer.forward(self.vars, z)?;
            if i < last {
                z = self.net.activation.apply(z)?;
            }
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use approx::assert_abs_diff_eq;

    fn decay<'t>(h: Var<'t>, _t: f64) -> Result<Var<'t>> {
        h.scale(-1.0)
    }

    fn zero<'t>(h: Var<'t>, _t: f64) -> Result<Var<'t>> {
        h.scale(0.0)
    }

    fn fast<'t>(h: Var<'t>, _t: f64) -> Result<Var<'t>> {
        h.scale(-50.0)
    }

    fn bad<'t>(h: Var<'t>, _t: f64) -> Result<Var<'t>> {
        h.log()?.scale(0.0)?.log()
    }

    fn solve_scalar(
        f: impl for<'t> Fn(Var<'t>, f64) -> Result<Var<'t>>,
        h0: f64,
        t1: f64,
        cfg: &SolverConfig,
    ) -> f64 {
        let tape = Tape::new();
        let h = tape.constant(Tensor::row(&[h0]));
        ode_solve(&f, h, 0.0, t1, cfg).unwrap().item().unwrap()
    }

    #[test]
    fn euler_matches_closed_form_recurrence() {
        let cfg = SolverConfig::fixed(SolverMethod::Euler, 10);
        let v = solve_scalar(decay, 1.0, 1.0, &cfg);
        assert_abs_diff_eq!(v, 0.9f64.powi(10), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.34868, epsilon = 1e-5);
    }

    #[test]
    fn empty_interval_returns_input_var() {
        let tape = Tape::new();
        let h = tape.variable(Tensor::row(&[0.3, -0.2]));
        for method in [SolverMethod::Euler, SolverMethod::Rk4, SolverMethod::Dopri5] {
            let cfg = SolverConfig {
                method,
                ..SolverConfig::default()
            };
            let (out, stats) = ode_solve_with_stats(&decay, h, 0.4, 0.4, &cfg).unwrap();
            assert_eq!(out.data(), h.data());
            assert_eq!(stats, SolveStats::default());
        }
    }

    #[test]
    fn rk4_growth_close_to_e() {
        let cfg = SolverConfig::fixed(SolverMethod::Rk4, 10);
        let v = solve_scalar(|h, _| Ok(h), 1.0, 1.0, &cfg);
        assert!((v - std::f64::consts::E).abs() < 1e-5);
    }

    #[test]
    fn reversed_interval_is_a_time_order_error() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::row(&[1.0]));
        let err = ode_solve(&decay, h, 0.5, 0.2, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TimeOrder { .. }));
    }

    #[test]
    fn step_count_follows_ceiling_rule() {
        let cfg = SolverConfig {
            steps_per_unit_time: 20,
            min_steps: 2,
            ..SolverConfig::default()
        };
        assert_eq!(cfg.fixed_step_count(0.0), 0);
        assert_eq!(cfg.fixed_step_count(0.01), 2);
        assert_eq!(cfg.fixed_step_count(0.26), 6);
        assert_eq!(cfg.fixed_step_count(1.0), 20);
    }

    #[test]
    fn dopri5_zero_dynamics_accepts_unchanged() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::row(&[0.7, -1.3]));
        let step = dopri5_step(&zero, h, 0.0, 0.5, 1e-9, 1e-12).unwrap();
        assert!(step.accepted);
        assert_eq!(step.h_next.data(), vec![0.7, -1.3]);
        assert_eq!(step.dt_next, 0.5 * MAX_FACTOR);
    }

    #[test]
    fn dopri5_rejects_loose_step_on_fast_decay() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::row(&[1.0]));
        let step = dopri5_step(&fast, h, 0.0, 0.5, 1e-3, 1e-4).unwrap();
        assert!(!step.accepted);
        assert!(step.error_ratio > 1.0);
        assert!(step.dt_next < 0.5);
        assert_eq!(step.h_next.data(), vec![1.0]);
    }

    #[test]
    fn dopri5_decay_reaches_reference() {
        let cfg = SolverConfig::dopri5(1e-6, 1e-8);
        let v = solve_scalar(decay, 1.0, 1.0, &cfg);
        assert!((v - (-1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn dopri5_reports_non_convergence() {
        let cfg = SolverConfig {
            max_adaptive_steps: 3,
            ..SolverConfig::dopri5(1e-12, 1e-12)
        };
        let tape = Tape::new();
        let h = tape.constant(Tensor::row(&[1.0]));
        let err = ode_solve(&decay, h, 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { steps: 3, .. }));
    }

    #[test]
    fn dopri5_flags_blowup() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::row(&[1.0]));
        let err = dopri5_step(&bad, h, 0.0, 0.1, 1e-3, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NumericalBlowup(_)));
    }

    #[test]
    fn invalid_tolerances_rejected() {
        let cfg = SolverConfig {
            rtol: 0.0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }

    #[test]
    fn dynamics_net_widths_and_count() {
        let mut params = ParamSet::new();
        let mut rng = rand::rng();
        let net = DynamicsNet::new(
            &mut params,
            "f",
            8,
            &[16],
            Activation::Tanh,
            TimeChannel::Absolute,
            &mut rng,
        )
        .unwrap();
        assert_eq!(net.param_count(), (9 + 1) * 16 + (16 + 1) * 8);
        assert_eq!(net.param_count(), params.numel());
        let none = DynamicsNet::new(
            &mut ParamSet::new(),
            "f",
            8,
            &[16],
            Activation::Tanh,
            TimeChannel::None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(none.param_count(), (8 + 1) * 16 + (16 + 1) * 8);
    }
}
