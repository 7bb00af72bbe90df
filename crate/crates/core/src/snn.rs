//! Leaky integrate-and-fire neurons with a surrogate spike gradient.
//!
//! ```text
//! U(t) = V(t−1) + (1/τ)·(O(t) − (V(t−1) − V_reset))
//! S(t) = Θ(U(t) − V_threshold)
//! V(t) = U(t)·(1 − S(t)) + V_reset·S(t)
//! ```
//!
//! `1/τ = sigmoid(tau_raw)` keeps the decay in (0, 1) while `tau_raw` trains.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Named, Registry};
use crate::tensor::{sigmoid, CustomOp, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    pub v_threshold: f64,
    pub v_reset: f64,
    /// `sigmoid(tau_raw) = 1/τ`; zero gives τ = 2.
    pub tau_raw: f64,
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { v_threshold: 1.0, v_reset: 0.0, tau_raw: 0.0, surrogate_alpha: 2.0 }
    }
}

impl LifParams {
    pub fn decay(&self) -> f64 {
        sigmoid(self.tau_raw)
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.decay()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::Config(format!(
                "v_threshold ({}) must exceed v_reset ({})",
                self.v_threshold, self.v_reset
            )));
        }
        if !(self.surrogate_alpha > 0.0) || !self.tau_raw.is_finite() {
            return Err(Error::Config("surrogate_alpha must be positive and tau_raw finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub v: Vec<f64>,
}

impl LifState {
    pub fn resting(params: &LifParams, width: usize) -> Self {
        Self { v: vec![params.v_reset; width] }
    }
}

/// Heaviside step with `Θ(0) = 1`.
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `(1/π)·arctan(π·a·x/2) + 1/2`, the smooth stand-in for Θ.
pub fn atan_primitive(x: f64, alpha: f64) -> f64 {
    (PI * alpha * x / 2.0).atan() / PI + 0.5
}

/// Derivative of [`atan_primitive`].
pub fn atan_surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = PI * alpha * x / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}

/// Forward and backward rule of the spike nonlinearity.
pub trait SpikeFunction: Named + Send + Sync {
    fn forward(&self, x: f64, alpha: f64) -> f64;
    fn derivative(&self, x: f64, alpha: f64) -> f64;
}

/// Hard threshold forward, arctan surrogate backward.
pub struct AtanSurrogate;

/// Arctan primitive in both passes. Used to check gradients against finite
/// differences, since the hard forward has none.
pub struct SmoothAtan;

impl Named for AtanSurrogate {
    fn name(&self) -> &'static str {
        "atan"
    }
}

impl Named for SmoothAtan {
    fn name(&self) -> &'static str {
        "atan_smooth"
    }
}

impl SpikeFunction for AtanSurrogate {
    fn forward(&self, x: f64, _alpha: f64) -> f64 {
        heaviside(x)
    }
    fn derivative(&self, x: f64, alpha: f64) -> f64 {
        atan_surrogate_grad(x, alpha)
    }
}

impl SpikeFunction for SmoothAtan {
    fn forward(&self, x: f64, alpha: f64) -> f64 {
        atan_primitive(x, alpha)
    }
    fn derivative(&self, x: f64, alpha: f64) -> f64 {
        atan_surrogate_grad(x, alpha)
    }
}

pub fn spike_functions() -> Registry<dyn SpikeFunction> {
    let mut r: Registry<dyn SpikeFunction> = Registry::new("spike function");
    r.register(Arc::new(AtanSurrogate)).register(Arc::new(SmoothAtan));
    r
}

/// Returns `(U, S, V)` for one neuron.
#[inline]
fn neuron(v_prev: f64, o: f64, beta: f64, p: &LifParams, spike: &dyn SpikeFunction) -> (f64, f64, f64) {
    let u = v_prev + beta * (o - (v_prev - p.v_reset));
    let s = spike.forward(u - p.v_threshold, p.surrogate_alpha);
    let v = if s == 1.0 {
        p.v_reset
    } else {
        u * (1.0 - s) + p.v_reset * s
    };
    (u, s, v)
}

/// Advance every neuron by one frame with the hard threshold.
pub fn lif_step(params: &LifParams, state: &LifState, o: &[f64]) -> Result<(Vec<f64>, LifState)> {
    if o.len() != state.v.len() {
        return Err(Error::dim("lif_step", format!("input width {} vs state width {}", o.len(), state.v.len())));
    }
    let beta = params.decay();
    let (spikes, v) = state
        .v
        .iter()
        .zip(o)
        .map(|(&vp, &ot)| {
            let (_, s, v) = neuron(vp, ot, beta, params, &AtanSurrogate);
            (s, v)
        })
        .unzip();
    Ok((spikes, LifState { v }))
}

/// Run `inputs[T, width]` (row-major) from the resting state; returns spikes `[T, width]`.
pub fn lif_sequence(params: &LifParams, inputs: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || inputs.len() % width != 0 {
        return Err(Error::dim("lif_sequence", format!("{} values for width {width}", inputs.len())));
    }
    let mut state = LifState::resting(params, width);
    let mut out = Vec::with_capacity(inputs.len());
    for frame in inputs.chunks(width) {
        let (s, next) = lif_step(params, &state, frame)?;
        out.extend(s);
        state = next;
    }
    Ok(out)
}

struct LifSequenceOp {
    params: LifParams,
    spike: Arc<dyn SpikeFunction>,
    batch: usize,
    steps: usize,
    width: usize,
    /// Pre-reset potentials `U`, same layout as the input.
    u: Vec<f64>,
}

/// LIF over `input[B, T, K]` with a learnable scalar `tau_raw[1]`; returns
/// spikes `[B, T, K]`. The reset gate is not detached.
pub fn lif_tape(
    tape: &mut Tape,
    input: Var,
    tau_raw: Var,
    params: &LifParams,
    spike: Arc<dyn SpikeFunction>,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("lif_tape", format!("input must be [B, T, K], got {shape:?}")));
    }
    if tape.value(tau_raw).numel() != 1 {
        return Err(Error::dim("lif_tape", "tau_raw must hold one value"));
    }
    let (nb, nt, nk) = (shape[0], shape[1], shape[2]);
    let mut p = params.clone();
    p.tau_raw = tape.value(tau_raw).data()[0];
    let beta = p.decay();
    let o = tape.value(input).data();
    let per_item: Vec<(Vec<f64>, Vec<f64>)> = o
        .par_chunks(nt * nk)
        .map(|item| {
            let mut u = vec![0.0; nt * nk];
            let mut s = vec![0.0; nt * nk];
            let mut v = vec![p.v_reset; nk];
            for t in 0..nt {
                for k in 0..nk {
                    let i = t * nk + k;
                    let (ut, st, vt) = neuron(v[k], item[i], beta, &p, spike.as_ref());
                    u[i] = ut;
                    s[i] = st;
                    v[k] = vt;
                }
            }
            (u, s)
        })
        .collect();
    let mut u = Vec::with_capacity(o.len());
    let mut s = Vec::with_capacity(o.len());
    for (ui, si) in per_item {
        u.extend(ui);
        s.extend(si);
    }
    let op = LifSequenceOp { params: p, spike, batch: nb, steps: nt, width: nk, u };
    Ok(tape.custom(&[input, tau_raw], Tensor::new(shape, s)?, Box::new(op)))
}

impl CustomOp for LifSequenceOp {
    fn name(&self) -> &'static str {
        "lif_sequence"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let p = &self.params;
        let beta = p.decay();
        let (nt, nk) = (self.steps, self.width);
        let len = nt * nk;
        let o = inputs[0].data();
        let s = output.data();
        let g = grad.data();
        let per_item: Vec<(Vec<f64>, f64)> = (0..self.batch)
            .into_par_iter()
            .map(|b| {
                let base = b * len;
                let mut g_o = vec![0.0; len];
                let mut g_beta = 0.0;
                let mut g_v = vec![0.0; nk];
                for t in (0..nt).rev() {
                    for k in 0..nk {
                        let i = base + t * nk + k;
                        let (u, st) = (self.u[i], s[i]);
                        let v_prev = if t == 0 {
                            p.v_reset
                        } else {
                            let j = i - nk;
                            self.u[j] * (1.0 - s[j]) + p.v_reset * s[j]
                        };
                        let fp = self.spike.derivative(u - p.v_threshold, p.surrogate_alpha);
                        let dv_du = (1.0 - st) + (p.v_reset - u) * fp;
                        let g_u = g[i] * fp + g_v[k] * dv_du;
                        g_o[t * nk + k] = beta * g_u;
                        g_beta += g_u * (o[i] - v_prev + p.v_reset);
                        g_v[k] = (1.0 - beta) * g_u;
                    }
                }
                (g_o, g_beta)
            })
            .collect();
        let mut g_o = Vec::with_capacity(self.batch * len);
        let mut g_beta = 0.0;
        for (go, gb) in per_item {
            g_o.extend(go);
            g_beta += gb;
        }
        let g_tau = g_beta * beta * (1.0 - beta);
        Ok(vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), g_o)?),
            Some(Tensor::new(inputs[1].shape().to_vec(), vec![g_tau])?),
        ])
    }
}
