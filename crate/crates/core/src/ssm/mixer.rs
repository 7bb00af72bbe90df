//! Execution modes of an SSM bank, selectable by name.

use std::sync::Arc;

use super::ops::{ssm_kernel, ssm_scan};
use crate::error::Result;
use crate::registry::{Named, Registry};
use crate::tensor::{Tape, Tensor, Var};

/// Tape handles of one SSM bank. `a` is frozen and shared by all channels.
pub struct BankVars<'a> {
    pub a: &'a Tensor,
    pub b: Var,
    pub c: Var,
    pub log_dt: Var,
}

/// Maps `u[B, T, K]` to `y[B, T, K]` through the bank, one SSM per channel.
pub trait SequenceMixer: Named + Send + Sync {
    fn mix(&self, tape: &mut Tape, u: Var, bank: &BankVars) -> Result<Var>;
}

/// Materialize the kernel once and convolve with FFTs.
pub struct ConvolutionMode;

/// Step the state recurrence sample by sample.
pub struct RecurrentMode;

impl Named for ConvolutionMode {
    fn name(&self) -> &'static str {
        "convolution"
    }
}

impl Named for RecurrentMode {
    fn name(&self) -> &'static str {
        "recurrent"
    }
}

impl SequenceMixer for ConvolutionMode {
    fn mix(&self, tape: &mut Tape, u: Var, bank: &BankVars) -> Result<Var> {
        let steps = tape.value(u).shape().get(1).copied().unwrap_or(0);
        let taps = ssm_kernel(tape, bank.a, bank.b, bank.c, bank.log_dt, steps.max(1))?;
        tape.conv_channels(u, taps)
    }
}

impl SequenceMixer for RecurrentMode {
    fn mix(&self, tape: &mut Tape, u: Var, bank: &BankVars) -> Result<Var> {
        ssm_scan(tape, bank.a, bank.b, bank.c, bank.log_dt, u)
    }
}

pub fn mixers() -> Registry<dyn SequenceMixer> {
    let mut r: Registry<dyn SequenceMixer> = Registry::new("sequence mixer");
    r.register(Arc::new(ConvolutionMode)).register(Arc::new(RecurrentMode));
    r
}
