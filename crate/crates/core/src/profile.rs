//! Parameter and FLOP accounting for one forward pass of one sample.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Printed with every report.
pub const CONVENTION: &str = "multiply-accumulate = 2 FLOPs; FFT of length L = 5·L·log2(L); \
    elementwise ops = 1 FLOP per element; spike sparsity is reported but not subtracted";

pub const FORMULA_SHEET: &str = "\
affine m→n over T frames      2·T·m·n + T·n
stft (T frames, W, F bins)    T·W + 4·T·W·F + 3·T·F
ssm kernel (K ch, H, L taps)  K·(2·H² + 4·H + L·(2·H² + 6·H))
fft convolution (K ch)        K·(3·5·P·log2 P + 6·P), P = next_pow2(2T − 1)
recurrent scan (K ch)         K·(2·H² + 4·H + T·(2·H² + 6·H + 2))
lif (T·K neurons)             6·T·K
shortcut / bias / sigmoid     1 per element
mask application              2·T·F
istft                         4·T·F·W + T·W + len";

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    /// Frozen weights, excluded from `params`.
    pub frozen: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub frames: usize,
    pub modules: Vec<ModuleCost>,
    pub spike_sparsity: Option<f64>,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.modules.iter().map(|m| m.params).sum()
    }

    pub fn total_frozen(&self) -> usize {
        self.modules.iter().map(|m| m.frozen).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.modules.iter().map(|m| m.flops).sum()
    }

    /// Human-readable table followed by `key=value` records.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost report ({} frames)", self.frames);
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>16}", "module", "params", "frozen", "flops");
        for m in &self.modules {
            let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>16}", m.name, m.params, m.frozen, m.flops);
        }
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>12} {:>16}",
            "total",
            self.total_params(),
            self.total_frozen(),
            self.total_flops()
        );
        let _ = writeln!(s, "params ≈ {:.3}M, flops ≈ {:.3e}", self.total_params() as f64 / 1e6, self.total_flops() as f64);
        if let Some(sp) = self.spike_sparsity {
            let _ = writeln!(s, "spike sparsity {sp:.4}");
        }
        let _ = writeln!(s, "convention: {CONVENTION}");
        let _ = writeln!(s, "formulas:");
        for line in FORMULA_SHEET.lines() {
            let _ = writeln!(s, "  {line}");
        }
        s.push_str(&self.records());
        s
    }

    pub fn records(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        for m in &self.modules {
            let _ = writeln!(s, "params.{}={}", m.name, m.params);
            let _ = writeln!(s, "frozen.{}={}", m.name, m.frozen);
            let _ = writeln!(s, "flops.{}={}", m.name, m.flops);
        }
        let _ = writeln!(s, "params.total={}", self.total_params());
        let _ = writeln!(s, "frozen.total={}", self.total_frozen());
        let _ = writeln!(s, "flops.total={}", self.total_flops());
        if let Some(sp) = self.spike_sparsity {
            let _ = writeln!(s, "spike_sparsity={sp}");
        }
        s
    }
}

/// Group parameter name to a report row: `encoder`, `layer.{i}`, `mask_head`.
fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("layers"), Some(i)) => format!("layer.{i}"),
        (Some(head), _) => head.to_string(),
        _ => name.to_string(),
    }
}

fn affine(t: u64, m: u64, n: u64) -> u64 {
    2 * t * m * n + t * n
}

fn log2(p: u64) -> u64 {
    63 - p.leading_zeros() as u64
}

/// FLOPs of each module for `frames` STFT frames.
pub fn count_flops(cfg: &ModelConfig, frames: usize) -> Vec<(String, u64)> {
    let t = frames as u64;
    let (w, f) = (cfg.window_length as u64, cfg.bins() as u64);
    let (k, h) = (cfg.latent_size as u64, cfg.hidden_size as u64);
    let hop = cfg.hop_length as u64;
    let len = ((t + 1) * hop).saturating_sub(w);
    let mut out = vec![("stft".to_string(), t * w + 4 * t * w * f + 3 * t * f), ("encoder".to_string(), affine(t, f, k))];
    let setup = 2 * h * h + 4 * h;
    let per_step = 2 * h * h + 6 * h;
    let mixer = if cfg.mode == "recurrent" {
        k * (setup + t * (per_step + 2))
    } else {
        let p = (2 * t - 1).next_power_of_two();
        k * (setup + t * per_step) + k * (3 * 5 * p * log2(p) + 6 * p)
    };
    for i in 0..cfg.n_layers {
        let layer = mixer + affine(t, k, k) + 6 * t * k + affine(t, k, k) + t * k;
        out.push((format!("layer.{i}"), layer));
    }
    out.push(("mask_head".to_string(), affine(t, k, f) + t * f + 2 * t * f));
    out.push(("istft".to_string(), 4 * t * f * w + t * w + len));
    out
}

/// Trainable and frozen scalars per module; the STFT/ISTFT weights are frozen.
pub fn count_params(model: &Model) -> Vec<(String, usize, usize)> {
    let mut rows: Vec<(String, usize, usize)> = Vec::new();
    let cfg = model.config();
    let fourier = cfg.window_length * cfg.bins() * 2;
    rows.push(("stft".into(), 0, fourier));
    for p in model.params.iter() {
        let name = module_of(&p.name);
        let idx = match rows.iter().position(|r| r.0 == name) {
            Some(i) => i,
            None => {
                rows.push((name, 0, 0));
                rows.len() - 1
            }
        };
        if p.trainable {
            rows[idx].1 += p.value.numel();
        } else {
            rows[idx].2 += p.value.numel();
        }
    }
    rows.push(("istft".into(), 0, fourier));
    rows
}

/// Fraction of zero entries in a spike tensor.
pub fn spike_sparsity(spikes: &[f64]) -> f64 {
    if spikes.is_empty() {
        return 1.0;
    }
    spikes.iter().filter(|&&s| s == 0.0).count() as f64 / spikes.len() as f64
}

/// Sparsity over every layer's spikes when `probe` is enhanced.
pub fn probe_sparsity(model: &Model, probe: &[f64]) -> Result<f64> {
    let spec = model.stft().stft(probe)?;
    let mut tape = Tape::new();
    let mag = tape.constant(Tensor::new(vec![1, spec.frames, spec.bins], spec.magnitude)?);
    let fw = model.forward(&mut tape, mag)?;
    let all: Vec<f64> = fw.spikes.iter().flat_map(|s| tape.value(*s).data().iter().copied()).collect();
    Ok(spike_sparsity(&all))
}

pub fn cost_report(model: &Model, frames: usize, probe: Option<&[f64]>) -> Result<CostReport> {
    let flops = count_flops(model.config(), frames);
    let modules = count_params(model)
        .into_iter()
        .map(|(name, params, frozen)| {
            let f = flops.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).unwrap_or(0);
            ModuleCost { name, params, frozen, flops: f }
        })
        .collect();
    let spike_sparsity = probe.map(|p| probe_sparsity(model, p)).transpose()?;
    Ok(CostReport { frames, modules, spike_sparsity })
}
