//! STFT and ISTFT as fixed linear layers.
//!
//! The Fourier bases are precomputed once per [`StftConfig`] and frozen:
//! analysis is a product of the framed signal with `[W, F]` cosine and sine
//! matrices, synthesis a product with `[F, W]` matrices followed by
//! overlap-add with window-square normalization. No runtime FFT is involved.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, CustomOp, Tape, Tensor, Var};

/// Below this value a magnitude is treated as silence when dividing.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_length: 512, hop_length: 256, sample_rate: 16_000 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Zero padding added at each end of the signal.
    pub fn pad(&self) -> usize {
        self.window_length - self.hop_length
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.window_length {
            return 0;
        }
        (padded - self.window_length) / self.hop_length + 1
    }

    /// Periodic square-root Hann window. Its square is the periodic Hann
    /// window, which overlap-adds to exactly 1 at 50% hop.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| (PI * i as f64 / n).sin())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.window_length;
        if w < 2 || w % 2 != 0 {
            return Err(Error::Config(format!("window_length must be even and ≥ 2, got {w}")));
        }
        if self.hop_length == 0 || self.hop_length > w {
            return Err(Error::Config(format!(
                "hop_length must be in 1..={w}, got {}",
                self.hop_length
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let sums = overlap_sums(&self.window(), self.hop_length);
        let (lo, hi) = sums
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if hi - lo > 1e-10 || lo <= 0.0 {
            return Err(Error::Config(format!(
                "window/hop pair {w}/{} violates constant overlap-add (Σw² spans [{lo:.3e}, {hi:.3e}])",
                self.hop_length
            )));
        }
        Ok(())
    }
}

/// Steady-state `Σ_k w²[n + k·hop]` for each phase `n` in `0..hop`.
fn overlap_sums(window: &[f64], hop: usize) -> Vec<f64> {
    (0..hop)
        .map(|n| window.iter().skip(n).step_by(hop).map(|w| w * w).sum())
        .collect()
}

/// Frozen analysis and synthesis matrices.
#[derive(Clone, Debug)]
pub struct FourierWeights {
    pub window: Vec<f64>,
    /// `[W, F]`, `w[n]·cos(2πfn/W)`.
    pub analysis_cos: Tensor,
    /// `[W, F]`, `−w[n]·sin(2πfn/W)`.
    pub analysis_sin: Tensor,
    /// `[F, W]` synthesis from the real part, window applied.
    pub synthesis_re: Tensor,
    /// `[F, W]` synthesis from the imaginary part, window applied.
    pub synthesis_im: Tensor,
    /// Always false: the layers are excluded from training.
    pub trainable: bool,
}

pub fn build_fourier_weights(cfg: &StftConfig) -> Result<FourierWeights> {
    cfg.validate()?;
    let w = cfg.window_length;
    let f = cfg.bins();
    let window = cfg.window();
    let mut a_cos = vec![0.0; w * f];
    let mut a_sin = vec![0.0; w * f];
    let mut s_re = vec![0.0; f * w];
    let mut s_im = vec![0.0; f * w];
    for n in 0..w {
        for k in 0..f {
            // reduce the phase index exactly before converting to an angle
            let angle = 2.0 * PI * ((n * k) % w) as f64 / w as f64;
            let (s, c) = angle.sin_cos();
            a_cos[n * f + k] = window[n] * c;
            a_sin[n * f + k] = -window[n] * s;
            let weight = if k == 0 || k == w / 2 { 1.0 } else { 2.0 } / w as f64;
            s_re[k * w + n] = weight * c * window[n];
            s_im[k * w + n] = -weight * s * window[n];
        }
    }
    Ok(FourierWeights {
        window,
        analysis_cos: Tensor::matrix(w, f, a_cos)?,
        analysis_sin: Tensor::matrix(w, f, a_sin)?,
        synthesis_re: Tensor::matrix(f, w, s_re)?,
        synthesis_im: Tensor::matrix(f, w, s_im)?,
        trainable: false,
    })
}

/// Time-frequency representation, all planes `frames × bins` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Spectrogram {
    pub fn from_complex(frames: usize, bins: usize, real: Vec<f64>, imag: Vec<f64>) -> Self {
        let magnitude = real.iter().zip(&imag).map(|(r, i)| r.hypot(*i)).collect();
        let phase = real.iter().zip(&imag).map(|(r, i)| i.atan2(*r)).collect();
        Self { frames, bins, real, imag, magnitude, phase }
    }

    pub fn from_polar(frames: usize, bins: usize, magnitude: Vec<f64>, phase: Vec<f64>) -> Self {
        let real = magnitude.iter().zip(&phase).map(|(m, p)| m * p.cos()).collect();
        let imag = magnitude.iter().zip(&phase).map(|(m, p)| m * p.sin()).collect();
        Self { frames, bins, real, imag, magnitude, phase }
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        let z = vec![0.0; frames * bins];
        Self::from_complex(frames, bins, z.clone(), z)
    }
}

/// STFT/ISTFT pair bound to one configuration.
#[derive(Clone, Debug)]
pub struct Stft {
    cfg: StftConfig,
    weights: FourierWeights,
    // full-signal Σw² normalization is recomputed per length; cache the window squares
    window_sq: Vec<f64>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        let weights = build_fourier_weights(&cfg)?;
        let window_sq = weights.window.iter().map(|w| w * w).collect();
        Ok(Self { cfg, weights, window_sq })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &FourierWeights {
        &self.weights
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    /// Zero-pad, slice into overlapping frames (`[T, W]`).
    fn frame(&self, signal: &[f64]) -> (usize, Vec<f64>) {
        let (w, hop, pad) = (self.cfg.window_length, self.cfg.hop_length, self.cfg.pad());
        let mut padded = vec![0.0; signal.len() + 2 * pad];
        padded[pad..pad + signal.len()].copy_from_slice(signal);
        let t = self.cfg.frames(signal.len());
        let mut frames = vec![0.0; t * w];
        for (i, row) in frames.chunks_mut(w).enumerate() {
            row.copy_from_slice(&padded[i * hop..i * hop + w]);
        }
        (t, frames)
    }

    pub fn stft(&self, signal: &[f64]) -> Result<Spectrogram> {
        if signal.is_empty() {
            return Err(Error::Input("cannot transform an empty signal".into()));
        }
        if signal.len() < self.cfg.window_length {
            return Err(Error::Input(format!(
                "signal of {} samples is shorter than the {}-sample window",
                signal.len(),
                self.cfg.window_length
            )));
        }
        let (w, f) = (self.cfg.window_length, self.cfg.bins());
        let (t, frames) = self.frame(signal);
        let mut re = vec![0.0; t * f];
        let mut im = vec![0.0; t * f];
        gemm(t, w, f, &frames, false, self.weights.analysis_cos.data(), false, 0.0, &mut re);
        gemm(t, w, f, &frames, false, self.weights.analysis_sin.data(), false, 0.0, &mut im);
        Ok(Spectrogram::from_complex(t, f, re, im))
    }

    /// Per-sample `Σ_t w²` over the frames covering each output sample.
    fn normalization(&self, frames: usize, len: usize) -> Vec<f64> {
        let (hop, pad) = (self.cfg.hop_length, self.cfg.pad());
        let mut norm = vec![0.0; len];
        for t in 0..frames {
            for (j, wsq) in self.window_sq.iter().enumerate() {
                let pos = t * hop + j;
                if pos >= pad && pos - pad < len {
                    norm[pos - pad] += wsq;
                }
            }
        }
        norm
    }

    fn check_shape(&self, frames: usize, bins: usize, len: usize) -> Result<()> {
        if bins != self.cfg.bins() || frames != self.cfg.frames(len) {
            return Err(Error::dim(
                "istft",
                format!(
                    "{frames}×{bins} spectrogram does not match a {len}-sample signal \
                     ({}×{} expected)",
                    self.cfg.frames(len),
                    self.cfg.bins()
                ),
            ));
        }
        Ok(())
    }

    /// Invert a spectrogram to a waveform of `len` samples.
    pub fn istft(&self, spec: &Spectrogram, len: usize) -> Result<Vec<f64>> {
        self.check_shape(spec.frames, spec.bins, len)?;
        let (w, f, t) = (self.cfg.window_length, spec.bins, spec.frames);
        let mut frames = vec![0.0; t * w];
        gemm(t, f, w, &spec.real, false, self.weights.synthesis_re.data(), false, 0.0, &mut frames);
        gemm(t, f, w, &spec.imag, false, self.weights.synthesis_im.data(), false, 1.0, &mut frames);
        let ola = OverlapAdd::new(self, 1, t, len);
        Ok(ola.forward(&frames))
    }

    /// Differentiable inverse for a batch: `re, im: [B, T, F] → [B, len]`.
    pub fn istft_tape(&self, tape: &mut Tape, re: Var, im: Var, len: usize) -> Result<Var> {
        let shape = tape.value(re).shape().to_vec();
        if shape.len() != 3 || tape.value(im).shape() != shape.as_slice() {
            return Err(Error::dim(
                "istft",
                format!("real {shape:?} vs imag {:?}", tape.value(im).shape()),
            ));
        }
        self.check_shape(shape[1], shape[2], len)?;
        let s_re = tape.constant(self.weights.synthesis_re.clone());
        let s_im = tape.constant(self.weights.synthesis_im.clone());
        let a = tape.matmul(re, s_re)?;
        let b = tape.matmul(im, s_im)?;
        let frames = tape.add(a, b)?;
        let ola = OverlapAdd::new(self, shape[0], shape[1], len);
        let out = Tensor::new(vec![shape[0], len], ola.forward(tape.value(frames).data()))?;
        Ok(tape.custom(&[frames], out, Box::new(ola)))
    }
}

/// Overlap-add of `[B, T, W]` frames into `[B, len]`, trimming the padding
/// and dividing by the accumulated squared window.
struct OverlapAdd {
    batch: usize,
    frames: usize,
    window: usize,
    hop: usize,
    pad: usize,
    len: usize,
    inv_norm: Vec<f64>,
}

impl OverlapAdd {
    fn new(stft: &Stft, batch: usize, frames: usize, len: usize) -> Self {
        let inv_norm = stft
            .normalization(frames, len)
            .into_iter()
            .map(|n| if n > MAGNITUDE_FLOOR { 1.0 / n } else { 0.0 })
            .collect();
        Self {
            batch,
            frames,
            window: stft.cfg.window_length,
            hop: stft.cfg.hop_length,
            pad: stft.cfg.pad(),
            len,
            inv_norm,
        }
    }

    fn forward(&self, frames: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.len];
        for b in 0..self.batch {
            let dst = &mut out[b * self.len..(b + 1) * self.len];
            for t in 0..self.frames {
                let row = &frames[(b * self.frames + t) * self.window..][..self.window];
                for (j, v) in row.iter().enumerate() {
                    let pos = t * self.hop + j;
                    if pos >= self.pad && pos - self.pad < self.len {
                        dst[pos - self.pad] += v;
                    }
                }
            }
            for (d, s) in dst.iter_mut().zip(&self.inv_norm) {
                *d *= s;
            }
        }
        out
    }
}

impl CustomOp for OverlapAdd {
    fn name(&self) -> &'static str {
        "overlap_add"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = grad.data();
        let mut gf = vec![0.0; inputs[0].numel()];
        for b in 0..self.batch {
            for t in 0..self.frames {
                let row = &mut gf[(b * self.frames + t) * self.window..][..self.window];
                for (j, r) in row.iter_mut().enumerate() {
                    let pos = t * self.hop + j;
                    if pos >= self.pad && pos - self.pad < self.len {
                        let n = pos - self.pad;
                        *r = g[b * self.len + n] * self.inv_norm[n];
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gf)?)])
    }
}

/// Scale magnitudes by `mask` (values in `[0, 1]`), keeping the phase.
pub fn apply_mask(spec: &Spectrogram, mask: &[f64]) -> Result<Spectrogram> {
    if mask.len() != spec.magnitude.len() {
        return Err(Error::dim(
            "apply_mask",
            format!("mask of {} values for a {}×{} spectrogram", mask.len(), spec.frames, spec.bins),
        ));
    }
    if let Some(bad) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Contract(format!("mask value {bad} outside [0, 1]")));
    }
    let magnitude: Vec<f64> = spec.magnitude.iter().zip(mask).map(|(m, k)| m * k).collect();
    Ok(Spectrogram::from_polar(spec.frames, spec.bins, magnitude, spec.phase.clone()))
}
