use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Causal linear convolution of length-`T` sequences through a zero-padded
/// FFT of length `next_pow2(2T−1)`, so no circular wrap-around reaches the
/// first `T` outputs.
pub struct FftConvolver {
    len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftConvolver {
    pub fn new(len: usize) -> Self {
        let fft_len = Self::padded_len(len);
        let mut planner = FftPlanner::new();
        Self {
            len,
            fft_len,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }
    }

    /// Transform length used for sequences of length `len`.
    pub fn padded_len(len: usize) -> usize {
        (2 * len.max(1) - 1).next_power_of_two()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.len);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// First `T` samples of `signal * kernel`, given the kernel's spectrum.
    pub fn convolve_spectrum(&self, signal: &[f64], kernel_spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = self.spectrum(signal);
        for (b, k) in buf.iter_mut().zip(kernel_spectrum) {
            *b *= k;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        buf[..self.len].iter().map(|c| c.re * scale).collect()
    }

    pub fn convolve(&self, signal: &[f64], kernel: &[f64]) -> Vec<f64> {
        let ks = self.spectrum(kernel);
        self.convolve_spectrum(signal, &ks)
    }

    /// `out[j] = Σ_{t≥j} grad[t]·x[t−j]`: the adjoint of causal convolution
    /// with respect to the other operand.
    pub fn correlate(&self, grad: &[f64], x: &[f64]) -> Vec<f64> {
        let reversed: Vec<f64> = grad.iter().rev().copied().collect();
        let mut out = self.convolve(&reversed, x);
        out.reverse();
        out
    }

    /// Same as [`correlate`](Self::correlate) with a precomputed spectrum of `x`.
    pub fn correlate_spectrum(&self, grad: &[f64], x_spectrum: &[Complex64]) -> Vec<f64> {
        let reversed: Vec<f64> = grad.iter().rev().copied().collect();
        let mut out = self.convolve_spectrum(&reversed, x_spectrum);
        out.reverse();
        out
    }
}

/// `out[t] = Σ_{i=0}^{t} kernel[i]·signal[t−i]` for equal-length inputs.
pub fn causal_convolve(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    assert_eq!(signal.len(), kernel.len(), "causal_convolve: length mismatch");
    if signal.is_empty() {
        return Vec::new();
    }
    FftConvolver::new(signal.len()).convolve(signal, kernel)
}

pub fn causal_correlate(grad: &[f64], x: &[f64]) -> Vec<f64> {
    assert_eq!(grad.len(), x.len(), "causal_correlate: length mismatch");
    if grad.is_empty() {
        return Vec::new();
    }
    FftConvolver::new(grad.len()).correlate(grad, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let x = [0.3, -1.0, 2.5, 4.0, 0.0];
        let mut k = [0.0; 5];
        k[0] = 1.0;
        let y = causal_convolve(&x, &k);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ones_by_ones_ramps() {
        let y = causal_convolve(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
        for (a, b) in y.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correlate_is_adjoint_of_convolve() {
        // <conv(x, k), g> == <x, correlate(g, k)>
        let x: Vec<f64> = (0..13).map(|i| (i as f64 * 1.3).sin()).collect();
        let k: Vec<f64> = (0..13).map(|i| (i as f64 * 0.7).cos()).collect();
        let g: Vec<f64> = (0..13).map(|i| (i as f64 * 2.1).sin()).collect();
        let lhs: f64 = causal_convolve(&x, &k).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = causal_correlate(&g, &k).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn padded_len_covers_linear_convolution() {
        assert_eq!(FftConvolver::padded_len(1), 1);
        assert_eq!(FftConvolver::padded_len(3), 8);
        assert_eq!(FftConvolver::padded_len(64), 128);
    }
}
