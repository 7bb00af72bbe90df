//! Synthetic clean and noise signals.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::registry::{Named, Registry};

pub const CLEAN_PEAK: f64 = 0.9;

pub trait CleanSource: Named + Send + Sync {
    fn generate(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

pub trait NoiseSource: Named + Send + Sync {
    fn generate(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

/// Scale so the largest magnitude is `peak`; silent input is returned as is.
pub fn peak_normalize(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

/// Pure sine at `freq` Hz.
pub fn tone(freq: f64, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    peak_normalize((0..len).map(|n| (2.0 * PI * freq * n as f64 / sr).sin()).collect(), CLEAN_PEAK)
}

pub struct Tone;
pub struct Chirp;
pub struct HarmonicVoice;
pub struct WhiteNoise;
pub struct PinkNoise;

impl Named for Tone {
    fn name(&self) -> &'static str {
        "tone"
    }
}
impl Named for Chirp {
    fn name(&self) -> &'static str {
        "chirp"
    }
}
impl Named for HarmonicVoice {
    fn name(&self) -> &'static str {
        "harmonic_voice"
    }
}
impl Named for WhiteNoise {
    fn name(&self) -> &'static str {
        "white"
    }
}
impl Named for PinkNoise {
    fn name(&self) -> &'static str {
        "pink"
    }
}

impl CleanSource for Tone {
    fn generate(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let f = rng.gen_range(200.0..2000.0);
        tone(f, len, sample_rate)
    }
}

impl CleanSource for Chirp {
    /// Linear sweep between two random frequencies.
    fn generate(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sr = sample_rate as f64;
        let f0: f64 = rng.gen_range(150.0..500.0);
        let f1 = rng.gen_range(1000.0f64..4000.0).min(0.45 * sr);
        let (f0, f1) = if rng.gen_bool(0.5) { (f0, f1) } else { (f1, f0) };
        let dur = (len.max(1) as f64) / sr;
        let rate = (f1 - f0) / dur;
        let x = (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
            })
            .collect();
        peak_normalize(x, CLEAN_PEAK)
    }
}

impl CleanSource for HarmonicVoice {
    /// 3 to 6 harmonics over a gliding, vibrating pitch, gated by syllable-like bursts.
    fn generate(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sr = sample_rate as f64;
        let nyquist = sr / 2.0;
        let harmonics = rng.gen_range(3..=6);
        let f_start: f64 = rng.gen_range(100.0..250.0);
        let f_end: f64 = rng.gen_range(100.0..250.0);
        let vib_rate = rng.gen_range(4.0..7.0);
        let vib_depth = rng.gen_range(0.01..0.04);
        let syllables = rng.gen_range(2..=5);
        let amps: Vec<f64> = (1..=harmonics).map(|h| rng.gen_range(0.5..1.0) / h as f64).collect();
        let dur = len.max(1) as f64 / sr;
        let mut phase = 0.0;
        let x = (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                let f0 = (f_start + (f_end - f_start) * t / dur) * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
                phase += 2.0 * PI * f0 / sr;
                let voiced: f64 = amps
                    .iter()
                    .enumerate()
                    .filter(|(h, _)| f0 * (*h + 1) as f64 <= 0.9 * nyquist)
                    .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                    .sum();
                // raised-cosine syllable envelope
                let env = (PI * syllables as f64 * t / dur).sin().powi(2);
                voiced * (0.1 + 0.9 * env)
            })
            .collect();
        peak_normalize(x, CLEAN_PEAK)
    }
}

impl NoiseSource for WhiteNoise {
    fn generate(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

impl NoiseSource for PinkNoise {
    /// White noise through Paul Kellet's 1/f filter.
    fn generate(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut b = [0.0f64; 7];
        (0..len)
            .map(|_| {
                let w: f64 = rng.sample(StandardNormal);
                b[0] = 0.99886 * b[0] + w * 0.0555179;
                b[1] = 0.99332 * b[1] + w * 0.0750759;
                b[2] = 0.96900 * b[2] + w * 0.1538520;
                b[3] = 0.86650 * b[3] + w * 0.3104856;
                b[4] = 0.55000 * b[4] + w * 0.5329522;
                b[5] = -0.7616 * b[5] - w * 0.0168980;
                let y = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
                b[6] = w * 0.115926;
                y
            })
            .collect()
    }
}

pub fn clean_sources() -> Registry<dyn CleanSource> {
    let mut r: Registry<dyn CleanSource> = Registry::new("clean source");
    r.register(Arc::new(Tone)).register(Arc::new(Chirp)).register(Arc::new(HarmonicVoice));
    r
}

pub fn noise_sources() -> Registry<dyn NoiseSource> {
    let mut r: Registry<dyn NoiseSource> = Registry::new("noise source");
    r.register(Arc::new(WhiteNoise)).register(Arc::new(PinkNoise));
    r
}
