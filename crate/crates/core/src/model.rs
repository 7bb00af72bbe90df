//! The spiking S4 enhancement network.
//!
//! ```text
//! |STFT| [T,F] → encoder [T,K] → N × layer → mask head → sigmoid → M̂ [T,F]
//! layer(u) = decoder(LIF(emission(SSM bank(u)))) + u
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{apply_mask, Spectrogram, Stft, StftConfig, MAGNITUDE_FLOOR};
use crate::error::{Error, Result};
use crate::objective::{total_loss_tape, LossReport};
use crate::params::ParamStore;
use crate::snn::{lif_tape, spike_functions, LifParams, SpikeFunction};
use crate::ssm::mixer::{mixers, BankVars, SequenceMixer};
use crate::ssm::{hippo_init, SsmChannel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub latent_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
    pub lif: LifParams,
    /// Sequence mixer name: `convolution` or `recurrent`.
    pub mode: String,
    /// Spike function name: `atan` or `atan_smooth`.
    pub spike: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_size: 256,
            latent_size: 128,
            window_length: 512,
            hop_length: 256,
            sample_rate: 16_000,
            lif: LifParams::default(),
            mode: "convolution".into(),
            spike: "atan".into(),
        }
    }
}

impl ModelConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig { window_length: self.window_length, hop_length: self.hop_length, sample_rate: self.sample_rate }
    }

    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_size == 0 || self.latent_size == 0 {
            return Err(Error::Config("n_layers, hidden_size and latent_size must be at least 1".into()));
        }
        self.stft().validate()?;
        self.lif.validate()?;
        mixers().get(&self.mode)?;
        spike_functions().get(&self.spike)?;
        Ok(())
    }
}

/// Parameter names of layer `i`.
pub struct LayerNames {
    pub a: String,
    pub b: String,
    pub c: String,
    pub log_dt: String,
    pub emission_w: String,
    pub emission_b: String,
    pub tau_raw: String,
    pub decoder_w: String,
    pub decoder_b: String,
}

impl LayerNames {
    pub fn new(i: usize) -> Self {
        let p = |s: &str| format!("layers.{i}.{s}");
        Self {
            a: p("ssm.a"),
            b: p("ssm.b"),
            c: p("ssm.c"),
            log_dt: p("ssm.log_dt"),
            emission_w: p("emission.weight"),
            emission_b: p("emission.bias"),
            tau_raw: p("lif.tau_raw"),
            decoder_w: p("decoder.weight"),
            decoder_b: p("decoder.bias"),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

/// Affine weight `[fan_in, fan_out]` and bias, both `U(±1/√fan_in)`.
fn affine(store: &mut ParamStore, rng: &mut ChaCha8Rng, w: &str, b: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.add(w, uniform(rng, &[fan_in, fan_out], bound), true)?;
    store.add(b, uniform(rng, &[fan_out], bound), true)?;
    Ok(())
}

/// Inputs and targets of one batch; every tensor is `[B, T, F]` except the
/// waveforms `[B, len]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub magnitude: Tensor,
    pub real: Tensor,
    pub imag: Tensor,
    pub target_mask: Tensor,
    pub clean: Tensor,
    pub len: usize,
}

/// One precomputed training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub noisy_signal: Vec<f64>,
    pub noisy: Spectrogram,
    pub target_mask: Vec<f64>,
    pub clean: Vec<f64>,
}

impl Example {
    pub fn new(stft: &Stft, noisy: &[f64], clean: &[f64]) -> Result<Self> {
        if noisy.len() != clean.len() {
            return Err(Error::dim("example", format!("noisy {} vs clean {} samples", noisy.len(), clean.len())));
        }
        let noisy_spec = stft.stft(noisy)?;
        let clean_spec = stft.stft(clean)?;
        let target_mask = ideal_mask(&clean_spec.magnitude, &noisy_spec.magnitude)?;
        Ok(Self { noisy_signal: noisy.to_vec(), noisy: noisy_spec, target_mask, clean: clean.to_vec() })
    }
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (t, f, len) = (first.noisy.frames, first.noisy.bins, first.clean.len());
        let nb = examples.len();
        let mut mag = Vec::with_capacity(nb * t * f);
        let mut re = Vec::with_capacity(nb * t * f);
        let mut im = Vec::with_capacity(nb * t * f);
        let mut mask = Vec::with_capacity(nb * t * f);
        let mut clean = Vec::with_capacity(nb * len);
        for ex in examples {
            if ex.noisy.frames != t || ex.noisy.bins != f || ex.clean.len() != len {
                return Err(Error::dim("batch", "examples in a batch must share one length"));
            }
            mag.extend_from_slice(&ex.noisy.magnitude);
            re.extend_from_slice(&ex.noisy.real);
            im.extend_from_slice(&ex.noisy.imag);
            mask.extend_from_slice(&ex.target_mask);
            clean.extend_from_slice(&ex.clean);
        }
        let s = vec![nb, t, f];
        Ok(Self {
            magnitude: Tensor::new(s.clone(), mag)?,
            real: Tensor::new(s.clone(), re)?,
            imag: Tensor::new(s.clone(), im)?,
            target_mask: Tensor::new(s, mask)?,
            clean: Tensor::new(vec![nb, len], clean)?,
            len,
        })
    }
}

/// Tape handles produced by a forward pass.
pub struct Forward {
    pub mask: Var,
    /// Spike tensors of every layer, `[B, T, K]`.
    pub spikes: Vec<Var>,
}

pub struct Model {
    config: ModelConfig,
    stft: Stft,
    pub params: ParamStore,
    mixer: Arc<dyn SequenceMixer>,
    spike: Arc<dyn SpikeFunction>,
}

impl Model {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, k, h) = (config.bins(), config.latent_size, config.hidden_size);
        let mut store = ParamStore::new();
        affine(&mut store, &mut rng, "encoder.weight", "encoder.bias", f, k)?;
        let a = hippo_init(h)?;
        let a_rows = Tensor::new(vec![h, h], a.transpose().as_slice().to_vec())?;
        for i in 0..config.n_layers {
            let n = LayerNames::new(i);
            let (mut b, mut c, mut log_dt) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..k {
                let ch = SsmChannel::init(h, &mut rng)?;
                b.extend(ch.b.iter());
                c.extend(ch.c.iter());
                log_dt.push(ch.log_dt);
            }
            store.add(&n.a, a_rows.clone(), false)?;
            store.add(&n.b, Tensor::new(vec![k, h], b)?, true)?;
            store.add(&n.c, Tensor::new(vec![k, h], c)?, true)?;
            store.add(&n.log_dt, Tensor::vector(log_dt), true)?;
            affine(&mut store, &mut rng, &n.emission_w, &n.emission_b, k, k)?;
            store.add(&n.tau_raw, Tensor::vector(vec![config.lif.tau_raw]), true)?;
            affine(&mut store, &mut rng, &n.decoder_w, &n.decoder_b, k, k)?;
        }
        affine(&mut store, &mut rng, "mask_head.weight", "mask_head.bias", k, f)?;
        Self::from_params(config, store)
    }

    /// Rebuild around an existing parameter set, checking every expected
    /// name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (f, k, h) = (config.bins(), config.latent_size, config.hidden_size);
        let mut expected: Vec<(String, Vec<usize>)> =
            vec![("encoder.weight".into(), vec![f, k]), ("encoder.bias".into(), vec![k])];
        for i in 0..config.n_layers {
            let n = LayerNames::new(i);
            expected.extend([
                (n.a, vec![h, h]),
                (n.b, vec![k, h]),
                (n.c, vec![k, h]),
                (n.log_dt, vec![k]),
                (n.emission_w, vec![k, k]),
                (n.emission_b, vec![k]),
                (n.tau_raw, vec![1]),
                (n.decoder_w, vec![k, k]),
                (n.decoder_b, vec![k]),
            ]);
        }
        expected.extend([("mask_head.weight".into(), vec![k, f]), ("mask_head.bias".into(), vec![f])]);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let p = params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config implies {shape:?}",
                    p.value.shape()
                )));
            }
        }
        let stft = Stft::new(config.stft())?;
        let mixer = mixers().get(&config.mode)?;
        let spike = spike_functions().get(&config.spike)?;
        Ok(Self { config, stft, params, mixer, spike })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn set_mode(&mut self, name: &str) -> Result<()> {
        self.mixer = mixers().get(name)?;
        self.config.mode = name.to_string();
        Ok(())
    }

    pub fn set_spike(&mut self, name: &str) -> Result<()> {
        self.spike = spike_functions().get(name)?;
        self.config.spike = name.to_string();
        Ok(())
    }

    fn affine_tape(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.params.bind(tape, w)?;
        let bv = self.params.bind(tape, b)?;
        let y = tape.matmul(x, wv)?;
        tape.add(y, bv)
    }

    /// Encoder: `[B, T, F] → [B, T, K]`.
    pub fn encode(&self, tape: &mut Tape, magnitude: Var) -> Result<Var> {
        let s = tape.value(magnitude).shape();
        if s.last() != Some(&self.config.bins()) {
            return Err(Error::dim("encode", format!("expected {} bins, got shape {s:?}", self.config.bins())));
        }
        self.affine_tape(tape, magnitude, "encoder.weight", "encoder.bias")
    }

    /// One spiking S4 layer; returns the output and the spike tensor.
    pub fn layer_forward(&self, tape: &mut Tape, i: usize, u: Var) -> Result<(Var, Var)> {
        let n = LayerNames::new(i);
        let bank = BankVars {
            a: &self.params.get(&n.a)?.value,
            b: self.params.bind(tape, &n.b)?,
            c: self.params.bind(tape, &n.c)?,
            log_dt: self.params.bind(tape, &n.log_dt)?,
        };
        let v = self.mixer.mix(tape, u, &bank)?;
        let w = self.affine_tape(tape, v, &n.emission_w, &n.emission_b)?;
        let tau = self.params.bind(tape, &n.tau_raw)?;
        let s = lif_tape(tape, w, tau, &self.config.lif, self.spike.clone())?;
        let d = self.affine_tape(tape, s, &n.decoder_w, &n.decoder_b)?;
        Ok((tape.add(d, u)?, s))
    }

    /// Mask head with sigmoid bound: `[B, T, K] → [B, T, F]`.
    pub fn predict_mask(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let logits = self.affine_tape(tape, latent, "mask_head.weight", "mask_head.bias")?;
        Ok(tape.sigmoid(logits))
    }

    pub fn forward(&self, tape: &mut Tape, magnitude: Var) -> Result<Forward> {
        let mut u = self.encode(tape, magnitude)?;
        let mut spikes = Vec::with_capacity(self.config.n_layers);
        for i in 0..self.config.n_layers {
            let (out, s) = self.layer_forward(tape, i, u)?;
            u = out;
            spikes.push(s);
        }
        Ok(Forward { mask: self.predict_mask(tape, u)?, spikes })
    }

    /// Enhanced waveforms `[B, len]` and masks `[B, T, F]` of a batch.
    pub fn estimate(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var)> {
        let mag = tape.constant(batch.magnitude.clone());
        let fw = self.forward(tape, mag)?;
        let re = tape.constant(batch.real.clone());
        let im = tape.constant(batch.imag.clone());
        let mre = tape.mul(fw.mask, re)?;
        let mim = tape.mul(fw.mask, im)?;
        let est = self.stft.istft_tape(tape, mre, mim, batch.len)?;
        Ok((est, fw.mask))
    }

    /// Record the full training loss of `batch` on `tape`.
    pub fn loss(&self, tape: &mut Tape, batch: &Batch, lambda: f64) -> Result<(Var, LossReport)> {
        let (est, mask) = self.estimate(tape, batch)?;
        total_loss_tape(tape, est, &batch.clean, mask, &batch.target_mask, lambda)
    }

    /// Mask for one spectrogram, `[T·F]`.
    pub fn mask_for(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mag = tape.constant(Tensor::new(vec![1, spec.frames, spec.bins], spec.magnitude.clone())?);
        let fw = self.forward(&mut tape, mag)?;
        Ok(tape.value(fw.mask).data().to_vec())
    }

    /// Denoise a waveform; returns the enhanced signal (same length) and the mask.
    pub fn enhance(&self, noisy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let spec = self.stft.stft(noisy)?;
        let mask = self.mask_for(&spec)?;
        let out = self.stft.istft(&apply_mask(&spec, &mask)?, noisy.len())?;
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("enhanced signal is not finite".into()));
        }
        Ok((out, mask))
    }
}

/// Clipped ideal amplitude mask `clip(clean / max(noisy, floor), 0, 1)`.
pub fn ideal_mask(clean_mag: &[f64], noisy_mag: &[f64]) -> Result<Vec<f64>> {
    if clean_mag.len() != noisy_mag.len() {
        return Err(Error::dim("ideal_mask", format!("{} vs {} bins", clean_mag.len(), noisy_mag.len())));
    }
    Ok(clean_mag
        .iter()
        .zip(noisy_mag)
        .map(|(c, n)| (c / n.max(MAGNITUDE_FLOOR)).clamp(0.0, 1.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> ModelConfig {
        ModelConfig { n_layers: 2, hidden_size: 3, latent_size: 4, window_length: 8, hop_length: 4, ..ModelConfig::default() }
    }

    fn signal(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| 0.5 * (i as f64 * 0.37 + seed).sin() + 0.2 * (i as f64 * 1.9 * seed).cos()).collect()
    }

    #[test]
    fn toy_parameter_count() {
        let m = Model::new(toy(), 0).unwrap();
        // per layer 2·K·H + K + 2·(K² + K) + 1 = 24 + 4 + 40 + 1
        assert_eq!(m.params.trainable_count(), 2 * 69 + (5 * 4 + 4) + (4 * 5 + 5));
        assert_eq!(m.params.frozen_count(), 2 * 9);
    }

    #[test]
    fn zero_paths() {
        let mut m = Model::new(toy(), 1).unwrap();
        for p in m.params.iter_mut() {
            if p.name.starts_with("encoder") || p.name.starts_with("mask_head") {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let mag = tape.constant(Tensor::zeros(&[2, 7, 5]));
        let u = m.encode(&mut tape, mag).unwrap();
        assert!(tape.value(u).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(u).shape(), &[2, 7, 4]);
        let mask = m.predict_mask(&mut tape, u).unwrap();
        assert!(tape.value(mask).data().iter().all(|&x| x == 0.5));
        let bad = tape.constant(Tensor::zeros(&[1, 7, 6]));
        assert!(matches!(m.encode(&mut tape, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn shortcut_identity_with_zero_decoder() {
        let mut m = Model::new(toy(), 2).unwrap();
        for name in ["layers.0.decoder.weight", "layers.0.decoder.bias"] {
            m.params.get_mut(name).unwrap().value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..2 * 6 * 4).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let u = tape.constant(Tensor::new(vec![2, 6, 4], x.clone()).unwrap());
        let (out, s) = m.layer_forward(&mut tape, 0, u).unwrap();
        assert_eq!(tape.value(out).data(), &x[..]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn layer_modes_agree() {
        let cfg = ModelConfig { hidden_size: 8, latent_size: 6, ..toy() };
        let mut m = Model::new(cfg, 3).unwrap();
        let x: Vec<f64> = (0..3 * 20 * 6).map(|i| (i as f64 * 0.31).sin()).collect();
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let u = tape.constant(Tensor::new(vec![3, 20, 6], x.clone()).unwrap());
            let (out, _) = m.layer_forward(&mut tape, 1, u).unwrap();
            tape.value(out).data().to_vec()
        };
        let conv = run(&m);
        m.set_mode("recurrent").unwrap();
        let rec = run(&m);
        let err = conv.iter().zip(&rec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = conv.iter().map(|a| a.abs()).fold(0.0, f64::max);
        assert!(err / scale < 1e-5);
        assert!(m.set_mode("fast").is_err());
    }

    #[test]
    fn enhance_preserves_length_and_unit_mask_reconstructs() {
        let mut m = Model::new(toy(), 4).unwrap();
        for len in [8, 9, 60, 61, 100] {
            let x = signal(len, 0.3);
            let (y, mask) = m.enhance(&x).unwrap();
            assert_eq!(y.len(), len);
            assert!(mask.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // saturate the mask head so M̂ = 1 exactly in floating point
        for p in m.params.iter_mut() {
            if p.name == "mask_head.weight" {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            if p.name == "mask_head.bias" {
                p.value.data_mut().iter_mut().for_each(|x| *x = 100.0);
            }
        }
        let x = signal(60, 0.9);
        let (y, _) = m.enhance(&x).unwrap();
        let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err / norm < 1e-8);
    }

    #[test]
    fn ideal_mask_cases() {
        assert_eq!(ideal_mask(&[0.5, 2.0], &[0.5, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(ideal_mask(&[0.0, 0.0], &[0.3, 1e-12]).unwrap(), vec![0.0, 0.0]);
        // clean 1 plus in-phase noise 1 per bin: mask 1/2
        let m = ideal_mask(&[1.0, 3.0], &[2.0, 4.0]).unwrap();
        assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(ideal_mask(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let mut m = Model::new(toy(), 5).unwrap();
        m.set_spike("atan_smooth").unwrap();
        let stft = m.stft().clone();
        let exs: Vec<Example> = (0..2)
            .map(|j| {
                let clean = signal(60, 0.2 + j as f64);
                let noisy: Vec<f64> = clean.iter().enumerate().map(|(i, c)| c + 0.3 * ((i * 7 + j) as f64).sin()).collect();
                Example::new(&stft, &noisy, &clean).unwrap()
            })
            .collect();
        let batch = Batch::from_examples(&exs.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let (loss, report) = m.loss(&mut tape, &batch, 0.001).unwrap();
        assert!(report.total.is_finite());
        tape.backward(loss).unwrap();
        m.params.accumulate(&tape).unwrap();
        for p in m.params.iter().filter(|p| p.trainable) {
            assert!(p.grad.is_finite(), "{}", p.name);
            assert!(p.grad.norm() > 0.0, "{}", p.name);
        }
    }

    #[test]
    fn from_params_rejects_mismatch() {
        let m = Model::new(toy(), 0).unwrap();
        let other = ModelConfig { latent_size: 5, ..toy() };
        assert!(matches!(Model::from_params(other, m.params.clone()), Err(Error::Checkpoint(_))));
    }
}
