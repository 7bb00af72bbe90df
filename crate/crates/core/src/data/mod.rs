//! Audio clips, mixtures, the synthetic dataset and its manifest.

pub mod manifest;
pub mod synth;
pub mod wav;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{Manifest, Record, Split};
pub use synth::{clean_sources, noise_sources, CleanSource, NoiseSource};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Mixtures whose peak exceeds this are scaled down as a whole.
pub const MIX_PEAK: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Input(format!("sample {i} is not finite")));
        }
        if self.sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTriplet {
    pub clean: AudioClip,
    /// Noise after SNR scaling, so `noisy = clean + noise`.
    pub noise: AudioClip,
    pub noisy: AudioClip,
    pub snr_db: f64,
}

/// Mix `clean` with `noise` (looped or truncated to length) at `snr_db`.
/// `f64::INFINITY` leaves the clean signal untouched.
pub fn mix(clean: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<MixtureTriplet> {
    clean.validate()?;
    noise.validate()?;
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Input(format!("sample rates differ: {} vs {}", clean.sample_rate, noise.sample_rate)));
    }
    let ec = clean.energy();
    if ec == 0.0 {
        return Err(Error::Input("clean clip is silent".into()));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Input(format!("invalid SNR {snr_db}")));
    }
    let n = clean.len();
    let scaled: Vec<f64> = if snr_db == f64::INFINITY {
        vec![0.0; n]
    } else {
        if noise.is_empty() {
            return Err(Error::Input("noise clip is empty".into()));
        }
        let looped: Vec<f64> = noise.samples.iter().cycle().take(n).copied().collect();
        let en: f64 = looped.iter().map(|x| x * x).sum();
        if en == 0.0 {
            return Err(Error::Input("noise clip is silent".into()));
        }
        let g = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
        looped.into_iter().map(|x| x * g).collect()
    };
    let mut clean = clean.samples.clone();
    let mut noise_s = scaled;
    let mut noisy: Vec<f64> = clean.iter().zip(&noise_s).map(|(c, v)| c + v).collect();
    let peak = noisy.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > MIX_PEAK {
        let g = MIX_PEAK / peak;
        for v in clean.iter_mut().chain(noise_s.iter_mut()).chain(noisy.iter_mut()) {
            *v *= g;
        }
    }
    let sr = noise.sample_rate;
    Ok(MixtureTriplet {
        clean: AudioClip::new(clean, sr),
        noise: AudioClip::new(noise_s, sr),
        noisy: AudioClip::new(noisy, sr),
        snr_db,
    })
}

/// Measured `10·log₁₀(‖clean‖² / ‖noise‖²)`.
pub fn measured_snr(t: &MixtureTriplet) -> f64 {
    10.0 * (t.clean.energy() / t.noise.energy()).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub duration_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub clean_kinds: Vec<String>,
    pub noise_kinds: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            val_count: 50,
            test_count: 0,
            duration_s: 1.0,
            snr_min_db: 0.0,
            snr_max_db: 10.0,
            clean_kinds: vec!["tone".into(), "chirp".into(), "harmonic_voice".into()],
            noise_kinds: vec!["white".into(), "pink".into()],
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.train_count + self.val_count + self.test_count
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Config("dataset must contain at least one clip".into()));
        }
        if !(self.duration_s > 0.0) || self.samples() == 0 {
            return Err(Error::Config(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        if !(self.snr_min_db <= self.snr_max_db) || !self.snr_min_db.is_finite() || !self.snr_max_db.is_finite() {
            return Err(Error::Config("snr range must be finite with min ≤ max".into()));
        }
        if self.clean_kinds.is_empty() || self.noise_kinds.is_empty() {
            return Err(Error::Config("at least one clean and one noise kind are required".into()));
        }
        for k in &self.clean_kinds {
            clean_sources().get(k)?;
        }
        for k in &self.noise_kinds {
            noise_sources().get(k)?;
        }
        Ok(())
    }

    /// Split and id of item `i`: train first, then val, then test.
    pub fn item(&self, i: usize) -> (Split, String) {
        let split = if i < self.train_count {
            Split::Train
        } else if i < self.train_count + self.val_count {
            Split::Val
        } else {
            Split::Test
        };
        (split, format!("{}-{i:04}", split.as_str()))
    }
}

/// Deterministic triplet `i`; each item draws from its own RNG stream, so
/// items can be generated in any order.
pub fn synthesize(cfg: &DatasetConfig, seed: u64, i: usize) -> Result<MixtureTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let clean_kind = &cfg.clean_kinds[i % cfg.clean_kinds.len()];
    let noise_kind = &cfg.noise_kinds[rng.gen_range(0..cfg.noise_kinds.len())];
    let snr = if cfg.snr_max_db > cfg.snr_min_db { rng.gen_range(cfg.snr_min_db..cfg.snr_max_db) } else { cfg.snr_min_db };
    let n = cfg.samples();
    let clean = clean_sources().get(clean_kind)?.generate(n, SAMPLE_RATE, &mut rng);
    let noise = noise_sources().get(noise_kind)?.generate(n, &mut rng);
    mix(&AudioClip::new(clean, SAMPLE_RATE), &AudioClip::new(noise, SAMPLE_RATE), snr)
}

/// Write every triplet as WAV files under `dir` plus `manifest.tsv`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for sub in ["clean", "noise", "noisy"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(cfg.total());
    for i in 0..cfg.total() {
        let t = synthesize(cfg, seed, i)?;
        let (split, id) = cfg.item(i);
        let file = format!("{id}.wav");
        let rel = |sub: &str| format!("{sub}/{file}");
        write_wav(&t.clean, &dir.join(rel("clean")))?;
        write_wav(&t.noise, &dir.join(rel("noise")))?;
        write_wav(&t.noisy, &dir.join(rel("noisy")))?;
        records.push(Record {
            id,
            clean: rel("clean").into(),
            noise: rel("noise").into(),
            noisy: rel("noisy").into(),
            duration: t.clean.duration(),
            split,
        });
    }
    let mut manifest = Manifest::new(records)?;
    manifest.write(&dir.join(manifest::FILE_NAME))?;
    manifest.root = dir.to_path_buf();
    Ok(manifest)
}

/// Hex SHA-256 over the manifest text and every referenced file, in record order.
pub fn dataset_digest(manifest: &Manifest) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(manifest.to_text().as_bytes());
    for r in &manifest.records {
        for p in [&r.clean, &r.noise, &r.noisy] {
            let full = manifest.resolve(p);
            h.update(std::fs::read(&full).map_err(|e| Error::io(&full, e))?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
