//! Training loop, evaluation and resume.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, EpochLog, Header};
use crate::config::RunConfig;
use crate::data::{Manifest, Split};
use crate::dsp::Stft;
use crate::error::{Error, Result};
use crate::model::{Batch, Example, Model};
use crate::objective::{si_snr, total_loss_tape, MetricRecord};
use crate::optim::OptimState;
use crate::tensor::Tape;

/// Shuffle streams start here so they never coincide with initialization.
const SHUFFLE_STREAM: u64 = 1 << 32;

/// Read every record of `split` and precompute its spectrograms.
pub fn load_examples(manifest: &Manifest, split: Split, stft: &Stft) -> Result<Vec<(String, Example)>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| {
            let (clean, noisy) = manifest.load(r)?;
            Ok((r.id.clone(), Example::new(stft, &noisy.samples, &clean.samples)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Per example `(noisy, enhanced)` SI-SNR in dB.
    pub si_snr: Vec<(f64, f64)>,
}

impl Evaluation {
    pub fn mean_noisy(&self) -> f64 {
        self.si_snr.iter().map(|p| p.0).sum::<f64>() / self.si_snr.len().max(1) as f64
    }

    pub fn mean_enhanced(&self) -> f64 {
        self.si_snr.iter().map(|p| p.1).sum::<f64>() / self.si_snr.len().max(1) as f64
    }

    pub fn records(&self, ids: &[String]) -> Vec<MetricRecord> {
        ids.iter().zip(&self.si_snr).map(|(id, (n, e))| MetricRecord::new(id.clone(), *n, *e)).collect()
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_si_snr: Option<f64>,
    pub history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optim = OptimState::new(config.optim, &model.params);
        Ok(Self { config, model, optim, epoch: 0, best_val_si_snr: None, history: Vec::new() })
    }

    /// Continue from `ckpt`. The model and optimizer settings must match
    /// `config`; epochs, paths and batch size may differ.
    pub fn resume(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let saved = &ckpt.header.config;
        if saved.model != config.model || saved.optim != config.optim || saved.seed != config.seed {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different model, optimizer or seed".into(),
            ));
        }
        let model = Model::from_params(config.model.clone(), ckpt.params)?;
        let optim = ckpt.optim.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config,
            model,
            optim,
            epoch: ckpt.header.epoch,
            best_val_si_snr: ckpt.header.best_val_si_snr,
            history: ckpt.header.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: Header {
                config: self.config.clone(),
                epoch: self.epoch,
                best_val_si_snr: self.best_val_si_snr,
                history: self.history.clone(),
            },
            params: self.model.params.clone(),
            optim: Some(self.optim.clone()),
        }
    }

    /// Example order of `epoch`, a function of the seed and epoch only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `train`; returns the example-weighted mean loss.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let order = self.epoch_order(self.epoch, train.len());
        let mut total = 0.0;
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch = Batch::from_examples(&chunk.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let (loss, report) = self.model.loss(&mut tape, &batch, self.config.train.lambda)?;
            if !report.total.is_finite() {
                return Err(Error::Numerical(format!("loss became {} in epoch {}", report.total, self.epoch + 1)));
            }
            tape.backward(loss)?;
            self.model.params.zero_grads();
            self.model.params.accumulate(&tape)?;
            self.optim.step(&mut self.model.params)?;
            total += report.total * chunk.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<Evaluation> {
        evaluate(&self.model, examples, self.config.train.batch_size, self.config.train.lambda)
    }

    /// Train one epoch and validate; returns the log and whether validation improved.
    pub fn run_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<(EpochLog, bool)> {
        let train_loss = self.train_epoch(train)?;
        let ev = self.evaluate(val)?;
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            train_loss,
            val_loss: ev.loss,
            val_si_snr: ev.mean_enhanced(),
            val_si_snr_noisy: ev.mean_noisy(),
        };
        let improved = self.best_val_si_snr.is_none_or(|b| log.val_si_snr > b);
        if improved {
            self.best_val_si_snr = Some(log.val_si_snr);
        }
        self.history.push(log.clone());
        Ok((log, improved))
    }
}

/// Loss and per-example SI-SNR of `model` on `examples`.
pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize, lambda: f64) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(&chunk.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let (est, mask) = model.estimate(&mut tape, &batch)?;
        let (_, report) = total_loss_tape(&mut tape, est, &batch.clean, mask, &batch.target_mask, lambda)?;
        loss += report.total * chunk.len() as f64;
        for (ex, e) in chunk.iter().zip(tape.value(est).data().chunks(batch.len)) {
            scores.push((si_snr(&ex.noisy_signal, &ex.clean)?, si_snr(e, &ex.clean)?));
        }
    }
    Ok(Evaluation { loss: loss / examples.len() as f64, si_snr: scores })
}

/// Loss curve as CSV, one row per epoch.
pub fn write_loss_curve(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "epoch,train_loss,val_loss,val_si_snr,val_si_snr_noisy,val_delta").map_err(io)?;
    for h in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            h.epoch,
            h.train_loss,
            h.val_loss,
            h.val_si_snr,
            h.val_si_snr_noisy,
            h.val_si_snr - h.val_si_snr_noisy
        )
        .map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}
