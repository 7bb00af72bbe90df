//! One PASS/FAIL line per acceptance criterion. Everything runs inside a
//! single test so the runtime budgets are measured without other tests
//! competing for the CPU.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spiking_s4::checkpoint::Checkpoint;
use spiking_s4::config::RunConfig;
use spiking_s4::data::{self, manifest, DatasetConfig, Manifest, Split};
use spiking_s4::dsp::{Stft, StftConfig};
use spiking_s4::model::{Batch, Example, Model, ModelConfig};
use spiking_s4::objective::si_snr;
use spiking_s4::profile::{cost_report, count_flops};
use spiking_s4::snn::{lif_step, LifParams, LifState};
use spiking_s4::ssm::ops::{ssm_kernel, ssm_scan};
use spiking_s4::ssm::{apply_convolution_mode, apply_recurrent_mode, hippo_init, SsmChannel};
use spiking_s4::tensor::{Tape, Tensor};
use spiking_s4::train::{load_examples, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = budget.map_or(true, |b| took < b);
    let pass = out.pass && in_time;
    let budget = budget.map(|b| format!(" (budget {:.0}s)", b.as_secs_f64())).unwrap_or_default();
    // straight to the handle: libtest only captures the print macros
    let _ = writeln!(
        std::io::stdout().lock(),
        "{} criterion {id} {name}: {} [{:.2}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale
}

/// Plain per-channel routes and the batched tape routes, checked separately.
fn mode_equivalence() -> Outcome {
    let (k, h, t) = (50, 8, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let channels: Vec<SsmChannel> = (0..k).map(|_| SsmChannel::init(h, &mut rng).unwrap()).collect();
    let inputs: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut rng, t)).collect();

    let mut plain = 0.0f64;
    for (ch, u) in channels.iter().zip(&inputs) {
        let d = ch.discretize().unwrap();
        let conv = apply_convolution_mode(&d, u).unwrap();
        let rec = apply_recurrent_mode(&d, u).unwrap();
        plain = plain.max(max_rel(&conv, &rec));
    }

    let mut tape = Tape::new();
    let a = Tensor::new(vec![h, h], hippo_init(h).unwrap().transpose().as_slice().to_vec()).unwrap();
    let b = tape.constant(Tensor::new(vec![k, h], channels.iter().flat_map(|c| c.b.iter().copied()).collect()).unwrap());
    let c = tape.constant(Tensor::new(vec![k, h], channels.iter().flat_map(|c| c.c.iter().copied()).collect()).unwrap());
    let dt = tape.constant(Tensor::vector(channels.iter().map(|c| c.log_dt).collect()));
    let mut u = vec![0.0; t * k];
    for (j, x) in inputs.iter().enumerate() {
        for (i, v) in x.iter().enumerate() {
            u[i * k + j] = *v;
        }
    }
    let uv = tape.constant(Tensor::new(vec![1, t, k], u).unwrap());
    let kern = ssm_kernel(&mut tape, &a, b, c, dt, t).unwrap();
    let conv = tape.conv_channels(uv, kern).unwrap();
    let rec = ssm_scan(&mut tape, &a, b, c, dt, uv).unwrap();
    let taped = max_rel(tape.value(conv).data(), tape.value(rec).data());

    Outcome {
        pass: plain < 1e-5 && taped < 1e-5,
        detail: format!("{k} channels H={h} T={t}: max rel err {plain:.2e} (per channel), {taped:.2e} (batched), limit 1e-5"),
    }
}

fn reconstruction() -> Outcome {
    let cfg = StftConfig::default();
    let stft = Stft::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = gaussian(&mut rng, 16000);
        let y = stft.istft(&stft.stft(&x).unwrap(), x.len()).unwrap();
        let w = cfg.window_length;
        worst = worst.max(max_rel(&y[w..x.len() - w], &x[w..x.len() - w]));
    }
    Outcome {
        pass: worst < 1e-8,
        detail: format!("20 signals, W={} hop={}: interior rel err {worst:.2e}, limit 1e-8", cfg.window_length, cfg.hop_length),
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_size: 3,
        latent_size: 4,
        window_length: 8,
        hop_length: 4,
        spike: "atan_smooth".into(),
        ..ModelConfig::default()
    }
}

fn toy_batch(model: &Model, len: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let exs: Vec<Example> = (0..2)
        .map(|j| {
            let clean: Vec<f64> = (0..len).map(|i| (0.3 * (j + 1) as f64 * i as f64).sin()).collect();
            let noisy: Vec<f64> = clean.iter().map(|c| c + 0.4 * rng.sample::<f64, _>(StandardNormal)).collect();
            Example::new(model.stft(), &noisy, &clean).unwrap()
        })
        .collect();
    Batch::from_examples(&exs.iter().collect::<Vec<_>>()).unwrap()
}

fn loss_value(model: &Model, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, batch, 0.001).unwrap();
    tape.value(loss).item()
}

fn gradient_oracle() -> Outcome {
    let cfg = toy_config();
    let len = 60;
    assert_eq!(cfg.stft().frames(len), 16);
    assert_eq!(cfg.bins(), 5);
    let mut model = Model::new(cfg, 9).unwrap();
    let batch = toy_batch(&model, len);

    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, &batch, 0.001).unwrap();
    tape.backward(loss).unwrap();
    model.params.zero_grads();
    model.params.accumulate(&tape).unwrap();

    let step = 1e-5;
    let names: Vec<String> = model.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let mut worst = (0.0f64, String::new());
    for name in &names {
        let analytic = model.params.get(name).unwrap().grad.data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let orig = model.params.get(name).unwrap().value.data()[j];
            model.params.get_mut(name).unwrap().value.data_mut()[j] = orig + step;
            let up = loss_value(&model, &batch);
            model.params.get_mut(name).unwrap().value.data_mut()[j] = orig - step;
            let down = loss_value(&model, &batch);
            model.params.get_mut(name).unwrap().value.data_mut()[j] = orig;
            *g = (up - down) / (2.0 * step);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
        if diff / norm >= worst.0 {
            worst = (diff / norm, name.clone());
        }
    }
    Outcome {
        pass: worst.0 < 1e-4,
        detail: format!(
            "{} trainable tensors, central differences: worst rel err {:.2e} ({}), limit 1e-4",
            names.len(),
            worst.0,
            worst.1
        ),
    }
}

fn orthogonal_to(rng: &mut ChaCha8Rng, s: &[f64]) -> Vec<f64> {
    let mut n = gaussian(rng, s.len());
    let proj = n.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / s.iter().map(|x| x * x).sum::<f64>();
    n.iter_mut().zip(s).for_each(|(a, b)| *a -= proj * b);
    n
}

fn si_snr_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut scale_err = 0.0f64;
    let mut zero_err = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let s = gaussian(&mut rng, 1000);
        let n = orthogonal_to(&mut rng, &s);
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + 0.5 * b).collect();
        let base = si_snr(&est, &s).unwrap();
        for g in [1e-3, 0.37, 2.0, 1e3] {
            let scaled: Vec<f64> = est.iter().map(|x| g * x).collect();
            scale_err = scale_err.max((si_snr(&scaled, &s).unwrap() - base).abs());
        }

        let ratio = (s.iter().map(|x| x * x).sum::<f64>() / n.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let equal: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + ratio * b).collect();
        zero_err = zero_err.max(si_snr(&equal, &s).unwrap().abs());

        let mut prev = f64::INFINITY;
        for step in 1..=10 {
            let eps = 0.1 * step as f64;
            let noisy: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + eps * b).collect();
            let v = si_snr(&noisy, &s).unwrap();
            monotone &= v < prev;
            prev = v;
        }
    }
    Outcome {
        pass: scale_err < 1e-9 && zero_err < 1e-6 && monotone,
        detail: format!(
            "100 trials: scale drift {scale_err:.1e} dB (limit 1e-9), equal-power orthogonal {zero_err:.1e} dB (limit 1e-6), monotone {monotone}"
        ),
    }
}

fn lif_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut binary, mut reset, mut dynamics, mut fixed) = (true, true, true, true);
    let mut spikes_seen = 0usize;
    for _ in 0..1000 {
        let v_reset = rng.gen_range(-0.5..0.2);
        let params = LifParams {
            v_threshold: rng.gen_range(0.5..2.0),
            v_reset,
            tau_raw: rng.gen_range(-2.0..2.0),
            ..LifParams::default()
        };
        let beta = 1.0 / (1.0 + (-params.tau_raw).exp());
        let width = rng.gen_range(1..6);
        let steps = rng.gen_range(1..40);
        let mut state = LifState::resting(&params, width);
        for _ in 0..steps {
            let o: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..3.0)).collect();
            let (s, next) = lif_step(&params, &state, &o).unwrap();
            for i in 0..width {
                let u = state.v[i] + beta * (o[i] - state.v[i] + params.v_reset);
                let expect = if u >= params.v_threshold { 1.0 } else { 0.0 };
                binary &= s[i] == 0.0 || s[i] == 1.0;
                dynamics &= s[i] == expect;
                if s[i] == 1.0 {
                    spikes_seen += 1;
                    reset &= next.v[i] == params.v_reset;
                } else {
                    dynamics &= (next.v[i] - u).abs() < 1e-12;
                }
            }
            state = next;
        }

        // constant drive whose fixed point O + V_reset sits below threshold
        let drive = rng.gen_range(0.0..1.0) * (params.v_threshold - params.v_reset) * 0.95;
        let mut st = LifState::resting(&params, 1);
        for _ in 0..steps.max(20) {
            let (s, next) = lif_step(&params, &st, &[drive]).unwrap();
            fixed &= s[0] == 0.0 && next.v[0] < params.v_threshold;
            st = next;
        }
    }
    // canonical example: drive 0.8, threshold 1, τ = 2
    let params = LifParams::default();
    let mut st = LifState::resting(&params, 1);
    for _ in 0..200 {
        let (s, next) = lif_step(&params, &st, &[0.8]).unwrap();
        fixed &= s[0] == 0.0;
        st = next;
    }
    fixed &= (st.v[0] - 0.8).abs() < 1e-12;
    Outcome {
        pass: binary && reset && dynamics && fixed && spikes_seen > 0,
        detail: format!(
            "1000 sequences ({spikes_seen} spikes): binary {binary}, exact reset {reset}, update rule {dynamics}, sub-threshold fixed point {fixed}"
        ),
    }
}

/// Latent width used for the desk-scale run. The full default model costs
/// about 45 minutes on one core; `desk_scale_training_default_width` runs it.
const DESK_HIDDEN: usize = 32;

fn desk_training(hidden: usize) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.hidden_size = hidden;
    cfg.dataset = DatasetConfig::default();
    let m = data::generate_dataset(&cfg.dataset, cfg.seed, dir.path()).unwrap();
    let m = Manifest::read(&m.root.join(manifest::FILE_NAME)).unwrap();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let stft = trainer.model.stft().clone();
    let train: Vec<Example> = load_examples(&m, Split::Train, &stft).unwrap().into_iter().map(|e| e.1).collect();
    let val: Vec<Example> = load_examples(&m, Split::Val, &stft).unwrap().into_iter().map(|e| e.1).collect();
    let mut last = None;
    while trainer.epoch < cfg.train.epochs {
        last = Some(trainer.run_epoch(&train, &val).unwrap().0);
    }
    let log = last.unwrap();
    let gain = log.val_si_snr - log.val_si_snr_noisy;
    Outcome {
        pass: gain >= 3.0,
        detail: format!(
            "{}/{} clips, H={hidden}, {} epochs, lr {}, λ {}: val SI-SNR {:.2} dB vs noisy {:.2} dB, gain {gain:.2} dB (need ≥ 3)",
            train.len(),
            val.len(),
            cfg.train.epochs,
            cfg.optim.lr,
            cfg.train.lambda,
            log.val_si_snr,
            log.val_si_snr_noisy
        ),
    }
}

fn cost_accounting() -> Outcome {
    let toy = toy_config();
    let (f, k, h, n) = (toy.bins(), toy.latent_size, toy.hidden_size, toy.n_layers);
    let layer = 2 * k * h + k + (k * k + k) + 1 + (k * k + k);
    let closed = (f * k + k) + n * layer + (k * f + f);
    let model = Model::new(toy.clone(), 0).unwrap();
    let counted = cost_report(&model, 16, None).unwrap();
    let frozen_a = n * h * h;

    let mut ratios = Vec::new();
    let ratio = |cfg: &ModelConfig, t: usize| {
        let one: u64 = count_flops(cfg, t).iter().map(|x| x.1).sum();
        let two: u64 = count_flops(cfg, 2 * t).iter().map(|x| x.1).sum();
        two as f64 / one as f64
    };
    // tiny models are dominated by the T·log T FFT term; reported, not banded
    let toy_ratio = ratio(&toy, 16);
    for cfg in [ModelConfig::default(), ModelConfig { mode: "recurrent".into(), ..ModelConfig::default() }] {
        for t in [63usize, 250] {
            ratios.push((format!("{} T={t}", cfg.mode), ratio(&cfg, t)));
        }
    }
    let outside: Vec<String> =
        ratios.iter().filter(|r| !(r.1 > 1.9 && r.1 < 2.2)).map(|r| format!("{} {:.3}", r.0, r.1)).collect();
    let in_band = outside.is_empty();

    let default = Model::new(ModelConfig::default(), 0).unwrap();
    let report = cost_report(&default, 63, None).unwrap();
    let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, h), r| (l.min(r.1), h.max(r.1)));
    Outcome {
        pass: counted.total_params() == closed && model.params.frozen_count() == frozen_a && in_band,
        detail: format!(
            "toy params {} vs closed form {closed}, frozen A {}; 2T/T flops ratios in [{lo:.3}, {hi:.3}] (band 1.9..2.2, outside {outside:?}), toy {toy_ratio:.3}; \
             default: {:.3}M params, {:.3e} flops per 1 s sample (reference 0.53M, 1.50e9)",
            counted.total_params(),
            model.params.frozen_count(),
            report.total_params() as f64 / 1e6,
            report.total_flops() as f64
        ),
    }
}

fn small_run() -> (RunConfig, Vec<Example>, Vec<Example>) {
    let mut cfg = RunConfig::default();
    cfg.model.n_layers = 1;
    cfg.model.hidden_size = 4;
    cfg.model.latent_size = 8;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 4;
    cfg.dataset = DatasetConfig { train_count: 10, val_count: 4, ..DatasetConfig::default() };
    let stft = Stft::new(cfg.model.stft()).unwrap();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..cfg.dataset.total() {
        let t = data::synthesize(&cfg.dataset, cfg.seed, i).unwrap();
        let ex = Example::new(&stft, &t.noisy.samples, &t.clean.samples).unwrap();
        match cfg.dataset.item(i).0 {
            Split::Train => train.push(ex),
            _ => val.push(ex),
        }
    }
    (cfg, train, val)
}

fn determinism() -> Outcome {
    let (cfg, train, val) = small_run();
    let full = |cfg: &RunConfig| {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        while t.epoch < cfg.train.epochs {
            t.run_epoch(&train, &val).unwrap();
        }
        t.checkpoint().to_bytes()
    };
    let a = full(&cfg);
    let b = full(&cfg);

    let mut t = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..2 {
        t.run_epoch(&train, &val).unwrap();
    }
    let saved = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
    drop(t);
    let mut r = Trainer::resume(cfg.clone(), saved).unwrap();
    while r.epoch < cfg.train.epochs {
        r.run_epoch(&train, &val).unwrap();
    }
    let resumed = r.checkpoint().to_bytes();
    Outcome {
        pass: a == b && a == resumed,
        detail: format!(
            "{} epochs: repeated runs identical {}, resume after epoch 2 identical {} ({} byte checkpoints)",
            cfg.train.epochs,
            a == b,
            a == resumed,
            a.len()
        ),
    }
}

#[test]
fn acceptance() {
    let results = [
        check(1, "mode equivalence", Some(Duration::from_secs(10)), mode_equivalence),
        check(2, "stft reconstruction", Some(Duration::from_secs(5)), reconstruction),
        check(3, "gradient oracle", Some(Duration::from_secs(60)), gradient_oracle),
        check(4, "si-snr properties", None, si_snr_properties),
        check(5, "lif contract", None, lif_contract),
        check(6, "desk-scale training", Some(Duration::from_secs(30 * 60)), || desk_training(DESK_HIDDEN)),
        check(7, "cost accounting", None, cost_accounting),
        check(8, "determinism", None, determinism),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|r| !r.1).map(|r| r.0 + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
#[ignore = "about 45 minutes on one core"]
fn desk_scale_training_default_width() {
    assert!(check(6, "desk-scale training (default width)", None, || desk_training(ModelConfig::default().hidden_size)));
}
