use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spiking_s4::data::{mix, AudioClip, Manifest, Record, Split};
use spiking_s4::dsp::{Stft, StftConfig};
use spiking_s4::model::{ideal_mask, Model, ModelConfig};
use spiking_s4::objective::si_snr;
use spiking_s4::snn::{lif_sequence, LifParams};
use spiking_s4::ssm::{apply_convolution_mode, apply_recurrent_mode, SsmChannel};

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn energetic(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssm_is_linear(seed in 0u64..1000, u in signal(40), w in signal(40), a in -3.0f64..3.0) {
        let ch = SsmChannel::init(6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().discretize().unwrap();
        let mixed: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + y).collect();
        let lhs = apply_convolution_mode(&ch, &mixed).unwrap();
        let yu = apply_convolution_mode(&ch, &u).unwrap();
        let yw = apply_convolution_mode(&ch, &w).unwrap();
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * yu[i] + yw[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn ssm_is_causal(seed in 0u64..1000, u in signal(32), cut in 1usize..31) {
        let ch = SsmChannel::init(4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().discretize().unwrap();
        let full = apply_recurrent_mode(&ch, &u).unwrap();
        let mut changed = u.clone();
        changed[cut..].iter_mut().for_each(|x| *x += 1.0);
        let other = apply_recurrent_mode(&ch, &changed).unwrap();
        prop_assert_eq!(&full[..cut], &other[..cut]);
    }

    #[test]
    fn spikes_are_binary(inputs in prop::collection::vec(-2.0f64..4.0, 1..120), tau in -3.0f64..3.0) {
        let p = LifParams { tau_raw: tau, ..LifParams::default() };
        let s = lif_sequence(&p, &inputs, 1).unwrap();
        prop_assert!(s.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn si_snr_ignores_gain(s in signal(64), n in signal(64), g in 0.01f64..100.0) {
        prop_assume!(energetic(&s));
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + 0.3 * b).collect();
        prop_assume!(energetic(&est));
        let scaled: Vec<f64> = est.iter().map(|x| g * x).collect();
        let d = si_snr(&scaled, &s).unwrap() - si_snr(&est, &s).unwrap();
        prop_assert!(d.abs() < 1e-9);
    }

    #[test]
    fn ideal_mask_is_bounded(c in prop::collection::vec(0.0f64..5.0, 20), n in prop::collection::vec(0.0f64..5.0, 20)) {
        let m = ideal_mask(&c, &n).unwrap();
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stft_round_trips_any_length(len in 32usize..400, seed in 0u64..100) {
        let stft = Stft::new(StftConfig { window_length: 32, hop_length: 16, ..StftConfig::default() }).unwrap();
        let x: Vec<f64> = (0..len).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f64 / 997.0 - 0.5).collect();
        let y = stft.istft(&stft.stft(&x).unwrap(), len).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mix_hits_the_requested_snr(c in signal(200), n in signal(150), snr in 0.0f64..10.0) {
        prop_assume!(energetic(&c) && energetic(&n));
        let t = mix(&AudioClip::new(c, 16000), &AudioClip::new(n, 16000), snr).unwrap();
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let got = 10.0 * (e(&t.clean.samples) / e(&t.noise.samples)).log10();
        prop_assert!((got - snr).abs() < 1e-9);
        prop_assert!(t.noisy.samples.iter().all(|x| x.abs() <= 0.99 + 1e-12));
    }

    #[test]
    fn manifest_text_round_trips(durs in prop::collection::vec(0.01f64..30.0, 1..12)) {
        let records: Vec<Record> = durs
            .iter()
            .enumerate()
            .map(|(i, d)| Record {
                id: format!("item-{i:04}"),
                clean: format!("clean/{i}.wav").into(),
                noise: format!("noise/{i}.wav").into(),
                noisy: format!("noisy/{i}.wav").into(),
                duration: *d,
                split: [Split::Train, Split::Val, Split::Test][i % 3],
            })
            .collect();
        let m = Manifest::new(records).unwrap();
        let back = Manifest::parse(&m.to_text(), Path::new("m.tsv")).unwrap();
        // durations are written with microsecond precision
        for (a, b) in back.records.iter().zip(&m.records) {
            prop_assert!((a.duration - b.duration).abs() <= 5e-7);
            prop_assert_eq!(Record { duration: b.duration, ..a.clone() }, b.clone());
        }
        prop_assert_eq!(back.records.len(), m.records.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predicted_mask_stays_in_unit_interval(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 60)) {
        let cfg = ModelConfig { n_layers: 2, hidden_size: 3, latent_size: 4, window_length: 8, hop_length: 4, ..ModelConfig::default() };
        let model = Model::new(cfg, seed).unwrap();
        let (out, mask) = model.enhance(&x).unwrap();
        prop_assert_eq!(out.len(), x.len());
        prop_assert!(mask.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
