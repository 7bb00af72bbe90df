//! Training losses and the SI-SNR metric.

use std::f64::consts::LN_10;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Floor applied to the projection denominator and both energies.
pub const SI_SNR_EPS: f64 = 1e-8;
pub const DEFAULT_LAMBDA: f64 = 0.001;

const DB: f64 = 10.0 / LN_10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::dim(
            "si_snr",
            format!("estimate has {} samples, reference {}", estimate.len(), reference.len()),
        ));
    }
    if reference.iter().all(|&x| x == 0.0) {
        return Err(Error::Input("SI-SNR reference is silent".into()));
    }
    Ok(())
}

/// SI-SNR value in dB and its gradient with respect to the estimate.
fn si_snr_with_grad(estimate: &[f64], reference: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    let s_energy = dot(reference, reference).max(SI_SNR_EPS);
    let d = dot(estimate, reference);
    let alpha = d / s_energy;
    let e: Vec<f64> = estimate.iter().zip(reference).map(|(x, s)| x - alpha * s).collect();
    let p = alpha * alpha * dot(reference, reference);
    let en = dot(&e, &e);
    let value = DB * (p.max(SI_SNR_EPS).ln() - en.max(SI_SNR_EPS).ln());
    if !want_grad {
        return (value, Vec::new());
    }
    let p_coef = if p > SI_SNR_EPS { 2.0 * alpha * dot(reference, reference) / s_energy / p } else { 0.0 };
    let (e_coef, e_proj) = if en > SI_SNR_EPS {
        (2.0 / en, 2.0 * dot(&e, reference) / s_energy / en)
    } else {
        (0.0, 0.0)
    };
    let grad = e
        .iter()
        .zip(reference)
        .map(|(ei, si)| DB * (p_coef * si - (e_coef * ei - e_proj * si)))
        .collect();
    (value, grad)
}

/// Scale-invariant signal-to-noise ratio of `estimate` against `reference`, in dB.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(estimate, reference)?;
    Ok(si_snr_with_grad(estimate, reference, false).0)
}

struct SiSnrOp {
    reference: Tensor,
}

impl CustomOp for SiSnrOp {
    fn name(&self) -> &'static str {
        "si_snr"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let n = inputs[0].shape()[1];
        let mut g = Vec::with_capacity(inputs[0].numel());
        for ((est, r), gy) in inputs[0]
            .data()
            .chunks(n)
            .zip(self.reference.data().chunks(n))
            .zip(grad.data())
        {
            g.extend(si_snr_with_grad(est, r, true).1.into_iter().map(|v| v * gy));
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), g)?)])
    }
}

/// Per-row SI-SNR of `estimate[B, L]` against constant `reference[B, L]`; returns `[B]`.
pub fn si_snr_tape(tape: &mut Tape, estimate: Var, reference: &Tensor) -> Result<Var> {
    let shape = tape.value(estimate).shape().to_vec();
    if shape.len() != 2 || shape != reference.shape() {
        return Err(Error::dim("si_snr", format!("estimate {shape:?} vs reference {:?}", reference.shape())));
    }
    let n = shape[1];
    let mut out = Vec::with_capacity(shape[0]);
    for (est, r) in tape.value(estimate).data().chunks(n).zip(reference.data().chunks(n)) {
        out.push(si_snr(est, r)?);
    }
    let op = SiSnrOp { reference: reference.clone() };
    Ok(tape.custom(&[estimate], Tensor::vector(out), Box::new(op)))
}

/// Mean of `(target − predicted)²` over all entries.
pub fn mask_mse(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::dim("mask_mse", format!("{} vs {} entries", predicted.len(), target.len())));
    }
    Ok(predicted.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / predicted.len() as f64)
}

pub fn mask_mse_tape(tape: &mut Tape, predicted: Var, target: &Tensor) -> Result<Var> {
    if tape.value(predicted).shape() != target.shape() {
        return Err(Error::dim(
            "mask_mse",
            format!("{:?} vs {:?}", tape.value(predicted).shape(), target.shape()),
        ));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(predicted, t)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Negative batch-mean SI-SNR.
    pub si_snr_loss: f64,
    pub mask_mse: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(si_snr_loss: f64, mask_mse: f64, lambda: f64) -> Self {
        Self { si_snr_loss, mask_mse, lambda, total: si_snr_loss + lambda * mask_mse }
    }
}

/// Plain single-utterance loss.
pub fn total_loss(estimate: &[f64], reference: &[f64], predicted: &[f64], target: &[f64], lambda: f64) -> Result<LossReport> {
    Ok(LossReport::new(-si_snr(estimate, reference)?, mask_mse(predicted, target)?, lambda))
}

/// Batch loss on the tape: `−mean(si_snr) + λ·mask_mse`. Returns the scalar
/// loss node together with its numeric breakdown.
pub fn total_loss_tape(
    tape: &mut Tape,
    estimate: Var,
    reference: &Tensor,
    predicted: Var,
    target: &Tensor,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    let snr = si_snr_tape(tape, estimate, reference)?;
    let mean_snr = tape.mean(snr);
    let neg = tape.scale(mean_snr, -1.0);
    let mse = mask_mse_tape(tape, predicted, target)?;
    let weighted = tape.scale(mse, lambda);
    let total = tape.add(neg, weighted)?;
    let report = LossReport::new(tape.value(neg).item(), tape.value(mse).item(), lambda);
    Ok((total, report))
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub si_snr_noisy: f64,
    pub si_snr_enhanced: f64,
    pub delta: f64,
}

impl MetricRecord {
    pub fn new(id: impl Into<String>, si_snr_noisy: f64, si_snr_enhanced: f64) -> Self {
        Self { id: id.into(), si_snr_noisy, si_snr_enhanced, delta: si_snr_enhanced - si_snr_noisy }
    }
}

/// Mean of a report's columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean_si_snr_noisy: f64,
    pub mean_si_snr_enhanced: f64,
    pub mean_delta: f64,
    pub std_si_snr_enhanced: f64,
    pub std_delta: f64,
}

pub fn summarize(records: &[MetricRecord]) -> MetricSummary {
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    // population standard deviation
    let std = |f: fn(&MetricRecord) -> f64| {
        let m = mean(f);
        (records.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    MetricSummary {
        count: records.len(),
        mean_si_snr_noisy: mean(|r| r.si_snr_noisy),
        mean_si_snr_enhanced: mean(|r| r.si_snr_enhanced),
        mean_delta: mean(|r| r.delta),
        std_si_snr_enhanced: std(|r| r.si_snr_enhanced),
        std_delta: std(|r| r.delta),
    }
}

/// JSON lines, one record per utterance.
pub fn write_metrics<W: Write>(mut out: W, records: &[MetricRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<metrics>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("<metrics>", format!("line {}", i + 1), e.to_string()))?,
        );
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin() + 0.3 * (i as f64 * 2.7 * f).cos()).collect()
    }

    #[test]
    fn identical_and_scaled_estimates() {
        let s = signal(256, 0.1);
        let energy = dot(&s, &s);
        let cap = 10.0 * (energy / SI_SNR_EPS).log10();
        assert!((si_snr(&s, &s).unwrap() - cap).abs() < 1e-6);
        let two: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        assert!((si_snr(&two, &s).unwrap() - 10.0 * (4.0 * energy / SI_SNR_EPS).log10()).abs() < 1e-6);
    }

    #[test]
    fn silent_reference_and_zero_estimate() {
        assert!(matches!(si_snr(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::Input(_))));
        assert!(si_snr(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(si_snr(&[0.0, 0.0, 0.0], &[1.0, -1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mask_mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mask_mse(&[0.0; 6], &[1.0; 6]).unwrap(), 1.0);
        assert!(mask_mse(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn report_arithmetic() {
        let r = LossReport::new(-12.0, 0.5, DEFAULT_LAMBDA);
        assert_eq!(r.total, -12.0 + 0.0005);
        let s = signal(64, 0.2);
        let r = total_loss(&s, &s, &[0.5; 4], &[0.5; 4], 0.0).unwrap();
        assert_eq!(r.total, r.si_snr_loss);
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let (nb, n) = (2, 40);
        let refs: Vec<f64> = signal(nb * n, 0.13);
        let est: Vec<f64> = refs.iter().enumerate().map(|(i, x)| 0.7 * x + 0.4 * ((i * i) as f64).sin()).collect();
        let m_hat: Vec<f64> = (0..12).map(|i| 0.1 + 0.06 * i as f64).collect();
        let m: Vec<f64> = (0..12).map(|i| ((i * 5 % 7) as f64) / 7.0).collect();
        let rt = Tensor::new(vec![nb, n], refs).unwrap();
        let mt = Tensor::new(vec![3, 4], m).unwrap();
        let eval = |e: &[f64], p: &[f64]| {
            let mut tape = Tape::new();
            let ev = tape.constant(Tensor::new(vec![nb, n], e.to_vec()).unwrap());
            let pv = tape.constant(Tensor::new(vec![3, 4], p.to_vec()).unwrap());
            let (l, _) = total_loss_tape(&mut tape, ev, &rt, pv, &mt, 0.3).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let ev = tape.leaf(Tensor::new(vec![nb, n], est.clone()).unwrap(), true);
        let pv = tape.leaf(Tensor::new(vec![3, 4], m_hat.clone()).unwrap(), true);
        let (l, report) = total_loss_tape(&mut tape, ev, &rt, pv, &mt, 0.3).unwrap();
        assert!((report.total - tape.value(l).item()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let h = 1e-6;
        for (i, g) in tape.grad(ev).unwrap().data().iter().enumerate() {
            let (mut a, mut b) = (est.clone(), est.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (eval(&a, &m_hat) - eval(&b, &m_hat)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for (i, g) in tape.grad(pv).unwrap().data().iter().enumerate() {
            let (mut a, mut b) = (m_hat.clone(), m_hat.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (eval(&est, &a) - eval(&est, &b)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-7);
        }
    }

    #[test]
    fn metrics_round_trip() {
        let recs = vec![MetricRecord::new("a", 1.5, 4.0), MetricRecord::new("b", -2.0, 3.0)];
        assert_eq!(recs[1].delta, 5.0);
        let mut buf = Vec::new();
        write_metrics(&mut buf, &recs).unwrap();
        assert_eq!(read_metrics(&buf[..]).unwrap(), recs);
        let sm = summarize(&recs);
        assert_eq!(sm.mean_delta, 3.75);
        assert_eq!(sm.std_delta, 1.25);
        assert!(read_metrics(&b"{nope\n"[..]).is_err());
    }
}
