//! Differentiable SSM bank operations.
//!
//! A bank holds `K` independent channels sharing one frozen lower-triangular
//! state matrix `A[H, H]`, with trainable `B[K, H]`, `C[K, H]` and
//! `log_dt[K]`. Gradients with respect to `A` are not produced.
//!
//! Both backward passes use the adjoint recursion `w_i = C·g_i + Āᵀ·w_{i+1}`
//! together with `∂Ā/∂Δ = M⁻¹(A/2)(I + Ā)` and `∂B̄/∂Δ = M⁻¹(B + (A/2)B̄)`
//! where `M = I − (Δ/2)A`, so every step costs a few triangular products.

use std::sync::Arc;

use rayon::prelude::*;

use super::tri::{self, dot};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy)]
struct Dims {
    k: usize,
    h: usize,
}

fn check_bank(tape: &Tape, a: &Tensor, b: Var, c: Var, log_dt: Var) -> Result<Dims> {
    let (sa, sb, sc, sd) = (
        a.shape(),
        tape.value(b).shape(),
        tape.value(c).shape(),
        tape.value(log_dt).shape(),
    );
    let ok = sa.len() == 2
        && sa[0] == sa[1]
        && sb.len() == 2
        && sb == sc
        && sb[1] == sa[0]
        && sd == [sb[0]];
    if !ok {
        return Err(Error::dim(
            "ssm bank",
            format!("A {sa:?}, B {sb:?}, C {sc:?}, log_dt {sd:?}"),
        ));
    }
    let h = sa[0];
    if !tri::is_lower_triangular(a.data(), h) {
        return Err(Error::Contract("SSM bank requires a lower-triangular state matrix".into()));
    }
    Ok(Dims { k: sb[0], h })
}

/// Per-channel scratch shared by the forward and backward passes.
struct Channel<'a> {
    a: &'a [f64],
    h: usize,
    dt: f64,
    b: &'a [f64],
    c: &'a [f64],
}

impl Channel<'_> {
    fn half(&self) -> f64 {
        self.dt / 2.0
    }

    fn b_bar(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.b.iter().map(|x| x * self.dt).collect();
        tri::m_solve(self.a, self.h, self.half(), &mut v);
        v
    }

    /// `(A/2)·x` added into nothing; returns a fresh vector.
    fn half_a(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.h];
        tri::lower_matvec(self.a, self.h, x, &mut out);
        out.iter_mut().for_each(|v| *v *= 0.5);
        out
    }

    /// Contribution of `gB̄` to `dL/dΔ` and `dL/dB`.
    fn b_bar_grads(&self, g_bbar: &[f64], b_bar: &[f64]) -> (f64, Vec<f64>) {
        let mut z = g_bbar.to_vec();
        tri::mt_solve(self.a, self.h, self.half(), &mut z);
        let hb = self.half_a(b_bar);
        let d: Vec<f64> = self.b.iter().zip(&hb).map(|(b, x)| b + x).collect();
        let g_dt = dot(&z, &d);
        let g_b = z.iter().map(|v| v * self.dt).collect();
        (g_dt, g_b)
    }
}

fn row(x: &[f64], i: usize, h: usize) -> &[f64] {
    &x[i * h..(i + 1) * h]
}

// ---- convolution kernel ------------------------------------------------------

struct KernelChannel {
    b_bar: Vec<f64>,
    /// `v_i = Āⁱ·B̄`, `len × H`.
    states: Vec<f64>,
    taps: Vec<f64>,
}

fn kernel_channel(ch: &Channel, len: usize) -> Result<KernelChannel> {
    let h = ch.h;
    let b_bar = ch.b_bar();
    let mut states = vec![0.0; len * h];
    let mut taps = vec![0.0; len];
    let mut v = b_bar.clone();
    let mut scratch = vec![0.0; h];
    for i in 0..len {
        if i > 0 {
            tri::transition(ch.a, h, ch.half(), &mut v, &mut scratch);
        }
        taps[i] = dot(ch.c, &v);
        if !taps[i].is_finite() {
            return Err(Error::Numerical(format!("kernel tap {i} is not finite (Δ = {:e})", ch.dt)));
        }
        states[i * h..(i + 1) * h].copy_from_slice(&v);
    }
    Ok(KernelChannel { b_bar, states, taps })
}

struct KernelOp {
    a: Arc<Vec<f64>>,
    dims: Dims,
    len: usize,
    channels: Vec<KernelChannel>,
}

/// Materialize the convolution kernel of every channel: `[len, K]` taps with
/// `taps[i, k] = C_k·Ā_kⁱ·B̄_k`.
pub fn ssm_kernel(tape: &mut Tape, a: &Tensor, b: Var, c: Var, log_dt: Var, len: usize) -> Result<Var> {
    let dims = check_bank(tape, a, b, c, log_dt)?;
    if len == 0 {
        return Err(Error::Input("kernel length must be at least 1".into()));
    }
    let Dims { k, h } = dims;
    let (bv, cv, dv) = (tape.value(b).data(), tape.value(c).data(), tape.value(log_dt).data());
    let channels: Vec<KernelChannel> = (0..k)
        .into_par_iter()
        .map(|j| {
            let ch = Channel { a: a.data(), h, dt: dv[j].exp(), b: row(bv, j, h), c: row(cv, j, h) };
            kernel_channel(&ch, len)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; len * k];
    for (j, ch) in channels.iter().enumerate() {
        for (i, t) in ch.taps.iter().enumerate() {
            out[i * k + j] = *t;
        }
    }
    let op = KernelOp { a: Arc::new(a.data().to_vec()), dims, len, channels };
    Ok(tape.custom(&[b, c, log_dt], Tensor::new(vec![len, k], out)?, Box::new(op)))
}

impl CustomOp for KernelOp {
    fn name(&self) -> &'static str {
        "ssm_kernel"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let Dims { k, h } = self.dims;
        let (bv, cv, dv) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let g = grad.data();
        let per_channel: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..k)
            .into_par_iter()
            .map(|j| {
                let ch = Channel { a: &self.a, h, dt: dv[j].exp(), b: row(bv, j, h), c: row(cv, j, h) };
                let kc = &self.channels[j];
                let s = ch.half();
                let mut g_c = vec![0.0; h];
                let mut g_dt = 0.0;
                let mut w = vec![0.0; h];
                let mut z = vec![0.0; h];
                let mut have_z = false;
                for i in (0..self.len).rev() {
                    let gi = g[i * k + j];
                    let v = row(&kc.states, i, h);
                    for (gc, vi) in g_c.iter_mut().zip(v) {
                        *gc += gi * vi;
                    }
                    // w_i = C·g_i + Pᵀ·z_{i+1}
                    if have_z {
                        tri::pt_matvec(&self.a, h, s, &z, &mut w);
                    } else {
                        w.iter_mut().for_each(|x| *x = 0.0);
                    }
                    for (wi, ci) in w.iter_mut().zip(ch.c) {
                        *wi += gi * ci;
                    }
                    if i == 0 {
                        break;
                    }
                    z.copy_from_slice(&w);
                    tri::mt_solve(&self.a, h, s, &mut z);
                    have_z = true;
                    let sum: Vec<f64> = row(&kc.states, i - 1, h).iter().zip(v).map(|(p, q)| p + q).collect();
                    g_dt += dot(&z, &ch.half_a(&sum));
                }
                // w now holds dL/dB̄
                let (gd, g_b) = ch.b_bar_grads(&w, &kc.b_bar);
                g_dt += gd;
                (g_b, g_c, g_dt * ch.dt)
            })
            .collect();
        let mut gb = Vec::with_capacity(k * h);
        let mut gc = Vec::with_capacity(k * h);
        let mut gd = Vec::with_capacity(k);
        for (b, c, d) in per_channel {
            gb.extend(b);
            gc.extend(c);
            gd.push(d);
        }
        Ok(vec![
            Some(Tensor::new(vec![k, h], gb)?),
            Some(Tensor::new(vec![k, h], gc)?),
            Some(Tensor::new(vec![k], gd)?),
        ])
    }
}

// ---- recurrent scan ------------------------------------------------------------

struct ScanOp {
    a: Arc<Vec<f64>>,
    dims: Dims,
    batch: usize,
    steps: usize,
    /// Per channel: `B̄` and the states `x_t` for every batch item, `[B, T, H]`.
    channels: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Step the recurrence `x_t = Ā·x_{t−1} + B̄·u_t`, `y_t = C·x_t` for every
/// channel: `u[B, T, K] → y[B, T, K]`.
pub fn ssm_scan(tape: &mut Tape, a: &Tensor, b: Var, c: Var, log_dt: Var, u: Var) -> Result<Var> {
    let dims = check_bank(tape, a, b, c, log_dt)?;
    let su = tape.value(u).shape().to_vec();
    if su.len() != 3 || su[2] != dims.k {
        return Err(Error::dim("ssm_scan", format!("input {su:?} for a bank of {} channels", dims.k)));
    }
    let (nb, nt) = (su[0], su[1]);
    let Dims { k, h } = dims;
    let (bv, cv, dv, uv) = (
        tape.value(b).data(),
        tape.value(c).data(),
        tape.value(log_dt).data(),
        tape.value(u).data(),
    );
    let channels: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let ch = Channel { a: a.data(), h, dt: dv[j].exp(), b: row(bv, j, h), c: row(cv, j, h) };
            let b_bar = ch.b_bar();
            let mut states = vec![0.0; nb * nt * h];
            let mut ys = vec![0.0; nb * nt];
            let mut scratch = vec![0.0; h];
            for bi in 0..nb {
                let mut x = vec![0.0; h];
                for t in 0..nt {
                    let ut = uv[(bi * nt + t) * k + j];
                    tri::transition(ch.a, h, ch.half(), &mut x, &mut scratch);
                    for (xi, bb) in x.iter_mut().zip(&b_bar) {
                        *xi += bb * ut;
                    }
                    ys[bi * nt + t] = dot(ch.c, &x);
                    states[(bi * nt + t) * h..(bi * nt + t + 1) * h].copy_from_slice(&x);
                }
            }
            (b_bar, states, ys)
        })
        .collect();
    let mut out = vec![0.0; nb * nt * k];
    let mut saved = Vec::with_capacity(k);
    for (j, (b_bar, states, ys)) in channels.into_iter().enumerate() {
        for (n, y) in ys.iter().enumerate() {
            out[n * k + j] = *y;
        }
        saved.push((b_bar, states));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("recurrent scan produced non-finite output".into()));
    }
    let op = ScanOp { a: Arc::new(a.data().to_vec()), dims, batch: nb, steps: nt, channels: saved };
    Ok(tape.custom(&[u, b, c, log_dt], Tensor::new(su, out)?, Box::new(op)))
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "ssm_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let Dims { k, h } = self.dims;
        let (nb, nt) = (self.batch, self.steps);
        let (uv, bv, cv, dv) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let g = grad.data();
        let per_channel: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> = (0..k)
            .into_par_iter()
            .map(|j| {
                let ch = Channel { a: &self.a, h, dt: dv[j].exp(), b: row(bv, j, h), c: row(cv, j, h) };
                let s = ch.half();
                let (b_bar, states) = &self.channels[j];
                let mut g_u = vec![0.0; nb * nt];
                let mut g_c = vec![0.0; h];
                let mut g_bbar = vec![0.0; h];
                let mut g_dt = 0.0;
                let mut lam = vec![0.0; h];
                let mut z = vec![0.0; h];
                for bi in 0..nb {
                    let mut have_z = false;
                    for t in (0..nt).rev() {
                        let n = bi * nt + t;
                        let gy = g[n * k + j];
                        let ut = uv[n * k + j];
                        let x = row(states, n, h);
                        // λ_t = C·gy_t + Pᵀ·z_{t+1}
                        if have_z {
                            tri::pt_matvec(&self.a, h, s, &z, &mut lam);
                        } else {
                            lam.iter_mut().for_each(|v| *v = 0.0);
                        }
                        for (l, ci) in lam.iter_mut().zip(ch.c) {
                            *l += gy * ci;
                        }
                        g_u[n] = dot(b_bar, &lam);
                        for ((gc, gbb), (xi, li)) in g_c.iter_mut().zip(g_bbar.iter_mut()).zip(x.iter().zip(&lam)) {
                            *gc += gy * xi;
                            *gbb += ut * li;
                        }
                        z.copy_from_slice(&lam);
                        tri::mt_solve(&self.a, h, s, &mut z);
                        have_z = true;
                        if t > 0 {
                            // x_{t−1} + Ā·x_{t−1} = x_{t−1} + x_t − B̄·u_t
                            let prev = row(states, n - 1, h);
                            let sum: Vec<f64> = prev
                                .iter()
                                .zip(x)
                                .zip(b_bar)
                                .map(|((p, q), bb)| p + q - bb * ut)
                                .collect();
                            g_dt += dot(&z, &ch.half_a(&sum));
                        }
                    }
                }
                let (gd, g_b) = ch.b_bar_grads(&g_bbar, b_bar);
                (g_u, g_b, g_c, (g_dt + gd) * ch.dt)
            })
            .collect();
        let mut gu = vec![0.0; nb * nt * k];
        let mut gb = Vec::with_capacity(k * h);
        let mut gc = Vec::with_capacity(k * h);
        let mut gd = Vec::with_capacity(k);
        for (j, (u, b, c, d)) in per_channel.into_iter().enumerate() {
            for (n, v) in u.into_iter().enumerate() {
                gu[n * k + j] = v;
            }
            gb.extend(b);
            gc.extend(c);
            gd.push(d);
        }
        Ok(vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), gu)?),
            Some(Tensor::new(vec![k, h], gb)?),
            Some(Tensor::new(vec![k, h], gc)?),
            Some(Tensor::new(vec![k], gd)?),
        ])
    }
}
