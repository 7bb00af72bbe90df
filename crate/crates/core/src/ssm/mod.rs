//! Structured state-space channels: HiPPO initialization, bilinear
//! discretization, recurrent stepping and convolution-kernel materialization.
//!
//! Each channel is a single-input single-output system
//! `x' = A·x + B·u, y = C·x` (no skip term). The plain-data functions here
//! operate on `nalgebra` matrices; the differentiable versions used by the
//! model live in [`ops`] and are selected through [`mixer`].

pub mod mixer;
pub mod ops;
pub(crate) mod tri;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::causal_convolve;

/// Range of the initial step size Δ, sampled log-uniformly per channel.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// HiPPO-LegS state matrix:
/// `A[n,k] = −√(2n+1)·√(2k+1)` for `n > k`, `−(n+1)` on the diagonal, 0 above.
pub fn hippo_init(h: usize) -> Result<DMatrix<f64>> {
    if h == 0 {
        return Err(Error::Config("state size must be at least 1".into()));
    }
    Ok(DMatrix::from_fn(h, h, |n, k| match n.cmp(&k) {
        std::cmp::Ordering::Greater => -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt(),
        std::cmp::Ordering::Equal => -((n + 1) as f64),
        std::cmp::Ordering::Less => 0.0,
    }))
}

/// HiPPO-LegS input vector `B[n] = √(2n+1)`.
pub fn hippo_input(h: usize) -> DVector<f64> {
    DVector::from_fn(h, |n, _| ((2 * n + 1) as f64).sqrt())
}

/// Continuous-time parameters of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmChannel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub log_dt: f64,
}

impl SsmChannel {
    /// HiPPO `A` and `B`, `C ~ N(0, 1)/√H`, `log Δ ~ U[log 1e-3, log 1e-1]`.
    pub fn init<R: Rng + ?Sized>(h: usize, rng: &mut R) -> Result<Self> {
        let a = hippo_init(h)?;
        let b = hippo_input(h);
        let scale = 1.0 / (h as f64).sqrt();
        let c = DVector::from_fn(h, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale);
        let log_dt = rng.gen_range(DT_MIN.ln()..DT_MAX.ln());
        Ok(Self { a, b, c, log_dt })
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    pub fn state_size(&self) -> usize {
        self.b.len()
    }

    pub fn discretize(&self) -> Result<DiscreteSsm> {
        discretize_bilinear(&self.a, &self.b, &self.c, self.dt())
    }
}

/// Discrete-time system `x_k = Ā·x_{k−1} + B̄·u_k`, `y_k = C̄·x_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c_bar: DVector<f64>,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.b_bar.len()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a_bar
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Bilinear (Tustin) transform:
/// `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹·Δ·B`, `C̄ = C`.
pub fn discretize_bilinear(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, dt: f64) -> Result<DiscreteSsm> {
    let h = a.nrows();
    if a.ncols() != h || b.len() != h || c.len() != h {
        return Err(Error::dim(
            "discretize_bilinear",
            format!("A {}×{}, B {}, C {}", a.nrows(), a.ncols(), b.len(), c.len()),
        ));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Numerical(format!("step size must be positive and finite, got {dt}")));
    }
    let eye = DMatrix::<f64>::identity(h, h);
    let m = &eye - a * (dt / 2.0);
    let p = &eye + a * (dt / 2.0);
    let sv = m.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Numerical(format!(
            "(I − Δ/2·A) is singular at Δ = {dt:e} (condition estimate {cond:e})"
        )));
    }
    let lu = m.lu();
    let a_bar = lu.solve(&p).ok_or_else(|| Error::Numerical("LU solve failed".into()))?;
    let b_bar = lu.solve(&(b * dt)).ok_or_else(|| Error::Numerical("LU solve failed".into()))?;
    Ok(DiscreteSsm { a_bar, b_bar, c_bar: c.clone() })
}

/// One step of the recurrence; returns `(x_k, y_k)`.
pub fn recurrent_step(ssm: &DiscreteSsm, x_prev: &DVector<f64>, u: f64) -> Result<(DVector<f64>, f64)> {
    if x_prev.len() != ssm.state_size() {
        return Err(Error::dim(
            "recurrent_step",
            format!("state of size {} for a {}-state system", x_prev.len(), ssm.state_size()),
        ));
    }
    let x = &ssm.a_bar * x_prev + &ssm.b_bar * u;
    let y = ssm.c_bar.dot(&x);
    Ok((x, y))
}

/// Run the recurrence over a whole sequence from a zero state.
pub fn apply_recurrent_mode(ssm: &DiscreteSsm, u: &[f64]) -> Result<Vec<f64>> {
    let mut x = DVector::zeros(ssm.state_size());
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        let (next, yk) = recurrent_step(ssm, &x, uk)?;
        x = next;
        y.push(yk);
    }
    Ok(y)
}

/// Convolution taps `K̄_0 … K̄_{L−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub taps: Vec<f64>,
}

impl SsmKernel {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// `taps[i] = C̄·Āⁱ·B̄`, the impulse response of the recurrence, computed by
/// propagating `v ← Ā·v` from `v = B̄`.
pub fn materialize_kernel(ssm: &DiscreteSsm, len: usize) -> Result<SsmKernel> {
    if len == 0 {
        return Err(Error::Input("kernel length must be at least 1".into()));
    }
    let mut v = ssm.b_bar.clone();
    let mut taps = Vec::with_capacity(len);
    for i in 0..len {
        let tap = ssm.c_bar.dot(&v);
        if !tap.is_finite() {
            return Err(Error::Numerical(format!("kernel tap {i} is not finite (unstable Ā?)")));
        }
        taps.push(tap);
        v = &ssm.a_bar * v;
    }
    Ok(SsmKernel { taps })
}

/// All timesteps at once: `y = K̄ * u` through the FFT.
pub fn apply_convolution_mode(ssm: &DiscreteSsm, u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::Input("sequence must contain at least one step".into()));
    }
    let kernel = materialize_kernel(ssm, u.len())?;
    Ok(causal_convolve(u, &kernel.taps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn hippo_small_cases() {
        assert_eq!(hippo_init(1).unwrap(), scalar(-1.0));
        let h2 = hippo_init(2).unwrap();
        assert_eq!(h2[(0, 0)], -1.0);
        assert_eq!(h2[(0, 1)], 0.0);
        assert!((h2[(1, 0)] + 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(h2[(1, 1)], -2.0);
        assert!(matches!(hippo_init(0), Err(Error::Config(_))));
    }

    #[test]
    fn hippo_structure_up_to_256() {
        for h in [1, 2, 7, 64, 256] {
            let a = hippo_init(h).unwrap();
            for n in 0..h {
                assert!(a[(n, n)] < 0.0);
                for k in n + 1..h {
                    assert_eq!(a[(n, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_dynamics_discretization() {
        let d = discretize_bilinear(&scalar(0.0), &vec1(3.0), &vec1(1.0), 0.25).unwrap();
        assert!((d.a_bar[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((d.b_bar[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn tiny_step_gives_identity() {
        let a = hippo_init(4).unwrap();
        let d = discretize_bilinear(&a, &hippo_input(4), &DVector::zeros(4), 1e-10).unwrap();
        assert!((d.a_bar - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-8);
    }

    #[test]
    fn scalar_hand_evaluation() {
        // Ā = (1 + 0.5)⁻¹·(1 − 0.5) = 1/3, B̄ = (1 + 0.5)⁻¹·B = 2B/3
        let b = 1.7;
        let d = discretize_bilinear(&scalar(-1.0), &vec1(b), &vec1(1.0), 1.0).unwrap();
        assert!((d.a_bar[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.b_bar[0] - 2.0 * b / 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_discretization_reports_condition() {
        // I − (Δ/2)·2 = 0 at Δ = 1
        let err = discretize_bilinear(&scalar(2.0), &vec1(1.0), &vec1(1.0), 1.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("condition")), "{err}");
    }

    #[test]
    fn recurrent_step_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = SsmChannel::init(4, &mut rng).unwrap().discretize().unwrap();
        let (x, y) = recurrent_step(&d, &DVector::zeros(4), 0.0).unwrap();
        assert_eq!(x, DVector::zeros(4));
        assert_eq!(y, 0.0);
        let (x, y) = recurrent_step(&d, &DVector::zeros(4), 1.0).unwrap();
        assert_eq!(x, d.b_bar);
        assert!((y - d.c_bar.dot(&d.b_bar)).abs() < 1e-15);
        assert!(matches!(recurrent_step(&d, &DVector::zeros(3), 1.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn geometric_kernel() {
        let d = DiscreteSsm { a_bar: scalar(0.5), b_bar: vec1(1.0), c_bar: vec1(1.0) };
        assert_eq!(materialize_kernel(&d, 4).unwrap().taps, vec![1.0, 0.5, 0.25, 0.125]);
        let id = DiscreteSsm { a_bar: scalar(1.0), b_bar: vec1(2.0), c_bar: vec1(1.5) };
        assert!(materialize_kernel(&id, 6).unwrap().taps.iter().all(|&t| t == 3.0));
        assert!(materialize_kernel(&d, 0).is_err());
    }

    #[test]
    fn unstable_kernel_overflows_to_error() {
        let d = DiscreteSsm { a_bar: scalar(1e200), b_bar: vec1(1.0), c_bar: vec1(1.0) };
        assert!(matches!(materialize_kernel(&d, 4), Err(Error::Numerical(_))));
    }

    #[test]
    fn kernel_is_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = SsmChannel::init(6, &mut rng).unwrap().discretize().unwrap();
        let mut impulse = vec![0.0; 20];
        impulse[0] = 1.0;
        let y = apply_recurrent_mode(&d, &impulse).unwrap();
        let k = materialize_kernel(&d, 20).unwrap();
        for (a, b) in y.iter().zip(&k.taps) {
            assert!((a - b).abs() < 1e-12);
        }
        let conv = apply_convolution_mode(&d, &impulse).unwrap();
        for (a, b) in conv.iter().zip(&k.taps) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(apply_convolution_mode(&d, &vec![0.0; 20]).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn init_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let ch = SsmChannel::init(16, &mut rng).unwrap();
            assert!(ch.dt() >= DT_MIN && ch.dt() <= DT_MAX);
            assert!(ch.discretize().unwrap().spectral_radius() < 1.0);
        }
    }
}
