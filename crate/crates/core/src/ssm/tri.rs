//! Matrix-free bilinear operators for a lower-triangular state matrix.
//!
//! With `M = I − (Δ/2)·A` and `P = I + (Δ/2)·A` both lower-triangular, the
//! discrete transition `Ā = M⁻¹·P` is applied as a triangular product
//! followed by a forward substitution, never formed explicitly.

/// Row-major `H×H` matrix with no nonzeros above the diagonal.
pub fn is_lower_triangular(a: &[f64], h: usize) -> bool {
    (0..h).all(|r| a[r * h + r + 1..(r + 1) * h].iter().all(|&x| x == 0.0))
}

/// `out = A·x`.
pub fn lower_matvec(a: &[f64], h: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..h {
        let row = &a[r * h..r * h + r + 1];
        out[r] = row.iter().zip(&x[..=r]).map(|(p, q)| p * q).sum();
    }
}

/// `out = (I + s·A)·x`.
pub fn p_matvec(a: &[f64], h: usize, s: f64, x: &[f64], out: &mut [f64]) {
    lower_matvec(a, h, x, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi + s * *o;
    }
}

/// `out = (I + s·A)ᵀ·z`.
pub fn pt_matvec(a: &[f64], h: usize, s: f64, z: &[f64], out: &mut [f64]) {
    out[..h].copy_from_slice(&z[..h]);
    for r in 0..h {
        let zr = s * z[r];
        if zr != 0.0 {
            for (o, arc) in out[..=r].iter_mut().zip(&a[r * h..r * h + r + 1]) {
                *o += arc * zr;
            }
        }
    }
}

/// Solve `(I − s·A)·x = y` in place.
pub fn m_solve(a: &[f64], h: usize, s: f64, y: &mut [f64]) {
    for r in 0..h {
        let row = &a[r * h..r * h + r];
        let acc: f64 = row.iter().zip(&y[..r]).map(|(p, q)| p * q).sum();
        y[r] = (y[r] + s * acc) / (1.0 - s * a[r * h + r]);
    }
}

/// Solve `(I − s·A)ᵀ·x = y` in place.
pub fn mt_solve(a: &[f64], h: usize, s: f64, y: &mut [f64]) {
    for r in (0..h).rev() {
        y[r] /= 1.0 - s * a[r * h + r];
        let yr = s * y[r];
        if yr != 0.0 {
            for (yc, arc) in y[..r].iter_mut().zip(&a[r * h..r * h + r]) {
                *yc += arc * yr;
            }
        }
    }
}

/// `v ← Ā·v` using `scratch` as workspace.
pub fn transition(a: &[f64], h: usize, s: f64, v: &mut [f64], scratch: &mut [f64]) {
    p_matvec(a, h, s, v, scratch);
    m_solve(a, h, s, scratch);
    v.copy_from_slice(&scratch[..h]);
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
