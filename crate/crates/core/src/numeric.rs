//! Small numerical helpers shared across modules.

use num_complex::Complex64 as C64;

/// Sum with a fixed binary association order, independent of how the input
/// was produced. Used for every parallel reduction.
pub fn pairwise_sum(xs: &[C64]) -> C64 {
    match xs.len() {
        0 => C64::new(0.0, 0.0),
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn pairwise_sum_real(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum_real(a) + pairwise_sum_real(b)
        }
    }
}

/// `z^p`; integer exponents avoid the branch cut, others use the principal branch.
pub fn zpow(z: C64, p: f64) -> C64 {
    let r = p.round();
    if (p - r).abs() < 1e-9 && r.abs() < i32::MAX as f64 {
        z.powi(r as i32)
    } else {
        (z.ln() * p).exp()
    }
}

/// Central-difference Wirtinger derivatives `(∂_z f, ∂_z̄ f)`.
pub fn wirtinger<F: Fn(C64) -> C64>(f: F, z: C64, h: f64) -> (C64, C64) {
    let i = C64::new(0.0, 1.0);
    let fx = (f(z + h) - f(z - h)) / (2.0 * h);
    let fy = (f(z + i * h) - f(z - i * h)) / (2.0 * h);
    ((fx - i * fy) * 0.5, (fx + i * fy) * 0.5)
}

/// `|∂_z̄ f| / (|∂_z f| + |f|)`: zero for holomorphic `f` up to discretisation error.
pub fn cauchy_riemann_residual<F: Fn(C64) -> C64>(f: F, z: C64, h: f64) -> f64 {
    let f0 = f(z);
    let (d, dbar) = wirtinger(&f, z, h);
    dbar.norm() / (d.norm() + f0.norm()).max(f64::MIN_POSITIVE)
}

/// Horner evaluation of `Σ c_k z^k` and its derivative.
pub fn horner(coeffs: &[C64], z: C64) -> (C64, C64) {
    let mut p = C64::new(0.0, 0.0);
    let mut dp = C64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// Format a float with 17 significant digits, stable across platforms.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000e0".to_string();
    }
    format!("{:.16e}", x)
}
