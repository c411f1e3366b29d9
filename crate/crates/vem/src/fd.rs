//! Central finite differences used to fill in derivative bundles and to
//! cross-check analytic partials.
//!
//! The base step follows max(1e-6, 1e-7·|value|); callers that need an
//! *independent* difference (e.g. the partial-verification report checking a
//! bundle that was itself generated here) pass a different `scale`.

use crate::linalg::Mat;

/// Base perturbation for a coordinate with the given magnitude.
pub fn step(value: f64) -> f64 {
    (1e-7 * value.abs()).max(1e-6)
}

/// Central difference of a scalar function of one variable.
pub fn partial(f: impl Fn(f64) -> f64, x: f64, scale: f64) -> f64 {
    let h = step(x) * scale;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient of a scalar function of a vector.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = step(x[j]) * scale;
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        out[j] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Central-difference Jacobian (out_dim × x.len()) of a vector function.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], out_dim: usize, scale: f64) -> Mat {
    let mut jac = Mat::zeros(out_dim, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = step(x[j]) * scale;
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..out_dim {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    jac
}

/// Central difference of each component of a vector function with respect to
/// a scalar argument (typically time).
pub fn vector_partial(f: impl Fn(f64) -> Vec<f64>, x: f64, scale: f64) -> Vec<f64> {
    let h = step(x) * scale;
    let fp = f(x + h);
    let fm = f(x - h);
    fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}
