//! Central finite-difference utilities for verifying reverse-mode gradients.
//!
//! These are deliberately independent of the tape: they only ever call a
//! black-box scalar function, so they stay a valid oracle for it.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error, with an absolute floor so
/// structurally-zero gradients compare cleanly.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
