//! Helpers shared by the oracle-based integration tests.

#![allow(dead_code)]

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        return (a - b).abs();
    }
    (a - b).abs() / scale.max(1e-6)
}

pub fn assert_rel_close(a: f64, b: f64, tol: f64, what: &str) {
    let e = rel_err(a, b);
    assert!(
        e <= tol,
        "{what}: {a} vs {b}, rel err {e:.3e} > {tol:.1e}"
    );
}
