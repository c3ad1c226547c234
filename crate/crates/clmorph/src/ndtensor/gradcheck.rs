//! Central finite-difference verification of reverse-mode gradients.
//!
//! The forward closure is re-evaluated with perturbed leaf values, so it
//! must be a pure function of the leaves' current data.

use rand::Rng;

use super::Tensor;
use crate::error::Result;

/// Compare autodiff gradients of a scalar-valued computation against
/// central finite differences at `coords_per_leaf` randomly sampled
/// coordinates of every leaf.
///
/// The comparison is `|ad - fd| / max(1, |fd|) < rel_tol`. Returns a
/// human-readable description of the first violation.
pub fn check<F, R>(
    forward: F,
    leaves: &[&Tensor],
    coords_per_leaf: usize,
    step: f64,
    rel_tol: f64,
    rng: &mut R,
) -> std::result::Result<(), String>
where
    F: Fn() -> Result<Tensor>,
    R: Rng,
{
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = forward().map_err(|e| format!("forward failed: {e}"))?;
    loss.backward().map_err(|e| format!("backward failed: {e}"))?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let count = coords_per_leaf.min(n);
        for _ in 0..count {
            let c = rng.gen_range(0..n);
            let x0 = leaf.data()[c];
            leaf.update_data(|d| d[c] = x0 + step);
            let plus = forward().map_err(|e| format!("forward(+h) failed: {e}"))?.item();
            leaf.update_data(|d| d[c] = x0 - step);
            let minus = forward().map_err(|e| format!("forward(-h) failed: {e}"))?.item();
            leaf.update_data(|d| d[c] = x0);

            let fd = (plus - minus) / (2.0 * step);
            let ad = grads[li][c];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            if rel > rel_tol {
                return Err(format!(
                    "gradient mismatch at leaf {li} coord {c}: autodiff {ad:e}, \
                     finite-difference {fd:e}, relative error {rel:e} > {rel_tol:e}"
                ));
            }
        }
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    Ok(())
}

/// Default step and tolerance used across the test suites.
pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
