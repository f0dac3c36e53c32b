//! Central finite-difference gradient checking. Library code (not test-only)
//! because the CLI self-test runs the same suites at runtime.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Default step for unit-scale data.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a dead zone: the denominator is floored at 0.01 so
/// near-zero gradient pairs compare on an absolute scale (1e-4 relative at
/// the floor = 1e-6 absolute), which is what central differences at step
/// 1e-3 on unit-scale data can actually resolve.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.01)
}

/// Checks analytic gradients of a scalar function of several tensor inputs
/// against central finite differences.
///
/// `f` must be a pure function of `inputs`. `analytic[i]` is the claimed
/// gradient w.r.t. `inputs[i]` (same shape). Entries of `skip` name inputs
/// to leave unchecked (e.g. integer-valued ones).
pub fn check_gradients(
    inputs: &[Tensor],
    analytic: &[Tensor],
    mut f: impl FnMut(&[Tensor]) -> Result<f64, TensorError>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, String> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[ti].shape() {
            return Err(format!(
                "gradient #{ti} shape {:?} != input shape {:?}",
                grad.shape(),
                inputs[ti].shape()
            ));
        }
        for k in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[k];
            work[ti].data_mut()[k] = orig + step;
            let fp = f(&work).map_err(|e| format!("f(+) failed: {e}"))?;
            work[ti].data_mut()[k] = orig - step;
            let fm = f(&work).map_err(|e| format!("f(-) failed: {e}"))?;
            work[ti].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let e = rel_err(grad.data()[k], numeric);
            if e > max_rel {
                max_rel = e;
            }
            if e > tol {
                return Err(format!(
                    "gradient mismatch: input #{ti} element {k}: analytic {} vs numeric {} (rel {e:.3e} > {tol:.1e})",
                    grad.data()[k], numeric
                ));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

/// Like `check_gradients` but only probes a deterministic subsample of
/// elements, for expensive functions.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients_sampled(
    inputs: &[Tensor],
    analytic: &[Tensor],
    mut f: impl FnMut(&[Tensor]) -> Result<f64, TensorError>,
    step: f64,
    tol: f64,
    max_probes_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport, String> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    // Small deterministic LCG so the subsample does not depend on rand.
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let n = inputs[ti].numel();
        let probes: Vec<usize> = if n <= max_probes_per_input {
            (0..n).collect()
        } else {
            (0..max_probes_per_input).map(|_| (next() % n as u64) as usize).collect()
        };
        for k in probes {
            let orig = inputs[ti].data()[k];
            work[ti].data_mut()[k] = orig + step;
            let fp = f(&work).map_err(|e| format!("f(+) failed: {e}"))?;
            work[ti].data_mut()[k] = orig - step;
            let fm = f(&work).map_err(|e| format!("f(-) failed: {e}"))?;
            work[ti].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let e = rel_err(grad.data()[k], numeric);
            if e > max_rel {
                max_rel = e;
            }
            if e > tol {
                return Err(format!(
                    "gradient mismatch: input #{ti} element {k}: analytic {} vs numeric {} (rel {e:.3e} > {tol:.1e})",
                    grad.data()[k], numeric
                ));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}
