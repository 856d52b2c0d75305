//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

/// Outcome of a finite-difference sweep over one input tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |g_ad - g_fd| / (|g_fd| + 1e-12)
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub n_checked: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at coord {} ({} coords)",
            if self.passed { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_coord,
            self.n_checked
        )
    }
}

const REL_EPS: f64 = 1e-12;
/// Coordinates where both gradients are below this magnitude are counted as
/// matching: a central difference of a ~O(1) function carries ~5e-12 of
/// rounding noise, which swamps the relative test when the true gradient is
/// (near-)zero.
const ABS_FLOOR: f64 = 1e-7;

/// Verify the tape gradient of scalar function `f` at `x` against central
/// finite differences with step `h`, over every coordinate of `x`.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_gradients_at(f, x, &coords, h, tol)
}

/// Like [`check_gradients`] but only sweeps the given coordinates. Used for
/// whole-model loss paths where a full sweep would be quadratic.
pub fn check_gradients_at<F>(f: F, x: &Tensor, coords: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    // Reverse-mode gradient in one pass.
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    tape.backward(loss)?;
    let g_ad = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    drop(tape);

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(pt);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_coord: 0, n_checked: coords.len(), passed: true };
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + h;
        let f_plus = eval(&probe)?;
        probe.data_mut()[c] = orig - h;
        let f_minus = eval(&probe)?;
        probe.data_mut()[c] = orig;
        let g_fd = (f_plus - f_minus) / (2.0 * h);
        if !g_fd.is_finite() {
            return Err(TensorError::NonFinite { op: "check_gradients (finite difference)" });
        }
        let ad = g_ad.data()[c];
        if ad.abs() < ABS_FLOOR && g_fd.abs() < ABS_FLOOR {
            continue;
        }
        let rel = (ad - g_fd).abs() / (g_fd.abs() + REL_EPS);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = c;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let x = Tensor::rand_uniform(&[8], -1.0, 1.0, 21);
        let report = check_gradients(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum_all(sq)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn broken_gradient_is_caught() {
        // f = sum(3x) but pretend gradient of scale is identity by comparing
        // against sum(x): the checker must flag the mismatch.
        let x = Tensor::rand_uniform(&[4], 0.5, 1.5, 22);
        let report = check_gradients(
            |tape, v| {
                // Forward computes sum(x * x) but we sabotage by detaching one
                // factor: leaf(x_value) breaks the product-rule contribution.
                let frozen = tape.leaf(&Tensor::new(vec![4], tape.value(v).data().to_vec()).unwrap());
                let prod = tape.mul(v, frozen)?;
                tape.sum_all(prod)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        // AD sees d/dx (x * const) = const = x, FD sees 2x.
        assert!(!report.passed, "sabotaged gradient slipped through: {report}");
    }

    #[test]
    fn slice_boundary_gradient_is_scatter() {
        let x = Tensor::rand_uniform(&[10], -1.0, 1.0, 23);
        let report = check_gradients(
            |tape, v| {
                let head = tape.slice(v, 0, 0, 4)?;
                let tail = tape.slice(v, 0, 6, 4)?;
                let prod = tape.mul(head, tail)?;
                tape.sum_all(prod)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn non_scalar_function_is_an_error() {
        let x = Tensor::zeros(&[3]);
        let err = check_gradients(|tape, v| tape.mul(v, v), &x, 1e-5, 1e-4);
        assert!(matches!(err, Err(TensorError::NonScalarLoss(_))));
    }
}
