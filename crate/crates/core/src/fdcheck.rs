//! Central finite differences: the independent oracle for every gradient
//! check in the crate. Kept free of any tape machinery on purpose.

use crate::error::{contract, numeric, Result};
use crate::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function at `x`:
/// (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(contract(format!("finite difference step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(numeric(format!(
                "objective returned non-finite value near coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max relative deviation between an analytic gradient and the
/// finite-difference oracle, with `floor` guarding near-zero entries.
pub fn grad_rel_error(analytic: &Tensor, oracle: &Tensor, floor: f64) -> f64 {
    crate::tensor::max_rel_diff(analytic, oracle, floor)
}

/// Richardson-extrapolated central differences:
/// (4 D(h) - D(2h)) / 3 with D(h) the plain central quotient. The h^2
/// truncation term cancels, leaving O(h^4) truncation, which keeps the
/// oracle accurate on strongly curved objectives (scaled margins,
/// normalization near small feature norms).
pub fn finite_diff_grad_richardson<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(contract(format!("finite difference step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut eval = |v: f64, probe: &mut Tensor| -> Result<f64> {
            probe.data_mut()[i] = v;
            let out = f(probe)?;
            if !out.is_finite() {
                return Err(numeric(format!(
                    "objective returned non-finite value near coordinate {i}"
                )));
            }
            Ok(out)
        };
        let d_h = (eval(orig + h, &mut probe)? - eval(orig - h, &mut probe)?) / (2.0 * h);
        let d_2h = (eval(orig + 2.0 * h, &mut probe)? - eval(orig - 2.0 * h, &mut probe)?) / (4.0 * h);
        probe.data_mut()[i] = orig;
        grad[i] = (4.0 * d_h - d_2h) / 3.0;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_square_gradient() {
        // f(x) = x.x at x = 2 -> gradient 4, to within h^2 curvature error
        let x = Tensor::vector(&[2.0]);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let x = Tensor::vector(&[1.0, -3.0, 0.5]);
        let g = finite_diff_grad(|_| Ok(42.0), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let x = Tensor::vector(&[1.0, -1.0]);
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|v| v.max(0.0)).sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-10);
        assert!(g.data()[1].abs() < 1e-10);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::vector(&[1.0]);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
