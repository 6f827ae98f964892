use super::{grad, AutodiffError, Tape, Tensor, Var};

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max_i |analytic_i - numeric_i| / max(1, |numeric_i|)
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub numeric: Vec<f64>,
}

/// Compares `analytic` with the central-difference gradient of `f` at `theta`.
///
/// `f` is evaluated at `theta ± eps·e_i` for every coordinate.
pub fn finite_diff_check<F, E>(
    f: F,
    analytic: &[f64],
    theta: &[f64],
    eps: f64,
) -> Result<GradCheck, E>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: From<AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::InvalidEpsilon(eps).into());
    }
    if analytic.len() != theta.len() {
        return Err(AutodiffError::LengthMismatch {
            expected: theta.len(),
            got: analytic.len(),
        }
        .into());
    }
    let mut probe = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = None;
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let plus = f(&probe)?;
        probe[i] = theta[i] - eps;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(AutodiffError::NonFiniteProbe { index: i, value }.into());
            }
        }
        let fd = (plus - minus) / (2.0 * eps);
        let mut err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err.is_nan() {
            err = f64::INFINITY;
        }
        if err > max_rel_error || worst_index.is_none() {
            max_rel_error = err;
            worst_index = Some(i);
        }
        numeric.push(fd);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        numeric,
    })
}

/// Gradient check for a function written directly against the tape, with
/// `theta` supplied as one column leaf.
pub fn check_tape_fn<F>(f: F, theta: &[f64], eps: f64) -> Result<GradCheck, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::column(theta.to_vec()));
        let y = f(&tape, x)?;
        grad(y, &[x], false)?[0].value().data().to_vec()
    };
    finite_diff_check(
        |p: &[f64]| {
            let tape = Tape::new();
            let x = tape.constant(Tensor::column(p.to_vec()));
            Ok(f(&tape, x)?.item())
        },
        &analytic,
        theta,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_is_exact() {
        let theta = [0.3, -2.0, 5.5, 1e-3];
        let check = check_tape_fn(|_, x| Ok(x.square().sum().scale(0.5)), &theta, 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = [1.0, 2.0];
        let check = check_tape_fn(|t, _| Ok(t.scalar(4.0)), &theta, 1e-5).unwrap();
        assert_eq!(check.max_rel_error, 0.0);
        assert!(check.numeric.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let theta = [1.0, 2.0];
        let f = |p: &[f64]| Ok::<_, AutodiffError>(p[0] * p[0] + p[1]);
        let good = finite_diff_check(f, &[2.0, 1.0], &theta, 1e-5).unwrap();
        assert!(good.max_rel_error < 1e-8);
        let bad = finite_diff_check(f, &[2.0, 1.5], &theta, 1e-5).unwrap();
        assert!(bad.max_rel_error > 0.4);
        assert_eq!(bad.worst_index, Some(1));
    }

    #[test]
    fn nan_analytic_gradient_fails_the_check() {
        let f = |p: &[f64]| Ok::<_, AutodiffError>(p[0]);
        let check = finite_diff_check(f, &[f64::NAN], &[0.0], 1e-5).unwrap();
        assert_eq!(check.max_rel_error, f64::INFINITY);
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let f = |p: &[f64]| Ok::<_, AutodiffError>(p[0]);
        assert_eq!(
            finite_diff_check(f, &[1.0], &[0.0], 1e-2),
            Err(AutodiffError::InvalidEpsilon(1e-2))
        );
        assert!(finite_diff_check(f, &[1.0], &[0.0], 1e-9).is_err());
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let g = |_: &[f64]| Ok::<_, AutodiffError>(f64::NAN);
        assert!(matches!(
            finite_diff_check(g, &[0.0], &[0.0], 1e-5),
            Err(AutodiffError::NonFiniteProbe { index: 0, .. })
        ));
    }
}
