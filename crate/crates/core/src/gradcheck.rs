//! Central finite-difference checks against the tape's analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Relative error used everywhere: `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    Ok(())
}

fn eval_scalar<F>(f: &F, x: &Tensor, coordinate: usize) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&tape, v)?;
    let value = out.item();
    if !value.is_finite() {
        return Err(Error::NonFinite { coordinate, value });
    }
    Ok(value)
}

/// Pins a closure to the higher-ranked signature [`finite_difference_check`]
/// expects; closures bound with `let` do not infer it on their own.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

/// Same as [`scalar_fn`] for [`check_param_gradients`].
pub fn param_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    f
}

/// Compares the gradient of the scalar function `f` at `x` with central
/// differences and returns the largest relative error over all coordinates.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let v = tape.var(x.clone());
    let out = f(&tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).clone();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe, i)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One coordinate of a named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub name: String,
    pub index: usize,
}

/// Finite-difference check of a scalar function of a whole parameter set,
/// restricted to `coords`. Returns the max relative error.
///
/// `f` must register parameters on the tape with [`Tape::param`] so that
/// gradients are reported by name.
pub fn check_param_gradients<F>(
    f: F,
    params: &ParamSet,
    coords: &[Coordinate],
    eps: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let out = f(&tape, params)?;
    let grads = tape.backward(out)?;

    let value_at = |p: &ParamSet, coordinate: usize| -> Result<f64> {
        let tape = Tape::new();
        let value = f(&tape, p)?.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { coordinate, value });
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (k, c) in coords.iter().enumerate() {
        let analytic = grads
            .named(&c.name)
            .map_or(0.0, |g| g.data()[c.index]);
        let orig = params.expect(&c.name)?.data()[c.index];
        let set = |p: &mut ParamSet, v: f64| {
            p.get_mut(&c.name).expect("checked above").data_mut()[c.index] = v;
        };
        set(&mut probe, orig + eps);
        let plus = value_at(&probe, k)?;
        set(&mut probe, orig - eps);
        let minus = value_at(&probe, k)?;
        set(&mut probe, orig);
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_difference_check(
            |_, x| x.mul(x).map(|y| y.sum()),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn swish_at_one() {
        let err =
            finite_difference_check(|_, x| Ok(x.swish()?.sum()), &Tensor::scalar(1.0), 1e-5)
                .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn softmax_first_component() {
        let f = scalar_fn(|_, x| x.softmax()?.slice(1, 0, 1).map(|v| v.sum()));
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let g = tape.backward(f(&tape, v).unwrap()).unwrap();
        assert!((g.get(v).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.get(v).data()[1] + 0.25).abs() < 1e-15);
        assert!(finite_difference_check(f, &x, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn nan_reports_coordinate() {
        let x = Tensor::vector(vec![1.0, 5e-6]);
        let err = finite_difference_check(|_, x| Ok(x.log()?.sum()), &x, 1e-5);
        assert!(matches!(err, Err(Error::NonFinite { coordinate: 1, .. })));
    }

    #[test]
    fn eps_range_is_enforced() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|_, x| Ok(x.sum()), &x, 0.0).is_err());
        assert!(finite_difference_check(|_, x| Ok(x.sum()), &x, 0.1).is_err());
    }
}
