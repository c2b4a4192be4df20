//! Central finite-difference gradient checks.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)` where
//! `floor = max(1e-10, 1e-3·max|a|)`, so coordinates that are tiny compared
//! with the largest component are compared on an absolute scale.

use crate::numcore::graph::{Graph, Var};
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::{NumError, Tensor};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
    pub rel_errors: Vec<T>,
    pub max_rel_error: T,
    pub tolerance: T,
    pub passed: bool,
}

fn validate_step<T: Real>(step: T) -> Result<(), NumError> {
    if !(step >= T::c(1e-10)) {
        return Err(NumError::StepTooSmall(step.f64()));
    }
    Ok(())
}

fn report<T: Real>(analytic: Vec<T>, numeric: Vec<T>, tolerance: T) -> GradCheckReport<T> {
    let scale = analytic.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let floor = (T::c(1e-3) * scale).max(T::c(1e-10));
    let rel_errors: Vec<T> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect();
    let max_rel_error = rel_errors.iter().fold(T::zero(), |m, &v| m.max(v));
    GradCheckReport {
        passed: max_rel_error < tolerance,
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tolerance,
    }
}

fn eval<T: Real, F>(f: &F, x: Tensor<T>) -> Result<T, NumError>
where
    F: Fn(&mut Graph<T>, Var) -> Var,
{
    let mut g = Graph::new();
    let v = g.input(x);
    let out = f(&mut g, v);
    g.check_finite()?;
    Ok(g.value(out).item())
}

/// Compare the analytic gradient of the scalar `f` at `point` with central differences.
pub fn grad_check<T: Real, F>(
    f: F,
    point: &Tensor<T>,
    step: T,
    tolerance: T,
) -> Result<GradCheckReport<T>, NumError>
where
    F: Fn(&mut Graph<T>, Var) -> Var,
{
    validate_step(step)?;
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let out = f(&mut g, x);
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![T::zero(); point.len()]);
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&f, plus)?;
        let fm = eval(&f, minus)?;
        numeric.push((fp - fm) / (T::c(2.0) * step));
    }
    Ok(report(analytic, numeric, tolerance))
}

/// Finite-difference check of parameter gradients.
///
/// At most `max_coords` coordinates are probed, spread evenly over all
/// entries of the listed parameters.
pub fn grad_check_params<T: Real, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    f: F,
    step: T,
    tolerance: T,
    max_coords: usize,
) -> Result<GradCheckReport<T>, NumError>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Var,
{
    validate_step(step)?;
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out)?;
    let mut work = store.clone();
    work.zero_grad();
    grads.accumulate(&mut work);

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for &id in ids {
        for e in 0..store.value(id).len() {
            coords.push((id, e));
        }
    }
    let stride = coords.len().div_ceil(max_coords.max(1)).max(1);
    let probe: Vec<(ParamId, usize)> = coords.into_iter().step_by(stride).collect();

    let eval_store = |s: &ParamStore<T>| -> Result<T, NumError> {
        let mut g = Graph::new();
        let out = f(&mut g, s);
        g.check_finite()?;
        Ok(g.value(out).item())
    };

    let mut analytic = Vec::with_capacity(probe.len());
    let mut numeric = Vec::with_capacity(probe.len());
    let mut shifted = store.clone();
    for (id, e) in probe {
        analytic.push(work.get(id).grad.data()[e]);
        let orig = store.value(id).data()[e];
        shifted.get_mut(id).value.data_mut()[e] = orig + step;
        let fp = eval_store(&shifted)?;
        shifted.get_mut(id).value.data_mut()[e] = orig - step;
        let fm = eval_store(&shifted)?;
        shifted.get_mut(id).value.data_mut()[e] = orig;
        numeric.push((fp - fm) / (T::c(2.0) * step));
    }
    Ok(report(analytic, numeric, tolerance))
}
