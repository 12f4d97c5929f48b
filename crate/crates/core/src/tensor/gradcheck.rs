//! Central-difference verification of analytic gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{bail, Result};

/// Denominator floor for relative errors so entries whose true gradient is
/// numerically zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn forward_value<F>(store: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let loss = build(&mut g)?;
    g.value(loss).item()
}

/// Gradients from one backward pass; parameters the loss does not reach get
/// zeros.
pub fn analytic_gradients<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    build: &F,
) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;
    Ok(params
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect())
}

/// Central differences `(L(θ+h) − L(θ−h)) / 2h` for every element of `params`.
pub fn numeric_gradients<F>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    build: &F,
    step: f64,
) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        bail!(Tensor, "gradient_check: step must be positive, got {step}");
    }
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).len();
        let mut g = Tensor::zeros(store.value(id).shape());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let up = forward_value(store, build)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let down = forward_value(store, build)?;
            store.value_mut(id).data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(
    store: &ParamStore<f64>,
    params: &[ParamId],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tolerance: f64,
) -> GradCheckReport {
    let checks: Vec<ParamCheck> = params
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(&id, (a, n))| {
            let mut worst = (0.0f64, 0.0f64, 0usize);
            for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
                let mut rel = relative_error(av, nv);
                if rel.is_nan() {
                    rel = f64::INFINITY;
                }
                if rel > worst.0 {
                    worst = (rel, (av - nv).abs(), i);
                }
            }
            ParamCheck {
                name: store.get(id).name.clone(),
                max_rel_error: worst.0,
                max_abs_error: worst.1,
                worst_index: worst.2,
            }
        })
        .collect();
    let passed = checks.iter().all(|c| c.max_rel_error < tolerance);
    GradCheckReport {
        params: checks,
        tolerance,
        passed,
    }
}

/// Checks the analytic gradient of `build`'s scalar output against central
/// differences for every element of `params`.
///
/// Fails with an error when two identical forward passes disagree, since the
/// finite-difference comparison is meaningless for a stochastic graph.
pub fn gradient_check<F>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let first = forward_value(store, &build)?;
    let second = forward_value(store, &build)?;
    if first.to_bits() != second.to_bits() {
        bail!(
            Tensor,
            "gradient_check: graph builder is non-deterministic ({first} vs {second})"
        );
    }
    let analytic = analytic_gradients(store, params, &build)?;
    let numeric = numeric_gradients(store, params, &build, step)?;
    Ok(compare_gradients(store, params, &analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_essentially_exact() {
        let mut store = ParamStore::new();
        let x = store
            .add("x", ParamKind::Weight, Tensor::vector(&[0.3, -1.2, 2.5]))
            .unwrap();
        let rep = gradient_check(
            &mut store,
            &[x],
            |g| {
                let v = g.param(x)?;
                let sq = g.mul(v, v)?;
                let s = g.scale(sq, 1.5)?;
                g.sum_all(s)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error() < 1e-7, "{rep:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut store = ParamStore::new();
        let x = store
            .add("x", ParamKind::Weight, Tensor::vector(&[0.3, -1.2]))
            .unwrap();
        let build = |g: &mut Graph<f64>| {
            let v = g.param(x)?;
            let e = g.exp(v)?;
            g.sum_all(e)
        };
        let mut analytic = analytic_gradients(&store, &[x], &build).unwrap();
        for v in analytic[0].data_mut() {
            *v *= 2.0;
        }
        let numeric = numeric_gradients(&mut store, &[x], &build, 1e-5).unwrap();
        let rep = compare_gradients(&store, &[x], &analytic, &numeric, 1e-4);
        assert!(!rep.passed);
    }

    #[test]
    fn nondeterministic_builder_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", ParamKind::Weight, Tensor::vector(&[1.0])).unwrap();
        let calls = Cell::new(0.0);
        let err = gradient_check(
            &mut store,
            &[x],
            |g| {
                calls.set(calls.get() + 1.0);
                let v = g.param(x)?;
                g.scale(v, calls.get())
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-deterministic"));
    }
}
