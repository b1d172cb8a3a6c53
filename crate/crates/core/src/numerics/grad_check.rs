use super::graph::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Denominator floor for [`relative_error`]. With `eps = 1e-5`, central
/// differences carry absolute noise near 1e-10, so gradients below this
/// floor are compared on an absolute scale instead.
pub const DEFAULT_REL_FLOOR: f64 = 1e-5;

/// Central finite differences of `loss` with respect to every parameter
/// scalar. Each coordinate is perturbed in place and restored.
pub fn finite_diff_grad<F>(mut loss: F, params: &mut ParamStore, eps: f64) -> Vec<Tensor>
where
    F: FnMut(&ParamStore) -> f64,
{
    let ids: Vec<ParamId> = params.ids().collect();
    ids.into_iter()
        .map(|id| finite_diff_param(&mut loss, params, id, eps))
        .collect()
}

/// Finite differences for a single parameter tensor.
pub fn finite_diff_param<F>(loss: &mut F, params: &mut ParamStore, id: ParamId, eps: f64) -> Tensor
where
    F: FnMut(&ParamStore) -> f64,
{
    let (rows, cols) = params.get(id).shape();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows * cols {
        let orig = params.get(id).data[i];
        params.get_mut(id).data[i] = orig + eps;
        let plus = loss(params);
        params.get_mut(id).data[i] = orig - eps;
        let minus = loss(params);
        params.get_mut(id).data[i] = orig;
        out.data[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares backward gradients against finite differences over all
/// parameters of `params`.
pub fn compare_gradients(
    params: &ParamStore,
    analytic: &Gradients,
    numeric: &[Tensor],
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for (id, name, _) in params.iter() {
        let a = analytic.dense(id, params);
        for (i, (&av, &nv)) in a.data.iter().zip(&numeric[id.index()].data).enumerate() {
            let e = relative_error(av, nv, floor);
            report.checked += 1;
            if e > report.max_relative_error || e.is_nan() {
                report.max_relative_error = e;
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.worst_analytic = av;
                report.worst_numeric = nv;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row_vector(vec![v]));
        s
    }

    #[test]
    fn quadratic_derivative() {
        let mut s = single(3.0);
        let g = finite_diff_grad(
            |p| p.get(p.id("w").unwrap()).data[0].powi(2),
            &mut s,
            DEFAULT_FD_EPS,
        );
        assert!((g[0].data[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut s = single(0.0);
        let g = finite_diff_grad(
            |p| {
                let mut graph = Graph::new(p);
                let w = graph.param(p.id("w").unwrap());
                let y = graph.sigmoid(w).unwrap();
                graph.scalar(y)
            },
            &mut s,
            DEFAULT_FD_EPS,
        );
        assert!((g[0].data[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn perturbation_is_restored() {
        let mut s = single(1.25);
        let before = s.clone();
        let _ = finite_diff_grad(|p| p.get(p.id("w").unwrap()).data[0].sin(), &mut s, 1e-3);
        assert_eq!(s, before);
    }
}
