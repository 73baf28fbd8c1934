//! Central finite-difference gradient verification.

use std::collections::HashMap;

use super::{Graph, Parameter, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    /// `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-12)`; infinite when
    /// the function failed or produced a non-finite value.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coordinates: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub failure: Option<String>,
}

impl FiniteDiffReport {
    fn failed(msg: String) -> Self {
        Self {
            max_relative_error: f64::INFINITY,
            max_absolute_error: f64::INFINITY,
            coordinates: 0,
            worst: None,
            failure: Some(msg),
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_relative_error < tolerance
    }
}

#[derive(Default)]
struct Tally {
    rel: f64,
    abs: f64,
    n: usize,
    worst: Option<(String, usize)>,
}

impl Tally {
    fn record(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / (analytic.abs() + 1e-12);
        self.n += 1;
        self.abs = self.abs.max(abs);
        if rel > self.rel || self.worst.is_none() {
            self.rel = self.rel.max(rel);
            self.worst = Some((name.to_string(), i));
        }
    }

    fn finish(self) -> FiniteDiffReport {
        FiniteDiffReport {
            max_relative_error: self.rel,
            max_absolute_error: self.abs,
            coordinates: self.n,
            worst: self.worst,
            failure: None,
        }
    }
}

/// Checks the tape gradient of a scalar function `f` at `point` against
/// central differences with step `h`. Never panics on bad function output;
/// failures are reported.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> FiniteDiffReport
where
    F: for<'g> Fn(&Graph<'g>, Var) -> Result<Var>,
{
    let eval = |data: Vec<f64>| -> std::result::Result<f64, String> {
        let g = Graph::new();
        let x = g.constant(data, point.rows(), point.cols());
        let y = f(&g, x).map_err(|e| e.to_string())?;
        if (y.rows(), y.cols()) != (1, 1) {
            return Err(format!("function output has shape {:?}", y.shape()));
        }
        let v = g.scalar(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err("non-finite function value".into())
        }
    };

    let analytic = {
        let g = Graph::new();
        let x = g.input(point.data().to_vec(), point.rows(), point.cols(), true);
        let y = match f(&g, x) {
            Ok(y) => y,
            Err(e) => return FiniteDiffReport::failed(e.to_string()),
        };
        if (y.rows(), y.cols()) != (1, 1) {
            return FiniteDiffReport::failed(format!("function output has shape {:?}", y.shape()));
        }
        if !g.scalar(y).is_finite() {
            return FiniteDiffReport::failed("non-finite function value".into());
        }
        match g.backward(y) {
            Ok(grads) => grads
                .wrt(x)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; point.len()]),
            Err(e) => return FiniteDiffReport::failed(e.to_string()),
        }
    };

    let mut tally = Tally::default();
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = match (eval(plus), eval(minus)) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
            (Err(e), _) | (_, Err(e)) => return FiniteDiffReport::failed(e),
        };
        tally.record("x", i, analytic[i], numeric);
    }
    tally.finish()
}

/// Gradient check over the named parameters of a model.
///
/// `loss` evaluates the model and returns the loss together with the tape's
/// per-parameter gradients; `params` exposes the parameters to perturb.
pub fn finite_diff_check_params<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<&mut Parameter>,
    loss: impl Fn(&M) -> Result<(f64, HashMap<String, Vec<f64>>)>,
    h: f64,
) -> FiniteDiffReport {
    let analytic = match loss(model) {
        Ok((v, g)) if v.is_finite() => g,
        Ok(_) => return FiniteDiffReport::failed("non-finite loss".into()),
        Err(e) => return FiniteDiffReport::failed(e.to_string()),
    };
    let count = params(model).len();
    let mut tally = Tally::default();
    for pi in 0..count {
        let (name, len) = {
            let ps = params(model);
            (ps[pi].name.clone(), ps[pi].numel())
        };
        let zeros = vec![0.0; len];
        let grad = analytic.get(&name).unwrap_or(&zeros);
        for i in 0..len {
            let orig = params(model)[pi].tensor.data()[i];
            params(model)[pi].tensor.data_mut()[i] = orig + h;
            let up = loss(model);
            params(model)[pi].tensor.data_mut()[i] = orig - h;
            let down = loss(model);
            params(model)[pi].tensor.data_mut()[i] = orig;
            let numeric = match (up, down) {
                (Ok((a, _)), Ok((b, _))) if a.is_finite() && b.is_finite() => (a - b) / (2.0 * h),
                (Err(e), _) | (_, Err(e)) => return FiniteDiffReport::failed(e.to_string()),
                _ => return FiniteDiffReport::failed("non-finite loss".into()),
            };
            tally.record(&name, i, grad[i], numeric);
        }
    }
    tally.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Targets;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::new(vec![1, 4], vec![0.5, -1.5, 2.0, 3.0]);
        let r = finite_diff_check(|g, x| Ok(g.sum(g.mul(x, x))), &p, 1e-5);
        assert!(r.max_relative_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let r = finite_diff_check(|g, x| Ok(g.sum(g.scale(x, f64::INFINITY))), &p, 1e-5);
        assert!(r.failure.is_some());
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn errors_are_reported_not_raised() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let r = finite_diff_check(|g, x| g.cross_entropy(x, &Targets::Index(vec![5])), &p, 1e-5);
        assert!(r.failure.is_some());
    }
}
