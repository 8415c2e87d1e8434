//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative errors use `|a - n| / max(|a|, |n|, floor)` so entries whose true
/// gradient is near zero are judged on absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct WorstEntry {
    /// Input (or parameter) label.
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    fn record(&mut self, input: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            if rel >= self.max_rel_err {
                self.worst = Some(WorstEntry {
                    input: input.to_string(),
                    index,
                    analytic,
                    numeric,
                });
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst;
        }
    }

    pub fn empty() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        }
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Checks the gradient of a scalar function of one tensor at every element.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, DEFAULT_FLOOR)
}

/// Checks the gradient with respect to every element of several inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::empty();
    for (k, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for idx in 0..t.numel() {
            let numeric = central_difference(&f, inputs, k, idx, eps)?;
            report.record(&format!("input{k}"), idx, analytic.data()[idx], numeric, floor);
        }
    }
    Ok(report)
}

fn central_difference<F>(f: &F, inputs: &[Tensor<f64>], k: usize, idx: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut plus = inputs.to_vec();
    plus[k].data_mut()[idx] += eps;
    let mut minus = inputs.to_vec();
    minus[k].data_mut()[idx] -= eps;
    Ok((eval_scalar(f, &plus)? - eval_scalar(f, &minus)?) / (2.0 * eps))
}

/// Checks parameter gradients of a scalar loss built from a [`ParamStore`].
///
/// Up to `per_param` randomly chosen elements of every trainable parameter
/// are perturbed (all of them when the parameter is small enough).
pub fn grad_check_params<F, R>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    floor: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::empty();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let entry = store.entry(id);
        let n = entry.value.numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, per_param).into_vec();
            v.sort_unstable();
            v
        };
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
        let mut part = GradCheckReport::empty();
        for idx in picks {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[idx] += eps;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[idx] -= eps;
            let fp = scalar_of(&f, &plus)?;
            let fm = scalar_of(&f, &minus)?;
            part.record(&entry.name, idx, analytic.data()[idx], (fp - fm) / (2.0 * eps), floor);
        }
        report.merge(part);
    }
    Ok(report)
}

fn scalar_of<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(&mut g, store)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let r = grad_check(|g, v| g.sum(v), &x, 1e-4).unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::<f64>::ones(&[2]);
        let err = grad_check(|g, v| g.relu(v), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn worst_offender_is_reported() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.gelu(v)?;
                g.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        let w = r.worst.expect("worst entry");
        assert!(w.index < 3);
        assert!(r.max_rel_err < 1e-6);
    }
}
