//! Finite-difference verification of [`Graph::backward`].

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-3;

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a − n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the max was attained.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates where a perturbed evaluation was not finite.
    pub failures: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &BTreeMap<String, Tensor>, f: &F) -> Result<(Graph, Var, BTreeMap<String, Var>)>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name, t.clone())))
        .collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, loss, vars))
}

/// Compares analytic gradients of the scalar built by `f` with the
/// five-point central difference
/// `[8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))] / 12h`, over every
/// coordinate. Its O(h⁴) truncation error permits a step large enough to
/// keep rounding noise below tiny gradients.
pub fn gradient_check<F>(params: &BTreeMap<String, Tensor>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    gradient_check_sampled(params, eps, usize::MAX, 0, f)
}

/// Like [`gradient_check`], but checks at most `per_param` coordinates of
/// each parameter, chosen with `seed`.
pub fn gradient_check_sampled<F>(
    params: &BTreeMap<String, Tensor>,
    eps: f64,
    per_param: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (g, loss, _) = evaluate(params, &f)?;
    let analytic = g.backward(loss)?.params(&g);
    drop(g);

    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        failures: Vec::new(),
    };
    let mut perturbed = params.clone();
    for (name, t) in params {
        let coords: Vec<usize> = if t.len() <= per_param {
            (0..t.len()).collect()
        } else {
            let mut c = sample(&mut rng, t.len(), per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = t.data()[i];
            let mut at = |x: f64| -> Result<f64> {
                perturbed.get_mut(name).expect("same keys").data_mut()[i] = x;
                let (g, loss, _) = evaluate(&perturbed, &f)?;
                Ok(g.value(loss).item())
            };
            let vals = [at(orig + eps)?, at(orig - eps)?, at(orig + 2.0 * eps)?, at(orig - 2.0 * eps)?];
            perturbed.get_mut(name).expect("same keys").data_mut()[i] = orig;
            report.checked += 1;
            if vals.iter().any(|v| !v.is_finite()) {
                report.failures.push((name.clone(), i));
                report.max_rel_error = f64::INFINITY;
                continue;
            }
            let [p1, m1, p2, m2] = vals;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let err = relative_error(analytic[name].data()[i], numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
