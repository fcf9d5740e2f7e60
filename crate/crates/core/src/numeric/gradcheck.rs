use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DenseMatrix, ExpressionGraph, NumericError};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|a − n| / max(1, |a|, |n|)`.
    pub max_relative_error: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients against central differences at `point` for
/// every entry of every trainable input.
///
/// `point` binds every input of the graph, trainable or not.
pub fn finite_difference_check(
    graph: &ExpressionGraph,
    point: &BTreeMap<String, DenseMatrix>,
    eps: f64,
) -> Result<GradCheckReport, NumericError> {
    check(graph, point, eps, None)
}

/// Like [`finite_difference_check`] but samples at most `per_parameter`
/// entries from each trainable input.
pub fn finite_difference_check_sampled(
    graph: &ExpressionGraph,
    point: &BTreeMap<String, DenseMatrix>,
    eps: f64,
    per_parameter: usize,
    seed: u64,
) -> Result<GradCheckReport, NumericError> {
    check(graph, point, eps, Some((per_parameter, seed)))
}

fn check(
    graph: &ExpressionGraph,
    point: &BTreeMap<String, DenseMatrix>,
    eps: f64,
    sampling: Option<(usize, u64)>,
) -> Result<GradCheckReport, NumericError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NumericError::Contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let loss = graph
        .loss()
        .ok_or_else(|| NumericError::Contract("no loss node set".into()))?;
    let analytic = {
        let values = graph.evaluate(point)?;
        graph.gradients(&values)?
    };

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut work = point.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };

    let eval_at = |work: &BTreeMap<String, DenseMatrix>| -> Result<f64, NumericError> {
        Ok(graph.evaluate(work)?.get(loss).get(0, 0))
    };

    for (name, grad) in &analytic {
        let n = grad.len();
        let indices: Vec<usize> = match (sampling, rng.as_mut()) {
            (Some((k, _)), Some(rng)) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let original = point[name].values()[idx];
            work.get_mut(name).expect("bound").values_mut()[idx] = original + eps;
            let plus = eval_at(&work)?;
            work.get_mut(name).expect("bound").values_mut()[idx] = original - eps;
            let minus = eval_at(&work)?;
            work.get_mut(name).expect("bound").values_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.values()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
