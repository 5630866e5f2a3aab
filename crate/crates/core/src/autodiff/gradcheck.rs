use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{ComputeGraph, NodeId};
use super::params::{ParamId, ParamStore, SectionFilter};
use super::AutodiffError;

#[derive(Debug, Clone)]
pub struct FiniteDiffOptions {
    pub epsilon: f64,
    pub wrt: SectionFilter,
    /// Check at most this many coordinates per parameter tensor, chosen with
    /// `seed`. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FiniteDiffOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            wrt: SectionFilter::All,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn eval_loss<F>(loss_fn: &mut F, store: &ParamStore) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut ComputeGraph, &ParamStore) -> Result<NodeId, AutodiffError>,
{
    let mut graph = ComputeGraph::new();
    let loss = loss_fn(&mut graph, store)?;
    let value = graph.value(loss);
    if value.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(value.shape().to_vec()));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite {
            what: format!("loss value {v}"),
        });
    }
    Ok(v)
}

/// Central-difference check of every parameter coordinate. Returns the
/// largest `|a - n| / max(1e-8, |a| + |n|)` seen.
pub fn finite_diff_check<F>(loss_fn: F, store: &ParamStore, epsilon: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut ComputeGraph, &ParamStore) -> Result<NodeId, AutodiffError>,
{
    let opts = FiniteDiffOptions {
        epsilon,
        ..FiniteDiffOptions::default()
    };
    finite_diff_check_with(loss_fn, store, &opts).map(|r| r.max_rel_error)
}

pub fn finite_diff_check_with<F>(mut loss_fn: F, store: &ParamStore, opts: &FiniteDiffOptions) -> Result<FiniteDiffReport, AutodiffError>
where
    F: FnMut(&mut ComputeGraph, &ParamStore) -> Result<NodeId, AutodiffError>,
{
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(AutodiffError::InvalidEpsilon(opts.epsilon));
    }
    let mut graph = ComputeGraph::new();
    let loss = loss_fn(&mut graph, store)?;
    let grads = graph.backward(loss, store, opts.wrt)?;
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, e)| opts.wrt.accepts(e.section))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let len = store.get(id)?.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < len => {
                let mut picked = index::sample(&mut rng, len, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let analytic = grads.get(id).ok_or(AutodiffError::MissingGradient(id))?.data().to_vec();
        for i in coords {
            let original = store.get(id)?.data()[i];
            work.get_mut(id)?.data_mut()[i] = original + opts.epsilon;
            let plus = eval_loss(&mut loss_fn, &work)?;
            work.get_mut(id)?.data_mut()[i] = original - opts.epsilon;
            let minus = eval_loss(&mut loss_fn, &work)?;
            work.get_mut(id)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.entry(id)?.name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Section;
    use crate::tensor::Tensor;

    #[test]
    fn rejects_non_positive_epsilon() {
        let store = ParamStore::new();
        let err = finite_diff_check(|g, _| Ok(g.input(Tensor::scalar(1.0))), &store, 0.0).unwrap_err();
        assert_eq!(err, AutodiffError::InvalidEpsilon(0.0));
    }

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let mut store = ParamStore::new();
        let p = store.register("p", Section::Weight, Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap());
        let err = finite_diff_check(
            |g, s| {
                let x = g.param(s, p)?;
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
