use crate::autodiff::ModelWeights;
use crate::search_space::ArchParams;
use crate::tensor::Tensor;

use super::FedError;

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ModelWeights,
    pub arch: Option<ArchParams>,
    pub n_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub weights: ModelWeights,
    pub arch: Option<ArchParams>,
}

fn check_shapes(what: &str, reference: &[&Tensor], other: &[&Tensor], client: usize) -> Result<(), FedError> {
    if reference.len() != other.len() {
        return Err(FedError::ShapeMismatch(format!(
            "client {client} sent {} {what} tensors, expected {}",
            other.len(),
            reference.len()
        )));
    }
    for (i, (a, b)) in reference.iter().zip(other).enumerate() {
        if a.shape() != b.shape() {
            return Err(FedError::ShapeMismatch(format!(
                "client {client}: {what} tensor {i} has shape {:?}, expected {:?}",
                b.shape(),
                a.shape()
            )));
        }
    }
    Ok(())
}

// base + sum_k (n_k / n) * (x_k - base), with base the first client's tensor.
// The weights sum to one, so this is the weighted mean. Equal entries are
// skipped, so identical clients (or a single one) reproduce the input bits.
fn weighted_mean(tensors: &[&Tensor], coeffs: &[f64]) -> Tensor {
    let base = tensors[0];
    let mut out = base.clone();
    let data = out.data_mut();
    for (t, &c) in tensors.iter().zip(coeffs).skip(1) {
        for ((o, &x), &b) in data.iter_mut().zip(t.data()).zip(base.data()) {
            if x != b {
                *o += c * (x - b);
            }
        }
    }
    out
}

/// Sample-weighted average of weights and α. Clients are summed in ascending
/// `client_id` order whatever order they arrive in.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Aggregate, FedError> {
    if updates.is_empty() {
        return Err(FedError::NoClients);
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if let Some(pair) = sorted.windows(2).find(|p| p[0].client_id == p[1].client_id) {
        return Err(FedError::DuplicateClient(pair[0].client_id));
    }
    let total: usize = sorted.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(FedError::ZeroSamples);
    }
    let coeffs: Vec<f64> = sorted.iter().map(|u| u.n_k as f64 / total as f64).collect();

    let first = sorted[0];
    let reference: Vec<&Tensor> = first.weights.tensors().iter().collect();
    for u in &sorted[1..] {
        check_shapes("weight", &reference, &u.weights.tensors().iter().collect::<Vec<_>>(), u.client_id)?;
        if u.arch.is_some() != first.arch.is_some() {
            return Err(FedError::ShapeMismatch(format!(
                "client {} and client {} disagree on carrying architecture parameters",
                first.client_id, u.client_id
            )));
        }
    }
    let weights = ModelWeights(
        (0..reference.len())
            .map(|i| weighted_mean(&sorted.iter().map(|u| &u.weights.tensors()[i]).collect::<Vec<_>>(), &coeffs))
            .collect(),
    );

    let arch = match &first.arch {
        None => None,
        Some(a0) => {
            let pick = |f: fn(&ArchParams) -> &Tensor| -> Result<Vec<&Tensor>, FedError> {
                let ts: Vec<&Tensor> = sorted.iter().map(|u| f(u.arch.as_ref().expect("checked above"))).collect();
                for (u, t) in sorted.iter().zip(&ts) {
                    check_shapes("architecture", &[f(a0)], &[t], u.client_id)?;
                }
                Ok(ts)
            };
            let normal = pick(|a| &a.normal)?;
            let reduce = pick(|a| &a.reduce)?;
            Some(ArchParams {
                normal: weighted_mean(&normal, &coeffs),
                reduce: weighted_mean(&reduce, &coeffs),
            })
        }
    };
    Ok(Aggregate { weights, arch })
}
