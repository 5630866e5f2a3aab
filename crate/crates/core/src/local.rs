//! Per-client optimisation: mixed-level search of weights and architecture,
//! plain weight training for the evaluation stage, and evaluation passes.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sgd_step, AutodiffError, ComputeGraph, Gradients, ModelWeights, ParamStore, Section, SectionFilter};
use crate::data::{AugmentChoice, ClientShard, DataError, Dataset};
use crate::search_space::{accuracy, argmax, ArchParams, Network, SearchSpaceError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("client {client}: non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        client: usize,
        epoch: usize,
        step: usize,
        what: String,
    },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("network has no architecture parameters")]
    NotSearchable,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl LocalError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LocalError::NonFinite { .. } | LocalError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchHyper {
    pub eta_w: f64,
    pub eta_alpha: f64,
    pub lambda: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Global-norm clip applied to the weight gradient.
    pub grad_clip: Option<f64>,
    /// Heavy-ball momentum on the weights, reset at the start of every local run.
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Fraction of each shard used for training; the rest is validation.
    pub train_fraction: f64,
}

impl Default for SearchHyper {
    fn default() -> Self {
        Self {
            eta_w: 0.05,
            eta_alpha: 0.5,
            lambda: 1.0,
            local_epochs: 5,
            batch_size: 64,
            grad_clip: Some(5.0),
            momentum: 0.0,
            weight_decay: 0.0,
            augment: true,
            train_fraction: 0.5,
        }
    }
}

impl SearchHyper {
    pub fn validate(&self) -> Result<(), LocalError> {
        let bad = |m: String| Err(LocalError::Hyper(m));
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.eta_w) || !nonneg(self.eta_alpha) {
            return bad(format!(
                "learning rates must be finite and >= 0 (eta_w {}, eta_alpha {})",
                self.eta_w, self.eta_alpha
            ));
        }
        if !nonneg(self.lambda) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !nonneg(self.weight_decay) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Result<Self, DataError> {
        let (images, labels) = dataset.gather(indices)?;
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything one client owns. Confined to a single thread while it runs.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub rng_seed: u64,
    pub network: Arc<Network>,
    pub store: ParamStore,
    pub dataset: Arc<Dataset>,
    velocity: Option<Gradients>,
}

/// What a client returns after a round of local work.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub weights: ModelWeights,
    pub arch: Option<ArchParams>,
    pub n_k: usize,
    pub mean_train_loss: f64,
}

/// Stream ids: training order and augmentation use `2e`, validation order `2e + 1`,
/// where `e` counts epochs across rounds.
fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_loss(client: usize, epoch: usize, step: usize, what: &str, loss: f64) -> Result<(), LocalError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(LocalError::NonFinite {
            client,
            epoch,
            step,
            what: format!("{what} ({loss})"),
        })
    }
}

impl ClientState {
    pub fn new(
        client_id: usize,
        shard: ClientShard,
        rng_seed: u64,
        network: Arc<Network>,
        store: ParamStore,
        dataset: Arc<Dataset>,
    ) -> Self {
        Self {
            client_id,
            shard,
            rng_seed,
            network,
            store,
            dataset,
            velocity: None,
        }
    }

    pub fn arch(&self) -> Option<ArchParams> {
        self.network.arch_params(&self.store)
    }

    fn gradients(&self, batch: &Batch, wrt: SectionFilter) -> Result<(f64, Gradients), LocalError> {
        let mut graph = ComputeGraph::new();
        let (loss, _) = self.network.loss(&mut graph, &self.store, &batch.images, &batch.labels)?;
        let value = graph.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Ok((value, Gradients::new()));
        }
        let grads = graph.backward(loss, &self.store, wrt)?;
        Ok((value, grads))
    }

    /// Loss and gradient of one section, without updating anything.
    pub fn loss_and_gradient(&self, batch: &Batch, section: Section) -> Result<(f64, Gradients), LocalError> {
        self.gradients(batch, SectionFilter::Only(section))
    }

    /// One SGD step on the weights using the training loss; α is untouched.
    pub fn step_w(&mut self, batch: &Batch, hyper: &SearchHyper) -> Result<f64, LocalError> {
        self.step_w_at(batch, hyper, 0, 0)
    }

    fn step_w_at(&mut self, batch: &Batch, hyper: &SearchHyper, epoch: usize, step: usize) -> Result<f64, LocalError> {
        let (loss, mut grads) = self.gradients(batch, SectionFilter::Only(Section::Weight))?;
        check_loss(self.client_id, epoch, step, "training loss", loss)?;
        if hyper.weight_decay > 0.0 {
            let mut decay = Gradients::new();
            for id in self.store.ids(Section::Weight) {
                decay.insert(id, self.store.get(id)?.clone());
            }
            grads.add_scaled(&decay, hyper.weight_decay);
        }
        if let Some(clip) = hyper.grad_clip {
            let norm = grads.norm(&self.store, Section::Weight);
            if !norm.is_finite() {
                return Err(LocalError::NonFinite {
                    client: self.client_id,
                    epoch,
                    step,
                    what: "weight gradient norm".into(),
                });
            }
            if norm > clip {
                let factor = clip / norm;
                for (_, g) in grads.iter_mut() {
                    g.scale(factor);
                }
            }
        }
        if hyper.momentum > 0.0 {
            let velocity = self.velocity.get_or_insert_with(Gradients::new);
            for (_, v) in velocity.iter_mut() {
                v.scale(hyper.momentum);
            }
            velocity.add_scaled(&grads, 1.0);
            sgd_step(&mut self.store, velocity, Section::Weight, hyper.eta_w)?;
        } else {
            sgd_step(&mut self.store, &grads, Section::Weight, hyper.eta_w)?;
        }
        Ok(loss)
    }

    /// One SGD step on α with `∇α L_tr + λ ∇α L_val`; the weights are untouched.
    /// Returns `(train loss, validation loss)`.
    pub fn step_alpha(&mut self, train: &Batch, val: &Batch, hyper: &SearchHyper) -> Result<(f64, f64), LocalError> {
        self.step_alpha_at(train, val, hyper, 0, 0)
    }

    /// The combined α gradient of a mixed-level step and the two losses.
    pub fn combined_alpha_gradient(&self, train: &Batch, val: &Batch, lambda: f64) -> Result<(f64, f64, Gradients), LocalError> {
        if !self.network.is_super() {
            return Err(LocalError::NotSearchable);
        }
        let (tr, mut g) = self.gradients(train, SectionFilter::Only(Section::Arch))?;
        let (vl, gv) = self.gradients(val, SectionFilter::Only(Section::Arch))?;
        if tr.is_finite() && vl.is_finite() {
            g.add_scaled(&gv, lambda);
        }
        Ok((tr, vl, g))
    }

    fn step_alpha_at(
        &mut self,
        train: &Batch,
        val: &Batch,
        hyper: &SearchHyper,
        epoch: usize,
        step: usize,
    ) -> Result<(f64, f64), LocalError> {
        let (tr, vl, g) = self.combined_alpha_gradient(train, val, hyper.lambda)?;
        check_loss(self.client_id, epoch, step, "training loss in the architecture step", tr)?;
        check_loss(self.client_id, epoch, step, "validation loss", vl)?;
        sgd_step(&mut self.store, &g, Section::Arch, hyper.eta_alpha)?;
        Ok((tr, vl))
    }

    fn train_batch(&self, indices: &[usize], augment: bool, rng: &mut ChaCha8Rng) -> Result<Batch, LocalError> {
        let mut batch = Batch::from_dataset(&self.dataset, indices)?;
        if augment {
            let shape = self.dataset.image_shape();
            let size = shape.0 * shape.1 * shape.2;
            for image in batch.images.data_mut().chunks_mut(size) {
                let out = AugmentChoice::draw(rng).apply(image, shape);
                image.copy_from_slice(&out);
            }
        }
        Ok(batch)
    }

    /// Runs mixed-level search over the global epoch range `epochs`.
    /// Returns the mean training loss of the weight steps.
    pub fn search_epochs(&mut self, epochs: std::ops::Range<usize>, hyper: &SearchHyper) -> Result<f64, LocalError> {
        if !self.network.is_super() {
            return Err(LocalError::NotSearchable);
        }
        let mut total = 0.0;
        let mut steps = 0usize;
        for epoch in epochs {
            let mut train_rng = epoch_rng(self.rng_seed, 2 * epoch as u64);
            let mut val_rng = epoch_rng(self.rng_seed, 2 * epoch as u64 + 1);
            let mut train_order = self.shard.train.clone();
            train_order.shuffle(&mut train_rng);
            let mut val_order = self.shard.val.clone();
            val_order.shuffle(&mut val_rng);
            let val_take = hyper.batch_size.min(val_order.len());
            let mut cursor = 0;
            for (step, chunk) in train_order.chunks(hyper.batch_size).enumerate() {
                let train = self.train_batch(chunk, hyper.augment, &mut train_rng)?;
                let val_idx: Vec<usize> = (0..val_take).map(|i| val_order[(cursor + i) % val_order.len()]).collect();
                cursor = (cursor + val_take) % val_order.len();
                let val = Batch::from_dataset(&self.dataset, &val_idx)?;
                total += self.step_w_at(&train, hyper, epoch, step)?;
                self.step_alpha_at(&train, &val, hyper, epoch, step)?;
                steps += 1;
            }
            log::debug!("client {} finished search epoch {epoch}", self.client_id);
        }
        Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
    }

    /// Runs weight-only SGD over all local samples for the epoch range `epochs`.
    pub fn train_epochs(&mut self, epochs: std::ops::Range<usize>, hyper: &SearchHyper) -> Result<f64, LocalError> {
        let mut total = 0.0;
        let mut steps = 0usize;
        for epoch in epochs {
            let mut rng = epoch_rng(self.rng_seed, 2 * epoch as u64);
            let mut order = self.shard.all_indices();
            order.shuffle(&mut rng);
            for (step, chunk) in order.chunks(hyper.batch_size).enumerate() {
                let batch = self.train_batch(chunk, hyper.augment, &mut rng)?;
                total += self.step_w_at(&batch, hyper, epoch, step)?;
                steps += 1;
            }
            log::debug!("client {} finished training epoch {epoch}", self.client_id);
        }
        Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
    }

    fn load(&mut self, w_in: &ModelWeights, alpha_in: Option<&ArchParams>) -> Result<(), LocalError> {
        if self.shard.is_empty() {
            return Err(LocalError::EmptyShard { client: self.client_id });
        }
        self.store.set_weights(w_in)?;
        if let Some(a) = alpha_in {
            self.network.set_arch_params(&mut self.store, a)?;
        }
        self.velocity = None;
        Ok(())
    }
}

/// Local search for one round: `E` epochs of (weight step, α step) per
/// training minibatch, starting from the broadcast parameters.
pub fn client_local_search(
    state: &mut ClientState,
    w_in: &ModelWeights,
    alpha_in: &ArchParams,
    round: usize,
    hyper: &SearchHyper,
) -> Result<LocalOutcome, LocalError> {
    hyper.validate()?;
    state.load(w_in, Some(alpha_in))?;
    let e = hyper.local_epochs;
    let mean_train_loss = state.search_epochs(round * e..(round + 1) * e, hyper)?;
    Ok(LocalOutcome {
        weights: state.store.weights(),
        arch: state.arch(),
        n_k: state.shard.len(),
        mean_train_loss,
    })
}

/// FedAvg local update for one round: `E` epochs of weight SGD.
pub fn client_local_train(
    state: &mut ClientState,
    w_in: &ModelWeights,
    round: usize,
    hyper: &SearchHyper,
) -> Result<LocalOutcome, LocalError> {
    hyper.validate()?;
    state.load(w_in, None)?;
    let e = hyper.local_epochs;
    let mean_train_loss = state.train_epochs(round * e..(round + 1) * e, hyper)?;
    Ok(LocalOutcome {
        weights: state.store.weights(),
        arch: None,
        n_k: state.shard.len(),
        mean_train_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
    /// `[count, classes]` logits in dataset order, when requested.
    pub logits: Option<Tensor>,
}

/// Mean cross-entropy and accuracy over `dataset`, in fixed batches of
/// `batch_size` taken in dataset order. Batch norm uses each batch's statistics.
pub fn evaluate(
    network: &Network,
    store: &ParamStore,
    dataset: &Dataset,
    batch_size: usize,
    keep_logits: bool,
) -> Result<Evaluation, LocalError> {
    if dataset.is_empty() {
        return Err(LocalError::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let classes = network.spec().num_classes;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut logits_out = Vec::new();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = Batch::from_dataset(dataset, chunk)?;
        let mut graph = ComputeGraph::new();
        let (loss, logits) = network.loss(&mut graph, store, &batch.images, &batch.labels)?;
        let value = graph.value(loss).item().unwrap_or(f64::NAN);
        loss_sum += value * chunk.len() as f64;
        let lt = graph.value(logits);
        correct += lt
            .data()
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        if keep_logits {
            logits_out.extend_from_slice(lt.data());
        }
    }
    let count = dataset.len();
    let logits = keep_logits
        .then(|| Tensor::new(vec![count, classes], logits_out))
        .transpose()
        .map_err(AutodiffError::from)?;
    let eval = Evaluation {
        loss: loss_sum / count as f64,
        accuracy: correct as f64 / count as f64,
        correct,
        count,
        logits,
    };
    debug_assert!(eval.logits.as_ref().is_none_or(|l| accuracy(l, dataset.labels()) == eval.accuracy));
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SyntheticSpec};
    use crate::search_space::{build_super_network, NetworkSpec};

    fn tiny() -> (ClientState, Batch, Batch) {
        let spec = NetworkSpec {
            num_cells: 3,
            init_channels: 4,
            num_classes: 3,
            input_shape: (3, 8, 8),
        };
        let data = synthesize_dataset(&SyntheticSpec {
            classes: 3,
            per_class: 4,
            shape: (3, 8, 8),
            seed: 5,
            difficulty: 0.0,
            stream: 0,
        })
        .unwrap();
        let (net, store) = build_super_network(&spec, 3).unwrap();
        let shard = ClientShard::from_indices(0, &(0..12).collect::<Vec<_>>(), 0.5, 1).unwrap();
        let train = Batch::from_dataset(&data, &shard.train[..4]).unwrap();
        let val = Batch::from_dataset(&data, &shard.val[..4]).unwrap();
        (ClientState::new(0, shard, 9, Arc::new(net), store, Arc::new(data)), train, val)
    }

    fn hyper() -> SearchHyper {
        SearchHyper {
            batch_size: 4,
            local_epochs: 1,
            augment: false,
            ..SearchHyper::default()
        }
    }

    #[test]
    fn zero_eta_w_keeps_weights() {
        let (mut s, train, _) = tiny();
        let before = s.store.clone();
        s.step_w(&train, &SearchHyper { eta_w: 0.0, ..hyper() }).unwrap();
        assert!(s.store.weights().bit_eq(&before.weights()));
    }

    #[test]
    fn step_w_leaves_alpha_and_step_alpha_leaves_w() {
        let (mut s, train, val) = tiny();
        let a0 = s.arch().unwrap();
        s.step_w(&train, &hyper()).unwrap();
        assert!(s.arch().unwrap().bit_eq(&a0));
        let w1 = s.store.weights();
        s.step_alpha(&train, &val, &hyper()).unwrap();
        assert!(s.store.weights().bit_eq(&w1));
        assert!(!s.arch().unwrap().bit_eq(&a0));
    }

    #[test]
    fn combined_gradient_is_sum_of_two_passes() {
        let (s, train, val) = tiny();
        let lambda = 0.7;
        let (_, _, g) = s.combined_alpha_gradient(&train, &val, lambda).unwrap();
        let (_, gt) = s.loss_and_gradient(&train, Section::Arch).unwrap();
        let (_, gv) = s.loss_and_gradient(&val, Section::Arch).unwrap();
        for (id, t) in g.iter() {
            for ((c, a), b) in t.data().iter().zip(gt.get(id).unwrap().data()).zip(gv.get(id).unwrap().data()) {
                assert!((c - (a + lambda * b)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (mut s, ..) = tiny();
        let w = s.store.weights();
        let a = s.arch().unwrap();
        let out = client_local_search(
            &mut s,
            &w,
            &a,
            0,
            &SearchHyper {
                local_epochs: 0,
                ..hyper()
            },
        )
        .unwrap();
        assert!(out.weights.bit_eq(&w));
        assert!(out.arch.unwrap().bit_eq(&a));
        assert_eq!(out.n_k, 12);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (mut s, train, _) = tiny();
        let bias = s.store.find("classifier.bias").unwrap();
        s.store.get_mut(bias).unwrap().data_mut()[0] = f64::MAX;
        s.store.get_mut(bias).unwrap().data_mut()[1] = -f64::MAX;
        let err = s.step_w(&train, &hyper()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn hyper_validation() {
        assert!(SearchHyper::default().validate().is_ok());
        assert!(SearchHyper { batch_size: 0, ..hyper() }.validate().is_err());
        assert!(SearchHyper { eta_w: -1.0, ..hyper() }.validate().is_err());
        assert!(SearchHyper {
            train_fraction: 1.0,
            ..hyper()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn evaluate_rejects_nothing_and_is_deterministic() {
        let (s, ..) = tiny();
        let a = evaluate(&s.network, &s.store, &s.dataset, 5, true).unwrap();
        let b = evaluate(&s.network, &s.store, &s.dataset, 5, false).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.correct, b.correct);
        assert_eq!(a.logits.unwrap().shape(), &[12, 3]);
    }
}
