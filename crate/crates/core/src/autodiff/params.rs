use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AutodiffError;
use crate::tensor::Tensor;

/// Dense parameter index, assigned in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which optimizer owns a parameter: network weights `w` or architecture `α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Section {
    Weight,
    Arch,
}

/// Selects the parameters whose gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionFilter {
    All,
    Only(Section),
}

impl SectionFilter {
    pub fn accepts(self, section: Section) -> bool {
        match self {
            SectionFilter::All => true,
            SectionFilter::Only(s) => s == section,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub section: Section,
    pub value: Tensor,
}

/// Ordered parameter collection. Iteration order is registration order, which
/// is a pure function of the network description, so a server and its clients
/// always agree on it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// The weight section of a store, flattened in id order. This is what travels
/// between server and clients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights(pub Vec<Tensor>);

impl ModelWeights {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn param_count(&self) -> usize {
        self.0.iter().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.bit_eq(b))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, section: Section, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            section,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> Result<&ParamEntry, AutodiffError> {
        self.entries.get(id.0).ok_or(AutodiffError::UnknownParam(id))
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor, AutodiffError> {
        self.entry(id).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor, AutodiffError> {
        self.entries
            .get_mut(id.0)
            .map(|e| &mut e.value)
            .ok_or(AutodiffError::UnknownParam(id))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), AutodiffError> {
        let slot = self.get_mut(id)?;
        if slot.shape() != value.shape() {
            return Err(AutodiffError::Shape {
                op: "param_set",
                detail: format!("param {} has shape {:?}, got {:?}", id.0, slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn section(&self, id: ParamId) -> Result<Section, AutodiffError> {
        self.entry(id).map(|e| e.section)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self, section: Section) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(move |(_, e)| e.section == section).map(|(id, _)| id)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, e)| e.name == name).map(|(id, _)| id)
    }

    /// Total number of scalar weights (the weight section only).
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.section == Section::Weight)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn weights(&self) -> ModelWeights {
        ModelWeights(
            self.entries
                .iter()
                .filter(|e| e.section == Section::Weight)
                .map(|e| e.value.clone())
                .collect(),
        )
    }

    pub fn set_weights(&mut self, weights: &ModelWeights) -> Result<(), AutodiffError> {
        let ids: Vec<ParamId> = self.ids(Section::Weight).collect();
        if ids.len() != weights.0.len() {
            return Err(AutodiffError::Shape {
                op: "set_weights",
                detail: format!("store has {} weight tensors, payload has {}", ids.len(), weights.0.len()),
            });
        }
        for (id, t) in ids.into_iter().zip(&weights.0) {
            self.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Copies every parameter whose name also exists in `other`, returning how
    /// many were copied. Shapes must agree.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Result<usize, AutodiffError> {
        let mut copied = 0;
        for i in 0..self.entries.len() {
            if let Some(src) = other.find(&self.entries[i].name) {
                let value = other.get(src)?.clone();
                self.set(ParamId(i), value)?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Gradient map produced by a backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match self.map.get_mut(&id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.map.insert(id, grad);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm over the gradients of one section.
    pub fn norm(&self, store: &ParamStore, section: Section) -> f64 {
        self.map
            .iter()
            .filter(|(id, _)| store.section(**id).map(|s| s == section).unwrap_or(false))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise `self + factor * other`, over the union of keys.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (id, g) in &other.map {
            let mut scaled = g.clone();
            scaled.scale(factor);
            self.accumulate(*id, scaled);
        }
    }
}

/// In-place `p <- p - lr * g` over one section. The other section is never
/// touched. `lr = 0` leaves every value bit-identical.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, section: Section, lr: f64) -> Result<(), AutodiffError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(AutodiffError::InvalidLearningRate(lr));
    }
    let ids: Vec<ParamId> = store.ids(section).collect();
    for id in &ids {
        if grads.get(*id).is_none() {
            return Err(AutodiffError::MissingGradient(*id));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for id in ids {
        let g = grads.get(id).expect("checked above");
        let p = store.get_mut(id)?;
        if p.shape() != g.shape() {
            return Err(AutodiffError::Shape {
                op: "sgd_step",
                detail: format!("param {} shape {:?} vs gradient {:?}", id.0, p.shape(), g.shape()),
            });
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut store = ParamStore::new();
        let p = store.register("p", Section::Weight, t(&[1.0, 2.0]));
        let mut g = Gradients::new();
        g.insert(p, t(&[1.0, 1.0]));
        sgd_step(&mut store, &g, Section::Weight, 0.5).unwrap();
        assert_eq!(store.get(p).unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn sgd_step_leaves_other_section_bit_identical() {
        let mut store = ParamStore::new();
        let w = store.register("w", Section::Weight, t(&[1.0, -3.0]));
        let a = store.register("a", Section::Arch, t(&[0.1, 0.2, 0.3]));
        let before = store.get(a).unwrap().clone();
        let mut g = Gradients::new();
        g.insert(w, t(&[0.25, 0.25]));
        g.insert(a, t(&[9.0, 9.0, 9.0]));
        sgd_step(&mut store, &g, Section::Weight, 0.1).unwrap();
        assert!(store.get(a).unwrap().bit_eq(&before));
    }

    #[test]
    fn sgd_step_missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.register("w", Section::Weight, t(&[1.0]));
        let err = sgd_step(&mut store, &Gradients::new(), Section::Weight, 0.1).unwrap_err();
        assert_eq!(err, AutodiffError::MissingGradient(w));
    }

    #[test]
    fn sgd_step_rejects_negative_lr() {
        let mut store = ParamStore::new();
        store.register("w", Section::Weight, t(&[1.0]));
        assert!(matches!(
            sgd_step(&mut store, &Gradients::new(), Section::Weight, -1.0),
            Err(AutodiffError::InvalidLearningRate(_))
        ));
    }

    #[test]
    fn parameter_count_counts_weights_only() {
        let mut store = ParamStore::new();
        assert_eq!(store.parameter_count(), 0);
        store.register("linear.weight", Section::Weight, Tensor::zeros(&[10, 10]));
        store.register("linear.bias", Section::Weight, Tensor::zeros(&[10]));
        store.register("alpha", Section::Arch, Tensor::zeros(&[14, 8]));
        assert_eq!(store.parameter_count(), 110);
    }

    #[test]
    fn set_weights_checks_shapes() {
        let mut store = ParamStore::new();
        store.register("w", Section::Weight, Tensor::zeros(&[2]));
        let bad = ModelWeights(vec![Tensor::zeros(&[3])]);
        assert!(store.set_weights(&bad).is_err());
        let good = ModelWeights(vec![t(&[4.0, 5.0])]);
        store.set_weights(&good).unwrap();
        assert_eq!(store.weights(), good);
    }
}
