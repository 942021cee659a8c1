//! Named parameter storage shared by the encoders and the classifier.
//!
//! Every trainable tensor is a 2-D `f64` array registered under a dotted name
//! (`text_encoder.layer0.attn.wq`, `head.text.w`, ...) and tagged with the
//! optimizer group it belongs to.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder backbone weights, updated at the encoder learning rate.
    Encoder,
    /// Everything else: adapters, heads, fusion block, projections, routing.
    Main,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names; parameter layout is
    /// fixed by the model constructor so a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    /// Xavier-uniform initialised matrix.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, group, value)
    }

    /// Normal-ish initialisation with a given scale, used for embeddings.
    pub fn add_scaled<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_fn((rows, cols), |_| {
            let u: f64 = rng.random_range(-1.0..1.0);
            u * scale * 3f64.sqrt()
        });
        self.add(name, group, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Array2::ones((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.params[id.0].value.view()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Dense gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, shape: (usize, usize), grad: ArrayView2<'_, f64>) {
        let slot = self.slots[id.0].get_or_insert_with(|| Array2::zeros(shape));
        *slot += &grad;
    }

    /// Adds `grad` into rows `rows[i]` of the slot (embedding scatter).
    pub fn scatter_rows(&mut self, id: ParamId, shape: (usize, usize), rows: &[usize], grad: ArrayView2<'_, f64>) {
        let slot = self.slots[id.0].get_or_insert_with(|| Array2::zeros(shape));
        for (i, &r) in rows.iter().enumerate() {
            let mut dst = slot.row_mut(r);
            dst += &grad.row(i);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.slots[id.0].as_ref()
    }

    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Array2<f64> {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(store.get(id).value.dim()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
