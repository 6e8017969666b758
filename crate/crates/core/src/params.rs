//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Embeddings and the per-modality encoder stacks.
    Backbone,
    /// Fusion stack, prediction heads and prompts.
    Head,
}

/// Role of a parameter, which decides weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    PromptPool,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    meta: Vec<ParamMeta>,
    values: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: ParamGroup,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.meta.push(ParamMeta { name, group, kind });
        self.values.push(value);
        self.frozen.push(false);
        Ok(id)
    }

    /// Weight drawn from `N(0, std²)`.
    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        kind: ParamKind,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(data, shape)?, group, kind)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape), group, ParamKind::Bias)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(vec![T::one(); n], shape)?, group, ParamKind::NormGain)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.values[id.0])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Names in lexicographic order with their ids.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.by_name.iter().map(|(n, &id)| (n.as_str(), id))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Places the parameter on `g`, once per graph.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(id.0, || self.values[id.0].clone(), !self.frozen[id.0])
    }

    /// Gradients of every bound, trainable parameter after `g.backward`.
    pub fn collect_grads(&self, g: &Graph<T>) -> BTreeMap<ParamId, Tensor<T>> {
        g.bound_params()
            .filter_map(|(id, v)| g.grad(v).map(|t| (ParamId(id), t)))
            .collect()
    }
}
