//! Named parameter storage shared by the model, the optimizer and checkpoints.

use crate::error::{KwsError, Result};
use crate::tensor::{BatchStats, Graph, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub(crate) usize);

/// Trainable tensors and batch-norm running statistics, in canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<(String, Tensor)>,
    norms: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.tensors.push((name.into(), t));
        ParamId(self.tensors.len() - 1)
    }

    pub(crate) fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> NormId {
        self.norms.push((name.into(), RunningStats::new(channels)));
        NormId(self.norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn norm(&self, id: NormId) -> &RunningStats {
        &self.norms[id.0].1
    }

    pub fn norm_mut(&mut self, id: NormId) -> &mut RunningStats {
        &mut self.norms[id.0].1
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.norms.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn find_norm(&self, name: &str) -> Option<NormId> {
        self.norms.iter().position(|(n, _)| n == name).map(NormId)
    }

    pub fn num_norms(&self) -> usize {
        self.norms.len()
    }

    /// Puts every tensor on `g` as a leaf, in canonical order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.set_requires_grad(requires_grad);
                g.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    pub fn apply_updates(&mut self, updates: &[(NormId, BatchStats)]) {
        for (id, b) in updates {
            self.norm_mut(*id).update(b);
        }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.1.shape() != t.shape() {
            return Err(KwsError::dim("set parameter", slot.1.shape(), t.shape()));
        }
        slot.1 = t;
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars that are already on a graph, in canonical parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
