use wxadapt_autograd::{BatchNormState, BnMode, Graph, NodeId, Scalar, Tensor};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

/// Named parameters in declaration order plus batch-norm running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.bn_names.push(name.into());
        self.bn.push(BatchNormState::new(channels));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (n, f) in self.names.iter().zip(&mut self.frozen) {
            if n.starts_with(prefix) {
                *f = frozen;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.names[id.0].starts_with(prefix))
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// One forward pass: parameters are placed on the tape the first time they
/// are used; frozen ones enter as constants.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<NodeId>>,
    pub bn_mode: BnMode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a mut ParamStore<T>, bn_mode: BnMode) -> Self {
        let n = store.len();
        Ctx {
            g,
            store,
            bound: vec![None; n],
            bn_mode,
        }
    }

    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let value = self.store.tensors[id.0].clone();
        let n = if self.store.frozen[id.0] {
            self.g.constant(value)
        } else {
            self.g.param(value)
        };
        self.bound[id.0] = Some(n);
        n
    }

    /// Uses an existing tape node for a parameter.
    pub fn bind(&mut self, id: ParamId, node: NodeId) {
        self.bound[id.0] = Some(node);
    }

    pub fn bn(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, state: BnId) -> Result<NodeId> {
        let (gp, bp) = (self.p(gamma), self.p(beta));
        Ok(self.g.batchnorm2d(x, gp, bp, self.bn_mode, &mut self.store.bn[state.0])?)
    }

    /// Parameters placed on the tape so far, with their nodes.
    pub fn bound(&self) -> Vec<(ParamId, NodeId)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
            .collect()
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}
