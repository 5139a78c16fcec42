//! Named parameter storage.

use crate::tensor::Float;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    ErasingModule,
    /// Prediction head of the variant without an erasing module.
    DirectHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub data: Vec<T>,
}

impl<T> Param<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of parameters. Order is creation order and is part
/// of the checkpoint contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, data: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, shape, group, data });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Zero-filled buffers with the same layout, for gradients and moments.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    group: p.group,
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Handle to one convolution layer's weight and bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn numel(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}
