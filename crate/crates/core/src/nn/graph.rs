//! The network is written once against [`Graph`]; [`Eager`] evaluates it
//! directly and [`Tape`] records it for reverse-mode differentiation.

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, Activation};
use super::params::{Conv2d, ParamStore};
use crate::tensor::{Float, Tensor};

pub trait Graph<T: Float> {
    type Var: Clone;

    fn params(&self) -> &ParamStore<T>;
    fn input(&mut self, value: Tensor<T>) -> Self::Var;
    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor<T>;

    fn conv(&mut self, x: &Self::Var, layer: &Conv2d, act: Activation) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn concat(&mut self, parts: &[&Self::Var]) -> Self::Var;
    /// `(1 − gate) ⊙ prev + gate ⊙ candidate`.
    fn blend(&mut self, prev: &Self::Var, gate: &Self::Var, candidate: &Self::Var) -> Self::Var;
    /// `clamp(base + delta, 0, 1)`.
    fn add_clamp_unit(&mut self, base: &Self::Var, delta: &Self::Var) -> Self::Var;
    /// `clamp(x, 0, 1)`.
    fn clamp_unit(&mut self, x: &Self::Var) -> Self::Var;
}

fn blend_values<T: Float>(prev: &Tensor<T>, gate: &Tensor<T>, cand: &Tensor<T>) -> Tensor<T> {
    let mut out = prev.clone();
    for ((o, &g), &c) in out.data_mut().iter_mut().zip(gate.data()).zip(cand.data()) {
        *o = (T::ONE - g) * *o + g * c;
    }
    out
}

#[inline]
fn clamp_unit<T: Float>(v: T) -> T {
    if v < T::ZERO {
        T::ZERO
    } else if v > T::ONE {
        T::ONE
    } else {
        v
    }
}

fn concat_values<T: Float>(parts: &[&Tensor<T>]) -> Tensor<T> {
    Tensor::concat(parts).expect("graph concat: operands share spatial size")
}

fn conv_values<T: Float>(params: &ParamStore<T>, x: &Tensor<T>, layer: &Conv2d, act: Activation) -> Tensor<T> {
    debug_assert_eq!(x.channels(), layer.in_channels, "conv input channels");
    conv2d_forward(
        x,
        params.data(layer.weight),
        params.data(layer.bias),
        layer.out_channels,
        layer.kernel,
        act,
    )
}

/// Direct evaluation; keeps nothing beyond the values still referenced.
pub struct Eager<'p, T> {
    params: &'p ParamStore<T>,
}

impl<'p, T: Float> Eager<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Eager { params }
    }
}

impl<T: Float> Graph<T> for Eager<'_, T> {
    type Var = Arc<Tensor<T>>;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn input(&mut self, value: Tensor<T>) -> Self::Var {
        Arc::new(value)
    }

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor<T> {
        var
    }

    fn conv(&mut self, x: &Self::Var, layer: &Conv2d, act: Activation) -> Self::Var {
        Arc::new(conv_values(self.params, x, layer, act))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Arc::new(a.zip_map(b, |x, y| x + y))
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Arc::new(a.zip_map(b, |x, y| x * y))
    }

    fn concat(&mut self, parts: &[&Self::Var]) -> Self::Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        Arc::new(concat_values(&refs))
    }

    fn blend(&mut self, prev: &Self::Var, gate: &Self::Var, candidate: &Self::Var) -> Self::Var {
        Arc::new(blend_values(prev, gate, candidate))
    }

    fn add_clamp_unit(&mut self, base: &Self::Var, delta: &Self::Var) -> Self::Var {
        Arc::new(base.zip_map(delta, |a, b| clamp_unit(a + b)))
    }

    fn clamp_unit(&mut self, x: &Self::Var) -> Self::Var {
        Arc::new(x.map(clamp_unit))
    }
}

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv { x: usize, layer: Conv2d, act: Activation },
    Add(usize, usize),
    Mul(usize, usize),
    Concat(Vec<usize>),
    Blend { prev: usize, gate: usize, cand: usize },
    AddClamp { base: usize, delta: usize },
    Clamp(usize),
}

/// Records every intermediate value for a single backward pass.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    values: Vec<Tensor<T>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse pass. `seeds` are `∂loss/∂node` for the loss-carrying nodes;
    /// the result holds `∂loss/∂param` in [`ParamStore`] layout.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor<T>)>) -> Vec<Vec<T>> {
        let mut param_grads = self.params.zeros_like();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        for (id, g) in seeds {
            accumulate(&mut grads[id.0], g);
        }
        for i in (0..self.values.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            match &self.ops[i] {
                Op::Input => {}
                Op::Conv { x, layer, act } => {
                    let y = &self.values[i];
                    let mut pre = g;
                    if *act != Activation::Identity {
                        for (d, &yv) in pre.data_mut().iter_mut().zip(y.data()) {
                            *d *= act.derivative_from_output(yv);
                        }
                    }
                    let (gw, gb) = two_mut(&mut param_grads, layer.weight.index(), layer.bias.index());
                    let dx = conv2d_backward(
                        &self.values[*x],
                        self.params.data(layer.weight),
                        layer.out_channels,
                        layer.kernel,
                        &pre,
                        gw,
                        gb,
                        self.needs_grad[*x],
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad[*a] {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.needs_grad[*b] {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad[*a] {
                        accumulate(&mut grads[*a], g.zip_map(&self.values[*b], |d, v| d * v));
                    }
                    if self.needs_grad[*b] {
                        accumulate(&mut grads[*b], g.zip_map(&self.values[*a], |d, v| d * v));
                    }
                }
                Op::Concat(parts) => {
                    let plane = g.plane_len();
                    let (_, h, w) = g.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.values[p].channels();
                        if self.needs_grad[p] {
                            let slice = g.data()[offset * plane..(offset + c) * plane].to_vec();
                            accumulate(&mut grads[p], Tensor::from_vec(c, h, w, slice).expect("concat split"));
                        }
                        offset += c;
                    }
                }
                Op::Blend { prev, gate, cand } => {
                    let (pv, gv, cv) = (&self.values[*prev], &self.values[*gate], &self.values[*cand]);
                    if self.needs_grad[*prev] {
                        accumulate(&mut grads[*prev], g.zip_map(gv, |d, x| d * (T::ONE - x)));
                    }
                    if self.needs_grad[*gate] {
                        let mut dg = g.clone();
                        for ((d, &p), &c) in dg.data_mut().iter_mut().zip(pv.data()).zip(cv.data()) {
                            *d *= c - p;
                        }
                        accumulate(&mut grads[*gate], dg);
                    }
                    if self.needs_grad[*cand] {
                        accumulate(&mut grads[*cand], g.zip_map(gv, |d, x| d * x));
                    }
                }
                Op::AddClamp { base, delta } => {
                    let mut d = g;
                    for ((dv, &a), &b) in d
                        .data_mut()
                        .iter_mut()
                        .zip(self.values[*base].data())
                        .zip(self.values[*delta].data())
                    {
                        let s = a + b;
                        if s < T::ZERO || s > T::ONE {
                            *dv = T::ZERO;
                        }
                    }
                    if self.needs_grad[*base] {
                        accumulate(&mut grads[*base], d.clone());
                    }
                    if self.needs_grad[*delta] {
                        accumulate(&mut grads[*delta], d);
                    }
                }
                Op::Clamp(x) => {
                    let mut d = g;
                    for (dv, &v) in d.data_mut().iter_mut().zip(self.values[*x].data()) {
                        if v < T::ZERO || v > T::ONE {
                            *dv = T::ZERO;
                        }
                    }
                    accumulate(&mut grads[*x], d);
                }
            }
        }
        param_grads
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

impl<T: Float> Graph<T> for Tape<'_, T> {
    type Var = NodeId;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    fn value<'a>(&'a self, var: &'a NodeId) -> &'a Tensor<T> {
        &self.values[var.0]
    }

    fn conv(&mut self, x: &NodeId, layer: &Conv2d, act: Activation) -> NodeId {
        let v = conv_values(self.params, &self.values[x.0], layer, act);
        self.push(v, Op::Conv { x: x.0, layer: *layer, act }, true)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    fn concat(&mut self, parts: &[&NodeId]) -> NodeId {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let v = concat_values(&refs);
        let ng = parts.iter().any(|p| self.needs_grad[p.0]);
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()), ng)
    }

    fn blend(&mut self, prev: &NodeId, gate: &NodeId, candidate: &NodeId) -> NodeId {
        let v = blend_values(&self.values[prev.0], &self.values[gate.0], &self.values[candidate.0]);
        let ng = self.needs_grad[prev.0] || self.needs_grad[gate.0] || self.needs_grad[candidate.0];
        self.push(
            v,
            Op::Blend {
                prev: prev.0,
                gate: gate.0,
                cand: candidate.0,
            },
            ng,
        )
    }

    fn add_clamp_unit(&mut self, base: &NodeId, delta: &NodeId) -> NodeId {
        let v = self.values[base.0].zip_map(&self.values[delta.0], |a, b| clamp_unit(a + b));
        let ng = self.needs_grad[base.0] || self.needs_grad[delta.0];
        self.push(
            v,
            Op::AddClamp {
                base: base.0,
                delta: delta.0,
            },
            ng,
        )
    }

    fn clamp_unit(&mut self, x: &NodeId) -> NodeId {
        let v = self.values[x.0].map(clamp_unit);
        let ng = self.needs_grad[x.0];
        self.push(v, Op::Clamp(x.0), ng)
    }
}
