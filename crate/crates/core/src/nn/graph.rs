//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] borrows a [`ParamSet`], records every operation applied to
//! inputs and parameters, and back-propagates a scalar loss into a
//! [`Grads`] buffer. Graphs are built per sample and thrown away.

use super::ops::{self, ConvGeom};
use super::params::{Grads, ParamId, ParamSet};
use super::tensor::Tensor;
use crate::memory_net::read::{self, ReadCache};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Resize {
        x: NodeId,
        in_h: usize,
        in_w: usize,
    },
    AvgPool {
        x: NodeId,
        factor: usize,
    },
    MemoryRead {
        keys: Vec<NodeId>,
        values: Vec<NodeId>,
        query: NodeId,
        cache: Box<ReadCache<T>>,
    },
    GlobalAvg(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BceWithLogits {
        x: NodeId,
        target: Vec<T>,
    },
    SquaredError {
        x: NodeId,
        target: T,
    },
    WeightedSum(Vec<(NodeId, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
    record: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph that keeps the intermediate state needed by [`Graph::backward`].
    pub fn training(params: &'p ParamSet<T>) -> Self {
        Self::with_mode(params, true)
    }

    /// Forward-only graph; `backward` is unavailable.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamSet<T>, record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            record,
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.params.get(*p),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn take_value(&self, id: NodeId) -> Tensor<T> {
        self.value(id).clone()
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push(Tensor::zeros(&[0]), Op::Param(id), &[]);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> NodeId {
        let wn = self.param(w);
        let bn = b.map(|b| self.param(b));
        let keep = self.record;
        let (out, cols) = ops::conv2d_forward(
            self.value(x),
            self.params.get(w),
            b.map(|b| self.params.get(b)),
            geom,
            keep,
        );
        let mut inputs = vec![x, wn];
        inputs.extend(bn);
        self.push(
            out,
            Op::Conv {
                x,
                w: wn,
                b: bn,
                geom,
                cols,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values);
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn resize(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let (_, in_h, in_w) = self.value(x).chw();
        if (in_h, in_w) == (h, w) {
            return x;
        }
        let out = ops::resize_bilinear(self.value(x), h, w);
        self.push(out, Op::Resize { x, in_h, in_w }, &[x])
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (_, h, w) = self.value(x).chw();
        self.resize(x, 2 * h, 2 * w)
    }

    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let out = ops::avg_pool(self.value(x), factor);
        self.push(out, Op::AvgPool { x, factor }, &[x])
    }

    /// Key-value memory read. Keys are `[Ck, H, W]` maps (one per memory
    /// cell plus the query), values `[Cv, H, W]`. Output is `[Cv, H, W]`.
    pub fn memory_read(&mut self, keys: &[NodeId], values: &[NodeId], query: NodeId) -> NodeId {
        assert!(!keys.is_empty() && keys.len() == values.len());
        let (ck, h, w) = self.value(query).chw();
        let cv = self.value(values[0]).chw().0;
        let key_slices: Vec<&[T]> = keys.iter().map(|&k| self.value(k).data()).collect();
        let value_slices: Vec<&[T]> = values.iter().map(|&v| self.value(v).data()).collect();
        let stacked_k = read::stack_cells(&key_slices, ck);
        let stacked_v = read::stack_cells(&value_slices, cv);
        let (out, cache) = read::read_forward(&stacked_k, &stacked_v, self.value(query).data(), ck, cv);
        let mut inputs = keys.to_vec();
        inputs.extend_from_slice(values);
        inputs.push(query);
        self.push(
            Tensor::from_vec(&[cv, h, w], out),
            Op::MemoryRead {
                keys: keys.to_vec(),
                values: values.to_vec(),
                query,
                cache: Box::new(cache),
            },
            &inputs,
        )
    }

    /// Read weights `[P, Q]` of a memory-read node.
    pub fn read_weights(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::MemoryRead { cache, .. } => Some(&cache.weights),
            _ => None,
        }
    }

    pub fn global_avg(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let inv = T::lit(1.0 / (h * w) as f64);
        let out: Vec<T> = (0..c).map(|ci| self.value(x).channel(ci).iter().copied().sum::<T>() * inv).collect();
        self.push(Tensor::from_vec(&[c], out), Op::GlobalAvg(x), &[x])
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wn = self.param(w);
        let bn = self.param(b);
        let wt = self.params.get(w);
        let n_out = wt.shape()[0];
        let n_in = wt.shape()[1];
        let xv = self.value(x);
        assert_eq!(xv.len(), n_in, "linear input width");
        let mut out = self.params.get(b).data().to_vec();
        T::gemm(n_out, n_in, 1, wt.data(), false, xv.data(), false, &mut out, true);
        self.push(Tensor::from_vec(&[n_out], out), Op::Linear { x, w: wn, b: bn }, &[x, wn, bn])
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and `target`.
    pub fn bce_with_logits(&mut self, x: NodeId, target: &Tensor<T>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "BCE target size");
        let n = T::lit(xv.len() as f64);
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| ops::softplus(z) - y * z)
            .sum::<T>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        )
    }

    /// `(x - target)^2` for a single-element node.
    pub fn squared_error(&mut self, x: NodeId, target: T) -> NodeId {
        let v = self.value(x).data()[0];
        let d = v - target;
        self.push(Tensor::scalar(d * d), Op::SquaredError { x, target }, &[x])
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let v = terms.iter().map(|&(n, w)| self.value(n).data()[0] * w).sum();
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), &ids)
    }

    /// Back-propagate the scalar `loss` and return parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        let seed = Tensor::full(self.value(loss).shape(), T::one());
        self.backward_seeded(loss, seed)
    }

    /// Vector-Jacobian product: gradients of `<node, seed>`.
    pub fn backward_seeded(&self, loss: NodeId, seed: Tensor<T>) -> Grads<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(seed.shape(), self.value(loss).shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        let mut out = Grads::new(self.params.len());

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
            match &mut grads[id.0] {
                Some(a) => a.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let needs = |n: NodeId| self.nodes[n.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out.accumulate(*p, g),
                Op::Conv { x, w, b, geom, cols } => {
                    let cols = cols.as_deref().unwrap_or(&[]);
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), cols, self.value(*w), &g, *geom, needs(*x));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= y * (T::one() - y);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let (_, h, w) = node.value.chw();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).chw().0;
                        if needs(p) {
                            let slice = g.data()[offset * h * w..(offset + c) * h * w].to_vec();
                            acc(&mut grads, p, Tensor::from_vec(&[c, h, w], slice));
                        }
                        offset += c;
                    }
                }
                Op::Resize { x, in_h, in_w } => {
                    acc(&mut grads, *x, ops::resize_bilinear_backward(&g, *in_h, *in_w));
                }
                Op::AvgPool { x, factor } => {
                    let (_, h, w) = self.value(*x).chw();
                    acc(&mut grads, *x, ops::avg_pool_backward(&g, h, w, *factor));
                }
                Op::MemoryRead {
                    keys,
                    values,
                    query,
                    cache,
                } => {
                    let rg = read::read_backward(cache, g.data());
                    let n = keys.len();
                    let dk = read::unstack_cells(&rg.mem_keys, cache.key_dim, n);
                    let dv = read::unstack_cells(&rg.mem_values, cache.value_dim, n);
                    for (j, (dkj, dvj)) in dk.into_iter().zip(dv).enumerate() {
                        let ks = self.value(keys[j]).shape().to_vec();
                        let vs = self.value(values[j]).shape().to_vec();
                        acc(&mut grads, keys[j], Tensor::from_vec(&ks, dkj));
                        acc(&mut grads, values[j], Tensor::from_vec(&vs, dvj));
                    }
                    let qs = self.value(*query).shape().to_vec();
                    acc(&mut grads, *query, Tensor::from_vec(&qs, rg.query_key));
                }
                Op::GlobalAvg(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let inv = T::lit(1.0 / (h * w) as f64);
                    let mut d = Vec::with_capacity(c * h * w);
                    for ci in 0..c {
                        d.extend(std::iter::repeat_n(g.data()[ci] * inv, h * w));
                    }
                    acc(&mut grads, *x, Tensor::from_vec(&[c, h, w], d));
                }
                Op::Linear { x, w, b } => {
                    let wt = self.value(*w);
                    let (n_out, n_in) = (wt.shape()[0], wt.shape()[1]);
                    let xv = self.value(*x);
                    let mut dw = vec![T::zero(); n_out * n_in];
                    T::gemm(n_out, 1, n_in, g.data(), false, xv.data(), false, &mut dw, false);
                    acc(&mut grads, *w, Tensor::from_vec(&[n_out, n_in], dw));
                    acc(&mut grads, *b, g.clone());
                    if needs(*x) {
                        let mut dx = vec![T::zero(); n_in];
                        T::gemm(n_in, n_out, 1, wt.data(), true, g.data(), false, &mut dx, false);
                        let shape = xv.shape().to_vec();
                        acc(&mut grads, *x, Tensor::from_vec(&shape, dx));
                    }
                }
                Op::BceWithLogits { x, target } => {
                    let xv = self.value(*x);
                    let scale = g.data()[0] / T::lit(xv.len() as f64);
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&z, &y)| (ops::sigmoid(z) - y) * scale)
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), d));
                }
                Op::SquaredError { x, target } => {
                    let xv = self.value(*x);
                    let d = T::lit(2.0) * (xv.data()[0] - *target) * g.data()[0];
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), vec![d]));
                }
                Op::WeightedSum(terms) => {
                    for &(n, wgt) in terms {
                        if needs(n) {
                            let shape = self.value(n).shape().to_vec();
                            acc(&mut grads, n, Tensor::from_vec(&shape, vec![g.data()[0] * wgt]));
                        }
                    }
                }
            }
        }
        out
    }
}
