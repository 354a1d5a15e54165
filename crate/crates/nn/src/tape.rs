//! Reverse-mode differentiation over a linear record of ops.

use crate::error::Result;
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are reported via
    /// [`Tape::bn_stats`].
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm op in training mode.
#[derive(Clone, Debug)]
pub struct BnStat<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId> },
    ConvT2 { x: NodeId, w: NodeId, b: Option<NodeId> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: NodeId },
    AvgPool2 { x: NodeId },
    MaxPool2 { x: NodeId, arg: Vec<u8> },
    Concat { parts: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Records a forward pass. Parameter leaves borrow from the [`ParamStore`].
pub struct Tape<'p, T: Float> {
    params: &'p ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
    bn_stats: Vec<BnStat<T>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    inputs: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn input(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self { params, mode, nodes: Vec::new(), param_nodes: vec![None; params.len()], bn_stats: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn bn_stats(&self) -> &[BnStat<T>] {
        &self.bn_stats
    }

    pub fn into_bn_stats(self) -> Vec<BnStat<T>> {
        self.bn_stats
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    fn opt_param(&mut self, id: Option<ParamId>) -> Option<NodeId> {
        id.map(|p| self.param(p))
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let (wn, bn) = (self.param(w), self.opt_param(b));
        let y = kernels::conv2d(self.value(x), self.value(wn), bn.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Conv2d { x, w: wn, b: bn }))
    }

    pub fn conv_transpose2x2(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let (wn, bn) = (self.param(w), self.opt_param(b));
        let y = kernels::conv_transpose2x2(self.value(x), self.value(wn), bn.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::ConvT2 { x, w: wn, b: bn }))
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<NodeId> {
        let (g, b) = (self.param(gamma), self.param(beta));
        match self.mode {
            Mode::Train => {
                let out = kernels::batch_norm_train(self.value(x), self.value(g), self.value(b))?;
                self.bn_stats.push(BnStat { running_mean, running_var, mean: out.mean, var: out.var_unbiased });
                Ok(self.push(
                    out.y,
                    Op::BatchNorm { x, gamma: g, beta: b, xhat: out.xhat, inv_std: out.inv_std, batch_stats: true },
                ))
            }
            Mode::Eval => {
                let (y, xhat, inv_std) = kernels::batch_norm_eval(
                    self.value(x),
                    self.value(g),
                    self.value(b),
                    self.params.get(running_mean),
                    self.params.get(running_var),
                )?;
                Ok(self.push(y, Op::BatchNorm { x, gamma: g, beta: b, xhat, inv_std, batch_stats: false }))
            }
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2 { x }))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, arg) = kernels::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { x, arg }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let y = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            kernels::concat_channels(&vals)?
        };
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(crate::Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let y = kernels::global_avg_pool(self.value(x));
        self.push(y, Op::GlobalAvgPool { x })
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let (wn, bn) = (self.param(w), self.opt_param(b));
        let y = kernels::linear(self.value(x), self.value(wn), bn.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w: wn, b: bn }))
    }

    /// Back-propagates the given output gradients through the record.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads, id, g);
        }
        let mut out = Gradients { params: vec![None; self.params.len()], inputs: Vec::new() };
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => out.inputs.push((NodeId(idx), g)),
                Op::Param(p) => out.params[p.index()] = Some(g),
                Op::Conv2d { x, w, b } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, cg.dx);
                    accumulate(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, cg.db);
                    }
                }
                Op::ConvT2 { x, w, b } => {
                    let cg = kernels::conv_transpose2x2_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, cg.dx);
                    accumulate(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, cg.db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let bg = kernels::batch_norm_backward(&g, xhat, inv_std, self.value(*gamma), *batch_stats);
                    accumulate(&mut grads, *x, bg.dx);
                    accumulate(&mut grads, *gamma, bg.dgamma);
                    accumulate(&mut grads, *beta, bg.dbeta);
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_backward(self.value(NodeId(idx)), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2 { x } => {
                    let dx = kernels::avg_pool2_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, arg } => {
                    let dx = kernels::max_pool2_backward(self.value(*x).shape(), arg, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let chans: Vec<usize> = parts.iter().map(|&p| self.value(p).c()).collect();
                    for (p, dp) in parts.iter().zip(kernels::split_channels(&g, &chans)) {
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::GlobalAvgPool { x } => {
                    let dx = kernels::global_avg_pool_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let lg = kernels::linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, lg.dx);
                    accumulate(&mut grads, *w, lg.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, lg.db);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full([1, 1, 1, 1], 3.0), ParamKind::Trainable);
        let mut tape = Tape::new(&store, Mode::Eval);
        let x = tape.input(Tensor::full([1, 1, 2, 2], 2.0));
        let y = tape.conv2d(x, w, None).unwrap();
        let z = tape.add(y, x).unwrap();
        let grads = tape.backward(vec![(z, Tensor::full([1, 1, 2, 2], 1.0))]).unwrap();
        // dz/dx = w + 1, dz/dw = sum(x)
        assert_eq!(grads.input(x).unwrap().data(), &[4.0; 4]);
        assert_eq!(grads.param(w).unwrap().data(), &[8.0]);
    }
}
