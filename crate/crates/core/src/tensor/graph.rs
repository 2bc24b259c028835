//! Reverse-mode tape over the layer primitives. The network forward pass
//! records one node per op; `backward` replays the tape in reverse and
//! accumulates gradients for parameters and inputs.

use std::collections::BTreeMap;

use super::ops::*;
use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Input,
    Param(usize),
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    UpsampleRepeat {
        x: NodeId,
        factor: usize,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Relu {
        x: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: Vec<(T, T)>,
    },
    Dropout {
        x: NodeId,
        p_drop: f64,
        keep: Vec<bool>,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    SoftmaxChannels {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
        ca: usize,
        cb: usize,
    },
    ScaleChannels {
        x: NodeId,
        gates: NodeId,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    /// None for Param nodes; their value lives in the parameter store.
    value: Option<Tensor<T>>,
}

/// Gradients collected by [`Graph::backward`].
pub struct ParamGrads<T: Scalar> {
    /// Indexed like the parameter store; None for parameters the graph never
    /// touched.
    pub params: Vec<Option<Tensor<T>>>,
    /// Gradients w.r.t. Input nodes, keyed by node id.
    pub inputs: BTreeMap<usize, Tensor<T>>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].op {
            Op::Param(i) => &self.params[*i],
            _ => self.nodes[id.0].value.as_ref().expect("op node has a value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, Some(t))
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        assert!(index < self.params.len(), "param index out of range");
        self.push(Op::Param(index), None)
    }

    /// Per-channel vector view of a (c, 1, 1, 1, 1) parameter node.
    fn channel_slice(&self, id: NodeId) -> &[T] {
        self.value(id).data()
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        self.conv3d_opt(x, w, Some(b), stride)
    }

    /// Conv with an optional bias; convs feeding an instance norm omit it
    /// (the norm would cancel it exactly).
    pub fn conv3d_opt(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let oc = self.value(w).shape()[0];
        let zeros;
        let bias: &[T] = match b {
            Some(id) => self.channel_slice(id),
            None => {
                zeros = vec![T::zero(); oc];
                &zeros
            }
        };
        let y = conv3d_forward(self.value(x), self.value(w), bias, stride)?;
        Ok(self.push(Op::Conv3d { x, w, b, stride }, Some(y)))
    }

    pub fn upsample_repeat(&mut self, x: NodeId, factor: usize) -> NodeId {
        let y = upsample_repeat_forward(self.value(x), factor);
        self.push(Op::UpsampleRepeat { x, factor }, Some(y))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let y = leaky_relu_forward(self.value(x), slope);
        self.push(Op::LeakyRelu { x, slope }, Some(y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = relu_forward(self.value(x));
        self.push(Op::Relu { x }, Some(y))
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let (y, saved) = instance_norm_forward(
            self.value(x),
            self.channel_slice(gamma),
            self.channel_slice(beta),
            eps,
        );
        self.push(
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                saved,
            },
            Some(y),
        )
    }

    pub fn dropout(&mut self, x: NodeId, p_drop: f64, rng: &mut Rng, training: bool) -> NodeId {
        let (y, keep) = dropout_forward(self.value(x), p_drop, rng, training);
        self.push(Op::Dropout { x, p_drop, keep }, Some(y))
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let (y, argmax) = global_max_pool_forward(self.value(x));
        self.push(Op::GlobalMaxPool { x, argmax }, Some(y))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = dense_forward(self.value(x), self.value(w), self.channel_slice(b))?;
        Ok(self.push(Op::Dense { x, w, b }, Some(y)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = sigmoid_forward(self.value(x));
        self.push(Op::Sigmoid { x }, Some(y))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let y = softmax_channels_forward(self.value(x));
        self.push(Op::SoftmaxChannels { x }, Some(y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = add_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, Some(y)))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        let y = concat_channels_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatChannels { a, b, ca, cb }, Some(y)))
    }

    pub fn scale_channels(&mut self, x: NodeId, gates: NodeId) -> Result<NodeId> {
        let y = scale_channels_forward(self.value(x), self.value(gates))?;
        Ok(self.push(Op::ScaleChannels { x, gates }, Some(y)))
    }

    /// Reverse sweep seeding `gout` at `output`. Node gradients are dropped
    /// as soon as they have been propagated.
    pub fn backward(&self, output: NodeId, gout: Tensor<T>) -> Result<ParamGrads<T>> {
        if gout.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "output grad {:?} vs output {:?}",
                    gout.shape(),
                    self.value(output).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(gout);
        let mut result = ParamGrads {
            params: (0..self.params.len()).map(|_| None).collect(),
            inputs: BTreeMap::new(),
        };

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {
                    accumulate(&mut result.inputs, id, g);
                }
                Op::Param(i) => {
                    add_opt(&mut result.params[*i], g);
                }
                Op::Conv3d { x, w, b, stride } => {
                    let (gx, gw, gb) =
                        conv3d_backward(self.value(*x), self.value(*w), *stride, &g)?;
                    add_node(&mut grads, *x, gx);
                    add_node(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let bshape = self.value(*b).shape();
                        add_node(&mut grads, *b, Tensor::from_vec(bshape, gb)?);
                    }
                }
                Op::UpsampleRepeat { x, factor } => {
                    let gx = upsample_repeat_backward(self.value(*x).shape(), *factor, &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = leaky_relu_backward(self.value(*x), *slope, &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let gx = relu_backward(self.value(*x), &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, ggamma, gbeta) = instance_norm_backward(
                        self.value(*x),
                        self.channel_slice(*gamma),
                        saved,
                        &g,
                    );
                    add_node(&mut grads, *x, gx);
                    let gshape = self.value(*gamma).shape();
                    add_node(&mut grads, *gamma, Tensor::from_vec(gshape, ggamma)?);
                    let bshape = self.value(*beta).shape();
                    add_node(&mut grads, *beta, Tensor::from_vec(bshape, gbeta)?);
                }
                Op::Dropout { x, p_drop, keep } => {
                    let gx = dropout_backward(*p_drop, keep, &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let gx = global_max_pool_backward(self.value(*x).shape(), argmax, &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = dense_backward(self.value(*x), self.value(*w), &g);
                    add_node(&mut grads, *x, gx);
                    add_node(&mut grads, *w, gw);
                    let bshape = self.value(*b).shape();
                    add_node(&mut grads, *b, Tensor::from_vec(bshape, gb)?);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[id].value.as_ref().expect("sigmoid saved output");
                    let gx = sigmoid_backward(y, &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::SoftmaxChannels { x } => {
                    let y = self.nodes[id].value.as_ref().expect("softmax saved output");
                    let gx = softmax_channels_backward(y, &g);
                    add_node(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    add_node(&mut grads, *a, g.clone());
                    add_node(&mut grads, *b, g);
                }
                Op::ConcatChannels { a, b, ca, cb } => {
                    let (ga, gb) = concat_channels_backward(*ca, *cb, &g);
                    add_node(&mut grads, *a, ga);
                    add_node(&mut grads, *b, gb);
                }
                Op::ScaleChannels { x, gates } => {
                    let (gx, gg) = scale_channels_backward(self.value(*x), self.value(*gates), &g);
                    add_node(&mut grads, *x, gx);
                    add_node(&mut grads, *gates, gg);
                }
            }
        }
        Ok(result)
    }
}

fn add_opt<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

fn add_node<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    add_opt(&mut grads[id.0], g);
}

fn accumulate<T: Scalar>(map: &mut BTreeMap<usize, Tensor<T>>, id: usize, g: Tensor<T>) {
    match map.get_mut(&id) {
        None => {
            map.insert(id, g);
        }
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}
