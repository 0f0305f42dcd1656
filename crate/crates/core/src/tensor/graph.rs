//! Append-only reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the inputs
//! and intermediates its backward rule needs. Node inputs always precede the
//! node, so a reverse sweep over the append order is a valid topological
//! traversal.

use crate::error::{Error, Result};
use crate::losses::{self, OrdinalPair};
use crate::real::{sigmoid, softplus, Real};
use crate::sdc::{self, SdcParams, SdcSaved};

use super::kernels::{self, add_channel_bias, channel_bias_grad};
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum LossOp<T> {
    Mse { gt: Tensor<T> },
    Si { gt: Tensor<T> },
    Rank { pairs: Vec<Vec<OrdinalPair>> },
    Msg { gt: Tensor<T>, scales: Vec<u32> },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    BiasAdd {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: T,
    },
    Relu {
        x: NodeId,
    },
    Softplus {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    ResizeAvg {
        x: NodeId,
        levels: u32,
    },
    Sdc {
        x: NodeId,
        w: NodeId,
        offsets: NodeId,
        dil_raw: NodeId,
        params: Box<SdcParams<T>>,
        saved: Box<SdcSaved<T>>,
    },
    Loss {
        pred: NodeId,
        op: LossOp<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BiasAdd { x, b } => vec![*x, *b],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Softplus { x }
            | Op::Sum { x }
            | Op::Upsample { x, .. }
            | Op::ResizeAvg { x, .. } => vec![*x],
            Op::Sdc {
                x,
                w,
                offsets,
                dil_raw,
                ..
            } => vec![*x, *w, *offsets, *dil_raw],
            Op::Loss { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward sweep: one gradient per node that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Graph(format!("unknown node {}", id.0)))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let y = kernels::conv2d(self.check(x)?, self.check(w)?, stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, stride, pad }))
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let y = add_channel_bias(self.check(x)?, self.check(b)?)?;
        Ok(self.push(y, Op::BiasAdd { x, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.check(a)?.zip_map(self.check(b)?, |p, q| p + q)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.check(a)?.zip_map(self.check(b)?, |p, q| p * q)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        let y = self.check(x)?.map(|v| v * k);
        Ok(self.push(y, Op::Scale { x, k }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.check(x)?.map(|v| v.max(T::zero()));
        Ok(self.push(y, Op::Relu { x }))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.check(x)?.map(softplus);
        Ok(self.push(y, Op::Softplus { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.check(x)?.sum());
        Ok(self.push(y, Op::Sum { x }))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if !factor.is_power_of_two() {
            return Err(Error::invalid("upsample factor must be a power of two"));
        }
        let y = kernels::upsample_nearest(self.check(x)?, factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }))
    }

    pub fn resize_avg(&mut self, x: NodeId, levels: u32) -> Result<NodeId> {
        let y = kernels::resize_avg(self.check(x)?, levels)?;
        Ok(self.push(y, Op::ResizeAvg { x, levels }))
    }

    pub fn sdc(
        &mut self,
        x: NodeId,
        w: NodeId,
        offsets: NodeId,
        dil_raw: NodeId,
    ) -> Result<NodeId> {
        for id in [w, offsets, dil_raw] {
            self.check(id)?;
        }
        let params = SdcParams {
            weight: self.value(w).clone(),
            offsets: self.value(offsets).clone(),
            dil_raw: self.value(dil_raw).clone(),
        };
        let (y, saved) = sdc::sdc_forward_saved(self.check(x)?, &params)?;
        Ok(self.push(
            y,
            Op::Sdc {
                x,
                w,
                offsets,
                dil_raw,
                params: Box::new(params),
                saved: Box::new(saved),
            },
        ))
    }

    pub fn mse(&mut self, pred: NodeId, gt: Tensor<T>) -> Result<NodeId> {
        let v = losses::loss_mse(self.check(pred)?, &gt)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Loss {
                pred,
                op: LossOp::Mse { gt },
            },
        ))
    }

    pub fn scale_invariant(&mut self, pred: NodeId, gt: Tensor<T>) -> Result<NodeId> {
        let v = losses::loss_si(self.check(pred)?, &gt)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Loss {
                pred,
                op: LossOp::Si { gt },
            },
        ))
    }

    pub fn rank(&mut self, pred: NodeId, pairs: Vec<Vec<OrdinalPair>>) -> Result<NodeId> {
        let v = losses::loss_rank_batch(self.check(pred)?, &pairs)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Loss {
                pred,
                op: LossOp::Rank { pairs },
            },
        ))
    }

    pub fn gradient_matching(
        &mut self,
        pred: NodeId,
        gt: Tensor<T>,
        scales: &[u32],
    ) -> Result<NodeId> {
        let v = losses::loss_msg(self.check(pred)?, &gt, scales)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Loss {
                pred,
                op: LossOp::Msg {
                    gt,
                    scales: scales.to_vec(),
                },
            },
        ))
    }

    /// Combined objective `mse + weight * relative`, see
    /// [`losses::loss_total`].
    pub fn loss_total(
        &mut self,
        pred: NodeId,
        gt: &Tensor<T>,
        cfg: &losses::LossConfig,
        pair_seed: u64,
    ) -> Result<NodeId> {
        use losses::LossVariant;
        cfg.validate()?;
        let mse = self.mse(pred, gt.clone())?;
        let rel = match cfg.variant {
            LossVariant::MseOnly => return Ok(mse),
            LossVariant::Si => self.scale_invariant(pred, gt.clone())?,
            LossVariant::Msg => self.gradient_matching(pred, gt.clone(), &cfg.msg_scales)?,
            LossVariant::Rank => {
                let pairs =
                    losses::sample_batch_pairs(gt, cfg.rank_pairs, cfg.rank_threshold, pair_seed)?;
                self.rank(pred, pairs)?
            }
        };
        let rel = if cfg.relative_weight == 1.0 {
            rel
        } else {
            self.scale(rel, T::of(cfg.relative_weight))?
        };
        self.add(mse, rel)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one. Leaves the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if !root.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, node {} has dims {:?}",
                loss.0,
                root.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.dims(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g)?;
            for (input, gi) in contributions {
                assert!(input.0 < idx, "tape order violated: {} -> {idx}", input.0);
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.dims()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *pad,
                    g,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gw.map(|t| (*w, t)));
            }
            Op::BiasAdd { x, b } => {
                if self.wants(*b) {
                    out.push((*b, channel_bias_grad(g)?));
                }
                out.push((*x, g.clone()));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                out.push((*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?));
                out.push((*b, g.zip_map(self.value(*a), |gv, av| gv * av)?));
            }
            Op::Scale { x, k } => out.push((*x, g.map(|v| v * *k))),
            Op::Relu { x } => out.push((
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
            )),
            Op::Softplus { x } => {
                out.push((*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv))?))
            }
            Op::Sum { x } => out.push((*x, Tensor::full(self.value(*x).dims(), g.item()))),
            Op::Upsample { x, factor } => {
                out.push((*x, kernels::upsample_nearest_backward(g, *factor)?))
            }
            Op::ResizeAvg { x, levels } => out.push((
                *x,
                kernels::resize_avg_backward(g, self.value(*x).dims(), *levels)?,
            )),
            Op::Sdc {
                x,
                w,
                offsets,
                dil_raw,
                params,
                saved,
            } => {
                let grads = sdc::sdc_backward(self.value(*x), params, saved, g)?;
                out.push((*x, grads.input));
                out.push((*w, grads.weight));
                out.push((*offsets, grads.offsets));
                out.push((*dil_raw, grads.dil_raw));
            }
            Op::Loss { pred, op } => {
                let p = self.value(*pred);
                let grad = match op {
                    LossOp::Mse { gt } => losses::loss_mse_grad(p, gt)?,
                    LossOp::Si { gt } => losses::loss_si_grad(p, gt)?,
                    LossOp::Rank { pairs } => losses::loss_rank_batch_grad(p, pairs)?,
                    LossOp::Msg { gt, scales } => losses::loss_msg_grad(p, gt, scales)?,
                };
                let k = g.item();
                out.push((*pred, grad.map(|v| v * k)));
            }
        }
        Ok(out)
    }
}
