//! Tape-based reverse-mode differentiation.
//!
//! A `Graph` is a flat tape of nodes; every op appends a node holding its
//! value and the ids of its parents. `backward` walks the tape in reverse and
//! accumulates gradients for every node reachable from a trainable leaf.
//! Leaves created with `requires_grad = false` (frozen parameters, inputs,
//! constants) receive no gradient entry.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// Row-broadcast bias add: `[n,m] + [m]`.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax over the last axis of a matrix.
    Softmax(NodeId),
    Sum(NodeId),
    /// Mean over the batch of -log softmax(logits)[label].
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Smoothed complement of the overlap ratio, averaged over rows.
    DiceLoss { pred: NodeId, target: Tensor, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid_stable(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max-subtraction.
pub(crate) fn softmax_rows(z: &Tensor) -> Tensor {
    let cols = z.last_dim();
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Tensor::new(z.shape().to_vec(), out).expect("softmax output finite")
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let t = self.value(id);
        if t.len() != 1 {
            return Err(Error::Usage(format!(
                "expected scalar node, shape is {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        value.check_finite("graph op output")?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.value(x).dims2()?;
        let bias = self.value(b);
        if bias.shape() != [m] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match activation {:?}",
                bias.shape(),
                self.value(x).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += bias.data()[j];
            }
        }
        let rg = self.requires(x) || self.requires(b);
        self.push(Tensor::new(vec![n, m], data)?, Op::AddBias(x, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).scale(c);
        let rg = self.requires(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid_stable);
        let rg = self.requires(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).dims2()?;
        let v = softmax_rows(self.value(x));
        let rg = self.requires(x);
        self.push(v, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits));
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs.at2(i, y).ln();
        }
        loss /= n as f64;
        let rg = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    pub fn dice_loss(&mut self, pred: NodeId, target: &Tensor, eps: f64) -> Result<NodeId> {
        let (n, m) = self.value(pred).dims2()?;
        if target.shape() != self.value(pred).shape() {
            return Err(Error::Shape(format!(
                "dice target {:?} vs pred {:?}",
                target.shape(),
                self.value(pred).shape()
            )));
        }
        if self.value(pred).data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("dice prediction outside [0,1]".into()));
        }
        if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("dice target must be binary".into()));
        }
        let p = self.value(pred).data();
        let t = target.data();
        let mut loss = 0.0;
        for i in 0..n {
            let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
            for j in 0..m {
                inter += p[i * m + j] * t[i * m + j];
                psum += p[i * m + j];
                tsum += t[i * m + j];
            }
            loss += 1.0 - (2.0 * inter + eps) / (psum + tsum + eps);
        }
        loss /= n as f64;
        let rg = self.requires(pred);
        self.push(
            Tensor::scalar(loss),
            Op::DiceLoss {
                pred,
                target: target.clone(),
                eps,
            },
            rg,
        )
    }

    /// Gradient of `loss` w.r.t. every node, indexed by node id. Entries are
    /// `None` for nodes that do not require a gradient or are unreachable.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty graph".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::Usage(format!("backward on unknown node {loss}")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, shape is {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.requires(loss) {
            return Ok(grads);
        }
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        // Drop gradients for nodes that never asked for them.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(grads)
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.requires(id) {
            return Ok(());
        }
        grads[id] = Some(match grads[id].take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.requires(*a) {
                    let gb = g.matmul(&self.value(*b).transpose2()?)?;
                    self.add_grad(grads, *a, gb)?;
                }
                if self.requires(*b) {
                    let ga = self.value(*a).transpose2()?.matmul(g)?;
                    self.add_grad(grads, *b, ga)?;
                }
            }
            Op::AddBias(x, b) => {
                self.add_grad(grads, *x, g.clone())?;
                if self.requires(*b) {
                    let (n, m) = g.dims2()?;
                    let mut col = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            col[j] += g.data()[i * m + j];
                        }
                    }
                    self.add_grad(grads, *b, Tensor::new(vec![m], col)?)?;
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone())?;
                self.add_grad(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone())?;
                self.add_grad(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.add_grad(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires(*b) {
                    self.add_grad(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, c) => {
                self.add_grad(grads, *x, g.scale(*c))?;
            }
            Op::Relu(x) => {
                let gx = self.value(*x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                self.add_grad(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let s = &self.nodes[id].value;
                let gx = s.zip_map(g, |sv, gv| gv * sv * (1.0 - sv))?;
                self.add_grad(grads, *x, gx)?;
            }
            Op::Softmax(x) => {
                let y = &self.nodes[id].value;
                let (n, m) = y.dims2()?;
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.data()[i * m + j] * y.data()[i * m + j];
                    }
                    for j in 0..m {
                        gx[i * m + j] = y.data()[i * m + j] * (g.data()[i * m + j] - dot);
                    }
                }
                self.add_grad(grads, *x, Tensor::new(vec![n, m], gx)?)?;
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                let gx = Tensor::zeros(self.value(*x).shape().to_vec()).map(|_| s);
                self.add_grad(grads, *x, gx)?;
            }
            Op::CrossEntropy { logits, labels } => {
                let probs = softmax_rows(self.value(*logits));
                let (n, c) = probs.dims2()?;
                let scale = g.data()[0] / n as f64;
                let mut gx = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * c + y] -= 1.0;
                }
                for v in gx.iter_mut() {
                    *v *= scale;
                }
                self.add_grad(grads, *logits, Tensor::new(vec![n, c], gx)?)?;
            }
            Op::DiceLoss { pred, target, eps } => {
                let p = self.value(*pred);
                let (n, m) = p.dims2()?;
                let scale = g.data()[0] / n as f64;
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
                    for j in 0..m {
                        inter += p.data()[i * m + j] * target.data()[i * m + j];
                        psum += p.data()[i * m + j];
                        tsum += target.data()[i * m + j];
                    }
                    let num = 2.0 * inter + eps;
                    let den = psum + tsum + eps;
                    for j in 0..m {
                        let t = target.data()[i * m + j];
                        gx[i * m + j] = scale * (-(2.0 * t) / den + num / (den * den));
                    }
                }
                self.add_grad(grads, *pred, Tensor::new(vec![n, m], gx)?)?;
            }
        }
        Ok(())
    }
}
