//! Dense-network substrate: named parameter sets, layer specs, forward
//! builders over the autodiff tape, and the loss functions used by the
//! protocol.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, NodeId};
use crate::tensor::Tensor;
use crate::util::fnv1a64;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, uniquely named collection of parameters. Iteration order is
/// insertion order, which keeps aggregation and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Total number of scalar parameters, trainable or not.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn compatible_with(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((an, ap), (bn, bp))| an == bn && ap.value.shape() == bp.value.shape())
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((an, ap), (bn, bp))| an == bn && ap.value.bit_eq(&bp.value))
    }

    /// Content hash over names and raw bit patterns; used by freeze checks.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, p) in self.iter() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&p.value.byte_repr());
        }
        fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Affine only.
    Dense,
    /// Affine followed by ReLU.
    Relu,
    /// Affine followed by a row-wise softmax.
    SoftmaxOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize) -> Self {
        LayerSpec { kind, in_dim, out_dim }
    }

    /// Scalar parameters of this layer: `in*out` weights plus `out` biases.
    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Validates that consecutive layers chain.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Shape(format!(
                "layer {k} out_dim {} does not chain into layer {} in_dim {}",
                pair[0].out_dim,
                k + 1,
                pair[1].in_dim
            )));
        }
    }
    Ok(())
}

/// Body spec from hidden widths: ReLU layers with a linear feature output.
pub fn body_specs(in_dim: usize, widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(widths.len());
    let mut prev = in_dim;
    for (k, &w) in widths.iter().enumerate() {
        let kind = if k + 1 == widths.len() { LayerKind::Dense } else { LayerKind::Relu };
        specs.push(LayerSpec::new(kind, prev, w));
        prev = w;
    }
    specs
}

/// Single-layer classification head emitting logits.
pub fn head_specs(feature_dim: usize, classes: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::new(LayerKind::Dense, feature_dim, classes)]
}

pub fn specs_param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(|s| s.param_count()).sum()
}

/// Weights uniform in (-sqrt(1/in_dim), sqrt(1/in_dim)), biases zero.
/// Parameter names are `l{k}.w` / `l{k}.b`.
pub fn init_mlp(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<ParamSet> {
    validate_specs(specs)?;
    let mut params = ParamSet::new();
    for (k, spec) in specs.iter().enumerate() {
        let bound = (1.0 / spec.in_dim as f64).sqrt();
        let w: Vec<f64> = (0..spec.in_dim * spec.out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        params.insert(&format!("l{k}.w"), Tensor::matrix(spec.in_dim, spec.out_dim, w)?, true)?;
        params.insert(&format!("l{k}.b"), Tensor::zeros(vec![spec.out_dim]), true)?;
    }
    Ok(params)
}

/// Parameter leaves created during a forward build, qualified name -> node.
pub type Bindings = Vec<(String, NodeId)>;

/// Appends the MLP to the tape, creating one leaf per parameter. Leaves of
/// frozen parameters are created with `requires_grad = false`, so backward
/// produces no entry for them.
pub fn mlp_forward(
    g: &mut Graph,
    specs: &[LayerSpec],
    params: &ParamSet,
    prefix: &str,
    x: NodeId,
    binds: &mut Bindings,
) -> Result<NodeId> {
    let mut cur = x;
    for (k, spec) in specs.iter().enumerate() {
        let wname = format!("l{k}.w");
        let bname = format!("l{k}.b");
        let w = params.get(&wname)?;
        let b = params.get(&bname)?;
        let wn = g.leaf(w.value.clone(), w.trainable);
        let bn = g.leaf(b.value.clone(), b.trainable);
        binds.push((format!("{prefix}.{wname}"), wn));
        binds.push((format!("{prefix}.{bname}"), bn));
        cur = g.matmul(cur, wn).map_err(|e| {
            Error::Shape(format!("{prefix} layer {k}: {e}"))
        })?;
        cur = g.add_bias(cur, bn)?;
        cur = match spec.kind {
            LayerKind::Dense => cur,
            LayerKind::Relu => g.relu(cur)?,
            LayerKind::SoftmaxOutput => g.softmax(cur)?,
        };
    }
    Ok(cur)
}

/// Extracts gradients for the given bindings. Frozen parameters are absent.
pub fn collect_grads(
    g: &Graph,
    loss: NodeId,
    binds: &Bindings,
) -> Result<IndexMap<String, Tensor>> {
    let grads = g.backward(loss)?;
    let mut out = IndexMap::new();
    for (name, node) in binds {
        if let Some(grad) = &grads[*node] {
            out.insert(name.clone(), grad.clone());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pure (tape-free) forward operations.
// ---------------------------------------------------------------------------

/// `out[r,j] = sum_k x[r,k] w[k,j] + b[j]`
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.matmul(w)?;
    let (n, m) = y.dims2()?;
    if b.shape() != [m] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match output {:?}",
            b.shape(),
            y.shape()
        )));
    }
    let mut data = y.data().to_vec();
    for i in 0..n {
        for j in 0..m {
            data[i * m + j] += b.data()[j];
        }
    }
    Tensor::new(vec![n, m], data)
}

/// Max-shifted softmax over the last axis.
pub fn softmax(z: &Tensor) -> Tensor {
    softmax_rows(z)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let node = g.leaf(logits.clone(), false);
    let loss = g.cross_entropy(node, labels)?;
    g.scalar_value(loss)
}

pub const DICE_EPS: f64 = 1.0;

/// Smoothed Dice loss, averaged over the batch.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    dice_loss_eps(pred, target, DICE_EPS)
}

pub fn dice_loss_eps(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let node = g.leaf(pred.clone(), false);
    let loss = g.dice_loss(node, target, eps)?;
    g.scalar_value(loss)
}
