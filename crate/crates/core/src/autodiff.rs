//! A small reverse-mode tape over the tensor and convolution primitives.
//!
//! Forward ops are recorded in execution order; nodes borrow their layer
//! parameters from the model for the tape's lifetime. `backward` walks the
//! nodes in reverse and chains the per-op VJPs. The tape can also log a
//! per-layer cost entry (params, MACs) for every parameterized op.

use crate::conv::{self, ConvKernel, StridedConv};
use crate::cost::LayerCost;
use crate::error::{Error, Result};
use crate::tensor::{self, BatchNorm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Node<'a> {
    Leaf,
    DwConv(Var, &'a ConvKernel),
    Pointwise(Var, &'a ConvKernel),
    Strided(Var, &'a StridedConv),
    BatchNorm(Var, &'a BatchNorm),
    Scale(Var, &'a [f64]),
    Gelu(Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    AvgPool(Var),
}

pub struct Tape<'a> {
    record: bool,
    values: Vec<Tensor>,
    nodes: Vec<Node<'a>>,
    costs: Option<Vec<LayerCost>>,
    aux_ops: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A recording tape; `backward` is available.
    pub fn new() -> Self {
        Self {
            record: true,
            values: Vec::new(),
            nodes: Vec::new(),
            costs: None,
            aux_ops: 0,
        }
    }

    /// A tape that only evaluates; `backward` reports [`Error::NotRecorded`].
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// Enable the per-layer cost log.
    pub fn instrumented(mut self) -> Self {
        self.costs = Some(Vec::new());
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn costs(&self) -> &[LayerCost] {
        self.costs.as_deref().unwrap_or(&[])
    }

    /// Elementwise operations executed (GELU, Hadamard, residual adds, BN and
    /// LayerScale applications, pooling), counted per output element.
    pub fn aux_ops(&self) -> u64 {
        self.aux_ops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Node::Leaf, t)
    }

    fn push(&mut self, node: Node<'a>, value: Tensor) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    fn log(&mut self, name: &str, params: usize, macs: u64) {
        if let Some(costs) = &mut self.costs {
            costs.push(LayerCost {
                layer: name.to_string(),
                params: params as u64,
                macs,
            });
        }
    }

    pub fn dw_conv(&mut self, name: &str, x: Var, kernel: &'a ConvKernel) -> Result<Var> {
        let (y, macs) = conv::dw_conv_counted(self.value(x), kernel)?;
        self.log(name, kernel.param_count(), macs);
        Ok(self.push(Node::DwConv(x, kernel), y))
    }

    pub fn pointwise(&mut self, name: &str, x: Var, kernel: &'a ConvKernel) -> Result<Var> {
        let (y, macs) = conv::pointwise_conv_counted(self.value(x), kernel)?;
        self.log(name, kernel.param_count(), macs);
        Ok(self.push(Node::Pointwise(x, kernel), y))
    }

    pub fn strided(&mut self, name: &str, x: Var, conv: &'a StridedConv) -> Result<Var> {
        let (y, macs) = conv.forward_counted(self.value(x))?;
        self.log(name, conv.param_count(), macs);
        Ok(self.push(Node::Strided(x, conv), y))
    }

    /// Frozen-statistics batch norm.
    pub fn batch_norm(&mut self, name: &str, x: Var, bn: &'a BatchNorm) -> Result<Var> {
        let y = bn.forward_frozen(self.value(x))?;
        self.aux_ops += y.len() as u64;
        self.log(name, bn.param_count(), 0);
        Ok(self.push(Node::BatchNorm(x, bn), y))
    }

    pub fn scale(&mut self, name: &str, x: Var, lambda: &'a [f64]) -> Result<Var> {
        let y = tensor::scale_channels(self.value(x), lambda)?;
        self.aux_ops += y.len() as u64;
        self.log(name, lambda.len(), 0);
        Ok(self.push(Node::Scale(x, lambda), y))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = tensor::gelu(self.value(x));
        self.aux_ops += y.len() as u64;
        self.push(Node::Gelu(x), y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::hadamard(self.value(a), self.value(b))?;
        self.aux_ops += y.len() as u64;
        Ok(self.push(Node::Hadamard(a, b), y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        self.aux_ops += y.len() as u64;
        Ok(self.push(Node::Add(a, b), y))
    }

    pub fn avg_pool(&mut self, x: Var) -> Var {
        let y = tensor::global_avg_pool(self.value(x));
        self.aux_ops += self.value(x).len() as u64;
        self.push(Node::AvgPool(x), y)
    }

    /// Reverse pass from `output` seeded with `seed` (same dims as the
    /// output). Returns the gradient reaching `wrt`.
    pub fn gradient(&self, output: Var, seed: Tensor, wrt: Var) -> Result<Tensor> {
        let mut grads = self.backward(output, seed)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.values[wrt.0].shape())))
    }

    /// Gradients for every recorded value; `None` where none flowed.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Vec<Option<Tensor>>> {
        if !self.record {
            return Err(Error::NotRecorded(output.0));
        }
        self.values[output.0].ensure_same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions: Vec<(Var, Tensor)> = match &self.nodes[i] {
                Node::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Node::DwConv(x, k) => vec![(*x, conv::dw_conv_vjp(self.value(*x), k, &g)?.input)],
                Node::Pointwise(x, k) => vec![(*x, conv::pointwise_conv_vjp(self.value(*x), k, &g)?.input)],
                Node::Strided(x, c) => vec![(*x, c.vjp(self.value(*x), &g)?.input)],
                Node::BatchNorm(x, bn) => vec![(*x, bn.vjp_frozen(self.value(*x), &g)?.input)],
                Node::Scale(x, l) => vec![(*x, tensor::scale_channels_vjp(self.value(*x), l, &g)?.0)],
                Node::Gelu(x) => vec![(*x, tensor::gelu_vjp(self.value(*x), &g)?)],
                Node::Hadamard(a, b) => {
                    let (ga, gb) = tensor::hadamard_vjp(self.value(*a), self.value(*b), &g)?;
                    vec![(*a, ga), (*b, gb)]
                }
                Node::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
                Node::AvgPool(x) => vec![(*x, tensor::global_avg_pool_vjp(self.value(*x).shape(), &g)?)],
            };
            for (v, c) in contributions {
                accumulate(&mut grads[v.0], c)?;
            }
        }
        Ok(grads)
    }
}

/// Anything that can replay its forward pass onto a tape.
pub trait Recordable {
    fn record<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<Var>;
}

impl Recordable for ConvKernel {
    fn record<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<Var> {
        if self.kind().is_depthwise() {
            tape.dw_conv("dw", input, self)
        } else {
            tape.pointwise("pw", input, self)
        }
    }
}

impl Recordable for crate::attention::AttentionModule {
    fn record<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<Var> {
        crate::attention::AttentionModule::record(self, tape, "attn", input)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => tensor::add(&prev, &g)?,
        None => g,
    });
    Ok(())
}
