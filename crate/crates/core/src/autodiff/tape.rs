use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, norm, Activation, ConvSpec, Phase};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: norm::BnCache<T>, phase: Phase },
    Activation { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    GlobalAvgPool { x: Var },
    StackLast { parts: Vec<Var> },
    Mode4 { m: Var, s: Var },
    Concat { parts: Vec<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Sum { x: Var },
    Dot { x: Var, weights: Tensor<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run record of executed kernels.
///
/// Nodes are appended in execution order and [`Tape::backward`] walks them in
/// exact reverse. Gradients accumulate across uses of a value (fan-out).
/// A tape is meant to be swept once; persistent parameter gradients live in
/// the parameter store and accumulate there until the optimizer clears them.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zero if nothing reached `v`.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| node.value.zeros_like())
    }

    pub fn grad_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// FNV-1a over the on/off pattern of every rectifier input. Two passes
    /// with equal fingerprints lie on the same smooth piece of the network.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Activation { x, kind: Activation::Relu } = node.op {
                for &v in self.nodes[x.0].value.data() {
                    h ^= (v > T::zero()) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut inputs = alloc::vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Conv2d { x, w, b, spec }, &inputs, "conv2d")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = alloc::vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// Batch normalisation. In train mode the batch statistics are returned so
    /// the caller can fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &norm::RunningStats<T>,
        phase: Phase,
        eps: f64,
    ) -> Result<(Var, Option<norm::BatchStats<T>>)> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (y, cache, stats) = match phase {
            Phase::Train => {
                let (y, cache, stats) = norm::batch_norm_train(self.value(x), g, b, eps)?;
                (y, cache, Some(stats))
            }
            Phase::Eval => {
                let (y, cache) = norm::batch_norm_eval(self.value(x), g, b, running, eps)?;
                (y, cache, None)
            }
        };
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, cache, phase }, &[x, gamma, beta], "batch_norm")?;
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = kernels::activation(self.value(x), kind);
        self.push(y, Op::Activation { x, kind }, &[x], "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        self.push(y, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor }, &[x], "scale")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        self.push(y, Op::GlobalAvgPool { x }, &[x], "global_avg_pool")
    }

    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::stack_last(&refs)?;
        self.push(y, Op::StackLast { parts: parts.to_vec() }, parts, "stack_last")
    }

    pub fn mode4_product(&mut self, m: Var, s: Var) -> Result<Var> {
        let y = kernels::mode4_product(self.value(m), self.value(s))?;
        self.push(y, Op::Mode4 { m, s }, &[m, s], "mode4_product")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat(&refs)?;
        self.push(y, Op::Concat { parts: parts.to_vec() }, parts, "concat")
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x], "sum")
    }

    /// `⟨x, weights⟩` against a constant tensor of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err!("dot: {:?} vs {:?}", weights.shape(), self.value(x).shape()));
        }
        let y = Tensor::scalar(self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum());
        self.push(y, Op::Dot { x, weights }, &[x], "dot")
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!("backward from non-scalar of shape {:?}", seed_shape)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::ones(&seed_shape)?;
        accumulate(&mut self.nodes, loss, seed)?;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            propagate(before, node, g)?;
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: Tensor<T>) -> Result<()> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return Ok(());
    }
    if g.shape() != node.value.shape() {
        return Err(shape_err!("gradient {:?} for value {:?}", g.shape(), node.value.shape()));
    }
    match node.grad.as_mut() {
        Some(existing) => existing.add_assign(&g)?,
        None => node.grad = Some(g),
    }
    Ok(())
}

fn wants<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn propagate<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, spec } => {
            let (dx, dw, db) = kernels::conv2d_backward(&nodes[x.0].value, &nodes[w.0].value, spec, g)?;
            accumulate(nodes, *x, dx)?;
            accumulate(nodes, *w, dw)?;
            if let Some(b) = b {
                accumulate(nodes, *b, db)?;
            }
        }
        Op::Linear { x, w, b } => {
            let (dx, dw, db) = kernels::linear_backward(&nodes[x.0].value, &nodes[w.0].value, g)?;
            accumulate(nodes, *x, dx)?;
            accumulate(nodes, *w, dw)?;
            if let Some(b) = b {
                accumulate(nodes, *b, db)?;
            }
        }
        Op::BatchNorm { x, gamma, beta, cache, phase } => {
            let gv = nodes[gamma.0].value.data();
            let (dx, dgamma, dbeta) = match phase {
                Phase::Train => norm::batch_norm_train_backward(g, gv, cache)?,
                Phase::Eval => norm::batch_norm_eval_backward(g, gv, cache)?,
            };
            let c = dgamma.len();
            accumulate(nodes, *x, dx)?;
            accumulate(nodes, *gamma, Tensor::new(&[c], dgamma)?)?;
            accumulate(nodes, *beta, Tensor::new(&[c], dbeta)?)?;
        }
        Op::Activation { x, kind } => {
            let dx = kernels::activation_backward(&nodes[x.0].value, &node.value, g, *kind);
            accumulate(nodes, *x, dx)?;
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, g.clone())?;
            accumulate(nodes, *b, g.clone())?;
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            accumulate(nodes, *x, g.map(|v| v * f))?;
        }
        Op::GlobalAvgPool { x } => {
            let shape = nodes[x.0].value.shape().to_vec();
            accumulate(nodes, *x, kernels::global_avg_pool_backward(&shape, g)?)?;
        }
        Op::StackLast { parts } => {
            for (p, dp) in parts.iter().zip(kernels::unstack_last(g)?) {
                accumulate(nodes, *p, dp)?;
            }
        }
        Op::Mode4 { m, s } => {
            if wants(nodes, *m) || wants(nodes, *s) {
                let (dm, ds) = kernels::mode4_product_backward(&nodes[m.0].value, &nodes[s.0].value, g)?;
                accumulate(nodes, *m, dm)?;
                accumulate(nodes, *s, ds)?;
            }
        }
        Op::Concat { parts } => {
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.shape()[1]).collect();
            for (p, dp) in parts.iter().zip(kernels::split_last(g, &widths)?) {
                accumulate(nodes, *p, dp)?;
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let up = g.data()[0];
            accumulate(nodes, *logits, kernels::softmax_cross_entropy_backward(probs, labels, up))?;
        }
        Op::Sum { x } => {
            let up = g.data()[0];
            let shape = nodes[x.0].value.shape().to_vec();
            accumulate(nodes, *x, Tensor::full(&shape, up)?)?;
        }
        Op::Dot { x, weights } => {
            let up = g.data()[0];
            accumulate(nodes, *x, weights.map(|w| w * up))?;
        }
    }
    Ok(())
}
