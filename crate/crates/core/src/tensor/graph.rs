use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels::{self, BatchNormCache, BatchStats};
use super::{BatchNormState, ConvSpec, Mode, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    ResidualAdd {
        trunk: Var,
        branch: Var,
        scale: f64,
    },
    Mul(Var, Var),
    /// Elementwise product with a fixed mask (dropout).
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use tape: record a forward pass, then call [`Graph::backward`] once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of every piecewise-linear choice on the tape: the sign
    /// pattern of each ReLU input and the element each max-pool window
    /// picked. Equal fingerprints mean the same smooth piece.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            },
            &deps,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = kernels::maxpool2d(self.value(input), window, stride)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn avgpool2d(&mut self, input: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::avgpool2d(self.value(input), window, stride, pad)?;
        Ok(self.push(
            value,
            Op::AvgPool {
                input,
                window,
                stride,
                pad,
            },
            &[input],
        ))
    }

    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let value = kernels::global_avgpool(self.value(input))?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = kernels::relu(self.value(input));
        self.push(value, Op::Relu(input), &[input])
    }

    /// Records a batchnorm; in train mode also returns the batch statistics
    /// so the owner of `state` can fold them in.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (value, cache, stats) =
            kernels::batchnorm_forward(self.value(input), self.value(gamma), self.value(beta), state, mode)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            &[input, gamma, beta],
        );
        Ok((var, stats))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = kernels::concat_channels(&values)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let value = kernels::slice_channels(self.value(input), start, end)?;
        Ok(self.push(value, Op::Slice { input, start }, &[input]))
    }

    pub fn residual_add_scaled(&mut self, trunk: Var, branch: Var, scale: f64) -> Result<Var> {
        let value = kernels::residual_add_scaled(self.value(trunk), self.value(branch), scale)?;
        Ok(self.push(value, Op::ResidualAdd { trunk, branch, scale }, &[trunk, branch]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.residual_add_scaled(a, b, 1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant mask of the same length (used for dropout).
    pub fn mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(TensorError::Shape {
                op: "mask",
                detail: format!("mask of {} values for tensor {:?}", mask.len(), x.shape()),
            });
        }
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] * mask[i]);
        Ok(self.push(value, Op::Mask { input, mask }, &[input]))
    }

    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let value = kernels::linear(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(value, Op::Linear { input, weights, bias }, &[input, weights, bias]))
    }

    /// Mean cross-entropy; the probabilities are available via [`Graph::probabilities`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Softmax probabilities recorded by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&Tensor> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(TensorError::NonFinite("backward"));
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor| {
                if needs(v) {
                    accumulate(&mut grads, v, t)
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    spec,
                } => {
                    let cg =
                        kernels::conv2d_backward(self.value(*input), self.value(*weights), spec, &g, needs(*input))?;
                    if let Some(dx) = cg.input {
                        acc(*input, dx);
                    }
                    acc(*weights, cg.weights);
                    if let (Some(b), Some(db)) = (bias, cg.bias) {
                        acc(*b, db);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let dx = kernels::maxpool2d_backward(self.value(*input).shape(), argmax, &g);
                    acc(*input, dx);
                }
                Op::AvgPool {
                    input,
                    window,
                    stride,
                    pad,
                } => {
                    let dx = kernels::avgpool2d_backward(self.value(*input).shape(), *window, *stride, *pad, &g)?;
                    acc(*input, dx);
                }
                Op::GlobalAvgPool(input) => {
                    acc(*input, kernels::global_avgpool_backward(self.value(*input).shape(), &g));
                }
                Op::Relu(input) => {
                    acc(*input, kernels::relu_backward(self.value(*input), &g));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) = kernels::batchnorm_backward(cache, self.value(*gamma), &g);
                    acc(*input, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::Concat(inputs) => {
                    let mut start = 0;
                    for &v in inputs {
                        let c = self.value(v).shape()[1];
                        if needs(v) {
                            acc(v, kernels::slice_channels(&g, start, start + c)?);
                        }
                        start += c;
                    }
                }
                Op::Slice { input, start } => {
                    let x = self.value(*input);
                    let (n, c, h, w) = x.dims4("slice_channels backward")?;
                    let width = g.shape()[1];
                    let hw = h * w;
                    let mut dx = Tensor::zeros(x.shape());
                    for i in 0..n {
                        let src = &g.data()[i * width * hw..(i + 1) * width * hw];
                        let off = (i * c + start) * hw;
                        dx.data_mut()[off..off + width * hw].copy_from_slice(src);
                    }
                    acc(*input, dx);
                }
                Op::ResidualAdd { trunk, branch, scale } => {
                    if needs(*branch) {
                        let db = Tensor::from_fn(g.shape(), |i| g.data()[i] * scale);
                        acc(*branch, db);
                    }
                    acc(*trunk, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, Tensor::from_fn(g.shape(), |i| g.data()[i] * vb.data()[i]));
                    acc(*b, Tensor::from_fn(g.shape(), |i| g.data()[i] * va.data()[i]));
                }
                Op::Mask { input, mask } => {
                    acc(*input, Tensor::from_fn(g.shape(), |i| g.data()[i] * mask[i]));
                }
                Op::Linear { input, weights, bias } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*input), self.value(*weights), &g);
                    acc(*input, dx);
                    acc(*weights, dw);
                    acc(*bias, db);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let d = kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    acc(*logits, d);
                }
                Op::Sum(input) => {
                    acc(*input, Tensor::full(self.value(*input).shape(), g.data()[0]));
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, t: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.value(s).data(), [14.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [2.0, 4.0, 6.0]);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), true);
        let c = g.concat_channels(&[x, x]).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [2.0; 4]);
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), false);
        let w = g.leaf(Tensor::full(&[2], 3.0), true);
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), [1.0, 1.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }
}
