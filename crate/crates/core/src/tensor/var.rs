use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{Element, Result, Tensor, TensorError};

// Ids only grow, so every input id precedes its consumer.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Whether batch norm uses the batch's own statistics or the running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Statistics of one training-mode batch-norm call, for the running update.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var<T>,
        kernel: Var<T>,
        bias: Option<Var<T>>,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: Var<T>,
        argmax: Vec<usize>,
        geometry: PoolGeometry,
    },
    AvgPool {
        input: Var<T>,
        plane: usize,
    },
    BatchNorm {
        input: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        dims: [usize; 4],
        batch_stats: bool,
    },
    Affine {
        input: Var<T>,
        weight: Var<T>,
        bias: Var<T>,
    },
    Relu {
        input: Var<T>,
    },
    Add {
        lhs: Var<T>,
        rhs: Var<T>,
    },
    Mul {
        lhs: Var<T>,
        rhs: Var<T>,
    },
    Sum {
        input: Var<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var<T>,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
}

impl<T: Element> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![input, kernel];
                v.extend(bias.as_ref());
                v
            }
            Op::MaxPool { input, .. } | Op::AvgPool { input, .. } | Op::Relu { input } | Op::Sum { input } => {
                vec![input]
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![input, gamma, beta],
            Op::Affine { input, weight, bias } => vec![input, weight, bias],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![lhs, rhs],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T: Element> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    op: RefCell<Option<Op<T>>>,
    backward_done: Cell<bool>,
}

/// A tensor recorded in a dynamically built computation graph.
///
/// Operations on `Var`s compute their value eagerly. When at least one input
/// requires a gradient, the result remembers its inputs and whatever it needs
/// for the backward pass; otherwise nothing is retained and intermediate
/// values are freed as soon as they go out of scope.
#[derive(Clone)]
pub struct Var<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Var<T> {
    /// Graph input; tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(tensor: &Tensor<T>) -> Self {
        let requires_grad = tensor.requires_grad();
        Self::make_leaf(tensor, requires_grad)
    }

    /// Graph input that never receives a gradient.
    pub fn constant(tensor: &Tensor<T>) -> Self {
        Self::make_leaf(tensor, false)
    }

    fn make_leaf(tensor: &Tensor<T>, requires_grad: bool) -> Self {
        let value = Tensor::from_shared(tensor.shape().to_vec(), tensor.shared().clone());
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            is_leaf: true,
            op: RefCell::new(Some(Op::Leaf)),
            backward_done: Cell::new(false),
        }))
    }

    fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Self> {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let value = Tensor::new(shape, data)?;
        #[cfg(debug_assertions)]
        if !value.all_finite() && op.parents().iter().all(|p| p.value().all_finite()) {
            log::warn!(
                "non-finite values produced from finite inputs (shape {:?})",
                value.shape()
            );
        }
        Ok(Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            is_leaf: false,
            op: RefCell::new(requires_grad.then_some(op)),
            backward_done: Cell::new(false),
        })))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn conv2d(&self, kernel: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Result<Self> {
        let geometry = ConvGeometry::new(
            self.value().dims4("conv2d")?,
            kernel.value().dims4("conv2d")?,
            stride,
            pad,
        )?;
        if let Some(b) = bias {
            if b.shape() != [geometry.out_channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: vec![geometry.out_channels],
                    right: b.shape().to_vec(),
                });
            }
        }
        let out = kernels::conv2d_forward(
            self.value().data(),
            kernel.value().data(),
            bias.map(|b| b.value().data()),
            &geometry,
        );
        Self::from_op(
            geometry.output_shape().to_vec(),
            out,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                geometry,
            },
        )
    }

    pub fn max_pool2d(&self, window: usize, stride: usize, pad: usize) -> Result<Self> {
        let dims = self.value().dims4("max_pool2d")?;
        let geometry = PoolGeometry::new(dims, window, stride, pad)?;
        let (out, argmax) = kernels::max_pool2d_forward(self.value().data(), &geometry);
        Self::from_op(
            vec![dims[0], dims[1], geometry.out_h, geometry.out_w],
            out,
            Op::MaxPool {
                input: self.clone(),
                argmax,
                geometry,
            },
        )
    }

    /// NCHW → NC mean over each spatial plane.
    pub fn global_avg_pool2d(&self) -> Result<Self> {
        let [n, c, h, w] = self.value().dims4("global_avg_pool2d")?;
        let out = kernels::global_avg_pool_forward(self.value().data(), n * c, h * w);
        Self::from_op(
            vec![n, c],
            out,
            Op::AvgPool {
                input: self.clone(),
                plane: h * w,
            },
        )
    }

    /// Per-channel normalization followed by the `gamma`/`beta` affine map.
    ///
    /// In [`BatchNormMode::Train`] the batch statistics are used and returned so
    /// the caller can blend them into its running estimates; in
    /// [`BatchNormMode::Eval`] `running_mean`/`running_var` are used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: BatchNormMode,
        eps: T,
    ) -> Result<(Self, Option<BatchStats<T>>)> {
        let dims = self.value().dims4("batch_norm2d")?;
        let c = dims[1];
        for t in [gamma.value(), beta.value(), running_mean, running_var] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm2d",
                    left: vec![c],
                    right: t.shape().to_vec(),
                });
            }
        }
        let (out, normalized, inv_std, stats) = match mode {
            BatchNormMode::Train => {
                let f = kernels::batch_norm_train(
                    self.value().data(),
                    dims,
                    gamma.value().data(),
                    beta.value().data(),
                    eps,
                )?;
                let stats = BatchStats {
                    mean: f.batch_mean,
                    var: f.batch_var,
                };
                (f.output, f.normalized, f.inv_std, Some(stats))
            }
            BatchNormMode::Eval => {
                let (out, normalized, inv_std) = kernels::batch_norm_eval(
                    self.value().data(),
                    dims,
                    gamma.value().data(),
                    beta.value().data(),
                    running_mean.data(),
                    running_var.data(),
                    eps,
                );
                (out, normalized, inv_std, None)
            }
        };
        let var = Self::from_op(
            dims.to_vec(),
            out,
            Op::BatchNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                normalized,
                inv_std,
                dims,
                batch_stats: mode == BatchNormMode::Train,
            },
        )?;
        Ok((var, stats))
    }

    /// `self (N×D) · weight (D×K) + bias (K)`.
    pub fn affine(&self, weight: &Var<T>, bias: &Var<T>) -> Result<Self> {
        let [n, d] = self.value().dims2("affine")?;
        let [wd, k] = weight.value().dims2("affine")?;
        if wd != d {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                left: self.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                left: vec![k],
                right: bias.shape().to_vec(),
            });
        }
        let out = kernels::affine_forward(self.value().data(), weight.value().data(), bias.value().data(), n, d, k);
        Self::from_op(
            vec![n, k],
            out,
            Op::Affine {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
            },
        )
    }

    pub fn relu(&self) -> Result<Self> {
        let out = self.value().data().iter().map(|&x| x.max(T::zero())).collect();
        Self::from_op(self.shape().to_vec(), out, Op::Relu { input: self.clone() })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Self> {
        self.same_shape("add", other)?;
        let out = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a + b)
            .collect();
        Self::from_op(
            self.shape().to_vec(),
            out,
            Op::Add {
                lhs: self.clone(),
                rhs: other.clone(),
            },
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Self> {
        self.same_shape("mul", other)?;
        let out = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a * b)
            .collect();
        Self::from_op(
            self.shape().to_vec(),
            out,
            Op::Mul {
                lhs: self.clone(),
                rhs: other.clone(),
            },
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Result<Self> {
        let total = self.value().sum();
        Self::from_op(vec![1], vec![total], Op::Sum { input: self.clone() })
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `self` (N×K).
    /// Returns the scalar loss and the probabilities.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<(Self, Tensor<T>)> {
        let [n, k] = self.value().dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![n],
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::TargetOutOfRange { target: t, classes: k });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.value().data(), targets, k);
        let prob_tensor = Tensor::new(vec![n, k], probs.clone())?;
        let var = Self::from_op(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: self.clone(),
                probs,
                targets: targets.to_vec(),
            },
        )?;
        Ok((var, prob_tensor))
    }

    fn same_shape(&self, op: &'static str, other: &Var<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse-mode sweep from this scalar.
    ///
    /// Saved activations are released as the sweep passes them, so a graph
    /// supports exactly one backward pass.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().len() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if self.0.backward_done.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let mut grads = Gradients {
            by_leaf: HashMap::new(),
        };
        if !self.requires_grad() {
            return Ok(grads);
        }

        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            if let Some(op) = v.0.op.borrow().as_ref() {
                stack.extend(op.parents().into_iter().cloned());
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if node.0.is_leaf {
                let tensor = Tensor::new(node.shape().to_vec(), grad)?;
                grads.by_leaf.insert(node.id(), tensor);
                continue;
            }
            let op = node.0.op.borrow_mut().take().ok_or(TensorError::GraphReleased)?;
            for (parent, g) in backprop(&op, &node, &grad) {
                if !parent.requires_grad() {
                    continue;
                }
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                    None => {
                        pending.insert(parent.id(), g);
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn backprop<T: Element>(op: &Op<T>, node: &Var<T>, grad: &[T]) -> Vec<(Var<T>, Vec<T>)> {
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geometry,
        } => {
            let need = (
                input.requires_grad(),
                kernel.requires_grad(),
                bias.as_ref().is_some_and(Var::requires_grad),
            );
            let g = kernels::conv2d_backward(input.value().data(), kernel.value().data(), grad, geometry, need);
            out.extend(g.input.map(|d| (input.clone(), d)));
            out.extend(g.kernel.map(|d| (kernel.clone(), d)));
            if let (Some(b), Some(d)) = (bias, g.bias) {
                out.push((b.clone(), d));
            }
        }
        Op::MaxPool {
            input,
            argmax,
            geometry,
        } => {
            out.push((input.clone(), kernels::max_pool2d_backward(grad, argmax, geometry)));
        }
        Op::AvgPool { input, plane } => {
            out.push((input.clone(), kernels::global_avg_pool_backward(grad, *plane)));
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
            dims,
            batch_stats,
        } => {
            let (dgamma, dbeta) = kernels::batch_norm_param_grads(grad, normalized, *dims);
            if input.requires_grad() {
                let g = gamma.value().data();
                let dx = if *batch_stats {
                    kernels::batch_norm_train_input_grad(grad, normalized, *dims, g, inv_std, &dgamma, &dbeta)
                } else {
                    kernels::batch_norm_eval_input_grad(grad, *dims, g, inv_std)
                };
                out.push((input.clone(), dx));
            }
            out.push((gamma.clone(), dgamma));
            out.push((beta.clone(), dbeta));
        }
        Op::Affine { input, weight, bias } => {
            let [n, d] = [input.shape()[0], input.shape()[1]];
            let k = weight.shape()[1];
            if input.requires_grad() {
                out.push((
                    input.clone(),
                    kernels::affine_input_grad(grad, weight.value().data(), n, d, k),
                ));
            }
            if weight.requires_grad() {
                out.push((
                    weight.clone(),
                    kernels::affine_weight_grad(input.value().data(), grad, n, d, k),
                ));
            }
            out.push((bias.clone(), kernels::affine_bias_grad(grad, k)));
        }
        Op::Relu { input } => {
            // Subgradient 0 at the kink.
            let d = input
                .value()
                .data()
                .iter()
                .zip(grad)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            out.push((input.clone(), d));
        }
        Op::Add { lhs, rhs } => {
            out.push((lhs.clone(), grad.to_vec()));
            out.push((rhs.clone(), grad.to_vec()));
        }
        Op::Mul { lhs, rhs } => {
            let times = |other: &Var<T>| other.value().data().iter().zip(grad).map(|(&o, &g)| o * g).collect();
            out.push((lhs.clone(), times(rhs)));
            out.push((rhs.clone(), times(lhs)));
        }
        Op::Sum { input } => {
            out.push((input.clone(), vec![grad[0]; input.value().len()]));
        }
        Op::SoftmaxCrossEntropy { logits, probs, targets } => {
            let k = logits.shape()[1];
            let scale = grad[0] / T::from_usize(targets.len()).unwrap();
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (row, &t) in targets.iter().enumerate() {
                d[row * k + t] = d[row * k + t] - scale;
            }
            out.push((logits.clone(), d));
        }
    }
    debug_assert!(
        out.iter().all(|(v, g)| v.value().len() == g.len()),
        "gradient shape drift at node {}",
        node.id()
    );
    out
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients<T: Element> {
    by_leaf: HashMap<u64, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf, or `None` if it does not require one or took no
    /// part in the loss.
    pub fn get(&self, leaf: &Var<T>) -> Option<&Tensor<T>> {
        self.by_leaf.get(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let w = Var::leaf(&Tensor::scalar(3.0f64).with_requires_grad(true));
        let y = w.mul(&w).unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let w = Var::leaf(&Tensor::scalar(2.0f64).with_requires_grad(true));
        let y = w.mul(&w).unwrap();
        y.backward().unwrap();
        assert_eq!(y.backward().unwrap_err(), TensorError::BackwardTwice);
    }

    #[test]
    fn loss_must_be_scalar() {
        let w = Var::leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(w.relu().unwrap().backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let frozen = Var::leaf(&t(&[2], &[1.0, 2.0]));
        let live = Var::leaf(&t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let y = frozen.mul(&live).unwrap().sum().unwrap();
        let g = y.backward().unwrap();
        assert!(g.get(&frozen).is_none());
        assert_eq!(g.get(&live).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn no_grad_graph_retains_nothing() {
        let x = Var::constant(&t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let y = x.relu().unwrap();
        assert!(!y.requires_grad());
        assert!(y.0.op.borrow().is_none());
        assert!(y.sum().unwrap().backward().unwrap().is_empty());
    }

    #[test]
    fn relu_examples() {
        let x = Var::leaf(&t(&[2], &[-2.0, 3.0]).with_requires_grad(true));
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 3.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x + x·x, dy/dx = 1 + 2x
        let x = Var::leaf(&t(&[1], &[1.5]).with_requires_grad(true));
        let y = x.add(&x.mul(&x).unwrap()).unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn softmax_targets_validated() {
        let z = Var::constant(&t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            z.softmax_cross_entropy(&[2]),
            Err(TensorError::TargetOutOfRange { target: 2, classes: 2 })
        ));
    }
}
