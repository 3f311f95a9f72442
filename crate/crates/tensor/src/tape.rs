//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients; a tensor used twice receives the sum of both paths.

use rand::Rng;

use crate::error::{dim_err, param_err, Result, TensorError};
use crate::ops::{activation, conv, loss, pool};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: conv::ConvGeometry,
        cols: Vec<T>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        input: Var,
        plane: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        channels: usize,
        inner: usize,
    },
    /// Element-wise scaling by a fixed mask (dropout).
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    /// Loss node; `grad` is d(loss)/d(input).
    Loss {
        input: Var,
        grad: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geometry = conv::ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geometry.out_channels] {
                return Err(dim_err("conv2d bias", self.shape(b), &[geometry.out_channels]));
            }
        }
        let (out, cols) = conv::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geometry,
        );
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&geometry.output_shape(), out)?;
        // the im2col buffer is only needed for the weight gradient
        let cols = if self.needs(weight) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            needs,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, ceil_mode: bool) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let g = pool::PoolGeometry::new(&shape, kernel, stride, ceil_mode)?;
        let (out, argmax) = pool::max_pool2d_forward(self.value(input).data(), &g);
        let value = Tensor::from_vec(&[shape[0], shape[1], g.out_height, g.out_width], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Global average over the spatial axes of an NCHW tensor.
    pub fn adaptive_avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || shape[2] * shape[3] == 0 {
            return Err(dim_err("adaptive_avg_pool2d", &shape, &[1, 1]));
        }
        let plane = shape[2] * shape[3];
        let out = pool::adaptive_avg_pool_forward(self.value(input).data(), plane);
        let value = Tensor::from_vec(&[shape[0], shape[1], 1, 1], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::AdaptiveAvgPool { input, plane }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_vec(x.shape(), activation::relu(x.data())).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_vec(x.shape(), activation::sigmoid(x.data())).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Sigmoid(input), needs)
    }

    /// Softmax over axis 1 (the class/channel axis).
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || shape[1] == 0 {
            return Err(param_err("softmax", format!("needs a class axis, got shape {shape:?}")));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let out = activation::softmax(self.value(input).data(), channels, inner);
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Softmax { input, channels, inner },
            needs,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(param_err("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(x.shape(), out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Mask { input, mask }, needs))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| param_err("concat", "no inputs"))?).to_vec();
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() < 2 || s[0] != first[0] || s[2..] != first[2..] {
                return Err(dim_err("concat", &first, s));
            }
            channels.push(s[1]);
        }
        let inner: usize = first[2..].iter().product();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(first[0] * total * inner);
        for n in 0..first[0] {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: fn(T, T) -> T, node: fn(Var, Var) -> Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, node(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Scale(input, factor), needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum(input), needs)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1);
        let s = self.sum(input);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    fn rows_and_classes(&self, input: Var, op: &'static str) -> Result<usize> {
        match self.shape(input) {
            [_, c] => Ok(*c),
            other => Err(dim_err(op, other, &[0, 0])),
        }
    }

    /// Mean cross entropy on `[rows, classes]` logits with label smoothing.
    /// A single column is treated as a sigmoid head with binary targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64, class_weights: Option<&[T]>) -> Result<Var> {
        let classes = self.rows_and_classes(logits, "cross_entropy")?;
        let (l, grad) = loss::cross_entropy_logits(self.value(logits).data(), classes, targets, smoothing, class_weights)?;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(l), Op::Loss { input: logits, grad }, needs))
    }

    /// Mean cross entropy on `[rows, classes]` probabilities.
    pub fn cross_entropy_probs(&mut self, probs: Var, targets: &[usize], smoothing: f64, class_weights: Option<&[T]>) -> Result<Var> {
        let classes = self.rows_and_classes(probs, "cross_entropy_probs")?;
        let (l, grad) = loss::cross_entropy_probs(self.value(probs).data(), classes, targets, smoothing, class_weights)?;
        let needs = self.needs(probs);
        Ok(self.push(Tensor::scalar(l), Op::Loss { input: probs, grad }, needs))
    }

    /// Populates gradients for every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            } => {
                let need = (
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                let gr = conv::conv2d_backward(g, self.value(*weight).data(), cols, geometry, need);
                if let Some(d) = gr.input {
                    send(*input, d);
                }
                if let Some(d) = gr.weight {
                    send(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, gr.bias) {
                    send(*b, d);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                send(*input, pool::max_pool2d_backward(g, argmax, self.value(*input).numel()));
            }
            Op::AdaptiveAvgPool { input, plane } => {
                send(*input, pool::adaptive_avg_pool_backward(g, *plane));
            }
            Op::Relu(input) => send(*input, activation::relu_backward(self.value(*input).data(), g)),
            Op::Sigmoid(input) => send(*input, activation::sigmoid_backward(node.value.data(), g)),
            Op::Softmax { input, channels, inner } => {
                send(*input, activation::softmax_backward(node.value.data(), g, *channels, *inner));
            }
            Op::Mask { input, mask } => send(*input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()),
            Op::Concat { inputs, channels } => {
                let shape = node.value.shape();
                let inner: usize = shape[2..].iter().product();
                let total: usize = channels.iter().sum();
                for (k, (&v, &c)) in inputs.iter().zip(channels).enumerate() {
                    let offset: usize = channels[..k].iter().sum();
                    let mut d = Vec::with_capacity(shape[0] * c * inner);
                    for n in 0..shape[0] {
                        let start = (n * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + c * inner]);
                    }
                    send(v, d);
                }
            }
            Op::Reshape(input) => send(*input, g.to_vec()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                send(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::Scale(input, f) => send(*input, g.iter().map(|&v| v * *f).collect()),
            Op::Sum(input) => send(*input, vec![g[0]; self.value(*input).numel()]),
            Op::Loss { input, grad } => send(*input, grad.iter().map(|&v| v * g[0]).collect()),
        }
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s gradient buffer.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
