//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep.

use crate::error::{check_shape, Error, Result};
use crate::nn::ops::{self, Activation, BatchNormCache, RunningStats};
use crate::nn::{Mode, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    /// Elementwise product with a constant multiplier (dropout mask).
    Scale {
        input: Var,
        factors: Vec<T>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> Var {
        value.grad = None;
        if !matches!(op, Op::Leaf) {
            value.requires_grad = self.inputs(&op).iter().any(|v| self.requires_grad(*v));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Activation { input, .. } | Op::Scale { input, .. } => vec![input],
            Op::ConcatChannels { a, b } => vec![a, b],
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let out = ops::conv_transpose2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (out, cache) = ops::batch_norm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Activation { input, kind })
    }

    /// Multiplies elementwise by fixed `factors` (not differentiated).
    pub fn scale(&mut self, input: Var, factors: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        check_shape(&[x.numel()], &[factors.len()])?;
        let data = x
            .data()
            .iter()
            .zip(&factors)
            .map(|(&a, &f)| a * f)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale { input, factors }))
    }

    /// Concatenates two `(n, c, h, w)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape {
                expected: vec![n, cb, h, w],
                actual: vec![nb, cb, hb, wb],
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..][..ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..][..cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// Backpropagates `seed` (the gradient of some scalar w.r.t. `root`).
    /// Clears previously accumulated gradients first.
    pub fn backward(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        check_shape(&[self.value(root).numel()], &[seed.len()])?;
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[root.0].value.grad = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let grad_t = Tensor::new(self.nodes[idx].value.shape().to_vec(), grad)?;
            let contributions = self.backward_node(idx, &grad_t)?;
            self.nodes[idx].value.grad = Some(grad_t.into_data());
            for (var, g) in contributions {
                self.accumulate(var, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (gi, gw, gb) = ops::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    grad,
                    stride,
                    self.requires_grad(input),
                )?;
                if let Some(gi) = gi {
                    out.push((input, gi.into_data()));
                }
                out.push((weight, gw.into_data()));
                out.push((bias, gb.into_data()));
            }
            &Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (gi, gw, gb) = ops::conv_transpose2d_backward(
                    self.value(input),
                    self.value(weight),
                    grad,
                    stride,
                    self.requires_grad(input),
                )?;
                if let Some(gi) = gi {
                    out.push((input, gi.into_data()));
                }
                out.push((weight, gw.into_data()));
                out.push((bias, gb.into_data()));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (gi, gg, gb) = ops::batch_norm_backward(cache, self.value(*gamma), grad)?;
                out.push((*input, gi.into_data()));
                out.push((*gamma, gg.into_data()));
                out.push((*beta, gb.into_data()));
            }
            &Op::Activation { input, kind } => {
                let x = self.value(input).data();
                let y = node.value.data();
                let g = grad
                    .data()
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                out.push((input, g));
            }
            Op::Scale { input, factors } => {
                let g = grad
                    .data()
                    .iter()
                    .zip(factors)
                    .map(|(&g, &f)| g * f)
                    .collect();
                out.push((*input, g));
            }
            &Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for chunk in grad.data().chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                out.push((a, ga));
                out.push((b, gb));
            }
        }
        Ok(out)
    }

    /// Fails if any value or gradient on the tape is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.all_finite()) {
            Some(i) => Err(Error::param(format!("non-finite value at graph node {i}"))),
            None => Ok(()),
        }
    }
}
