//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node whose inputs are earlier
//! nodes, so node order is a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the tape once in reverse and
//! returns fresh gradients; nothing is accumulated inside the graph, so
//! repeated calls give identical results.
//!
//! Non-smooth rules: `relu'(0) = 0`, `clip` passes gradient on the closed
//! interval `[lo, hi]`, and max-type reductions route gradient to the first
//! maximal element.

mod gradcheck;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::scalar::{shape_str, Scalar};
use crate::tensor::conv::{self, ConvGeom, PoolGeom};
use crate::tensor::{
    as_matrix, contiguous_strides, gemm, matmul_dims, numel, sum_to_shape, walk2, ReduceKind,
    Tensor,
};

pub use gradcheck::{finite_diff_check, GradCheck};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, T),
    AddScalar(Var),
    Clip(Var, T, T),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Reduce {
        input: Var,
        kind: ReduceKind,
        axes: Vec<usize>,
        argmax: Option<Vec<usize>>,
    },
    LogSoftmax(Var),
    PickColumns {
        input: Var,
        columns: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`]: one gradient per node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or a contract error if it was never requested.
    pub fn wrt(&self, var: Var) -> Result<&Tensor<T>> {
        self.get(var)
            .ok_or_else(|| Error::Contract(format!("node {} does not require a gradient", var.0)))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a), self.rg(&[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a), self.rg(&[a]))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(v, Op::Log(a), self.rg(&[a]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor), self.rg(&[a]))
    }

    pub fn add_scalar(&mut self, a: Var, offset: T) -> Var {
        let v = self.value(a).add_scalar(offset);
        self.push(v, Op::AddScalar(a), self.rg(&[a]))
    }

    pub fn clip(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).clip(lo, hi);
        self.push(v, Op::Clip(a, lo, hi), self.rg(&[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernels).shape(),
            stride,
            padding,
        )?;
        let out = conv::conv2d_forward(&geom, self.value(input).data(), self.value(kernels).data());
        let v = Tensor::from_parts(geom.output_shape(), out);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernels,
                geom,
            },
            self.rg(&[input, kernels]),
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.value(input).shape(), window)?;
        let (out, argmax) = conv::maxpool_forward(&geom, self.value(input).data());
        let v = Tensor::from_parts(geom.output_shape(), out);
        Ok(self.push(v, Op::MaxPool2d { input, argmax }, self.rg(&[input])))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.rg(&[a])))
    }

    /// Flattens everything after the leading (batch) dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let lead = *shape
            .first()
            .ok_or_else(|| Error::Dimension("flatten of a rank-0 tensor".into()))?;
        let rest = numel(&shape[1..]);
        self.reshape(a, &[lead, rest])
    }

    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let (v, argmax) = crate::tensor::reduce_with_arg(self.value(a), kind, axes)?;
        Ok(self.push(
            v,
            Op::Reduce {
                input: a,
                kind,
                axes: axes.to_vec(),
                argmax,
            },
            self.rg(&[a]),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, ReduceKind::Sum, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, ReduceKind::Mean, &axes)
    }

    /// Row-wise log-softmax of a `B×C` node.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).log_softmax_rows()?;
        Ok(self.push(v, Op::LogSoftmax(a), self.rg(&[a])))
    }

    /// `out[b] = input[b, columns[b]]` for a `B×C` node.
    pub fn pick_columns(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(a).shape(), "pick_columns")?;
        if columns.len() != rows {
            return Err(Error::Dimension(format!(
                "pick_columns: {} indices for {} rows",
                columns.len(),
                rows
            )));
        }
        if let Some((b, &c)) = columns.iter().enumerate().find(|(_, &c)| c >= cols) {
            return Err(Error::Contract(format!(
                "label {c} at row {b} out of range for {cols} classes"
            )));
        }
        let data = self.value(a).data();
        let out: Vec<T> = columns
            .iter()
            .enumerate()
            .map(|(b, &c)| data[b * cols + c])
            .collect();
        let v = Tensor::from_parts(vec![rows], out);
        Ok(self.push(
            v,
            Op::PickColumns {
                input: a,
                columns: columns.to_vec(),
            },
            self.rg(&[a]),
        ))
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows { input: a, start }, self.rg(&[a])))
    }

    /// Hash of every branch decision taken by non-smooth nodes (relu masks,
    /// clip masks, argmax choices). Two evaluations of the same program with
    /// equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for &v in self.value(*a).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Clip(a, lo, hi) => {
                    i.hash(&mut h);
                    for &v in self.value(*a).data() {
                        ((v >= *lo) as u8 + (v <= *hi) as u8 * 2).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Reduce {
                    argmax: Some(arg), ..
                } => {
                    i.hash(&mut h);
                    arg.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node
    /// that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(lv.shape())
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Tensor::from_parts(node.value.shape().to_vec(), data)
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_reduced(grads, *a, gy, out_shape, |g| g);
                self.accumulate_reduced(grads, *b, gy, out_shape, |g| g);
            }
            Op::Sub(a, b) => {
                self.accumulate_reduced(grads, *a, gy, out_shape, |g| g);
                self.accumulate_reduced(grads, *b, gy, out_shape, |g| -g);
            }
            Op::Mul(a, b) => {
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(target) {
                        continue;
                    }
                    let expanded = self.expand(other, out_shape);
                    let prod: Vec<T> = gy.iter().zip(&expanded).map(|(&g, &o)| g * o).collect();
                    let reduced = sum_to_shape(&prod, out_shape, self.value(target).shape());
                    add_into(grads, target, reduced);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g: Vec<T> = gy
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                add_into(grads, *a, g);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let g: Vec<T> = gy.iter().zip(y).map(|(&g, &y)| g * y).collect();
                add_into(grads, *a, g);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let g: Vec<T> = gy.iter().zip(x).map(|(&g, &x)| g / x).collect();
                add_into(grads, *a, g);
            }
            Op::Scale(a, c) => {
                let g: Vec<T> = gy.iter().map(|&g| g * *c).collect();
                add_into(grads, *a, g);
            }
            Op::AddScalar(a) | Op::Reshape(a) => add_into(grads, *a, gy.to_vec()),
            Op::Clip(a, lo, hi) => {
                let x = self.value(*a).data();
                let g: Vec<T> = gy
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect();
                add_into(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.value(*a).shape(), self.value(*b).shape())
                    .expect("validated at construction");
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gy, false, self.value(*b).data(), true, &mut ga, false);
                    add_into(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gy, false, &mut gb, false);
                    add_into(grads, *b, gb);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                geom,
            } => {
                let (gi, gk) = conv::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    gy,
                    self.requires_grad(*input),
                    self.requires_grad(*kernels),
                );
                if let Some(gi) = gi {
                    add_into(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    add_into(grads, *kernels, gk);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut g = vec![T::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gy) {
                    g[src] += gv;
                }
                add_into(grads, *input, g);
            }
            Op::Reduce {
                input,
                kind,
                axes,
                argmax,
            } => {
                let in_shape = self.value(*input).shape();
                let mut g = vec![T::zero(); numel(in_shape)];
                match (kind, argmax) {
                    (ReduceKind::Max, Some(arg)) => {
                        for (&src, &gv) in arg.iter().zip(gy) {
                            g[src] += gv;
                        }
                    }
                    _ => {
                        let (_, to_out) = crate::tensor::reduced_layout(in_shape, axes)
                            .expect("validated at construction");
                        let scale = if *kind == ReduceKind::Mean {
                            T::one()
                                / T::from_usize(numel(in_shape) / gy.len().max(1))
                                    .unwrap_or_else(T::one)
                        } else {
                            T::one()
                        };
                        walk2(in_shape, &contiguous_strides(in_shape), &to_out, |ii, io| {
                            g[ii] = gy[io] * scale;
                        });
                    }
                }
                add_into(grads, *input, g);
            }
            Op::LogSoftmax(a) => {
                let cols = out_shape[1];
                let y = node.value.data();
                let mut g = vec![T::zero(); y.len()];
                for ((yr, gr), dst) in y.chunks(cols).zip(gy.chunks(cols)).zip(g.chunks_mut(cols)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                add_into(grads, *a, g);
            }
            Op::PickColumns { input, columns } => {
                let cols = self.value(*input).shape()[1];
                let mut g = vec![T::zero(); self.value(*input).len()];
                for (b, (&c, &gv)) in columns.iter().zip(gy).enumerate() {
                    g[b * cols + c] += gv;
                }
                add_into(grads, *input, g);
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let stride = src.len() / src.shape()[0];
                let mut g = vec![T::zero(); src.len()];
                g[start * stride..start * stride + gy.len()].copy_from_slice(gy);
                add_into(grads, *input, g);
            }
        }
    }

    fn accumulate_reduced(
        &self,
        grads: &mut [Option<Vec<T>>],
        target: Var,
        gy: &[T],
        out_shape: &[usize],
        f: impl Fn(T) -> T,
    ) {
        if !self.requires_grad(target) {
            return;
        }
        let mapped: Vec<T> = gy.iter().map(|&g| f(g)).collect();
        let target_shape = self.value(target).shape();
        if target_shape == out_shape {
            add_into(grads, target, mapped);
        } else {
            add_into(grads, target, sum_to_shape(&mapped, out_shape, target_shape));
        }
    }

    /// Materializes `var` broadcast to `shape`.
    fn expand(&self, var: Var, shape: &[usize]) -> Vec<T> {
        let t = self.value(var);
        if t.shape() == shape {
            return t.data().to_vec();
        }
        let sa = crate::tensor::broadcast_strides(t.shape(), shape);
        let so = contiguous_strides(shape);
        let mut out = vec![T::zero(); numel(shape)];
        let src = t.data();
        walk2(shape, &so, &sa, |io, ia| out[io] = src[ia]);
        out
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], target: Var, g: Vec<T>) {
    match &mut grads[target.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(&[2, 3, 2]));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn max_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[3., 3.]));
        let m = g.reduce(x, ReduceKind::Max, &[0]).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1., 0.]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x);
        let s = g.sum_all(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn clip_gradient_mask() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-0.5, 0.5, 1.5]));
        let c = g.clip(x, 0.0, 1.0);
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0., 1., 0.]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[0.3, -0.2, 0.9, 1.1]));
        let w = g.param(t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]));
        let y = g.matmul(x, w).unwrap();
        let e = g.exp(y);
        let s = g.sum_all(e).unwrap();
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
        assert_eq!(g1.wrt(w).unwrap(), g2.wrt(w).unwrap());
    }

    #[test]
    fn constants_get_no_gradient_and_unused_params_get_zeros() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1., 2.]));
        let unused = g.param(t(&[3], &[1., 2., 3.]));
        let x = g.param(t(&[2], &[3., 4.]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0., 0., 0.]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[1., 2.]);
    }
}
