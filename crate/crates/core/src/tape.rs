//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so every node's parents have smaller indices and a
//! single reverse sweep visits nodes in a valid topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{check_tau, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LogSoftmax(Var, f64),
    Softmax(Var, f64),
    Sum(Var),
    /// `out[i] = x[i, idx[i]]`
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every parameter node of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.by_var.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn log_softmax_t(&mut self, a: Var, tau: f64) -> Result<Var> {
        let out = self.value(a).log_softmax_t(tau)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, tau), rg))
    }

    pub fn softmax_t(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let out = self.value(a).softmax_t(tau)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, tau), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Selects one column per row: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if idx.len() != r {
            return Err(Error::shape("pick", &[r, c], &[idx.len()]));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Index(format!("column {j} out of range for {c} columns")));
            }
            out.push(t.data()[i * c + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::Pick(x, idx.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut nodes = self.nodes;
        nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    out.by_var.insert(Var(i), g);
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let ga = g.matmul(&val(*b).transpose()?)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if nodes[b.0].requires_grad {
                        let gb = val(*a).transpose()?.matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::AddBias(x, bias) => {
                    if nodes[bias.0].requires_grad {
                        let gb = g.sum_rows()?.reshape(val(*bias).shape().to_vec())?;
                        accumulate(&mut grads, *bias, gb)?;
                    }
                    if nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.mul(val(*b))?)?;
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g.mul(val(*a))?)?;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LogSoftmax(a, tau) => {
                    // dx = (g - p * rowsum(g)) / tau, with p = exp(out)
                    let y = &node.value;
                    let (r, c) = y.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    for row in 0..r {
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let total: f64 = gs.iter().sum();
                        for k in 0..c {
                            gx[row * c + k] = (gs[k] - ys[k].exp() * total) / tau;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![r, c], gx)?)?;
                }
                Op::Softmax(a, tau) => {
                    // dx = p * (g - <g, p>) / tau
                    let y = &node.value;
                    let (r, c) = y.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    for row in 0..r {
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            gx[row * c + k] = ys[k] * (gs[k] - dot) / tau;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![r, c], gx)?)?;
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(val(*a).shape(), g.item());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Pick(a, idx) => {
                    let shape = val(*a).shape().to_vec();
                    let c = shape[1];
                    let mut ga = Tensor::zeros(&shape);
                    for (row, (&j, &gv)) in idx.iter().zip(g.data()).enumerate() {
                        ga.data_mut()[row * c + j] = gv;
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, -3.0, 2.5]]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_square_norm_is_identity() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        // d/dw sum(w + w) = 2
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5]));
        let y = tape.add(w, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0]);
    }
}
