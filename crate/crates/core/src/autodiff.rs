//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! The tape records one loss evaluation as a sequence of primitive nodes.
//! Parameters are pushed as the leading leaves, so after the backward pass
//! the gradient slice is aligned with the parameter vector. A fused dot node
//! over contiguous value ranges keeps MLP evaluations compact: one node per
//! output unit instead of one per multiply.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("backward was already invoked on this tape")]
    BackwardTwice,
    #[error("dot ranges differ in length: {0} vs {1}")]
    DotLengthMismatch(u32, u32),
}

/// Handle to one recorded scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(u32);

/// A contiguous run of recorded scalars, e.g. one parameter slice or one
/// layer of activations.
#[derive(Debug, Clone, Copy)]
pub struct NodeRange {
    start: u32,
    len: u32,
}

impl NodeRange {
    /// The contiguous range of `len` nodes whose last element is `last`.
    pub fn ending_at(last: Node, len: usize) -> Self {
        debug_assert!(last.0 as usize + 1 >= len);
        Self {
            start: last.0 + 1 - len as u32,
            len: len as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn node(&self, i: usize) -> Node {
        debug_assert!(i < self.len as usize);
        Node(self.start + i as u32)
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    /// k * v[a] + c; the shift is baked into the stored value.
    Affine(u32, f64),
    Ln(u32),
    Exp(u32),
    Tanh(u32),
    Square(u32),
    /// sum_i v[w + i] * v[x + i]
    Dot(u32, u32, u32),
    /// sum of the contiguous range
    Sum(u32, u32),
}

/// Recorded computation graph for one loss evaluation.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    n_params: usize,
    spent: bool,
}

impl Tape {
    /// Starts a tape whose leading leaves mirror `params`; gradients returned
    /// by [`Tape::backward`] are aligned with this slice.
    pub fn new(params: &[f64]) -> Self {
        let mut tape = Self {
            ops: Vec::with_capacity(params.len() * 4),
            vals: Vec::with_capacity(params.len() * 4),
            n_params: params.len(),
            spent: false,
        };
        for &p in params {
            tape.push(Op::Leaf, p);
        }
        tape
    }

    fn push(&mut self, op: Op, val: f64) -> Node {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Node(id)
    }

    pub fn value(&self, n: Node) -> f64 {
        self.vals[n.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// The node mirroring parameter `i`.
    pub fn param(&self, i: usize) -> Node {
        debug_assert!(i < self.n_params);
        Node(i as u32)
    }

    /// The contiguous node range mirroring `params[offset .. offset + len]`.
    pub fn param_range(&self, offset: usize, len: usize) -> NodeRange {
        debug_assert!(offset + len <= self.n_params);
        NodeRange {
            start: offset as u32,
            len: len as u32,
        }
    }

    pub fn constant(&mut self, c: f64) -> Node {
        self.push(Op::Leaf, c)
    }

    pub fn constants(&mut self, xs: &[f64]) -> NodeRange {
        let start = self.ops.len() as u32;
        for &x in xs {
            self.push(Op::Leaf, x);
        }
        NodeRange {
            start,
            len: xs.len() as u32,
        }
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        self.push(Op::Add(a.0, b.0), self.vals[a.0 as usize] + self.vals[b.0 as usize])
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        self.push(Op::Sub(a.0, b.0), self.vals[a.0 as usize] - self.vals[b.0 as usize])
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        self.push(Op::Mul(a.0, b.0), self.vals[a.0 as usize] * self.vals[b.0 as usize])
    }

    /// `k * a + c` in a single node.
    pub fn affine(&mut self, a: Node, k: f64, c: f64) -> Node {
        self.push(Op::Affine(a.0, k), k * self.vals[a.0 as usize] + c)
    }

    pub fn ln(&mut self, a: Node) -> Node {
        self.push(Op::Ln(a.0), self.vals[a.0 as usize].ln())
    }

    pub fn exp(&mut self, a: Node) -> Node {
        self.push(Op::Exp(a.0), self.vals[a.0 as usize].exp())
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        self.push(Op::Tanh(a.0), self.vals[a.0 as usize].tanh())
    }

    pub fn square(&mut self, a: Node) -> Node {
        let v = self.vals[a.0 as usize];
        self.push(Op::Square(a.0), v * v)
    }

    /// Inner product of two equally long contiguous ranges.
    pub fn dot(&mut self, w: NodeRange, x: NodeRange) -> Result<Node, TapeError> {
        if w.len != x.len {
            return Err(TapeError::DotLengthMismatch(w.len, x.len));
        }
        let mut acc = 0.0;
        for i in 0..w.len as usize {
            acc += self.vals[w.start as usize + i] * self.vals[x.start as usize + i];
        }
        Ok(self.push(Op::Dot(w.start, x.start, w.len), acc))
    }

    /// Sum of a contiguous range.
    pub fn sum(&mut self, r: NodeRange) -> Node {
        let acc: f64 = (0..r.len as usize)
            .map(|i| self.vals[r.start as usize + i])
            .sum();
        self.push(Op::Sum(r.start, r.len), acc)
    }

    /// log(sum_i exp(x_i)) with a detached max shift; exact gradient, stable
    /// values.
    pub fn logsumexp(&mut self, xs: &[Node]) -> Node {
        debug_assert!(!xs.is_empty());
        let m = xs
            .iter()
            .map(|&n| self.value(n))
            .fold(f64::NEG_INFINITY, f64::max);
        // Shifts first so the exp nodes land contiguously for the sum.
        let shifted: Vec<Node> = xs.iter().map(|&x| self.affine(x, 1.0, -m)).collect();
        let start = self.ops.len() as u32;
        for &s in &shifted {
            self.exp(s);
        }
        let exps = NodeRange {
            start,
            len: xs.len() as u32,
        };
        let total = self.sum(exps);
        let l = self.ln(total);
        self.affine(l, 1.0, m)
    }

    /// Reverse-mode sweep from `loss`; returns gradients for the parameter
    /// leaves. Errors on the second invocation for the same tape.
    pub fn backward(&mut self, loss: Node) -> Result<Vec<f64>, TapeError> {
        if self.spent {
            return Err(TapeError::BackwardTwice);
        }
        self.spent = true;
        let mut grad = vec![0.0f64; self.ops.len()];
        grad[loss.0 as usize] = 1.0;
        for i in (0..=loss.0 as usize).rev() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grad[a as usize] += g;
                    grad[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    grad[a as usize] += g;
                    grad[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    grad[a as usize] += g * self.vals[b as usize];
                    grad[b as usize] += g * self.vals[a as usize];
                }
                Op::Affine(a, k) => {
                    grad[a as usize] += g * k;
                }
                Op::Ln(a) => {
                    grad[a as usize] += g / self.vals[a as usize];
                }
                Op::Exp(a) => {
                    grad[a as usize] += g * self.vals[i];
                }
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    grad[a as usize] += g * (1.0 - t * t);
                }
                Op::Square(a) => {
                    grad[a as usize] += g * 2.0 * self.vals[a as usize];
                }
                Op::Dot(w, x, len) => {
                    for k in 0..len as usize {
                        grad[w as usize + k] += g * self.vals[x as usize + k];
                        grad[x as usize + k] += g * self.vals[w as usize + k];
                    }
                }
                Op::Sum(start, len) => {
                    for k in 0..len as usize {
                        grad[start as usize + k] += g;
                    }
                }
            }
        }
        grad.truncate(self.n_params);
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: central finite differences of a closure.
    fn finite_diff(f: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(params.len());
        let mut work = params.to_vec();
        for i in 0..params.len() {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = [1.5, -2.0];
        let mut tape = Tape::new(&params);
        let c = tape.constant(42.0);
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads, vec![0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let params = [0.3, -1.1, 2.5];
        let mut tape = Tape::new(&params);
        let squares: Vec<Node> = (0..3).map(|i| {
            let p = tape.param(i);
            tape.square(p)
        }).collect();
        let s01 = tape.add(squares[0], squares[1]);
        let loss = tape.add(s01, squares[2]);
        let grads = tape.backward(loss).unwrap();
        for (g, p) in grads.iter().zip(params.iter()) {
            assert!((g - 2.0 * p).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new(&[1.0]);
        let p = tape.param(0);
        let loss = tape.square(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TapeError::BackwardTwice));
    }

    #[test]
    fn dot_length_mismatch() {
        let mut tape = Tape::new(&[1.0, 2.0, 3.0]);
        let w = tape.param_range(0, 2);
        let x = tape.constants(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            tape.dot(w, x),
            Err(TapeError::DotLengthMismatch(2, 3))
        ));
    }

    fn build_expr(tape: &mut Tape) -> Node {
        let w = tape.param_range(0, 2);
        let x = tape.constants(&[0.5, -1.5]);
        let d = tape.dot(w, x).unwrap();
        let p2 = tape.param(2);
        let t = tape.tanh(p2);
        let m = tape.mul(d, t);
        let p3 = tape.param(3);
        let e = tape.exp(p3);
        let s = tape.add(m, e);
        let p4 = tape.param(4);
        let sq = tape.square(p4);
        let shifted = tape.affine(sq, 1.0, 1.1);
        let l = tape.ln(shifted);
        let lse = tape.logsumexp(&[s, l, d]);
        let total = tape.add(s, lse);
        tape.square(total)
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        let params = [0.7, -0.4, 1.3, 0.2, -1.0];
        let loss_of = |p: &[f64]| {
            let mut tape = Tape::new(p);
            let loss = build_expr(&mut tape);
            tape.value(loss)
        };
        let mut tape = Tape::new(&params);
        let loss = build_expr(&mut tape);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff(loss_of, &params, 1e-5);
        for (g, f) in grads.iter().zip(fd.iter()) {
            let denom = g.abs().max(f.abs()).max(1e-3);
            assert!((g - f).abs() / denom < 1e-7, "ad {g} vs fd {f}");
        }
    }

    #[test]
    fn logsumexp_matches_direct_formula() {
        let params = [2.0, -30.0, 0.5];
        let mut tape = Tape::new(&params);
        let nodes = [tape.param(0), tape.param(1), tape.param(2)];
        let lse = tape.logsumexp(&nodes);
        let direct = params.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((tape.value(lse) - direct).abs() < 1e-12);
        let grads = tape.backward(lse).unwrap();
        let norm: f64 = params.iter().map(|x| x.exp()).sum();
        for (g, x) in grads.iter().zip(params.iter()) {
            assert!((g - x.exp() / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_over_range() {
        let mut tape = Tape::new(&[1.0, 2.0, 3.0]);
        let r = tape.param_range(0, 3);
        let s = tape.sum(r);
        assert_eq!(tape.value(s), 6.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads, vec![1.0, 1.0, 1.0]);
    }
}
