use super::{GradAcc, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return shape_err(format!("sum_axis: axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, &[x]))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return shape_err(format!("softmax: axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, &[x]))
    }
}

pub(super) fn sum_axis_backward(tape: &Tape, x: Var, axis: usize, g: &[f64], acc: &mut GradAcc) {
    let (outer, len, inner) = split_axis(tape.shape(x), axis);
    acc.add_map(x, |buf| {
        for o in 0..outer {
            for l in 0..len {
                let dst = &mut buf[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(&g[o * inner..][..inner]).for_each(|(a, b)| *a += b);
            }
        }
    });
}

pub(super) fn softmax_backward(tape: &Tape, x: Var, axis: usize, node: &Node, g: &[f64], acc: &mut GradAcc) {
    let (outer, len, inner) = split_axis(tape.shape(x), axis);
    let y = node.value.data();
    acc.add_map(x, |buf| {
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                for l in 0..len {
                    buf[at(l)] += y[at(l)] * (g[at(l)] - dot);
                }
            }
        }
    });
}
