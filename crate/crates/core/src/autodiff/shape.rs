use super::reduce::split_axis;
use super::{GradAcc, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Spatial axis of a `[N, C, D, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis3 {
    Depth,
    Height,
    Width,
}

impl Axis3 {
    pub const ALL: [Axis3; 3] = [Axis3::Depth, Axis3::Height, Axis3::Width];

    /// Position of this axis within a 5-D tensor shape.
    pub fn dim(self) -> usize {
        match self {
            Axis3::Depth => 2,
            Axis3::Height => 3,
            Axis3::Width => 4,
        }
    }

    /// Position within a `(D, H, W)` triple.
    pub fn spatial_index(self) -> usize {
        self.dim() - 2
    }
}

/// Circular shift along a split axis: `out[i] = x[(i - shift) mod len]`.
fn roll_raw(d: &[f64], (outer, len, inner): (usize, usize, usize), shift: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for l in 0..len {
            let src = (l + len - shift) % len;
            out[base + l * inner..][..inner].copy_from_slice(&d[base + src * inner..][..inner]);
        }
    }
    out
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [r, c] = t.shape()[..] else {
            return shape_err(format!("transpose2d needs a matrix, got {:?}", t.shape()));
        };
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose2d { x }, &[x]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return shape_err(format!("narrow {start}+{len} on axis {axis} of {:?}", t.shape()));
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Circular shift of a 5-D tensor along a spatial axis. Any integer shift
    /// is reduced modulo the axis length.
    pub fn roll3d(&mut self, x: Var, axis: Axis3, shift: i64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 5 {
            return shape_err(format!("roll3d needs a 5-D tensor, got {:?}", t.shape()));
        }
        let split = split_axis(t.shape(), axis.dim());
        let shift = shift.rem_euclid(split.1 as i64) as usize;
        let out = Tensor::new(t.shape().to_vec(), roll_raw(t.data(), split, shift))?;
        Ok(self.push(out, Op::Roll3d { x, axis, shift }, &[x]))
    }
}

pub(super) fn transpose_backward(tape: &Tape, x: Var, g: &[f64], acc: &mut GradAcc) {
    let (r, c) = (tape.shape(x)[0], tape.shape(x)[1]);
    acc.add_map(x, |buf| {
        for i in 0..r {
            for j in 0..c {
                buf[i * c + j] += g[j * r + i];
            }
        }
    });
}

pub(super) fn concat_backward(tape: &Tape, parts: &[Var], axis: usize, g: &[f64], acc: &mut GradAcc) {
    let base = tape.shape(parts[0]);
    let (outer, _, inner) = split_axis(base, axis);
    let total: usize = parts.iter().map(|&p| tape.shape(p)[axis]).sum();
    let mut offset = 0;
    for &p in parts {
        let len = tape.shape(p)[axis];
        acc.add_map(p, |buf| {
            for o in 0..outer {
                let src = &g[(o * total + offset) * inner..][..len * inner];
                buf[o * len * inner..][..len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        });
        offset += len;
    }
}

pub(super) fn narrow_backward(tape: &Tape, x: Var, axis: usize, start: usize, node: &Node, g: &[f64], acc: &mut GradAcc) {
    let (outer, full, inner) = split_axis(tape.shape(x), axis);
    let len = node.value.shape()[axis];
    acc.add_map(x, |buf| {
        for o in 0..outer {
            let dst = &mut buf[(o * full + start) * inner..][..len * inner];
            dst.iter_mut().zip(&g[o * len * inner..][..len * inner]).for_each(|(a, b)| *a += b);
        }
    });
}

pub(super) fn roll_backward(tape: &Tape, x: Var, axis: Axis3, shift: usize, g: &[f64], acc: &mut GradAcc) {
    let split = split_axis(tape.shape(x), axis.dim());
    let back = (split.1 - shift) % split.1;
    let rolled = roll_raw(g, split, back);
    acc.add_slice(x, &rolled);
}
