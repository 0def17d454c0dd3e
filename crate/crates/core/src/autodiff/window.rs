use super::reduce::split_axis;
use super::{Axis3, GradAcc, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Valid-window sum of length `n` along one split axis.
fn box_axis(d: &[f64], shape: &[usize], axis: usize, n: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, len, inner) = split_axis(shape, axis);
    let olen = len + 1 - n;
    let mut out = vec![0.0; outer * olen * inner];
    for o in 0..outer {
        for l in 0..olen {
            let dst = &mut out[(o * olen + l) * inner..][..inner];
            for k in 0..n {
                let src = &d[(o * len + l + k) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
    }
    let mut s = shape.to_vec();
    s[axis] = olen;
    (out, s)
}

/// Adjoint of [`box_axis`]: spreads each window sum back over its inputs.
fn box_axis_adjoint(g: &[f64], out_shape: &[usize], axis: usize, n: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, olen, inner) = split_axis(out_shape, axis);
    let len = olen + n - 1;
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for l in 0..olen {
            let src = &g[(o * olen + l) * inner..][..inner];
            for k in 0..n {
                let dst = &mut out[(o * len + l + k) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
    }
    let mut s = out_shape.to_vec();
    s[axis] = len;
    (out, s)
}

impl Tape {
    /// Sum over every fully contained `n³` window of a 5-D tensor; the output
    /// spatial extent is `dim - n + 1` per axis.
    pub fn box_sum3d(&mut self, x: Var, window: usize) -> Result<Var> {
        let t = self.value(x);
        let dims = t.spatial_dims()?;
        if window == 0 || dims.iter().any(|&d| d < window) {
            return shape_err(format!("box window {window} does not fit spatial dims {dims:?}"));
        }
        let (mut data, mut shape) = (t.data().to_vec(), t.shape().to_vec());
        for ax in Axis3::ALL {
            (data, shape) = box_axis(&data, &shape, ax.dim(), window);
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::BoxSum { x, window }, &[x]))
    }

    /// `x[i + 1] - x[i]` along a spatial axis (length shrinks by one).
    pub fn forward_diff(&mut self, x: Var, axis: Axis3) -> Result<Var> {
        let t = self.value(x);
        t.spatial_dims()?;
        let (outer, len, inner) = split_axis(t.shape(), axis.dim());
        if len < 2 {
            return shape_err(format!("forward_diff needs length >= 2 along {axis:?}"));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * (len - 1) * inner);
        for o in 0..outer {
            for l in 0..len - 1 {
                let a = &d[(o * len + l) * inner..][..inner];
                let b = &d[(o * len + l + 1) * inner..][..inner];
                out.extend(b.iter().zip(a).map(|(y, x)| y - x));
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis.dim()] = len - 1;
        Ok(self.push(Tensor::new(shape, out)?, Op::ForwardDiff { x, axis }, &[x]))
    }
}

pub(super) fn box_sum_backward(_tape: &Tape, x: Var, window: usize, node: &Node, g: &[f64], acc: &mut GradAcc) {
    let (mut data, mut shape) = (g.to_vec(), node.value.shape().to_vec());
    for ax in Axis3::ALL.iter().rev() {
        (data, shape) = box_axis_adjoint(&data, &shape, ax.dim(), window);
    }
    acc.add_slice(x, &data);
}

pub(super) fn forward_diff_backward(tape: &Tape, x: Var, axis: Axis3, g: &[f64], acc: &mut GradAcc) {
    let (outer, len, inner) = split_axis(tape.shape(x), axis.dim());
    acc.add_map(x, |buf| {
        for o in 0..outer {
            for l in 0..len - 1 {
                let gs = &g[(o * (len - 1) + l) * inner..][..inner];
                for (i, gv) in gs.iter().enumerate() {
                    buf[(o * len + l + 1) * inner + i] += gv;
                    buf[(o * len + l) * inner + i] -= gv;
                }
            }
        }
    });
}
