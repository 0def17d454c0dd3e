use super::{GradAcc, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{strides_of, Tensor};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Offsets of both operands for every output element under same-rank broadcasting.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return shape_err(format!("broadcast needs equal ranks, got {a:?} and {b:?}"));
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&da, &db) in a.iter().zip(b) {
            if da != db && da != 1 && db != 1 {
                return shape_err(format!("shapes {a:?} and {b:?} do not broadcast"));
            }
            out_shape.push(da.max(db));
        }
        let masked = |shape: &[usize]| -> Vec<usize> {
            strides_of(shape)
                .into_iter()
                .zip(shape.iter().zip(&out_shape))
                .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
                .collect()
        };
        let a_strides = masked(a);
        let b_strides = masked(b);
        Ok(Self { out_shape, a_strides, b_strides })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n: usize = self.out_shape.iter().product();
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += self.a_strides[ax];
                ib += self.b_strides[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ia -= self.a_strides[ax] * idx[ax];
                ib -= self.b_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

fn apply(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| apply(kind, x, y)).collect()
        } else {
            let plan = Broadcast::plan(ta.shape(), tb.shape())?;
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![0.0; plan.out_shape.iter().product()];
            plan.for_each(|o, ia, ib| out[o] = apply(kind, da[ia], db[ib]));
            return Ok(self.push(Tensor::new(plan.out_shape, out)?, Op::Binary { kind, a, b }, &[a, b]));
        };
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Element-wise sum with same-rank broadcasting over unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        self.push(out, Op::Sqrt { x }, &[x])
    }

    /// `max(x, min)` element-wise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let out = self.value(x).map(|v| v.max(min));
        self.push(out, Op::ClampMin { x, min }, &[x])
    }

    /// Element-wise maximum. The subgradient of a tie goes to `a`.
    pub fn elem_max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("elem_max shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| if x >= y { x } else { y }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ElemMax { a, b }, &[a, b]))
    }
}

pub(super) fn binary_backward(tape: &Tape, kind: BinaryKind, a: Var, b: Var, node: &Node, g: &[f64], acc: &mut GradAcc) {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let (da, db) = (ta.data(), tb.data());
    if ta.shape() == tb.shape() {
        match kind {
            BinaryKind::Add => {
                acc.add_slice(a, g);
                acc.add_slice(b, g);
            }
            BinaryKind::Sub => {
                acc.add_slice(a, g);
                acc.add_map(b, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            BinaryKind::Mul => {
                acc.add_map(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * db[i];
                    }
                });
                acc.add_map(b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * da[i];
                    }
                });
            }
            BinaryKind::Div => {
                acc.add_map(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / db[i];
                    }
                });
                acc.add_map(b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= g[i] * da[i] / (db[i] * db[i]);
                    }
                });
            }
        }
        return;
    }
    let plan = Broadcast::plan(ta.shape(), tb.shape()).expect("shapes checked in forward");
    debug_assert_eq!(plan.out_shape, node.value.shape());
    if acc.wants(a) {
        acc.add_map(a, |buf| {
            plan.for_each(|o, ia, ib| {
                buf[ia] += match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[o],
                    BinaryKind::Mul => g[o] * db[ib],
                    BinaryKind::Div => g[o] / db[ib],
                }
            })
        });
    }
    if acc.wants(b) {
        acc.add_map(b, |buf| {
            plan.for_each(|o, ia, ib| {
                buf[ib] += match kind {
                    BinaryKind::Add => g[o],
                    BinaryKind::Sub => -g[o],
                    BinaryKind::Mul => g[o] * da[ia],
                    BinaryKind::Div => -g[o] * da[ia] / (db[ib] * db[ib]),
                }
            })
        });
    }
}

pub(super) fn relu_backward(tape: &Tape, x: Var, g: &[f64], acc: &mut GradAcc) {
    let xs = tape.value(x).data();
    acc.add_map(x, |buf| {
        for i in 0..buf.len() {
            if xs[i] > 0.0 {
                buf[i] += g[i];
            }
        }
    });
}

pub(super) fn gelu_backward(tape: &Tape, x: Var, g: &[f64], acc: &mut GradAcc) {
    let xs = tape.value(x).data();
    acc.add_map(x, |buf| {
        for i in 0..buf.len() {
            buf[i] += g[i] * gelu_grad(xs[i]);
        }
    });
}

pub(super) fn sqrt_backward(x: Var, node: &Node, g: &[f64], acc: &mut GradAcc) {
    let ys = node.value.data();
    acc.add_map(x, |buf| {
        for i in 0..buf.len() {
            buf[i] += g[i] * 0.5 / ys[i];
        }
    });
}

pub(super) fn clamp_min_backward(tape: &Tape, x: Var, min: f64, g: &[f64], acc: &mut GradAcc) {
    let xs = tape.value(x).data();
    acc.add_map(x, |buf| {
        for i in 0..buf.len() {
            if xs[i] > min {
                buf[i] += g[i];
            }
        }
    });
}

pub(super) fn elem_max_backward(tape: &Tape, a: Var, b: Var, g: &[f64], acc: &mut GradAcc) {
    let (da, db) = (tape.value(a).data(), tape.value(b).data());
    let first_wins = |i: usize| da[i] >= db[i];
    acc.add_map(a, |buf| {
        for i in 0..buf.len() {
            if first_wins(i) {
                buf[i] += g[i];
            }
        }
    });
    acc.add_map(b, |buf| {
        for i in 0..buf.len() {
            if !first_wins(i) {
                buf[i] += g[i];
            }
        }
    });
}
