use super::{GradAcc, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Linear-interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSample {
    pub idx: [usize; 2],
    pub weight: [f64; 2],
    /// False when the coordinate was clamped to the border; the sample is
    /// then locally constant in the coordinate.
    pub inside: bool,
}

/// Stencil for continuous coordinate `c` on an axis of length `len`,
/// clamping to `[0, len - 1]`.
pub(crate) fn axis_sample(c: f64, len: usize) -> AxisSample {
    if len == 1 {
        return AxisSample { idx: [0, 0], weight: [1.0, 0.0], inside: false };
    }
    let hi = (len - 1) as f64;
    let inside = (0.0..=hi).contains(&c);
    let cc = c.clamp(0.0, hi);
    let i0 = (cc.floor() as usize).min(len - 2);
    let t = cc - i0 as f64;
    AxisSample { idx: [i0, i0 + 1], weight: [1.0 - t, t], inside }
}

/// Trilinear interpolation of one channel plane at the given stencils.
pub(crate) fn trilinear_corners(plane: &[f64], dims: [usize; 3], s: &[AxisSample; 3]) -> f64 {
    let [_, h, w] = dims;
    let mut v = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            for e in 0..2 {
                let wt = s[0].weight[a] * s[1].weight[b] * s[2].weight[e];
                v += wt * plane[(s[0].idx[a] * h + s[1].idx[b]) * w + s[2].idx[e]];
            }
        }
    }
    v
}

/// Source stencils for a factor-2 upsampling of an axis of length `len`
/// (half-pixel centres, border clamped).
fn upsample_table(len: usize) -> Vec<AxisSample> {
    (0..2 * len)
        .map(|o| axis_sample((o as f64 + 0.5) / 2.0 - 0.5, len))
        .collect()
}

fn voxel_stencils(u: &[f64], plane: usize, dims: [usize; 3], v: usize, p: [usize; 3]) -> [AxisSample; 3] {
    let mut s = [axis_sample(0.0, 1); 3];
    for a in 0..3 {
        s[a] = axis_sample(p[a] as f64 + u[a * plane + v], dims[a]);
    }
    s
}

impl Tape {
    /// Trilinear upsampling of `[N, C, D, H, W]` by 2 along every spatial axis.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [d, h, w] = t.spatial_dims()?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let tables = [upsample_table(d), upsample_table(h), upsample_table(w)];
        let (ip, op) = (d * h * w, 8 * d * h * w);
        let src = t.data();
        let mut out = vec![0.0; n * c * op];
        for s in 0..n * c {
            let plane = &src[s * ip..][..ip];
            let dst = &mut out[s * op..][..op];
            let mut o = 0;
            for sd in &tables[0] {
                for sh in &tables[1] {
                    for sw in &tables[2] {
                        dst[o] = trilinear_corners(plane, [d, h, w], &[*sd, *sh, *sw]);
                        o += 1;
                    }
                }
            }
        }
        let out = Tensor::new([n, c, 2 * d, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2x { x }, &[x]))
    }

    /// Samples `m: [N, C, D, H, W]` at `p + u(p)` with trilinear interpolation,
    /// where `u: [N, 3, D, H, W]` holds (depth, height, width) displacements
    /// in voxels. Coordinates outside the grid clamp to the border.
    pub fn warp(&mut self, m: Var, u: Var) -> Result<Var> {
        let (tm, tu) = (self.value(m), self.value(u));
        let dims = tm.spatial_dims()?;
        let (n, c) = (tm.shape()[0], tm.shape()[1]);
        if tu.shape() != [n, 3, dims[0], dims[1], dims[2]] {
            return shape_err(format!("warp: field {:?} does not match image {:?}", tu.shape(), tm.shape()));
        }
        let plane = dims.iter().product::<usize>();
        let (md, ud) = (tm.data(), tu.data());
        let mut out = vec![0.0; md.len()];
        for b in 0..n {
            let ub = &ud[b * 3 * plane..][..3 * plane];
            let mut v = 0;
            for pd in 0..dims[0] {
                for ph in 0..dims[1] {
                    for pw in 0..dims[2] {
                        let s = voxel_stencils(ub, plane, dims, v, [pd, ph, pw]);
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            out[off + v] = trilinear_corners(&md[off..][..plane], dims, &s);
                        }
                        v += 1;
                    }
                }
            }
        }
        let shape = tm.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Warp { m, u }, &[m, u]))
    }
}

pub(super) fn upsample_backward(tape: &Tape, x: Var, _node: &Node, g: &[f64], acc: &mut GradAcc) {
    let t = tape.value(x);
    let [d, h, w] = t.spatial_dims().expect("checked in forward");
    let tables = [upsample_table(d), upsample_table(h), upsample_table(w)];
    let (ip, op) = (d * h * w, 8 * d * h * w);
    acc.add_map(x, |buf| {
        for s in 0..buf.len() / ip {
            let gplane = &g[s * op..][..op];
            let dst = &mut buf[s * ip..][..ip];
            let mut o = 0;
            for sd in &tables[0] {
                for sh in &tables[1] {
                    for sw in &tables[2] {
                        let gv = gplane[o];
                        o += 1;
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let wt = sd.weight[a] * sh.weight[b] * sw.weight[e];
                                    dst[(sd.idx[a] * h + sh.idx[b]) * w + sw.idx[e]] += wt * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn warp_backward(tape: &Tape, m: Var, u: Var, g: &[f64], acc: &mut GradAcc) {
    let (tm, tu) = (tape.value(m), tape.value(u));
    let dims = tm.spatial_dims().expect("checked in forward");
    let [_, h, w] = dims;
    let (n, c) = (tm.shape()[0], tm.shape()[1]);
    let plane = dims.iter().product::<usize>();
    let (md, ud) = (tm.data(), tu.data());
    let want_m = acc.wants(m);
    let want_u = acc.wants(u);
    let mut gm = if want_m { vec![0.0; md.len()] } else { Vec::new() };
    let mut gu = if want_u { vec![0.0; ud.len()] } else { Vec::new() };
    let at = |s: &[AxisSample; 3], a: usize, b: usize, e: usize| (s[0].idx[a] * h + s[1].idx[b]) * w + s[2].idx[e];
    for bt in 0..n {
        let ub = &ud[bt * 3 * plane..][..3 * plane];
        let mut v = 0;
        for pd in 0..dims[0] {
            for ph in 0..dims[1] {
                for pw in 0..dims[2] {
                    let s = voxel_stencils(ub, plane, dims, v, [pd, ph, pw]);
                    let mut dcoord = [0.0; 3];
                    for ch in 0..c {
                        let off = (bt * c + ch) * plane;
                        let gv = g[off + v];
                        if gv == 0.0 {
                            continue;
                        }
                        let mp = &md[off..][..plane];
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let idx = at(&s, a, b, e);
                                    if want_m {
                                        gm[off + idx] += gv * s[0].weight[a] * s[1].weight[b] * s[2].weight[e];
                                    }
                                    if want_u {
                                        let val = gv * mp[idx];
                                        let sign = |k: usize| if k == 0 { -1.0 } else { 1.0 };
                                        dcoord[0] += val * sign(a) * s[1].weight[b] * s[2].weight[e];
                                        dcoord[1] += val * s[0].weight[a] * sign(b) * s[2].weight[e];
                                        dcoord[2] += val * s[0].weight[a] * s[1].weight[b] * sign(e);
                                    }
                                }
                            }
                        }
                    }
                    if want_u {
                        for ax in 0..3 {
                            if s[ax].inside {
                                gu[(bt * 3 + ax) * plane + v] += dcoord[ax];
                            }
                        }
                    }
                    v += 1;
                }
            }
        }
    }
    if want_m {
        acc.add_slice(m, &gm);
    }
    if want_u {
        acc.add_slice(u, &gu);
    }
}
