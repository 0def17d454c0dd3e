use super::{GradAcc, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and group count of a 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl ConvOpts {
    pub fn same3() -> Self {
        Self { stride: 1, padding: 1, groups: 1 }
    }
}

fn out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if span < kernel || (span - kernel) % stride != 0 {
        return shape_err(format!(
            "conv3d: extent {input} with kernel {kernel}, stride {stride}, padding {padding} does not divide exactly"
        ));
    }
    Ok((span - kernel) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + k - pad < input`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k { ((input - 1 + pad - k) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    opts: ConvOpts,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], opts: ConvOpts) -> Result<Self> {
        let ([n, cin, d, h, wd], [cout, cin_g, kd, kh, kw]) = (x, w) else {
            return shape_err(format!("conv3d needs 5-D input and weight, got {x:?} and {w:?}"));
        };
        let (n, cin, cout, cin_g) = (*n, *cin, *cout, *cin_g);
        let g = opts.groups;
        if g == 0 || opts.stride == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return shape_err(format!(
                "conv3d: {cin} input / {cout} output channels incompatible with {g} groups and weight {w:?}"
            ));
        }
        let input = [*d, *h, *wd];
        let kernel = [*kd, *kh, *kw];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = out_len(input[a], kernel[a], opts.stride, opts.padding)?;
        }
        Ok(Self { n, cin, cout, cin_g, cout_g: cout / g, input, kernel, output, opts })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Visits each `(out_row_offset, in_row_offset, ow_lo, ow_hi, kw)` for one
    /// input/output channel pair and one kernel offset `(kd, kh)`.
    #[inline]
    fn rows(&self, kd: usize, kh: usize, mut f: impl FnMut(usize, usize)) {
        let (s, p) = (self.opts.stride, self.opts.padding);
        let [_, ih_len, iw_len] = self.input;
        let [od_len, oh_len, ow_len] = self.output;
        let (d_lo, d_hi) = valid_range(od_len, self.input[0], kd, s, p);
        let (h_lo, h_hi) = valid_range(oh_len, ih_len, kh, s, p);
        for od in d_lo..d_hi {
            let id = od * s + kd - p;
            for oh in h_lo..h_hi {
                let ih = oh * s + kh - p;
                f((od * oh_len + oh) * ow_len, (id * ih_len + ih) * iw_len);
            }
        }
    }
}

impl Tape {
    /// `x[..., n] @ w[n, p]`, broadcasting over leading axes of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let [kn, p] = tw.shape()[..] else {
            return shape_err(format!("matmul weight must be 2-D, got {:?}", tw.shape()));
        };
        if tx.rank() == 0 || *tx.shape().last().unwrap() != kn {
            return shape_err(format!("matmul: {:?} x {:?} dimension mismatch", tx.shape(), tw.shape()));
        }
        let m = tx.len() / kn;
        let (xd, wdat) = (tx.data(), tw.data());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &mut out[i * p..][..p];
            for (k, &xv) in xd[i * kn..][..kn].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                row.iter_mut().zip(&wdat[k * p..][..p]).for_each(|(o, wv)| *o += xv * wv);
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { x, w }, &[x, w]))
    }

    /// Affine map over the last axis: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let Some(b) = b else { return Ok(y) };
        let rank = self.value(y).rank();
        let dout = *self.shape(y).last().unwrap();
        if self.value(b).len() != dout {
            return shape_err(format!("linear bias {:?} does not match output width {dout}", self.shape(b)));
        }
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = dout;
        let br = self.reshape(b, bshape)?;
        self.add(y, br)
    }

    /// Grouped 3-D cross-correlation with zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), opts)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.cout {
                return shape_err(format!("conv3d bias {:?} for {} output channels", self.shape(b), geom.cout));
            }
        }
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let (ip, op) = (geom.in_plane(), geom.out_plane());
        let [kd_len, kh_len, kw_len] = geom.kernel;
        let ksz = kd_len * kh_len * kw_len;
        let (s, p) = (opts.stride, opts.padding);
        let ow_len = geom.output[2];
        let iw_len = geom.input[2];
        let mut out = vec![0.0; geom.n * geom.cout * op];
        for n in 0..geom.n {
            for oc in 0..geom.cout {
                let grp = oc / geom.cout_g;
                let oplane = &mut out[(n * geom.cout + oc) * op..][..op];
                if let Some(bias) = bias {
                    oplane.fill(bias[oc]);
                }
                for icg in 0..geom.cin_g {
                    let ic = grp * geom.cin_g + icg;
                    let iplane = &xd[(n * geom.cin + ic) * ip..][..ip];
                    let wk = &wdat[(oc * geom.cin_g + icg) * ksz..][..ksz];
                    for kd in 0..kd_len {
                        for kh in 0..kh_len {
                            for kw in 0..kw_len {
                                let wv = wk[(kd * kh_len + kh) * kw_len + kw];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (lo, hi) = valid_range(ow_len, iw_len, kw, s, p);
                                geom.rows(kd, kh, |orow, irow| {
                                    let o = &mut oplane[orow..][..ow_len];
                                    let i = &iplane[irow..][..iw_len];
                                    if s == 1 {
                                        let shift = kw as isize - p as isize;
                                        let src = &i[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                        o[lo..hi].iter_mut().zip(src).for_each(|(ov, iv)| *ov += wv * iv);
                                    } else {
                                        for ow in lo..hi {
                                            o[ow] += wv * i[ow * s + kw - p];
                                        }
                                    }
                                });
                            }
                        }
                    }
                }
            }
        }
        let shape = [geom.n, geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv3d { x, w, b, opts }, &inputs))
    }
}

pub(super) fn matmul_backward(tape: &Tape, x: Var, w: Var, g: &[f64], acc: &mut GradAcc) {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let (kn, p) = (tw.shape()[0], tw.shape()[1]);
    let m = tx.len() / kn;
    let (xd, wdat) = (tx.data(), tw.data());
    acc.add_map(x, |gx| {
        for i in 0..m {
            let grow = &g[i * p..][..p];
            for k in 0..kn {
                let wrow = &wdat[k * p..][..p];
                gx[i * kn + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    acc.add_map(w, |gw| {
        for i in 0..m {
            let grow = &g[i * p..][..p];
            for k in 0..kn {
                let xv = xd[i * kn + k];
                if xv == 0.0 {
                    continue;
                }
                gw[k * p..][..p].iter_mut().zip(grow).for_each(|(o, gv)| *o += xv * gv);
            }
        }
    });
}

pub(super) fn conv3d_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    opts: ConvOpts,
    _node: &Node,
    g: &[f64],
    acc: &mut GradAcc,
) {
    let geom = ConvGeom::new(tape.shape(x), tape.shape(w), opts).expect("checked in forward");
    let (xd, wdat) = (tape.value(x).data(), tape.value(w).data());
    let (ip, op) = (geom.in_plane(), geom.out_plane());
    let [kd_len, kh_len, kw_len] = geom.kernel;
    let ksz = kd_len * kh_len * kw_len;
    let (s, p) = (opts.stride, opts.padding);
    let ow_len = geom.output[2];
    let iw_len = geom.input[2];

    if let Some(b) = b {
        acc.add_map(b, |gb| {
            for n in 0..geom.n {
                for (oc, gbv) in gb.iter_mut().enumerate() {
                    *gbv += g[(n * geom.cout + oc) * op..][..op].iter().sum::<f64>();
                }
            }
        });
    }
    let want_x = acc.wants(x);
    let want_w = acc.wants(w);
    let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; wdat.len()] } else { Vec::new() };
    for n in 0..geom.n {
        for oc in 0..geom.cout {
            let grp = oc / geom.cout_g;
            let gplane = &g[(n * geom.cout + oc) * op..][..op];
            for icg in 0..geom.cin_g {
                let ic = grp * geom.cin_g + icg;
                let ioff = (n * geom.cin + ic) * ip;
                let iplane = &xd[ioff..][..ip];
                let woff = (oc * geom.cin_g + icg) * ksz;
                for kd in 0..kd_len {
                    for kh in 0..kh_len {
                        for kw in 0..kw_len {
                            let widx = woff + (kd * kh_len + kh) * kw_len + kw;
                            let wv = wdat[widx];
                            let (lo, hi) = valid_range(ow_len, iw_len, kw, s, p);
                            let mut wacc = 0.0;
                            geom.rows(kd, kh, |orow, irow| {
                                let go = &gplane[orow..][..ow_len];
                                if s == 1 {
                                    let shift = kw as isize - p as isize;
                                    let (a, z) = ((lo as isize + shift) as usize, (hi as isize + shift) as usize);
                                    if want_w {
                                        let i = &iplane[irow..][..iw_len];
                                        wacc += go[lo..hi].iter().zip(&i[a..z]).map(|(x, y)| x * y).sum::<f64>();
                                    }
                                    if want_x && wv != 0.0 {
                                        let gi = &mut gx[ioff + irow..][..iw_len];
                                        gi[a..z].iter_mut().zip(&go[lo..hi]).for_each(|(t, gv)| *t += wv * gv);
                                    }
                                } else {
                                    for ow in lo..hi {
                                        let iw = ow * s + kw - p;
                                        if want_w {
                                            wacc += go[ow] * iplane[irow + iw];
                                        }
                                        if want_x {
                                            gx[ioff + irow + iw] += wv * go[ow];
                                        }
                                    }
                                }
                            });
                            if want_w {
                                gw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        acc.add_slice(x, &gx);
    }
    if want_w {
        acc.add_slice(w, &gw);
    }
}
