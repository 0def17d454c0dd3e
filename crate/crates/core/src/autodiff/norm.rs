use super::{GradAcc, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

impl Tape {
    /// Per-(sample, channel) normalization of `[N, C, ...]` followed by a
    /// per-channel affine map. Uses the biased variance and `eps = 1e-5`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 3 {
            return shape_err(format!("instance_norm needs [N, C, ...], got {:?}", t.shape()));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let plane: usize = t.shape()[2..].iter().product();
        if plane < 2 {
            return shape_err(format!(
                "instance_norm needs at least 2 elements per channel, got spatial shape {:?}",
                &t.shape()[2..]
            ));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("instance_norm affine params must have {c} entries"));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        let mut means = Vec::with_capacity(n * c);
        let mut inv_stds = Vec::with_capacity(n * c);
        for s in 0..n * c {
            let ch = s % c;
            let src = &d[s * plane..][..plane];
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in out[s * plane..][..plane].iter_mut().zip(src) {
                *o = gd[ch] * (v - mean) * inv_std + bd[ch];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let shape = t.shape().to_vec();
        let op = Op::InstanceNorm { x, gamma, beta, mean: means, inv_std: inv_stds };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x, gamma, beta]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn instance_norm_backward(
    tape: &Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    inv_std: &[f64],
    g: &[f64],
    acc: &mut GradAcc,
) {
    let t = tape.value(x);
    let c = t.shape()[1];
    let plane: usize = t.shape()[2..].iter().product();
    let d = t.data();
    let gd = tape.value(gamma).data();
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let want_x = acc.wants(x);
    let mut gx = if want_x { vec![0.0; d.len()] } else { Vec::new() };
    for s in 0..mean.len() {
        let ch = s % c;
        let src = &d[s * plane..][..plane];
        let gs = &g[s * plane..][..plane];
        let xhat = |v: f64| (v - mean[s]) * inv_std[s];
        let sum_g: f64 = gs.iter().sum();
        let sum_gx: f64 = gs.iter().zip(src).map(|(gv, &v)| gv * xhat(v)).sum();
        ggamma[ch] += sum_gx;
        gbeta[ch] += sum_g;
        if want_x {
            let m = plane as f64;
            let k = gd[ch] * inv_std[s];
            for ((o, gv), &v) in gx[s * plane..][..plane].iter_mut().zip(gs).zip(src) {
                *o = k * (gv - sum_g / m - xhat(v) * sum_gx / m);
            }
        }
    }
    if want_x {
        acc.add_slice(x, &gx);
    }
    acc.add_slice(gamma, &ggamma);
    acc.add_slice(beta, &gbeta);
}
