//! Central finite-difference gradient checks.
//!
//! [`check`] compares the tape's reverse-mode gradients against
//! `(f(x + h) - f(x - h)) / 2h` coordinate by coordinate. The suites below
//! cover every differentiable tape op, each composite block and the full
//! network; they back both the test suite and `sgareg grad-check`.

use crate::autodiff::{Axis3, ConvOpts, Tape, Var};
use crate::error::{config_err, Result};
use crate::losses::{lncc_tape, mse_tape, reg_loss_tape, SimilarityKind};
use crate::network::{loss_tape, NetworkConfig, RegistrationModel, TrainPair};
use crate::params::{Bound, ParamStore};
use crate::sga::{ffn, grapher, mrconv_sga, sga_block, FfnParams, GrapherParams, GraphSpec, SgaBlockParams};
use crate::ssaformer::{
    context_scores, dcs, mha_reference, ssa, ssaformer_block, DcsParams, MhaParams, SsaFormerParams, SsaParams,
};
use crate::params::ConvParams;
use crate::tensor::Tensor;
use crate::volume::Volume;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that vanish
/// analytically are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < REL_TOL
    }

    pub fn summary(&self) -> String {
        let status = if self.passed() { "ok  " } else { "FAIL" };
        let mut s = format!("{status} {:<28} coords={:<5} max_rel_err={:.3e}", self.name, self.checked, self.max_rel_err);
        if let (false, Some(w)) = (self.passed(), self.worst) {
            s.push_str(&format!(" at input {} index {} (analytic {:.6e}, numeric {:.6e})", w.input, w.index, w.analytic, w.numeric));
        }
        s
    }
}

/// Scalar loss builder: receives one tape variable per input tensor.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Checks `d f / d inputs`. With `sample = Some((n, seed))` only `n`
/// coordinates drawn uniformly over all inputs are compared.
pub fn check(name: &str, inputs: &[Tensor], sample_coords: Option<(usize, u64)>, f: &LossFn) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };

    let offsets: Vec<usize> = inputs.iter().scan(0, |acc, t| { let o = *acc; *acc += t.len(); Some(o) }).collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = match sample_coords {
        Some((n, seed)) if n < total => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };

    let mut values = inputs.to_vec();
    let mut report = GradCheckReport { name: name.to_string(), checked: 0, max_rel_err: 0.0, worst: None };
    for flat in coords {
        let input = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[input];
        let x0 = values[input].data()[index];
        values[input].data_mut()[index] = x0 + FD_STEP;
        let up = eval(&values)?;
        values[input].data_mut()[index] = x0 - FD_STEP;
        let down = eval(&values)?;
        values[input].data_mut()[index] = x0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[input].data()[index];
        let rel_err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || rel_err > report.max_rel_err || rel_err.is_nan() {
            report.max_rel_err = if rel_err.is_nan() { f64::INFINITY } else { rel_err };
            report.worst = Some(Mismatch { input, index, analytic: a, numeric, rel_err });
        }
    }
    Ok(report)
}

/// `Σ y ⊙ r` for a fixed random `r`, turning any output into a scalar whose
/// gradient exercises every output element.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Checks a parameterized block: every parameter in `store` plus the block
/// input `x` are checked.
fn check_block(
    name: &str,
    store: &ParamStore,
    x: Tensor,
    sample_coords: Option<(usize, u64)>,
    f: &dyn Fn(&mut Tape, Var, &Bound) -> Result<Var>,
) -> Result<GradCheckReport> {
    let n = store.len();
    let mut inputs = store.values().to_vec();
    inputs.push(x);
    check(name, &inputs, sample_coords, &|tape, vars| {
        let bound = Bound::from_vars(store, vars[..n].to_vec());
        let y = f(tape, vars[n], &bound)?;
        project(tape, y, 99)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Sga,
    Ssa,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ops, Suite::Sga, Suite::Ssa, Suite::Network];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Sga => "sga",
            Suite::Ssa => "ssa",
            Suite::Network => "network",
        }
    }

    /// `all` expands to every suite.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Suite::ALL.to_vec()),
            "ops" => Ok(vec![Suite::Ops]),
            "sga" => Ok(vec![Suite::Sga]),
            "ssa" => Ok(vec![Suite::Ssa]),
            "network" => Ok(vec![Suite::Network]),
            other => config_err(format!("unknown grad-check module {other:?} (expected all, ops, sga, ssa or network)")),
        }
    }

    pub fn run(self) -> Result<Vec<GradCheckReport>> {
        match self {
            Suite::Ops => ops_suite(),
            Suite::Sga => sga_suite(),
            Suite::Ssa => ssa_suite(),
            Suite::Network => network_suite(),
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Uniform magnitudes in `[lo, hi]` with random signs, away from zero.
fn signed(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, lo, hi, rng);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random::<bool>() {
            *v = -*v
        }
    });
    t
}

type OpCase = (&'static str, Vec<Tensor>, Box<LossFn<'static>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let v5 = [1, 2, 3, 4, 3];
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, vec![$($t),*], Box::new($f)))
        };
    }
    case!("add (broadcast)", [uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[1, 3, 1], -1.0, 1.0, rng)], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 1)
    });
    case!("sub", [uniform(&[3, 4], -1.0, 1.0, rng), uniform(&[3, 4], -1.0, 1.0, rng)], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 2)
    });
    case!("mul (broadcast)", [uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[2, 1, 4], -1.0, 1.0, rng)], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 3)
    });
    case!("div", [uniform(&[3, 4], -1.0, 1.0, rng), signed(&[3, 4], 0.5, 1.5, rng)], |t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y, 4)
    });
    case!("scale/add_scalar", [uniform(&[5], -1.0, 1.0, rng)], |t, v| {
        let y = t.scale(v[0], -2.5);
        let y = t.add_scalar(y, 0.7);
        project(t, y, 5)
    });
    case!("relu", [signed(&[4, 5], 0.05, 1.0, rng)], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 6)
    });
    case!("gelu", [uniform(&[4, 5], -3.0, 3.0, rng)], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 7)
    });
    case!("sqrt", [uniform(&[6], 0.2, 2.0, rng)], |t, v| {
        let y = t.sqrt(v[0]);
        project(t, y, 8)
    });
    case!("clamp_min", [signed(&[8], 0.05, 1.0, rng)], |t, v| {
        let y = t.clamp_min(v[0], 0.0);
        project(t, y, 9)
    });
    let a = uniform(&[12], -1.0, 1.0, rng);
    let b = Tensor::from_fn([12], |i| a.data()[i[0]] + if i[0] % 2 == 0 { 0.3 } else { -0.3 });
    case!("elem_max", [a, b], |t, v| {
        let y = t.elem_max(v[0], v[1])?;
        project(t, y, 10)
    });
    case!("sum/mean", [uniform(&[3, 3], -1.0, 1.0, rng)], |t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0]);
        let sq = t.mul(s, m)?;
        Ok(sq)
    });
    case!("sum_axis", [uniform(&[2, 3, 4], -1.0, 1.0, rng)], |t, v| {
        let y = t.sum_axis(v[0], 1)?;
        project(t, y, 11)
    });
    case!("softmax", [uniform(&[3, 5], -2.0, 2.0, rng)], |t, v| {
        let y0 = t.softmax(v[0], 0)?;
        let y1 = t.softmax(v[0], 1)?;
        let y = t.add(y0, y1)?;
        project(t, y, 12)
    });
    case!("reshape/transpose2d", [uniform(&[2, 6], -1.0, 1.0, rng)], |t, v| {
        let y = t.reshape(v[0], [3, 4])?;
        let y = t.transpose2d(y)?;
        project(t, y, 13)
    });
    case!("concat/narrow", [uniform(&[2, 3], -1.0, 1.0, rng), uniform(&[2, 2], -1.0, 1.0, rng)], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        let y = t.narrow(y, 1, 1, 3)?;
        project(t, y, 14)
    });
    case!("roll3d", [uniform(&v5, -1.0, 1.0, rng)], |t, v| {
        let y = t.roll3d(v[0], Axis3::Depth, 1)?;
        let y = t.roll3d(y, Axis3::Height, -2)?;
        let y = t.roll3d(y, Axis3::Width, 5)?;
        project(t, y, 15)
    });
    case!("matmul", [uniform(&[4, 8], -1.0, 1.0, rng), uniform(&[8, 3], -1.0, 1.0, rng)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 16)
    });
    case!("linear", [uniform(&[2, 3, 4], -1.0, 1.0, rng), uniform(&[4, 2], -1.0, 1.0, rng), uniform(&[2], -1.0, 1.0, rng)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 17)
    });
    case!(
        "conv3d 3^3 pad 1",
        [uniform(&[1, 2, 4, 3, 4], -1.0, 1.0, rng), uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, rng), uniform(&[3], -1.0, 1.0, rng)],
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), ConvOpts::same3())?;
            project(t, y, 18)
        }
    );
    case!(
        "conv3d stride 2",
        [uniform(&[2, 2, 4, 4, 2], -1.0, 1.0, rng), uniform(&[3, 2, 2, 2, 2], -0.5, 0.5, rng), uniform(&[3], -1.0, 1.0, rng)],
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), ConvOpts { stride: 2, padding: 0, groups: 1 })?;
            project(t, y, 19)
        }
    );
    case!(
        "conv3d grouped",
        [uniform(&[1, 4, 3, 3, 3], -1.0, 1.0, rng), uniform(&[4, 1, 3, 3, 3], -0.5, 0.5, rng)],
        |t, v| {
            let y = t.conv3d(v[0], v[1], None, ConvOpts { stride: 1, padding: 1, groups: 4 })?;
            project(t, y, 20)
        }
    );
    case!(
        "instance_norm",
        [uniform(&[2, 3, 2, 3, 2], -1.0, 1.0, rng), uniform(&[3], 0.5, 1.5, rng), uniform(&[3], -0.5, 0.5, rng)],
        |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2])?;
            project(t, y, 21)
        }
    );
    case!("upsample2x", [uniform(&[1, 2, 2, 3, 2], -1.0, 1.0, rng)], |t, v| {
        let y = t.upsample2x(v[0])?;
        project(t, y, 22)
    });
    case!("warp", [uniform(&[1, 2, 4, 4, 4], -1.0, 1.0, rng), signed(&[1, 3, 4, 4, 4], 0.2, 0.8, rng)], |t, v| {
        let y = t.warp(v[0], v[1])?;
        project(t, y, 23)
    });
    case!("box_sum3d", [uniform(&[1, 2, 5, 4, 6], -1.0, 1.0, rng)], |t, v| {
        let y = t.box_sum3d(v[0], 3)?;
        project(t, y, 24)
    });
    case!("forward_diff", [uniform(&v5, -1.0, 1.0, rng)], |t, v| {
        let mut acc = Vec::new();
        for axis in Axis3::ALL {
            let d = t.forward_diff(v[0], axis)?;
            acc.push(project(t, d, 25 + axis.spatial_index() as u64)?);
        }
        let s = t.add(acc[0], acc[1])?;
        t.add(s, acc[2])
    });
    case!("mse", [uniform(&[1, 1, 4, 4, 4], 0.0, 1.0, rng), uniform(&[1, 1, 4, 4, 4], 0.0, 1.0, rng)], |t, v| mse_tape(t, v[0], v[1]));
    case!("lncc", [uniform(&[1, 1, 5, 5, 6], 0.0, 1.0, rng), uniform(&[1, 1, 5, 5, 6], 0.0, 1.0, rng)], |t, v| {
        lncc_tape(t, v[0], v[1], 3)
    });
    case!("reg_loss", [uniform(&[1, 3, 4, 3, 5], -1.0, 1.0, rng)], |t, v| reg_loss_tape(t, v[0]));
    cases
}

pub fn ops_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0A);
    op_cases(&mut rng).into_iter().map(|(name, inputs, f)| check(name, &inputs, None, f.as_ref())).collect()
}

pub fn sga_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A);
    let c = 3;
    let dims = [4, 4, 4];
    let spec = GraphSpec::new(2, dims)?;
    let x = || Tensor::uniform([1, c, 4, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0x5B));
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let conv = ConvParams::new(&mut store, "mr", 2 * c, c, 1, ConvOpts::default(), &mut rng);
    out.push(check_block("mrconv_sga", &store, x(), None, &|t, x, p| mrconv_sga(t, x, &spec, &conv, p))?);

    let mut store = ParamStore::new();
    let g = GrapherParams::new(&mut store, "g", c, &mut rng);
    out.push(check_block("grapher", &store, x(), None, &|t, x, p| grapher(t, x, &g, &spec, p))?);

    let mut store = ParamStore::new();
    let f = FfnParams::new(&mut store, "f", c, 4, &mut rng);
    out.push(check_block("ffn", &store, x(), None, &|t, x, p| ffn(t, x, &f, p))?);

    let mut store = ParamStore::new();
    let b = SgaBlockParams::new(&mut store, "b", c, 2, &mut rng);
    let spec1 = GraphSpec::new(1, dims)?;
    out.push(check_block("sga_block", &store, x(), None, &|t, x, p| sga_block(t, x, &spec1, &b, p))?);
    Ok(out)
}

pub fn ssa_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x55A);
    let tokens = || Tensor::uniform([5, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0x55B));
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let s = SsaParams::new(&mut store, "s", 3, 3, &mut rng);
    out.push(check_block("context_scores", &store, tokens(), None, &|t, h, p| context_scores(t, h, &s, p))?);
    out.push(check_block("ssa", &store, tokens(), None, &|t, h, p| ssa(t, h, &s, p))?);

    let mut store = ParamStore::new();
    let m = MhaParams::new(&mut store, "m", 4, 2, &mut rng)?;
    let toks4 = Tensor::uniform([4, 4], -1.0, 1.0, &mut rng);
    out.push(check_block("mha_reference", &store, toks4, None, &|t, h, p| mha_reference(t, h, &m, p))?);

    let mut store = ParamStore::new();
    let d = DcsParams::new(&mut store, "d", 2, &mut rng);
    let x = Tensor::uniform([1, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
    out.push(check_block("dcs", &store, x, None, &|t, x, p| dcs(t, x, &d, p))?);

    let mut store = ParamStore::new();
    let b = SsaFormerParams::new(&mut store, "b", 3, 4, &mut rng);
    let x = Tensor::uniform([1, 3, 2, 3, 2], -1.0, 1.0, &mut rng);
    out.push(check_block("ssaformer_block", &store, x, None, &|t, x, p| ssaformer_block(t, x, &b, p))?);
    Ok(out)
}

/// Small two-stage network at `8³` with a random (non-zero) flow head so
/// the warp receives non-trivial displacements.
pub fn gradcheck_model(seed: u64) -> Result<(RegistrationModel, TrainPair)> {
    let cfg = NetworkConfig {
        stages: 2,
        channels: vec![3, 4],
        stride_k: vec![2, 1],
        bottleneck_d: 4,
        ffn_expansion: 2,
        similarity: SimilarityKind::Lncc,
        lncc_window: 3,
        lambda_reg: 1.0,
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RegistrationModel::new(cfg, seed)?;
    model.randomize_flow_head(0.15, &mut rng);
    let dims = [8, 8, 8];
    let moving = Volume::from_fn(dims, |_| rng.random_range(0.0..1.0));
    let fixed = Volume::from_fn(dims, |_| rng.random_range(0.0..1.0));
    Ok((model, TrainPair { moving, fixed }))
}

/// Number of network parameters spot-checked in the network suite.
pub const NETWORK_SPOT_CHECKS: usize = 60;

pub fn network_suite() -> Result<Vec<GradCheckReport>> {
    let (model, pair) = gradcheck_model(0xBEEF)?;
    let n = model.params().len();
    let inputs = model.params().values().to_vec();
    debug_assert_eq!(inputs.len(), n);
    let report = check("network (8^3, lncc + reg)", &inputs, Some((NETWORK_SPOT_CHECKS, 7)), &|tape, vars| {
        let bound = Bound::from_vars(model.params(), vars.to_vec());
        let (_, _, total) = loss_tape(&model, tape, &bound, &pair)?;
        Ok(total)
    })?;
    Ok(vec![report])
}

pub fn run_all() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(s.run()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // At the kink the one-sided subgradient disagrees with the central difference.
        let x = Tensor::new([1], vec![0.0]).unwrap();
        let r = check("relu at 0", &[x], None, &|t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check("x^2", &[x], None, &|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn every_op_passes() {
        for r in ops_suite().unwrap() {
            assert!(r.passed(), "{}", r.summary());
        }
    }

    #[test]
    fn block_suites_pass() {
        for r in sga_suite().unwrap().into_iter().chain(ssa_suite().unwrap()) {
            assert!(r.passed(), "{}", r.summary());
        }
    }

    #[test]
    fn network_suite_passes() {
        let r = &network_suite().unwrap()[0];
        assert_eq!(r.checked, NETWORK_SPOT_CHECKS);
        assert!(r.passed(), "{}", r.summary());
    }

    #[test]
    fn suites_parse() {
        assert_eq!(Suite::parse_list("all").unwrap().len(), 4);
        assert_eq!(Suite::parse_list("sga").unwrap(), vec![Suite::Sga]);
        assert!(Suite::parse_list("nope").is_err());
    }
}
