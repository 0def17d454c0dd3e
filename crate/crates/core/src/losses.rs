//! Similarity and smoothness losses.
//!
//! Each loss has a tape form (used for training and gradient checks) and a
//! plain form over [`Volume`]s and [`DeformationField`]s. Volumes on the
//! tape are `[1, 1, D, H, W]`, fields `[1, 3, D, H, W]`.

use crate::autodiff::{Axis3, Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::network::spatial_transform;
use crate::volume::{DeformationField, Volume};

/// Variance floor applied to windowed sums before the LNCC division.
pub const LNCC_EPS: f64 = 1e-5;
pub const DEFAULT_LNCC_WINDOW: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SimilarityKind {
    Mse,
    #[default]
    Lncc,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Mse => "mse",
            SimilarityKind::Lncc => "lncc",
        }
    }
}

impl std::str::FromStr for SimilarityKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(SimilarityKind::Mse),
            "lncc" => Ok(SimilarityKind::Lncc),
            other => config_err(format!("unknown similarity {other:?} (expected mse or lncc)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(sim: f64, reg: f64, lambda: f64) -> Self {
        Self { sim, reg, total: sim + lambda * reg, lambda }
    }
}

pub fn check_window(window: usize, dims: [usize; 3]) -> Result<()> {
    if window % 2 == 0 {
        return config_err(format!("LNCC window must be odd, got {window}"));
    }
    if window > *dims.iter().min().unwrap() {
        return config_err(format!("LNCC window {window} exceeds volume extent {dims:?}"));
    }
    Ok(())
}

pub fn mse_tape(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let d = tape.sub(f, w)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Mean windowed Pearson correlation over all windows fully inside the volume.
pub fn lncc_tape(tape: &mut Tape, f: Var, w: Var, window: usize) -> Result<Var> {
    let dims = tape.value(f).spatial_dims()?;
    if tape.shape(f) != tape.shape(w) {
        return shape_err(format!("LNCC inputs {:?} and {:?}", tape.shape(f), tape.shape(w)));
    }
    check_window(window, dims)?;
    let n = window.pow(3) as f64;
    let ff = tape.mul(f, f)?;
    let ww = tape.mul(w, w)?;
    let fw = tape.mul(f, w)?;
    let sf = tape.box_sum3d(f, window)?;
    let sw = tape.box_sum3d(w, window)?;
    let sff = tape.box_sum3d(ff, window)?;
    let sww = tape.box_sum3d(ww, window)?;
    let sfw = tape.box_sum3d(fw, window)?;

    let sf_sw = tape.mul(sf, sw)?;
    let sf_sw = tape.scale(sf_sw, 1.0 / n);
    let cross = tape.sub(sfw, sf_sw)?;
    let sf2 = tape.mul(sf, sf)?;
    let sf2 = tape.scale(sf2, 1.0 / n);
    let var_f = tape.sub(sff, sf2)?;
    let sw2 = tape.mul(sw, sw)?;
    let sw2 = tape.scale(sw2, 1.0 / n);
    let var_w = tape.sub(sww, sw2)?;

    let var_f = tape.clamp_min(var_f, LNCC_EPS);
    let var_w = tape.clamp_min(var_w, LNCC_EPS);
    let denom = tape.mul(var_f, var_w)?;
    let denom = tape.sqrt(denom);
    let cc = tape.div(cross, denom)?;
    Ok(tape.mean(cc))
}

pub fn sim_loss_tape(tape: &mut Tape, f: Var, w: Var, kind: SimilarityKind, window: usize) -> Result<Var> {
    match kind {
        SimilarityKind::Mse => mse_tape(tape, f, w),
        SimilarityKind::Lncc => {
            let cc = lncc_tape(tape, f, w, window)?;
            let neg = tape.scale(cc, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
    }
}

/// Squared forward differences of every component along every axis,
/// summed and divided by the voxel count.
pub fn reg_loss_tape(tape: &mut Tape, u: Var) -> Result<Var> {
    let dims = tape.value(u).spatial_dims()?;
    let voxels = (dims[0] * dims[1] * dims[2]) as f64;
    let mut total: Option<Var> = None;
    for axis in Axis3::ALL {
        if dims[axis.spatial_index()] < 2 {
            continue;
        }
        let d = tape.forward_diff(u, axis)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(crate::Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, 1.0 / voxels))
}

/// Returns `(sim, reg, total)` handles.
pub fn total_loss_tape(
    tape: &mut Tape,
    fixed: Var,
    warped: Var,
    u: Var,
    lambda: f64,
    kind: SimilarityKind,
    window: usize,
) -> Result<(Var, Var, Var)> {
    let sim = sim_loss_tape(tape, fixed, warped, kind, window)?;
    let reg = reg_loss_tape(tape, u)?;
    let weighted = tape.scale(reg, lambda);
    let total = tape.add(sim, weighted)?;
    Ok((sim, reg, total))
}

fn volume_pair(tape: &mut Tape, f: &Volume, w: &Volume) -> Result<(Var, Var)> {
    if f.dims() != w.dims() {
        return shape_err(format!("volume dims {:?} and {:?} differ", f.dims(), w.dims()));
    }
    Ok((tape.constant(f.to_tensor()), tape.constant(w.to_tensor())))
}

pub fn mse(f: &Volume, w: &Volume) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = volume_pair(&mut tape, f, w)?;
    let l = mse_tape(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn lncc(f: &Volume, w: &Volume, window: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = volume_pair(&mut tape, f, w)?;
    let l = lncc_tape(&mut tape, a, b, window)?;
    Ok(tape.value(l).item())
}

pub fn sim_loss(f: &Volume, w: &Volume, kind: SimilarityKind, window: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = volume_pair(&mut tape, f, w)?;
    let l = sim_loss_tape(&mut tape, a, b, kind, window)?;
    Ok(tape.value(l).item())
}

pub fn reg_loss(field: &DeformationField) -> f64 {
    let mut tape = Tape::new();
    let u = tape.constant(field.to_tensor());
    let l = reg_loss_tape(&mut tape, u).expect("field tensors are 5-D");
    tape.value(l).item()
}

/// Similarity between `fixed` and `moving` warped by `field`, plus the
/// weighted smoothness penalty.
pub fn total_loss(
    fixed: &Volume,
    moving: &Volume,
    field: &DeformationField,
    lambda: f64,
    kind: SimilarityKind,
    window: usize,
) -> Result<LossBreakdown> {
    let warped = spatial_transform(moving, field)?;
    let sim = sim_loss(fixed, &warped, kind, window)?;
    Ok(LossBreakdown::new(sim, reg_loss(field), lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_| rng.random_range(0.0..1.0))
    }

    fn lncc_oracle(f: &Volume, w: &Volume, n: usize) -> f64 {
        let [d, h, wd] = f.dims();
        let (mut acc, mut count) = (0.0, 0usize);
        for z in 0..=d - n {
            for y in 0..=h - n {
                for x in 0..=wd - n {
                    let mut pairs = Vec::new();
                    for a in 0..n {
                        for b in 0..n {
                            for c in 0..n {
                                let p = [z + a, y + b, x + c];
                                pairs.push((f.at(p), w.at(p)));
                            }
                        }
                    }
                    let k = pairs.len() as f64;
                    let mf = pairs.iter().map(|p| p.0).sum::<f64>() / k;
                    let mw = pairs.iter().map(|p| p.1).sum::<f64>() / k;
                    let cross: f64 = pairs.iter().map(|p| (p.0 - mf) * (p.1 - mw)).sum();
                    let vf: f64 = pairs.iter().map(|p| (p.0 - mf).powi(2)).sum();
                    let vw: f64 = pairs.iter().map(|p| (p.1 - mw).powi(2)).sum();
                    acc += cross / (vf.max(LNCC_EPS) * vw.max(LNCC_EPS)).sqrt();
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn mse_examples() {
        let f = random_volume([4, 4, 4], 1);
        assert_eq!(mse(&f, &f).unwrap(), 0.0);
        assert_eq!(mse(&Volume::zeros([3, 2, 2]), &Volume::from_fn([3, 2, 2], |_| 1.0)).unwrap(), 1.0);
        let w = random_volume([4, 4, 4], 2);
        let oracle = f.data().iter().zip(w.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0;
        assert!((mse(&f, &w).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn lncc_correlation_identities() {
        let f = random_volume([6, 7, 5], 3);
        let affine = Volume::from_fn(f.dims(), |p| 2.0 * f.at(p) + 3.0);
        let neg = Volume::from_fn(f.dims(), |p| -f.at(p));
        assert!((lncc(&f, &f, 3).unwrap() - 1.0).abs() < 1e-9);
        assert!((lncc(&f, &affine, 3).unwrap() - 1.0).abs() < 1e-9);
        assert!((lncc(&f, &neg, 3).unwrap() + 1.0).abs() < 1e-9);
        assert!(sim_loss(&f, &f, SimilarityKind::Lncc, 3).unwrap().abs() < 1e-9);
        assert!((sim_loss(&f, &neg, SimilarityKind::Lncc, 5).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(sim_loss(&f, &f, SimilarityKind::Mse, 3).unwrap(), 0.0);
    }

    #[test]
    fn lncc_matches_two_pass_oracle() {
        let f = random_volume([6, 5, 7], 4);
        let w = random_volume([6, 5, 7], 5);
        for n in [1, 3, 5] {
            let got = lncc(&f, &w, n).unwrap();
            assert!((got - lncc_oracle(&f, &w, n)).abs() < 1e-12, "n={n}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn lncc_constant_windows_contribute_zero() {
        let f = Volume::from_fn([5, 5, 5], |_| 0.5);
        let w = random_volume([5, 5, 5], 6);
        assert!(lncc(&f, &w, 3).unwrap().abs() < 1e-10);
    }

    #[test]
    fn lncc_rejects_bad_windows() {
        let f = random_volume([4, 4, 4], 7);
        assert!(matches!(lncc(&f, &f, 2), Err(crate::Error::Config(_))));
        assert!(matches!(lncc(&f, &f, 5), Err(crate::Error::Config(_))));
    }

    #[test]
    fn reg_loss_closed_forms() {
        let dims = [5, 4, 3];
        assert_eq!(reg_loss(&DeformationField::zeros(dims)), 0.0);
        assert_eq!(reg_loss(&DeformationField::from_fn(dims, |_| [0.3, -1.0, 2.0])), 0.0);
        let s = 0.7;
        let ramp = DeformationField::from_fn(dims, |p| [0.0, s * p[1] as f64, 0.0]);
        // (H-1) differences per column, each s², over D·H·W voxels.
        let expected = s * s * 3.0 / 4.0;
        assert!((reg_loss(&ramp) - expected).abs() < 1e-14);
    }

    #[test]
    fn total_composes_terms() {
        let m = random_volume([5, 5, 5], 8);
        let f = random_volume([5, 5, 5], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let field = DeformationField::from_fn([5, 5, 5], |_| [0; 3].map(|_| rng.random_range(-0.5..0.5)));
        let b = total_loss(&f, &m, &field, 0.37, SimilarityKind::Lncc, 3).unwrap();
        assert!((b.total - (b.sim + 0.37 * b.reg)).abs() < 1e-12);
        let warped = spatial_transform(&m, &field).unwrap();
        assert_eq!(b.sim, sim_loss(&f, &warped, SimilarityKind::Lncc, 3).unwrap());
        assert_eq!(b.reg, reg_loss(&field));
    }
}
