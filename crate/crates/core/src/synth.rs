//! Seeded synthetic phantoms and smooth deformations.
//!
//! A phantom is background plus `num_labels` overlapping ellipsoids, each
//! with its own intensity level; the piecewise-constant image is blurred so
//! structure edges are soft. A training pair warps a phantom by a smooth
//! random field, so `fixed(p) = moving(p + u(p))` and the field itself is a
//! known solution.

use crate::error::{config_err, Result};
use crate::metrics::mean_dice;
use crate::network::{label_transform, spatial_transform};
use crate::volume::{linear_index, voxels, DeformationField, LabelMap, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DEFAULT_NUM_LABELS: usize = 6;
/// Minimum share of voxels every class (background included) must cover.
pub const MIN_LABEL_FRACTION: f64 = 0.01;
const EDGE_BLUR: f64 = 1.0;
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelMap,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField {
    pub field: DeformationField,
    pub amplitude: f64,
    pub smoothness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Replicate,
    Periodic,
}

/// Separable Gaussian blur of one `[D, H, W]` plane.
pub fn gaussian_blur(plane: &mut [f64], dims: [usize; 3], sigma: f64, boundary: Boundary) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let mut tmp = vec![0.0; plane.len()];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let p = [d, h, w];
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let mut q = p;
                        let i = p[axis] as isize + k as isize - radius;
                        q[axis] = match boundary {
                            Boundary::Replicate => i.clamp(0, len - 1),
                            Boundary::Periodic => i.rem_euclid(len),
                        } as usize;
                        acc += kv * plane[linear_index(dims, q)];
                    }
                    tmp[linear_index(dims, p)] = acc;
                }
            }
        }
        plane.copy_from_slice(&tmp);
    }
}

fn paint_labels<R: Rng + ?Sized>(dims: [usize; 3], num_labels: usize, rng: &mut R) -> Vec<u16> {
    let mut labels = vec![0u16; voxels(dims)];
    for l in 1..=num_labels {
        let centre: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.25..0.75) * dims[a] as f64);
        let radius: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.12..0.28) * dims[a] as f64);
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let p = [d, h, w];
                    let r2: f64 = (0..3).map(|a| ((p[a] as f64 - centre[a]) / radius[a]).powi(2)).sum();
                    if r2 <= 1.0 {
                        labels[linear_index(dims, p)] = l as u16;
                    }
                }
            }
        }
    }
    labels
}

fn coverage_ok(labels: &[u16], num_labels: usize) -> bool {
    let mut counts = vec![0usize; num_labels + 1];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let min = (MIN_LABEL_FRACTION * labels.len() as f64).ceil() as usize;
    counts.iter().all(|&c| c >= min)
}

/// Background (label 0) plus `num_labels` soft-edged ellipsoid structures.
/// Placements are redrawn until every class covers at least 1% of voxels.
pub fn make_phantom(seed: u64, dims: [usize; 3], num_labels: usize) -> Result<Phantom> {
    if num_labels == 0 || num_labels >= u16::MAX as usize {
        return config_err(format!("num_labels must be in 1..{}, got {num_labels}", u16::MAX));
    }
    if (num_labels + 1) as f64 * MIN_LABEL_FRACTION > 1.0 {
        return config_err(format!("{num_labels} labels cannot each cover 1% of the volume"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let labels = paint_labels(dims, num_labels, &mut rng);
        if !coverage_ok(&labels, num_labels) {
            continue;
        }
        // Evenly spaced intensity levels in a random order; background stays dark.
        let mut levels: Vec<f64> = (1..=num_labels).map(|i| 0.2 + 0.8 * i as f64 / num_labels as f64).collect();
        levels.shuffle(&mut rng);
        let mut intensity: Vec<f64> =
            labels.iter().map(|&l| if l == 0 { 0.0 } else { levels[l as usize - 1] }).collect();
        gaussian_blur(&mut intensity, dims, EDGE_BLUR, Boundary::Replicate);
        intensity.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        return Ok(Phantom { volume: Volume::new(dims, intensity)?, labels: LabelMap::new(dims, labels)?, seed });
    }
    config_err(format!("could not place {num_labels} labels covering 1% each in {dims:?}"))
}

/// White noise per component, blurred with standard deviation `smoothness`
/// (periodic boundaries, so no face is favoured),
/// then rescaled so the largest displacement norm equals `amplitude`.
pub fn random_smooth_field(seed: u64, dims: [usize; 3], amplitude: f64, smoothness: f64) -> Result<SmoothField> {
    if !(amplitude >= 0.0 && amplitude.is_finite() && smoothness >= 0.0 && smoothness.is_finite()) {
        return config_err(format!("invalid amplitude {amplitude} or smoothness {smoothness}"));
    }
    let n = voxels(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
    for c in 0..3 {
        gaussian_blur(&mut data[c * n..(c + 1) * n], dims, smoothness, Boundary::Periodic);
    }
    let field = DeformationField::new(dims, data)?;
    let peak = field.max_norm();
    let s = if amplitude == 0.0 || peak == 0.0 { 0.0 } else { amplitude / peak };
    let scaled: Vec<f64> = field.data().iter().map(|v| v * s).collect();
    Ok(SmoothField { field: DeformationField::new(dims, scaled)?, amplitude, smoothness })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOptions {
    pub num_labels: usize,
    pub amplitude: f64,
    pub smoothness: f64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self { num_labels: DEFAULT_NUM_LABELS, amplitude: 5.0, smoothness: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub moving: Phantom,
    pub fixed: Phantom,
    /// Ground truth: `fixed(p) = moving(p + u(p))`.
    pub field: SmoothField,
    /// Mean foreground Dice between the unregistered label maps.
    pub baseline_dice: f64,
}

pub fn make_pair(seed: u64, dims: [usize; 3]) -> Result<SyntheticPair> {
    make_pair_with(seed, dims, PairOptions::default())
}

pub fn make_pair_with(seed: u64, dims: [usize; 3], opts: PairOptions) -> Result<SyntheticPair> {
    let moving = make_phantom(seed, dims, opts.num_labels)?;
    let field = random_smooth_field(seed ^ 0x5EED_F1E1_D000_0000, dims, opts.amplitude, opts.smoothness)?;
    let fixed = Phantom {
        volume: spatial_transform(&moving.volume, &field.field)?,
        labels: label_transform(&moving.labels, &field.field)?,
        seed,
    };
    let baseline_dice = mean_dice(&fixed.labels, &moving.labels)?;
    Ok(SyntheticPair { moving, fixed, field, baseline_dice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::njd_percent;

    #[test]
    fn phantoms_are_deterministic_and_cover_all_labels() {
        let a = make_phantom(7, [24, 20, 16], 6).unwrap();
        assert_eq!(a, make_phantom(7, [24, 20, 16], 6).unwrap());
        assert_ne!(a, make_phantom(8, [24, 20, 16], 6).unwrap());
        assert_eq!(a.labels.labels(), (0..=6).collect::<Vec<u16>>());
        assert!(coverage_ok(a.labels.data(), 6));
        assert!(a.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_structure_phantom() {
        let p = make_phantom(3, [16, 16, 16], 1).unwrap();
        assert_eq!(p.labels.labels(), vec![0, 1]);
    }

    #[test]
    fn blur_preserves_constants() {
        for b in [Boundary::Replicate, Boundary::Periodic] {
            let mut plane = vec![0.3; 60];
            gaussian_blur(&mut plane, [3, 4, 5], 2.0, b);
            assert!(plane.iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn field_amplitude_is_exact() {
        assert!(random_smooth_field(1, [8, 8, 8], 0.0, 2.0).unwrap().field.data().iter().all(|&v| v == 0.0));
        let f = random_smooth_field(2, [12, 10, 8], 2.5, 2.0).unwrap();
        assert!((f.field.max_norm() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn moderate_fields_do_not_fold() {
        for seed in 0..3 {
            let f = random_smooth_field(seed, [32, 32, 32], 2.0, 4.0).unwrap();
            assert_eq!(njd_percent(&f.field), 0.0);
        }
    }

    #[test]
    fn ground_truth_round_trip() {
        let pair = make_pair(5, [16, 16, 16]).unwrap();
        let warped = label_transform(&pair.moving.labels, &pair.field.field).unwrap();
        assert!(mean_dice(&warped, &pair.fixed.labels).unwrap() >= 0.98);
        assert!(pair.baseline_dice < 1.0);
    }
}
