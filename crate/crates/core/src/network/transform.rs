use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::volume::{linear_index, DeformationField, LabelMap, Volume};

/// `M(p + u(p))` by trilinear interpolation with border clamping.
pub fn spatial_transform_tape(tape: &mut Tape, moving: Var, u: Var) -> Result<Var> {
    tape.warp(moving, u)
}

pub fn spatial_transform(moving: &Volume, field: &DeformationField) -> Result<Volume> {
    if moving.dims() != field.dims() {
        return shape_err(format!("volume {:?} and field {:?} dims differ", moving.dims(), field.dims()));
    }
    let mut tape = Tape::new();
    let m = tape.constant(moving.to_tensor());
    let u = tape.constant(field.to_tensor());
    let w = spatial_transform_tape(&mut tape, m, u)?;
    Volume::from_tensor(tape.value(w))
}

/// `S(p + u(p))` by nearest-neighbour lookup with border clamping.
pub fn label_transform(labels: &LabelMap, field: &DeformationField) -> Result<LabelMap> {
    let dims = labels.dims();
    if dims != field.dims() {
        return shape_err(format!("labels {:?} and field {:?} dims differ", dims, field.dims()));
    }
    let mut out = Vec::with_capacity(labels.data().len());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [d, h, w];
                let u = field.displacement(p);
                let q: [usize; 3] =
                    std::array::from_fn(|a| (p[a] as f64 + u[a]).round().clamp(0.0, (dims[a] - 1) as f64) as usize);
                out.push(labels.data()[linear_index(dims, q)]);
            }
        }
    }
    LabelMap::new(dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let m = random_volume([5, 4, 6], 1);
        assert_eq!(spatial_transform(&m, &DeformationField::zeros(m.dims())).unwrap(), m);
        let s = LabelMap::new([2, 2, 2], vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(label_transform(&s, &DeformationField::zeros([2, 2, 2])).unwrap(), s);
    }

    #[test]
    fn integer_shift_indexes_directly() {
        let m = random_volume([6, 5, 4], 2);
        let field = DeformationField::from_fn(m.dims(), |_| [-1.0, 0.0, 0.0]);
        let w = spatial_transform(&m, &field).unwrap();
        for d in 1..6 {
            for h in 0..5 {
                for x in 0..4 {
                    assert_eq!(w.at([d, h, x]), m.at([d - 1, h, x]));
                }
            }
        }
        // Border clamp at the first depth slice.
        assert_eq!(w.at([0, 2, 2]), m.at([0, 2, 2]));
    }

    #[test]
    fn half_voxel_shift_on_ramp_is_exact() {
        let slope = 0.75;
        let m = Volume::from_fn([4, 5, 6], |p| 1.0 + slope * p[2] as f64);
        let field = DeformationField::from_fn(m.dims(), |_| [0.0, 0.0, 0.5]);
        let w = spatial_transform(&m, &field).unwrap();
        for d in 0..4 {
            for h in 0..5 {
                for x in 0..5 {
                    assert!((w.at([d, h, x]) - (m.at([d, h, x]) + 0.5 * slope)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn labels_shift_and_stay_in_the_input_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [5, 6, 4];
        let n = dims.iter().product();
        let s = LabelMap::new(dims, (0..n).map(|_| rng.random_range(0..4) * 3).collect()).unwrap();
        let shift = DeformationField::from_fn(dims, |_| [0.0, 2.0, 0.0]);
        let t = label_transform(&s, &shift).unwrap();
        for d in 0..5 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(t.at([d, h, w]), s.at([d, h + 2, w]));
                }
            }
        }
        let noisy = DeformationField::from_fn(dims, |_| [0; 3].map(|_| rng.random_range(-3.0..3.0)));
        let values = s.labels();
        let t = label_transform(&s, &noisy).unwrap();
        assert!(t.labels().iter().all(|l| values.contains(l)));
    }
}
