use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgareg_core::losses::lncc;
use sgareg_core::metrics::dice_label;
use sgareg_core::params::ConvParams;
use sgareg_core::sga::{max_relative, sga_oracle};
use sgareg_core::ssaformer::{context_scores, ssa, SsaParams};
use sgareg_core::{ConvOpts, GraphSpec, LabelMap, ParamStore, Tape, Tensor, Volume};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ssa_rows(h: &Tensor, seed: u64) -> Tensor {
    let mut store = ParamStore::new();
    let s = SsaParams::new(&mut store, "ssa", h.shape()[1], 2, &mut rng(seed));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let hv = tape.constant(h.clone());
    let y = ssa(&mut tape, hv, &s, &p).unwrap();
    tape.value(y).clone()
}

#[test]
fn linear_and_conv_parameter_counts() {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    ConvParams::new(&mut store, "linear", 8, 4, 1, ConvOpts::default(), &mut r);
    assert_eq!(store.scalar_count(), 36);
    let mut store2 = ParamStore::new();
    ConvParams::new(&mut store2, "conv", 2, 4, 3, ConvOpts::same3(), &mut r);
    assert_eq!(store2.scalar_count(), 220);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn roll_features_match_adjacency(k in 1usize..5, d in 1usize..7, h in 1usize..7, w in 1usize..7, seed: u64) {
        let spec = GraphSpec::new(k, [d, h, w]).unwrap();
        let x = Tensor::uniform([1, 2, d, h, w], -1.0, 1.0, &mut rng(seed));
        let expected = sga_oracle(&x, &spec).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let got = max_relative(&mut tape, xv, &spec).unwrap();
        prop_assert_eq!(tape.value(got), &expected);
    }

    #[test]
    fn context_scores_form_a_distribution(k in 1usize..12, d in 1usize..6, seed: u64) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let s = SsaParams::new(&mut store, "ssa", d, d, &mut r);
        let h = Tensor::uniform([k, d], -5.0, 5.0, &mut r);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let hv = tape.constant(h);
        let cs = context_scores(&mut tape, hv, &s, &p).unwrap();
        let v = tape.value(cs).data();
        prop_assert!(v.iter().all(|&c| c > 0.0 && c <= 1.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssa_is_permutation_equivariant(k in 2usize..8, d in 1usize..5, seed: u64, rot in 1usize..7) {
        let h = Tensor::uniform([k, d], -1.0, 1.0, &mut rng(seed));
        let shift = rot % k;
        let permuted = Tensor::from_fn([k, d], |i| h.at(&[(i[0] + shift) % k, i[1]]));
        let a = ssa_rows(&h, 11);
        let b = ssa_rows(&permuted, 11);
        for i in 0..k {
            for j in 0..2 {
                prop_assert!((b.at(&[i, j]) - a.at(&[(i + shift) % k, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_is_symmetric(a in proptest::collection::vec(0u16..4, 64), b in proptest::collection::vec(0u16..4, 64)) {
        let la = LabelMap::new([4, 4, 4], a).unwrap();
        let lb = LabelMap::new([4, 4, 4], b).unwrap();
        for label in 0..4 {
            prop_assert_eq!(dice_label(&la, &lb, label).unwrap(), dice_label(&lb, &la, label).unwrap());
        }
    }

    #[test]
    fn lncc_ignores_positive_affine_rescaling(seed: u64, scale in 0.5f64..4.0, offset in -3.0f64..3.0) {
        let mut r = rng(seed);
        let f = Volume::new([6, 6, 6], Tensor::uniform([216], 0.0, 1.0, &mut r).into_data()).unwrap();
        let w = Volume::new([6, 6, 6], Tensor::uniform([216], 0.0, 1.0, &mut r).into_data()).unwrap();
        let aw = Volume::new([6, 6, 6], w.data().iter().map(|v| scale * v + offset).collect()).unwrap();
        let base = lncc(&f, &w, 3).unwrap();
        prop_assert!((lncc(&f, &aw, 3).unwrap() - base).abs() < 1e-9);
    }
}
