//! Sparse graph attention.
//!
//! Every voxel is connected to every K-th voxel along its row, column and
//! depth line (circularly). Because the connectivity is the same for every
//! voxel, the max-relative aggregation over the graph reduces to a sequence
//! of circular rolls, subtractions and element-wise maxima on the unreshaped
//! `[N, C, D, H, W]` tensor, followed by a channel-mixing convolution over
//! `concat(X, X_j)`.
//!
//! [`sga_oracle`] computes the same aggregation by explicit iteration over
//! [`sga_neighbors`] and is used to check the roll-based path.

use crate::autodiff::{Axis3, ConvOpts, Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{Bound, ConvParams, NormParams, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Fixed connectivity of the sparse graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphSpec {
    pub stride_k: usize,
    /// `(D, H, W)`.
    pub dims: [usize; 3],
}

impl GraphSpec {
    pub fn new(stride_k: usize, dims: [usize; 3]) -> Result<Self> {
        if stride_k < 1 {
            return config_err("graph stride K must be at least 1");
        }
        Ok(Self { stride_k, dims })
    }

    /// Non-zero shifts `m·K < len` along an axis of length `len`.
    fn shifts(&self, len: usize) -> impl Iterator<Item = usize> {
        let k = self.stride_k;
        (1..).map(move |m| m * k).take_while(move |&s| s < len)
    }
}

/// Neighbours of voxel `p`: `p + m·K` (circular) along each axis for every
/// `m ≥ 0` with `m·K` below the axis length, deduplicated, `p` included.
pub fn sga_neighbors(spec: &GraphSpec, p: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = vec![p];
    for a in 0..3 {
        let len = spec.dims[a];
        for s in spec.shifts(len) {
            let mut q = p;
            q[a] = (p[a] + s) % len;
            if !out.contains(&q) {
                out.push(q);
            }
        }
    }
    out
}

/// Brute-force max-relative features: `X_j(p) = max_{q ∈ N(p)} x(p) - x(q)`
/// per sample and channel, by explicit adjacency iteration.
pub fn sga_oracle(x: &Tensor, spec: &GraphSpec) -> Result<Tensor> {
    let dims = x.spatial_dims()?;
    if dims != spec.dims {
        return shape_err(format!("graph dims {:?} do not match input {dims:?}", spec.dims));
    }
    let [d, h, w] = dims;
    let plane = d * h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let at = |q: [usize; 3]| (q[0] * h + q[1]) * w + q[2];
    for s in 0..src.len() / plane {
        let xs = &src[s * plane..][..plane];
        for pd in 0..d {
            for ph in 0..h {
                for pw in 0..w {
                    let p = [pd, ph, pw];
                    let xp = xs[at(p)];
                    let best = sga_neighbors(spec, p)
                        .into_iter()
                        .map(|q| xp - xs[at(q)])
                        .fold(0.0, f64::max);
                    out[s * plane + at(p)] = best;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Roll-based max-relative features `X_j`, recorded on the tape.
pub fn max_relative(tape: &mut Tape, x: Var, spec: &GraphSpec) -> Result<Var> {
    let dims = tape.value(x).spatial_dims()?;
    if dims != spec.dims {
        return shape_err(format!("graph dims {:?} do not match input {dims:?}", spec.dims));
    }
    if spec.stride_k < 1 {
        return config_err("graph stride K must be at least 1");
    }
    let mut xj = tape.constant(Tensor::zeros(tape.shape(x).to_vec()));
    // Width, height, depth: the roll_x, roll_y, roll_z passes.
    for axis in [Axis3::Width, Axis3::Height, Axis3::Depth] {
        let len = dims[axis.spatial_index()];
        for s in spec.shifts(len) {
            let rolled = tape.roll3d(x, axis, -(s as i64))?;
            let rel = tape.sub(x, rolled)?;
            xj = tape.elem_max(rel, xj)?;
        }
    }
    Ok(xj)
}

/// MRConv: `Conv3d(Concat(X, X_j))` with the roll-based `X_j`.
pub fn mrconv_sga(tape: &mut Tape, x: Var, spec: &GraphSpec, conv: &ConvParams, p: &Bound) -> Result<Var> {
    let xj = max_relative(tape, x, spec)?;
    let cat = tape.concat(&[x, xj], 1)?;
    conv.apply(tape, p, cat)
}

/// Weights of the graph block `Y = σ(MRConv(X·W_in))·W_out + X`, with a norm
/// after each channel-mixing layer.
#[derive(Clone, Copy, Debug)]
pub struct GrapherParams {
    pub channels: usize,
    pub fc_in: ConvParams,
    pub norm_in: NormParams,
    pub mr_conv: ConvParams,
    pub norm_mr: NormParams,
    pub fc_out: ConvParams,
    pub norm_out: NormParams,
}

impl GrapherParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let pw = ConvOpts::default();
        Self {
            channels,
            fc_in: ConvParams::new(store, &format!("{prefix}.fc_in"), c, c, 1, pw, rng),
            norm_in: NormParams::new(store, &format!("{prefix}.norm_in"), c),
            mr_conv: ConvParams::new(store, &format!("{prefix}.mr_conv"), 2 * c, c, 1, pw, rng),
            norm_mr: NormParams::new(store, &format!("{prefix}.norm_mr"), c),
            fc_out: ConvParams::new(store, &format!("{prefix}.fc_out"), c, c, 1, pw, rng),
            norm_out: NormParams::new(store, &format!("{prefix}.norm_out"), c),
        }
    }
}

pub fn grapher(tape: &mut Tape, x: Var, g: &GrapherParams, spec: &GraphSpec, p: &Bound) -> Result<Var> {
    check_channels(tape, x, g.channels)?;
    let a = g.fc_in.apply(tape, p, x)?;
    let a = g.norm_in.apply(tape, p, a)?;
    let b = mrconv_sga(tape, a, spec, &g.mr_conv, p)?;
    let b = g.norm_mr.apply(tape, p, b)?;
    let b = tape.gelu(b);
    let y = g.fc_out.apply(tape, p, b)?;
    let y = g.norm_out.apply(tape, p, y)?;
    tape.add(y, x)
}

/// Weights of the two-layer channel MLP `Z = σ(Y·W_1)·W_2 + Y`.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: ConvParams,
    pub norm1: NormParams,
    pub fc2: ConvParams,
    pub norm2: NormParams,
}

pub const DEFAULT_FFN_EXPANSION: usize = 4;

impl FfnParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, expansion: usize, rng: &mut R) -> Self {
        let hidden = expansion * channels;
        let pw = ConvOpts::default();
        Self {
            channels,
            hidden,
            fc1: ConvParams::new(store, &format!("{prefix}.fc1"), channels, hidden, 1, pw, rng),
            norm1: NormParams::new(store, &format!("{prefix}.norm1"), hidden),
            fc2: ConvParams::new(store, &format!("{prefix}.fc2"), hidden, channels, 1, pw, rng),
            norm2: NormParams::new(store, &format!("{prefix}.norm2"), channels),
        }
    }
}

pub fn ffn(tape: &mut Tape, x: Var, f: &FfnParams, p: &Bound) -> Result<Var> {
    check_channels(tape, x, f.channels)?;
    let h = f.fc1.apply(tape, p, x)?;
    let h = f.norm1.apply(tape, p, h)?;
    let h = tape.gelu(h);
    let z = f.fc2.apply(tape, p, h)?;
    let z = f.norm2.apply(tape, p, z)?;
    tape.add(z, x)
}

/// Grapher followed by FFN.
#[derive(Clone, Copy, Debug)]
pub struct SgaBlockParams {
    pub grapher: GrapherParams,
    pub ffn: FfnParams,
}

impl SgaBlockParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, expansion: usize, rng: &mut R) -> Self {
        Self {
            grapher: GrapherParams::new(store, &format!("{prefix}.grapher"), channels, rng),
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), channels, expansion, rng),
        }
    }

    /// Zeroes both residual branches so the block starts as the identity.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.grapher.fc_out.zero(store);
        self.ffn.fc2.zero(store);
    }
}

pub fn sga_block(tape: &mut Tape, x: Var, spec: &GraphSpec, b: &SgaBlockParams, p: &Bound) -> Result<Var> {
    let y = grapher(tape, x, &b.grapher, spec, p)?;
    ffn(tape, y, &b.ffn, p)
}

fn check_channels(tape: &Tape, x: Var, expected: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 5 || shape[1] != expected {
        return shape_err(format!("block expects [N, {expected}, D, H, W], got {shape:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sorted(mut v: Vec<[usize; 3]>) -> Vec<[usize; 3]> {
        v.sort();
        v
    }

    #[test]
    fn stride_beyond_extent_leaves_only_self() {
        let spec = GraphSpec::new(4, [4, 4, 4]).unwrap();
        assert_eq!(sga_neighbors(&spec, [1, 2, 3]), vec![[1, 2, 3]]);
    }

    #[test]
    fn every_second_voxel_along_a_row() {
        let spec = GraphSpec::new(2, [1, 1, 9]).unwrap();
        let got: Vec<usize> = sorted(sga_neighbors(&spec, [0, 0, 0])).iter().map(|q| q[2]).collect();
        assert_eq!(got, vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn unit_stride_gives_full_cross() {
        let spec = GraphSpec::new(1, [3, 3, 3]).unwrap();
        let p = [1, 0, 2];
        // Enumerate by definition: all voxels sharing two coordinates with p.
        let mut expected = Vec::new();
        for d in 0..3 {
            for h in 0..3 {
                for w in 0..3 {
                    let q = [d, h, w];
                    let same = (0..3).filter(|&a| q[a] == p[a]).count();
                    if same >= 2 {
                        expected.push(q);
                    }
                }
            }
        }
        assert_eq!(expected.len(), 7);
        assert_eq!(sorted(sga_neighbors(&spec, p)), sorted(expected));
    }

    #[test]
    fn zero_stride_is_a_config_error() {
        assert!(GraphSpec::new(0, [4, 4, 4]).is_err());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4, 4]));
        let bad = GraphSpec { stride_k: 0, dims: [4, 4, 4] };
        assert!(matches!(max_relative(&mut tape, x, &bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn constant_input_has_zero_relative_features() {
        let spec = GraphSpec::new(1, [4, 4, 4]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 4, 4, 4], 0.7));
        let xj = max_relative(&mut tape, x, &spec).unwrap();
        assert!(tape.value(xj).data().iter().all(|&v| v == 0.0));
        let oracle = sga_oracle(tape.value(x), &spec).unwrap();
        assert!(oracle.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_stride_gives_concat_with_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = GraphSpec::new(8, [4, 4, 4]).unwrap();
        let mut store = ParamStore::new();
        let conv = ConvParams::new(&mut store, "mr", 4, 2, 1, ConvOpts::default(), &mut rng);
        let xt = Tensor::uniform([1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(xt.clone());
        let xj = max_relative(&mut tape, x, &spec).unwrap();
        assert!(tape.value(xj).data().iter().all(|&v| v == 0.0));
        let out = mrconv_sga(&mut tape, x, &spec, &conv, &p).unwrap();
        let zeros = tape.constant(Tensor::zeros([1, 2, 4, 4, 4]));
        let cat = tape.concat(&[x, zeros], 1).unwrap();
        let direct = conv.apply(&mut tape, &p, cat).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));
    }

    #[test]
    fn hot_voxel_oracle() {
        let spec = GraphSpec::new(2, [4, 4, 4]).unwrap();
        let mut x = Tensor::zeros([1, 1, 4, 4, 4]);
        let hot = [1, 2, 3];
        let idx = (hot[0] * 4 + hot[1]) * 4 + hot[2];
        x.data_mut()[idx] = 1.0;
        let xj = sga_oracle(&x, &spec).unwrap();
        assert_eq!(xj.data()[idx], 1.0);
        let lone = GraphSpec::new(4, [4, 4, 4]).unwrap();
        assert_eq!(sga_oracle(&x, &lone).unwrap().data()[idx], 0.0);
    }

    #[test]
    fn roll_path_matches_oracle_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = GraphSpec::new(2, [6, 6, 6]).unwrap();
        let xt = Tensor::uniform([1, 2, 6, 6, 6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let xj = max_relative(&mut tape, x, &spec).unwrap();
        assert_eq!(tape.value(xj), &sga_oracle(&xt, &spec).unwrap());
    }

    #[test]
    fn relative_features_are_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = GraphSpec::new(2, [6, 4, 5]).unwrap();
        let xt = Tensor::uniform([1, 1, 6, 4, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xt);
        let shifted = tape.roll3d(x, Axis3::Depth, 2).unwrap();
        let shifted = tape.roll3d(shifted, Axis3::Width, -1).unwrap();
        let xj_of_shift = max_relative(&mut tape, shifted, &spec).unwrap();
        let xj = max_relative(&mut tape, x, &spec).unwrap();
        let shift_of_xj = tape.roll3d(xj, Axis3::Depth, 2).unwrap();
        let shift_of_xj = tape.roll3d(shift_of_xj, Axis3::Width, -1).unwrap();
        assert_eq!(tape.value(xj_of_shift), tape.value(shift_of_xj));
    }

    #[test]
    fn zero_residual_branches_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let block = SgaBlockParams::new(&mut store, "b", 3, 4, &mut rng);
        block.zero_residual_branches(&mut store);
        let spec = GraphSpec::new(2, [4, 4, 4]).unwrap();
        let xt = Tensor::uniform([1, 3, 4, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(xt.clone());
        let y = sga_block(&mut tape, x, &spec, &block, &p).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn blocks_preserve_shape_and_check_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let g = GrapherParams::new(&mut store, "g", 2, &mut rng);
        let f = FfnParams::new(&mut store, "f", 2, 4, &mut rng);
        assert_eq!(f.hidden, 8);
        let spec = GraphSpec::new(1, [4, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::uniform([1, 2, 4, 2, 3], -1.0, 1.0, &mut rng));
        let y = grapher(&mut tape, x, &g, &spec, &p).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4, 2, 3]);
        let z = ffn(&mut tape, y, &f, &p).unwrap();
        assert_eq!(tape.shape(z), &[1, 2, 4, 2, 3]);
        let wrong = tape.constant(Tensor::zeros([1, 3, 4, 2, 3]));
        assert!(grapher(&mut tape, wrong, &g, &spec, &p).is_err());
    }
}
