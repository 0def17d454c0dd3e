//! Separable self-attention bottleneck.
//!
//! Tokens `H ∈ R^{k×d}` are scored against a single learned latent
//! projection `w_i`, so attention costs `O(k·d)` instead of the `O(k²·d)`
//! of a full score matrix:
//!
//! ```text
//! c_s = softmax(H·w_i / √d)                  (over the token axis)
//! c_v = Σ_i c_s[i] · (H_i·W_K)
//! y_i = (c_v ⊙ ReLU(H_i·W_V)) · W_O
//! ```
//!
//! Linear maps act on row vectors (`x·W`). [`mha_reference`] is standard
//! scaled dot-product multi-head attention for timing comparisons.

use crate::autodiff::{ConvOpts, Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{Bound, ConvParams, NormParams, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Clone, Copy, Debug)]
pub struct SsaParams {
    pub dim: usize,
    pub dim_out: usize,
    /// `[d, 1]`: one latent score per token.
    pub w_i: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `[d, d_out]`.
    pub w_o: ParamId,
}

impl SsaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, dim_out: usize, rng: &mut R) -> Self {
        Self {
            dim,
            dim_out,
            w_i: store.dense_weight(format!("{prefix}.w_i"), dim, 1, rng),
            w_k: store.dense_weight(format!("{prefix}.w_k"), dim, dim, rng),
            w_v: store.dense_weight(format!("{prefix}.w_v"), dim, dim, rng),
            w_o: store.dense_weight(format!("{prefix}.w_o"), dim, dim_out, rng),
        }
    }
}

fn check_tokens(tape: &Tape, h: Var, d: usize) -> Result<usize> {
    match tape.shape(h) {
        [k, dd] if *dd == d && *k >= 1 => Ok(*k),
        s => shape_err(format!("expected [k >= 1, {d}] tokens, got {s:?}")),
    }
}

/// Context scores `softmax(H·w_i / √d)` as a `[k, 1]` column.
pub fn context_scores(tape: &mut Tape, h: Var, s: &SsaParams, p: &Bound) -> Result<Var> {
    check_tokens(tape, h, s.dim)?;
    let latent = tape.matmul(h, p[s.w_i])?;
    let scaled = tape.scale(latent, 1.0 / (s.dim as f64).sqrt());
    tape.softmax(scaled, 0)
}

/// Context vector `Σ_i c_s[i]·(H_i·W_K)` as a `[1, d]` row.
pub fn context_vector(tape: &mut Tape, h: Var, cs: Var, s: &SsaParams, p: &Bound) -> Result<Var> {
    let k = check_tokens(tape, h, s.dim)?;
    if tape.shape(cs) != [k, 1] {
        return shape_err(format!("context scores {:?} for {k} tokens", tape.shape(cs)));
    }
    let keys = tape.matmul(h, p[s.w_k])?;
    let weighted = tape.mul(keys, cs)?;
    tape.sum_axis(weighted, 0)
}

/// Separable self-attention over `[k, d]` tokens, producing `[k, d_out]`.
pub fn ssa(tape: &mut Tape, h: Var, s: &SsaParams, p: &Bound) -> Result<Var> {
    let cs = context_scores(tape, h, s, p)?;
    let cv = context_vector(tape, h, cs, s, p)?;
    let values = tape.matmul(h, p[s.w_v])?;
    let values = tape.relu(values);
    let propagated = tape.mul(values, cv)?;
    tape.matmul(propagated, p[s.w_o])
}

#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub dim: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MhaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config_err(format!("embedding dim {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            dim,
            heads,
            w_q: store.dense_weight(format!("{prefix}.w_q"), dim, dim, rng),
            w_k: store.dense_weight(format!("{prefix}.w_k"), dim, dim, rng),
            w_v: store.dense_weight(format!("{prefix}.w_v"), dim, dim, rng),
            w_o: store.dense_weight(format!("{prefix}.w_o"), dim, dim, rng),
        })
    }
}

/// Multi-head `softmax(Q·Kᵀ/√d_h)·V` with a `k × k` score matrix per head.
pub fn mha_reference(tape: &mut Tape, h: Var, m: &MhaParams, p: &Bound) -> Result<Var> {
    check_tokens(tape, h, m.dim)?;
    let dh = m.dim / m.heads;
    let q = tape.matmul(h, p[m.w_q])?;
    let k = tape.matmul(h, p[m.w_k])?;
    let v = tape.matmul(h, p[m.w_v])?;
    let mut heads = Vec::with_capacity(m.heads);
    for i in 0..m.heads {
        let qh = tape.narrow(q, 1, i * dh, dh)?;
        let kh = tape.narrow(k, 1, i * dh, dh)?;
        let vh = tape.narrow(v, 1, i * dh, dh)?;
        let kt = tape.transpose2d(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    tape.matmul(merged, p[m.w_o])
}

/// Depthwise-convolution channel MLP: depthwise 3³ conv, per-channel scale,
/// GeLU, pointwise conv.
#[derive(Clone, Copy, Debug)]
pub struct DcsParams {
    pub channels: usize,
    pub depthwise: ConvParams,
    pub scale: ParamId,
    pub pointwise: ConvParams,
}

impl DcsParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let dw = ConvOpts { stride: 1, padding: 1, groups: channels };
        Self {
            channels,
            depthwise: ConvParams::new(store, &format!("{prefix}.depthwise"), channels, channels, 3, dw, rng),
            scale: store.add(format!("{prefix}.scale"), Tensor::ones([channels])),
            pointwise: ConvParams::new(store, &format!("{prefix}.pointwise"), channels, channels, 1, ConvOpts::default(), rng),
        }
    }
}

/// Depthwise conv followed by the per-channel scale, before the activation.
pub fn dcs_pre_activation(tape: &mut Tape, x: Var, c: &DcsParams, p: &Bound) -> Result<Var> {
    let a = c.depthwise.apply(tape, p, x)?;
    let scale = tape.reshape(p[c.scale], [1, c.channels, 1, 1, 1])?;
    tape.mul(a, scale)
}

pub fn dcs(tape: &mut Tape, x: Var, c: &DcsParams, p: &Bound) -> Result<Var> {
    let a = dcs_pre_activation(tape, x, c, p)?;
    let a = tape.gelu(a);
    c.pointwise.apply(tape, p, a)
}

/// MetaFormer block: pre-norm token mixer and pre-norm channel MLP, each residual.
#[derive(Clone, Copy, Debug)]
pub struct SsaFormerParams {
    pub channels: usize,
    pub norm1: NormParams,
    /// `[C, d]` token embedding.
    pub embed: ParamId,
    pub ssa: SsaParams,
    pub norm2: NormParams,
    pub dcs: DcsParams,
}

impl SsaFormerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            channels,
            norm1: NormParams::new(store, &format!("{prefix}.norm1"), channels),
            embed: store.dense_weight(format!("{prefix}.embed"), channels, dim, rng),
            ssa: SsaParams::new(store, &format!("{prefix}.ssa"), dim, channels, rng),
            norm2: NormParams::new(store, &format!("{prefix}.norm2"), channels),
            dcs: DcsParams::new(store, &format!("{prefix}.dcs"), channels, rng),
        }
    }

    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        store.get_mut(self.ssa.w_o).data_mut().fill(0.0);
        self.dcs.pointwise.zero(store);
    }
}

/// `[1, C, D, H, W]` → `[D·H·W, C]`.
pub fn flatten_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, d, h, w] = tape.shape(x)[..] else {
        return shape_err(format!("expected [1, C, D, H, W], got {:?}", tape.shape(x)));
    };
    if n != 1 {
        return shape_err(format!("token flattening supports batch size 1, got {n}"));
    }
    let planes = tape.reshape(x, [c, d * h * w])?;
    tape.transpose2d(planes)
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(tape: &mut Tape, t: Var, dims: [usize; 3]) -> Result<Var> {
    let c = tape.shape(t)[1];
    let planes = tape.transpose2d(t)?;
    tape.reshape(planes, [1, c, dims[0], dims[1], dims[2]])
}

pub fn ssaformer_block(tape: &mut Tape, x: Var, b: &SsaFormerParams, p: &Bound) -> Result<Var> {
    let dims = tape.value(x).spatial_dims()?;
    if tape.shape(x)[1] != b.channels {
        return shape_err(format!("SSAFormer expects {} channels, got {:?}", b.channels, tape.shape(x)));
    }
    let n1 = b.norm1.apply(tape, p, x)?;
    let tokens = flatten_tokens(tape, n1)?;
    let h = tape.matmul(tokens, p[b.embed])?;
    let y = ssa(tape, h, &b.ssa, p)?;
    let y = unflatten_tokens(tape, y, dims)?;
    let x1 = tape.add(x, y)?;
    let n2 = b.norm2.apply(tape, p, x1)?;
    let z = dcs(tape, n2, &b.dcs, p)?;
    tape.add(x1, z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    Ssa,
    Mha,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Ssa => "ssa",
            MixerKind::Mha => "mha",
        }
    }
}

impl std::str::FromStr for MixerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssa" => Ok(MixerKind::Ssa),
            "mha" => Ok(MixerKind::Mha),
            other => config_err(format!("unknown mixer kind {other:?} (expected ssa or mha)")),
        }
    }
}

/// Multiply-accumulate counts of one token-mixer forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerFlops {
    /// Per-token linear projections (linear in `k`).
    pub projections: u64,
    /// Attention-score computation: `k·d` for SSA, `k²·d` for MHA.
    pub scores: u64,
    /// Applying the scores to the values / context.
    pub mixing: u64,
}

impl MixerFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.mixing
    }
}

pub fn mixer_flops(kind: MixerKind, k: u64, d: u64) -> MixerFlops {
    match kind {
        // W_K, W_V, W_O; latent scores H·w_i; context sum plus broadcast product.
        MixerKind::Ssa => MixerFlops { projections: 3 * k * d * d, scores: k * d, mixing: 2 * k * d },
        // Q, K, V, O projections; QKᵀ; attention · V.
        MixerKind::Mha => MixerFlops { projections: 4 * k * d * d, scores: k * k * d, mixing: k * k * d },
    }
}

pub fn count_mixer_flops(kind: MixerKind, k: u64, d: u64) -> u64 {
    mixer_flops(kind, k, d).total()
}

/// One row of the token-mixer benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: MixerKind,
    pub k: usize,
    pub d: usize,
    pub flops: u64,
    pub wall_ns: u128,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "kind,k,d,flops,wall_ns";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.kind.name(), self.k, self.d, self.flops, self.wall_ns)
    }
}

/// Times one forward pass of a token mixer on random tokens (single thread,
/// no gradient recording), taking the best of `repeats` runs.
pub fn bench_mixer(kind: MixerKind, k: usize, d: usize, heads: usize, repeats: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ssa_p = SsaParams::new(&mut store, "ssa", d, d, &mut rng);
    let mha_p = match kind {
        MixerKind::Mha => Some(MhaParams::new(&mut store, "mha", d, heads, &mut rng)?),
        MixerKind::Ssa => None,
    };
    let tokens = Tensor::uniform([k, d], -1.0, 1.0, &mut rng);
    let mut best = u128::MAX;
    for _ in 0..repeats.max(1) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h = tape.constant(tokens.clone());
        let start = Instant::now();
        let out = match &mha_p {
            Some(m) => mha_reference(&mut tape, h, m, &p)?,
            None => ssa(&mut tape, h, &ssa_p, &p)?,
        };
        std::hint::black_box(tape.value(out));
        best = best.min(start.elapsed().as_nanos());
    }
    Ok(BenchRow { kind, k, d, flops: count_mixer_flops(kind, k as u64, d as u64), wall_ns: best })
}
