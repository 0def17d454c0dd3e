use super::transform::spatial_transform_tape;
use super::NetworkConfig;
use crate::autodiff::{ConvOpts, Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{Bound, ConvParams, NormParams, ParamStore};
use crate::sga::{sga_block, GraphSpec, SgaBlockParams};
use crate::ssaformer::{ssaformer_block, SsaFormerParams};
use crate::tensor::Tensor;
use crate::volume::{DeformationField, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Input channels: moving and fixed intensities.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug)]
struct EncoderStage {
    down: ConvParams,
    norm: NormParams,
    block: SgaBlockParams,
}

#[derive(Clone, Copy, Debug)]
struct DecoderStage {
    conv: ConvParams,
}

/// The U-shaped registration network and its parameters.
#[derive(Clone, Debug)]
pub struct RegistrationModel {
    config: NetworkConfig,
    params: ParamStore,
    encoder: Vec<EncoderStage>,
    bottleneck: SsaFormerParams,
    decoder: Vec<DecoderStage>,
    flow: ConvParams,
}

/// Decoder output widths: decoder stage `j` (1-based) mirrors encoder stage
/// `stages - j`, and the last stage keeps the first encoder width.
pub fn decoder_channels(config: &NetworkConfig) -> Vec<usize> {
    let n = config.stages;
    (1..=n).map(|j| config.channels[n.saturating_sub(j + 1)]).collect()
}

/// Channels of the skip tensor joined at decoder stage `j` (1-based).
fn skip_channels(config: &NetworkConfig, j: usize) -> usize {
    match config.stages - j {
        0 => INPUT_CHANNELS,
        s => config.channels[s - 1],
    }
}

impl RegistrationModel {
    /// Builds a model with seeded uniform fan-in initialization and a
    /// zero flow head.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, &mut rng)
    }

    fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let down_opts = ConvOpts { stride: 2, padding: 0, groups: 1 };
        let mut encoder = Vec::with_capacity(config.stages);
        let mut cin = INPUT_CHANNELS;
        for (s, &c) in config.channels.iter().enumerate() {
            let prefix = format!("enc{s}");
            encoder.push(EncoderStage {
                down: ConvParams::new(&mut params, &format!("{prefix}.down"), cin, c, 2, down_opts, rng),
                norm: NormParams::new(&mut params, &format!("{prefix}.norm"), c),
                block: SgaBlockParams::new(&mut params, &format!("{prefix}.sga"), c, config.ffn_expansion, rng),
            });
            cin = c;
        }
        let bottleneck = SsaFormerParams::new(&mut params, "bottleneck", cin, config.bottleneck_d, rng);
        let mut decoder = Vec::with_capacity(config.stages);
        for (j, &cout) in decoder_channels(&config).iter().enumerate() {
            let input = cin + skip_channels(&config, j + 1);
            let conv = ConvParams::new(&mut params, &format!("dec{j}.conv"), input, cout, 3, ConvOpts::same3(), rng);
            decoder.push(DecoderStage { conv });
            cin = cout;
        }
        let flow = ConvParams::new(&mut params, "flow", cin, 3, 3, ConvOpts::same3(), rng);
        flow.zero(&mut params);
        Ok(Self { config, params, encoder, bottleneck, decoder, flow })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Replaces every parameter with the named tensors, which must cover the
    /// model exactly with matching shapes.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return config_err(format!("expected {} parameter tensors, found {}", self.params.len(), named.len()));
        }
        let mut map: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let t = map.remove(&name).ok_or_else(|| crate::Error::Config(format!("missing parameter {name:?}")))?;
            if t.shape() != self.params.get(id).shape() {
                return shape_err(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                ));
            }
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }

    /// Zeroes the flow head, making the predicted field identically zero.
    pub fn zero_flow_head(&mut self) {
        self.flow.zero(&mut self.params);
    }

    /// Fills the flow head with uniform values in `[-scale, scale]`.
    pub fn randomize_flow_head<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for id in [self.flow.weight, self.flow.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::uniform(t.shape().to_vec(), -scale, scale, rng);
        }
    }

    /// Predicts the displacement `[1, 3, D, H, W]` from moving and fixed
    /// images `[1, 1, D, H, W]`.
    pub fn flow_tape(&self, tape: &mut Tape, p: &Bound, moving: Var, fixed: Var) -> Result<Var> {
        let dims = tape.value(moving).spatial_dims()?;
        if tape.shape(moving) != [1, 1, dims[0], dims[1], dims[2]] || tape.shape(fixed) != tape.shape(moving) {
            return shape_err(format!(
                "expected matching [1, 1, D, H, W] images, got {:?} and {:?}",
                tape.shape(moving),
                tape.shape(fixed)
            ));
        }
        self.config.validate_dims(dims)?;
        let input = tape.concat(&[moving, fixed], 1)?;
        let mut skips = vec![input];
        let mut x = input;
        for (s, stage) in self.encoder.iter().enumerate() {
            x = stage.down.apply(tape, p, x)?;
            x = stage.norm.apply(tape, p, x)?;
            let spec = GraphSpec::new(self.config.stride_k[s], tape.value(x).spatial_dims()?)?;
            x = sga_block(tape, x, &spec, &stage.block, p)?;
            skips.push(x);
        }
        skips.pop();
        x = ssaformer_block(tape, x, &self.bottleneck, p)?;
        for stage in &self.decoder {
            let up = tape.upsample2x(x)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let joined = tape.concat(&[up, skip], 1)?;
            let y = stage.conv.apply(tape, p, joined)?;
            x = tape.gelu(y);
        }
        self.flow.apply(tape, p, x)
    }

    /// Warped moving image and predicted field, without recording gradients.
    pub fn forward(&self, moving: &Volume, fixed: &Volume) -> Result<(Volume, DeformationField)> {
        if moving.dims() != fixed.dims() {
            return shape_err(format!("moving {:?} and fixed {:?} dims differ", moving.dims(), fixed.dims()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let m = tape.constant(moving.to_tensor());
        let f = tape.constant(fixed.to_tensor());
        let u = self.flow_tape(&mut tape, &p, m, f)?;
        let w = spatial_transform_tape(&mut tape, m, u)?;
        Ok((Volume::from_tensor(tape.value(w))?, DeformationField::from_tensor(tape.value(u))?))
    }

    /// Predicted field only.
    pub fn register(&self, moving: &Volume, fixed: &Volume) -> Result<DeformationField> {
        self.forward(moving, fixed).map(|(_, u)| u)
    }
}
