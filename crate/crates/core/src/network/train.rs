use super::transform::spatial_transform_tape;
use super::RegistrationModel;
use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::losses::{total_loss_tape, LossBreakdown};
use crate::optim::Adam;
use crate::params::Bound;
use crate::volume::Volume;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub moving: Volume,
    pub fixed: Volume,
}

/// Mean losses over one pass through the training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

impl EpochLoss {
    pub const CSV_HEADER: &'static str = "epoch,sim_loss,reg_loss,total";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.sim, self.reg, self.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Seeds the per-epoch pair order.
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self { epochs, seed, shuffle: true }
    }
}

/// Records the full registration loss of one pair; returns `(sim, reg, total)`.
pub fn loss_tape(model: &RegistrationModel, tape: &mut Tape, p: &Bound, pair: &TrainPair) -> Result<(Var, Var, Var)> {
    let cfg = model.config();
    let m = tape.constant(pair.moving.to_tensor());
    let f = tape.constant(pair.fixed.to_tensor());
    let u = model.flow_tape(tape, p, m, f)?;
    let w = spatial_transform_tape(tape, m, u)?;
    total_loss_tape(tape, f, w, u, cfg.lambda_reg, cfg.similarity, cfg.lncc_window)
}

/// Loss of the current model on one pair, without gradients.
pub fn evaluate_loss(model: &RegistrationModel, pair: &TrainPair) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let (s, r, _) = loss_tape(model, &mut tape, &p, pair)?;
    Ok(LossBreakdown::new(tape.value(s).item(), tape.value(r).item(), model.config().lambda_reg))
}

/// One forward/backward/Adam update on a single pair. Returns the loss
/// before the update.
pub fn train_step(model: &mut RegistrationModel, adam: &mut Adam, pair: &TrainPair) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let (s, r, t) = loss_tape(model, &mut tape, &p, pair)?;
    let breakdown = LossBreakdown::new(tape.value(s).item(), tape.value(r).item(), model.config().lambda_reg);
    if !tape.value(t).item().is_finite() {
        return Err(Error::Diverged(format!("non-finite loss (sim={}, reg={})", breakdown.sim, breakdown.reg)));
    }
    let mut grads = tape.backward(t)?;
    let grads = model.params().collect_grads(&p, &mut grads)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = model.params().name(model.params().ids().nth(i).expect("one gradient per parameter"));
        return Err(Error::Diverged(format!("non-finite gradient for {name}")));
    }
    let refs: Vec<Option<&_>> = grads.iter().map(Some).collect();
    adam.step(model.params_mut().values_mut(), &refs)?;
    Ok(breakdown)
}

pub fn train(model: &mut RegistrationModel, pairs: &[TrainPair], opts: TrainOptions) -> Result<Vec<EpochLoss>> {
    train_with(model, pairs, opts, |_| {})
}

/// Adam training at batch size 1, calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut RegistrationModel,
    pairs: &[TrainPair],
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    if pairs.is_empty() {
        return config_err("training needs at least one pair");
    }
    for (i, pair) in pairs.iter().enumerate() {
        if pair.moving.dims() != pair.fixed.dims() {
            return shape_err(format!("pair {i}: moving {:?} and fixed {:?} differ", pair.moving.dims(), pair.fixed.dims()));
        }
        model.config().validate_training_dims(pair.moving.dims())?;
    }
    let mut adam = Adam::new(model.config().lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        if opts.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut sim, mut reg, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let b = train_step(model, &mut adam, &pairs[i]).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, pair {i}: {msg}")),
                other => other,
            })?;
            sim += b.sim;
            reg += b.reg;
            total += b.total;
        }
        let n = pairs.len() as f64;
        let entry = EpochLoss { epoch, sim: sim / n, reg: reg / n, total: total / n };
        on_epoch(&entry);
        history.push(entry);
    }
    Ok(history)
}
