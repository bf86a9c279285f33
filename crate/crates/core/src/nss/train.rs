use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NssError, NssModel};
use crate::gradkit::{AdamConfig, AdamState, GradError, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Output at step `k` is scored against the target at `k + 1`.
    #[default]
    NextStep,
    /// Output at step `k` is scored against the target at `k`.
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub objective: Objective,
    /// Sequences per update; `0` means full batch.
    pub batch_size: usize,
    /// Seed for minibatch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            optimizer: AdamConfig::default(),
            objective: Objective::NextStep,
            batch_size: 0,
            seed: 0,
        }
    }
}

/// One sequence: `input` is `[input_dim × len]` and `target` `[output_dim × len]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub len: usize,
}

impl Sample {
    /// Single-channel sequence that is its own target.
    pub fn univariate(values: &[f64]) -> Self {
        Self {
            input: values.to_vec(),
            target: values.to_vec(),
            len: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    /// Mean minibatch loss per epoch, each taken before its own update.
    pub losses: Vec<f64>,
    /// Epoch at which the loss or a gradient became non-finite.
    pub diverged_at: Option<usize>,
}

/// Mean squared error of `output` against `target` under `objective`.
pub fn objective_loss(tape: &mut Tape, output: Var, target: Var, objective: Objective) -> Result<Var, GradError> {
    match objective {
        Objective::Reconstruction => tape.mse(output, target),
        Objective::NextStep => {
            let len = tape.shape(output)[1];
            if len < 2 {
                return Err(GradError::Contract("next-step objective needs at least two steps".into()));
            }
            let pred = tape.slice(output, 1, 0, len - 1)?;
            let next = tape.slice(target, 1, 1, len - 1)?;
            tape.mse(pred, next)
        }
    }
}

fn batch_loss(model: &NssModel, tape: &mut Tape, data: &[&Sample], objective: Objective) -> Result<Var, GradError> {
    let len = data[0].len;
    let prep = model.prepare(tape, len)?;
    let mut total: Option<Var> = None;
    for s in data {
        let u = tape.constant_from(&[model.config.input_dim, s.len], s.input.clone())?;
        let t = tape.constant_from(&[model.config.output_dim, s.len], s.target.clone())?;
        let rec = model.apply(tape, &prep, u)?;
        let l = objective_loss(tape, rec.output, t, objective)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("nonempty batch"), 1.0 / data.len() as f64))
}

fn new_tape(len: usize) -> Tape {
    Tape::new().with_max_conv_taps(len.max(crate::gradkit::DEFAULT_MAX_CONV_TAPS))
}

/// Mean objective over `data` at the current parameters.
pub fn evaluate_loss(model: &NssModel, data: &[Sample], objective: Objective) -> Result<f64, NssError> {
    check_data(model, data)?;
    let refs: Vec<&Sample> = data.iter().collect();
    let mut tape = new_tape(data[0].len);
    let loss = batch_loss(model, &mut tape, &refs, objective)?;
    Ok(tape.scalar_value(loss))
}

fn check_data(model: &NssModel, data: &[Sample]) -> Result<(), NssError> {
    let Some(first) = data.first() else {
        return Err(NssError::Contract("empty dataset".into()));
    };
    for s in data {
        if s.len != first.len
            || s.input.len() != model.config.input_dim * s.len
            || s.target.len() != model.config.output_dim * s.len
        {
            return Err(NssError::Contract("samples must share length and match model dimensions".into()));
        }
    }
    Ok(())
}

/// Adam training. A non-finite loss or gradient stops training and is
/// reported through [`TrainOutcome::diverged_at`].
pub fn train_model(model: &mut NssModel, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome, NssError> {
    train_model_with(model, data, cfg, |_, _| Ok(()))
}

/// [`train_model`] with a hook called after every completed epoch.
pub fn train_model_with<F>(model: &mut NssModel, data: &[Sample], cfg: &TrainConfig, mut after_epoch: F) -> Result<TrainOutcome, NssError>
where
    F: FnMut(usize, &NssModel) -> Result<(), NssError>,
{
    check_data(model, data)?;
    let mut opt = AdamState::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = if cfg.batch_size == 0 { data.len() } else { cfg.batch_size.min(data.len()) };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if batch < data.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|i| &data[*i]).collect();
            let mut tape = new_tape(data[0].len);
            let loss = batch_loss(model, &mut tape, &refs, cfg.objective)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Ok(TrainOutcome {
                    losses,
                    diverged_at: Some(epoch),
                });
            }
            epoch_loss += value * chunk.len() as f64;
            model.params.zero_grads();
            match tape.backward(loss, &mut model.params) {
                Ok(()) => {}
                Err(GradError::NonFinite { .. }) => {
                    return Ok(TrainOutcome {
                        losses,
                        diverged_at: Some(epoch),
                    })
                }
                Err(e) => return Err(e.into()),
            }
            opt.step(&mut model.params)?;
        }
        losses.push(epoch_loss / data.len() as f64);
        after_epoch(epoch, model)?;
    }
    Ok(TrainOutcome {
        losses,
        diverged_at: None,
    })
}
