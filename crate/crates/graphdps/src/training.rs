//! Adam optimizer and the score-network training loop.

use crate::diffusion::{training_loss_and_grads, NoiseSchedule};
use crate::error::{GraphDpsError, Result};
use crate::score::{HierarchyIndex, ScoreNetConfig, ScoreNetParams};
use crate::seeds;
use crate::NodeField;
use ndarray::Array2;
use rand::seq::SliceRandom;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-3,
            epochs: 300,
            batch_size: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(GraphDpsError::Training("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(GraphDpsError::Training("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// First and second moment accumulators, one per parameter array.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ScoreNetParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .iter()
            .map(|(_, value)| Array2::zeros(value.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over all parameter arrays.
pub fn adam_step(
    params: &mut ScoreNetParams,
    grads: &[Array2<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(GraphDpsError::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let names = params.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        let g = &grads[k];
        let value = params.get_mut(name);
        if g.dim() != value.dim() {
            return Err(GraphDpsError::Shape(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.dim(),
                value.dim()
            )));
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        ndarray::Zip::from(value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
            });
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,wall_seconds";

    pub fn to_csv(&self) -> String {
        format!("{},{:.12e},{:.3}", self.epoch, self.mean_loss, self.wall_seconds)
    }
}

/// Train over shuffled mini-batches for `config.epochs` epochs, starting at
/// `start_epoch` (for checkpoint resumption; all randomness is keyed by the
/// absolute epoch/batch indices, so a resumed run continues the original
/// trajectory exactly).
///
/// The `epoch_hook` runs after every epoch with (epoch, params, mean loss);
/// callers use it for checkpointing and logging.
pub fn train(
    dataset: &[NodeField],
    params: &mut ScoreNetParams,
    state: &mut AdamState,
    net_config: &ScoreNetConfig,
    index: &HierarchyIndex,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    start_epoch: usize,
    mut epoch_hook: impl FnMut(usize, &ScoreNetParams, &TrainLogRow) -> Result<()>,
) -> Result<Vec<TrainLogRow>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(GraphDpsError::Training("empty dataset".into()));
    }
    let n_batches = dataset.len().div_ceil(config.batch_size);
    let mut log = Vec::new();
    let started = Instant::now();

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = seeds::rng_indexed(config.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for b in 0..n_batches {
            let lo = b * config.batch_size;
            let hi = (lo + config.batch_size).min(dataset.len());
            let batch: Vec<NodeField> =
                order[lo..hi].iter().map(|&i| dataset[i].clone()).collect();
            let batch_seed = seeds::derive_indexed(
                config.seed,
                "train-batch",
                (epoch * n_batches + b) as u64,
            );
            let (loss, grads) =
                training_loss_and_grads(params, net_config, index, &batch, schedule, batch_seed)?;
            if !loss.is_finite() {
                return Err(GraphDpsError::Training(format!(
                    "non-finite loss {loss} at epoch {epoch} batch {b}"
                )));
            }
            adam_step(params, &grads, state, config)?;
            epoch_loss += loss * batch.len() as f64;
        }
        let row = TrainLogRow {
            epoch,
            mean_loss: epoch_loss / dataset.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        epoch_hook(epoch, params, &row)?;
        log.push(row);
    }
    Ok(log)
}
