use serde::{Deserialize, Serialize};

use super::forward::Wiring;
use super::weights::FusionCheckpoint;
use super::Dims;
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::tensors::TensorMap;
use crate::train::{evaluate, train, Network, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 30,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss over the source data at initialization.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the source data after the last epoch.
    pub final_loss: f64,
    pub trainable_params: usize,
}

/// Names trained during pre-training: every encoder and cross-attention tensor.
/// The head projections stay at their random orthonormal initialization.
pub fn pretrain_tensor_names(ckpt: &FusionCheckpoint) -> Vec<String> {
    ckpt.tensors()
        .names()
        .filter(|n| !n.starts_with("head."))
        .cloned()
        .collect()
}

/// Full-parameter SGD from a seeded initialization. The shuffle is seeded from
/// `init_seed` as well, so one seed pins the whole run.
pub fn pretrain(
    dims: Dims,
    init_seed: u64,
    data: &[GroundingSample],
    cfg: &PretrainConfig,
) -> Result<(FusionCheckpoint, PretrainReport)> {
    if data.is_empty() {
        return Err(Error::Config("pre-training data is empty".into()));
    }
    for s in data {
        s.check(&dims)?;
    }
    let init = FusionCheckpoint::init(dims, init_seed)?;
    let all = init.tensors();
    let mut params: TensorMap = pretrain_tensor_names(&init)
        .into_iter()
        .map(|n| {
            let v = all.get(&n).cloned().expect("name taken from the same map");
            (n, v)
        })
        .collect();
    let trainable_params = params.scalar_count();

    let build = |tape: &mut Tape, p: &TensorMap, _: Stage| -> Result<Network> {
        Ok(Network {
            backbone: init.bind(tape, p)?,
            wiring: Wiring::plain(),
        })
    };
    let initial_loss = evaluate(&params, data, build)?.loss;
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: init_seed,
    };
    let epoch_losses = train(&mut params, data, &train_cfg, build)?;
    let final_loss = evaluate(&params, data, build)?.loss;

    let ckpt = init.with_tensors(&params)?;
    ckpt.validate()?;
    Ok((
        ckpt,
        PretrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
            trainable_params,
        },
    ))
}
