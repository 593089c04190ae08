//! The one SGD loop and evaluation path every method goes through. Methods differ
//! only in the closure that records the network on a fresh tape.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_logits, EvalMetrics};
use crate::model::{forward_on_tape, BoundBackbone, Wiring};
use crate::numerics::{Matrix, Tape};
use crate::tensors::TensorMap;

const EVAL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which pass the network is being recorded for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// 0-based training epoch.
    Train(usize),
    Eval,
}

/// A backbone on a tape plus its prompt/adapter wiring.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: BoundBackbone,
    pub wiring: Wiring,
}

/// Minibatch SGD on the mean alignment loss. Every tensor in `params` receives a
/// gradient step, so the closure must record each of them with `Tape::param`
/// under its own name. Returns the sample-weighted mean training loss per epoch.
pub fn train<F>(
    params: &mut TensorMap,
    data: &[GroundingSample],
    cfg: &TrainConfig,
    mut build: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &TensorMap, Stage) -> Result<Network>,
{
    cfg.validate()?;
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let ids = params.param_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let net = build(&mut tape, params, Stage::Train(epoch))?;
            let mut per_sample = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &data[i];
                let trace = forward_on_tape(&mut tape, &net.backbone, &net.wiring, &s.p0, &s.r0)?;
                per_sample.push(tape.sigmoid_cross_entropy(trace.logits, &s.y)?);
            }
            let loss = tape.mean(&per_sample)?;
            let value = tape.value(loss)[(0, 0)];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            total += value * batch.len() as f64;
            let grads = tape.grad(loss, &ids)?;
            params.sgd_step(&grads, cfg.lr)?;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Logits for every sample, recorded in chunks on throwaway tapes.
pub fn predict<F>(params: &TensorMap, data: &[GroundingSample], mut build: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&mut Tape, &TensorMap, Stage) -> Result<Network>,
{
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let net = build(&mut tape, params, Stage::Eval)?;
        for s in chunk {
            let trace = forward_on_tape(&mut tape, &net.backbone, &net.wiring, &s.p0, &s.r0)?;
            out.push(tape.value(trace.logits).clone());
        }
    }
    Ok(out)
}

pub fn evaluate<F>(params: &TensorMap, data: &[GroundingSample], build: F) -> Result<EvalMetrics>
where
    F: FnMut(&mut Tape, &TensorMap, Stage) -> Result<Network>,
{
    let logits = predict(params, data, build)?;
    let targets: Vec<Matrix> = data.iter().map(|s| s.y.clone()).collect();
    evaluate_logits(&logits, &targets)
}

/// Post-softmax attention per fusion layer for one sample, rows = image tokens
/// (attached rows first), columns = text tokens (attached columns first).
pub fn attention_maps<F>(
    params: &TensorMap,
    sample: &GroundingSample,
    mut build: F,
) -> Result<Vec<Matrix>>
where
    F: FnMut(&mut Tape, &TensorMap, Stage) -> Result<Network>,
{
    let mut tape = Tape::new();
    let net = build(&mut tape, params, Stage::Eval)?;
    let trace = forward_on_tape(
        &mut tape,
        &net.backbone,
        &net.wiring,
        &sample.p0,
        &sample.r0,
    )?;
    Ok(trace
        .layers
        .iter()
        .map(|l| tape.value(l.weights).clone())
        .collect())
}
