//! Comparators for the prototype-token method. Each is a thin front over
//! [`Recipe`], so data, loss, optimizer and evaluation are shared.

use crate::data::GroundingSample;
use crate::error::Result;
use crate::methods::{Method, Recipe, TuneConfig, TuneReport};
use crate::metrics::EvalMetrics;
use crate::model::FusionCheckpoint;
use crate::sdpt::PrototypeTokens;
use crate::tensors::TensorMap;

fn run(
    ckpt: &FusionCheckpoint,
    method: Method,
    base: Option<TensorMap>,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(TensorMap, TuneReport)> {
    Recipe::new(ckpt, method, cfg.clone(), base)?.tune(train, eval)
}

/// Tokens mapped by trainable affine maps on the sides selected by `cfg.modal`.
pub fn learnable_proj_tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(TensorMap, TuneReport)> {
    run(ckpt, Method::LearnableProj, None, train, eval, cfg)
}

pub fn unshared_tokens_tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(TensorMap, TuneReport)> {
    run(ckpt, Method::Unshared, None, train, eval, cfg)
}

pub fn separate_tokens_tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(TensorMap, TuneReport)> {
    run(ckpt, Method::Separate, None, train, eval, cfg)
}

/// Text-only attachment for `phase_epochs`, then image-only for as many.
pub fn async_tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(PrototypeTokens, TuneReport)> {
    let (params, report) = run(ckpt, Method::Async, None, train, eval, cfg)?;
    Ok((PrototypeTokens::from_tensors(&params)?, report))
}

pub fn linear_probe_tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(TensorMap, TuneReport)> {
    run(ckpt, Method::LinearProbe, None, train, eval, cfg)
}

pub fn adapter_tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(TensorMap, TuneReport)> {
    run(ckpt, Method::Adapter, None, train, eval, cfg)
}

/// Outcome of tuning a second module on a new task over frozen adapters.
#[derive(Clone, Debug)]
pub struct StackOutcome {
    pub params: TensorMap,
    pub old_task: EvalMetrics,
    pub new_task: TuneReport,
}

/// Prototype tokens trained on the new task with the backbone and the old
/// task's adapters frozen, evaluated on both tasks.
pub fn stack_tune(
    ckpt: &FusionCheckpoint,
    frozen_adapters: &TensorMap,
    new_train: &[GroundingSample],
    new_eval: &[GroundingSample],
    old_eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<StackOutcome> {
    stacked(
        ckpt,
        Method::Stack,
        frozen_adapters,
        new_train,
        new_eval,
        old_eval,
        cfg,
    )
}

/// The naive alternative to [`stack_tune`]: a second adapter set trained on the
/// new task on top of the frozen first one.
pub fn adapter_on_adapter_tune(
    ckpt: &FusionCheckpoint,
    frozen_adapters: &TensorMap,
    new_train: &[GroundingSample],
    new_eval: &[GroundingSample],
    old_eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<StackOutcome> {
    stacked(
        ckpt,
        Method::Adapter,
        frozen_adapters,
        new_train,
        new_eval,
        old_eval,
        cfg,
    )
}

fn stacked(
    ckpt: &FusionCheckpoint,
    method: Method,
    frozen_adapters: &TensorMap,
    new_train: &[GroundingSample],
    new_eval: &[GroundingSample],
    old_eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<StackOutcome> {
    let recipe = Recipe::new(ckpt, method, cfg.clone(), Some(frozen_adapters.clone()))?;
    let (params, new_task) = recipe.tune(new_train, new_eval)?;
    let old_task = recipe.evaluate(&params, old_eval)?;
    Ok(StackOutcome {
        params,
        old_task,
        new_task,
    })
}
