//! One experiment seed at a time, in memory. The commands add file handling
//! and parallelism on top.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sdpt_core::data::{concept_tally, GroundingSample};
use sdpt_core::methods::{Artifact, Method, Recipe, TuneConfig, TuneReport};
use sdpt_core::metrics::EvalMetrics;
use sdpt_core::model::{load_checkpoint, pretrain, FusionCheckpoint, PretrainReport};
use sdpt_core::selftrain::self_train;
use sdpt_core::TensorMap;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::record::MetricsRecord;

/// Pre-trains the backbone for `seed` on the configured source data.
pub fn pretrain_seed(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(FusionCheckpoint, PretrainReport)> {
    let data = cfg.source_data(seed)?;
    Ok(pretrain(cfg.dims, seed, &data, &cfg.pretrain)?)
}

/// Loads the checkpoint of `seed`, failing with a pointer to `pretrain` when it
/// does not exist yet.
pub fn load_seed_checkpoint(cfg: &ExperimentConfig, seed: u64) -> Result<FusionCheckpoint> {
    let path = cfg.checkpoint_path(seed);
    if !path.exists() {
        return Err(LabError::MissingCheckpoint(path));
    }
    let ckpt = load_checkpoint(&path)?;
    if ckpt.dims != cfg.dims {
        return Err(LabError::Usage(format!(
            "{}: checkpoint dims {:?} differ from configured dims {:?}",
            path.display(),
            ckpt.dims,
            cfg.dims
        )));
    }
    Ok(ckpt)
}

/// Frozen adapters underneath a stacking run, read from `adapter_artifact`.
pub fn load_base_adapters(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
) -> Result<Option<TensorMap>> {
    let Some(path) = cfg.adapter_artifact_path(seed) else {
        if method == Method::Stack {
            return Err(LabError::MissingArtifact(
                "method stack needs `adapter_artifact` pointing at a tuned adapter artifact".into(),
            ));
        }
        return Ok(None);
    };
    if method != Method::Stack {
        return Ok(None);
    }
    if !path.exists() {
        return Err(LabError::MissingArtifact(format!(
            "{}: adapter artifact not found; tune method adapter first",
            path.display()
        )));
    }
    let artifact = Artifact::load(&path)?;
    if artifact.method != Method::Adapter {
        return Err(LabError::Usage(format!(
            "{}: holds a {} artifact, stacking needs an adapter artifact",
            path.display(),
            artifact.method
        )));
    }
    Ok(Some(artifact.tensors))
}

/// Identity of the run a record came from.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub command: &'a str,
    pub seed: u64,
    pub checkpoint: PathBuf,
}

impl RunContext<'_> {
    fn record(
        &self,
        recipe: &Recipe<'_>,
        metrics: EvalMetrics,
        train_loss: Vec<f64>,
        wall_seconds: f64,
        train: &[GroundingSample],
        eval: &[GroundingSample],
    ) -> MetricsRecord {
        let tokens = recipe.method.uses_tokens();
        MetricsRecord {
            command: self.command.to_string(),
            method: recipe.method,
            seed: self.seed,
            k: if tokens { recipe.cfg.k } else { 0 },
            layers: if tokens {
                recipe.layers().to_string()
            } else {
                String::new()
            },
            f1: metrics.f1,
            map: metrics.map,
            loss: metrics.loss,
            train_loss,
            trainable_params: recipe.param_count(),
            wall_seconds,
            train_samples: train.len(),
            eval_samples: eval.len(),
            concept_tally: None,
            pseudo_positives: None,
            old_task: None,
            checkpoint: self.checkpoint.clone(),
            artifact: None,
            config: self.cfg.clone(),
        }
    }
}

pub struct TuneOutcome {
    pub params: TensorMap,
    pub artifact: Artifact,
    pub report: TuneReport,
    pub record: MetricsRecord,
}

/// Tunes `method` for one seed on the configured target task. When frozen base
/// adapters are in play the old task is evaluated as well.
pub fn tune_seed(
    ctx: &RunContext<'_>,
    ckpt: &FusionCheckpoint,
    method: Method,
    tune: TuneConfig,
    base: Option<TensorMap>,
) -> Result<TuneOutcome> {
    let cfg = ctx.cfg;
    let train = cfg.target_train(ctx.seed)?;
    let eval = cfg.target_eval(ctx.seed)?;
    let recipe = Recipe::new(ckpt, method, tune, base)?;
    let (params, report) = recipe.tune(&train, &eval)?;
    let metrics = report.metrics.expect("held-out set is nonempty");
    let mut record = ctx.record(
        &recipe,
        metrics,
        report.epoch_losses.clone(),
        report.wall_seconds,
        &train,
        &eval,
    );
    if cfg.shots.is_some() {
        record.concept_tally = Some(concept_tally(&train));
    }
    if recipe.base_adapters().is_some() {
        record.old_task = Some(recipe.evaluate(&params, &cfg.old_eval(ctx.seed)?)?);
    }
    Ok(TuneOutcome {
        artifact: Artifact::new(&recipe, &params),
        params,
        report,
        record,
    })
}

/// Evaluates a tuned artifact, or the frozen model when `artifact` is `None`,
/// on `data`.
pub fn eval_seed(
    ctx: &RunContext<'_>,
    ckpt: &FusionCheckpoint,
    artifact: Option<(&Artifact, &Path)>,
    data: &[GroundingSample],
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let (recipe, params) = match artifact {
        Some((a, _)) => a.bind(ckpt)?,
        None => (
            Recipe::new(ckpt, Method::ZeroShot, TuneConfig::default(), None)?,
            TensorMap::default(),
        ),
    };
    let metrics = recipe.evaluate(&params, data)?;
    let mut record = ctx.record(
        &recipe,
        metrics,
        Vec::new(),
        start.elapsed().as_secs_f64(),
        &[],
        data,
    );
    record.artifact = artifact.map(|(_, p)| p.to_path_buf());
    Ok(record)
}

/// Self-trains prototype tokens for one seed on pseudo-labels of the target
/// training pool, whose own labels are never read.
pub fn self_train_seed(
    ctx: &RunContext<'_>,
    ckpt: &FusionCheckpoint,
    tune: TuneConfig,
) -> Result<MetricsRecord> {
    let cfg = ctx.cfg;
    let pool = cfg.target_train(ctx.seed)?;
    let eval = cfg.target_eval(ctx.seed)?;
    let out = self_train(ckpt, &pool, &eval, &cfg.self_train, &tune)?;
    let recipe = Recipe::new(ckpt, Method::Sdpt, tune, None)?;
    let metrics = out.report.metrics.expect("held-out set is nonempty");
    let mut record = ctx.record(
        &recipe,
        metrics,
        out.report.epoch_losses.clone(),
        out.report.wall_seconds,
        &pool,
        &eval,
    );
    record.pseudo_positives = Some(out.pseudo_counts);
    Ok(record)
}
