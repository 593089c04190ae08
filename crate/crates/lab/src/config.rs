//! Experiment configuration: one JSON object, every field optional, defaults
//! materialized on load so records describe their run completely.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdpt_core::data::{generate_task, sample_shots, GroundingSample, TaskSpec};
use sdpt_core::methods::{Method, TuneConfig};
use sdpt_core::model::{Dims, PretrainConfig};
use sdpt_core::sdpt::LayerSet;
use sdpt_core::selftrain::PseudoLabelConfig;

use crate::error::{LabError, Result};

/// Offsets separating the independent draws made for one experiment seed.
const TARGET_TRAIN: u64 = 1 << 32;
const TARGET_EVAL: u64 = 2 << 32;
const OLD_TRAIN: u64 = 3 << 32;
const OLD_EVAL: u64 = 4 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub source: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            source: 600,
            target_train: 100,
            target_eval: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub k: Vec<usize>,
    pub layers: Vec<LayerSet>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Result files to aggregate; empty means `<out_dir>/results.jsonl`.
    pub results: Vec<PathBuf>,
    /// Held-out samples per record whose attention maps are dumped.
    pub attention_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: Dims,
    pub source: TaskSpec,
    pub target: TaskSpec,
    /// Task the frozen adapters of a stacking run were tuned on. Defaults to the
    /// source distribution.
    pub old_task: Option<TaskSpec>,
    pub sizes: DataSizes,
    pub pretrain: PretrainConfig,
    pub method: Method,
    pub tune: TuneConfig,
    /// Few-shot: samples per target concept drawn from the training pool.
    pub shots: Option<usize>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Checkpoint location; `{seed}` is replaced by the experiment seed.
    /// Defaults to `<out_dir>/checkpoints/seed-{seed}.json`.
    pub checkpoint: Option<PathBuf>,
    /// Adapter artifact frozen underneath a stacking run; `{seed}` expands.
    pub adapter_artifact: Option<PathBuf>,
    /// Artifact evaluated by `eval`; zero-shot when absent. `{seed}` expands.
    pub artifact: Option<PathBuf>,
    /// Labeled dataset evaluated by `eval` instead of the generated held-out set.
    pub dataset: Option<PathBuf>,
    pub sweep: SweepGrid,
    pub self_train: PseudoLabelConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dims: Dims::desk(),
            source: TaskSpec::source(0, 0),
            target: TaskSpec::target(0, 1),
            old_task: None,
            sizes: DataSizes::default(),
            pretrain: PretrainConfig::default(),
            method: Method::Sdpt,
            tune: TuneConfig::default(),
            shots: None,
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            adapter_artifact: None,
            artifact: None,
            dataset: None,
            sweep: SweepGrid::default(),
            self_train: PseudoLabelConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn expand(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LabError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::ConfigParse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate().map_err(|e| LabError::ConfigParse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Applies `--out` and `--seed`.
    pub fn with_overrides(mut self, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(out) = out {
            self.out_dir = out;
        }
        if let Some(seed) = seed {
            self.seeds = vec![seed];
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        for spec in [&self.source, &self.target]
            .into_iter()
            .chain(&self.old_task)
        {
            spec.validate(&self.dims)?;
        }
        self.tune.validate(self.method, &self.dims)?;
        self.self_train.validate()?;
        if self.seeds.is_empty() {
            return Err(LabError::Usage("seeds must not be empty".into()));
        }
        let s = &self.sizes;
        if s.source == 0 || s.target_train == 0 || s.target_eval == 0 {
            return Err(LabError::Usage("data sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.jsonl")
    }

    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        match &self.checkpoint {
            Some(p) => expand(p, seed),
            None => self.out_dir.join(format!("checkpoints/seed-{seed}.json")),
        }
    }

    pub fn artifact_path(&self, method: Method, seed: u64) -> PathBuf {
        self.out_dir
            .join(format!("artifacts/{method}-seed-{seed}.json"))
    }

    pub fn adapter_artifact_path(&self, seed: u64) -> Option<PathBuf> {
        self.adapter_artifact.as_deref().map(|p| expand(p, seed))
    }

    pub fn eval_artifact_path(&self, seed: u64) -> Option<PathBuf> {
        self.artifact.as_deref().map(|p| expand(p, seed))
    }

    /// `spec` moved to the world and draw stream of experiment seed `seed`.
    fn seeded(spec: &TaskSpec, seed: u64, stream: u64) -> TaskSpec {
        TaskSpec {
            world_seed: spec.world_seed.wrapping_add(seed),
            seed: spec.seed.wrapping_add(seed).wrapping_add(stream),
            ..spec.clone()
        }
    }

    pub fn source_data(&self, seed: u64) -> Result<Vec<GroundingSample>> {
        let spec = Self::seeded(&self.source, seed, 0);
        Ok(generate_task(&spec, &self.dims, self.sizes.source)?)
    }

    /// The labeled target training pool, reduced to `shots` per concept when
    /// few-shot is configured.
    pub fn target_train(&self, seed: u64) -> Result<Vec<GroundingSample>> {
        let spec = Self::seeded(&self.target, seed, TARGET_TRAIN);
        let pool = generate_task(&spec, &self.dims, self.sizes.target_train)?;
        Ok(match self.shots {
            Some(shots) => sample_shots(&pool, &self.target.concepts_used, shots, seed)?
                .into_iter()
                .map(|i| pool[i].clone())
                .collect(),
            None => pool,
        })
    }

    pub fn target_eval(&self, seed: u64) -> Result<Vec<GroundingSample>> {
        let spec = Self::seeded(&self.target, seed, TARGET_EVAL);
        Ok(generate_task(&spec, &self.dims, self.sizes.target_eval)?)
    }

    fn old_spec(&self) -> TaskSpec {
        self.old_task.clone().unwrap_or_else(|| self.source.clone())
    }

    pub fn old_train(&self, seed: u64) -> Result<Vec<GroundingSample>> {
        let spec = Self::seeded(&self.old_spec(), seed, OLD_TRAIN);
        Ok(generate_task(&spec, &self.dims, self.sizes.target_train)?)
    }

    pub fn old_eval(&self, seed: u64) -> Result<Vec<GroundingSample>> {
        let spec = Self::seeded(&self.old_spec(), seed, OLD_EVAL);
        Ok(generate_task(&spec, &self.dims, self.sizes.target_eval)?)
    }

    /// Tuning hyperparameters with the seed offset by the experiment seed.
    pub fn tune_config(&self, seed: u64) -> TuneConfig {
        TuneConfig {
            seed: self.tune.seed.wrapping_add(seed),
            ..self.tune.clone()
        }
    }
}
