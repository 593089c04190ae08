//! Every tuning method as a recipe for recording the network on a tape. All
//! methods share the data pipeline, loss, optimizer and evaluation in
//! [`crate::train`]; they differ only in which tensors are trainable and how
//! those tensors are wired into the frozen backbone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::files::{read_versioned, write_json};
use crate::metrics::EvalMetrics;
use crate::model::{
    uniform, AdapterLayerNodes, AdapterNodes, Attachment, Dims, FusionCheckpoint, Wiring,
    FORMAT_VERSION,
};
use crate::numerics::{Matrix, NodeId, Tape};
use crate::sdpt::{
    build_inverse_projections, project_image_on_tape, project_text_on_tape, token_name,
    InverseProjections, LayerSet,
};
use crate::tensors::TensorMap;
use crate::train::{attention_maps, evaluate, predict, train, Network, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No trainables; the frozen model as is.
    ZeroShot,
    /// Shared fusion-space tokens through fixed inverse projections.
    Sdpt,
    /// Fusion-space tokens through trainable affine maps.
    LearnableProj,
    /// Two independent fusion-space token sets, one per modality.
    Unshared,
    /// Tokens living directly in each modality's input space.
    Separate,
    /// Shared tokens attached to text for the first phase, image for the second.
    Async,
    /// Head projections only.
    LinearProbe,
    /// Bottleneck adapters after every encoder layer.
    Adapter,
    /// Shared tokens trained on top of frozen adapters from an earlier task.
    Stack,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::ZeroShot,
        Method::Sdpt,
        Method::LearnableProj,
        Method::Unshared,
        Method::Separate,
        Method::Async,
        Method::LinearProbe,
        Method::Adapter,
        Method::Stack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::Sdpt => "sdpt",
            Method::LearnableProj => "learnable-proj",
            Method::Unshared => "unshared",
            Method::Separate => "separate",
            Method::Async => "async",
            Method::LinearProbe => "linear-probe",
            Method::Adapter => "adapter",
            Method::Stack => "stack",
        }
    }

    /// Prefix of the method's trainable tensor names.
    pub fn prefix(self) -> &'static str {
        match self {
            Method::ZeroShot => "",
            Method::Sdpt | Method::Async | Method::Stack => "sdpt",
            Method::LearnableProj => "lproj",
            Method::Unshared => "unshared",
            Method::Separate => "separate",
            Method::LinearProbe => "head",
            Method::Adapter => "adapter",
        }
    }

    pub fn uses_tokens(self) -> bool {
        matches!(
            self,
            Method::Sdpt
                | Method::LearnableProj
                | Method::Unshared
                | Method::Separate
                | Method::Async
                | Method::Stack
        )
    }

    fn uses_inverse(self) -> bool {
        matches!(
            self,
            Method::Sdpt | Method::Unshared | Method::Async | Method::Stack
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Which modality receives attached tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modal {
    Text,
    Image,
    #[default]
    Dual,
}

impl Modal {
    fn text(self) -> bool {
        matches!(self, Modal::Text | Modal::Dual)
    }

    fn image(self) -> bool {
        matches!(self, Modal::Image | Modal::Dual)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    /// Tokens per inserted layer.
    pub k: usize,
    /// Inserted layers; `None` means every layer.
    pub layers: Option<LayerSet>,
    pub init_low: f64,
    pub init_high: f64,
    pub mask_self_similarity: bool,
    /// Sides receiving tokens for the learnable-projection method.
    pub modal: Modal,
    /// Adapter bottleneck width.
    pub adapter_rank: usize,
    /// Epochs per phase for the asynchronous method; defaults to `epochs / 2`.
    pub phase_epochs: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds trainable initialization and the shuffle.
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            k: 4,
            layers: None,
            init_low: -1.0,
            init_high: 1.0,
            mask_self_similarity: false,
            modal: Modal::Dual,
            adapter_rank: 4,
            phase_epochs: None,
            lr: 0.3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn resolved_layers(&self, dims: &Dims) -> LayerSet {
        self.layers
            .clone()
            .unwrap_or_else(|| LayerSet::all(dims.layers))
    }

    pub fn phase_epochs(&self) -> usize {
        self.phase_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self, method: Method, dims: &Dims) -> Result<()> {
        if method.uses_tokens() {
            let layers = self.resolved_layers(dims);
            layers.check(dims.layers)?;
            if self.k > 0 && layers.is_empty() {
                return Err(Error::Config(
                    "k > 0 needs at least one inserted layer".into(),
                ));
            }
            if !(self.init_low < self.init_high) {
                return Err(Error::Config(format!(
                    "init range [{}, {}) is empty",
                    self.init_low, self.init_high
                )));
            }
        }
        if method == Method::Adapter && self.adapter_rank == 0 {
            return Err(Error::Config("adapter_rank must be at least 1".into()));
        }
        self.train_config(method).validate()
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        let epochs = match method {
            Method::Async => 2 * self.phase_epochs(),
            Method::ZeroShot => 0,
            _ => self.epochs,
        };
        TrainConfig {
            lr: self.lr,
            epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

fn adapter_name(layer: usize, side: &str, part: &str) -> String {
    format!("adapter.{layer}.{side}.{part}")
}

/// A method bound to a checkpoint, ready to initialize, train and evaluate.
#[derive(Clone, Debug)]
pub struct Recipe<'a> {
    pub ckpt: &'a FusionCheckpoint,
    pub method: Method,
    pub cfg: TuneConfig,
    layers: LayerSet,
    proj: Option<InverseProjections>,
    base_adapters: Option<TensorMap>,
}

impl<'a> Recipe<'a> {
    /// `base_adapters` are frozen `adapter.*` tensors applied before any
    /// trainable wiring; required for [`Method::Stack`].
    pub fn new(
        ckpt: &'a FusionCheckpoint,
        method: Method,
        cfg: TuneConfig,
        base_adapters: Option<TensorMap>,
    ) -> Result<Self> {
        cfg.validate(method, &ckpt.dims)?;
        if method == Method::Stack && base_adapters.is_none() {
            return Err(Error::Config(
                "stacking needs a tuned adapter artifact".into(),
            ));
        }
        let layers = if method.uses_tokens() {
            cfg.resolved_layers(&ckpt.dims)
        } else {
            LayerSet::default()
        };
        let proj = if method.uses_inverse() {
            Some(build_inverse_projections(ckpt, &layers)?)
        } else {
            None
        };
        let recipe = Self {
            ckpt,
            method,
            cfg,
            layers,
            proj,
            base_adapters,
        };
        if let Some(base) = &recipe.base_adapters {
            recipe.check_adapters(base)?;
        }
        Ok(recipe)
    }

    pub fn layers(&self) -> &LayerSet {
        &self.layers
    }

    pub fn base_adapters(&self) -> Option<&TensorMap> {
        self.base_adapters.as_ref()
    }

    pub fn inverse_projections(&self) -> Option<&InverseProjections> {
        self.proj.as_ref()
    }

    fn token_layers(&self) -> impl Iterator<Item = usize> + '_ {
        let active = self.cfg.k > 0;
        self.layers.iter().filter(move |_| active)
    }

    /// Seeded initial values of every trainable tensor.
    pub fn init_params(&self) -> TensorMap {
        let dims = &self.ckpt.dims;
        let (k, d, dt, di) = (self.cfg.k, dims.d_fusion, dims.d_text, dims.d_image);
        let (lo, hi) = (self.cfg.init_low, self.cfg.init_high);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut out = TensorMap::new();
        let p = self.method.prefix();
        let layers: Vec<usize> = self.token_layers().collect();
        match self.method {
            Method::ZeroShot => {}
            Method::Sdpt | Method::Async | Method::Stack => {
                for l in layers {
                    out.insert(token_name(l), uniform(&mut rng, k, d, lo, hi));
                }
            }
            Method::Unshared => {
                for l in layers {
                    out.insert(format!("{p}.{l}.Z_T"), uniform(&mut rng, k, d, lo, hi));
                    out.insert(format!("{p}.{l}.Z_I"), uniform(&mut rng, k, d, lo, hi));
                }
            }
            Method::Separate => {
                for l in layers {
                    out.insert(format!("{p}.{l}.S_T"), uniform(&mut rng, k, dt, lo, hi));
                    out.insert(format!("{p}.{l}.S_I"), uniform(&mut rng, k, di, lo, hi));
                }
            }
            Method::LearnableProj => {
                let bound = 1.0 / (d as f64).sqrt();
                for l in layers {
                    out.insert(format!("{p}.{l}.Z"), uniform(&mut rng, k, d, lo, hi));
                    if self.cfg.modal.text() {
                        out.insert(
                            format!("{p}.{l}.A_T"),
                            uniform(&mut rng, d, dt, -bound, bound),
                        );
                        out.insert(format!("{p}.{l}.c_T"), Matrix::zeros(1, dt));
                    }
                    if self.cfg.modal.image() {
                        out.insert(
                            format!("{p}.{l}.A_I"),
                            uniform(&mut rng, d, di, -bound, bound),
                        );
                        out.insert(format!("{p}.{l}.c_I"), Matrix::zeros(1, di));
                    }
                }
            }
            Method::LinearProbe => {
                out.insert("head.H_R", self.ckpt.head.h_r.clone());
                out.insert("head.H_P", self.ckpt.head.h_p.clone());
            }
            Method::Adapter => {
                let r = self.cfg.adapter_rank;
                for l in 1..=dims.layers {
                    for (side, dim) in [("text", dt), ("image", di)] {
                        let bound = 1.0 / (dim as f64).sqrt();
                        out.insert(
                            adapter_name(l, side, "down"),
                            uniform(&mut rng, dim, r, -bound, bound),
                        );
                        out.insert(adapter_name(l, side, "b_down"), Matrix::zeros(1, r));
                        out.insert(adapter_name(l, side, "up"), Matrix::zeros(r, dim));
                        out.insert(adapter_name(l, side, "b_up"), Matrix::zeros(1, dim));
                    }
                }
            }
        }
        out
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> usize {
        let dims = &self.ckpt.dims;
        let (k, d, dt, di) = (self.cfg.k, dims.d_fusion, dims.d_text, dims.d_image);
        let inserted = self.token_layers().count();
        match self.method {
            Method::ZeroShot => 0,
            Method::Sdpt | Method::Async | Method::Stack => inserted * k * d,
            Method::Unshared => 2 * inserted * k * d,
            Method::Separate => inserted * k * (dt + di),
            Method::LearnableProj => {
                let text = if self.cfg.modal.text() {
                    d * dt + dt
                } else {
                    0
                };
                let image = if self.cfg.modal.image() {
                    d * di + di
                } else {
                    0
                };
                inserted * (k * d + text + image)
            }
            Method::LinearProbe => (di + dt) * dims.d_head(),
            Method::Adapter => {
                let r = self.cfg.adapter_rank;
                dims.layers
                    * [dt, di]
                        .iter()
                        .map(|&dim| 2 * dim * r + r + dim)
                        .sum::<usize>()
            }
        }
    }

    /// Which sides receive attached tokens at `stage`.
    pub fn sides(&self, stage: Stage) -> Modal {
        match (self.method, stage) {
            (Method::Async, Stage::Train(e)) if e < self.cfg.phase_epochs() => Modal::Text,
            (Method::Async, Stage::Train(_)) => Modal::Image,
            (Method::LearnableProj, _) => self.cfg.modal,
            _ => Modal::Dual,
        }
    }

    fn check_adapters(&self, tensors: &TensorMap) -> Result<()> {
        let dims = &self.ckpt.dims;
        for l in 1..=dims.layers {
            for (side, dim) in [("text", dims.d_text), ("image", dims.d_image)] {
                let down = tensors.require(&adapter_name(l, side, "down"))?;
                let r = down.cols();
                for (part, shape) in [
                    ("down", (dim, r)),
                    ("b_down", (1, r)),
                    ("up", (r, dim)),
                    ("b_up", (1, dim)),
                ] {
                    let name = adapter_name(l, side, part);
                    let t = tensors.require(&name)?;
                    if t.shape() != shape {
                        return Err(Error::ArtifactMismatch(format!(
                            "{name} is {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn adapter_set(
        &self,
        tape: &mut Tape,
        tensors: &TensorMap,
        trainable: bool,
    ) -> Result<Vec<AdapterLayerNodes>> {
        let node = |tape: &mut Tape, name: String| -> Result<NodeId> {
            let v = tensors.require(&name)?;
            Ok(if trainable {
                tape.param(name, v)?
            } else {
                tape.constant(v.clone())
            })
        };
        let mut set = Vec::with_capacity(self.ckpt.dims.layers);
        for l in 1..=self.ckpt.dims.layers {
            let side = |tape: &mut Tape, s: &str| -> Result<AdapterNodes> {
                Ok(AdapterNodes {
                    down: node(tape, adapter_name(l, s, "down"))?,
                    b_down: node(tape, adapter_name(l, s, "b_down"))?,
                    up: node(tape, adapter_name(l, s, "up"))?,
                    b_up: node(tape, adapter_name(l, s, "b_up"))?,
                })
            };
            let text = side(tape, "text")?;
            let image = side(tape, "image")?;
            set.push(AdapterLayerNodes {
                text: Some(text),
                image: Some(image),
            });
        }
        Ok(set)
    }

    /// Records the backbone and this method's wiring; every tensor in `params`
    /// becomes a named trainable leaf.
    pub fn record(&self, tape: &mut Tape, params: &TensorMap, stage: Stage) -> Result<Network> {
        let dims = &self.ckpt.dims;
        let backbone_trainable = if self.method == Method::LinearProbe {
            params.clone()
        } else {
            TensorMap::new()
        };
        let backbone = self.ckpt.bind(tape, &backbone_trainable)?;
        let mut wiring = Wiring::plain();
        wiring.attachments = vec![None; dims.layers];
        if let Some(base) = &self.base_adapters {
            wiring.adapters.push(self.adapter_set(tape, base, false)?);
        }
        if self.method == Method::Adapter {
            wiring.adapters.push(self.adapter_set(tape, params, true)?);
        }

        let leaf = |tape: &mut Tape, name: String| -> Result<NodeId> {
            let v = params.require(&name)?;
            Ok(tape.param(name, v)?)
        };
        let sides = self.sides(stage);
        let p = self.method.prefix();
        for l in self.token_layers() {
            let (text, image) = match self.method {
                Method::Sdpt | Method::Async | Method::Stack => {
                    let inv = self
                        .proj
                        .as_ref()
                        .expect("inverse built for token method")
                        .layer(l)?;
                    let z = leaf(tape, token_name(l))?;
                    let t = if sides.text() {
                        Some(project_text_on_tape(tape, z, inv)?)
                    } else {
                        None
                    };
                    let i = if sides.image() {
                        Some(project_image_on_tape(tape, z, inv)?)
                    } else {
                        None
                    };
                    (t, i)
                }
                Method::Unshared => {
                    let inv = self
                        .proj
                        .as_ref()
                        .expect("inverse built for token method")
                        .layer(l)?;
                    let zt = leaf(tape, format!("{p}.{l}.Z_T"))?;
                    let zi = leaf(tape, format!("{p}.{l}.Z_I"))?;
                    (
                        Some(project_text_on_tape(tape, zt, inv)?),
                        Some(project_image_on_tape(tape, zi, inv)?),
                    )
                }
                Method::Separate => (
                    Some(leaf(tape, format!("{p}.{l}.S_T"))?),
                    Some(leaf(tape, format!("{p}.{l}.S_I"))?),
                ),
                Method::LearnableProj => {
                    let z = leaf(tape, format!("{p}.{l}.Z"))?;
                    let map = |tape: &mut Tape, s: &str| -> Result<NodeId> {
                        let a = leaf(tape, format!("{p}.{l}.A_{s}"))?;
                        let c = leaf(tape, format!("{p}.{l}.c_{s}"))?;
                        let h = tape.matmul(z, a)?;
                        Ok(tape.add_row(h, c)?)
                    };
                    let t = if sides.text() {
                        Some(map(tape, "T")?)
                    } else {
                        None
                    };
                    let i = if sides.image() {
                        Some(map(tape, "I")?)
                    } else {
                        None
                    };
                    (t, i)
                }
                Method::ZeroShot | Method::LinearProbe | Method::Adapter => (None, None),
            };
            wiring.attachments[l - 1] = Some(Attachment {
                text,
                image,
                mask_self_similarity: self.cfg.mask_self_similarity,
            });
        }
        Ok(Network { backbone, wiring })
    }

    fn build(&self) -> impl FnMut(&mut Tape, &TensorMap, Stage) -> Result<Network> + '_ {
        move |tape, params, stage| self.record(tape, params, stage)
    }

    pub fn predict(&self, params: &TensorMap, data: &[GroundingSample]) -> Result<Vec<Matrix>> {
        predict(params, data, self.build())
    }

    pub fn evaluate(&self, params: &TensorMap, data: &[GroundingSample]) -> Result<EvalMetrics> {
        evaluate(params, data, self.build())
    }

    pub fn attention(&self, params: &TensorMap, sample: &GroundingSample) -> Result<Vec<Matrix>> {
        attention_maps(params, sample, self.build())
    }

    /// Checks that `params` has exactly the trainable names and shapes this
    /// recipe initializes.
    pub fn check_params(&self, params: &TensorMap) -> Result<()> {
        let expected = self.init_params();
        if expected.len() != params.len() {
            return Err(Error::ArtifactMismatch(format!(
                "expected {} trainable tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, m) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::ArtifactMismatch(format!("missing tensor {name}")))?;
            if got.shape() != m.shape() {
                return Err(Error::ArtifactMismatch(format!(
                    "{name} is {:?}, expected {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Trains from [`Recipe::init_params`] and evaluates on `eval` when it is
    /// nonempty. Fails if any frozen tensor changed.
    pub fn tune(
        &self,
        train_data: &[GroundingSample],
        eval: &[GroundingSample],
    ) -> Result<(TensorMap, TuneReport)> {
        let start = Instant::now();
        for s in train_data.iter().chain(eval) {
            s.check(&self.ckpt.dims)?;
        }
        let frozen_before = self.ckpt.tensors();
        let base_before = self.base_adapters.clone();

        let mut params = self.init_params();
        let trainable_params = params.scalar_count();
        debug_assert_eq!(trainable_params, self.param_count());
        let epoch_losses = train(
            &mut params,
            train_data,
            &self.cfg.train_config(self.method),
            self.build(),
        )?;

        if let Some(name) = frozen_before
            .changed_names(&self.ckpt.tensors())
            .into_iter()
            .next()
        {
            return Err(Error::FrozenTensorChanged(name));
        }
        if let (Some(before), Some(after)) = (&base_before, &self.base_adapters) {
            if let Some(name) = before.changed_names(after).into_iter().next() {
                return Err(Error::FrozenTensorChanged(name));
            }
        }
        let metrics = if eval.is_empty() {
            None
        } else {
            Some(self.evaluate(&params, eval)?)
        };
        Ok((
            params,
            TuneReport {
                method: self.method,
                epoch_losses,
                trainable_params,
                wall_seconds: start.elapsed().as_secs_f64(),
                metrics,
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub method: Method,
    pub epoch_losses: Vec<f64>,
    pub trainable_params: usize,
    pub wall_seconds: f64,
    /// Metrics on the held-out set, when one was given.
    pub metrics: Option<EvalMetrics>,
}

/// A tuned method on disk: trainable tensors under the method prefix plus, for
/// stacking, the frozen base adapters under `adapter.*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub format_version: u64,
    pub method: Method,
    pub config: TuneConfig,
    pub dims: Dims,
    pub tensors: TensorMap,
}

impl Artifact {
    pub fn new(recipe: &Recipe<'_>, params: &TensorMap) -> Self {
        let mut tensors = params.clone();
        if recipe.method == Method::Stack {
            if let Some(base) = recipe.base_adapters() {
                tensors.extend(base.clone());
            }
        }
        Self {
            format_version: FORMAT_VERSION,
            method: recipe.method,
            config: recipe.cfg.clone(),
            dims: recipe.ckpt.dims,
            tensors,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_versioned(path.as_ref(), FORMAT_VERSION)
    }

    /// Rebuilds the recipe against `ckpt` and splits off the trainables,
    /// validating dims, names and shapes.
    pub fn bind<'a>(&self, ckpt: &'a FusionCheckpoint) -> Result<(Recipe<'a>, TensorMap)> {
        if self.dims != ckpt.dims {
            return Err(Error::ArtifactMismatch(format!(
                "artifact dims {:?} differ from checkpoint dims {:?}",
                self.dims, ckpt.dims
            )));
        }
        let (params, base): (TensorMap, Option<TensorMap>) = if self.method == Method::Stack {
            let params = self.tensors.with_prefix("sdpt.");
            let base = self.tensors.with_prefix("adapter.");
            (params, Some(base))
        } else {
            (self.tensors.clone(), None)
        };
        let recipe = Recipe::new(ckpt, self.method, self.config.clone(), base)?;
        recipe.check_params(&params)?;
        Ok((recipe, params))
    }
}
