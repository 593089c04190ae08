//! Unified prototype tokens in the fusion space, mapped into each modality by
//! fixed pseudo-inverses of the query transforms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::methods::{Method, Recipe, TuneConfig, TuneReport};
use crate::model::{
    forward_on_tape, Attachment, Dims, FusionCheckpoint, Wiring, QUERY_RANK_TOLERANCE,
};
use crate::numerics::{pinv_default, singular_values, Matrix, NodeId, Tape};
use crate::tensors::TensorMap;

/// Ordered set of 1-based fusion layers, 1 being closest to the input.
///
/// Parses comma-separated singletons and inclusive ranges written `i→j` or
/// `i->j`, e.g. `"1→2"` or `"1,3->4"`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LayerSet(BTreeSet<usize>);

impl LayerSet {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Self {
        Self(layers.into_iter().collect())
    }

    /// Every layer `1..=count`.
    pub fn all(count: usize) -> Self {
        Self::new(1..=count)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn check(&self, layers: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l == 0 || l > layers) {
            Some(l) => Err(Error::Config(format!("layer {l} outside 1..={layers}"))),
            None => Ok(()),
        }
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| -> Result<usize> {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer index {t:?} in {s:?}")))
        };
        let mut out = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let range = part.split_once('→').or_else(|| part.split_once("->"));
            match range {
                Some((a, b)) => {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(Error::Config(format!("descending layer range {part:?}")));
                    }
                    out.extend(a..=b);
                }
                None => {
                    out.insert(num(part)?);
                }
            }
        }
        Ok(Self(out))
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v: Vec<usize> = self.iter().collect();
        let mut parts = Vec::new();
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j + 1 < v.len() && v[j + 1] == v[j] + 1 {
                j += 1;
            }
            parts.push(if j > i {
                format!("{}→{}", v[i], v[j])
            } else {
                v[i].to_string()
            });
            i = j + 1;
        }
        f.write_str(&parts.join(","))
    }
}

impl Serialize for LayerSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pseudo-inverse query transforms for one layer, with the query biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInverse {
    /// `d x d_T`
    pub wq_t_pinv: Matrix,
    /// `d x d_I`
    pub wq_i_pinv: Matrix,
    pub bq_t: Matrix,
    pub bq_i: Matrix,
}

/// Computed once per tuning run; holds no trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseProjections {
    layers: BTreeMap<usize, LayerInverse>,
}

impl InverseProjections {
    pub fn layer(&self, layer: usize) -> Result<&LayerInverse> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no inverse projection for layer {layer}")))
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }
}

pub fn build_inverse_projections(
    ckpt: &FusionCheckpoint,
    layers: &LayerSet,
) -> Result<InverseProjections> {
    layers.check(ckpt.dims.layers)?;
    let mut out = BTreeMap::new();
    for l in layers.iter() {
        let x = &ckpt.xmha[l - 1];
        for (name, w) in [("Wq_t", &x.wq_t), ("Wq_i", &x.wq_i)] {
            let smin = singular_values(w)?.last().copied().unwrap_or(0.0);
            if !(smin > QUERY_RANK_TOLERANCE) {
                return Err(Error::DegenerateCheckpoint(format!(
                    "xmha.{l}.{name} has smallest singular value {smin:e}"
                )));
            }
        }
        out.insert(
            l,
            LayerInverse {
                wq_t_pinv: pinv_default(&x.wq_t)?,
                wq_i_pinv: pinv_default(&x.wq_i)?,
                bq_t: x.bq_t.clone(),
                bq_i: x.bq_i.clone(),
            },
        );
    }
    Ok(InverseProjections { layers: out })
}

/// `(Z - Bq_t) pinv(Wq_t)` and `(Z - Bq_i) pinv(Wq_i)`.
pub fn project_prototypes(
    z: &Matrix,
    proj: &InverseProjections,
    layer: usize,
) -> Result<(Matrix, Matrix)> {
    let inv = proj.layer(layer)?;
    let zt = z.sub_row(&inv.bq_t)?.matmul(&inv.wq_t_pinv)?;
    let zi = z.sub_row(&inv.bq_i)?.matmul(&inv.wq_i_pinv)?;
    Ok((zt, zi))
}

/// Text-side projection recorded on a tape; the inverse is a constant.
pub fn project_text_on_tape(tape: &mut Tape, z: NodeId, inv: &LayerInverse) -> Result<NodeId> {
    affine_inverse(tape, z, &inv.bq_t, &inv.wq_t_pinv)
}

pub fn project_image_on_tape(tape: &mut Tape, z: NodeId, inv: &LayerInverse) -> Result<NodeId> {
    affine_inverse(tape, z, &inv.bq_i, &inv.wq_i_pinv)
}

fn affine_inverse(tape: &mut Tape, z: NodeId, bias: &Matrix, w_pinv: &Matrix) -> Result<NodeId> {
    let neg_b = tape.constant(bias.scale(-1.0));
    let w = tape.constant(w_pinv.clone());
    let shifted = tape.add_row(z, neg_b)?;
    Ok(tape.matmul(shifted, w)?)
}

/// Trainable scalars of the prototype tokens: `|layers| * k * d`.
pub fn param_count(k: usize, layers: &LayerSet, dims: &Dims) -> usize {
    layers.len() * k * dims.d_fusion
}

/// Tensor name of the tokens for a 1-based layer.
pub fn token_name(layer: usize) -> String {
    format!("sdpt.{layer}.Z")
}

/// One `k x d` token matrix per inserted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTokens {
    tokens: BTreeMap<usize, Matrix>,
}

impl PrototypeTokens {
    pub fn new(tokens: BTreeMap<usize, Matrix>) -> Result<Self> {
        let mut shape = None;
        for (l, z) in &tokens {
            if *shape.get_or_insert(z.shape()) != z.shape() {
                return Err(Error::Shape(format!(
                    "layer {l} tokens are {:?}, others {shape:?}",
                    z.shape()
                )));
            }
            if !z.is_finite() {
                return Err(Error::Config(format!("layer {l} tokens are not finite")));
            }
        }
        Ok(Self { tokens })
    }

    /// Reads `sdpt.{l}.Z` tensors.
    pub fn from_tensors(tensors: &TensorMap) -> Result<Self> {
        let mut tokens = BTreeMap::new();
        for (name, m) in tensors.iter() {
            let layer = name
                .strip_prefix("sdpt.")
                .and_then(|r| r.strip_suffix(".Z"))
                .and_then(|l| l.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("unexpected prompt tensor {name}")))?;
            tokens.insert(layer, m.clone());
        }
        Self::new(tokens)
    }

    pub fn to_tensors(&self) -> TensorMap {
        self.tokens
            .iter()
            .map(|(l, z)| (token_name(*l), z.clone()))
            .collect()
    }

    pub fn get(&self, layer: usize) -> Option<&Matrix> {
        self.tokens.get(&layer)
    }

    pub fn layers(&self) -> LayerSet {
        LayerSet::new(self.tokens.keys().copied())
    }

    pub fn k(&self) -> usize {
        self.tokens.values().next().map_or(0, Matrix::rows)
    }
}

/// Prompted forward pass on plain matrices. Tokens with zero rows leave the
/// layer unprompted, so `k = 0` reproduces the plain model bit for bit.
pub fn sdpt_forward(
    p0: &Matrix,
    r0: &Matrix,
    ckpt: &FusionCheckpoint,
    tokens: &PrototypeTokens,
    proj: &InverseProjections,
    mask_self_similarity: bool,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let net = ckpt.bind(&mut tape, &TensorMap::new())?;
    let mut wiring = Wiring::plain();
    wiring.attachments = vec![None; ckpt.dims.layers];
    for l in tokens.layers().iter() {
        let z = &tokens.tokens[&l];
        if z.rows() == 0 {
            continue;
        }
        if l == 0 || l > ckpt.dims.layers {
            return Err(Error::Config(format!(
                "tokens for layer {l} outside 1..={}",
                ckpt.dims.layers
            )));
        }
        let zn = tape.constant(z.clone());
        let inv = proj.layer(l)?;
        wiring.attachments[l - 1] = Some(Attachment {
            text: Some(project_text_on_tape(&mut tape, zn, inv)?),
            image: Some(project_image_on_tape(&mut tape, zn, inv)?),
            mask_self_similarity,
        });
    }
    let trace = forward_on_tape(&mut tape, &net, &wiring, p0, r0)?;
    Ok(tape.value(trace.logits).clone())
}

/// Trains prototype tokens only; the backbone stays frozen.
pub fn tune(
    ckpt: &FusionCheckpoint,
    train: &[GroundingSample],
    eval: &[GroundingSample],
    cfg: &TuneConfig,
) -> Result<(PrototypeTokens, TuneReport)> {
    let recipe = Recipe::new(ckpt, Method::Sdpt, cfg.clone(), None)?;
    let (params, report) = recipe.tune(train, eval)?;
    Ok((PrototypeTokens::from_tensors(&params)?, report))
}
