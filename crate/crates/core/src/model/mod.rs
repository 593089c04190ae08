//! The fusion encoder: per-modality residual MLP encoders coupled at every depth
//! by single-head cross attention, followed by a dot-product alignment head.

mod forward;
mod io;
mod loss;
mod pretrain;
mod weights;

pub use forward::{
    encoder_layer_forward, encoder_on_tape, forward_on_tape, head_on_tape, model_forward,
    xmha_forward, xmha_on_tape, AdapterLayerNodes, AdapterNodes, Attachment, ForwardTrace, Wiring,
    XmhaOutput, XmhaTrace,
};
pub use io::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointFile};
pub use loss::{alignment_loss, check_binary};
pub use pretrain::{pretrain, pretrain_tensor_names, PretrainConfig, PretrainReport};
pub use weights::{
    BoundBackbone, EncoderLayer, EncoderNodes, FusionCheckpoint, Head, HeadNodes, XmhaLayer,
    XmhaNodes, FORMAT_VERSION, QUERY_RANK_TOLERANCE,
};

pub(crate) use weights::uniform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model dimensions. `layers` may be 0, which leaves only the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Maximum text tokens per sample.
    pub n_max: usize,
    /// Maximum image tokens per sample.
    pub m_max: usize,
    #[serde(rename = "d_T")]
    pub d_text: usize,
    #[serde(rename = "d_I")]
    pub d_image: usize,
    /// Shared fusion (query) dimension.
    #[serde(rename = "d")]
    pub d_fusion: usize,
    #[serde(rename = "L")]
    pub layers: usize,
}

impl Dims {
    pub fn new(
        n_max: usize,
        m_max: usize,
        d_text: usize,
        d_image: usize,
        d_fusion: usize,
        layers: usize,
    ) -> Result<Self> {
        let dims = Self {
            n_max,
            m_max,
            d_text,
            d_image,
            d_fusion,
            layers,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// Desk-scale defaults: `d_T=32, d_I=48, d=16, L=2, n<=12, m<=20`.
    pub fn desk() -> Self {
        Self {
            n_max: 12,
            m_max: 20,
            d_text: 32,
            d_image: 48,
            d_fusion: 16,
            layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("n_max", self.n_max),
            ("m_max", self.m_max),
            ("d_T", self.d_text),
            ("d_I", self.d_image),
            ("d", self.d_fusion),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!(
                "dimension {name} must be at least 1"
            )));
        }
        if self.d_fusion > self.d_text || self.d_fusion > self.d_image {
            return Err(Error::Config(format!(
                "fusion dim d={} must not exceed d_T={} or d_I={}",
                self.d_fusion, self.d_text, self.d_image
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_text.min(self.d_image)
    }

    pub fn hidden_text(&self) -> usize {
        2 * self.d_text
    }

    pub fn hidden_image(&self) -> usize {
        2 * self.d_image
    }
}
