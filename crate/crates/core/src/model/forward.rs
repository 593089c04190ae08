use super::weights::{
    BoundBackbone, EncoderLayer, EncoderNodes, FusionCheckpoint, HeadNodes, XmhaLayer, XmhaNodes,
};
use crate::error::{Error, Result};
use crate::numerics::{Mask, Matrix, NodeId, Tape, MASK_SENTINEL};
use crate::tensors::TensorMap;

/// Extra rows prepended to the token streams at one fusion layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct Attachment {
    /// `k_T x d_T` rows prepended to the text stream.
    pub text: Option<NodeId>,
    /// `k_I x d_I` rows prepended to the image stream.
    pub image: Option<NodeId>,
    /// Mask the attention block where attached image rows meet attached text
    /// columns. Only takes effect when both sides are attached.
    pub mask_self_similarity: bool,
}

/// Bottleneck adapter for one modality at one layer:
/// `x + tanh(x down + b_down) up + b_up`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterNodes {
    pub down: NodeId,
    pub b_down: NodeId,
    pub up: NodeId,
    pub b_up: NodeId,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AdapterLayerNodes {
    pub text: Option<AdapterNodes>,
    pub image: Option<AdapterNodes>,
}

/// How prompts and adapters hook into the frozen fusion stack.
#[derive(Clone, Debug, Default)]
pub struct Wiring {
    /// Indexed by 0-based layer; missing or `None` entries run unprompted.
    pub attachments: Vec<Option<Attachment>>,
    /// Adapter sets applied in order after each encoder layer. Each set is
    /// indexed by 0-based layer.
    pub adapters: Vec<Vec<AdapterLayerNodes>>,
}

impl Wiring {
    pub fn plain() -> Self {
        Self::default()
    }

    fn attachment(&self, layer: usize) -> Option<&Attachment> {
        self.attachments.get(layer).and_then(Option::as_ref)
    }
}

/// Nodes produced by one cross-attention block.
#[derive(Clone, Copy, Debug)]
pub struct XmhaTrace {
    pub p_i2t: NodeId,
    pub r_t2i: NodeId,
    /// Scaled scores `R_q P_q^T / sqrt(d)` before masking.
    pub scores: NodeId,
    /// Row-softmax of the (masked) scores; rows are image tokens.
    pub weights: NodeId,
    pub prefix_text: usize,
    pub prefix_image: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: NodeId,
    pub layers: Vec<XmhaTrace>,
}

/// Plain-matrix result of [`xmha_forward`].
#[derive(Clone, Debug)]
pub struct XmhaOutput {
    pub p_i2t: Matrix,
    pub r_t2i: Matrix,
    /// Scaled scores before masking and softmax, `m x n`.
    pub attn: Matrix,
    /// `softmax_rows` of the masked scores.
    pub weights: Matrix,
}

pub fn xmha_on_tape(
    tape: &mut Tape,
    p: NodeId,
    r: NodeId,
    w: &XmhaNodes,
    mask: Option<&Mask>,
) -> Result<XmhaTrace> {
    let pq = tape.matmul(p, w.wq_t)?;
    let pq = tape.add_row(pq, w.bq_t)?;
    let rq = tape.matmul(r, w.wq_i)?;
    let rq = tape.add_row(rq, w.bq_i)?;
    let pq_t = tape.transpose(pq);
    let raw = tape.matmul(rq, pq_t)?;
    let scores = tape.scale(raw, 1.0 / (w.d_fusion as f64).sqrt());
    let masked = match mask {
        Some(m) => tape.masked_fill(scores, m, MASK_SENTINEL)?,
        None => scores,
    };
    let weights = tape.softmax_rows(masked);
    let pv = tape.matmul(p, w.wv_t)?;
    let r_t2i = tape.matmul(weights, pv)?;
    let masked_t = tape.transpose(masked);
    let weights_t = tape.softmax_rows(masked_t);
    let rv = tape.matmul(r, w.wv_i)?;
    let p_i2t = tape.matmul(weights_t, rv)?;
    Ok(XmhaTrace {
        p_i2t,
        r_t2i,
        scores,
        weights,
        prefix_text: 0,
        prefix_image: 0,
    })
}

pub fn encoder_on_tape(tape: &mut Tape, x: NodeId, w: &EncoderNodes) -> Result<NodeId> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.tanh(h);
    let h = tape.matmul(h, w.w2)?;
    let h = tape.add_row(h, w.b2)?;
    Ok(tape.add(x, h)?)
}

pub(crate) fn adapter_on_tape(tape: &mut Tape, x: NodeId, a: &AdapterNodes) -> Result<NodeId> {
    let h = tape.matmul(x, a.down)?;
    let h = tape.add_row(h, a.b_down)?;
    let h = tape.tanh(h);
    let h = tape.matmul(h, a.up)?;
    let h = tape.add_row(h, a.b_up)?;
    Ok(tape.add(x, h)?)
}

/// `(R H_R)(P H_P)^T / sqrt(d_head)`, an `m x n` logit matrix.
pub fn head_on_tape(tape: &mut Tape, p: NodeId, r: NodeId, w: &HeadNodes) -> Result<NodeId> {
    let rh = tape.matmul(r, w.h_r)?;
    let ph = tape.matmul(p, w.h_p)?;
    let ph_t = tape.transpose(ph);
    let raw = tape.matmul(rh, ph_t)?;
    Ok(tape.scale(raw, 1.0 / (w.d_head as f64).sqrt()))
}

fn check_inputs(net: &BoundBackbone, p0: &Matrix, r0: &Matrix) -> Result<()> {
    let d = &net.dims;
    if p0.cols() != d.d_text || r0.cols() != d.d_image {
        return Err(Error::Shape(format!(
            "inputs are text {:?} / image {:?}, model expects {} / {} columns",
            p0.shape(),
            r0.shape(),
            d.d_text,
            d.d_image
        )));
    }
    if p0.rows() == 0 || p0.rows() > d.n_max || r0.rows() == 0 || r0.rows() > d.m_max {
        return Err(Error::Shape(format!(
            "token counts n={} m={} outside 1..={} / 1..={}",
            p0.rows(),
            r0.rows(),
            d.n_max,
            d.m_max
        )));
    }
    Ok(())
}

/// Deep fusion loop on a tape. At each layer the attached rows (if any) are
/// prepended, the cross-attention and encoder run on the extended streams, and the
/// leading attached rows are sliced off again before the next layer.
pub fn forward_on_tape(
    tape: &mut Tape,
    net: &BoundBackbone,
    wiring: &Wiring,
    p0: &Matrix,
    r0: &Matrix,
) -> Result<ForwardTrace> {
    check_inputs(net, p0, r0)?;
    let (n, m) = (p0.rows(), r0.rows());
    let mut p = tape.constant(p0.clone());
    let mut r = tape.constant(r0.clone());
    let mut layers = Vec::with_capacity(net.dims.layers);

    for l in 0..net.dims.layers {
        let att = wiring.attachment(l);
        let (p_hat, kt) = match att.and_then(|a| a.text) {
            Some(z) => (tape.concat_rows(z, p)?, tape.value(z).rows()),
            None => (p, 0),
        };
        let (r_hat, ki) = match att.and_then(|a| a.image) {
            Some(z) => (tape.concat_rows(z, r)?, tape.value(z).rows()),
            None => (r, 0),
        };
        let mask = match att {
            Some(a) if a.mask_self_similarity && kt > 0 && ki > 0 => {
                Some(Mask::top_left_block(ki + m, kt + n, ki, kt))
            }
            _ => None,
        };

        let mut x = xmha_on_tape(tape, p_hat, r_hat, &net.xmha[l], mask.as_ref())?;
        x.prefix_text = kt;
        x.prefix_image = ki;

        let p_in = tape.add(p_hat, x.p_i2t)?;
        let mut p_next = encoder_on_tape(tape, p_in, &net.text[l])?;
        let r_in = tape.add(r_hat, x.r_t2i)?;
        let mut r_next = encoder_on_tape(tape, r_in, &net.image[l])?;
        for set in &wiring.adapters {
            if let Some(layer) = set.get(l) {
                if let Some(a) = &layer.text {
                    p_next = adapter_on_tape(tape, p_next, a)?;
                }
                if let Some(a) = &layer.image {
                    r_next = adapter_on_tape(tape, r_next, a)?;
                }
            }
        }

        p = if kt > 0 {
            tape.slice_rows(p_next, kt, kt + n)?
        } else {
            p_next
        };
        r = if ki > 0 {
            tape.slice_rows(r_next, ki, ki + m)?
        } else {
            r_next
        };
        layers.push(x);
    }

    let logits = head_on_tape(tape, p, r, &net.head)?;
    Ok(ForwardTrace { logits, layers })
}

fn bind_xmha(tape: &mut Tape, w: &XmhaLayer) -> XmhaNodes {
    XmhaNodes {
        wq_t: tape.constant(w.wq_t.clone()),
        bq_t: tape.constant(w.bq_t.clone()),
        wq_i: tape.constant(w.wq_i.clone()),
        bq_i: tape.constant(w.bq_i.clone()),
        wv_t: tape.constant(w.wv_t.clone()),
        wv_i: tape.constant(w.wv_i.clone()),
        d_fusion: w.wq_t.cols(),
    }
}

/// One cross-attention block on plain matrices. `mask`, when given, is `m x n`
/// and is applied to the scores before both softmaxes.
pub fn xmha_forward(
    p: &Matrix,
    r: &Matrix,
    w: &XmhaLayer,
    mask: Option<&Mask>,
) -> Result<XmhaOutput> {
    if let Some(mk) = mask {
        if mk.shape() != (r.rows(), p.rows()) {
            return Err(Error::Shape(format!(
                "mask {:?} does not match attention {:?}",
                mk.shape(),
                (r.rows(), p.rows())
            )));
        }
    }
    let mut tape = Tape::new();
    let nodes = bind_xmha(&mut tape, w);
    let pn = tape.constant(p.clone());
    let rn = tape.constant(r.clone());
    let t = xmha_on_tape(&mut tape, pn, rn, &nodes, mask)?;
    Ok(XmhaOutput {
        p_i2t: tape.value(t.p_i2t).clone(),
        r_t2i: tape.value(t.r_t2i).clone(),
        attn: tape.value(t.scores).clone(),
        weights: tape.value(t.weights).clone(),
    })
}

pub fn encoder_layer_forward(x: &Matrix, w: &EncoderLayer) -> Result<Matrix> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes {
        w1: tape.constant(w.w1.clone()),
        b1: tape.constant(w.b1.clone()),
        w2: tape.constant(w.w2.clone()),
        b2: tape.constant(w.b2.clone()),
    };
    let xn = tape.constant(x.clone());
    let out = encoder_on_tape(&mut tape, xn, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Unprompted forward pass, returning `m x n` alignment logits.
pub fn model_forward(p0: &Matrix, r0: &Matrix, ckpt: &FusionCheckpoint) -> Result<Matrix> {
    let mut tape = Tape::new();
    let net = ckpt.bind(&mut tape, &TensorMap::new())?;
    let trace = forward_on_tape(&mut tape, &net, &Wiring::plain(), p0, r0)?;
    Ok(tape.value(trace.logits).clone())
}
