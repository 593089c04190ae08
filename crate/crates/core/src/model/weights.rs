use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dims;
use crate::error::{Error, Result};
use crate::numerics::{singular_values, Matrix, NodeId, Tape};
use crate::tensors::TensorMap;

pub const FORMAT_VERSION: u64 = 1;

/// Smallest singular value a query transform may have in an emitted checkpoint.
pub const QUERY_RANK_TOLERANCE: f64 = 1e-8;

/// Token-wise residual MLP: `x + tanh(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl EncoderLayer {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(dim, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, dim),
            b2: Matrix::zeros(1, dim),
        }
    }

    fn init(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Self {
            w1: uniform_fan_in(rng, dim, hidden, dim),
            b1: uniform_fan_in(rng, 1, hidden, dim),
            w2: uniform_fan_in(rng, hidden, dim, hidden),
            b2: uniform_fan_in(rng, 1, dim, hidden),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn check(&self, name: &str, dim: usize) -> Result<()> {
        let h = self.hidden();
        expect_shape(&format!("{name}.W1"), &self.w1, (dim, h))?;
        expect_shape(&format!("{name}.b1"), &self.b1, (1, h))?;
        expect_shape(&format!("{name}.W2"), &self.w2, (h, dim))?;
        expect_shape(&format!("{name}.b2"), &self.b2, (1, dim))
    }
}

/// Single-head cross attention weights. Value transforms cross modalities so the
/// coupled messages land in the receiving stream's space.
#[derive(Clone, Debug, PartialEq)]
pub struct XmhaLayer {
    /// `d_T x d`
    pub wq_t: Matrix,
    pub bq_t: Matrix,
    /// `d_I x d`
    pub wq_i: Matrix,
    pub bq_i: Matrix,
    /// `d_T x d_I`
    pub wv_t: Matrix,
    /// `d_I x d_T`
    pub wv_i: Matrix,
}

impl XmhaLayer {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            wq_t: Matrix::zeros(dims.d_text, dims.d_fusion),
            bq_t: Matrix::zeros(1, dims.d_fusion),
            wq_i: Matrix::zeros(dims.d_image, dims.d_fusion),
            bq_i: Matrix::zeros(1, dims.d_fusion),
            wv_t: Matrix::zeros(dims.d_text, dims.d_image),
            wv_i: Matrix::zeros(dims.d_image, dims.d_text),
        }
    }

    fn init(rng: &mut ChaCha8Rng, dims: &Dims) -> Self {
        let (dt, di, d) = (dims.d_text, dims.d_image, dims.d_fusion);
        Self {
            wq_t: uniform_fan_in(rng, dt, d, dt),
            bq_t: uniform_fan_in(rng, 1, d, dt),
            wq_i: uniform_fan_in(rng, di, d, di),
            bq_i: uniform_fan_in(rng, 1, d, di),
            wv_t: uniform_fan_in(rng, dt, di, dt),
            wv_i: uniform_fan_in(rng, di, dt, di),
        }
    }

    fn check(&self, name: &str, dims: &Dims) -> Result<()> {
        let (dt, di, d) = (dims.d_text, dims.d_image, dims.d_fusion);
        expect_shape(&format!("{name}.Wq_t"), &self.wq_t, (dt, d))?;
        expect_shape(&format!("{name}.Bq_t"), &self.bq_t, (1, d))?;
        expect_shape(&format!("{name}.Wq_i"), &self.wq_i, (di, d))?;
        expect_shape(&format!("{name}.Bq_i"), &self.bq_i, (1, d))?;
        expect_shape(&format!("{name}.Wv_t"), &self.wv_t, (dt, di))?;
        expect_shape(&format!("{name}.Wv_i"), &self.wv_i, (di, dt))
    }
}

/// Alignment head projections, `logits = (R H_R)(P H_P)^T / sqrt(d_head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `d_I x d_head`, orthonormal columns at init
    pub h_r: Matrix,
    /// `d_T x d_head`, orthonormal columns at init
    pub h_p: Matrix,
}

/// Every backbone parameter of the fusion encoder plus dimensional metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionCheckpoint {
    pub dims: Dims,
    pub text_layers: Vec<EncoderLayer>,
    pub image_layers: Vec<EncoderLayer>,
    pub xmha: Vec<XmhaLayer>,
    pub head: Head,
    pub rng_seed: u64,
    pub format_version: u64,
}

impl FusionCheckpoint {
    /// Seeded initialization: weights and biases uniform in `±1/sqrt(fan_in)`,
    /// head projections random with orthonormal columns.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text_layers = Vec::with_capacity(dims.layers);
        let mut image_layers = Vec::with_capacity(dims.layers);
        let mut xmha = Vec::with_capacity(dims.layers);
        for _ in 0..dims.layers {
            xmha.push(XmhaLayer::init(&mut rng, &dims));
            text_layers.push(EncoderLayer::init(
                &mut rng,
                dims.d_text,
                dims.hidden_text(),
            ));
            image_layers.push(EncoderLayer::init(
                &mut rng,
                dims.d_image,
                dims.hidden_image(),
            ));
        }
        let head = Head {
            h_r: orthonormal_columns(&mut rng, dims.d_image, dims.d_head()),
            h_p: orthonormal_columns(&mut rng, dims.d_text, dims.d_head()),
        };
        Ok(Self {
            dims,
            text_layers,
            image_layers,
            xmha,
            head,
            rng_seed: seed,
            format_version: FORMAT_VERSION,
        })
    }

    /// All-zero encoder and cross-attention weights with the seeded head. The
    /// forward pass then reduces to the head applied to the raw inputs.
    pub fn zeroed(dims: Dims, seed: u64) -> Result<Self> {
        let mut ckpt = Self::init(dims, seed)?;
        for l in &mut ckpt.text_layers {
            *l = EncoderLayer::zeros(dims.d_text, dims.hidden_text());
        }
        for l in &mut ckpt.image_layers {
            *l = EncoderLayer::zeros(dims.d_image, dims.hidden_image());
        }
        for x in &mut ckpt.xmha {
            *x = XmhaLayer::zeros(&dims);
        }
        Ok(ckpt)
    }

    /// Named view of every tensor. Layer indices in names are 1-based.
    pub fn tensors(&self) -> TensorMap {
        let mut out = TensorMap::new();
        for (i, l) in self.text_layers.iter().enumerate() {
            insert_encoder(&mut out, &format!("text_enc.{}", i + 1), l);
        }
        for (i, l) in self.image_layers.iter().enumerate() {
            insert_encoder(&mut out, &format!("image_enc.{}", i + 1), l);
        }
        for (i, x) in self.xmha.iter().enumerate() {
            let p = format!("xmha.{}", i + 1);
            out.insert(format!("{p}.Wq_t"), x.wq_t.clone());
            out.insert(format!("{p}.Bq_t"), x.bq_t.clone());
            out.insert(format!("{p}.Wq_i"), x.wq_i.clone());
            out.insert(format!("{p}.Bq_i"), x.bq_i.clone());
            out.insert(format!("{p}.Wv_t"), x.wv_t.clone());
            out.insert(format!("{p}.Wv_i"), x.wv_i.clone());
        }
        out.insert("head.H_R", self.head.h_r.clone());
        out.insert("head.H_P", self.head.h_p.clone());
        out
    }

    /// Rebuilds a checkpoint from named tensors, checking every shape.
    pub fn from_tensors(dims: Dims, rng_seed: u64, tensors: &TensorMap) -> Result<Self> {
        dims.validate()?;
        let take = |name: String| -> Result<Matrix> {
            tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))
        };
        let encoder = |prefix: String| -> Result<EncoderLayer> {
            Ok(EncoderLayer {
                w1: take(format!("{prefix}.W1"))?,
                b1: take(format!("{prefix}.b1"))?,
                w2: take(format!("{prefix}.W2"))?,
                b2: take(format!("{prefix}.b2"))?,
            })
        };
        let mut text_layers = Vec::new();
        let mut image_layers = Vec::new();
        let mut xmha = Vec::new();
        for i in 1..=dims.layers {
            text_layers.push(encoder(format!("text_enc.{i}"))?);
            image_layers.push(encoder(format!("image_enc.{i}"))?);
            xmha.push(XmhaLayer {
                wq_t: take(format!("xmha.{i}.Wq_t"))?,
                bq_t: take(format!("xmha.{i}.Bq_t"))?,
                wq_i: take(format!("xmha.{i}.Wq_i"))?,
                bq_i: take(format!("xmha.{i}.Bq_i"))?,
                wv_t: take(format!("xmha.{i}.Wv_t"))?,
                wv_i: take(format!("xmha.{i}.Wv_i"))?,
            });
        }
        let ckpt = Self {
            dims,
            text_layers,
            image_layers,
            xmha,
            head: Head {
                h_r: take("head.H_R".into())?,
                h_p: take("head.H_P".into())?,
            },
            rng_seed,
            format_version: FORMAT_VERSION,
        };
        let expected = ckpt.tensors().len();
        if tensors.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, expected {expected}",
                tensors.len()
            )));
        }
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    /// Copy with the named tensors replaced.
    pub fn with_tensors(&self, replacements: &TensorMap) -> Result<Self> {
        let mut all = self.tensors();
        for (name, value) in replacements.iter() {
            if !all.contains(name) {
                return Err(Error::Config(format!("unknown backbone tensor {name}")));
            }
            all.insert(name.clone(), value.clone());
        }
        Self::from_tensors(self.dims, self.rng_seed, &all)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = &self.dims;
        d.validate()?;
        if self.text_layers.len() != d.layers
            || self.image_layers.len() != d.layers
            || self.xmha.len() != d.layers
        {
            return Err(Error::Shape(format!(
                "expected {} layers of each kind, found text={} image={} xmha={}",
                d.layers,
                self.text_layers.len(),
                self.image_layers.len(),
                self.xmha.len()
            )));
        }
        for i in 0..d.layers {
            self.text_layers[i].check(&format!("text_enc.{}", i + 1), d.d_text)?;
            self.image_layers[i].check(&format!("image_enc.{}", i + 1), d.d_image)?;
            self.xmha[i].check(&format!("xmha.{}", i + 1), d)?;
        }
        expect_shape("head.H_R", &self.head.h_r, (d.d_image, d.d_head()))?;
        expect_shape("head.H_P", &self.head.h_p, (d.d_text, d.d_head()))
    }

    /// Smallest singular value over all query transforms, with the tensor name.
    pub fn min_query_singular_value(&self) -> Result<(String, f64)> {
        let mut worst = (String::new(), f64::INFINITY);
        for (i, x) in self.xmha.iter().enumerate() {
            for (name, w) in [("Wq_t", &x.wq_t), ("Wq_i", &x.wq_i)] {
                let smin = singular_values(w)?.last().copied().unwrap_or(0.0);
                if smin < worst.1 {
                    worst = (format!("xmha.{}.{name}", i + 1), smin);
                }
            }
        }
        Ok(worst)
    }

    /// Shapes plus the full-column-rank requirement on every query transform.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if self.dims.layers == 0 {
            return Ok(());
        }
        let (name, smin) = self.min_query_singular_value()?;
        if !(smin > QUERY_RANK_TOLERANCE) {
            return Err(Error::DegenerateCheckpoint(format!(
                "{name} has smallest singular value {smin:e} <= {QUERY_RANK_TOLERANCE:e}"
            )));
        }
        Ok(())
    }

    /// Records every tensor on `tape`: as a trainable leaf when `trainable` holds
    /// a tensor of the same name (its value is used), otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: &TensorMap) -> Result<BoundBackbone> {
        let leaf = |tape: &mut Tape, name: String, value: &Matrix| -> Result<NodeId> {
            Ok(match trainable.get(&name) {
                Some(v) => tape.param(name, v)?,
                None => tape.constant(value.clone()),
            })
        };
        let mut text = Vec::with_capacity(self.dims.layers);
        let mut image = Vec::with_capacity(self.dims.layers);
        let mut xmha = Vec::with_capacity(self.dims.layers);
        for i in 0..self.dims.layers {
            let n = i + 1;
            let x = &self.xmha[i];
            xmha.push(XmhaNodes {
                wq_t: leaf(tape, format!("xmha.{n}.Wq_t"), &x.wq_t)?,
                bq_t: leaf(tape, format!("xmha.{n}.Bq_t"), &x.bq_t)?,
                wq_i: leaf(tape, format!("xmha.{n}.Wq_i"), &x.wq_i)?,
                bq_i: leaf(tape, format!("xmha.{n}.Bq_i"), &x.bq_i)?,
                wv_t: leaf(tape, format!("xmha.{n}.Wv_t"), &x.wv_t)?,
                wv_i: leaf(tape, format!("xmha.{n}.Wv_i"), &x.wv_i)?,
                d_fusion: self.dims.d_fusion,
            });
            for (prefix, layer, out) in [
                ("text_enc", &self.text_layers[i], &mut text),
                ("image_enc", &self.image_layers[i], &mut image),
            ] {
                out.push(EncoderNodes {
                    w1: leaf(tape, format!("{prefix}.{n}.W1"), &layer.w1)?,
                    b1: leaf(tape, format!("{prefix}.{n}.b1"), &layer.b1)?,
                    w2: leaf(tape, format!("{prefix}.{n}.W2"), &layer.w2)?,
                    b2: leaf(tape, format!("{prefix}.{n}.b2"), &layer.b2)?,
                });
            }
        }
        let head = HeadNodes {
            h_r: leaf(tape, "head.H_R".into(), &self.head.h_r)?,
            h_p: leaf(tape, "head.H_P".into(), &self.head.h_p)?,
            d_head: self.dims.d_head(),
        };
        Ok(BoundBackbone {
            dims: self.dims,
            text,
            image,
            xmha,
            head,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct XmhaNodes {
    pub wq_t: NodeId,
    pub bq_t: NodeId,
    pub wq_i: NodeId,
    pub bq_i: NodeId,
    pub wv_t: NodeId,
    pub wv_i: NodeId,
    pub d_fusion: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub h_r: NodeId,
    pub h_p: NodeId,
    pub d_head: usize,
}

/// A checkpoint recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub dims: Dims,
    pub text: Vec<EncoderNodes>,
    pub image: Vec<EncoderNodes>,
    pub xmha: Vec<XmhaNodes>,
    pub head: HeadNodes,
}

fn insert_encoder(out: &mut TensorMap, prefix: &str, l: &EncoderLayer) {
    out.insert(format!("{prefix}.W1"), l.w1.clone());
    out.insert(format!("{prefix}.b1"), l.b1.clone());
    out.insert(format!("{prefix}.W2"), l.w2.clone());
    out.insert(format!("{prefix}.b2"), l.b2.clone());
}

fn expect_shape(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::Shape(format!(
            "{name} is {:?}, expected {shape:?}",
            m.shape()
        )));
    }
    Ok(())
}

pub(crate) fn uniform_fan_in(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, rows, cols, -bound, bound)
}

pub(crate) fn uniform(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    low: f64,
    high: f64,
) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(low..high))
}

/// Gaussian matrix orthonormalized column by column (modified Gram-Schmidt).
/// Requires `cols <= rows`.
pub(crate) fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    assert!(
        cols <= rows,
        "cannot fit {cols} orthonormal columns in dimension {rows}"
    );
    loop {
        let mut m = Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
        let mut ok = true;
        for j in 0..cols {
            for p in 0..j {
                let dot: f64 = (0..rows).map(|r| m[(r, j)] * m[(r, p)]).sum();
                for r in 0..rows {
                    m[(r, j)] -= dot * m[(r, p)];
                }
            }
            let norm = (0..rows).map(|r| m[(r, j)] * m[(r, j)]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for r in 0..rows {
                m[(r, j)] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}
