//! Numerical self-checks: Penrose residuals, projection round trips and
//! tape-versus-finite-difference gradients on whole tuning graphs.

use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::methods::Recipe;
use crate::model::{forward_on_tape, pretrain_tensor_names, FusionCheckpoint, Wiring};
use crate::numerics::{finite_diff_grad, max_relative_error, Matrix, NodeId, Tape};
use crate::sdpt::{build_inverse_projections, project_prototypes, LayerSet};
use crate::tensors::TensorMap;
use crate::train::{Network, Stage};

/// Step for central differences on the model graphs.
pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-6;

/// Frobenius residuals of the four Penrose conditions for `x = pinv(a)`:
/// `axa = a`, `xax = x`, `(ax)^T = ax`, `(xa)^T = xa`.
pub fn penrose_residuals(a: &Matrix, x: &Matrix) -> Result<[f64; 4]> {
    let ax = a.matmul(x)?;
    let xa = x.matmul(a)?;
    Ok([
        ax.matmul(a)?.sub(a)?.frobenius_norm(),
        xa.matmul(x)?.sub(x)?.frobenius_norm(),
        ax.transpose().sub(&ax)?.frobenius_norm(),
        xa.transpose().sub(&xa)?.frobenius_norm(),
    ])
}

/// Largest `|query(project(z)) - z|` over every layer and both modalities.
pub fn projection_round_trip_error(ckpt: &FusionCheckpoint, z: &Matrix) -> Result<f64> {
    let layers = LayerSet::all(ckpt.dims.layers);
    let proj = build_inverse_projections(ckpt, &layers)?;
    let mut worst: f64 = 0.0;
    for l in layers.iter() {
        let x = &ckpt.xmha[l - 1];
        let (zt, zi) = project_prototypes(z, &proj, l)?;
        let back_t = zt.matmul(&x.wq_t)?.add_row(&x.bq_t)?;
        let back_i = zi.matmul(&x.wq_i)?.add_row(&x.bq_i)?;
        worst = worst
            .max(back_t.max_abs_diff(z))
            .max(back_i.max_abs_diff(z));
    }
    Ok(worst)
}

fn sample_loss<F>(
    params: &TensorMap,
    sample: &GroundingSample,
    build: &mut F,
) -> Result<(Tape, NodeId)>
where
    F: FnMut(&mut Tape, &TensorMap) -> Result<Network>,
{
    let mut tape = Tape::new();
    let net = build(&mut tape, params)?;
    let trace = forward_on_tape(
        &mut tape,
        &net.backbone,
        &net.wiring,
        &sample.p0,
        &sample.r0,
    )?;
    let loss = tape.sigmoid_cross_entropy(trace.logits, &sample.y)?;
    Ok((tape, loss))
}

/// Worst relative error between tape gradients and central differences of the
/// single-sample loss, over every entry of every tensor in `params`.
fn gradient_error<F>(params: &TensorMap, sample: &GroundingSample, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &TensorMap) -> Result<Network>,
{
    let ids = params.param_ids();
    let (tape, loss) = sample_loss(params, sample, &mut build)?;
    let grads = tape.grad(loss, &ids)?;
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let analytic = grads
            .get(&name.as_str().into())
            .ok_or_else(|| Error::Config(format!("no gradient recorded for {name}")))?;
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |v| {
                probe.insert(name.clone(), v.clone());
                let (t, l) =
                    sample_loss(&probe, sample, &mut build).expect("graph recorded once already");
                t.value(l)[(0, 0)]
            },
            value,
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(analytic, &numeric, FD_FLOOR));
    }
    Ok(worst)
}

/// Gradient check of a tuning method's trainables at `params`.
pub fn recipe_gradient_error(
    recipe: &Recipe<'_>,
    params: &TensorMap,
    sample: &GroundingSample,
) -> Result<f64> {
    gradient_error(params, sample, |tape, p| {
        recipe.record(tape, p, Stage::Eval)
    })
}

/// Gradient check of every pre-trained backbone tensor (all but the head).
pub fn backbone_gradient_error(ckpt: &FusionCheckpoint, sample: &GroundingSample) -> Result<f64> {
    let all = ckpt.tensors();
    let params: TensorMap = pretrain_tensor_names(ckpt)
        .into_iter()
        .filter_map(|n| all.get(&n).cloned().map(|v| (n, v)))
        .collect();
    gradient_error(&params, sample, |tape, p| {
        Ok(Network {
            backbone: ckpt.bind(tape, p)?,
            wiring: Wiring::plain(),
        })
    })
}
