//! Image similarity, transformation regularization and the registration
//! objectives built from them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{warp, DisplacementField, Image2D};

/// Smoothing constant inside the TV square root.
pub const TV_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub sequence_length: usize,
}

impl ObjectiveConfig {
    pub fn new(lambda: f64, sequence_length: usize) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if sequence_length == 0 {
            return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
        }
        Ok(Self {
            lambda,
            sequence_length,
        })
    }
}

fn mse_kernel(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Mean squared intensity difference.
pub fn mse_loss(a: &Image2D, b: &Image2D) -> Result<f64> {
    if !a.grid().same_shape(b.grid()) {
        return Err(Error::Shape("mse_loss on images of different size".into()));
    }
    Ok(mse_kernel(
        a.values().as_slice().expect("standard layout"),
        b.values().as_slice().expect("standard layout"),
    ))
}

struct MseOp;

impl CustomOp for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let k = 2.0 * grad.item() / inputs[0].len() as f64;
        let d = inputs[0].zip_map(inputs[1], |x, y| k * (x - y));
        vec![
            needs[0].then(|| d.clone()),
            needs[1].then(|| d.map(|x| -x)),
        ]
    }
}

pub fn mse_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    assert_eq!(tape.value(a).len(), tape.value(b).len(), "mse length mismatch");
    let value = mse_kernel(tape.value(a).data(), tape.value(b).data());
    tape.custom(&[a, b], Tensor::scalar(value), Box::new(MseOp))
}

/// Isotropic TV of a `[2,H,W]` buffer: mean over the `(H-1)(W-1)` pixels that
/// have forward neighbours of `sqrt(|∂x f|² + |∂y f|² + eps)`.
fn tv_kernel(field: &[f64], h: usize, w: usize, eps: f64) -> f64 {
    let n = h * w;
    let (u, v) = field.split_at(n);
    let mut total = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let k = i * w + j;
            let dux = u[k + 1] - u[k];
            let duy = u[k + w] - u[k];
            let dvx = v[k + 1] - v[k];
            let dvy = v[k + w] - v[k];
            total += (dux * dux + duy * duy + dvx * dvx + dvy * dvy + eps).sqrt();
        }
    }
    total / ((h - 1) * (w - 1)) as f64
}

fn tv_backward(field: &[f64], h: usize, w: usize, eps: f64, g: f64) -> Vec<f64> {
    let n = h * w;
    let (u, v) = field.split_at(n);
    let mut d = vec![0.0; 2 * n];
    let scale = g / ((h - 1) * (w - 1)) as f64;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let k = i * w + j;
            let dux = u[k + 1] - u[k];
            let duy = u[k + w] - u[k];
            let dvx = v[k + 1] - v[k];
            let dvy = v[k + w] - v[k];
            let s = (dux * dux + duy * duy + dvx * dvx + dvy * dvy + eps).sqrt();
            if s == 0.0 {
                continue;
            }
            let c = scale / s;
            d[k + 1] += c * dux;
            d[k + w] += c * duy;
            d[k] -= c * (dux + duy);
            d[n + k + 1] += c * dvx;
            d[n + k + w] += c * dvy;
            d[n + k] -= c * (dvx + dvy);
        }
    }
    d
}

pub fn tv_loss(field: &DisplacementField) -> f64 {
    tv_loss_with_epsilon(field, TV_EPSILON)
}

pub fn tv_loss_with_epsilon(field: &DisplacementField, eps: f64) -> f64 {
    let g = field.grid();
    tv_kernel(field.to_tensor().data(), g.height(), g.width(), eps)
}

struct TvOp {
    h: usize,
    w: usize,
    eps: f64,
}

impl CustomOp for TvOp {
    fn name(&self) -> &'static str {
        "tv"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let d = tv_backward(inputs[0].data(), self.h, self.w, self.eps, grad.item());
        vec![Some(Tensor::new(inputs[0].shape(), d))]
    }
}

/// Differentiable TV of a `[2,H,W]` field.
pub fn tv_on_tape(tape: &mut Tape, field: Var, eps: f64) -> Var {
    let (c, h, w) = tape.value(field).chw();
    assert_eq!(c, 2, "tv expects a 2-component field");
    let value = tv_kernel(tape.value(field).data(), h, w, eps);
    tape.custom(&[field], Tensor::scalar(value), Box::new(TvOp { h, w, eps }))
}

/// `(1/T) Σ_t MSE(F, M∘f_t) + λ·TV(f_T)`.
pub fn sequence_objective(
    fixed: &Image2D,
    moving: &Image2D,
    fields: &[DisplacementField],
    lambda: f64,
) -> Result<f64> {
    let last = fields
        .last()
        .ok_or_else(|| Error::InvalidArgument("sequence objective needs at least one field".into()))?;
    let mut image = 0.0;
    for f in fields {
        image += mse_loss(fixed, &warp(moving, f)?)?;
    }
    let image = image * (1.0 / fields.len() as f64);
    Ok(image + lambda * tv_loss(last))
}

/// `MSE(F, M∘f) + λ·TV(f)`: the single-field objective.
pub fn classic_objective(
    fixed: &Image2D,
    moving: &Image2D,
    field: &DisplacementField,
    lambda: f64,
) -> Result<f64> {
    sequence_objective(fixed, moving, std::slice::from_ref(field), lambda)
}

/// Tape nodes of an objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub image: Var,
    pub regularizer: Var,
}

/// Tape version of [`sequence_objective`], taking the already warped moving
/// images `M∘f_1 … M∘f_T` and the final field.
pub fn sequence_objective_on_tape(
    tape: &mut Tape,
    fixed: Var,
    warped: &[Var],
    final_field: Var,
    lambda: f64,
) -> LossTerms {
    assert!(!warped.is_empty(), "sequence objective needs at least one step");
    let mut image = mse_on_tape(tape, fixed, warped[0]);
    for &w in &warped[1..] {
        let term = mse_on_tape(tape, fixed, w);
        image = tape.add(image, term);
    }
    let image = tape.scale(image, 1.0 / warped.len() as f64);
    let regularizer = tv_on_tape(tape, final_field, TV_EPSILON);
    let weighted = tape.scale(regularizer, lambda);
    let total = tape.add(image, weighted);
    LossTerms {
        total,
        image,
        regularizer,
    }
}
