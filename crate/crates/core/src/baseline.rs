//! Multi-resolution cubic B-spline registration optimized per image pair.

use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::deform::{bspline_field, bspline_field_on_tape, BSplineModel, LocalDeformParams, PARAMS_PER_STEP};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, warp_on_tape, DisplacementField, Image2D};
use crate::objectives::{classic_objective, mse_on_tape, tv_on_tape, TV_EPSILON};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub resolutions: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub iterations_per_level: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub amsgrad: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![64, 128, 256],
            kernel_sizes: vec![7, 21, 57],
            iterations_per_level: 250,
            learning_rate: 0.001,
            lambda: 0.01,
            amsgrad: true,
        }
    }
}

impl BaselineConfig {
    /// Desk-scale variant for 64×64 images.
    pub fn scaled() -> Self {
        Self {
            resolutions: vec![16, 32, 64],
            kernel_sizes: vec![7, 11, 15],
            iterations_per_level: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() || self.resolutions.len() != self.kernel_sizes.len() {
            return Err(Error::Validation(format!(
                "need equal, non-empty resolution and kernel lists, got {} and {}",
                self.resolutions.len(),
                self.kernel_sizes.len()
            )));
        }
        if self.resolutions.iter().chain(&self.kernel_sizes).any(|&v| v == 0) {
            return Err(Error::Validation("resolutions and kernel sizes must be positive".into()));
        }
        if self.resolutions.iter().any(|&r| r < 2) {
            return Err(Error::Validation("resolutions must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Validation("learning_rate must be > 0 and lambda >= 0".into()));
        }
        Ok(())
    }

    pub fn finest_resolution(&self) -> usize {
        *self.resolutions.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub resolution: usize,
    pub kernel_size: usize,
    pub control_rows: usize,
    pub control_cols: usize,
    /// Objective before each update.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineDiagnostics {
    pub levels: Vec<LevelDiagnostics>,
    /// Scalars describing the final transformation.
    pub param_count: usize,
    /// Objective of the returned field at the finest level.
    pub final_objective: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BSplineRegistration {
    pub field: DisplacementField,
    pub model: BSplineModel,
    pub diagnostics: BaselineDiagnostics,
}

/// Coefficients of `model` initialized from `field` sampled at the control
/// points (border-clamped).
fn warm_start(model: &BSplineModel, field: &DisplacementField) -> Array3<f64> {
    let (r, c) = model.control_shape();
    let mut coeffs = Array3::zeros((2, r, c));
    for i in 0..r {
        for j in 0..c {
            let (x, y) = model.control_position(i, j);
            let (u, v) = field.sample(x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0));
            coeffs[[0, i, j]] = u;
            coeffs[[1, i, j]] = v;
        }
    }
    coeffs
}

/// Objective value and coefficient gradient at one level.
fn level_objective(fixed: &Tensor, moving: &Tensor, coeffs: &Tensor, model: &BSplineModel, lambda: f64) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let c = tape.leaf(coeffs.clone());
    let f = tape.constant(fixed.clone());
    let m = tape.constant(moving.clone());
    let field = bspline_field_on_tape(&mut tape, c, model);
    let warped = warp_on_tape(&mut tape, m, field);
    let sim = mse_on_tape(&mut tape, f, warped);
    let reg = tv_on_tape(&mut tape, field, TV_EPSILON);
    let reg = tape.scale(reg, lambda);
    let total = tape.add(sim, reg);
    let loss = tape.value(total).item();
    let mut grads = tape.backward(total);
    (loss, grads.take(c).expect("coefficients require grad"))
}

/// Coarse-to-fine B-spline registration of `moving` onto `fixed`.
pub fn register_bspline(fixed: &Image2D, moving: &Image2D, config: &BaselineConfig) -> Result<BSplineRegistration> {
    config.validate()?;
    let finest = config.finest_resolution();
    for (img, what) in [(fixed, "fixed"), (moving, "moving")] {
        let g = img.grid();
        if g.height() != finest || g.width() != finest {
            return Err(Error::Shape(format!(
                "{what} image is {}x{}, finest level is {finest}x{finest}",
                g.height(),
                g.width()
            )));
        }
    }
    let start = Instant::now();
    let mut levels = Vec::with_capacity(config.resolutions.len());
    let mut previous: Option<DisplacementField> = None;
    let mut model = None;
    for (&res, &kernel) in config.resolutions.iter().zip(&config.kernel_sizes) {
        let level_start = Instant::now();
        let grid = make_grid(res, res)?;
        let f = fixed.resample_area(res, res)?.to_tensor();
        let m = moving.resample_area(res, res)?.to_tensor();
        let mut level_model = BSplineModel::new(&grid, kernel)?;
        if let Some(prev) = &previous {
            let init = warm_start(&level_model, &prev.resample(&grid));
            level_model.set_coeffs(init)?;
        }
        let mut coeffs = vec![level_model.coeff_tensor()];
        let mut adam = Adam::for_params(AdamConfig::new(config.learning_rate, config.amsgrad), &coeffs);
        let mut losses = Vec::with_capacity(config.iterations_per_level);
        for it in 0..config.iterations_per_level {
            let (loss, grad) = level_objective(&f, &m, &coeffs[0], &level_model, config.lambda);
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "B-spline level {res}x{res}, iteration {it}: loss {loss}"
                )));
            }
            losses.push(loss);
            adam.step(&mut coeffs, &[grad]);
        }
        let (r, c) = level_model.control_shape();
        let array = Array3::from_shape_vec((2, r, c), coeffs.pop().expect("one array").into_data())
            .expect("coefficient shape");
        level_model.set_coeffs(array)?;
        previous = Some(bspline_field(&level_model)?);
        levels.push(LevelDiagnostics {
            resolution: res,
            kernel_size: kernel,
            control_rows: r,
            control_cols: c,
            losses,
            seconds: level_start.elapsed().as_secs_f64(),
        });
        model = Some(level_model);
    }
    let model = model.expect("at least one level");
    let field = previous.expect("at least one level");
    let final_objective = classic_objective(fixed, moving, &field, config.lambda)?;
    Ok(BSplineRegistration {
        diagnostics: BaselineDiagnostics {
            levels,
            param_count: model.param_count(),
            final_objective,
            seconds: start.elapsed().as_secs_f64(),
        },
        field,
        model,
    })
}

/// A final transformation whose size is being counted.
#[derive(Clone, Copy, Debug)]
pub enum Transform<'a> {
    BSpline(&'a BSplineModel),
    Sequence(&'a [LocalDeformParams]),
}

/// Scalars needed to describe a transformation: two per control point for
/// a B-spline, seven per step for a sequence.
pub fn count_transform_params(t: Transform) -> usize {
    match t {
        Transform::BSpline(m) => m.param_count(),
        Transform::Sequence(p) => PARAMS_PER_STEP * p.len(),
    }
}

/// Parameter count of the finest level of `config`.
pub fn bspline_param_count(config: &BaselineConfig) -> Result<usize> {
    config.validate()?;
    let r = config.finest_resolution();
    let kernel = *config.kernel_sizes.last().expect("validated");
    Ok(BSplineModel::new(&make_grid(r, r)?, kernel)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::sequence_param_count;
    use crate::objectives::{mse_loss, tv_loss};

    fn smooth(r: usize, shift: f64) -> Image2D {
        Image2D::from_fn(make_grid(r, r).unwrap(), |x, y| {
            let x = x + shift;
            0.5 + 0.3 * (2.5 * x).sin() * (2.0 * y).cos() + 0.1 * (1.5 * x + y).cos()
        })
    }

    fn quick() -> BaselineConfig {
        BaselineConfig {
            resolutions: vec![16, 32],
            kernel_sizes: vec![7, 11],
            iterations_per_level: 60,
            learning_rate: 0.01,
            ..BaselineConfig::default()
        }
    }

    #[test]
    fn config_checks() {
        assert!(BaselineConfig::default().validate().is_ok());
        let mut c = BaselineConfig::scaled();
        c.kernel_sizes.pop();
        assert!(c.validate().is_err());
        let img = smooth(32, 0.0);
        assert!(matches!(register_bspline(&img, &img, &BaselineConfig::scaled()), Err(Error::Shape(_))));
    }

    #[test]
    fn aligned_pair_stays_put() {
        let img = smooth(32, 0.0);
        let r = register_bspline(&img, &img, &quick()).unwrap();
        assert!(r.field.max_magnitude() < 1e-6);
        assert!(mse_loss(&img, &crate::geometry::warp(&img, &r.field).unwrap()).unwrap() < 1e-12);
        assert!(tv_loss(&r.field) < 1e-3);
    }

    #[test]
    fn recovers_a_two_pixel_translation() {
        let r = 32;
        let px = 2.0 * 2.0 / (r - 1) as f64;
        let fixed = smooth(r, px);
        let moving = smooth(r, 0.0);
        let mut cfg = quick();
        cfg.iterations_per_level = 150;
        let reg = register_bspline(&fixed, &moving, &cfg).unwrap();
        // interior mean, away from the clamped border
        let u = reg.field.u();
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 4..r - 4 {
            for j in 4..r - 4 {
                sum += u[[i, j]];
                n += 1.0;
            }
        }
        let mean_px = sum / n / (2.0 / (r - 1) as f64);
        assert!((mean_px - 2.0).abs() < 0.5, "{mean_px}");
    }

    #[test]
    fn diagnostics_are_consistent() {
        let fixed = smooth(32, 0.05);
        let moving = smooth(32, 0.0);
        let cfg = quick();
        let r = register_bspline(&fixed, &moving, &cfg).unwrap();
        assert_eq!(r.diagnostics.levels.len(), 2);
        assert!(r.diagnostics.levels.iter().all(|l| l.losses.len() == 60));
        let recomputed = classic_objective(&fixed, &moving, &r.field, cfg.lambda).unwrap();
        assert!((recomputed - r.diagnostics.final_objective).abs() < 1e-6);
        assert_eq!(r.diagnostics.param_count, count_transform_params(Transform::BSpline(&r.model)));
        let a = register_bspline(&fixed, &moving, &cfg).unwrap();
        assert_eq!(a.field, r.field);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(sequence_param_count(25), 175);
        let seq = vec![
            LocalDeformParams {
                center: (0.0, 0.0),
                sigma_x: 0.1,
                sigma_y: 0.1,
                alpha: 0.0,
                weight: (0.0, 0.0)
            };
            25
        ];
        assert_eq!(count_transform_params(Transform::Sequence(&seq)), 175);
        let m = BSplineModel::from_coeffs(&make_grid(16, 16).unwrap(), 2.0, Array3::zeros((2, 10, 10))).unwrap();
        assert_eq!(count_transform_params(Transform::BSpline(&m)), 200);
        // 256 px at kernel 57: spacing 14.5 px, 18 intervals, 21 control points per axis
        assert_eq!(bspline_param_count(&BaselineConfig::default()).unwrap(), 2 * 21 * 21);
    }
}
