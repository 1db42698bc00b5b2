//! Transformation models: dense per-pixel displacements, cubic B-splines on a
//! regular control grid, and anisotropic rotated Gaussian local deformations.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{accumulate, DisplacementField, Grid2D};

/// Number of scalars describing one local deformation.
pub const PARAMS_PER_STEP: usize = 7;

/// Column order of the parameter table and of the packed parameter vector.
pub const PARAM_COLUMNS: [&str; PARAMS_PER_STEP] =
    ["x", "y", "sigma_x", "sigma_y", "alpha", "v_x", "v_y"];

/// One Gaussian local deformation: centre, shape `(σx, σy, α)` and weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalDeformParams {
    pub center: (f64, f64),
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub alpha: f64,
    pub weight: (f64, f64),
}

impl LocalDeformParams {
    /// Packs into `[x, y, sigma_x, sigma_y, alpha, v_x, v_y]`.
    pub fn to_array(&self) -> [f64; PARAMS_PER_STEP] {
        [
            self.center.0,
            self.center.1,
            self.sigma_x,
            self.sigma_y,
            self.alpha,
            self.weight.0,
            self.weight.1,
        ]
    }

    pub fn from_slice(p: &[f64]) -> Self {
        assert_eq!(p.len(), PARAMS_PER_STEP);
        Self {
            center: (p[0], p[1]),
            sigma_x: p[2],
            sigma_y: p[3],
            alpha: p[4],
            weight: (p[5], p[6]),
        }
    }

    /// Checks the range invariants for a given maximum shape size.
    pub fn validate(&self, sigma_max: f64) -> Result<()> {
        let in_unit = |v: f64| (-1.0..=1.0).contains(&v);
        let checks = [
            (self.sigma_x > 0.0 && self.sigma_x <= sigma_max, "sigma_x"),
            (self.sigma_y > 0.0 && self.sigma_y <= sigma_max, "sigma_y"),
            ((0.0..=std::f64::consts::PI).contains(&self.alpha), "alpha"),
            (in_unit(self.weight.0) && in_unit(self.weight.1), "weight"),
            (in_unit(self.center.0) && in_unit(self.center.1), "center"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            None => Ok(()),
            Some((_, name)) => Err(Error::Validation(format!(
                "local deformation {name} out of range: {self:?}"
            ))),
        }
    }
}

/// `Σ = R(α)·diag(σx, σy)·R(α)ᵀ`. The diagonal entries act as variances.
pub fn covariance(sigma_x: f64, sigma_y: f64, alpha: f64) -> Result<[[f64; 2]; 2]> {
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "shape sizes must be positive, got ({sigma_x}, {sigma_y})"
        )));
    }
    let (s, c) = alpha.sin_cos();
    let xx = c * c * sigma_x + s * s * sigma_y;
    let yy = s * s * sigma_x + c * c * sigma_y;
    let xy = c * s * (sigma_x - sigma_y);
    Ok([[xx, xy], [xy, yy]])
}

/// Per-pixel quantities shared by the Gaussian forward and backward passes.
struct GaussianPixel {
    /// Offset projected on the rotated axes.
    a: f64,
    b: f64,
    envelope: f64,
}

#[inline]
fn gaussian_pixel(p: &[f64], x: f64, y: f64, cos: f64, sin: f64) -> GaussianPixel {
    let dx = x - p[0];
    let dy = y - p[1];
    let a = dx * cos + dy * sin;
    let b = -dx * sin + dy * cos;
    let q = a * a / p[2] + b * b / p[3];
    GaussianPixel {
        a,
        b,
        envelope: (-0.5 * q).exp(),
    }
}

fn gaussian_kernel(p: &[f64], grid: &Grid2D) -> Vec<f64> {
    let n = grid.len();
    let (sin, cos) = p[4].sin_cos();
    let mut out = vec![0.0; 2 * n];
    for (k, (&x, &y)) in grid.coords_x().iter().zip(grid.coords_y().iter()).enumerate() {
        let g = gaussian_pixel(p, x, y, cos, sin).envelope;
        out[k] = p[5] * g;
        out[n + k] = p[6] * g;
    }
    out
}

fn gaussian_backward(p: &[f64], grid: &Grid2D, grad: &[f64]) -> [f64; PARAMS_PER_STEP] {
    let n = grid.len();
    let (sin, cos) = p[4].sin_cos();
    let (sx, sy) = (p[2], p[3]);
    let mut d = [0.0; PARAMS_PER_STEP];
    for (k, (&x, &y)) in grid.coords_x().iter().zip(grid.coords_y().iter()).enumerate() {
        let GaussianPixel { a, b, envelope: g } = gaussian_pixel(p, x, y, cos, sin);
        let (gu, gv) = (grad[k], grad[n + k]);
        d[5] += gu * g;
        d[6] += gv * g;
        // dL/dq = dL/dg * dg/dq with g = exp(-q/2)
        let dq = -0.5 * g * (gu * p[5] + gv * p[6]);
        if dq == 0.0 {
            continue;
        }
        let (qa, qb) = (2.0 * a / sx, 2.0 * b / sy);
        d[0] += dq * (-qa * cos + qb * sin);
        d[1] += dq * (-qa * sin - qb * cos);
        d[2] += dq * (-a * a / (sx * sx));
        d[3] += dq * (-b * b / (sy * sy));
        d[4] += dq * (qa * b - qb * a);
    }
    d
}

/// `l(x) = v · exp(-½ (x - x̃)ᵀ Σ⁻¹ (x - x̃))` evaluated on every pixel; both
/// components share the scalar envelope.
pub fn gaussian_local_field(params: &LocalDeformParams, grid: &Grid2D) -> Result<DisplacementField> {
    covariance(params.sigma_x, params.sigma_y, params.alpha)?;
    let data = gaussian_kernel(&params.to_array(), grid);
    DisplacementField::from_tensor(grid, &Tensor::new(&[2, grid.height(), grid.width()], data))
}

struct GaussianFieldOp {
    grid: Grid2D,
}

impl CustomOp for GaussianFieldOp {
    fn name(&self) -> &'static str {
        "gaussian_local_field"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let d = gaussian_backward(inputs[0].data(), &self.grid, grad.data());
        vec![Some(Tensor::vector(d.to_vec()))]
    }
}

/// Differentiable Gaussian local field. `params` is the packed `[7]` vector.
pub fn gaussian_local_field_on_tape(tape: &mut Tape, params: Var, grid: &Grid2D) -> Var {
    assert_eq!(tape.value(params).len(), PARAMS_PER_STEP);
    let data = gaussian_kernel(tape.value(params).data(), grid);
    let value = Tensor::new(&[2, grid.height(), grid.width()], data);
    tape.custom(
        &[params],
        value,
        Box::new(GaussianFieldOp { grid: grid.clone() }),
    )
}

/// Sum of the local fields of a parameter sequence; zero for an empty one.
pub fn render_sequence(params: &[LocalDeformParams], grid: &Grid2D) -> Result<DisplacementField> {
    params
        .iter()
        .try_fold(DisplacementField::zeros(grid), |acc, p| {
            accumulate(&acc, &gaussian_local_field(p, grid)?)
        })
}

/// Number of scalars of a sequence of `steps` local deformations.
pub fn sequence_param_count(steps: usize) -> usize {
    PARAMS_PER_STEP * steps
}

/// Writes the compact transformation as a whitespace-separated table, one
/// row per step in [`PARAM_COLUMNS`] order.
pub fn format_params_table(params: &[LocalDeformParams]) -> String {
    let mut s = String::from("# ");
    s.push_str(&PARAM_COLUMNS.join("\t"));
    s.push('\n');
    for p in params {
        let row: Vec<String> = p.to_array().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", row.join("\t"));
    }
    s
}

pub fn parse_params_table(text: &str) -> std::result::Result<Vec<LocalDeformParams>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, line)| {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", n + 1))?;
            if vals.len() != PARAMS_PER_STEP {
                return Err(format!(
                    "line {}: expected {PARAMS_PER_STEP} columns, found {}",
                    n + 1,
                    vals.len()
                ));
            }
            Ok(LocalDeformParams::from_slice(&vals))
        })
        .collect()
}

pub fn write_params_table(path: &Path, params: &[LocalDeformParams]) -> Result<()> {
    std::fs::write(path, format_params_table(params)).map_err(|e| Error::io(path, e))
}

pub fn read_params_table(path: &Path) -> Result<Vec<LocalDeformParams>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_params_table(&text).map_err(|reason| Error::format(path, reason))
}

/// Non-parametric model: one displacement per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    grid: Grid2D,
    theta_u: Array2<f64>,
    theta_v: Array2<f64>,
}

impl DenseModel {
    pub fn zeros(grid: &Grid2D) -> Self {
        let dim = (grid.height(), grid.width());
        Self {
            grid: grid.clone(),
            theta_u: Array2::zeros(dim),
            theta_v: Array2::zeros(dim),
        }
    }

    pub fn from_field(field: &DisplacementField) -> Self {
        Self {
            grid: field.grid().clone(),
            theta_u: field.u().clone(),
            theta_v: field.v().clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.grid.len()
    }
}

pub fn dense_field(model: &DenseModel) -> Result<DisplacementField> {
    DisplacementField::new(model.grid.clone(), model.theta_u.clone(), model.theta_v.clone())
}

/// Control-point spacing in pixels implied by a cubic B-spline kernel size.
pub fn spacing_from_kernel(kernel_size: usize) -> f64 {
    (kernel_size as f64 + 1.0) / 4.0
}

/// Uniform cubic B-spline basis values for fractional offset `t ∈ [0,1)`.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Cubic B-spline kernel `β³(t)`, support `(-2, 2)`.
pub fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// Per-axis interpolation table: for each pixel, the four clamped control
/// indices and their weights.
#[derive(Clone, Debug, PartialEq)]
struct AxisBasis {
    idx: Vec<[usize; 4]>,
    w: Vec<[f64; 4]>,
}

impl AxisBasis {
    fn new(pixels: usize, controls: usize, spacing: f64) -> Self {
        let mut idx = Vec::with_capacity(pixels);
        let mut w = Vec::with_capacity(pixels);
        for p in 0..pixels {
            // control k sits at pixel (k - 1) * spacing
            let t = p as f64 / spacing + 1.0;
            let base = t.floor();
            let frac = t - base;
            let base = base as isize;
            let clamp = |k: isize| k.clamp(0, controls as isize - 1) as usize;
            idx.push([clamp(base - 1), clamp(base), clamp(base + 1), clamp(base + 2)]);
            w.push(cubic_weights(frac));
        }
        Self { idx, w }
    }
}

/// Cubic B-spline transformation on a regular control grid. Coefficients are
/// 2-vectors in normalized displacement units; indices outside the grid are
/// clamped to the border coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineModel {
    grid: Grid2D,
    spacing: f64,
    coeffs: Array3<f64>,
    rows: AxisBasis,
    cols: AxisBasis,
}

fn control_count(pixels: usize, spacing: f64) -> usize {
    ((pixels - 1) as f64 / spacing).ceil() as usize + 3
}

impl BSplineModel {
    /// Zero model whose control spacing follows from `kernel_size` pixels.
    pub fn new(grid: &Grid2D, kernel_size: usize) -> Result<Self> {
        Self::with_spacing(grid, spacing_from_kernel(kernel_size))
    }

    pub fn with_spacing(grid: &Grid2D, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "control spacing must be positive, got {spacing}"
            )));
        }
        let shape = (
            control_count(grid.height(), spacing),
            control_count(grid.width(), spacing),
        );
        Self::from_coeffs(grid, spacing, Array3::zeros((2, shape.0, shape.1)))
    }

    /// Model with explicit `[2, rows, cols]` coefficients.
    pub fn from_coeffs(grid: &Grid2D, spacing: f64, coeffs: Array3<f64>) -> Result<Self> {
        let (c, r, k) = coeffs.dim();
        if c != 2 {
            return Err(Error::Shape(format!("coefficients need 2 components, got {c}")));
        }
        if r < 4 || k < 4 {
            return Err(Error::InvalidArgument(format!(
                "control grid must be at least 4x4, got {r}x{k}"
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            spacing,
            rows: AxisBasis::new(grid.height(), r, spacing),
            cols: AxisBasis::new(grid.width(), k, spacing),
            coeffs,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// `(rows, cols)` of the control grid.
    pub fn control_shape(&self) -> (usize, usize) {
        let (_, r, c) = self.coeffs.dim();
        (r, c)
    }

    pub fn coeffs(&self) -> &Array3<f64> {
        &self.coeffs
    }

    pub fn set_coeffs(&mut self, coeffs: Array3<f64>) -> Result<()> {
        if coeffs.dim() != self.coeffs.dim() {
            return Err(Error::Shape(format!(
                "coefficients {:?}, model expects {:?}",
                coeffs.dim(),
                self.coeffs.dim()
            )));
        }
        self.coeffs = coeffs;
        Ok(())
    }

    /// Normalized position of control point `(r, c)`.
    pub fn control_position(&self, r: usize, c: usize) -> (f64, f64) {
        let px = (c as f64 - 1.0) * self.spacing;
        let py = (r as f64 - 1.0) * self.spacing;
        (self.grid.from_col(px), self.grid.from_row(py))
    }

    /// Free scalars of the transformation: two per control point.
    pub fn param_count(&self) -> usize {
        let (r, c) = self.control_shape();
        2 * r * c
    }

    pub fn coeff_tensor(&self) -> Tensor {
        let (_, r, c) = self.coeffs.dim();
        Tensor::new(&[2, r, c], self.coeffs.iter().copied().collect())
    }

    fn evaluate(&self, coeffs: &[f64]) -> Vec<f64> {
        let (h, w) = (self.grid.height(), self.grid.width());
        let (r, c) = self.control_shape();
        let mut out = vec![0.0; 2 * h * w];
        let mut tmp = vec![0.0; r * w];
        for comp in 0..2 {
            let theta = &coeffs[comp * r * c..(comp + 1) * r * c];
            // along x for every control row
            for cr in 0..r {
                let row = &theta[cr * c..(cr + 1) * c];
                for j in 0..w {
                    let (ix, wx) = (&self.cols.idx[j], &self.cols.w[j]);
                    tmp[cr * w + j] = (0..4).map(|q| wx[q] * row[ix[q]]).sum();
                }
            }
            // then along y
            let dst = &mut out[comp * h * w..(comp + 1) * h * w];
            for i in 0..h {
                let (iy, wy) = (&self.rows.idx[i], &self.rows.w[i]);
                for j in 0..w {
                    dst[i * w + j] = (0..4).map(|q| wy[q] * tmp[iy[q] * w + j]).sum();
                }
            }
        }
        out
    }

    fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let (h, w) = (self.grid.height(), self.grid.width());
        let (r, c) = self.control_shape();
        let mut out = vec![0.0; 2 * r * c];
        let mut tmp = vec![0.0; r * w];
        for comp in 0..2 {
            tmp.fill(0.0);
            let g = &grad[comp * h * w..(comp + 1) * h * w];
            for i in 0..h {
                let (iy, wy) = (&self.rows.idx[i], &self.rows.w[i]);
                for q in 0..4 {
                    let dst = &mut tmp[iy[q] * w..(iy[q] + 1) * w];
                    for (d, &gv) in dst.iter_mut().zip(&g[i * w..(i + 1) * w]) {
                        *d += wy[q] * gv;
                    }
                }
            }
            let theta = &mut out[comp * r * c..(comp + 1) * r * c];
            for cr in 0..r {
                for j in 0..w {
                    let gv = tmp[cr * w + j];
                    let (ix, wx) = (&self.cols.idx[j], &self.cols.w[j]);
                    for q in 0..4 {
                        theta[cr * c + ix[q]] += wx[q] * gv;
                    }
                }
            }
        }
        out
    }
}

/// Dense field `f(x) = Σ_i θ_i k(x, c_i)` of a B-spline model.
pub fn bspline_field(model: &BSplineModel) -> Result<DisplacementField> {
    let coeffs = model.coeff_tensor();
    let data = model.evaluate(coeffs.data());
    let grid = &model.grid;
    DisplacementField::from_tensor(grid, &Tensor::new(&[2, grid.height(), grid.width()], data))
}

struct BSplineOp {
    model: BSplineModel,
}

impl CustomOp for BSplineOp {
    fn name(&self) -> &'static str {
        "bspline_field"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let d = self.model.adjoint(grad.data());
        vec![Some(Tensor::new(inputs[0].shape(), d))]
    }
}

/// Differentiable B-spline field; `coeffs` is `[2, rows, cols]` matching the
/// model's control grid (the model's own coefficients are ignored).
pub fn bspline_field_on_tape(tape: &mut Tape, coeffs: Var, model: &BSplineModel) -> Var {
    let (r, c) = model.control_shape();
    assert_eq!(tape.value(coeffs).shape(), &[2, r, c], "bspline coefficient shape");
    let data = model.evaluate(tape.value(coeffs).data());
    let grid = &model.grid;
    let value = Tensor::new(&[2, grid.height(), grid.width()], data);
    tape.custom(&[coeffs], value, Box::new(BSplineOp { model: model.clone() }))
}
