//! Synthetic ground-truth cases and user-supplied image series.
//!
//! A synthetic case is built from a procedural texture `T` and a smooth
//! truth field `u` (a sum of Gaussian local deformations): the moving image
//! samples `T(x)` and the fixed image samples `T(x + u(x))`, both
//! analytically. Warping the moving image by `u` therefore reproduces the
//! fixed image up to interpolation error, and a fixed-image landmark `p`
//! corresponds to `p + u(p)` in the moving image.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{render_sequence, LocalDeformParams};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, DisplacementField, Grid2D, Image2D};
use crate::io;

pub const DEFAULT_LANDMARKS: usize = 20;
pub const DEFAULT_BLOBS: usize = 12;
/// Gaussian local deformations summed into a truth field.
const TRUTH_COMPONENTS: usize = 3;
/// Landmarks stay this many pixels away from the border.
const LANDMARK_MARGIN: usize = 3;
/// Minimum Chebyshev distance between landmarks, in pixels.
const LANDMARK_SPACING: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub fixed: Image2D,
    pub moving: Image2D,
    pub truth_field: DisplacementField,
    pub landmarks_fixed: Vec<(f64, f64)>,
    pub landmarks_moving: Vec<(f64, f64)>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    amplitude: f64,
}

/// Smooth blobs over a horizontal, gently curved high-contrast interface.
#[derive(Clone, Debug)]
struct Texture {
    blobs: Vec<Blob>,
    interface_y: f64,
    interface_amp: f64,
    interface_freq: f64,
    interface_phase: f64,
}

impl Texture {
    fn random(n_blobs: usize, rng: &mut ChaCha8Rng) -> Self {
        let blobs = (0..n_blobs)
            .map(|_| {
                let s: f64 = rng.random_range(0.08..0.3);
                Blob {
                    cx: rng.random_range(-0.9..0.9),
                    cy: rng.random_range(-0.9..0.9),
                    inv_two_var: 1.0 / (2.0 * s * s),
                    amplitude: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        Self {
            blobs,
            interface_y: rng.random_range(-0.3..0.3),
            interface_amp: rng.random_range(0.05..0.2),
            interface_freq: rng.random_range(1.0..3.0),
            interface_phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let boundary = self.interface_y + self.interface_amp * (self.interface_freq * x + self.interface_phase).sin();
        let interface = 1.0 / (1.0 + (-(y - boundary) / 0.04).exp());
        let blobs: f64 = self
            .blobs
            .iter()
            .map(|b| {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                b.amplitude * (-d2 * b.inv_two_var).exp()
            })
            .sum();
        0.15 + 0.5 * interface + 0.3 * (0.5 + 0.5 * blobs.tanh())
    }
}

fn random_truth(grid: &Grid2D, deform_scale: f64, rng: &mut ChaCha8Rng) -> Result<DisplacementField> {
    let params: Vec<LocalDeformParams> = (0..TRUTH_COMPONENTS)
        .map(|_| LocalDeformParams {
            center: (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
            sigma_x: rng.random_range(0.04..0.25),
            sigma_y: rng.random_range(0.04..0.25),
            alpha: rng.random_range(0.0..PI),
            weight: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        })
        .collect();
    let field = render_sequence(&params, grid)?;
    let peak = field.max_magnitude();
    if deform_scale == 0.0 || peak == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    Ok(field.scaled(deform_scale / peak))
}

fn pick_landmarks(image: &Image2D, count: usize) -> Vec<(usize, usize)> {
    let (h, w) = (image.grid().height(), image.grid().width());
    let v = image.values();
    let mut scored = Vec::new();
    for i in LANDMARK_MARGIN..h.saturating_sub(LANDMARK_MARGIN) {
        for j in LANDMARK_MARGIN..w.saturating_sub(LANDMARK_MARGIN) {
            let gx = v[[i, j + 1]] - v[[i, j - 1]];
            let gy = v[[i + 1, j]] - v[[i - 1, j]];
            scored.push((gx * gx + gy * gy, i, j));
        }
    }
    // strongest gradient first, ties by raster order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(count);
    for &(_, i, j) in &scored {
        if chosen.len() == count {
            break;
        }
        if chosen
            .iter()
            .all(|&(a, b)| a.abs_diff(i).max(b.abs_diff(j)) >= LANDMARK_SPACING)
        {
            chosen.push((i, j));
        }
    }
    chosen
}

/// Generates a reproducible synthetic registration case on a square grid.
pub fn generate_case(resolution: usize, deform_scale: f64, n_blobs: usize, seed: u64) -> Result<SyntheticCase> {
    generate_case_with_landmarks(resolution, deform_scale, n_blobs, DEFAULT_LANDMARKS, seed)
}

pub fn generate_case_with_landmarks(
    resolution: usize,
    deform_scale: f64,
    n_blobs: usize,
    n_landmarks: usize,
    seed: u64,
) -> Result<SyntheticCase> {
    if resolution < 16 {
        return Err(Error::InvalidArgument(format!("resolution must be >= 16, got {resolution}")));
    }
    if !(deform_scale >= 0.0 && deform_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("deform_scale must be >= 0, got {deform_scale}")));
    }
    let grid = make_grid(resolution, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::random(n_blobs, &mut rng);
    let truth = random_truth(&grid, deform_scale, &mut rng)?;
    let moving = Image2D::from_fn(grid.clone(), |x, y| texture.eval(x, y));
    let (u, v) = (truth.u(), truth.v());
    let fixed_values = ndarray::Array2::from_shape_fn((resolution, resolution), |(i, j)| {
        let x = grid.coords_x()[[i, j]] + u[[i, j]];
        let y = grid.coords_y()[[i, j]] + v[[i, j]];
        texture.eval(x, y)
    });
    let fixed = Image2D::new(grid.clone(), fixed_values)?;
    let sites = pick_landmarks(&fixed, n_landmarks);
    let landmarks_fixed: Vec<(f64, f64)> = sites
        .iter()
        .map(|&(i, j)| (grid.coords_x()[[i, j]], grid.coords_y()[[i, j]]))
        .collect();
    let landmarks_moving = sites
        .iter()
        .zip(&landmarks_fixed)
        .map(|(&(i, j), &(x, y))| (x + u[[i, j]], y + v[[i, j]]))
        .collect();
    Ok(SyntheticCase {
        fixed,
        moving,
        truth_field: truth,
        landmarks_fixed,
        landmarks_moving,
        seed,
    })
}

/// Per-case metadata stored next to the case files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseInfo {
    pub seed: u64,
    pub resolution: usize,
}

pub const FIXED_FILE: &str = "fixed.png";
pub const MOVING_FILE: &str = "moving.png";
pub const TRUTH_FILE: &str = "truth.r2nf";
pub const LANDMARKS_FIXED_FILE: &str = "landmarks_fixed.csv";
pub const LANDMARKS_MOVING_FILE: &str = "landmarks_moving.csv";
pub const CASE_INFO_FILE: &str = "case.toml";

pub fn save_case(dir: &Path, case: &SyntheticCase) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = case.fixed.grid();
    io::write_image(&dir.join(FIXED_FILE), &case.fixed)?;
    io::write_image(&dir.join(MOVING_FILE), &case.moving)?;
    io::write_field(&dir.join(TRUTH_FILE), &case.truth_field)?;
    io::write_landmarks(&dir.join(LANDMARKS_FIXED_FILE), &case.landmarks_fixed, grid)?;
    io::write_landmarks(&dir.join(LANDMARKS_MOVING_FILE), &case.landmarks_moving, grid)?;
    let info = CaseInfo {
        seed: case.seed,
        resolution: grid.height(),
    };
    let text = toml::to_string(&info).expect("case info serializes");
    let path = dir.join(CASE_INFO_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a case written by [`save_case`]. Images come back quantized to 16
/// bits and the truth field to f32.
pub fn load_case(dir: &Path) -> Result<SyntheticCase> {
    let info_path = dir.join(CASE_INFO_FILE);
    let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let info: CaseInfo = toml::from_str(&text).map_err(|e| Error::format(&info_path, e.to_string()))?;
    let fixed = io::read_image(&dir.join(FIXED_FILE))?;
    let moving = io::read_image(&dir.join(MOVING_FILE))?;
    let truth_field = io::read_field(&dir.join(TRUTH_FILE))?;
    let grid = fixed.grid().clone();
    if !moving.grid().same_shape(&grid) || !truth_field.grid().same_shape(&grid) {
        return Err(Error::Validation(format!("{}: case files differ in size", dir.display())));
    }
    let landmarks_fixed = io::read_landmarks(&dir.join(LANDMARKS_FIXED_FILE), &grid)?;
    let landmarks_moving = io::read_landmarks(&dir.join(LANDMARKS_MOVING_FILE), &grid)?;
    if landmarks_fixed.len() != landmarks_moving.len() {
        return Err(Error::Validation(format!(
            "{}: {} fixed vs {} moving landmarks",
            dir.display(),
            landmarks_fixed.len(),
            landmarks_moving.len()
        )));
    }
    Ok(SyntheticCase {
        fixed,
        moving,
        truth_field,
        landmarks_fixed,
        landmarks_moving,
        seed: info.seed,
    })
}

/// Index of a generated case set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSetManifest {
    pub resolution: usize,
    pub deform_scale: f64,
    pub n_blobs: usize,
    pub seed: u64,
    #[serde(default)]
    pub cases: Vec<CaseEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    /// Directory relative to the manifest.
    pub dir: PathBuf,
    pub seed: u64,
}

pub const CASE_SET_FILE: &str = "cases.toml";

/// Seed of case `index` in a set generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn read_case_set(path: &Path) -> Result<(CaseSetManifest, Vec<SyntheticCase>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CaseSetManifest = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cases = manifest
        .cases
        .iter()
        .map(|c| load_case(&base.join(&c.dir)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}

/// An image series: one reference image registered against every other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    /// Index of the fixed image.
    pub reference: usize,
    /// Physical pixel size, when known.
    #[serde(default)]
    pub pixel_spacing_mm: Option<f64>,
    pub images: Vec<SeriesImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesImage {
    pub path: PathBuf,
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub manifest: SeriesManifest,
    pub images: Vec<Image2D>,
    pub landmarks: Vec<Option<Vec<(f64, f64)>>>,
}

impl Series {
    /// `(reference, other)` index pairs to register.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let r = self.manifest.reference;
        (0..self.images.len()).filter(|&i| i != r).map(|i| (r, i)).collect()
    }
}

pub fn load_series(manifest_path: &Path) -> Result<Series> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: SeriesManifest =
        toml::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.images.is_empty() {
        return Err(Error::Validation("series lists no images".into()));
    }
    if manifest.reference >= manifest.images.len() {
        return Err(Error::Validation(format!(
            "reference index {} out of range for {} images",
            manifest.reference,
            manifest.images.len()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = manifest
        .images
        .iter()
        .map(|e| io::read_image(&base.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    let grid = images[0].grid().clone();
    for (img, entry) in images.iter().zip(&manifest.images) {
        if !img.grid().same_shape(&grid) {
            return Err(Error::Validation(format!(
                "{} is {}x{}, series is {}x{}",
                entry.path.display(),
                img.grid().height(),
                img.grid().width(),
                grid.height(),
                grid.width()
            )));
        }
    }
    let landmarks = manifest
        .images
        .iter()
        .map(|e| {
            e.landmarks
                .as_ref()
                .map(|p| io::read_landmarks(&base.join(p), &grid))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = landmarks.iter().flatten().map(Vec::len).collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Validation(format!("landmark files have differing row counts {counts:?}")));
    }
    Ok(Series {
        manifest,
        images,
        landmarks,
    })
}
