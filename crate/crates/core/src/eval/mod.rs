//! Target registration error, compactness and runtime comparison of the
//! recurrent network against the B-spline baseline.

pub mod plots;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{bspline_param_count, register_bspline, BaselineConfig};
use crate::data::SyntheticCase;
use crate::deform::sequence_param_count;
use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, Grid2D};
use crate::net::{register, R2N2Net};

/// Landmark error statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreStats {
    pub mean: f64,
    pub max: f64,
    pub rms: f64,
}

fn tre_with(
    landmarks_fixed: &[(f64, f64)],
    landmarks_moving: &[(f64, f64)],
    field: &DisplacementField,
    scale: (f64, f64),
) -> Result<TreStats> {
    if landmarks_fixed.is_empty() {
        return Err(Error::InvalidArgument("TRE needs at least one landmark".into()));
    }
    if landmarks_fixed.len() != landmarks_moving.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fixed vs {} moving landmarks",
            landmarks_fixed.len(),
            landmarks_moving.len()
        )));
    }
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for (&(x, y), &(mx, my)) in landmarks_fixed.iter().zip(landmarks_moving) {
        let (u, v) = field.sample(x, y);
        let dx = (x + u - mx) * scale.0;
        let dy = (y + v - my) * scale.1;
        let d = (dx * dx + dy * dy).sqrt();
        sum += d;
        sq += d * d;
        max = max.max(d);
    }
    let n = landmarks_fixed.len() as f64;
    Ok(TreStats {
        mean: sum / n,
        max,
        rms: (sq / n).sqrt(),
    })
}

/// Distance between `p + field(p)` and the corresponding moving landmark,
/// in normalized units.
pub fn tre(
    landmarks_fixed: &[(f64, f64)],
    landmarks_moving: &[(f64, f64)],
    field: &DisplacementField,
) -> Result<TreStats> {
    tre_with(landmarks_fixed, landmarks_moving, field, (1.0, 1.0))
}

/// [`tre`] measured in pixels of the field's grid.
pub fn tre_pixels(
    landmarks_fixed: &[(f64, f64)],
    landmarks_moving: &[(f64, f64)],
    field: &DisplacementField,
) -> Result<TreStats> {
    let g: &Grid2D = field.grid();
    tre_with(landmarks_fixed, landmarks_moving, field, (1.0 / g.spacing_x(), 1.0 / g.spacing_y()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Network sequence length at inference.
    pub steps: usize,
    /// Timed repetitions per method and case; the median is reported.
    pub timing_runs: usize,
    /// Untimed runs before timing.
    pub warmup_runs: usize,
    pub pixel_spacing_mm: Option<f64>,
    /// Report RMS instead of mean landmark distance as the headline TRE.
    pub rms: bool,
    /// Steps at which field snapshots are drawn.
    pub snapshot_steps: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            steps: 25,
            timing_runs: 5,
            warmup_runs: 1,
            pixel_spacing_mm: None,
            rms: false,
            snapshot_steps: vec![2, 4, 8, 25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub tre: TreStats,
    pub tre_pixels: TreStats,
    pub tre_mm: Option<TreStats>,
    /// Median wall-clock per registration.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub seed: u64,
    pub before: TreStats,
    pub before_pixels: TreStats,
    pub r2n2: MethodResult,
    pub bspline: MethodResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub sequence: usize,
    pub bspline: usize,
    /// `sequence / bspline`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Headline TRE (mean or RMS per options), averaged over cases, pixels.
    pub tre_before: f64,
    pub tre_r2n2: f64,
    pub tre_bspline: f64,
    pub max_tre_r2n2: f64,
    pub max_tre_bspline: f64,
    pub reduction_r2n2: f64,
    pub reduction_bspline: f64,
    pub median_seconds_r2n2: f64,
    pub median_seconds_bspline: f64,
    /// `median_seconds_bspline / median_seconds_r2n2`.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigDigests {
    pub network: String,
    pub baseline: String,
    pub options: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub summary: Summary,
    pub param_counts: ParamCounts,
    pub steps: usize,
    pub headline: String,
    pub pixel_spacing_mm: Option<f64>,
    pub digests: ConfigDigests,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("invalid report: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed<T>(runs: usize, warmup: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs.max(1));
    let mut last = None;
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        last = Some(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    Ok((last.expect("at least one run"), median(&times)))
}

fn method_result(case: &SyntheticCase, field: &DisplacementField, seconds: f64, mm: Option<f64>) -> Result<MethodResult> {
    let px = tre_pixels(&case.landmarks_fixed, &case.landmarks_moving, field)?;
    Ok(MethodResult {
        tre: tre(&case.landmarks_fixed, &case.landmarks_moving, field)?,
        tre_pixels: px,
        tre_mm: mm.map(|s| TreStats {
            mean: px.mean * s,
            max: px.max * s,
            rms: px.rms * s,
        }),
        seconds,
    })
}

/// Per-case outputs kept for plotting.
pub struct CaseFields {
    pub r2n2_fields: Vec<DisplacementField>,
    pub bspline_field: DisplacementField,
}

/// Registers every case with both methods and collects TRE, timing and
/// parameter counts. `on_case` sees each case's fields as they finish.
pub fn compare_methods_with(
    cases: &[SyntheticCase],
    net: &R2N2Net,
    baseline: &BaselineConfig,
    options: &EvalOptions,
    mut on_case: impl FnMut(usize, &SyntheticCase, &CaseFields) -> Result<()>,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Validation("no cases to evaluate".into()));
    }
    if options.steps == 0 {
        return Err(Error::Validation("steps must be >= 1".into()));
    }
    baseline.validate()?;
    let r = net.config().input_resolution;
    for c in cases {
        let g = c.fixed.grid();
        if g.height() != r || g.width() != r {
            return Err(Error::Validation(format!(
                "case {} is {}x{}, network expects {r}x{r}",
                c.seed,
                g.height(),
                g.width()
            )));
        }
        if baseline.finest_resolution() != r {
            return Err(Error::Validation(format!(
                "baseline finest level {} differs from case resolution {r}",
                baseline.finest_resolution()
            )));
        }
    }
    let mm = options.pixel_spacing_mm;
    let mut reports = Vec::with_capacity(cases.len());
    for (k, case) in cases.iter().enumerate() {
        let zero = DisplacementField::zeros(case.fixed.grid());
        let (reg, t_net) = timed(options.timing_runs, options.warmup_runs, || {
            register(net, &case.fixed, &case.moving, options.steps)
        })?;
        let (bs, t_bs) = timed(options.timing_runs, options.warmup_runs, || {
            register_bspline(&case.fixed, &case.moving, baseline)
        })?;
        let report = CaseReport {
            seed: case.seed,
            before: tre(&case.landmarks_fixed, &case.landmarks_moving, &zero)?,
            before_pixels: tre_pixels(&case.landmarks_fixed, &case.landmarks_moving, &zero)?,
            r2n2: method_result(case, reg.final_field(), t_net, mm)?,
            bspline: method_result(case, &bs.field, t_bs, mm)?,
        };
        log::info!(
            "case {}: TRE before {:.3} px, r2n2 {:.3} px ({:.3}s), bspline {:.3} px ({:.3}s)",
            case.seed,
            report.before_pixels.mean,
            report.r2n2.tre_pixels.mean,
            t_net,
            report.bspline.tre_pixels.mean,
            t_bs
        );
        on_case(
            k,
            case,
            &CaseFields {
                r2n2_fields: reg.fields,
                bspline_field: bs.field,
            },
        )?;
        reports.push(report);
    }
    let pick = |s: &TreStats| if options.rms { s.rms } else { s.mean };
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&CaseReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let tre_before = avg(&|c| pick(&c.before_pixels));
    let tre_r2n2 = avg(&|c| pick(&c.r2n2.tre_pixels));
    let tre_bspline = avg(&|c| pick(&c.bspline.tre_pixels));
    let reduction = |after: f64| if tre_before > 0.0 { 1.0 - after / tre_before } else { 0.0 };
    let net_times: Vec<f64> = reports.iter().map(|c| c.r2n2.seconds).collect();
    let bs_times: Vec<f64> = reports.iter().map(|c| c.bspline.seconds).collect();
    let (mt_net, mt_bs) = (median(&net_times), median(&bs_times));
    let sequence = sequence_param_count(options.steps);
    let bspline = bspline_param_count(baseline)?;
    Ok(EvalReport {
        summary: Summary {
            tre_before,
            tre_r2n2,
            tre_bspline,
            max_tre_r2n2: reports.iter().map(|c| c.r2n2.tre_pixels.max).fold(0.0, f64::max),
            max_tre_bspline: reports.iter().map(|c| c.bspline.tre_pixels.max).fold(0.0, f64::max),
            reduction_r2n2: reduction(tre_r2n2),
            reduction_bspline: reduction(tre_bspline),
            median_seconds_r2n2: mt_net,
            median_seconds_bspline: mt_bs,
            speedup: mt_bs / mt_net,
        },
        cases: reports,
        param_counts: ParamCounts {
            sequence,
            bspline,
            ratio: sequence as f64 / bspline as f64,
        },
        steps: options.steps,
        headline: if options.rms { "rms" } else { "mean" }.into(),
        pixel_spacing_mm: mm,
        digests: ConfigDigests {
            network: digest(net.config()),
            baseline: digest(baseline),
            options: digest(options),
        },
    })
}

pub fn compare_methods(
    cases: &[SyntheticCase],
    net: &R2N2Net,
    baseline: &BaselineConfig,
    options: &EvalOptions,
) -> Result<EvalReport> {
    compare_methods_with(cases, net, baseline, options, |_, _, _| Ok(()))
}
