use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use r2n2_core::baseline::{register_bspline, BaselineConfig};
use r2n2_core::data::{
    case_seed, generate_case, load_case, read_case_set, save_case, CaseEntry, CaseSetManifest, SyntheticCase,
    CASE_INFO_FILE, CASE_SET_FILE,
};
use r2n2_core::deform::{sequence_param_count, write_params_table};
use r2n2_core::eval::plots::{write_magnitude_heatmap, write_quiver, write_tre_bar_chart};
use r2n2_core::eval::compare_methods_with;
use r2n2_core::io::{read_image, write_field, write_image};
use r2n2_core::net::{load_checkpoint, register as register_r2n2, save_checkpoint, NetConfig, R2N2Net};
use r2n2_core::objectives::mse_loss;
use r2n2_core::train::{PairSource, SeriesPairs, SyntheticPairs, Trainer};
use r2n2_core::{data::load_series, warp, Error};

use crate::config::{
    resolve, snapshot, EvalRun, Method, Overrides, RegisterRun, SynthRun, TrainRun, SNAPSHOT_FILE,
};
use crate::{CliError, EvalArgs, RegisterArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.r2nc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FAILURE_FILE: &str = "failure.json";

type CliResult<T = ()> = Result<T, CliError>;

fn seed_value(seed: Option<u64>) -> CliResult<Option<i64>> {
    seed.map(|s| i64::try_from(s).map_err(|_| CliError::Usage(format!("seed {s} does not fit in a signed 64-bit integer"))))
        .transpose()
}

fn int(v: usize) -> i64 {
    v as i64
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn write_snapshot<T: Serialize>(dir: &Path, value: &T) -> CliResult {
    write_text(&dir.join(SNAPSHOT_FILE), &snapshot(value))
}

pub fn synth(args: SynthArgs) -> CliResult {
    let mut o = Overrides::default();
    o.parse_assignments(&args.common.set)?;
    o.set_path("out_dir", &args.common.out_dir);
    o.set_opt("resolution", args.resolution.map(int));
    o.set_opt("count", args.count.map(int));
    o.set_opt("deform_scale", args.deform_scale);
    o.set_opt("seed", seed_value(args.seed)?);
    let run: SynthRun = resolve(&SynthRun::default(), args.common.config.as_deref(), o)?;
    if !(run.deform_scale >= 0.0) {
        return Err(CliError::Usage(format!("deform_scale must be >= 0, got {}", run.deform_scale)));
    }
    create_dir(&run.out_dir)?;
    write_snapshot(&run.out_dir, &run)?;
    let mut manifest = CaseSetManifest {
        resolution: run.resolution,
        deform_scale: run.deform_scale,
        n_blobs: run.n_blobs,
        seed: run.seed,
        cases: Vec::with_capacity(run.count),
    };
    for k in 0..run.count {
        let seed = case_seed(run.seed, k);
        let case = generate_case(run.resolution, run.deform_scale, run.n_blobs, seed)?;
        let dir = PathBuf::from(format!("case_{k:03}"));
        save_case(&run.out_dir.join(&dir), &case)?;
        manifest.cases.push(CaseEntry { dir, seed });
    }
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_text(&run.out_dir.join(CASE_SET_FILE), &text)?;
    log::info!("wrote {} cases to {}", run.count, run.out_dir.display());
    Ok(())
}

/// Keeps the first `iterations` lines of an existing metric stream so a
/// resumed run continues it without duplicates.
fn truncate_metrics(path: &Path, iterations: u64) -> CliResult<File> {
    let mut kept = String::new();
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().take(iterations as usize) {
            kept.push_str(&line.map_err(|e| Error::io(path, e))?);
            kept.push('\n');
        }
    }
    write_text(path, &kept)?;
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e).into())
}

pub fn train(args: TrainArgs) -> CliResult {
    let mut default = TrainRun {
        out_dir: "run".into(),
        ..TrainRun::default()
    };
    if let Some(div) = args.toy {
        if div == 0 {
            return Err(CliError::Usage("--toy divisor must be >= 1".into()));
        }
        default.net = NetConfig::toy(default.net.input_resolution, div);
    }
    let mut o = Overrides::default();
    o.parse_assignments(&args.common.set)?;
    o.set_path("out_dir", &args.common.out_dir);
    o.set_opt("net.input_resolution", args.resolution.map(int));
    o.set_path("data.series", &args.series);
    o.set_opt("train.iterations", args.iterations.map(|v| v as i64));
    o.set_opt("train.learning_rate", args.learning_rate);
    o.set_opt("train.steps", args.steps.map(int));
    o.set_opt("train.lambda", args.lambda);
    o.set_opt("train.seed", seed_value(args.seed)?);
    if args.no_noise {
        o.set("train.noise_std", 0.0);
        o.set("train.dropconnect_rate", 0.0);
    }
    let run: TrainRun = resolve(&default, args.common.config.as_deref(), o)?;
    run.net.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    run.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut source: Box<dyn PairSource> = match &run.data.series {
        Some(path) => {
            let series = load_series(path)?;
            let r = run.net.input_resolution;
            if let Some(img) = series.images.first() {
                let g = img.grid();
                if g.height() != r || g.width() != r {
                    return Err(Error::Validation(format!(
                        "series images are {}x{}, network expects {r}x{r}",
                        g.height(),
                        g.width()
                    ))
                    .into());
                }
            }
            Box::new(SeriesPairs::new(series)?)
        }
        None => Box::new(SyntheticPairs {
            resolution: run.net.input_resolution,
            deform_scale: run.data.deform_scale,
            n_blobs: run.data.n_blobs,
        }),
    };

    create_dir(&run.out_dir)?;
    write_snapshot(&run.out_dir, &run)?;
    let ck_path = run.out_dir.join(CHECKPOINT_FILE);
    let metrics_path = run.out_dir.join(METRICS_FILE);
    let mut trainer = if ck_path.exists() {
        let ck = load_checkpoint(&ck_path)?;
        if *ck.net.config() != run.net {
            return Err(Error::Validation(format!(
                "{} was trained with a different network configuration",
                ck_path.display()
            ))
            .into());
        }
        log::info!("resuming from iteration {}", ck.iteration);
        Trainer::resume(ck, run.train.clone())?
    } else {
        Trainer::new(R2N2Net::new(run.net.clone(), run.train.seed)?, run.train.clone())?
    };
    let mut metrics = truncate_metrics(&metrics_path, trainer.iteration())?;
    log::info!(
        "training {} parameters for {} iterations",
        trainer.net().params().scalar_count(),
        run.train.iterations
    );
    let every = run.train.checkpoint_every.max(1);
    let outcome = trainer.run(source.as_mut(), |t, m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if m.iteration % every == 0 {
            save_checkpoint(&ck_path, &t.checkpoint())?;
        }
        if m.iteration % 10 == 0 {
            log::info!("iteration {} loss {:.6} grad norm {:.4}", m.iteration, m.loss, m.grad_norm);
        }
        Ok(())
    });
    match outcome {
        Ok(_) => {
            save_checkpoint(&ck_path, &trainer.checkpoint())?;
            Ok(())
        }
        Err(e @ Error::NonFinite(_)) => {
            write_json(
                &run.out_dir.join(FAILURE_FILE),
                &serde_json::json!({
                    "error": e.to_string(),
                    "last_good_iteration": trainer.iteration(),
                    "checkpoint": ck_path.exists().then_some(CHECKPOINT_FILE),
                }),
            )?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct RegisterDiagnostics {
    method: Method,
    mse_before: f64,
    mse_after: f64,
    param_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<r2n2_core::baseline::BaselineDiagnostics>,
    seconds: f64,
}

pub fn register(args: RegisterArgs) -> CliResult {
    let mut default = RegisterRun::default();
    if args.scaled_baseline {
        default.baseline = BaselineConfig::scaled();
    }
    let mut o = Overrides::default();
    o.parse_assignments(&args.common.set)?;
    o.set_path("out_dir", &args.common.out_dir);
    o.set_path("fixed", &args.fixed);
    o.set_path("moving", &args.moving);
    o.set_path("checkpoint", &args.checkpoint);
    o.set_opt("steps", args.steps.map(int));
    if let Some(m) = args.method {
        o.set("method", if m == Method::R2n2 { "r2n2" } else { "bspline" });
    }
    let run: RegisterRun = resolve(&default, args.common.config.as_deref(), o)?;
    let fixed_path = run.fixed.clone().ok_or_else(|| CliError::Usage("--fixed is required".into()))?;
    let moving_path = run.moving.clone().ok_or_else(|| CliError::Usage("--moving is required".into()))?;
    if run.steps == 0 {
        return Err(CliError::Usage("steps must be >= 1".into()));
    }
    let net = match run.method {
        Method::R2n2 => {
            let ck = run
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint is required for method r2n2".into()))?;
            Some(load_checkpoint(ck)?.net)
        }
        Method::Bspline => {
            run.baseline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            None
        }
    };
    let fixed = read_image(&fixed_path)?;
    let moving = read_image(&moving_path)?;
    if !fixed.grid().same_shape(moving.grid()) {
        return Err(Error::Validation("fixed and moving images differ in size".into()).into());
    }
    create_dir(&run.out_dir)?;
    write_snapshot(&run.out_dir, &run)?;
    let start = Instant::now();
    let (field, diagnostics) = match net {
        Some(net) => {
            let r = net.config().input_resolution;
            let g = fixed.grid();
            if g.height() != r || g.width() != r {
                return Err(Error::Validation(format!(
                    "images are {}x{}, network expects {r}x{r}",
                    g.height(),
                    g.width()
                ))
                .into());
            }
            let reg = register_r2n2(&net, &fixed, &moving, run.steps)?;
            write_params_table(&run.out_dir.join("params.csv"), &reg.params)?;
            let field = reg.fields.last().expect("steps >= 1").clone();
            (field, (Some(run.steps), None, sequence_param_count(run.steps)))
        }
        None => {
            let reg = register_bspline(&fixed, &moving, &run.baseline)?;
            let count = reg.diagnostics.param_count;
            (reg.field, (None, Some(reg.diagnostics), count))
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let warped = warp(&moving, &field)?;
    write_field(&run.out_dir.join("field.r2nf"), &field)?;
    write_image(&run.out_dir.join("warped.png"), &warped)?;
    let (steps, baseline, param_count) = diagnostics;
    write_json(
        &run.out_dir.join("diagnostics.json"),
        &RegisterDiagnostics {
            method: run.method,
            mse_before: mse_loss(&fixed, &moving)?,
            mse_after: mse_loss(&fixed, &warped)?,
            param_count,
            steps,
            baseline,
            seconds,
        },
    )?;
    log::info!("registered in {seconds:.3}s");
    Ok(())
}

fn load_cases(path: &Path) -> CliResult<Vec<SyntheticCase>> {
    if path.is_dir() {
        if path.join(CASE_SET_FILE).exists() {
            return Ok(read_case_set(&path.join(CASE_SET_FILE))?.1);
        }
        if path.join(CASE_INFO_FILE).exists() {
            return Ok(vec![load_case(path)?]);
        }
        return Err(Error::Validation(format!("{} holds neither {CASE_SET_FILE} nor {CASE_INFO_FILE}", path.display())).into());
    }
    Ok(read_case_set(path)?.1)
}

pub fn eval(args: EvalArgs) -> CliResult {
    let mut default = EvalRun::default();
    if args.scaled_baseline {
        default.baseline = BaselineConfig::scaled();
    }
    let mut o = Overrides::default();
    o.parse_assignments(&args.common.set)?;
    o.set_path("out_dir", &args.common.out_dir);
    o.set_path("cases", &args.cases);
    o.set_path("checkpoint", &args.checkpoint);
    o.set_opt("eval.steps", args.steps.map(int));
    o.set_opt("eval.timing_runs", args.timing_runs.map(int));
    o.set_opt("eval.pixel_spacing_mm", args.pixel_spacing_mm);
    if args.rms {
        o.set("eval.rms", true);
    }
    let run: EvalRun = resolve(&default, args.common.config.as_deref(), o)?;
    let cases_path = run.cases.clone().ok_or_else(|| CliError::Usage("--cases is required".into()))?;
    let ck_path = run.checkpoint.clone().ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let net = load_checkpoint(&ck_path)?.net;
    let cases = load_cases(&cases_path)?;
    create_dir(&run.out_dir)?;
    write_snapshot(&run.out_dir, &run)?;
    let out = run.out_dir.clone();
    let snapshot_steps = run.eval.snapshot_steps.clone();
    let report = compare_methods_with(&cases, &net, &run.baseline, &run.eval, |k, _, fields| {
        let dir = out.join(format!("case_{k:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let top = fields
            .r2n2_fields
            .iter()
            .chain(std::iter::once(&fields.bspline_field))
            .map(|f| f.max_magnitude())
            .fold(0.0, f64::max);
        let stride = (fields.bspline_field.grid().width() / 16).max(1);
        for &t in &snapshot_steps {
            if t == 0 || t > fields.r2n2_fields.len() {
                continue;
            }
            let f = &fields.r2n2_fields[t - 1];
            write_quiver(&dir.join(format!("r2n2_t{t:02}_quiver.svg")), f, stride, &format!("displacement t={t}"))?;
            write_magnitude_heatmap(&dir.join(format!("r2n2_t{t:02}_magnitude.png")), f, Some(top))?;
        }
        write_quiver(&dir.join("bspline_quiver.svg"), &fields.bspline_field, stride, "b-spline")?;
        write_magnitude_heatmap(&dir.join("bspline_magnitude.png"), &fields.bspline_field, Some(top))
    })?;
    report.write(&out.join("report.json"))?;
    write_tre_bar_chart(&out.join("tre.svg"), &report)?;
    let s = &report.summary;
    log::info!(
        "TRE before {:.3}px, r2n2 {:.3}px ({:.1}% reduction), b-spline {:.3}px ({:.1}%); speedup {:.2}x; params {} vs {} ({:.1}%)",
        s.tre_before,
        s.tre_r2n2,
        100.0 * s.reduction_r2n2,
        s.tre_bspline,
        100.0 * s.reduction_bspline,
        s.speedup,
        report.param_counts.sequence,
        report.param_counts.bspline,
        100.0 * report.param_counts.ratio
    );
    Ok(())
}
