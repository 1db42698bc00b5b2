//! Layered run configuration: built-in defaults, then a TOML file, then
//! command-line flags. Layers are merged as TOML tables and deserialized
//! once, so unknown keys are rejected by name wherever they appear.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use r2n2_core::baseline::BaselineConfig;
use r2n2_core::eval::EvalOptions;
use r2n2_core::net::NetConfig;
use r2n2_core::train::TrainConfig;

use crate::CliError;

/// Name of the resolved-config snapshot written next to every run's outputs.
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub resolution: usize,
    pub count: usize,
    pub deform_scale: f64,
    pub n_blobs: usize,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            out_dir: "cases".into(),
            seed: 0,
            resolution: 64,
            count: 20,
            deform_scale: 0.08,
            n_blobs: r2n2_core::data::DEFAULT_BLOBS,
        }
    }
}

/// Where training pairs come from. Without `series`, fresh synthetic cases
/// at the network's input resolution are drawn every iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series: Option<PathBuf>,
    pub deform_scale: f64,
    pub n_blobs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            series: None,
            deform_scale: 0.08,
            n_blobs: r2n2_core::data::DEFAULT_BLOBS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    R2n2,
    Bspline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRun {
    pub out_dir: PathBuf,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moving: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Sequence length for the network.
    pub steps: usize,
    pub baseline: BaselineConfig,
}

impl Default for RegisterRun {
    fn default() -> Self {
        Self {
            out_dir: "registration".into(),
            method: Method::R2n2,
            fixed: None,
            moving: None,
            checkpoint: None,
            steps: 25,
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub out_dir: PathBuf,
    /// A `cases.toml` manifest, a directory holding one, or a single case
    /// directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub eval: EvalOptions,
    pub baseline: BaselineConfig,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            out_dir: "evaluation".into(),
            cases: None,
            checkpoint: None,
            eval: EvalOptions::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

/// Flag overrides as `(dotted key, value)`.
#[derive(Default)]
pub struct Overrides(pub Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.push((key.to_string(), value.into()));
    }

    pub fn set_opt<T: Into<Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn set_path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(p) = value {
            self.set(key, p.to_string_lossy().into_owned());
        }
    }

    /// Parses `key=value` pairs from `--set`; the value is read as a TOML
    /// literal, falling back to a plain string.
    pub fn parse_assignments(&mut self, items: &[String]) -> Result<(), CliError> {
        for item in items {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{item}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Usage(format!("--set has an empty key in `{item}`")));
            }
            let value = format!("v = {raw}")
                .parse::<Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(raw.trim().to_string()));
            self.set(key, value);
        }
        Ok(())
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{key}`: `{p}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Resolves `default < file < overrides` into `T`.
pub fn resolve<T>(default: &T, file: Option<&Path>, overrides: Overrides) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = Table::try_from(default).map_err(|e| CliError::Usage(format!("default config: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for (key, value) in overrides.0 {
        set_dotted(&mut table, &key, value)?;
    }
    let origin = file.map(|p| format!("config {}", p.display())).unwrap_or_else(|| "config".into());
    T::deserialize(Value::Table(table)).map_err(|e| CliError::Usage(format!("{origin}: {}", e.message())))
}

pub fn snapshot<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("resolved config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "count = 3\nseed = 9\n").unwrap();
        let mut o = Overrides::default();
        o.set("seed", 4i64);
        let r: SynthRun = resolve(&SynthRun::default(), Some(&path), o).unwrap();
        assert_eq!((r.count, r.seed, r.resolution), (3, 4, 64));
    }

    #[test]
    fn nested_sections_merge_partially() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlambda = 0.5\n[net]\nsigma_max = 0.2\n").unwrap();
        let mut o = Overrides::default();
        o.parse_assignments(&["train.steps=3".into(), "out_dir=somewhere".into()]).unwrap();
        let r: TrainRun = resolve(&TrainRun::default(), Some(&path), o).unwrap();
        assert_eq!(r.train.lambda, 0.5);
        assert_eq!(r.train.steps, 3);
        assert_eq!(r.train.learning_rate, 1e-4);
        assert_eq!(r.net.sigma_max, 0.2);
        assert_eq!(r.net.input_resolution, 256);
        assert_eq!(r.out_dir, PathBuf::from("somewhere"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlearning_rat = 0.5\n").unwrap();
        let err = resolve(&TrainRun::default(), Some(&path), Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let r = EvalRun {
            cases: Some("x/cases.toml".into()),
            ..EvalRun::default()
        };
        let back: EvalRun = toml::from_str(&snapshot(&r)).unwrap();
        assert_eq!(back, r);
        let t = TrainRun::default();
        let back: TrainRun = toml::from_str(&snapshot(&t)).unwrap();
        assert_eq!(back, t);
    }
}
