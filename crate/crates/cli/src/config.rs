use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stillframe::evaluation::CompareOptions;
use stillframe::models::MaskSource;
use stillframe::training::TrainConfig;

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: String,
    pub mask_source: MaskSource,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { split: "test".into(), mask_source: MaskSource::GroundTruth, batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotOptions {
    pub locations: usize,
    pub variants: usize,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub batch_size: usize,
}

impl Default for PilotOptions {
    fn default() -> Self {
        Self { locations: 6, variants: 4, seed: 0, mask_source: MaskSource::GroundTruth, batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub frames: usize,
    /// Untimed frames run first.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { frames: 20, warmup: 2, seed: 0 }
    }
}

/// Everything a command reads, from one TOML file plus overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run directory name under `runs_dir`.
    pub name: String,
    pub runs_dir: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub compare: CompareOptions,
    pub pilot: PilotOptions,
    pub bench: BenchOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            runs_dir: PathBuf::from("runs"),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            compare: CompareOptions::default(),
            pilot: PilotOptions::default(),
            bench: BenchOptions::default(),
        }
    }
}

/// Parse `a.b.c=value`. The value is read as a TOML literal and falls back
/// to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Failure::config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), Failure> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("`{}` is not a table", path[..=i].join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Apply one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Failure> {
    let (path, value) = parse_override(spec)?;
    set_path(table, &path, value)
}

impl RunConfig {
    /// Defaults, then the file, then each override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Failure::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Failure::config(format!("run name `{}` must be a plain directory name", self.name)));
        }
        self.train.validate().map_err(Failure::from)?;
        if self.eval.batch_size == 0 || self.compare.batch_size == 0 || self.pilot.batch_size == 0 {
            return Err(Failure::config("batch sizes must be positive"));
        }
        if self.compare.fmm_radius < 1.0 {
            return Err(Failure::config(format!("compare.fmm_radius {} < 1", self.compare.fmm_radius)));
        }
        if self.pilot.locations < 2 || self.pilot.variants < 2 {
            return Err(Failure::config("pilot needs >= 2 locations and >= 2 variants"));
        }
        if self.bench.frames == 0 {
            return Err(Failure::config("bench.frames must be positive"));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
