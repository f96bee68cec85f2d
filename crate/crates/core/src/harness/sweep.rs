use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run, RunOptions, METRICS_FILE};
use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Values for the swept parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepValues {
    List { values: Vec<toml::Value> },
    Uniform { uniform: UniformGrid },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformGrid {
    pub count: usize,
    pub low: f64,
    pub high: f64,
    pub seed: u64,
}

/// One parameter varied over copies of a template experiment. Run `i` gets
/// seed `template.seed + i * seed_stride` and writes to `out_dir/run_{i:03}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub template: ExperimentConfig,
    /// Dotted path into the template, e.g. `experiment.mode.p_update`.
    pub param: String,
    pub values: SweepValues,
    pub seed_stride: u64,
    pub out_dir: PathBuf,
}

/// On disk the template is either a path to an experiment config (relative
/// to the sweep file) or an inline `[template]` table.
#[derive(Deserialize)]
#[serde(untagged)]
enum TemplateRef {
    Path(PathBuf),
    Inline(Box<ExperimentConfig>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    template: TemplateRef,
    param: String,
    #[serde(default)]
    values: Option<Vec<toml::Value>>,
    #[serde(default)]
    uniform: Option<UniformGrid>,
    #[serde(default = "default_stride")]
    seed_stride: u64,
    out_dir: PathBuf,
}

fn default_stride() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub value: serde_json::Value,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub param: String,
    pub runs: Vec<ManifestEntry>,
}

impl SweepSpec {
    /// Parses a sweep file; a template path is resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let f: SweepFile = toml::from_str(text)?;
        let template = match f.template {
            TemplateRef::Path(p) => ExperimentConfig::load(&base.join(p))?,
            TemplateRef::Inline(c) => *c,
        };
        let values = match (f.values, f.uniform) {
            (Some(values), None) => SweepValues::List { values },
            (None, Some(uniform)) => SweepValues::Uniform { uniform },
            _ => return Err(Error::Config("a sweep needs exactly one of `values` and `[uniform]`".into())),
        };
        Ok(Self {
            template,
            param: f.param,
            values,
            seed_stride: f.seed_stride,
            out_dir: f.out_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn grid(&self) -> Vec<toml::Value> {
        match &self.values {
            SweepValues::List { values } => values.clone(),
            SweepValues::Uniform { uniform } => {
                let mut rng = RngState::new(uniform.seed);
                (0..uniform.count)
                    .map(|_| toml::Value::Float(rng.uniform_range(uniform.low, uniform.high)))
                    .collect()
            }
        }
    }

    /// The concrete configs, in run order.
    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let base = toml::Value::try_from(&self.template).map_err(|e| Error::Toml(e.to_string()))?;
        self.grid()
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut doc = base.clone();
                set_path(&mut doc, &self.param, v)?;
                let mut cfg: ExperimentConfig = doc.try_into()?;
                cfg.seed = self.template.seed.wrapping_add(i as u64 * self.seed_stride);
                cfg.out_dir = self.out_dir.join(format!("run_{i:03}"));
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    for k in parents {
        cur = cur
            .get_mut(*k)
            .ok_or_else(|| Error::Config(format!("sweep path {path}: no key {k}")))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("sweep path {path} does not end in a table")))?;
    table.insert((*last).to_string(), value);
    Ok(())
}

/// Runs every grid point in sequence and writes `manifest.json`.
pub fn sweep(spec: &SweepSpec) -> Result<SweepManifest> {
    let configs = spec.configs()?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let mut runs = Vec::with_capacity(configs.len());
    for (i, (cfg, v)) in configs.iter().zip(spec.grid()).enumerate() {
        let summary = run(cfg, &RunOptions::default())?;
        runs.push(ManifestEntry {
            index: i,
            value: serde_json::to_value(&v)?,
            seed: cfg.seed,
            out_dir: cfg.out_dir.clone(),
            metrics: cfg.out_dir.join(METRICS_FILE),
            steps: summary.steps,
            finished: summary.finished,
        });
    }
    let manifest = SweepManifest {
        param: spec.param.clone(),
        runs,
    };
    std::fs::write(spec.out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
