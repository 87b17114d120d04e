//! Run configuration: a TOML file with sections, overridable key by key.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `section.key=value` overrides (applied in the order given).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::InterventionConfig;
use crate::probe::{FinetuneSchedule, FitMode};
use crate::problems::{DatasetSpec, ProblemType};
use crate::provenance::{self, Provenance};
use crate::seed;
use crate::surrogate::SurrogateConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training problems per trained type.
    pub train_per_type: usize,
    /// Evaluation problems per type, all ten types.
    pub eval_per_type: usize,
    /// Problems per untrained type for fitting the surrogate readout.
    pub readout_per_type: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_per_type: 1000, eval_per_type: 200, readout_per_type: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    ClosedForm,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Ridge penalty on the mean-squared-error objective.
    pub lambda: f64,
    pub mode: ProbeMode,
    pub sgd_epochs: usize,
    pub sgd_batch: usize,
    /// Also fit a probe pair at every layer for the layer curves.
    pub all_layers: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lambda: 1e-3, mode: ProbeMode::ClosedForm, sgd_epochs: 100, sgd_batch: 256, all_layers: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Training problems per trained type used for fine-tuning (taken from
    /// the start of the train split).
    pub samples_per_type: usize,
    pub epochs: usize,
    pub step: f64,
    pub patience: usize,
    pub min_improvement: f64,
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let s = FinetuneSchedule::default();
        FinetuneConfig {
            samples_per_type: 1000,
            epochs: s.epochs,
            step: s.step,
            patience: s.patience,
            min_improvement: s.min_improvement,
            eval_every: s.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub threshold: f64,
    pub mix: f64,
    /// Defaults to the surrogate's intervention layer.
    pub layer: Option<usize>,
    pub trained_tags: Vec<ProblemType>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { threshold: 0.8, mix: 0.5, layer: None, trained_tags: ProblemType::TRAINED.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    pub dims: Vec<usize>,
    pub ns: Vec<usize>,
    pub seeds: usize,
    /// Largest n·d for a single estimate.
    pub budget: usize,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig { dims: vec![1024, 2048, 4096], ns: vec![1000, 10_000], seeds: 20, budget: 150_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Symbolic dimension.
    pub d_s: usize,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub gate: GateConfig,
    pub capacity: CapacityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            d_s: 4096,
            run_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            surrogate: SurrogateConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            gate: GateConfig::default(),
            capacity: CapacityConfig::default(),
        }
    }
}

/// Parse a `section.key=value` override. The value is read as a TOML value
/// and falls back to a bare string.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad key in override `{s}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then `text` (TOML), then overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` if given, otherwise start from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_s < 64 {
            return Err(Error::Config(format!("d_s must be at least 64, got {}", self.d_s)));
        }
        self.surrogate.validate()?;
        if self.data.train_per_type == 0 || self.data.eval_per_type == 0 || self.data.readout_per_type == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if !self.probe.lambda.is_finite() || self.probe.lambda < 0.0 {
            return Err(Error::Config(format!("probe.lambda must be finite and nonnegative, got {}", self.probe.lambda)));
        }
        if self.probe.sgd_batch == 0 {
            return Err(Error::Config("probe.sgd_batch must be positive".into()));
        }
        if !self.finetune.step.is_finite() || self.finetune.step <= 0.0 {
            return Err(Error::Config(format!("finetune.step must be positive, got {}", self.finetune.step)));
        }
        if self.finetune.patience == 0 {
            return Err(Error::Config("finetune.patience must be positive".into()));
        }
        if self.capacity.seeds == 0 {
            return Err(Error::Config("capacity.seeds must be positive".into()));
        }
        self.intervention().validate()
    }

    /// Hash of everything that affects results; the run directory is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        provenance::config_hash(&c)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash(), self.seed)
    }

    /// Seed of a named component, derived from the master seed.
    pub fn seed_for(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::uniform(self.data.train_per_type, self.data.eval_per_type);
        for n in spec.readout.values_mut() {
            *n = self.data.readout_per_type;
        }
        spec
    }

    pub fn intervention(&self) -> InterventionConfig {
        InterventionConfig {
            threshold: self.gate.threshold,
            mix: self.gate.mix,
            layer: self.gate.layer.unwrap_or(self.surrogate.intervention_layer),
            trained_tags: self.gate.trained_tags.clone(),
        }
    }

    pub fn fit_mode(&self) -> FitMode {
        match self.probe.mode {
            ProbeMode::ClosedForm => FitMode::ClosedForm,
            ProbeMode::Sgd => FitMode::Sgd {
                epochs: self.probe.sgd_epochs,
                batch: self.probe.sgd_batch,
                seed: self.seed_for("probe-sgd"),
            },
        }
    }

    pub fn finetune_schedule(&self) -> FinetuneSchedule {
        let f = &self.finetune;
        FinetuneSchedule {
            epochs: f.epochs,
            step: f.step,
            patience: f.patience,
            min_improvement: f.min_improvement,
            eval_every: f.eval_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let text = "seed = 9\n[gate]\nthreshold = 0.7\n[surrogate]\nlayers = 6\nintervention_layer = 3\n";
        let c = RunConfig::from_toml(text, &[]).unwrap();
        assert_eq!((c.seed, c.gate.threshold, c.surrogate.layers), (9, 0.7, 6));
        assert_eq!(c.intervention().layer, 3);
        // Untouched keys keep their defaults.
        assert_eq!(c.gate.mix, 0.5);
    }

    #[test]
    fn overrides_win() {
        let text = "seed = 9\n[gate]\nthreshold = 0.7\n";
        let o = vec!["gate.threshold=0.9".to_string(), "seed=3".into(), "run_dir=out/x".into(), "probe.mode=sgd".into()];
        let c = RunConfig::from_toml(text, &o).unwrap();
        assert_eq!((c.seed, c.gate.threshold), (3, 0.9));
        assert_eq!(c.run_dir, PathBuf::from("out/x"));
        assert_eq!(c.probe.mode, ProbeMode::Sgd);
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn bad_configs() {
        for (text, o) in [
            ("sed = 1", vec![]),
            ("", vec!["gate.mix=2".to_string()]),
            ("", vec!["d_s=10".to_string()]),
            ("", vec!["nokey".to_string()]),
            ("seed = \"x\"", vec![]),
            ("[gate]\nthreshold = 0.0", vec![]),
        ] {
            assert!(matches!(RunConfig::from_toml(text, &o), Err(Error::Config(_))), "{text} {o:?}");
        }
    }
}
