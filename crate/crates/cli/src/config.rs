//! Run configuration: a TOML file describing the data, the task schedule,
//! the learners and the seeds of an experiment.

use std::path::{Path, PathBuf};

use cvr_core::datagen::GeneratorConfig;
use cvr_core::learners::LearnerSpec;
use cvr_core::sim::SimConfig;
use cvr_core::{TaskSchedule, Timestamp};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Generated in memory; the generator seed is replaced by the run seed.
    Synthetic,
    /// A canonical log. `dim` and `n_fields` fall back to the sidecar
    /// written by `cvrsim gen`, then to the widest record in the file.
    Canonical,
    Criteo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_fields: Option<usize>,
    /// Hash buckets per field for Criteo logs.
    #[serde(default = "default_buckets")]
    pub n_buckets: u32,
}

impl DataConfig {
    pub fn canonical(path: PathBuf) -> Self {
        Self {
            kind: DataKind::Canonical,
            generator: None,
            path: Some(path),
            dim: None,
            n_fields: None,
            n_buckets: default_buckets(),
        }
    }
}

fn default_buckets() -> u32 {
    1 << 16
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory; one `seed-N` subdirectory per seed.
    pub output: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub precision: Precision,
    /// Optional; must equal the last schedule delay when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_max: Option<Timestamp>,
    /// Task delays in seconds.
    pub schedule: TaskSchedule,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
    #[serde(default)]
    pub sim: SimConfig,
    pub data: DataConfig,
    /// Hyperparameters shared by every learner; per-learner `hyper` keys win.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub hyper: toml::Table,
    pub learners: Vec<toml::Table>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn d_max(&self) -> Timestamp {
        self.schedule.d_max()
    }

    /// Learner specs with the shared hyperparameters merged in.
    pub fn learner_specs(&self) -> Result<Vec<LearnerSpec>, CliError> {
        let known = hyper_keys();
        if let Some(k) = self.hyper.keys().find(|k| !known.contains(k)) {
            return Err(CliError::Config(format!("hyper.{k}: unknown hyperparameter")));
        }
        let mut specs = Vec::with_capacity(self.learners.len());
        for (i, raw) in self.learners.iter().enumerate() {
            let field = |m: String| CliError::Config(format!("learners[{i}]: {m}"));
            let mut table = raw.clone();
            let mut hyper = self.hyper.clone();
            match table.remove("hyper") {
                Some(toml::Value::Table(own)) => {
                    if let Some(k) = own.keys().find(|k| !known.contains(k)) {
                        return Err(field(format!("hyper.{k}: unknown hyperparameter")));
                    }
                    hyper.extend(own);
                }
                Some(_) => return Err(field("hyper must be a table".into())),
                None => {}
            }
            table.insert("hyper".into(), toml::Value::Table(hyper));
            let spec: LearnerSpec = toml::Value::Table(table).try_into().map_err(|e| field(format!("{e}")))?;
            spec.validate(self.d_max()).map_err(|e| field(e.to_string()))?;
            specs.push(spec);
        }
        Ok(specs)
    }

    pub fn validate(&self) -> Result<Vec<LearnerSpec>, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        if let Some(d) = self.d_max {
            if d != self.d_max() {
                return bad(format!("schedule: last delay {} must equal d_max = {d}", self.d_max()));
            }
        }
        if self.sim.step <= 0 {
            return bad(format!("sim.step: must be positive, got {}", self.sim.step));
        }
        if !(0.0..1.0).contains(&self.sim.warmup) {
            return bad(format!("sim.warmup: must lie in [0, 1), got {}", self.sim.warmup));
        }
        if let (Some(s), Some(e)) = (self.sim.eval_start, self.sim.eval_end) {
            if s >= e {
                return bad(format!("sim.eval_start: {s} is not before eval_end {e}"));
            }
        }
        let d = &self.data;
        match d.kind {
            DataKind::Synthetic => {
                let Some(generator) = &d.generator else {
                    return bad("data.generator: required for synthetic data".into());
                };
                if d.path.is_some() {
                    return bad("data.path: not used by synthetic data".into());
                }
                if generator.d_max != self.d_max() {
                    return bad(format!(
                        "data.generator.d_max: {} differs from the schedule's d_max {}",
                        generator.d_max,
                        self.d_max()
                    ));
                }
                if let Err(e) = generator.validate() {
                    return bad(format!("data.generator: {e}"));
                }
                if let Some(end) = self.sim.eval_end {
                    if end > generator.horizon - self.d_max() {
                        return bad(format!("sim.eval_end: {end} leaves less than d_max of stream after it"));
                    }
                }
            }
            DataKind::Canonical | DataKind::Criteo => {
                if d.generator.is_some() {
                    return bad("data.generator: only used by synthetic data".into());
                }
                match &d.path {
                    None => return bad("data.path: required for log data".into()),
                    Some(p) if !p.is_file() => return bad(format!("data.path: no such file {}", p.display())),
                    _ => {}
                }
            }
        }
        let specs = self.learner_specs()?;
        if specs.is_empty() {
            return bad("learners: at least one learner is required".into());
        }
        let mut names: Vec<String> = specs.iter().map(|s| s.display_name()).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("learners: duplicate learner name {:?}", w[0]));
        }
        Ok(specs)
    }

    /// Fully resolved config for one seed: every learner carries its own
    /// hyperparameters, so the snapshot reproduces the run on its own.
    pub fn snapshot(&self, seed: u64, specs: &[LearnerSpec]) -> String {
        let mut cfg = self.clone();
        cfg.seeds = vec![seed];
        cfg.hyper = toml::Table::new();
        cfg.learners = specs
            .iter()
            .map(|s| toml::Table::try_from(s).expect("learner spec serializes"))
            .collect();
        if let Some(g) = &mut cfg.data.generator {
            g.seed = seed;
        }
        toml::to_string(&cfg).expect("config serializes")
    }
}

fn hyper_keys() -> Vec<String> {
    let defaults = toml::Table::try_from(cvr_core::learners::Hyper::default()).expect("hyper serializes");
    let mut keys: Vec<String> = defaults.keys().cloned().collect();
    keys.extend(["policy_lr".to_string(), "prior_cvr".to_string()]);
    keys
}
