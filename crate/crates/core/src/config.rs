//! Experiment configuration: strict TOML with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::grpo::{RunOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_eval: usize,
    pub eval_strengths: Vec<f64>,
    /// Also evaluate every this many steps; 0 evaluates after the last step only.
    pub eval_every: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_eval: 1000,
            eval_strengths: vec![0.0, 200.0],
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub log_diversity_every: usize,
    pub record_replay: bool,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 5,
            log_diversity_every: 5,
            record_replay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text`, apply `key=value` overrides, then deserialize strictly.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, or start from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.eval.n_eval == 0 {
            return Err(Error::Config("eval.n_eval must be >= 1".into()));
        }
        if self
            .eval
            .eval_strengths
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::Config(
                "eval.eval_strengths must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            n_eval: self.eval.n_eval,
            eval_strengths: self.eval.eval_strengths.clone(),
            eval_every: self.eval.eval_every,
            checkpoint_every: self.io.checkpoint_every,
            log_diversity_every: self.io.log_diversity_every,
            record_replay: self.io.record_replay,
        }
    }
}

/// `schedule.*` is shorthand for `train.schedule.*`.
fn key_path(key: &str) -> Vec<String> {
    let mut parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if parts.first().map(String::as_str) == Some("schedule") {
        parts.insert(0, "train".into());
    }
    parts
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path = key_path(key.trim());
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, parents) = path.split_last().expect("nonempty");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(last.clone(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::OptimizerKind;
    use crate::schedule::ScheduleKind;

    #[test]
    fn empty_config_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.n1, 6);
        assert_eq!(c.train.t_max, 60);
        assert_eq!(c.eval.eval_strengths, vec![0.0, 200.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nn3 = 1\n", "[bogus]\n", "[train.schedule]\nmid = 1\n", "x = 1\n"] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        let o = vec!["train.nope=3".to_string()];
        assert!(ExperimentConfig::from_toml_with("", &o).is_err());
    }

    #[test]
    fn overrides_apply() {
        let o: Vec<String> = [
            "train.n2=0",
            "schedule.kind=constant",
            "schedule.alpha0=0",
            "train.optimizer=\"sgd\"",
            "eval.eval_strengths=[0, 100, 300]",
            "io.out_dir=/tmp/x",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let c = ExperimentConfig::from_toml_with("[train]\nn1 = 12\n", &o).unwrap();
        assert_eq!((c.train.n1, c.train.n2), (12, 0));
        assert_eq!(c.train.schedule.kind, ScheduleKind::Constant);
        assert_eq!(c.train.schedule.alpha0, 0.0);
        assert_eq!(c.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.eval.eval_strengths, vec![0.0, 100.0, 300.0]);
        assert_eq!(c.io.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn snapshot_roundtrips() {
        let o = vec!["train.lr=0.25".to_string(), "task.grid=20".to_string()];
        let c = ExperimentConfig::from_toml_with("", &o).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["train.n1=0", "eval.n_eval=0", "task.grid=8", "eval.eval_strengths=[-1]"] {
            let o = vec![o.to_string(), "train.n2=1".to_string()];
            assert!(matches!(
                ExperimentConfig::from_toml_with("", &o),
                Err(Error::Config(_))
            ));
        }
        assert!(ExperimentConfig::from_toml_with("", &["novalue".to_string()]).is_err());
        assert!(ExperimentConfig::load(Some(Path::new("/nonexistent/cfg.toml")), &[])
            .unwrap_err()
            .to_string()
            .contains("/nonexistent/cfg.toml"));
    }
}
