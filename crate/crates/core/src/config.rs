//! Declarative experiment configuration (JSON, one schema version).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScheduleKind, SolverKind};
use crate::error::{Error, Result};
use crate::guidance::DEFAULT_STRENGTH;
use crate::score::{AnalyticGmm, GmmSpec, MlpScoreNet, ScoreBackend};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Exact mixture score: a named preset or a spec file.
    Analytic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preset: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<PathBuf>,
    },
    Mlp { checkpoint: PathBuf },
}

impl BackendSpec {
    pub fn preset(name: &str) -> Self {
        Self::Analytic {
            preset: Some(name.into()),
            spec: None,
        }
    }

    /// `ring`, `two-blobs`, `gaussian`, `analytic:<spec.json>` or `mlp:<checkpoint>`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("mlp:") {
            return Ok(Self::Mlp { checkpoint: p.into() });
        }
        if let Some(p) = s.strip_prefix("analytic:") {
            return Ok(Self::Analytic {
                preset: None,
                spec: Some(p.into()),
            });
        }
        GmmSpec::preset(s).map_err(|_| Error::config("backend", format!("unknown backend `{s}`")))?;
        Ok(Self::preset(s))
    }

    pub fn gmm(&self) -> Result<Option<GmmSpec>> {
        match self {
            Self::Analytic { preset: Some(p), spec: None } => GmmSpec::preset(p).map(Some),
            Self::Analytic { preset: None, spec: Some(path) } => GmmSpec::load(path).map(Some),
            Self::Analytic { .. } => Err(Error::config("backend", "analytic backend needs exactly one of `preset` or `spec`")),
            Self::Mlp { .. } => Ok(None),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ScoreBackend>> {
        match self {
            Self::Mlp { checkpoint } => Ok(Box::new(MlpScoreNet::load(checkpoint)?)),
            _ => Ok(Box::new(AnalyticGmm::new(self.gmm()?.expect("analytic"))?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub solver: SolverKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            steps: 20,
            solver: SolverKind::Ddim,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub s: f64,
    pub gamma_bar: f64,
    /// Thresholds for a frontier sweep.
    pub gamma_bars: Vec<f64>,
    pub strengths: Vec<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s: DEFAULT_STRENGTH,
            gamma_bar: 0.99,
            gamma_bars: Vec::new(),
            strengths: vec![3.75, 7.5, 15.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub lambda: f64,
    /// Defaults to 1.5 · (T + 1).
    pub cost_cap: Option<f64>,
    pub temperature: f64,
    pub epochs: usize,
    pub pairs: usize,
    pub lr: f64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            cost_cap: None,
            temperature: 1.0,
            epochs: 5,
            pairs: 256,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Data distribution: a preset name or a spec file path.
    pub data: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            data: "ring".into(),
            steps: 20_000,
            batch_size: 64,
            lr: 2e-3,
            p_uncond: 0.1,
            hidden: 128,
            layers: 3,
        }
    }
}

impl TrainSettings {
    pub fn gmm(&self) -> Result<GmmSpec> {
        GmmSpec::preset(&self.data).or_else(|_| {
            let p = Path::new(&self.data);
            if p.exists() {
                GmmSpec::load(p)
            } else {
                Err(Error::config("train.data", format!("`{}` is neither a preset nor a file", self.data)))
            }
        })
    }
}

/// Inclusive seed range `a..b` or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Range { start: u64, end: u64 },
    List(Vec<u64>),
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Range { start: 0, end: 99 }
    }
}

impl Seeds {
    /// `a..b` (inclusive) or a comma list.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config("seeds", format!("expected `a..b` or a comma list, got `{s}`"));
        if let Some((a, b)) = s.split_once("..") {
            let start: u64 = a.trim().parse().map_err(|_| bad())?;
            let end: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if end < start {
                return Err(bad());
            }
            return Ok(Seeds::Range { start, end });
        }
        let list = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<Vec<u64>>>()?;
        Ok(Seeds::List(list))
    }

    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::Range { start, end } => (*start..=*end).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_experiment")]
    pub experiment: String,
    pub backend: BackendSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub search: SearchSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Seed for search initialisation, Gumbel noise and training.
    #[serde(default)]
    pub seed: u64,
}

fn default_experiment() -> String {
    "default".into()
}

fn default_out() -> PathBuf {
    "out".into()
}

fn default_jobs() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            experiment: default_experiment(),
            backend: BackendSpec::preset("ring"),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            search: SearchSettings::default(),
            train: TrainSettings::default(),
            seeds: Seeds::default(),
            out: default_out(),
            jobs: default_jobs(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let obj = v.as_object().ok_or_else(|| Error::config("<root>", "config must be a JSON object"))?;
        for field in ["version", "backend"] {
            if !obj.contains_key(field) {
                return Err(Error::config(field, "required field is missing"));
            }
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::config("version", format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.version)));
        }
        if self.schedule.steps < 2 {
            return Err(Error::config("schedule.steps", "need at least 2 steps"));
        }
        if !self.guidance.s.is_finite() {
            return Err(Error::config("guidance.s", "must be finite"));
        }
        if self.guidance.gamma_bar.is_nan() {
            return Err(Error::config("guidance.gamma_bar", "must be a number"));
        }
        if self.guidance.strengths.is_empty() {
            return Err(Error::config("guidance.strengths", "need at least one CFG strength"));
        }
        if self.search.lambda < 0.0 || !self.search.lambda.is_finite() {
            return Err(Error::config("search.lambda", "must be a finite value ≥ 0"));
        }
        if !(self.search.temperature > 0.0) {
            return Err(Error::config("search.temperature", "must be positive"));
        }
        if self.search.epochs == 0 {
            return Err(Error::config("search.epochs", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train.p_uncond) {
            return Err(Error::config("train.p_uncond", "must lie in [0, 1]"));
        }
        if self.seeds.to_vec().is_empty() {
            return Err(Error::config("seeds", "seed set is empty"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        if let BackendSpec::Analytic { preset, spec } = &self.backend {
            if preset.is_some() == spec.is_some() {
                return Err(Error::config("backend", "analytic backend needs exactly one of `preset` or `spec`"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::from_json(r#"{"version": 1, "backend": {"kind": "analytic", "preset": "ring"}}"#).unwrap();
        assert_eq!(c.schedule.steps, 20);
        assert_eq!(c.guidance.s, 7.5);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn missing_field_is_named() {
        let e = ExperimentConfig::from_json(r#"{"version": 1}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "backend"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"backend": {"kind": "mlp", "checkpoint": "m.json"}}"#).unwrap_err();
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(Seeds::parse("0..9").unwrap().to_vec().len(), 10);
        assert_eq!(Seeds::parse("3,1,4").unwrap().to_vec(), vec![3, 1, 4]);
        assert!(Seeds::parse("5..2").is_err());
    }

    #[test]
    fn backend_strings() {
        assert_eq!(BackendSpec::parse("two-blobs").unwrap(), BackendSpec::preset("two-blobs"));
        assert!(matches!(BackendSpec::parse("mlp:x.json").unwrap(), BackendSpec::Mlp { .. }));
        assert!(BackendSpec::parse("nonsense").is_err());
    }
}
