//! The JSON run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use forge_core::curriculum::{Stage, StageConfig};
use forge_core::finecap::{CurateOptions, SamplingParams, StageRules};
use forge_core::models::ModelConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FORGE_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    /// Recall cutoffs reported by `eval --task retrieval`.
    pub recall_k: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            recall_k: vec![1, 5, 10],
        }
    }
}

/// Curation knobs; the sampling seed derives from the root seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateSettings {
    /// Largest pHash distance counted as a duplicate.
    pub hamming_threshold: u32,
    pub sampling: SamplingParams,
}

/// Default locations; command-line flags win.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    /// Root of every random stream.
    pub seed: u64,
    /// Multiplies each stage's `samples_target`.
    #[serde(default = "one")]
    pub scale: f64,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    #[serde(default = "default_rules")]
    pub rules: BTreeMap<String, StageRules>,
    #[serde(default)]
    pub curate: CurateSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub paths: Paths,
}

fn one() -> f64 {
    1.0
}

fn default_rules() -> BTreeMap<String, StageRules> {
    ["stage1", "stage2", "stage3"]
        .into_iter()
        .map(|n| (n.to_string(), StageRules::preset(n).expect("builtin preset")))
        .collect()
}

impl ForgeConfig {
    pub fn toy() -> Self {
        Self {
            seed: 0,
            scale: 1.0,
            model: ModelConfig::toy(),
            stage1: StageConfig::toy(Stage::I),
            stage2: StageConfig::toy(Stage::II),
            stage3: StageConfig::toy(Stage::III),
            rules: default_rules(),
            curate: CurateSettings::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }

    /// Full-scale hyperparameters; never trained at desk scale.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            stage1: StageConfig::paper(Stage::I),
            stage2: StageConfig::paper(Stage::II),
            stage3: StageConfig::paper(Stage::III),
            ..Self::toy()
        }
    }

    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            ConfigError::invalid(field, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies the `FORGE_SEED` override if set.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::invalid(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: forge_core::Error| match e {
            forge_core::Error::Config { field, reason } => ConfigError::Invalid { field, reason },
            other => ConfigError::invalid("<root>", other.to_string()),
        };
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(ConfigError::invalid("scale", "must be positive"));
        }
        self.model.validate().map_err(|e| prefixed(core(e), "model"))?;
        for (name, cfg, stage) in [
            ("stage1", &self.stage1, Stage::I),
            ("stage2", &self.stage2, Stage::II),
            ("stage3", &self.stage3, Stage::III),
        ] {
            if cfg.stage != stage {
                return Err(ConfigError::invalid(format!("{name}.stage"), "does not match its slot"));
            }
            cfg.validate().map_err(core)?;
        }
        for (name, r) in &self.rules {
            validate_rules(r).map_err(|(f, why)| ConfigError::invalid(format!("rules.{name}.{f}"), why))?;
        }
        self.curate
            .sampling
            .validate()
            .map_err(|e| prefixed(core(e), "curate.sampling"))?;
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(ConfigError::invalid("eval.iou_threshold", "must lie in [0, 1]"));
        }
        if self.eval.recall_k.contains(&0) {
            return Err(ConfigError::invalid("eval.recall_k", "cutoffs must be at least 1"));
        }
        Ok(())
    }

    pub fn stage_slot(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::I => &self.stage1,
            Stage::II => &self.stage2,
            Stage::III => &self.stage3,
        }
    }

    /// The stage with `scale` applied to its sample budget, never below one
    /// batch.
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let mut cfg = self.stage_slot(stage).clone();
        let scaled = (cfg.samples_target as f64 * self.scale).round() as u64;
        cfg.samples_target = scaled.max(cfg.batch_size as u64);
        cfg
    }

    pub fn curate_options(&self) -> CurateOptions {
        CurateOptions {
            hamming_threshold: self.curate.hamming_threshold,
            sampling: self.curate.sampling.clone(),
            seed: forge_core::rng::derive_seed(self.seed, forge_core::rng::streams::SAMPLING),
        }
    }

    pub fn rules(&self, name: &str) -> Option<&StageRules> {
        self.rules.get(name)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn prefixed(e: ConfigError, prefix: &str) -> ConfigError {
    match e {
        ConfigError::Invalid { field, reason } if !field.starts_with(prefix) => ConfigError::Invalid {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

fn validate_rules(r: &StageRules) -> Result<(), (&'static str, &'static str)> {
    if let Some([lo, hi]) = r.aspect_range {
        if !(lo > 0.0 && lo <= hi) {
            return Err(("aspect_range", "need 0 < low <= high"));
        }
    }
    for (f, v) in [
        ("min_confidence", r.min_confidence),
        ("min_area_fraction", r.min_area_fraction),
        ("nms_iou", r.nms_iou),
    ] {
        if v.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
            return Err((f, "must lie in [0, 1]"));
        }
    }
    let [lo, hi] = r.quality.luma_range;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(("quality.luma_range", "need 0 <= low <= high <= 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ForgeConfig::toy().validate().unwrap();
        ForgeConfig::paper().validate().unwrap();
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let mut v = serde_json::to_value(ForgeConfig::toy()).unwrap();
        v["stage2"]["lr_peek"] = 1.0.into();
        let err = ForgeConfig::from_json(&v.to_string()).unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "stage2.lr_peek"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn semantic_errors_name_their_path() {
        let mut v = serde_json::to_value(ForgeConfig::toy()).unwrap();
        v["stage3"]["lr_peak"] = (-1.0).into();
        let err = ForgeConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "stage3.lr_peak"), "{err}");
    }

    #[test]
    fn seed_override() {
        let mut c = ForgeConfig::toy();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn scale_never_drops_below_a_batch() {
        let mut c = ForgeConfig::toy();
        c.scale = 1e-9;
        assert_eq!(c.stage(Stage::II).samples_target, c.stage2.batch_size as u64);
    }
}
