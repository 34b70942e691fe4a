use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::metrics::Averaging;
use crate::oneshot::TrainConfig;
use crate::promptseg::{FillMode, ScaleSelect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Platform {
    #[serde(rename = "UAV")]
    Uav,
    Airborne,
    #[serde(alias = "Satelitte")]
    Satellite,
}

impl Platform {
    pub fn label(&self) -> &'static str {
        match self {
            Platform::Uav => "UAV",
            Platform::Airborne => "Airborne",
            Platform::Satellite => "Satellite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    General,
    Box,
    Point,
    Text,
    Oneshot,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::General => "general",
            RunMode::Box => "box",
            RunMode::Point => "point",
            RunMode::Text => "text",
            RunMode::Oneshot => "oneshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub mode: RunMode,
    #[serde(default)]
    pub vector_path: Option<String>,
    #[serde(default)]
    pub phrase: Option<String>,
    #[serde(default)]
    pub group_points: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(rename = "box")]
    pub box_: f64,
    pub text: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: u32,
    pub name: String,
}

/// Per-entry knobs with library defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntryOptions {
    pub max_iterations: u32,
    pub fill_mode: FillMode,
    pub scale_select: ScaleSelect,
    pub averaging: Averaging,
    pub train: TrainConfig,
    pub stop_eps: f64,
    pub oneshot_max_iterations: u32,
}

impl Default for EntryOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            fill_mode: FillMode::Mean,
            scale_select: ScaleSelect::HighestConfidence,
            averaging: Averaging::Macro,
            train: TrainConfig::default(),
            stop_eps: 2.0,
            oneshot_max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Report group; entries sharing it compete for best marks. Defaults to `id`.
    #[serde(default)]
    pub dataset: Option<String>,
    pub platform: Platform,
    pub target: String,
    pub resolution_m: f64,
    pub raster_path: String,
    #[serde(default)]
    pub gt_path: Option<String>,
    pub prompt: PromptSpec,
    pub thresholds: Thresholds,
    #[serde(default)]
    pub classes: Option<Vec<ClassSpec>>,
    #[serde(default)]
    pub options: EntryOptions,
}

impl ManifestEntry {
    pub fn dataset_id(&self) -> &str {
        self.dataset.as_deref().filter(|d| !d.trim().is_empty()).unwrap_or(&self.id)
    }

    pub fn resolution_label(&self) -> String {
        format!("{:.2} m", self.resolution_m)
    }

    /// Phrase for text prompting: explicit phrase, else the target name.
    pub fn phrase(&self) -> String {
        self.prompt
            .phrase
            .clone()
            .filter(|p| !p.trim().is_empty())
            .unwrap_or_else(|| self.target.to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub hash: String,
}

fn invalid(entry: &str, field: &str, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(format!("entry '{entry}': {field}: {msg}"))
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json, base_dir)
    }

    pub fn parse(text: &str, is_json: bool, base_dir: PathBuf) -> Result<Self, PipelineError> {
        let value: Value = if is_json {
            serde_json::from_str(text).map_err(|e| PipelineError::Validation(format!("manifest JSON: {e}")))?
        } else {
            let yaml: serde_yaml::Value =
                serde_yaml::from_str(text).map_err(|e| PipelineError::Validation(format!("manifest YAML: {e}")))?;
            serde_json::to_value(yaml).map_err(|e| PipelineError::Validation(format!("manifest YAML: {e}")))?
        };
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        let raw_entries = value
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| PipelineError::Validation("manifest: entries: expected a list".into()))?;
        let mut entries = Vec::with_capacity(raw_entries.len());
        for (i, raw) in raw_entries.iter().enumerate() {
            let label = raw
                .get("id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{i}"));
            let entry: ManifestEntry = serde_json::from_value(raw.clone())
                .map_err(|e| PipelineError::Validation(format!("entry '{label}': {e}")))?;
            entries.push(entry);
        }
        let manifest = Self {
            entries,
            base_dir,
            hash,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry, PipelineError> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| PipelineError::Validation(format!("manifest has no entry '{id}'")))
    }

    /// Mode-independent checks on every entry.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.entries.is_empty() {
            return Err(PipelineError::Validation("manifest: entries: list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.id.trim().is_empty() {
                return Err(PipelineError::Validation("entry: id: must not be empty".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(invalid(&e.id, "id", "duplicate entry id"));
            }
            if e.target.trim().is_empty() {
                return Err(invalid(&e.id, "target", "must not be empty"));
            }
            if !(e.resolution_m > 0.0 && e.resolution_m.is_finite()) {
                return Err(invalid(&e.id, "resolution_m", format!("{} must be positive", e.resolution_m)));
            }
            check_threshold(&e.id, "thresholds.box", e.thresholds.box_)?;
            check_threshold(&e.id, "thresholds.text", e.thresholds.text)?;
            if e.options.max_iterations == 0 {
                return Err(invalid(&e.id, "options.max_iterations", "must be at least 1"));
            }
            if e.options.oneshot_max_iterations == 0 {
                return Err(invalid(&e.id, "options.oneshot_max_iterations", "must be at least 1"));
            }
            if !(e.options.stop_eps >= 0.0 && e.options.stop_eps.is_finite()) {
                return Err(invalid(&e.id, "options.stop_eps", "must be a non-negative number"));
            }
            e.options
                .train
                .validate()
                .map_err(|err| invalid(&e.id, "options.train", err))?;
            if let Some(classes) = &e.classes {
                if classes.is_empty() {
                    return Err(invalid(&e.id, "classes", "list is empty"));
                }
                let mut ids = BTreeSet::new();
                for (k, c) in classes.iter().enumerate() {
                    if c.id == 0 {
                        return Err(invalid(&e.id, &format!("classes[{k}].id"), "0 is reserved for unlabelled pixels"));
                    }
                    if !ids.insert(c.id) {
                        return Err(invalid(&e.id, &format!("classes[{k}].id"), "duplicate class id"));
                    }
                    if c.name.trim().is_empty() {
                        return Err(invalid(&e.id, &format!("classes[{k}].name"), "must not be empty"));
                    }
                }
            }
            self.check_path(e, "raster_path", Some(&e.raster_path))?;
        }
        Ok(())
    }

    fn check_path(&self, e: &ManifestEntry, field: &str, rel: Option<&String>) -> Result<(), PipelineError> {
        let rel = rel.ok_or_else(|| invalid(&e.id, field, "required for this mode"))?;
        let p = self.resolve(rel);
        if !p.is_file() {
            return Err(invalid(&e.id, field, format!("{} does not exist", p.display())));
        }
        Ok(())
    }

    /// Checks that depend on the requested mode.
    pub fn validate_for(&self, e: &ManifestEntry, mode: RunMode) -> Result<(), PipelineError> {
        if mode != RunMode::General {
            self.check_path(e, "gt_path", e.gt_path.as_ref())?;
        }
        match mode {
            RunMode::Box | RunMode::Point => self.check_path(e, "prompt.vector_path", e.prompt.vector_path.as_ref()),
            _ => Ok(()),
        }
    }
}

fn check_threshold(entry: &str, field: &str, v: f64) -> Result<(), PipelineError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(entry, field, format!("{v} is outside [0,1]")))
    }
}
