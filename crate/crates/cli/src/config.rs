//! JSON run configuration. Relative paths resolve against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kgpath_core::evaluate::BootstrapConfig;
use kgpath_core::prompt::{LlmConfig, PathStyle};
use kgpath_core::ranker::{ModelConfig, RankerConfig};
use kgpath_core::synth::SyntheticSpec;
use kgpath_core::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SyntheticSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ranker: RankerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: BootstrapConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub llm: Option<LlmConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub concepts: PathBuf,
    pub triples: PathBuf,
    /// Relation allowlist, one label per line.
    pub relations: PathBuf,
    pub train_notes: PathBuf,
    pub test_notes: PathBuf,
    /// Optional JSONL of precomputed embeddings; missing texts fall back to
    /// hashed token embeddings.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Template id, or `auto` to pick the lowest-perplexity template.
    pub template: String,
    /// Directory of `*.txt` templates; the bundled zero-shot template is used
    /// when absent.
    pub templates_dir: Option<PathBuf>,
    pub style: PathStyle,
    pub max_paths: usize,
    /// Number of training notes rendered as worked examples.
    pub shots: usize,
    /// Add-k smoothing of the trigram scorer used by `auto`.
    pub lm_smoothing: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: "zero_shot".into(),
            templates_dir: None,
            style: PathStyle::Structural,
            max_paths: 4,
            shots: 0,
            lm_smoothing: 0.1,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: AppConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.concepts,
            &mut d.triples,
            &mut d.relations,
            &mut d.train_notes,
            &mut d.test_notes,
        ] {
            fix(p);
        }
        if let Some(p) = d.embeddings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.prompt.templates_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ranker.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.prompt.max_paths == 0 {
            bail!("prompt.max_paths must be at least 1");
        }
        if self.prompt.template == "auto" && self.prompt.templates_dir.is_none() {
            bail!("prompt.template = auto requires prompt.templates_dir");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "data": {
            "concepts": "d/concepts.tsv",
            "triples": "/abs/triples.tsv",
            "relations": "d/relations.txt",
            "train_notes": "d/train.jsonl",
            "test_notes": "d/test.jsonl"
        }
    }"#;

    #[test]
    fn resolves_relative_paths_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, MINIMAL).unwrap();
        let cfg = AppConfig::load(&path, Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.data.concepts, dir.path().join("d/concepts.tsv"));
        assert_eq!(cfg.data.triples, PathBuf::from("/abs/triples.tsv"));
        assert_eq!(cfg.ranker, RankerConfig::default());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            MINIMAL.replace("\"seed\": 3", "\"seed\": 3, \"sed\": 1"),
        )
        .unwrap();
        assert!(AppConfig::load(&path, None).is_err());
        fs::write(
            &path,
            MINIMAL.replace("\"seed\": 3", "\"seed\": 3, \"ranker\": {\"top_n\": 0}"),
        )
        .unwrap();
        assert!(AppConfig::load(&path, None).is_err());
    }
}
