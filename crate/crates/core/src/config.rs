//! Declarative run configuration: one TOML file with sections, strict
//! unknown-key rejection, and content-address hashes for artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::WorldSpec;
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::llm::LlmEndpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub base_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_dim: 256,
            hidden_dim: 256,
            output_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// candidate-pool extraction depth for KB retrieval
    pub pool_hops: usize,
    /// top-k list sizes reported by eval-retriever
    pub eval_ks: Vec<usize>,
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        RetrieverSection {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            pool_hops: 2,
            eval_ks: vec![1, 5, 10, 100],
            early_stop_patience: 0,
            early_stop_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub layers: usize,
    pub residual: bool,
    /// retrieved facts injected per source
    pub top_k: usize,
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
}

impl Default for ReasonerSection {
    fn default() -> Self {
        ReasonerSection {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            layers: 4,
            residual: false,
            top_k: 10,
            early_stop_patience: 0,
            early_stop_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub n_shots: usize,
    pub base_url: String,
    pub model: String,
    pub auth_env: String,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub temperature: f64,
    pub transcript: bool,
}

impl Default for LlmSection {
    fn default() -> Self {
        let endpoint = LlmEndpoint::default();
        LlmSection {
            n_shots: 32,
            base_url: endpoint.base_url,
            model: endpoint.model,
            auth_env: endpoint.auth_env,
            timeout_secs: endpoint.timeout_secs,
            max_tokens: endpoint.max_tokens,
            temperature: endpoint.temperature,
            transcript: false,
        }
    }
}

impl LlmSection {
    pub fn endpoint(&self) -> LlmEndpoint {
        LlmEndpoint {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            auth_env: self.auth_env.clone(),
            timeout_secs: self.timeout_secs,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            stop: "\n\n".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: "build/data".into(),
            checkpoint_dir: "build/checkpoints".into(),
            report_dir: "build/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub questions_per_image: usize,
    /// weights over the seven question templates (normalized internally)
    pub qtype_mix: [f64; 7],
    pub split_ratios: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            questions_per_image: 6,
            qtype_mix: [2.0, 2.0, 2.0, 12.0, 12.0, 12.0, 12.0],
            split_ratios: [0.6, 0.2, 0.2],
        }
    }
}

/// Whole-run configuration; every field has a paper- or artifact-derived
/// default and a config-file key.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub dataset: DatasetSection,
    pub encoder: EncoderConfig,
    pub retriever: RetrieverSection,
    pub reasoner: ReasonerSection,
    pub llm: LlmSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.retriever.learning_rate <= 0.0 || self.reasoner.learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.retriever.batch_size == 0 || self.reasoner.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.reasoner.layers == 0 {
            return Err(Error::Config("reasoner needs at least one layer".into()));
        }
        if self.llm.n_shots == 0 {
            return Err(Error::Config("n_shots must be at least 1".into()));
        }
        let ratio_sum: f64 = self.dataset.split_ratios.iter().sum();
        if (ratio_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {ratio_sum}"
            )));
        }
        if self.dataset.qtype_mix.iter().any(|w| *w < 0.0)
            || self.dataset.qtype_mix.iter().all(|w| *w == 0.0)
        {
            return Err(Error::Config(
                "qtype mix must be nonnegative and not all zero".into(),
            ));
        }
        Ok(())
    }

    /// Apply one `section.key = value` override in TOML syntax.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override must look like section.key=value: {assignment}"))
        })?;
        let mut doc: toml::Value = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        let parsed: toml::Value = format!("v = {}", value.trim())
            .parse::<toml::Table>()
            .map(|t| t["v"].clone())
            .or_else(|_| {
                format!("v = \"{}\"", value.trim())
                    .parse::<toml::Table>()
                    .map(|t| t["v"].clone())
            })
            .map_err(|e| Error::Config(format!("bad override value {value:?}: {e}")))?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config section {part}")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key} is not assignable")))?;
        let last = parts[parts.len() - 1];
        if !table.contains_key(last) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        table.insert(last.to_string(), parsed);
        *self = doc
            .try_into()
            .map_err(|e| Error::Config(format!("override {assignment} rejected: {e}")))?;
        self.validate()
    }

    fn hash_of(&self, parts: &[&str]) -> String {
        let joined = parts.join("\u{1f}");
        format!("{:016x}", fnv1a64(joined.as_bytes(), 0xda7a))
    }

    /// Content address of the generated dataset.
    pub fn world_hash(&self) -> String {
        self.hash_of(&[
            &self.seed.to_string(),
            &toml::to_string(&self.world).unwrap_or_default(),
            &toml::to_string(&self.dataset).unwrap_or_default(),
        ])
    }

    /// Content address of a trained retriever for one source.
    pub fn retriever_hash(&self, source: &str) -> String {
        self.hash_of(&[
            &self.world_hash(),
            source,
            &toml::to_string(&self.encoder).unwrap_or_default(),
            &toml::to_string(&self.retriever).unwrap_or_default(),
        ])
    }

    /// Content address of a trained reasoner for one mode label.
    pub fn reasoner_hash(&self, label: &str) -> String {
        self.hash_of(&[
            &self.retriever_hash("kb"),
            &self.retriever_hash("sg"),
            label,
            &toml::to_string(&self.reasoner).unwrap_or_default(),
        ])
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.join(self.world_hash())
    }

    pub fn retriever_checkpoint(&self, source: &str) -> PathBuf {
        self.paths
            .checkpoint_dir
            .join(self.retriever_hash(source))
            .join(format!("retriever_{source}.json"))
    }

    pub fn reasoner_checkpoint(&self, label: &str) -> PathBuf {
        self.paths
            .checkpoint_dir
            .join(self.reasoner_hash(label))
            .join(format!("reasoner_{label}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.report_dir.join(self.world_hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_training_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.retriever.epochs, 200);
        assert_eq!(cfg.retriever.batch_size, 256);
        assert_eq!(cfg.retriever.learning_rate, 1e-4);
        assert_eq!(cfg.reasoner.layers, 4);
        assert_eq!(cfg.llm.n_shots, 32);
        assert_eq!(cfg.encoder.base_dim, 256);
        assert_eq!(cfg.encoder.output_dim, 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[retriever]\nepochs = 10\nnot_a_key = 5\n";
        let parsed: std::result::Result<RunConfig, _> = toml::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("retriever.epochs=17").unwrap();
        assert_eq!(cfg.retriever.epochs, 17);
        cfg.apply_override("world.n_images = 12").unwrap();
        assert_eq!(cfg.world.n_images, 12);
        cfg.apply_override("llm.model=local-test").unwrap();
        assert_eq!(cfg.llm.model, "local-test");
        assert!(cfg.apply_override("retriever.bad_key=1").is_err());
        assert!(cfg.apply_override("seed").is_err());
    }

    #[test]
    fn hashes_separate_concerns() {
        let base = RunConfig::default();
        let mut reasoner_changed = base.clone();
        reasoner_changed.reasoner.epochs = 3;
        // reasoner changes must not invalidate data or retrievers
        assert_eq!(base.world_hash(), reasoner_changed.world_hash());
        assert_eq!(base.retriever_hash("kb"), reasoner_changed.retriever_hash("kb"));
        assert_ne!(
            base.reasoner_hash("kb_gt+sg_gt"),
            reasoner_changed.reasoner_hash("kb_gt+sg_gt")
        );
        let mut world_changed = base.clone();
        world_changed.world.n_images = 9;
        assert_ne!(base.world_hash(), world_changed.world_hash());
    }

    #[test]
    fn load_missing_file_is_missing_artifact() {
        let err = RunConfig::load(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
