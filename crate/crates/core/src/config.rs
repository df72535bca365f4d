//! Run configuration: one JSON document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{ClassVocabulary, Split};
use crate::error::{Error, Result};
use crate::eval::ReportMeta;
use crate::scenegen::{scene_seed, DatasetMode, NoiseModel, SceneSpec};
use crate::trainer::{LossWeights, ModelConfig, StageConfig, TrainSetup, TransferOptions};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CROSSMODAL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
}

impl ClassEntry {
    fn new(name: &str, split: Split) -> Self {
        Self {
            name: name.to_string(),
            split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub mode: DatasetMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            eval_scenes: 50,
            mode: DatasetMode::BaseAnnotated,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub stages: StageConfig,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Training seeds of every ablation variant.
    pub ablation_seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ablation_seeds: vec![0, 1, 2],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vocab: Vec<ClassEntry>,
    pub scene: SceneSpec,
    pub noise: NoiseModel,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub transfer: TransferOptions,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocab: vec![
                ClassEntry::new("ground", Split::Base),
                ClassEntry::new("box-a", Split::Base),
                ClassEntry::new("cylinder-a", Split::Base),
                ClassEntry::new("box-b", Split::Novel),
                ClassEntry::new("cylinder-b", Split::Novel),
            ],
            scene: SceneSpec::default(),
            noise: NoiseModel::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            transfer: TransferOptions::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates a configuration document. Missing sections take
    /// their defaults; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocabulary()?;
        self.scene.validate(&vocab)?;
        self.noise.validate()?;
        self.model.validate()?;
        self.trainer.stages.validate()?;
        self.trainer.weights.validate()?;
        self.transfer.validate()?;
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::config("data.train_scenes and data.eval_scenes must be positive"));
        }
        if self.eval.ablation_seeds.is_empty() {
            return Err(Error::config("eval.ablation_seeds must not be empty"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::from_owned(self.vocab.iter().map(|c| (c.name.clone(), c.split)).collect())
    }

    /// Hex SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies the seed precedence flag > environment > config.
    pub fn with_seed_override(mut self, flag: Option<u64>, env: Option<&str>) -> Result<Self> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(text) = env {
            self.seed = text
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}='{text}' is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.data.train_scenes)
            .map(|i| scene_seed(self.seed, "train", i))
            .collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.data.eval_scenes)
            .map(|i| scene_seed(self.seed, "eval", i))
            .collect()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            stage: self.trainer.stages.clone(),
            weights: self.trainer.weights,
            transfer: self.transfer.clone(),
            extent: self.scene.extent,
        }
    }

    pub fn meta(&self, run_id: &str) -> ReportMeta {
        ReportMeta {
            run_id: run_id.to_string(),
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.trainer.stages.stage1_steps = 17;
        cfg.noise.p_flip = 0.25;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn documented_example_is_the_default() {
        let doc = r#"{
          "vocab": [
            {"name": "ground", "split": "base"},
            {"name": "box-a", "split": "base"},
            {"name": "cylinder-a", "split": "base"},
            {"name": "box-b", "split": "novel"},
            {"name": "cylinder-b", "split": "novel"}
          ],
          "scene": {"image_size": 128, "cameras": 4},
          "noise": {"sigma_trans": 0.05, "p_flip": 0.1, "p_drop": 0.1, "dilation": 2},
          "data": {"train_scenes": 200, "eval_scenes": 50, "mode": "base-annotated"},
          "trainer": {
            "stages": {"stage1_steps": 300, "stage2_steps": 300, "clip_norm": 1.0},
            "weights": {"beta": 1.0, "delta": 1.0, "gamma": 0.5}
          },
          "transfer": {"novel_only_distill": true, "feature_distill": true, "use_vpm": true},
          "eval": {"ablation_seeds": [0, 1, 2], "workers": 1},
          "seed": 0
        }"#;
        assert_eq!(RunConfig::from_json(doc).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"trainer": {"stages": {"stage1_step": 3}}}"#,
            r#"{"noise": {"p_flip": 0.1, "extra": true}}"#,
            r#"{"vocab": [{"name": "a", "split": "base", "colour": 1}]}"#,
        ] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert!(err.is_config(), "{doc}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            r#"{"noise": {"p_flip": 1.5}}"#,
            r#"{"data": {"train_scenes": 0}}"#,
            r#"{"trainer": {"weights": {"gamma": -1.0}}}"#,
            r#"{"vocab": [{"name": "ground", "split": "base"}]}"#,
            r#"{"model": {"embed_dim": 15, "vpm_heads": 2}}"#,
        ] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert!(err.is_config(), "{doc}: {err}");
        }
    }

    #[test]
    fn hash_tracks_content_not_layout() {
        let a = RunConfig::from_json(r#"{"seed": 3, "noise": {"p_drop": 0.2}}"#).unwrap();
        let b = RunConfig::from_json("{\n  \"noise\": {\"p_drop\": 0.2},\n  \"seed\": 3\n}").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig::from_json(r#"{"seed": 4, "noise": {"p_drop": 0.2}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn seed_precedence() {
        let cfg = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        assert_eq!(cfg.clone().with_seed_override(None, None).unwrap().seed, 5);
        assert_eq!(cfg.clone().with_seed_override(None, Some("9")).unwrap().seed, 9);
        assert_eq!(cfg.clone().with_seed_override(Some(2), Some("9")).unwrap().seed, 2);
        assert!(cfg.with_seed_override(None, Some("nine")).unwrap_err().is_config());
    }

    #[test]
    fn scene_seeds_follow_the_master_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(a.train_seeds().len(), 200);
        assert_eq!(a.eval_seeds().len(), 50);
        assert_ne!(a.train_seeds(), b.train_seeds());
        assert!(a.train_seeds().iter().all(|s| !a.eval_seeds().contains(s)));
    }
}
