//! On-disk artifacts: checkpoints, loss logs, scene directories and run
//! manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{ClassVocabulary, TextEmbeddings};
use crate::codec::Array;
use crate::config::{ClassEntry, RunConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scenegen::{load_scene, save_scene, SyntheticScene};
use crate::trainer::{Model, ModelConfig, StepRecord};

const CHECKPOINT_FORMAT: &str = "crossmodal-checkpoint/1";
const RUN_FORMAT: &str = "crossmodal-run/1";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "losses.log";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    array: Array,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    config_hash: String,
    model: ModelConfig,
    vocab: Vec<ClassEntry>,
    embeddings: Array,
    params: Vec<NamedArray>,
}

/// A trained model together with its vocabulary and the config hash it was
/// trained under.
pub struct Checkpoint {
    pub model: Model,
    pub vocab: ClassVocabulary,
    pub config_hash: String,
}

pub fn checkpoint_to_json(model: &Model, vocab: &ClassVocabulary, config_hash: &str) -> String {
    let emb = &model.embeddings;
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.into(),
        config_hash: config_hash.into(),
        model: model.config.clone(),
        vocab: (0..vocab.len())
            .map(|c| ClassEntry {
                name: vocab.name(c).to_string(),
                split: vocab.split(c),
            })
            .collect(),
        embeddings: Array::f64(vec![emb.classes(), emb.dim()], emb.matrix()),
        params: model
            .store
            .iter()
            .map(|(_, name, t)| NamedArray {
                name: name.to_string(),
                array: Array::f64(t.shape().to_vec(), t.data()),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("checkpoint serializes") + "\n"
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let doc: CheckpointDoc =
        serde_json::from_str(text).map_err(|e| Error::data(format!("malformed checkpoint: {e}")))?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::data(format!("unsupported checkpoint format '{}'", doc.format)));
    }
    let vocab = ClassVocabulary::from_owned(doc.vocab.into_iter().map(|c| (c.name, c.split)).collect())?;
    let mut model = Model::new(&doc.model, &vocab, 0)?;
    doc.embeddings
        .expect_shape(&[vocab.len(), doc.model.embed_dim], "embeddings")?;
    let values = doc.embeddings.to_f64()?;
    model.embeddings = TextEmbeddings::from_rows(values.chunks(doc.model.embed_dim).map(<[f64]>::to_vec).collect())?;
    if doc.params.len() != model.store.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} parameters, the model has {}",
            doc.params.len(),
            model.store.len()
        )));
    }
    for p in doc.params {
        let id = model
            .store
            .id_of(&p.name)
            .ok_or_else(|| Error::data(format!("unknown parameter '{}'", p.name)))?;
        let shape = model.store.get(id).shape().to_vec();
        p.array.expect_shape(&shape, &p.name)?;
        let tensor = Tensor::new(shape, p.array.to_f64()?)?;
        *model.store.get_mut(id) = tensor.with_grad();
    }
    Ok(Checkpoint {
        model,
        vocab,
        config_hash: doc.config_hash,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &ClassVocabulary, config_hash: &str) -> Result<()> {
    write_file(path, &checkpoint_to_json(model, vocab, config_hash))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Serialize)]
struct LossLine<'a> {
    step: usize,
    stage: u8,
    component: &'a str,
    value: f64,
}

/// One JSON object per (step, component).
pub fn loss_log_lines(log: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in log {
        for &(component, value) in &r.components {
            let line = LossLine {
                step: r.step,
                stage: r.stage as u8,
                component,
                value,
            };
            out.push_str(&serde_json::to_string(&line).expect("line serializes"));
            out.push('\n');
        }
    }
    out
}

fn scene_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("scene_{index:05}.json"))
}

pub fn save_scenes(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        save_scene(s, &scene_file(dir, i))?;
    }
    Ok(())
}

/// Loads `scene_00000.json`, `scene_00001.json`, … in index order.
pub fn load_scenes(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with("scene_") && name.ends_with(".json") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::data(format!("{}: no scene files", dir.display())));
    }
    names.iter().map(|n| load_scene(&dir.join(n))).collect()
}

/// Pointer from a training run to its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub data_dir: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(config: &RunConfig, data_dir: Option<&Path>) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            config: config.clone(),
            config_hash: config.hash(),
            data_dir: data_dir.map(Path::to_path_buf),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_file(&run_dir.join(RUN_FILE), &text)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let m: RunManifest = read_json(&run_dir.join(RUN_FILE))?;
        if m.format != RUN_FORMAT {
            return Err(Error::data(format!("unsupported run format '{}'", m.format)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::tests::vocab;
    use crate::trainer::Stage;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let v = vocab();
        let model = Model::new(&ModelConfig::default(), &v, 12).unwrap();
        let text = checkpoint_to_json(&model, &v, "abc");
        let back = checkpoint_from_json(&text).unwrap();
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.vocab, v);
        assert_eq!(back.model.embeddings, model.embeddings);
        for (id, name, t) in model.store.iter() {
            let other = back.model.store.get(back.model.store.id_of(name).unwrap());
            assert_eq!(other.shape(), t.shape());
            assert!(other.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(back.model.store.name(id), name);
        }
        assert_eq!(checkpoint_to_json(&back.model, &back.vocab, "abc"), text);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let v = vocab();
        let model = Model::new(&ModelConfig::default(), &v, 1).unwrap();
        let text = checkpoint_to_json(&model, &v, "h");
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["params"][0]["array"]["shape"] = serde_json::json!([1, 1]);
        assert!(checkpoint_from_json(&doc.to_string()).is_err());
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["params"].as_array_mut().unwrap().pop();
        assert!(checkpoint_from_json(&doc.to_string()).is_err());
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["format"] = serde_json::json!("other/2");
        assert!(checkpoint_from_json(&doc.to_string()).is_err());
        assert!(checkpoint_from_json("{").is_err());
    }

    #[test]
    fn loss_log_has_one_line_per_component() {
        let log = vec![
            StepRecord {
                step: 0,
                stage: Stage::ImageOnly,
                components: vec![("image", 1.5)],
                total: 1.5,
                image_grad_norm: 0.0,
                image_grad_norm_applied: 0.0,
                point_grad_norm: 0.0,
                point_checksum: 0,
            },
            StepRecord {
                step: 1,
                stage: Stage::Joint,
                components: vec![("image", 1.0), ("vpm", 0.25)],
                total: 1.25,
                image_grad_norm: 0.0,
                image_grad_norm_applied: 0.0,
                point_grad_norm: 0.0,
                point_checksum: 0,
            },
        ];
        let text = loss_log_lines(&log);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], r#"{"step":0,"stage":1,"component":"image","value":1.5}"#);
        assert_eq!(lines[2], r#"{"step":1,"stage":2,"component":"vpm","value":0.25}"#);
    }

    #[test]
    fn run_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(&RunConfig::default(), Some(Path::new("data")));
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn scenes_directory_round_trip() {
        let v = vocab();
        let spec = crate::scenegen::tests::small_spec();
        let scenes: Vec<SyntheticScene> = (0..3)
            .map(|s| crate::scenegen::generate_scene(&spec, &crate::scenegen::NoiseModel::default(), &v, s).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_scenes(dir.path(), &scenes).unwrap();
        assert_eq!(load_scenes(dir.path()).unwrap(), scenes);
        let empty = tempfile::tempdir().unwrap();
        assert!(load_scenes(empty.path()).is_err());
    }
}
