//! Files kept next to a model: the training lock and one JSON record per stage.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use factorized_nerf::scenes::{make_dataset, AnalyticField, DatasetSpec, SceneDataset};
use factorized_nerf::{Error, Prng, Result, StageReport};
use serde::{Deserialize, Serialize};

const BUILTIN_PREFIX: &str = "builtin:";
/// Stream of the root seed reserved for built-in image generation.
const DATA_STREAM: u64 = 1 << 32;

fn sibling(model: &Path, suffix: &str) -> PathBuf {
    let mut name = model.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    model.with_file_name(name)
}

pub fn lock_path(model: &Path) -> PathBuf {
    sibling(model, ".lock")
}

pub fn stage_path(model: &Path, stage: usize) -> PathBuf {
    sibling(model, &format!(".stage-{stage}.json"))
}

/// Exclusive claim on a model file, released on drop.
pub struct TrainingLock {
    path: PathBuf,
}

impl TrainingLock {
    pub fn acquire(model: &Path) -> Result<Self> {
        let path = lock_path(model);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Format(format!(
                "{} is locked by a running add-scene; remove {} if that process died",
                model.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for TrainingLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fails while another process is training into `model`.
pub fn ensure_unlocked(model: &Path) -> Result<()> {
    if lock_path(model).exists() {
        return Err(Error::Format(format!("{} is being trained; try again when add-scene finishes", model.display())));
    }
    Ok(())
}

/// Built-in image settings, recorded so the test views can be regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltinData {
    pub image_size: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub oracle_samples: usize,
}

impl BuiltinData {
    pub fn from_spec(spec: &DatasetSpec) -> Self {
        Self {
            image_size: spec.image_size,
            train_views: spec.train_views,
            test_views: spec.test_views,
            oracle_samples: spec.oracle_samples,
        }
    }

    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            image_size: self.image_size,
            train_views: self.train_views,
            test_views: self.test_views,
            oracle_samples: self.oracle_samples,
            ..DatasetSpec::default()
        }
    }
}

/// What `add-scene` wrote for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub scene_id: String,
    /// `builtin:<name>` or the dataset directory as given.
    pub source: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinData>,
    pub report: StageReport,
}

impl StageRecord {
    pub fn write(&self, model: &Path, stage: usize) -> Result<()> {
        let path = stage_path(model, stage);
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, self)?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn read(model: &Path, stage: usize) -> Result<Option<Self>> {
        let path = stage_path(model, stage);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Records for stages `0..count`; missing ones are `None`.
    pub fn read_all(model: &Path, count: usize) -> Result<Vec<Option<Self>>> {
        (0..count).map(|k| Self::read(model, k)).collect()
    }
}

/// Deletes stage records from `stage` on, left over from an earlier model at the same path.
pub fn remove_stage_records(model: &Path, from: usize) -> Result<()> {
    let mut k = from;
    while stage_path(model, k).exists() {
        fs::remove_file(stage_path(model, k))?;
        k += 1;
    }
    Ok(())
}

pub fn builtin_name(source: &str) -> Option<&str> {
    source.strip_prefix(BUILTIN_PREFIX)
}

/// Renders a built-in scene. The images depend only on `(seed, stage, data)`.
pub fn builtin_dataset(name: &str, seed: u64, stage: usize, data: &BuiltinData) -> Result<SceneDataset> {
    let field = AnalyticField::builtin(name)
        .ok_or_else(|| Error::ingest(format!("{BUILTIN_PREFIX}{name}"), "no such built-in scene"))?;
    let mut prng = Prng::new(seed).derive(DATA_STREAM + stage as u64);
    make_dataset(name, &field, &data.spec(), &mut prng)
}
