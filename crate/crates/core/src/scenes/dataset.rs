use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rendering::{Camera, Image, Intrinsics};

/// One posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
}

impl SceneDataset {
    pub fn new(
        name: &str,
        train: Vec<View>,
        test: Vec<View>,
        near: f64,
        far: f64,
        white_background: bool,
    ) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::contract("a dataset needs at least one train and one test view"));
        }
        let intr = train[0].camera.intrinsics;
        for v in train.iter().chain(&test) {
            if v.camera.intrinsics != intr {
                return Err(Error::contract("all views must share intrinsics"));
            }
            if v.image.width() != intr.width || v.image.height() != intr.height {
                return Err(Error::contract("image size does not match camera intrinsics"));
            }
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::contract("dataset needs 0 < near < far"));
        }
        Ok(Self { name: name.to_string(), train, test, near, far, white_background })
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.train[0].camera.intrinsics
    }
}

/// Synthetic dataset layout. Angles are in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train_views: usize,
    pub test_views: usize,
    pub image_size: usize,
    pub fov_x: f64,
    pub radius: f64,
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
    /// Quadrature samples for the ground-truth renders.
    pub oracle_samples: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_views: 8,
            test_views: 2,
            image_size: 32,
            fov_x: 0.8,
            radius: 4.0,
            min_elevation: 0.15,
            max_elevation: 1.1,
            near: 2.0,
            far: 6.0,
            white_background: true,
            oracle_samples: 256,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_views + self.test_views < 2 || self.train_views == 0 || self.test_views == 0 {
            return Err(Error::config("views", "need at least one train and one test view"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.oracle_samples == 0 {
            return Err(Error::config("oracle_samples", "must be positive"));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::config("near", "need 0 < near < far"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    white_background: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

/// Writes `transforms_{train,test}.json` plus PNG images under `dir`.
pub fn export(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    for (split, views) in [("train", &dataset.train), ("test", &dataset.test)] {
        fs::create_dir_all(dir.join(split))?;
        let mut frames = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            let rel = format!("./{split}/r_{i}");
            v.image.save_png(&dir.join(format!("{rel}.png")))?;
            frames.push(Frame {
                file_path: rel,
                transform_matrix: v.camera.to_matrix().iter().map(|r| r.to_vec()).collect(),
            });
        }
        let manifest = Manifest {
            camera_angle_x: dataset.intrinsics().fov_x,
            frames,
            near: Some(dataset.near),
            far: Some(dataset.far),
            white_background: Some(dataset.white_background),
        };
        fs::write(dir.join(format!("transforms_{split}.json")), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() && p.exists() {
        p
    } else {
        dir.join(format!("{file_path}.png"))
    }
}

/// Views with the optional near, far and background entries of one manifest.
type Split = (Vec<View>, Option<f64>, Option<f64>, Option<bool>);

fn load_split(dir: &Path, split: &str) -> Result<Split> {
    let path = dir.join(format!("transforms_{split}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::ingest(&path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ingest(&path, format!("malformed manifest: {e}")))?;
    let mut views = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let m = &f.transform_matrix;
        if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
            return Err(Error::ingest(&path, format!("frame {i}: transform_matrix must be 4×4")));
        }
        let mut mat = [[0.0; 4]; 4];
        for (r, row) in m.iter().enumerate() {
            mat[r].copy_from_slice(row);
        }
        let img_path = image_path(dir, &f.file_path);
        let image = Image::load(&img_path)
            .map_err(|e| Error::ingest(&img_path, format!("frame {i}: unreadable image: {e}")))?;
        let intr = Intrinsics { width: image.width(), height: image.height(), fov_x: manifest.camera_angle_x };
        let camera = Camera::from_matrix(&mat, intr).map_err(|e| Error::ingest(&path, format!("frame {i}: {e}")))?;
        views.push(View { camera, image });
    }
    Ok((views, manifest.near, manifest.far, manifest.white_background))
}

/// Reads a dataset directory. `near`, `far` and the background flag default to
/// 2, 6 and white when the manifest omits them.
pub fn load_external(dir: &Path) -> Result<SceneDataset> {
    let (train, near, far, white) = load_split(dir, "train")?;
    let (test, ..) = load_split(dir, "test")?;
    let name = dir.file_name().map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned());
    SceneDataset::new(&name, train, test, near.unwrap_or(2.0), far.unwrap_or(6.0), white.unwrap_or(true))
        .map_err(|e| Error::ingest(dir, e.to_string()))
}
