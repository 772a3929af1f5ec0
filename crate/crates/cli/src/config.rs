//! `key = value` run configuration. Every key has a default; a file overrides
//! the defaults and `--set` flags override the file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use factorized_nerf::distillation::FieldNorm;
use factorized_nerf::scenes::DatasetSpec;
use factorized_nerf::{Error, ModelConfig, Result, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub seed: u64,
    pub precision: Precision,
    pub data_root: Option<PathBuf>,
    explicit: BTreeSet<&'static str>,
}

/// Key name and description, in the order `fnerf defaults` prints them.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for model init, data generation and training"),
    ("precision", "training precision, f32 or f64"),
    ("data_root", "directory searched for <scene-id>/ test data by eval; empty for none"),
    ("layers", "generated encoder layers L"),
    ("width", "encoder width c"),
    ("rank", "cross-scene rank K"),
    ("noise_dim", "per-scene noise length Z"),
    ("pos_degrees", "positional encoding frequencies for x"),
    ("dir_degrees", "positional encoding frequencies for d"),
    ("skip_layer", "layer that re-reads the encoded position"),
    ("decoder_hidden", "colour decoder hidden width"),
    ("generator_hidden", "parameter generator hidden width"),
    ("use_coefficients", "learn per-scene coefficient matrices C"),
    ("use_generator", "generate weights from noise; false learns them directly"),
    ("lr_matrices", "start rate: cross-scene matrices, coefficients, biases, decoder"),
    ("lr_matrices_end", "end rate of the exponential decay for the same group"),
    ("lr_generator", "start rate: parameter generators"),
    ("lr_generator_end", "end rate for the generators"),
    ("lr_beta", "constant rate of the uncertainty weights"),
    ("alpha", "density weight inside field distillation"),
    ("field_norm", "field distillation residual, squared or plain norm"),
    ("gamma", "weight of the new-scene photometric loss"),
    ("new_scene_rays", "rays per step on the new scene"),
    ("distill_rays", "pixel-distillation rays per step, split over old scenes"),
    ("distill_points", "field-distillation points per step, split over old scenes"),
    ("warmup_steps", "steps on the new scene alone"),
    ("total_steps", "steps per stage including warm-up"),
    ("samples_per_ray", "stratified samples per training ray"),
    ("eval_samples", "midpoint samples per ray when evaluating"),
    ("log_every", "loss curve interval in steps"),
    ("grid_resolution", "occupancy grid cells per axis"),
    ("grid_subgrid", "probes per cell per axis"),
    ("grid_tau", "density threshold of an occupied cell"),
    ("grid_bound", "half extent of the occupancy box around the origin"),
    ("distill", "distill old scenes; false is plain fine-tuning"),
    ("field_loss", "use the field distillation term"),
    ("pixel_loss", "use the pixel distillation term"),
    ("learn_beta", "learn the uncertainty weights"),
    ("surface_restriction", "draw field points from occupied cells only"),
    ("freeze_shared", "freeze shared weights during a stage"),
    ("freeze_old_coefficients", "freeze earlier scenes' coefficients"),
    ("image_size", "built-in scenes: image side in pixels"),
    ("train_views", "built-in scenes: training views"),
    ("test_views", "built-in scenes: held-out views"),
    ("oracle_samples", "built-in scenes: quadrature samples of the ground truth"),
];

/// Model-shape keys; they are fixed once a model file exists.
const MODEL_KEYS: &[&str] = &[
    "layers",
    "width",
    "rank",
    "noise_dim",
    "pos_degrees",
    "dir_degrees",
    "skip_layer",
    "decoder_hidden",
    "generator_hidden",
    "use_coefficients",
    "use_generator",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: DatasetSpec::default(),
            seed: 0,
            precision: Precision::F32,
            data_root: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (each `key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config(o.clone(), "expected key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key = value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(name, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(Error::config(key, "unknown key"));
        };
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match name {
            "seed" => self.seed = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::config(key, "expected f32 or f64")),
                }
            }
            "data_root" => self.data_root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "layers" => m.layers = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "rank" => m.rank = parse(key, value)?,
            "noise_dim" => m.noise_dim = parse(key, value)?,
            "pos_degrees" => m.pos_degrees = parse(key, value)?,
            "dir_degrees" => m.dir_degrees = parse(key, value)?,
            "skip_layer" => m.skip_layer = parse(key, value)?,
            "decoder_hidden" => m.decoder_hidden = parse(key, value)?,
            "generator_hidden" => m.generator_hidden = parse(key, value)?,
            "use_coefficients" => m.use_coefficients = parse(key, value)?,
            "use_generator" => m.use_generator = parse(key, value)?,
            "lr_matrices" => t.lr_matrices.0 = parse(key, value)?,
            "lr_matrices_end" => t.lr_matrices.1 = parse(key, value)?,
            "lr_generator" => t.lr_generator.0 = parse(key, value)?,
            "lr_generator_end" => t.lr_generator.1 = parse(key, value)?,
            "lr_beta" => t.lr_beta = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "field_norm" => {
                t.field_norm = match value {
                    "squared" => FieldNorm::Squared,
                    "plain" => FieldNorm::Plain,
                    _ => return Err(Error::config(key, "expected squared or plain")),
                }
            }
            "gamma" => t.gamma = parse(key, value)?,
            "new_scene_rays" => t.new_scene_rays = parse(key, value)?,
            "distill_rays" => t.distill_rays = parse(key, value)?,
            "distill_points" => t.distill_points = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "samples_per_ray" => t.samples_per_ray = parse(key, value)?,
            "eval_samples" => t.eval_samples = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "grid_resolution" => t.grid.resolution = parse(key, value)?,
            "grid_subgrid" => t.grid.subgrid = parse(key, value)?,
            "grid_tau" => t.grid.tau = parse(key, value)?,
            "grid_bound" => {
                let half: f64 = parse(key, value)?;
                if !(half > 0.0 && half.is_finite()) {
                    return Err(Error::config(key, "must be positive"));
                }
                t.grid_bounds = factorized_nerf::distillation::Aabb::cube(half);
            }
            "distill" => t.ablation.distill = parse(key, value)?,
            "field_loss" => t.ablation.field_loss = parse(key, value)?,
            "pixel_loss" => t.ablation.pixel_loss = parse(key, value)?,
            "learn_beta" => t.ablation.learn_beta = parse(key, value)?,
            "surface_restriction" => t.ablation.surface_restriction = parse(key, value)?,
            "freeze_shared" => t.ablation.freeze_shared = parse(key, value)?,
            "freeze_old_coefficients" => t.ablation.freeze_old_coefficients = parse(key, value)?,
            "image_size" => d.image_size = parse(key, value)?,
            "train_views" => d.train_views = parse(key, value)?,
            "test_views" => d.test_views = parse(key, value)?,
            "oracle_samples" => d.oracle_samples = parse(key, value)?,
            _ => unreachable!("every listed key has a setter"),
        }
        self.explicit.insert(name);
        Ok(())
    }

    /// Current value of `key` as it would be written in a file.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        Some(match key {
            "seed" => self.seed.to_string(),
            "precision" => if self.precision == Precision::F32 { "f32" } else { "f64" }.to_string(),
            "data_root" => self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "layers" => m.layers.to_string(),
            "width" => m.width.to_string(),
            "rank" => m.rank.to_string(),
            "noise_dim" => m.noise_dim.to_string(),
            "pos_degrees" => m.pos_degrees.to_string(),
            "dir_degrees" => m.dir_degrees.to_string(),
            "skip_layer" => m.skip_layer.to_string(),
            "decoder_hidden" => m.decoder_hidden.to_string(),
            "generator_hidden" => m.generator_hidden.to_string(),
            "use_coefficients" => m.use_coefficients.to_string(),
            "use_generator" => m.use_generator.to_string(),
            "lr_matrices" => t.lr_matrices.0.to_string(),
            "lr_matrices_end" => t.lr_matrices.1.to_string(),
            "lr_generator" => t.lr_generator.0.to_string(),
            "lr_generator_end" => t.lr_generator.1.to_string(),
            "lr_beta" => t.lr_beta.to_string(),
            "alpha" => t.alpha.to_string(),
            "field_norm" => if t.field_norm == FieldNorm::Squared { "squared" } else { "plain" }.to_string(),
            "gamma" => t.gamma.to_string(),
            "new_scene_rays" => t.new_scene_rays.to_string(),
            "distill_rays" => t.distill_rays.to_string(),
            "distill_points" => t.distill_points.to_string(),
            "warmup_steps" => t.warmup_steps.to_string(),
            "total_steps" => t.total_steps.to_string(),
            "samples_per_ray" => t.samples_per_ray.to_string(),
            "eval_samples" => t.eval_samples.to_string(),
            "log_every" => t.log_every.to_string(),
            "grid_resolution" => t.grid.resolution.to_string(),
            "grid_subgrid" => t.grid.subgrid.to_string(),
            "grid_tau" => t.grid.tau.to_string(),
            "grid_bound" => t.grid_bounds.max[0].to_string(),
            "distill" => t.ablation.distill.to_string(),
            "field_loss" => t.ablation.field_loss.to_string(),
            "pixel_loss" => t.ablation.pixel_loss.to_string(),
            "learn_beta" => t.ablation.learn_beta.to_string(),
            "surface_restriction" => t.ablation.surface_restriction.to_string(),
            "freeze_shared" => t.ablation.freeze_shared.to_string(),
            "freeze_old_coefficients" => t.ablation.freeze_old_coefficients.to_string(),
            "image_size" => d.image_size.to_string(),
            "train_views" => d.train_views.to_string(),
            "test_views" => d.test_views.to_string(),
            "oracle_samples" => d.oracle_samples.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Fails when a model-shape key was set to a value other than `model`'s.
    pub fn check_model_keys(&self, model: &ModelConfig) -> Result<()> {
        let saved = Self { model: model.clone(), ..self.clone() };
        for &key in MODEL_KEYS {
            if self.explicit.contains(key) && self.get(key) != saved.get(key) {
                return Err(Error::config(
                    key,
                    format!("the model was created with {key} = {}", saved.get(key).unwrap_or_default()),
                ));
            }
        }
        Ok(())
    }

    /// All keys with their current values and descriptions, as a config file.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, doc)| format!("# {doc}\n{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }
}
