use serde::{Deserialize, Serialize};

use crate::distillation::{Aabb, FieldNorm, GridSpec};
use crate::error::{Error, Result};

use super::adam::AdamHyper;

/// Every training hyperparameter of one continual-learning stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Start and end rate for cross-scene matrices, coefficients, biases and decoder.
    pub lr_matrices: (f64, f64),
    /// Start and end rate for the parameter generators.
    pub lr_generator: (f64, f64),
    pub lr_beta: f64,
    pub adam: AdamHyper,
    /// Weight of the density term inside field distillation.
    pub alpha: f64,
    pub field_norm: FieldNorm,
    /// Weight of the new-scene photometric loss.
    pub gamma: f64,
    pub new_scene_rays: usize,
    /// Split across previous scenes; remainders go to the earliest scenes.
    pub distill_rays: usize,
    pub distill_points: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub grid_bounds: Aabb,
    /// Midpoint samples per ray when rendering evaluation images.
    pub eval_samples: usize,
    /// Loss curve sampling interval in steps.
    pub log_every: usize,
    pub ablation: Ablation,
}

/// Switches for the ablation axes. The default is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Distill previous scenes at all; off gives plain fine-tuning.
    pub distill: bool,
    pub field_loss: bool,
    pub pixel_loss: bool,
    /// Learn β₁, β₂; off keeps them at their initial values.
    pub learn_beta: bool,
    /// Sample field-distillation points from the occupancy grid; off samples the whole box.
    pub surface_restriction: bool,
    pub freeze_shared: bool,
    pub freeze_old_coefficients: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            distill: true,
            field_loss: true,
            pixel_loss: true,
            learn_beta: true,
            surface_restriction: true,
            freeze_shared: false,
            freeze_old_coefficients: false,
        }
    }
}

impl TrainConfig {
    /// Full-size schedule, 20k steps per stage.
    pub fn full() -> Self {
        Self {
            lr_matrices: (5e-4, 5e-5),
            lr_generator: (1e-4, 5e-5),
            lr_beta: 8e-5,
            adam: AdamHyper::default(),
            alpha: 3.0,
            field_norm: FieldNorm::Squared,
            gamma: 0.2,
            new_scene_rays: 4096,
            distill_rays: 1024,
            distill_points: 8192,
            warmup_steps: 2000,
            total_steps: 20_000,
            samples_per_ray: 64,
            seed: 0,
            grid: GridSpec::full(),
            grid_bounds: Aabb::cube(1.5),
            eval_samples: 64,
            log_every: 100,
            ablation: Ablation::default(),
        }
    }

    /// Single-core schedule for the toy scenes. Small batches need the higher
    /// start rate to converge within the step budget. The plain field norm keeps
    /// the density residual from outweighing the pixel terms.
    pub fn desk() -> Self {
        Self {
            field_norm: FieldNorm::Plain,
            lr_matrices: (2e-3, 1e-4),
            lr_generator: (2e-3, 1e-4),
            new_scene_rays: 64,
            distill_rays: 64,
            distill_points: 256,
            warmup_steps: 300,
            total_steps: 6000,
            samples_per_ray: 32,
            grid: GridSpec { resolution: 32, subgrid: 2, tau: 3.0 },
            eval_samples: 64,
            log_every: 50,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("new_scene_rays", self.new_scene_rays),
            ("distill_rays", self.distill_rays),
            ("distill_points", self.distill_points),
            ("total_steps", self.total_steps),
            ("samples_per_ray", self.samples_per_ray),
            ("eval_samples", self.eval_samples),
            ("log_every", self.log_every),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps", "must be below total_steps"));
        }
        let rates = [
            ("lr_matrices", self.lr_matrices.0),
            ("lr_matrices_end", self.lr_matrices.1),
            ("lr_generator", self.lr_generator.0),
            ("lr_generator_end", self.lr_generator.1),
            ("lr_beta", self.lr_beta),
        ];
        for (key, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::config("alpha", "loss weights must be non-negative"));
        }
        self.grid.validate()?;
        self.grid_bounds.validate().map_err(|e| Error::config("grid_bounds", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::full().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn warmup_must_precede_end() {
        let mut c = TrainConfig::desk();
        c.warmup_steps = c.total_steps;
        assert!(c.validate().unwrap_err().to_string().contains("warmup_steps"));
    }
}
