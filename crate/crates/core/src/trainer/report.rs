use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Test-view quality of one scene before and after a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    /// Stage in which the scene was added (0-based).
    pub added_in_stage: usize,
    /// `None` for the scene added in this stage.
    pub psnr_before: Option<f64>,
    pub psnr_after: Option<f64>,
    pub ssim_after: Option<f64>,
}

impl SceneMetrics {
    pub fn psnr_delta(&self) -> Option<f64> {
        Some(self.psnr_after? - self.psnr_before?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub new_scene: f64,
    /// Sum of the distillation terms; zero during warm-up.
    pub distill: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub scene_id: String,
    pub steps: usize,
    /// Every registered scene in training order.
    pub scenes: Vec<SceneMetrics>,
    pub losses: Vec<LossPoint>,
    pub parameter_delta: usize,
    pub beta: [f64; 2],
    /// Steps on which a previous scene had an empty occupancy grid and its
    /// field term was skipped.
    pub skipped_field_terms: usize,
    pub wall_seconds: f64,
}

impl StageReport {
    pub fn scene(&self, id: &str) -> Option<&SceneMetrics> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    /// The same report with the wall time zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self { wall_seconds: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// One row per scene: PSNR after the stage with the change in brackets.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "stage {} (+{})  steps {}  params +{}",
            self.stage, self.scene_id, self.steps, self.parameter_delta
        );
        let _ = writeln!(out, "{:<20} {:>8} {:>16} {:>8}", "scene", "stage", "PSNR", "SSIM");
        for s in &self.scenes {
            let psnr = match (s.psnr_after, s.psnr_delta()) {
                (Some(p), Some(d)) => format!("{p:.2} [{d:+.2}]"),
                (Some(p), None) => format!("{p:.2}"),
                _ => "-".to_string(),
            };
            let ssim = s.ssim_after.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{:<20} {:>8} {:>16} {:>8}", s.scene_id, s.added_in_stage, psnr, ssim);
        }
        out
    }
}
