use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, PipelineError};
use crate::ad::AdamConfig;
use crate::hexplane::HexPlaneConfig;
use crate::physics_losses::{DivergenceTarget, LossWeights, PhotometricNorm};
use crate::se3field::{Ablation, Integration, Se3FieldConfig};

/// Training configuration, read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory written by `gen-scene`.
    pub dataset: PathBuf,
    /// Checkpoints and metrics go here.
    pub out_dir: PathBuf,
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub lr_radiance: f64,
    pub lr_se3: f64,
    pub lambda_div: f64,
    pub lambda_mom: f64,
    pub lambda_se3: f64,
    pub lambda_trans: f64,
    pub divergence_target: DivergenceTarget,
    pub photometric: PhotometricNorm,
    pub reference_stride: usize,
    /// Overrides `se3.steps`.
    pub quadrature_steps: usize,
    /// Overrides `se3.integration`.
    pub integration: Integration,
    /// Regulariser batch: `N` points × `M` times.
    pub reg_points: usize,
    pub reg_times: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub hexplane: HexPlaneConfig,
    pub se3: Se3FieldConfig,
    pub adam: AdamConfig,
    /// Rays per tape; the batch is split into chunks of this size.
    pub chunk_rays: usize,
    /// Samples per ray for evaluation renders (0 = same as training).
    pub eval_samples: usize,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            dataset: PathBuf::from("scene"),
            out_dir: PathBuf::from("run"),
            iterations: 20_000,
            rays_per_batch: 1024,
            samples_per_ray: 64,
            lr_radiance: 0.01,
            lr_se3: 5e-4,
            lambda_div: w.lambda_div,
            lambda_mom: w.lambda_mom,
            lambda_se3: w.lambda_se3,
            lambda_trans: w.lambda_trans,
            divergence_target: w.divergence_target,
            photometric: w.photometric,
            reference_stride: 4,
            quadrature_steps: 4,
            integration: Integration::Trapezoid,
            reg_points: 32,
            reg_times: 4,
            seed: 0,
            ablation: Ablation::Full,
            hexplane: HexPlaneConfig::default(),
            se3: Se3FieldConfig::default(),
            adam: AdamConfig::default(),
            chunk_rays: 256,
            eval_samples: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut c = Self::from_json(&text)?;
        // Relative paths are taken relative to the config file.
        if let Some(dir) = path.parent() {
            if c.dataset.is_relative() {
                c.dataset = dir.join(&c.dataset);
            }
            if c.out_dir.is_relative() {
                c.out_dir = dir.join(&c.out_dir);
            }
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        let positive = [
            ("rays_per_batch", self.rays_per_batch),
            ("samples_per_ray", self.samples_per_ray),
            ("reference_stride", self.reference_stride),
            ("quadrature_steps", self.quadrature_steps),
            ("reg_points", self.reg_points),
            ("reg_times", self.reg_times),
            ("chunk_rays", self.chunk_rays),
            (
                "hexplane.resolution",
                self.hexplane.resolution.saturating_sub(1),
            ),
            ("hexplane.features", self.hexplane.features),
            ("hexplane.embedding", self.hexplane.embedding),
            ("hexplane.rgb_hidden", self.hexplane.rgb_hidden),
            ("se3.hidden", self.se3.hidden),
            ("se3.layers", self.se3.layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_radiance > 0.0 && self.lr_se3 > 0.0) {
            return bad("learning rates must be positive");
        }
        let lambdas = [
            self.lambda_div,
            self.lambda_mom,
            self.lambda_se3,
            self.lambda_trans,
        ];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.hexplane.init_range > 0.0) {
            return bad("hexplane.init_range must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam parameters out of range");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_div: self.lambda_div,
            lambda_mom: self.lambda_mom,
            lambda_se3: self.lambda_se3,
            lambda_trans: self.lambda_trans,
            divergence_target: self.divergence_target,
            photometric: self.photometric,
        }
    }

    pub fn se3_config(&self) -> Se3FieldConfig {
        Se3FieldConfig {
            steps: self.quadrature_steps,
            integration: self.integration,
            ..self.se3.clone()
        }
    }

    pub fn eval_samples(&self) -> usize {
        if self.eval_samples == 0 {
            self.samples_per_ray
        } else {
            self.eval_samples
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = TrainConfig::from_json(
            r#"{"dataset": "d", "iterations": 5, "ablation": "rotation_only"}"#,
        )
        .unwrap();
        assert_eq!(c.iterations, 5);
        assert_eq!(c.ablation, Ablation::RotationOnly);
        assert_eq!(c.rays_per_batch, 1024);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_json(r#"{"rays_per_batch": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lr_se3": -1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lambda_div": -1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"no_such_key": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"ablation": "sideways"}"#).is_err());
    }
}
