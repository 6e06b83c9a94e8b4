//! Finite-difference audit of every training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::aabb::Aabb;
use crate::ad::{check_gradients, GradCheckOptions, ParamStore, Tensor};
use crate::hexplane::{HexPlane, HexPlaneConfig};
use crate::liegroup::Vec3;
use crate::physics_losses::{
    photometric_tape, DivergenceTarget, PhotometricNorm, RegularizerBatch, RegularizerTerms,
};
use crate::render::{render_rays, sample_ray, Ray};
use crate::se3field::{ReferenceSchedule, Se3Field, Se3FieldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub draws: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Scalars checked per parameter tensor.
    pub per_tensor: usize,
    pub rays: usize,
    pub samples: usize,
    pub reg_points: usize,
    pub reg_times: usize,
    /// Spatial and temporal step of the regulariser stencil.
    pub stencil_step: f64,
    /// Relative errors use `max(|a|, |n|, floor)` as the denominator.
    pub floor: f64,
    pub hexplane: HexPlaneConfig,
    pub se3: Se3FieldConfig,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            draws: 5,
            seed: 0,
            tolerance: 1e-4,
            step: 1e-5,
            per_tensor: 6,
            rays: 4,
            samples: 6,
            reg_points: 3,
            reg_times: 2,
            stencil_step: 1e-2,
            floor: 1e-4,
            hexplane: HexPlaneConfig {
                resolution: 5,
                features: 2,
                embedding: 3,
                view_frequencies: 1,
                rgb_hidden: 4,
                ..Default::default()
            },
            se3: Se3FieldConfig {
                pos_frequencies: 2,
                time_frequencies: 1,
                hidden: 8,
                layers: 3,
                steps: 2,
                ..Default::default()
            },
        }
    }
}

impl GradSuiteConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if c.draws == 0
            || c.per_tensor == 0
            || c.rays == 0
            || c.samples == 0
            || c.reg_points == 0
            || c.reg_times == 0
        {
            return Err(PipelineError::Config("counts must be positive".into()));
        }
        if !(c.tolerance > 0.0 && c.step > 0.0 && c.stencil_step > 0.0 && c.floor > 0.0) {
            return Err(PipelineError::Config(
                "tolerance, steps and floor must be positive".into(),
            ));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTermReport {
    pub term: String,
    pub draws: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub tolerance: f64,
    pub terms: Vec<GradTermReport>,
    pub passed: bool,
}

pub const TERMS: [&str; 5] = [
    "photometric",
    "divergence",
    "momentum",
    "se3_ortho",
    "se3_trans",
];

struct Draw {
    store: ParamStore,
    radiance: HexPlane,
    field: Se3Field,
}

/// Fresh networks with every tensor redrawn, so that no layer starts at zero.
fn draw(config: &GradSuiteConfig, rng: &mut ChaCha8Rng) -> Result<Draw, PipelineError> {
    let aabb = Aabb::cube(1.0);
    let mut store = ParamStore::new();
    let radiance = HexPlane::new(&mut store, config.hexplane.clone(), aabb, rng)?;
    let field = Se3Field::new(&mut store, config.se3.clone(), aabb, rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.entry(id).name.clone();
        let scale = if name.starts_with("hexplane.plane") {
            1.0
        } else {
            0.6
        };
        for x in store.value_mut(id).data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
    Ok(Draw {
        store,
        radiance,
        field,
    })
}

/// Checks the photometric loss rendered through the warp (both networks) and
/// each regulariser term on the twist field, over `draws` random draws.
pub fn check_grad(config: &GradSuiteConfig) -> Result<GradSuiteReport, PipelineError> {
    let mut terms: Vec<GradTermReport> = TERMS
        .iter()
        .map(|t| GradTermReport {
            term: t.to_string(),
            draws: 0,
            checked: 0,
            max_rel_err: 0.0,
            worst_param: String::new(),
            passed: true,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = ReferenceSchedule::uniform(9, 9, 4)?;
    for d in 0..config.draws {
        let Draw {
            store,
            radiance,
            field,
        } = draw(config, &mut rng)?;
        let opts = GradCheckOptions {
            step: config.step,
            max_per_tensor: Some(config.per_tensor),
            floor: config.floor,
            seed: config.seed.wrapping_add(d as u64),
        };

        // Query frame (not a reference), so the render goes through the warp.
        let t_i = schedule.timestamps[1 + d % 3];
        let mut rays = Vec::new();
        while rays.len() < config.rays {
            let origin = Vec3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                2.5,
            );
            let target = Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                0.0,
            );
            let ray = Ray {
                origin,
                direction: (target - origin).normalize(),
            };
            if let Some(s) = sample_ray(
                &ray,
                0.5,
                5.0,
                config.samples,
                Some(&radiance.aabb),
                Some(&mut rng),
            ) {
                rays.push(s);
            }
        }
        let target = Tensor::from_vec(
            config.rays,
            3,
            (0..3 * config.rays).map(|_| rng.random()).collect(),
        );
        let report = check_gradients(&store, &opts, |tape| {
            let pred = render_rays(
                tape,
                &radiance,
                Some(&field),
                Some(&schedule),
                &rays,
                t_i,
                [0.1, 0.2, 0.3],
            )
            .expect("render");
            photometric_tape(tape, pred, target.clone(), PhotometricNorm::Mse).expect("loss")
        });
        absorb(&mut terms[0], &report, config.tolerance);

        let mut batch = RegularizerBatch::sample(
            &radiance.aabb,
            config.reg_points,
            config.reg_times,
            &mut rng,
        )?;
        batch.h_space = config.stencil_step;
        batch.h_time = config.stencil_step;
        for (k, term) in terms.iter_mut().enumerate().skip(1) {
            let report = check_gradients(&store, &opts, |tape| {
                let a = tape.param(field.accel);
                let r =
                    RegularizerTerms::compute(tape, &field, &batch, a, DivergenceTarget::Induced)
                        .expect("regularisers");
                [r.divergence, r.momentum, r.ortho, r.trans][k - 1]
            });
            absorb(term, &report, config.tolerance);
        }
    }
    let passed = terms.iter().all(|t| t.passed);
    Ok(GradSuiteReport {
        tolerance: config.tolerance,
        terms,
        passed,
    })
}

fn absorb(term: &mut GradTermReport, report: &crate::ad::GradCheckReport, tol: f64) {
    term.draws += 1;
    term.checked += report.checked;
    if report.max_rel_err > term.max_rel_err || term.worst_param.is_empty() {
        term.max_rel_err = term.max_rel_err.max(report.max_rel_err);
        term.worst_param = report.worst_param.clone();
    }
    term.passed = term.max_rel_err < tol;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_both_networks() {
        let config = GradSuiteConfig {
            draws: 2,
            ..Default::default()
        };
        let r = check_grad(&config).unwrap();
        assert!(r.passed, "{r:#?}");
        assert_eq!(r.terms.len(), 5);
        assert!(r.terms.iter().all(|t| t.draws == 2 && t.checked > 0));
    }

    #[test]
    fn config_rejects_zero_draws() {
        assert!(GradSuiteConfig::from_json(r#"{"draws": 0}"#).is_err());
        assert!(GradSuiteConfig::from_json(r#"{"draws": 7}"#).is_ok());
    }
}
