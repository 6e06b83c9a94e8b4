#![allow(dead_code)]

use std::path::Path;

use lieflow::hexplane::HexPlaneConfig;
use lieflow::pipeline::TrainConfig;
use lieflow::scenegen::{render_dataset, ring_rig, Motion, SceneSpec};
use lieflow::se3field::Se3FieldConfig;

/// The desk scene shrunk to 16×16 images, 3 training views, one held-out
/// view and 9 frames (the last 2 for extrapolation).
pub fn tiny_spec() -> SceneSpec {
    let mut s = SceneSpec::desk();
    s.cameras = ring_rig(4, 3.2, 0.45, 16, 0.62, 1.2, 5.2);
    s.held_out_cameras = vec![3];
    s.frame_count = 9;
    s.extrapolation_frames = 2;
    s.render_samples = 64;
    s
}

/// One frame, nothing moves.
pub fn static_spec() -> SceneSpec {
    let mut s = tiny_spec();
    for p in &mut s.primitives {
        p.motion = Motion::Static;
    }
    s.frame_count = 1;
    s.extrapolation_frames = 0;
    s
}

pub fn write_dataset(spec: &SceneSpec, dir: &Path) {
    render_dataset(spec, dir).expect("dataset renders");
}

pub fn tiny_config(dataset: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        dataset: dataset.to_path_buf(),
        out_dir: out.to_path_buf(),
        iterations: 10,
        rays_per_batch: 48,
        samples_per_ray: 8,
        chunk_rays: 16,
        reg_points: 4,
        reg_times: 2,
        seed: 5,
        hexplane: HexPlaneConfig {
            resolution: 8,
            features: 4,
            embedding: 6,
            view_frequencies: 1,
            rgb_hidden: 8,
            ..Default::default()
        },
        se3: Se3FieldConfig {
            pos_frequencies: 2,
            time_frequencies: 2,
            hidden: 12,
            layers: 3,
            ..Default::default()
        },
        quadrature_steps: 2,
        ..Default::default()
    }
}

/// Metrics log lines with the wall-clock field removed.
pub fn metrics_without_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_s");
            v.to_string()
        })
        .collect()
}
