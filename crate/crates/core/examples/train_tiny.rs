//! Train on a small version of the desk scene, then evaluate both splits.
use lieflow::hexplane::HexPlaneConfig;
use lieflow::pipeline::{evaluate, train, Dataset, Split, TrainConfig};
use lieflow::scenegen::{render_dataset, ring_rig, SceneSpec};
use lieflow::se3field::Se3FieldConfig;

fn main() {
    let root = std::env::temp_dir().join("lieflow_train_tiny");
    let mut spec = SceneSpec::desk();
    spec.cameras = ring_rig(6, 3.2, 0.45, 24, 0.62, 1.2, 5.2);
    spec.held_out_cameras = vec![5];
    spec.frame_count = 13;
    spec.extrapolation_frames = 3;
    spec.render_samples = 128;
    render_dataset(&spec, &root.join("data")).unwrap();

    let config = TrainConfig {
        dataset: root.join("data"),
        out_dir: root.join("run"),
        iterations: 300,
        rays_per_batch: 96,
        samples_per_ray: 16,
        hexplane: HexPlaneConfig {
            resolution: 16,
            features: 6,
            rgb_hidden: 24,
            ..Default::default()
        },
        se3: Se3FieldConfig {
            hidden: 32,
            layers: 3,
            ..Default::default()
        },
        quadrature_steps: 2,
        ..Default::default()
    };
    let outcome = train(config).unwrap();
    println!("final batch loss {:.4e}", outcome.final_loss.unwrap());
    let ds = Dataset::open(&root.join("data")).unwrap();
    for split in [Split::Interp, Split::Extrap] {
        let r = evaluate(&outcome.checkpoint, &ds, split).unwrap();
        println!(
            "{}: PSNR {:.2} dB, SSIM {:.3}",
            split.name(),
            r.mean_psnr,
            r.mean_ssim
        );
    }
}
