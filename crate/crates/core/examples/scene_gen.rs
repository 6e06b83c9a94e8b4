//! Write the desk dataset (frames, poses, manifest) to a directory.
use lieflow::scenegen::{render_dataset, SceneSpec};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("lieflow_desk"));
    let mut spec = SceneSpec::desk();
    if std::env::var("LIEFLOW_QUICK").is_ok() {
        spec.render_samples = 96;
    }
    let m = render_dataset(&spec, &out).unwrap();
    println!(
        "{} frames of {}x{} in {}",
        m.frame_count,
        m.width,
        m.height,
        out.display()
    );
    println!(
        "train cameras {:?}, held out {:?}",
        m.splits.train_cameras, m.splits.held_out_cameras
    );
}
