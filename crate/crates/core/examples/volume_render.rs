//! Render the analytic desk scene from one camera and save a PNG.
use lieflow::render::render_field_image;
use lieflow::scenegen::{analytic_field, SceneSpec};

fn main() {
    let spec = SceneSpec::desk();
    let cam = &spec.cameras[0];
    let t = spec.timestamp(10);
    let img = render_field_image(cam, 192, Some(&spec.aabb), spec.background, |p| {
        analytic_field(&spec, p, t)
    })
    .unwrap();
    let out = std::env::temp_dir().join("lieflow_desk_cam0.png");
    img.save_png(&out).unwrap();
    println!("wrote {}", out.display());
}
