//! Analytic dynamic scenes of rigidly moving spheres and boxes, dataset
//! rendering, point tracks, and direct twist recovery by Procrustes
//! alignment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aabb::Aabb;
use crate::hexplane::FieldSample;
use crate::liegroup::{
    apply_point, compose, exp_se3, log_se3, rot_z, LieError, Mat3, RigidTransform, Twist, Vec3,
};
use crate::render::{render_field_image, CameraModel, Image, RenderError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("i/o failure at {path}: {message}")]
    IOFailure { path: String, message: String },
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SceneError {
    SceneError::IOFailure {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
}

impl Shape {
    pub fn contains(&self, q: &Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => {
                (q - Vec3::from(center)).norm_squared() <= radius * radius
            }
            Shape::Box {
                center,
                half_extents,
            } => (0..3).all(|i| (q[i] - center[i]).abs() <= half_extents[i]),
        }
    }

    pub fn center(&self) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => Vec3::from(center),
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => radius,
            Shape::Box { half_extents, .. } => Vec3::from(half_extents).norm(),
        }
    }

    /// Random point on the surface.
    pub fn surface_point<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Shape::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).sqrt();
                Vec3::from(center) + Vec3::new(s * phi.cos(), s * phi.sin(), z) * radius
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                let axis = rng.random_range(0..3);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut q =
                    Vec3::from_fn(|i, _| rng.random_range(-half_extents[i]..half_extents[i]));
                q[axis] = sign * half_extents[axis];
                Vec3::from(center) + q
            }
        }
    }
}

/// Rigid motion of a primitive; the pose at time 0 is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Pose `exp(t·ξ)`.
    Constant {
        twist: Twist,
    },
    /// Twist `twists[j]` on `[breaks[j], breaks[j+1])`, the last one holding
    /// until `t = 1`. `breaks[0]` must be 0.
    Piecewise {
        breaks: Vec<f64>,
        twists: Vec<Twist>,
    },
}

impl Motion {
    pub fn pose(&self, t: f64) -> RigidTransform {
        match self {
            Motion::Static => RigidTransform::identity(),
            Motion::Constant { twist } => exp_se3(&twist.scaled(t)),
            Motion::Piecewise { breaks, twists } => {
                let mut g = RigidTransform::identity();
                for (j, xi) in twists.iter().enumerate() {
                    let start = breaks[j];
                    if t <= start {
                        break;
                    }
                    let end = breaks.get(j + 1).copied().unwrap_or(f64::INFINITY).min(t);
                    g = compose(&exp_se3(&xi.scaled(end - start)), &g);
                }
                g
            }
        }
    }

    /// Spatial twist active at time `t`.
    pub fn twist_at(&self, t: f64) -> Twist {
        match self {
            Motion::Static => Twist::zero(),
            Motion::Constant { twist } => *twist,
            Motion::Piecewise { breaks, twists } => {
                let j = breaks.iter().rposition(|&b| b <= t).unwrap_or(0);
                twists[j]
            }
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        if let Motion::Piecewise { breaks, twists } = self {
            let ok = !twists.is_empty()
                && breaks.len() == twists.len()
                && breaks[0] == 0.0
                && breaks.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                return Err(SceneError::Invalid(
                    "piecewise motion needs increasing breaks starting at 0, one per twist".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub rgb: [f64; 3],
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub aabb: Aabb,
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<CameraModel>,
    pub frame_count: usize,
    /// Camera indices withheld from training.
    pub held_out_cameras: Vec<usize>,
    /// Trailing frames reserved for extrapolation.
    pub extrapolation_frames: usize,
    /// Quadrature samples per ray for ground-truth renders.
    #[serde(default = "default_gt_samples")]
    pub render_samples: usize,
    #[serde(default)]
    pub background: [f64; 3],
}

fn default_gt_samples() -> usize {
    384
}

/// Cameras on a ring around the origin, alternating above and below the
/// equator, all looking at the origin.
pub fn ring_rig(
    count: usize,
    radius: f64,
    elevation: f64,
    size: usize,
    fov_y: f64,
    near: f64,
    far: f64,
) -> Vec<CameraModel> {
    (0..count)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / count as f64;
            let el = if i % 2 == 0 {
                elevation
            } else {
                -0.5 * elevation
            };
            let eye = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * radius;
            CameraModel::look_at(eye, Vec3::zeros(), Vec3::z(), size, size, fov_y, near, far)
        })
        .collect()
}

impl SceneSpec {
    /// The desk scene: a multi-coloured rigid body screwing about an
    /// off-centre vertical axis next to a static sphere, 64×64 images,
    /// 8 training and 2 held-out cameras, 30 frames with the last 5
    /// reserved for extrapolation.
    pub fn desk() -> Self {
        let axis_point = Vec3::new(0.1, -0.05, 0.0);
        let omega = Vec3::new(0.0, 0.0, 2.4);
        let drift = Vec3::new(0.0, 0.0, 0.3);
        let twist = Twist::new(omega, -omega.cross(&axis_point) + drift);
        let motion = Motion::Constant { twist };
        let body = |shape, rgb| Primitive {
            shape,
            density: 40.0,
            rgb,
            motion: motion.clone(),
        };
        let primitives = vec![
            body(
                Shape::Box {
                    center: [0.3, 0.0, -0.25],
                    half_extents: [0.3, 0.1, 0.12],
                },
                [0.9, 0.15, 0.1],
            ),
            body(
                Shape::Sphere {
                    center: [-0.15, 0.0, -0.25],
                    radius: 0.2,
                },
                [0.1, 0.8, 0.2],
            ),
            body(
                Shape::Box {
                    center: [0.45, 0.0, -0.05],
                    half_extents: [0.08, 0.08, 0.1],
                },
                [0.15, 0.3, 0.95],
            ),
            Primitive {
                shape: Shape::Sphere {
                    center: [-0.5, 0.5, 0.45],
                    radius: 0.18,
                },
                density: 40.0,
                rgb: [0.95, 0.85, 0.1],
                motion: Motion::Static,
            },
        ];
        let mut cameras = ring_rig(10, 3.2, 0.45, 64, 0.62, 1.2, 5.2);
        // Held-out views sit between training views.
        let held = [3usize, 8];
        let mut order: Vec<CameraModel> = (0..10)
            .filter(|i| !held.contains(i))
            .map(|i| cameras[i])
            .collect();
        order.extend(held.iter().map(|&i| cameras[i]));
        cameras = order;
        Self {
            aabb: Aabb::cube(1.0),
            primitives,
            cameras,
            frame_count: 30,
            held_out_cameras: vec![8, 9],
            extrapolation_frames: 5,
            render_samples: default_gt_samples(),
            background: [0.0; 3],
        }
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        if self.frame_count <= 1 {
            0.0
        } else {
            frame as f64 / (self.frame_count - 1) as f64
        }
    }

    pub fn train_cameras(&self) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|c| !self.held_out_cameras.contains(c))
            .collect()
    }

    pub fn train_frame_count(&self) -> usize {
        self.frame_count - self.extrapolation_frames
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if self.aabb.validate().is_err() {
            return bad("bounding box".into());
        }
        if self.frame_count == 0 || self.extrapolation_frames >= self.frame_count {
            return bad("frame_count must exceed extrapolation_frames".into());
        }
        if self.cameras.is_empty() {
            return bad("no cameras".into());
        }
        if self.render_samples == 0 {
            return bad("render_samples must be positive".into());
        }
        if let Some(&c) = self
            .held_out_cameras
            .iter()
            .find(|&&c| c >= self.cameras.len())
        {
            return bad(format!("held-out camera {c} does not exist"));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate()
                .map_err(|e| SceneError::Invalid(format!("camera {i}: {e}")))?;
        }
        let inner = self.aabb;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density > 0.0 && p.density.is_finite()) {
                return bad(format!("primitive {i}: density must be positive"));
            }
            p.motion.validate()?;
            let r = p.shape.bounding_radius();
            for k in 0..=64 {
                let t = k as f64 / 64.0;
                let c = apply_point(&p.motion.pose(t), &p.shape.center());
                if (0..3).any(|a| c[a] - r < inner.min[a] || c[a] + r > inner.max[a]) {
                    return bad(format!("primitive {i} leaves the bounding box at t = {t}"));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth density and colour. Overlapping primitives add densities
/// and mix colours by density.
pub fn analytic_field(spec: &SceneSpec, p: &Vec3, t: f64) -> FieldSample {
    let mut sigma = 0.0;
    let mut rgb = [0.0; 3];
    for prim in &spec.primitives {
        let q = apply_point(&prim.motion.pose(t).inverse(), p);
        if prim.shape.contains(&q) {
            sigma += prim.density;
            for c in 0..3 {
                rgb[c] += prim.density * prim.rgb[c];
            }
        }
    }
    if sigma > 0.0 {
        rgb = rgb.map(|c| c / sigma);
    }
    FieldSample { sigma, rgb }
}

/// Precomputed inverse poses for one time; speeds up rendering.
fn frozen_field(spec: &SceneSpec, t: f64) -> impl Fn(&Vec3) -> FieldSample + Sync + '_ {
    let inv: Vec<RigidTransform> = spec
        .primitives
        .iter()
        .map(|p| p.motion.pose(t).inverse())
        .collect();
    move |p: &Vec3| {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for (prim, g) in spec.primitives.iter().zip(&inv) {
            if prim.shape.contains(&apply_point(g, p)) {
                sigma += prim.density;
                for c in 0..3 {
                    rgb[c] += prim.density * prim.rgb[c];
                }
            }
        }
        if sigma > 0.0 {
            rgb = rgb.map(|c| c / sigma);
        }
        FieldSample { sigma, rgb }
    }
}

pub fn render_frame(spec: &SceneSpec, camera: usize, frame: usize) -> Result<Image, SceneError> {
    let cam = spec
        .cameras
        .get(camera)
        .ok_or_else(|| SceneError::Invalid(format!("camera {camera} does not exist")))?;
    let t = spec.timestamp(frame);
    Ok(render_field_image(
        cam,
        spec.render_samples,
        Some(&spec.aabb),
        spec.background,
        frozen_field(spec, t),
    )?)
}

pub fn frame_file_name(camera: usize, frame: usize) -> String {
    format!("cam{camera:02}_f{frame:03}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub camera: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Row-major 4×4 camera-to-world matrix.
    pub camera_to_world: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub convention: String,
    pub cameras: Vec<PoseEntry>,
}

pub const CAMERA_CONVENTION: &str = "right-handed; camera looks down its local -z axis, +x right, +y up; matrices map camera to world";

impl PoseEntry {
    pub fn from_camera(index: usize, c: &CameraModel) -> Self {
        let m = c.pose.to_matrix();
        Self {
            camera: index,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
            camera_to_world: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
        }
    }

    pub fn to_camera(&self) -> CameraModel {
        let m = Matrix4::from_fn(|r, k| self.camera_to_world[r][k]);
        CameraModel {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            pose: RigidTransform::from_matrix(&m),
            near: self.near,
            far: self.far,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train_cameras: Vec<usize>,
    pub held_out_cameras: Vec<usize>,
    /// Frames inside the training time range.
    pub train_frames: Vec<usize>,
    /// Frames after the training time range.
    pub extrapolation_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub timestamps: Vec<f64>,
    pub aabb: Aabb,
    pub background: [f64; 3],
    pub splits: Splits,
    /// Ground-truth motion per primitive; evaluation only.
    pub ground_truth_motions: Vec<Motion>,
}

impl Manifest {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        let n_train = spec.train_frame_count();
        Self {
            frame_count: spec.frame_count,
            width: spec.cameras[0].width,
            height: spec.cameras[0].height,
            timestamps: (0..spec.frame_count).map(|f| spec.timestamp(f)).collect(),
            aabb: spec.aabb,
            background: spec.background,
            splits: Splits {
                train_cameras: spec.train_cameras(),
                held_out_cameras: spec.held_out_cameras.clone(),
                train_frames: (0..n_train).collect(),
                extrapolation_frames: (n_train..spec.frame_count).collect(),
            },
            ground_truth_motions: spec.primitives.iter().map(|p| p.motion.clone()).collect(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SceneError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Renders every camera × frame and writes `frames/`, `poses.json` and
/// `manifest.json` under `out`.
pub fn render_dataset(spec: &SceneSpec, out: &Path) -> Result<Manifest, SceneError> {
    spec.validate()?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..spec.cameras.len())
        .flat_map(|c| (0..spec.frame_count).map(move |f| (c, f)))
        .collect();
    jobs.par_iter()
        .try_for_each(|&(c, f)| -> Result<(), SceneError> {
            let img = render_frame(spec, c, f)?;
            img.save_png(&frames_dir.join(frame_file_name(c, f)))?;
            Ok(())
        })?;
    let poses = PosesFile {
        convention: CAMERA_CONVENTION.into(),
        cameras: spec
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| PoseEntry::from_camera(i, c))
            .collect(),
    };
    write_json(&out.join("poses.json"), &poses)?;
    let manifest = Manifest::from_spec(spec);
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Rigid alignment `(R, t)` minimising `Σ ‖R·aᵢ + t − bᵢ‖²`.
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> Result<RigidTransform, SceneError> {
    if a.len() != b.len() {
        return Err(SceneError::Invalid(format!(
            "{} source points, {} target points",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(SceneError::DegenerateConfiguration(format!(
            "{} points, need at least 3",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        let (dp, dq) = (p - ca, q - cb);
        h += dp * dq.transpose();
        spread += dp * dp.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(SceneError::DegenerateConfiguration(
            "points are collinear or coincident".into(),
        ));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r: Mat3 = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform::new(r, cb - r * ca))
}

/// Twist `ξ` such that `exp(dt·ξ)` best maps `p0s` onto `pts`.
pub fn fit_twist(p0s: &[Vec3], pts: &[Vec3], dt: f64) -> Result<Twist, SceneError> {
    if !(dt > 0.0) {
        return Err(SceneError::Invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let g = kabsch(p0s, pts)?;
    if p0s == pts {
        return Ok(Twist::zero());
    }
    Ok(log_se3(&g)?.scaled(1.0 / dt))
}

/// Surface points followed through a rigid motion.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub timestamps: Vec<f64>,
    pub base: Vec<Vec3>,
    /// `positions[f][k] = g_f · base[k]`.
    pub positions: Vec<Vec<Vec3>>,
    pub transforms: Vec<RigidTransform>,
}

impl TrackSet {
    pub fn from_transforms(
        base: Vec<Vec3>,
        timestamps: Vec<f64>,
        transforms: Vec<RigidTransform>,
    ) -> Self {
        let positions = transforms
            .iter()
            .map(|g| base.iter().map(|p| apply_point(g, p)).collect())
            .collect();
        Self {
            timestamps,
            base,
            positions,
            transforms,
        }
    }

    /// Tracks of `k` surface points of one primitive of `spec`.
    pub fn from_scene<R: Rng>(
        spec: &SceneSpec,
        primitive: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self, SceneError> {
        let prim = spec
            .primitives
            .get(primitive)
            .ok_or_else(|| SceneError::Invalid(format!("primitive {primitive} does not exist")))?;
        let base = (0..k).map(|_| prim.shape.surface_point(rng)).collect();
        let ts: Vec<f64> = (0..spec.frame_count).map(|f| spec.timestamp(f)).collect();
        let gs = ts.iter().map(|&t| prim.motion.pose(t)).collect();
        Ok(Self::from_transforms(base, ts, gs))
    }

    /// Motion `R_z(θ_f)` plus translation `t_f`.
    pub fn from_rz(
        base: Vec<Vec3>,
        timestamps: Vec<f64>,
        thetas: &[f64],
        translations: &[Vec3],
    ) -> Self {
        let gs = thetas
            .iter()
            .zip(translations)
            .map(|(&th, t)| RigidTransform::new(rot_z(th), *t))
            .collect();
        Self::from_transforms(base, timestamps, gs)
    }

    /// Ground-truth spatial twist between consecutive frames.
    pub fn frame_twists(&self) -> Result<Vec<Twist>, SceneError> {
        self.transforms
            .windows(2)
            .zip(self.timestamps.windows(2))
            .map(
                |(g, t)| Ok(log_se3(&compose(&g[1], &g[0].inverse()))?.scaled(1.0 / (t[1] - t[0]))),
            )
            .collect()
    }

    /// Line format: `t <frame> <time>` declares a frame, `p <frame> <x> <y> <z>`
    /// adds a point to it, `gt <frame> <ωx ωy ωz vx vy vz>` records the twist
    /// from that frame to the next. `#` starts a comment.
    pub fn to_text(&self, ground_truth: bool) -> Result<String, SceneError> {
        let mut s = String::from("# lieflow tracks\n");
        for (f, (t, pts)) in self.timestamps.iter().zip(&self.positions).enumerate() {
            let _ = writeln!(s, "t {f} {t:e}");
            for p in pts {
                let _ = writeln!(s, "p {f} {:e} {:e} {:e}", p.x, p.y, p.z);
            }
        }
        if ground_truth {
            for (f, xi) in self.frame_twists()?.iter().enumerate() {
                let a = xi.to_array();
                let _ = writeln!(
                    s,
                    "gt {f} {:e} {:e} {:e} {:e} {:e} {:e}",
                    a[0], a[1], a[2], a[3], a[4], a[5]
                );
            }
        }
        Ok(s)
    }
}

/// Parsed tracks file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFile {
    pub timestamps: Vec<f64>,
    pub positions: Vec<Vec<Vec3>>,
    pub ground_truth: Vec<Option<Twist>>,
}

pub fn parse_tracks(text: &str) -> Result<TrackFile, SceneError> {
    let mut ts: Vec<f64> = Vec::new();
    let mut pos: Vec<Vec<Vec3>> = Vec::new();
    let mut gt: Vec<(usize, usize, Twist)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| SceneError::ParseError { line, message };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut it = body.split_whitespace();
        let tag = it.next().unwrap_or_default();
        let frame: usize = it
            .next()
            .ok_or_else(|| err("missing frame index".into()))?
            .parse()
            .map_err(|e| err(format!("frame index: {e}")))?;
        let nums: Vec<f64> = it
            .map(|x| x.parse::<f64>().map_err(|e| err(format!("`{x}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if nums.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        match (tag, nums.len()) {
            ("t", 1) => {
                if frame != ts.len() {
                    return Err(err(format!("expected frame {}, found {frame}", ts.len())));
                }
                ts.push(nums[0]);
                pos.push(Vec::new());
            }
            ("p", 3) => {
                let slot = pos
                    .get_mut(frame)
                    .ok_or_else(|| err(format!("frame {frame} not declared")))?;
                slot.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            ("gt", 6) => gt.push((
                line,
                frame,
                Twist::from_array(std::array::from_fn(|k| nums[k])),
            )),
            ("t" | "p" | "gt", n) => return Err(err(format!("`{tag}` line has {n} numbers"))),
            _ => return Err(err(format!("unknown record `{tag}`"))),
        }
    }
    if ts.len() < 2 {
        return Err(SceneError::ParseError {
            line: text.lines().count(),
            message: "need at least two frames".into(),
        });
    }
    let k = pos[0].len();
    if let Some(f) = pos.iter().position(|p| p.len() != k) {
        return Err(SceneError::ParseError {
            line: text.lines().count(),
            message: format!("frame {f} has {} points, frame 0 has {k}", pos[f].len()),
        });
    }
    let mut ground_truth = vec![None; ts.len() - 1];
    for (line, f, xi) in gt {
        *ground_truth.get_mut(f).ok_or(SceneError::ParseError {
            line,
            message: format!("no frame pair starts at {f}"),
        })? = Some(xi);
    }
    Ok(TrackFile {
        timestamps: ts,
        positions: pos,
        ground_truth,
    })
}
