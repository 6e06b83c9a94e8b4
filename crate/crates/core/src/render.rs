//! Pinhole cameras, ray sampling, emission-absorption compositing and image
//! metrics.
//!
//! Cameras are right-handed and look down their local −z axis; `+x` points
//! right and `+y` up in the image. Poses are camera-to-world.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aabb::Aabb;
use crate::ad::{ParamStore, Tape, Tensor, Var};
use crate::hexplane::{FieldError, FieldSample, HexPlane};
use crate::liegroup::{Mat3, RigidTransform, Vec3};
use crate::se3field::{ReferenceSchedule, Se3Error, Se3Field};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({row}, {col}) outside a {width}×{height} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Warp(#[from] Se3Error),
    #[error("image i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: RigidTransform,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, vertical field of view `fov_y`
    /// (radians), principal point at the image centre.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        fov_y: f64,
        near: f64,
        far: f64,
    ) -> Self {
        let z = (eye - target).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            pose: RigidTransform::new(Mat3::from_columns(&[x, y, z]), eye),
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidCamera(m.into()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return bad("near must be below far");
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty image");
        }
        if self.pose.orthonormality_error() > 1e-6 {
            return bad("pose rotation is not orthonormal");
        }
        Ok(())
    }

    pub fn ray(&self, row: usize, col: usize) -> Result<Ray, RenderError> {
        if row >= self.height || col >= self.width {
            return Err(RenderError::PixelOutOfBounds {
                row,
                col,
                width: self.width,
                height: self.height,
            });
        }
        let x = (col as f64 + 0.5 - self.cx) / self.fx;
        let y = -(row as f64 + 0.5 - self.cy) / self.fy;
        let d = self.pose.rotation * Vec3::new(x, y, -1.0);
        Ok(Ray {
            origin: self.pose.translation,
            direction: d.normalize(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vec3 {
        self.origin + self.direction * depth
    }
}

pub fn gen_rays(cam: &CameraModel, pixels: &[(usize, usize)]) -> Result<Vec<Ray>, RenderError> {
    cam.validate()?;
    pixels.iter().map(|&(r, c)| cam.ray(r, c)).collect()
}

/// `n` equal bins over `[near, far]`: bin centres, or one uniform draw per
/// bin when an RNG is supplied.
pub fn stratified_depths<R: Rng>(
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut R>,
) -> Vec<f64> {
    let w = (far - near) / n as f64;
    match jitter {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * w).collect(),
        Some(rng) => (0..n)
            .map(|i| near + (i as f64 + rng.random::<f64>()) * w)
            .collect(),
    }
}

pub fn stratified_samples(near: f64, far: f64, n: usize, jitter: bool, seed: u64) -> Vec<f64> {
    if jitter {
        stratified_depths(near, far, n, Some(&mut ChaCha8Rng::seed_from_u64(seed)))
    } else {
        stratified_depths::<ChaCha8Rng>(near, far, n, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub origin: Vec3,
    pub direction: Vec3,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySample {
    pub fn new(ray: &Ray, depths: Vec<f64>, far: f64) -> Self {
        let n = depths.len();
        let deltas = (0..n)
            .map(|i| {
                if i + 1 < n {
                    depths[i + 1] - depths[i]
                } else {
                    far - depths[i]
                }
            })
            .collect();
        Self {
            origin: ray.origin,
            direction: ray.direction,
            depths,
            deltas,
        }
    }

    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.depths
            .iter()
            .map(|&d| self.origin + self.direction * d)
    }
}

/// Samples a ray over `[near, far]`, optionally clipped to `clip`. `None`
/// when the clipped interval is empty.
pub fn sample_ray<R: Rng>(
    ray: &Ray,
    near: f64,
    far: f64,
    n: usize,
    clip: Option<&Aabb>,
    jitter: Option<&mut R>,
) -> Option<RaySample> {
    let (mut lo, mut hi) = (near, far);
    if let Some(b) = clip {
        let (t0, t1) = b.intersect(&ray.origin, &ray.direction)?;
        lo = lo.max(t0);
        hi = hi.min(t1);
    }
    if !(lo < hi) {
        return None;
    }
    Some(RaySample::new(
        ray,
        stratified_depths(lo, hi, n, jitter),
        hi,
    ))
}

/// Compositing weights `Tᵢαᵢ` and the final transmittance.
pub fn render_weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let mut w = Vec::with_capacity(sigmas.len());
    for (s, d) in sigmas.iter().zip(deltas) {
        let alpha = 1.0 - (-s * d).exp();
        w.push(trans * alpha);
        trans *= 1.0 - alpha;
    }
    (w, trans)
}

pub fn volume_render(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
) -> Result<[f64; 3], RenderError> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(RenderError::ShapeMismatch(format!(
            "{} densities, {} colours, {} deltas",
            sigmas.len(),
            colors.len(),
            deltas.len()
        )));
    }
    let (w, t_end) = render_weights(sigmas, deltas);
    let mut out = background.map(|b| t_end * b);
    for (wi, c) in w.iter().zip(colors) {
        for k in 0..3 {
            out[k] += wi * c[k];
        }
    }
    Ok(out)
}

/// Linear RGB image, values nominally in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb
                .iter()
                .copied()
                .cycle()
                .take(width * height * 3)
                .collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<(), RenderError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(RenderError::ShapeMismatch(format!(
                "{}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| quantize(v) as f64 / 255.0)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Image, RenderError> {
        let img = image::open(path)
            .map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn mse(img: &Image, reference: &Image) -> Result<f64, RenderError> {
    img.same_shape(reference)?;
    let n = img.data.len().max(1) as f64;
    Ok(img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn psnr(img: &Image, reference: &Image) -> Result<f64, RenderError> {
    Ok(psnr_from_mse(mse(img, reference)?))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a single-channel image.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), averaged over the
/// three channels, dynamic range 1.
pub fn ssim(img: &Image, reference: &Image) -> Result<f64, RenderError> {
    img.same_shape(reference)?;
    let (w, h) = (img.width, img.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(RenderError::ShapeMismatch(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = img.data.iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = reference.data.iter().skip(ch).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, _, _) = filter_valid(&x, w, h, &k);
        let (my, _, _) = filter_valid(&y, w, h, &k);
        let (sxx, _, _) = filter_valid(&xx, w, h, &k);
        let (syy, _, _) = filter_valid(&yy, w, h, &k);
        let (sxy, _, _) = filter_valid(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            acc +=
                ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples: usize,
    pub background: [f64; 3],
    /// Restrict samples to the part of each ray inside the scene box.
    pub clip_to_aabb: bool,
    /// Rays per tape when rendering whole images.
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            background: [0.0; 3],
            clip_to_aabb: true,
            chunk_rays: 256,
        }
    }
}

/// Renders sampled rays through the learned model on `tape`, returning
/// `rays × 3` colours. With a schedule the radiance field is queried at the
/// nearest reference time, through the warp when one is given; without a
/// schedule it is queried at `t_i` directly.
pub fn render_rays(
    tape: &mut Tape<'_>,
    radiance: &HexPlane,
    warp: Option<&Se3Field>,
    schedule: Option<&ReferenceSchedule>,
    rays: &[RaySample],
    t_i: f64,
    background: [f64; 3],
) -> Result<Var, RenderError> {
    let s = rays.first().map(|r| r.depths.len()).unwrap_or(0);
    if s == 0 || rays.iter().any(|r| r.depths.len() != s) {
        return Err(RenderError::ShapeMismatch(
            "rays need equal, nonzero sample counts".into(),
        ));
    }
    let points: Vec<Vec3> = rays.iter().flat_map(|r| r.points()).collect();
    let (pvar, t_query) = match (warp, schedule) {
        (Some(field), Some(sched)) => {
            let (p, r) = field.warp_to_canonical(tape, sched, &points, t_i)?;
            (p, r.time)
        }
        (None, Some(sched)) => (
            tape.constant(crate::se3field::points_tensor(&points)),
            sched.nearest_ref(t_i)?.time,
        ),
        _ => (tape.constant(crate::se3field::points_tensor(&points)), t_i),
    };
    let n = points.len();
    let times = tape.constant(Tensor::filled(n, 1, t_query));
    let dirs: Vec<Vec3> = rays
        .iter()
        .flat_map(|r| std::iter::repeat_n(r.direction, s))
        .collect();
    let view = tape.constant(radiance.view_encoding(&dirs));
    let (sigma, rgb) = radiance.query(tape, pvar, times, view)?;
    let deltas: Vec<f64> = rays.iter().flat_map(|r| r.deltas.iter().copied()).collect();
    Ok(tape.composite(sigma, rgb, deltas, s, background))
}

/// Full-image render of the learned model (no jitter). Chunks are rendered
/// in parallel and assembled by index.
pub fn render_image(
    store: &ParamStore,
    radiance: &HexPlane,
    warp: Option<&Se3Field>,
    schedule: Option<&ReferenceSchedule>,
    cam: &CameraModel,
    t_i: f64,
    config: &RenderConfig,
) -> Result<Image, RenderError> {
    cam.validate()?;
    let clip = config.clip_to_aabb.then_some(&radiance.aabb);
    let pixels: Vec<(usize, usize)> = (0..cam.height)
        .flat_map(|r| (0..cam.width).map(move |c| (r, c)))
        .collect();
    let chunks: Vec<&[(usize, usize)]> = pixels.chunks(config.chunk_rays.max(1)).collect();
    let rendered: Result<Vec<Vec<(usize, usize, [f64; 3])>>, RenderError> = chunks
        .par_iter()
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len());
            let mut hits = Vec::new();
            let mut samples = Vec::new();
            for &(r, c) in chunk.iter() {
                let ray = cam.ray(r, c)?;
                match sample_ray::<ChaCha8Rng>(&ray, cam.near, cam.far, config.samples, clip, None)
                {
                    Some(s) => {
                        hits.push((r, c));
                        samples.push(s);
                    }
                    None => out.push((r, c, config.background)),
                }
            }
            if !samples.is_empty() {
                let mut tape = Tape::new(store);
                let colors = render_rays(
                    &mut tape,
                    radiance,
                    warp,
                    schedule,
                    &samples,
                    t_i,
                    config.background,
                )?;
                let v = tape.value(colors);
                for (i, &(r, c)) in hits.iter().enumerate() {
                    out.push((r, c, [v.get(i, 0), v.get(i, 1), v.get(i, 2)]));
                }
            }
            Ok(out)
        })
        .collect();
    let mut img = Image::new(cam.width, cam.height);
    for (r, c, rgb) in rendered?.into_iter().flatten() {
        img.set(r, c, rgb);
    }
    Ok(img)
}

/// Renders an arbitrary point field `f(p) -> (σ, rgb)` by quadrature.
pub fn render_field_image(
    cam: &CameraModel,
    samples: usize,
    clip: Option<&Aabb>,
    background: [f64; 3],
    field: impl Fn(&Vec3) -> FieldSample + Sync,
) -> Result<Image, RenderError> {
    cam.validate()?;
    let rows: Vec<Vec<[f64; 3]>> = (0..cam.height)
        .into_par_iter()
        .map(|r| {
            (0..cam.width)
                .map(|c| {
                    let ray = cam.ray(r, c)?;
                    let Some(s) =
                        sample_ray::<ChaCha8Rng>(&ray, cam.near, cam.far, samples, clip, None)
                    else {
                        return Ok(background);
                    };
                    let fs: Vec<FieldSample> = s.points().map(|p| field(&p)).collect();
                    let sig: Vec<f64> = fs.iter().map(|f| f.sigma).collect();
                    let col: Vec<[f64; 3]> = fs.iter().map(|f| f.rgb).collect();
                    volume_render(&sig, &col, &s.deltas, background)
                })
                .collect::<Result<Vec<_>, RenderError>>()
        })
        .collect::<Result<_, _>>()?;
    let mut img = Image::new(cam.width, cam.height);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, rgb) in row.into_iter().enumerate() {
            img.set(r, c, rgb);
        }
    }
    Ok(img)
}
