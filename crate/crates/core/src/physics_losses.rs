//! Photometric loss and the motion regularisers: divergence of the induced
//! velocity, a momentum (material derivative) residual, and the SE(3)
//! structure term.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aabb::Aabb;
use crate::ad::{AdError, Tape, Tensor, UnaryOp, Var};
use crate::liegroup::{RigidTransform, Twist, Vec3};
use crate::render::Image;
use crate::se3field::{points_tensor, TwistModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceTarget {
    /// Divergence of `u = ω × p + v`.
    #[default]
    Induced,
    /// Divergence of `v` alone.
    VOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhotometricNorm {
    #[default]
    Mse,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_div: f64,
    pub lambda_mom: f64,
    pub lambda_se3: f64,
    /// Weight of the translation term inside the SE(3) structure loss.
    pub lambda_trans: f64,
    pub divergence_target: DivergenceTarget,
    pub photometric: PhotometricNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_div: 1e-3,
            lambda_mom: 1e-3,
            lambda_se3: 1e-4,
            lambda_trans: 1.0,
            divergence_target: DivergenceTarget::Induced,
            photometric: PhotometricNorm::Mse,
        }
    }
}

/// `N` points and `M` times; the losses average over all `N·M` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerBatch {
    pub points: Vec<Vec3>,
    pub times: Vec<f64>,
    pub h_space: f64,
    pub h_time: f64,
}

impl RegularizerBatch {
    pub const DEFAULT_STEP: f64 = 1e-4;

    pub fn new(
        points: Vec<Vec3>,
        times: Vec<f64>,
        h_space: f64,
        h_time: f64,
    ) -> Result<Self, LossError> {
        if points.is_empty() || times.is_empty() {
            return Err(LossError::EmptyInput);
        }
        Ok(Self {
            points,
            times,
            h_space,
            h_time,
        })
    }

    /// Uniform points in the box shrunk by the step, uniform times in `[0, 1]`.
    pub fn sample<R: Rng>(aabb: &Aabb, n: usize, m: usize, rng: &mut R) -> Result<Self, LossError> {
        let h = Self::DEFAULT_STEP;
        let inner = aabb.shrunk(h);
        let points = (0..n)
            .map(|_| Vec3::from_fn(|i, _| rng.random_range(inner.min[i]..inner.max[i])))
            .collect();
        let times = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        Self::new(points, times, h, h)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (Vec3, f64)> + '_ {
        self.points
            .iter()
            .flat_map(|p| self.times.iter().map(move |&t| (*p, t)))
    }

    pub fn len(&self) -> usize {
        self.points.len() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `ω × p + v` row by row.
pub fn induced_velocity_tape(tape: &mut Tape<'_>, omega: Var, v: Var, points: Var) -> Var {
    let wp = tape.cross(omega, points);
    tape.add(wp, v)
}

pub fn induced_velocity<M: TwistModel + ?Sized>(
    model: &M,
    store: &crate::ad::ParamStore,
    p: &Vec3,
    t: f64,
) -> Result<Vec3, LossError> {
    let mut tape = Tape::new(store);
    let (w, v) = model.twists(&mut tape, &[*p], &[t])?;
    let pv = tape.constant(points_tensor(&[*p]));
    let u = induced_velocity_tape(&mut tape, w, v, pv);
    Ok(Vec3::from_row_slice(tape.value(u).row(0)))
}

/// Field values on the central-difference stencil of every batch pair.
pub struct Stencil {
    pub rows: usize,
    /// Twist and velocity at the stencil centre.
    pub omega: Var,
    pub v: Var,
    pub u: Var,
    /// `∂u/∂p_j` and `∂v/∂p_j`, one N×3 block per axis.
    pub du_dp: [Var; 3],
    pub dv_dp: [Var; 3],
    pub du_dt: Var,
}

/// Evaluates the model at 9 points per pair (centre, ±h along each axis,
/// ±h in time) in a single batch.
pub fn stencil<M: TwistModel + ?Sized>(
    tape: &mut Tape<'_>,
    model: &M,
    batch: &RegularizerBatch,
) -> Result<Stencil, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let (h, ht) = (batch.h_space, batch.h_time);
    let pairs: Vec<(Vec3, f64)> = batch.pairs().collect();
    let n = pairs.len();
    let mut offsets: Vec<(Vec3, f64)> = vec![(Vec3::zeros(), 0.0)];
    for j in 0..3 {
        let e = Vec3::from_fn(|i, _| if i == j { h } else { 0.0 });
        offsets.push((e, 0.0));
        offsets.push((-e, 0.0));
    }
    offsets.push((Vec3::zeros(), ht));
    offsets.push((Vec3::zeros(), -ht));

    let mut pts = Vec::with_capacity(9 * n);
    let mut times = Vec::with_capacity(9 * n);
    for (dp, dt) in &offsets {
        for (p, t) in &pairs {
            pts.push(p + dp);
            times.push(t + dt);
        }
    }
    let (w_all, v_all) = model.twists(tape, &pts, &times)?;
    let p_all = tape.constant(points_tensor(&pts));
    let u_all = induced_velocity_tape(tape, w_all, v_all, p_all);
    let block = |tape: &mut Tape<'_>, x: Var, k: usize| tape.slice_rows(x, k * n, n);
    let diff = |tape: &mut Tape<'_>, x: Var, k: usize, step: f64| {
        let plus = block(tape, x, k);
        let minus = block(tape, x, k + 1);
        let d = tape.sub(plus, minus);
        tape.scale(d, 0.5 / step)
    };
    let du_dp = [
        diff(tape, u_all, 1, h),
        diff(tape, u_all, 3, h),
        diff(tape, u_all, 5, h),
    ];
    let dv_dp = [
        diff(tape, v_all, 1, h),
        diff(tape, v_all, 3, h),
        diff(tape, v_all, 5, h),
    ];
    let du_dt = diff(tape, u_all, 7, ht);
    Ok(Stencil {
        rows: n,
        omega: block(tape, w_all, 0),
        v: block(tape, v_all, 0),
        u: block(tape, u_all, 0),
        du_dp,
        dv_dp,
        du_dt,
    })
}

impl Stencil {
    /// Mean `|∇·u|` (or `|∇·v|`).
    pub fn divergence(&self, tape: &mut Tape<'_>, target: DivergenceTarget) -> Var {
        let cols = match target {
            DivergenceTarget::Induced => self.du_dp,
            DivergenceTarget::VOnly => self.dv_dp,
        };
        let mut div = tape.slice_cols(cols[0], 0, 1);
        for (j, &c) in cols.iter().enumerate().skip(1) {
            let d = tape.slice_cols(c, j, 1);
            div = tape.add(div, d);
        }
        let a = tape.abs(div);
        tape.mean(a)
    }

    /// Mean `‖∂u/∂t + (u·∇)u − a‖`; `accel` is 1×3.
    pub fn momentum(&self, tape: &mut Tape<'_>, accel: Var) -> Var {
        let mut r = self.du_dt;
        for j in 0..3 {
            let uj = tape.slice_cols(self.u, j, 1);
            let adv = tape.mul(uj, self.du_dp[j]);
            r = tape.add(r, adv);
        }
        let r = tape.sub(r, accel);
        let norm = tape.row_norm(r);
        tape.mean(norm)
    }

    /// `(ortho, trans)` terms of the structure loss on `exp(ξ)` at the centres.
    pub fn se3_struct(&self, tape: &mut Tape<'_>) -> (Var, Var) {
        let ortho = rotation_ortho_tape(tape, self.omega, self.rows);
        let vn = tape.row_norm(self.v);
        (ortho, tape.mean(vn))
    }
}

/// Mean `‖RᵀR − I‖_F` of `R = exp(ω^)` built on the tape from its columns.
pub fn rotation_ortho_tape(tape: &mut Tape<'_>, omega: Var, rows: usize) -> Var {
    let s = tape.row_dot(omega, omega);
    let a = tape.unary(s, UnaryOp::ExpCoeffA);
    let b = tape.unary(s, UnaryOp::ExpCoeffB);
    let mut cols = Vec::with_capacity(3);
    for j in 0..3 {
        let mut e = Tensor::zeros(rows, 3);
        for r in 0..rows {
            e.set(r, j, 1.0);
        }
        let e = tape.constant(e);
        let we = tape.cross(omega, e);
        let wwe = tape.cross(omega, we);
        let awe = tape.mul(a, we);
        let bwwe = tape.mul(b, wwe);
        let c = tape.add(e, awe);
        cols.push(tape.add(c, bwwe));
    }
    let mut entries = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            let d = tape.row_dot(cols[i], cols[j]);
            entries.push(if i == j { tape.offset(d, -1.0) } else { d });
        }
    }
    let gram = tape.concat_cols(&entries);
    let norm = tape.row_norm(gram);
    tape.mean(norm)
}

pub fn divergence_loss<M: TwistModel + ?Sized>(
    tape: &mut Tape<'_>,
    model: &M,
    batch: &RegularizerBatch,
    target: DivergenceTarget,
) -> Result<Var, LossError> {
    let s = stencil(tape, model, batch)?;
    Ok(s.divergence(tape, target))
}

pub fn momentum_loss<M: TwistModel + ?Sized>(
    tape: &mut Tape<'_>,
    model: &M,
    batch: &RegularizerBatch,
    accel: Var,
) -> Result<Var, LossError> {
    let s = stencil(tape, model, batch)?;
    Ok(s.momentum(tape, accel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Se3StructLoss {
    pub ortho: f64,
    pub trans: f64,
}

impl Se3StructLoss {
    pub fn total(&self) -> f64 {
        self.ortho + self.trans
    }
}

/// `(1/N) Σ ‖RᵢRᵢᵀ − I‖_F` and `(1/N) Σ ‖vᵢ‖`.
pub fn se3_struct_loss(
    transforms: &[RigidTransform],
    twists: &[Twist],
) -> Result<Se3StructLoss, LossError> {
    if transforms.is_empty() || twists.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let ortho = transforms
        .iter()
        .map(|g| g.orthonormality_error())
        .sum::<f64>()
        / transforms.len() as f64;
    let trans = twists.iter().map(|x| x.v.norm()).sum::<f64>() / twists.len() as f64;
    Ok(Se3StructLoss { ortho, trans })
}

/// Mean squared (or absolute) error over the pixels selected by `mask`.
pub fn photometric_loss(
    rendered: &Image,
    reference: &Image,
    mask: Option<&[bool]>,
    norm: PhotometricNorm,
) -> Result<f64, LossError> {
    rendered
        .same_shape(reference)
        .map_err(|e| LossError::ShapeMismatch(e.to_string()))?;
    let pixels = rendered.width * rendered.height;
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(LossError::ShapeMismatch(format!(
                "mask has {} entries for {pixels} pixels",
                m.len()
            )));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for px in 0..pixels {
        if mask.is_some_and(|m| !m[px]) {
            continue;
        }
        for c in 0..3 {
            let d = rendered.data[3 * px + c] - reference.data[3 * px + c];
            sum += match norm {
                PhotometricNorm::Mse => d * d,
                PhotometricNorm::L1 => d.abs(),
            };
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptyInput);
    }
    Ok(sum / count as f64)
}

/// Photometric loss of predicted colours (`rays × 3`) against a target.
pub fn photometric_tape(
    tape: &mut Tape<'_>,
    predicted: Var,
    target: Tensor,
    norm: PhotometricNorm,
) -> Result<Var, LossError> {
    if tape.shape(predicted) != target.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            tape.shape(predicted),
            target.shape()
        )));
    }
    let t = tape.constant(target);
    let d = tape.sub(predicted, t);
    let e = match norm {
        PhotometricNorm::Mse => tape.unary(d, UnaryOp::Square),
        PhotometricNorm::L1 => tape.abs(d),
    };
    Ok(tape.mean(e))
}

/// Regulariser values on one batch, already on the tape.
pub struct RegularizerTerms {
    pub divergence: Var,
    pub momentum: Var,
    pub ortho: Var,
    pub trans: Var,
}

impl RegularizerTerms {
    pub fn compute<M: TwistModel + ?Sized>(
        tape: &mut Tape<'_>,
        model: &M,
        batch: &RegularizerBatch,
        accel: Var,
        target: DivergenceTarget,
    ) -> Result<Self, LossError> {
        let s = stencil(tape, model, batch)?;
        let divergence = s.divergence(tape, target);
        let momentum = s.momentum(tape, accel);
        let (ortho, trans) = s.se3_struct(tape);
        Ok(Self {
            divergence,
            momentum,
            ortho,
            trans,
        })
    }

    /// `λ_div·L_div + λ_mom·L_mom + λ_se3·(L_ortho + λ_trans·L_trans)`.
    pub fn weighted(&self, tape: &mut Tape<'_>, w: &LossWeights) -> Var {
        let div = tape.scale(self.divergence, w.lambda_div);
        let mom = tape.scale(self.momentum, w.lambda_mom);
        let tr = tape.scale(self.trans, w.lambda_trans);
        let se3 = tape.add(self.ortho, tr);
        let se3 = tape.scale(se3, w.lambda_se3);
        let a = tape.add(div, mom);
        tape.add(a, se3)
    }
}
