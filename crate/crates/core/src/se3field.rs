//! SE(3) transformation field: a coordinate network predicting a twist
//! `ξ = [ω, v]` at every `(p, t)`, nearest-reference selection, integration of
//! the twist over time and warping of sample points into canonical space.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aabb::Aabb;
use crate::ad::{
    Activation, AdError, Linear, Mlp, ParamGroup, ParamId, ParamStore, Tape, Tensor, UnaryOp, Var,
};
use crate::liegroup::{apply_point, compose, exp_se3, RigidTransform, Twist, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("reference schedule has no frames")]
    EmptySchedule,
    #[error("reference stride must be positive")]
    InvalidStride,
    #[error("quadrature needs at least one step")]
    InvalidSteps,
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// `exp(∫ ξ dτ)` with the integral taken by the trapezoid rule.
    #[default]
    Trapezoid,
    /// Ordered product of per-interval exponentials.
    ProductOfExponentials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// `ω ≡ 0`.
    TranslationOnly,
    /// `v ≡ 0`.
    RotationOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Se3FieldConfig {
    pub pos_frequencies: usize,
    pub time_frequencies: usize,
    pub hidden: usize,
    /// Linear layers per branch.
    pub layers: usize,
    pub integration: Integration,
    pub steps: usize,
}

impl Default for Se3FieldConfig {
    fn default() -> Self {
        Self {
            pos_frequencies: 6,
            time_frequencies: 4,
            hidden: 128,
            layers: 4,
            integration: Integration::Trapezoid,
            steps: 4,
        }
    }
}

impl Se3FieldConfig {
    pub fn encoding_width(&self) -> usize {
        posenc_width(self.pos_frequencies, self.time_frequencies)
    }
}

pub fn posenc_width(pos_frequencies: usize, time_frequencies: usize) -> usize {
    4 + 6 * pos_frequencies + 2 * time_frequencies
}

/// `[p, t, sin(2ᵏπp), cos(2ᵏπp) (k < L_p), sin(2ᵏπt), cos(2ᵏπt) (k < L_t)]`.
pub fn posenc(p: &Vec3, t: f64, pos_frequencies: usize, time_frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(posenc_width(pos_frequencies, time_frequencies));
    posenc_into(p, t, pos_frequencies, time_frequencies, &mut out);
    out
}

fn posenc_into(p: &Vec3, t: f64, lp: usize, lt: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&[p.x, p.y, p.z, t]);
    for k in 0..lp {
        let w = (1u64 << k) as f64 * PI;
        for c in 0..3 {
            out.push((w * p[c]).sin());
        }
        for c in 0..3 {
            out.push((w * p[c]).cos());
        }
    }
    for k in 0..lt {
        let w = (1u64 << k) as f64 * PI;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
}

/// Anything that yields a twist per `(p, t)` on a tape.
pub trait TwistModel {
    /// Angular and linear velocity, each `N×3`, for `points[i]` at `times[i]`.
    fn twists(
        &self,
        tape: &mut Tape<'_>,
        points: &[Vec3],
        times: &[f64],
    ) -> Result<(Var, Var), AdError>;
}

/// Parameter-free field given by a closure; used for oracles and tests.
pub struct AnalyticTwistField<F>(pub F);

impl<F: Fn(&Vec3, f64) -> Twist> TwistModel for AnalyticTwistField<F> {
    fn twists(
        &self,
        tape: &mut Tape<'_>,
        points: &[Vec3],
        times: &[f64],
    ) -> Result<(Var, Var), AdError> {
        let n = points.len();
        let mut w = Vec::with_capacity(3 * n);
        let mut v = Vec::with_capacity(3 * n);
        for (p, &t) in points.iter().zip(times) {
            let xi = (self.0)(p, t);
            w.extend_from_slice(xi.omega.as_slice());
            v.extend_from_slice(xi.v.as_slice());
        }
        Ok((
            tape.constant(Tensor::from_vec(n, 3, w)),
            tape.constant(Tensor::from_vec(n, 3, v)),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Se3Field {
    pub config: Se3FieldConfig,
    pub aabb: Aabb,
    pub omega: Mlp,
    pub v: Mlp,
    /// Global acceleration prior of the momentum term.
    pub accel: ParamId,
    pub ablation: Ablation,
}

impl Se3Field {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: Se3FieldConfig,
        aabb: Aabb,
        rng: &mut R,
    ) -> Result<Self, Se3Error> {
        if config.steps == 0 {
            return Err(Se3Error::InvalidSteps);
        }
        let sizes = branch_sizes(&config);
        let omega = Mlp::build(
            store,
            "se3.omega",
            ParamGroup::Motion,
            &sizes,
            Activation::Softplus,
            Activation::Identity,
            true,
            rng,
        )?;
        let v = Mlp::build(
            store,
            "se3.v",
            ParamGroup::Motion,
            &sizes,
            Activation::Softplus,
            Activation::Identity,
            true,
            rng,
        )?;
        let accel = store.add("se3.accel", ParamGroup::Motion, Tensor::zeros(1, 3))?;
        Ok(Self {
            config,
            aabb,
            omega,
            v,
            accel,
            ablation: Ablation::Full,
        })
    }

    pub fn bind(store: &ParamStore, config: Se3FieldConfig, aabb: Aabb) -> Result<Self, Se3Error> {
        let id = |name: String| store.id(&name).ok_or(AdError::UnknownParam(name));
        let n = branch_sizes(&config).len() - 1;
        let branch = |prefix: &str| -> Result<Mlp, AdError> {
            let mut layers = Vec::with_capacity(n);
            let mut activations = Vec::with_capacity(n);
            for i in 0..n {
                layers.push(Linear {
                    weight: id(format!("{prefix}.{i}.weight"))?,
                    bias: id(format!("{prefix}.{i}.bias"))?,
                });
                activations.push(if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Softplus
                });
            }
            Ok(Mlp {
                layers,
                activations,
            })
        };
        Ok(Self {
            omega: branch("se3.omega")?,
            v: branch("se3.v")?,
            accel: id("se3.accel".into())?,
            config,
            aabb,
            ablation: Ablation::Full,
        })
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Positional encoding of world-space `p` (normalised to `[−1, 1]³`).
    pub fn encode(&self, p: &Vec3, t: f64) -> Vec<f64> {
        posenc(
            &self.normalize(p),
            t,
            self.config.pos_frequencies,
            self.config.time_frequencies,
        )
    }

    fn normalize(&self, p: &Vec3) -> Vec3 {
        let u = self.aabb.to_unit(p);
        u * 2.0 - Vec3::repeat(1.0)
    }

    pub fn encode_batch(&self, points: &[Vec3], times: &[f64]) -> Tensor {
        let w = self.config.encoding_width();
        let mut data = Vec::with_capacity(points.len() * w);
        for (p, &t) in points.iter().zip(times) {
            posenc_into(
                &self.normalize(p),
                t,
                self.config.pos_frequencies,
                self.config.time_frequencies,
                &mut data,
            );
        }
        Tensor::from_vec(points.len(), w, data)
    }

    /// Plain single-point query.
    pub fn twist_query(&self, store: &ParamStore, p: &Vec3, t: f64) -> Result<Twist, AdError> {
        let mut tape = Tape::new(store);
        let (w, v) = self.twists(&mut tape, &[*p], &[t])?;
        let (w, v) = (tape.value(w), tape.value(v));
        Ok(Twist::new(
            Vec3::from_row_slice(w.row(0)),
            Vec3::from_row_slice(v.row(0)),
        ))
    }

    /// Warps points observed at `t_i` into the canonical space of the nearest
    /// reference. Reference frames pass through untouched.
    pub fn warp_to_canonical(
        &self,
        tape: &mut Tape<'_>,
        schedule: &ReferenceSchedule,
        points: &[Vec3],
        t_i: f64,
    ) -> Result<(Var, RefFrame), Se3Error> {
        let r = schedule.nearest_ref(t_i)?;
        if r.time == t_i {
            return Ok((tape.constant(points_tensor(points)), r));
        }
        let warped = warp_points(
            tape,
            self,
            points,
            t_i,
            r.time,
            self.config.steps,
            self.config.integration,
        )?;
        Ok((warped, r))
    }

    pub fn warp_point(
        &self,
        store: &ParamStore,
        schedule: &ReferenceSchedule,
        p: &Vec3,
        t_i: f64,
    ) -> Result<(Vec3, RefFrame), Se3Error> {
        let mut tape = Tape::new(store);
        let (w, r) = self.warp_to_canonical(&mut tape, schedule, &[*p], t_i)?;
        Ok((Vec3::from_row_slice(tape.value(w).row(0)), r))
    }
}

fn branch_sizes(config: &Se3FieldConfig) -> Vec<usize> {
    let mut sizes = vec![config.encoding_width()];
    sizes.extend(std::iter::repeat_n(
        config.hidden,
        config.layers.saturating_sub(1),
    ));
    sizes.push(3);
    sizes
}

impl TwistModel for Se3Field {
    fn twists(
        &self,
        tape: &mut Tape<'_>,
        points: &[Vec3],
        times: &[f64],
    ) -> Result<(Var, Var), AdError> {
        let n = points.len();
        let enc = tape.constant(self.encode_batch(points, times));
        let w = match self.ablation {
            Ablation::TranslationOnly => tape.constant(Tensor::zeros(n, 3)),
            _ => self.omega.forward(tape, enc)?,
        };
        let v = match self.ablation {
            Ablation::RotationOnly => tape.constant(Tensor::zeros(n, 3)),
            _ => self.v.forward(tape, enc)?,
        };
        Ok((w, v))
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::from_vec(
        points.len(),
        3,
        points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    )
}

/// Trapezoid nodes and weights for `∫_{a}^{b}` with `steps` intervals.
pub fn trapezoid_nodes(a: f64, b: f64, steps: usize) -> Vec<(f64, f64)> {
    let h = (b - a) / steps as f64;
    (0..=steps)
        .map(|j| {
            let w = if j == 0 || j == steps { 0.5 * h } else { h };
            (a + j as f64 * h, w)
        })
        .collect()
}

/// `exp(ξ)·p` row by row: `ω`, `v`, `points` are all N×3.
pub fn apply_exp(tape: &mut Tape<'_>, omega: Var, v: Var, points: Var) -> Var {
    let s = tape.row_dot(omega, omega);
    let a = tape.unary(s, UnaryOp::ExpCoeffA);
    let b = tape.unary(s, UnaryOp::ExpCoeffB);
    let c = tape.unary(s, UnaryOp::ExpCoeffC);
    let wp = tape.cross(omega, points);
    let wwp = tape.cross(omega, wp);
    let wv = tape.cross(omega, v);
    let wwv = tape.cross(omega, wv);
    let awp = tape.mul(a, wp);
    let bwwp = tape.mul(b, wwp);
    let bwv = tape.mul(b, wv);
    let cwwv = tape.mul(c, wwv);
    let rp = tape.add(points, awp);
    let rp = tape.add(rp, bwwp);
    let t = tape.add(v, bwv);
    let t = tape.add(t, cwwv);
    tape.add(rp, t)
}

/// Warps `points` from time `t_i` to `t_k` through the integrated twist,
/// queried at the fixed starting positions.
pub fn warp_points<M: TwistModel + ?Sized>(
    tape: &mut Tape<'_>,
    model: &M,
    points: &[Vec3],
    t_i: f64,
    t_k: f64,
    steps: usize,
    integration: Integration,
) -> Result<Var, Se3Error> {
    if steps == 0 {
        return Err(Se3Error::InvalidSteps);
    }
    let n = points.len();
    let nodes = trapezoid_nodes(t_i, t_k, steps);
    let mut all_points = Vec::with_capacity(n * nodes.len());
    let mut all_times = Vec::with_capacity(n * nodes.len());
    for &(tau, _) in &nodes {
        all_points.extend_from_slice(points);
        all_times.extend(std::iter::repeat_n(tau, n));
    }
    let (w_all, v_all) = model.twists(tape, &all_points, &all_times)?;
    let mut p = tape.constant(points_tensor(points));
    match integration {
        Integration::Trapezoid => {
            let mut acc: Option<(Var, Var)> = None;
            for (j, &(_, wt)) in nodes.iter().enumerate() {
                let wj = tape.slice_rows(w_all, j * n, n);
                let vj = tape.slice_rows(v_all, j * n, n);
                let wj = tape.scale(wj, wt);
                let vj = tape.scale(vj, wt);
                acc = Some(match acc {
                    None => (wj, vj),
                    Some((wa, va)) => (tape.add(wa, wj), tape.add(va, vj)),
                });
            }
            let (w, v) = acc.expect("at least two nodes");
            p = apply_exp(tape, w, v, p);
        }
        Integration::ProductOfExponentials => {
            let h = (t_k - t_i) / steps as f64;
            for j in 0..steps {
                let w0 = tape.slice_rows(w_all, j * n, n);
                let w1 = tape.slice_rows(w_all, (j + 1) * n, n);
                let v0 = tape.slice_rows(v_all, j * n, n);
                let v1 = tape.slice_rows(v_all, (j + 1) * n, n);
                let w = tape.add(w0, w1);
                let w = tape.scale(w, 0.5 * h);
                let v = tape.add(v0, v1);
                let v = tape.scale(v, 0.5 * h);
                p = apply_exp(tape, w, v, p);
            }
        }
    }
    Ok(p)
}

/// The transform carrying `p` from `t_i` to `t_k`.
pub fn integrate_transform<M: TwistModel + ?Sized>(
    model: &M,
    store: &ParamStore,
    p: &Vec3,
    t_i: f64,
    t_k: f64,
    steps: usize,
    integration: Integration,
) -> Result<RigidTransform, Se3Error> {
    if steps == 0 {
        return Err(Se3Error::InvalidSteps);
    }
    let nodes = trapezoid_nodes(t_i, t_k, steps);
    let mut tape = Tape::new(store);
    let pts = vec![*p; nodes.len()];
    let times: Vec<f64> = nodes.iter().map(|n| n.0).collect();
    let (w, v) = model.twists(&mut tape, &pts, &times)?;
    let (w, v) = (tape.value(w), tape.value(v));
    let xi = |j: usize| {
        Twist::new(
            Vec3::from_row_slice(w.row(j)),
            Vec3::from_row_slice(v.row(j)),
        )
    };
    Ok(match integration {
        Integration::Trapezoid => {
            let mut bar = Twist::zero();
            for (j, &(_, wt)) in nodes.iter().enumerate() {
                bar = bar + xi(j).scaled(wt);
            }
            exp_se3(&bar)
        }
        Integration::ProductOfExponentials => {
            let h = (t_k - t_i) / steps as f64;
            let mut g = RigidTransform::identity();
            for j in 0..steps {
                let step = (xi(j) + xi(j + 1)).scaled(0.5 * h);
                g = compose(&exp_se3(&step), &g);
            }
            g
        }
    })
}

/// Plain warp of one point with an explicit target time.
pub fn warp_point_to<M: TwistModel + ?Sized>(
    model: &M,
    store: &ParamStore,
    p: &Vec3,
    t_i: f64,
    t_k: f64,
    steps: usize,
    integration: Integration,
) -> Result<Vec3, Se3Error> {
    Ok(apply_point(
        &integrate_transform(model, store, p, t_i, t_k, steps, integration)?,
        p,
    ))
}

/// A reference frame chosen for a query time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefFrame {
    pub frame: usize,
    pub time: f64,
}

/// Frames with `i mod stride == 0` act as references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSchedule {
    pub stride: usize,
    /// Normalised timestamp of every frame covered by the schedule.
    pub timestamps: Vec<f64>,
}

impl ReferenceSchedule {
    pub fn new(timestamps: Vec<f64>, stride: usize) -> Result<Self, Se3Error> {
        if stride == 0 {
            return Err(Se3Error::InvalidStride);
        }
        if timestamps.is_empty() {
            return Err(Se3Error::EmptySchedule);
        }
        Ok(Self { stride, timestamps })
    }

    /// First `frame_count` frames of a sequence of `total_frames` frames with
    /// timestamps `f / (total_frames − 1)`.
    pub fn uniform(
        frame_count: usize,
        total_frames: usize,
        stride: usize,
    ) -> Result<Self, Se3Error> {
        let denom = (total_frames.max(2) - 1) as f64;
        Self::new((0..frame_count).map(|f| f as f64 / denom).collect(), stride)
    }

    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn references(&self) -> impl Iterator<Item = RefFrame> + '_ {
        self.timestamps
            .iter()
            .enumerate()
            .step_by(self.stride)
            .map(|(frame, &time)| RefFrame { frame, time })
    }

    pub fn is_reference_frame(&self, frame: usize) -> bool {
        frame < self.timestamps.len() && frame % self.stride == 0
    }

    /// Nearest reference; ties go to the earlier one.
    pub fn nearest_ref(&self, t: f64) -> Result<RefFrame, Se3Error> {
        let mut best: Option<(RefFrame, f64)> = None;
        for r in self.references() {
            let d = (r.time - t).abs();
            // Equal distances differ by rounding only; the tolerance keeps the
            // earlier reference.
            let better = match best {
                None => true,
                Some((_, bd)) => d < bd - 1e-12 * (1.0 + bd),
            };
            if better {
                best = Some((r, d));
            }
        }
        best.map(|b| b.0).ok_or(Se3Error::EmptySchedule)
    }

    pub fn is_reference_time(&self, t: f64) -> bool {
        self.nearest_ref(t).map(|r| r.time == t).unwrap_or(false)
    }
}
